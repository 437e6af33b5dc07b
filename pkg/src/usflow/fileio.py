"""Header-plus-raw file layout shared by ``.rfd`` frames and ``.gt`` flow files.

Each file starts with one UTF-8 JSON line, then raw little-endian float32
samples in axial-major order (all of plane 0, then plane 1, ...).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .rf import RfFrame

__all__ = [
    "FileFormatError",
    "read_raw",
    "write_raw",
    "read_rfd",
    "write_rfd",
    "read_flow",
    "write_flow",
]

_DTYPE = "f32le"


class FileFormatError(ValueError):
    pass


def write_raw(path, header: dict, planes: np.ndarray) -> None:
    planes = np.asarray(planes)
    if planes.ndim == 2:
        planes = planes[None]
    header = dict(header)
    header.setdefault("axial", int(planes.shape[1]))
    header.setdefault("lateral", int(planes.shape[2]))
    header["dtype"] = _DTYPE
    line = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(line + b"\n")
        fh.write(np.ascontiguousarray(planes, dtype="<f4").tobytes())


def read_raw(path) -> tuple[dict, np.ndarray]:
    """Return ``(header, planes)`` with planes shaped ``(n, axial, lateral)``."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FileFormatError(f"{path}: missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: bad header: {exc}") from None
    if header.get("dtype") != _DTYPE:
        raise FileFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    try:
        axial, lateral = int(header["axial"]), int(header["lateral"])
    except (KeyError, TypeError, ValueError):
        raise FileFormatError(f"{path}: header lacks axial/lateral sizes") from None
    n_planes = int(header.get("planes", 1))
    payload = data[nl + 1:]
    expected = 4 * n_planes * axial * lateral
    if len(payload) != expected:
        raise FileFormatError(
            f"{path}: header declares {expected} payload bytes, file has {len(payload)}"
        )
    planes = np.frombuffer(payload, dtype="<f4").reshape(n_planes, axial, lateral)
    return header, planes.astype(np.float64)


def write_rfd(path, frame: RfFrame) -> None:
    header = {
        "sampling_freq_hz": frame.sampling_freq_hz,
        "center_freq_hz": frame.center_freq_hz,
        "frame_id": frame.frame_id,
    }
    write_raw(path, header, frame.samples)


def read_rfd(path) -> RfFrame:
    header, planes = read_raw(path)
    if planes.shape[0] != 1:
        raise FileFormatError(f"{path}: RF file must hold one plane")
    for key in ("sampling_freq_hz", "center_freq_hz"):
        if key not in header:
            raise FileFormatError(f"{path}: header lacks {key}")
    return RfFrame(
        planes[0],
        float(header["sampling_freq_hz"]),
        float(header["center_freq_hz"]),
        header.get("frame_id"),
    )


def write_flow(path, axial: np.ndarray, lateral: np.ndarray, **extra) -> None:
    """Write a 2-plane displacement file (axial, lateral), units of pixels."""
    header = {"planes": 2, "units": "pixels", **extra}
    write_raw(path, header, np.stack([axial, lateral]))


def read_flow(path) -> tuple[np.ndarray, np.ndarray]:
    header, planes = read_raw(path)
    if planes.shape[0] != 2:
        raise FileFormatError(f"{path}: flow file must hold 2 planes, has {planes.shape[0]}")
    return planes[0], planes[1]
