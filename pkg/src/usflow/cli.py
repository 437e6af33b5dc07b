"""Command-line entry point: ``usflow <command> [--config PATH] [--seed N] [--out DIR] [--set K=V]``.

Every command writes its resolved configuration next to its outputs, so a
run can be repeated from that file alone. Failures print one JSON line on
stderr (``{"code": ..., "message": ...}``) and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .backbone import DirectField, build_backbone, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .fileio import FileFormatError, read_flow, read_raw, read_rfd, write_flow, write_raw, write_rfd
from .phantom import GroundTruthDeformation, Inclusion, simulate_pair
from .rf import bmode_image
from .strain import StrainMap, WindowPair, evaluate_windows, lsq_strain
from .train import (Pair, SolveDiverged, TrainConfig, TrainingAborted, load_manifest,
                    pretrain_supervised, run_direct_solve, run_finetune)
from .warp import DisplacementField

log = logging.getLogger("usflow")


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io_error", f"cannot create output directory {out}: {exc}") from None
    return out


def _write_resolved(out: Path, cfg: RunConfig) -> None:
    (out / "resolved_config.json").write_text(cfg.to_json() + "\n")


def _pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _deformation(cfg: RunConfig) -> GroundTruthDeformation:
    sim = cfg.simulate
    grid = sim.grid
    if sim.kind == "uniform_strain":
        return GroundTruthDeformation("uniform_strain", sim.axial_strain)
    if sim.kind == "inclusion":
        inc = sim.inclusion
        center = inc.center_mm
        if center is None:
            (a0, a1), (l0, l1) = grid.extent_mm
            center = ((a0 + a1) / 2, (l0 + l1) / 2)
        return GroundTruthDeformation("inclusion", sim.axial_strain,
                                      Inclusion(tuple(center), inc.radius_mm, inc.strain_ratio))
    if sim.kind == "shift":
        shift = np.empty((2, *grid.shape))
        shift[0], shift[1] = sim.shift_px
        return GroundTruthDeformation("custom_grid", grid=shift)
    raise ConfigError(f"simulate.kind: unknown kind {sim.kind!r}")


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "dataset")
    sim = cfg.simulate
    if sim.n_pairs < 0:
        raise ConfigError("simulate.n_pairs must be >= 0")
    deformation = _deformation(cfg)
    entries = []
    if sim.n_pairs == 0:
        log.warning("simulate.n_pairs is 0; writing an empty manifest")
    for i in range(sim.n_pairs):
        pid = f"pair_{i:03d}"
        f1, f2, truth = simulate_pair(deformation, _pair_seed(cfg.seed, i), sim.grid, sim.psf,
                                      sim.density, pid)
        write_rfd(out / f"{pid}_a.rfd", f1)
        write_rfd(out / f"{pid}_b.rfd", f2)
        write_flow(out / f"{pid}.gt", truth.axial, truth.lateral)
        entries.append({"id": pid, "frame1": f"{pid}_a.rfd", "frame2": f"{pid}_b.rfd",
                        "truth": f"{pid}.gt"})
        log.info("simulated %s", pid)
    (out / "manifest.json").write_text(json.dumps({"pairs": entries}, indent=2) + "\n")
    _write_resolved(out, cfg)
    print(out / "manifest.json")
    return 0


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(seed=cfg.seed, loss=cfg.loss, **asdict(cfg.train))


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "run")
    pairs = load_manifest(args.manifest)
    if not pairs:
        raise TrainingAborted("empty dataset manifest")
    torch.manual_seed(cfg.seed)
    if args.init:
        backbone, _ = load_checkpoint(args.init)
    else:
        backbone = build_backbone(cfg.backbone.descriptor(pairs[0].frame1.shape, cfg.seed))
    if cfg.pretrain.manifest and cfg.pretrain.epochs > 0:
        labelled = load_manifest(cfg.pretrain.manifest)
        history = pretrain_supervised(backbone, labelled, cfg.pretrain.epochs,
                                      cfg.pretrain.learning_rate, seed=cfg.seed)
        log.info("pretraining finished, endpoint error %.4f px", history[-1])
        save_checkpoint(backbone, out / "checkpoint_pretrained")
    _write_resolved(out, cfg)
    try:
        backbone, train_log = run_finetune(backbone, pairs, _train_config(cfg), out_dir=out)
    except TrainingAborted as exc:
        if exc.log is not None:
            exc.log.write_csv(out / "train_log.csv")
        raise
    train_log.write_csv(out / "train_log.csv")
    (out / "epochs.json").write_text(json.dumps(train_log.epochs, indent=2) + "\n")
    print(save_checkpoint(backbone, out / "checkpoint_final", step=len(train_log.steps)))
    return 0


def _select_pair(args) -> Pair:
    if args.frames:
        return Pair("pair", read_rfd(args.frames[0]), read_rfd(args.frames[1]))
    if not args.manifest:
        raise CliError("usage", "give --manifest (with optional --pair) or --frames A B", 2)
    pairs = load_manifest(args.manifest)
    if not pairs:
        raise CliError("empty_manifest", f"{args.manifest} lists no pairs")
    if args.pair is None:
        return pairs[0]
    for p in pairs:
        if p.pair_id == args.pair:
            return p
    raise CliError("unknown_pair", f"pair {args.pair!r} not in {args.manifest}")


def _save_png(path: Path, image: np.ndarray, cmap: str, vmin=None, vmax=None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.imsave(path, image, cmap=cmap, vmin=vmin, vmax=vmax)


def _strain_png(path: Path, strain: np.ndarray) -> None:
    lo, hi = np.percentile(strain, [1, 99])
    _save_png(path, strain, "gray", lo, hi)


def cmd_infer(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "infer")
    pair = _select_pair(args)
    if args.checkpoint:
        backbone, _ = load_checkpoint(args.checkpoint)
        if isinstance(backbone, DirectField) and backbone.shape != pair.frame1.shape:
            raise CliError("shape_mismatch", f"checkpoint field is {backbone.shape}, "
                                             f"pair {pair.pair_id} is {pair.frame1.shape}")
        s1, s2 = pair.stacks(cfg.train.normalize)
        with torch.no_grad():
            flow = DisplacementField.from_tensor(backbone.flow(s1, s2), "forward")
    else:
        torch.manual_seed(cfg.seed)
        flow = run_direct_solve(pair, cfg.solve_config())
    target = out / f"flow_{pair.pair_id}.gt"
    write_flow(target, flow.axial, flow.lateral, pair_id=pair.pair_id)
    if cfg.images or args.images:
        _save_png(out / f"bmode_{pair.pair_id}.png", bmode_image(pair.frame1), "gray", -50, 0)
        _strain_png(out / f"strain_{pair.pair_id}.png",
                    lsq_strain(flow.axial, cfg.strain.window_len).values)
    _write_resolved(out, cfg)
    print(target)
    return 0


def cmd_strain(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "strain")
    axial, _ = read_flow(args.flow)
    strain = lsq_strain(axial, cfg.strain.window_len)
    target = out / (Path(args.flow).stem + ".strain")
    write_raw(target, {"quantity": "axial_strain", "window_len": strain.window_len}, strain.values)
    if cfg.images or args.images:
        _strain_png(target.with_suffix(".png"), strain.values)
    _write_resolved(out, cfg)
    print(target)
    return 0


def _windows(args, cfg: RunConfig) -> list:
    raw = list(cfg.windows)
    if args.windows:
        doc = json.loads(Path(args.windows).read_text())
        raw = doc["windows"] if isinstance(doc, dict) else doc
    if not raw:
        raise CliError("invalid_windows", "no window pairs configured (config 'windows' or --windows)", 2)
    try:
        return [WindowPair.from_dict(w) for w in raw]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError("invalid_windows", f"malformed window pair: {exc}", 2) from None


def _read_strain(path) -> StrainMap:
    header, planes = read_raw(path)
    if planes.shape[0] != 1:
        raise FileFormatError(f"{path}: strain file must hold one plane")
    return StrainMap(planes[0], int(header.get("window_len", 0)))


def cmd_metrics(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "metrics")
    strain = _read_strain(args.strain)
    windows = _windows(args, cfg)
    try:
        report = evaluate_windows(strain, windows)
    except ValueError as exc:
        raise CliError("invalid_windows", str(exc), 2) from None
    for e in report.entries:
        if e.overlap:
            log.warning(f"window pair {e.label!r}: target and background overlap")
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.json").write_text(report.to_json() + "\n")
    _write_resolved(out, cfg)
    print(out / "metrics.json")
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    """Strain, window metrics and ground-truth errors for every inferred pair."""
    out = _out_dir(args, "report")
    pairs = load_manifest(args.manifest)
    flows = Path(args.flows)
    windows = _windows(args, cfg) if (cfg.windows or args.windows) else []
    rows = []
    for p in pairs:
        path = flows / f"flow_{p.pair_id}.gt"
        if not path.exists():
            log.warning("no flow for %s", p.pair_id)
            continue
        axial, lateral = read_flow(path)
        strain = lsq_strain(axial, cfg.strain.window_len)
        row = {"pair_id": p.pair_id, "mean_strain": float(strain.values.mean()),
               "mean_abs_lateral": float(np.abs(lateral).mean())}
        if p.truth is not None:
            row["axial_mae"] = float(np.abs(axial - p.truth.axial).mean())
            row["lateral_mae"] = float(np.abs(lateral - p.truth.lateral).mean())
        if windows:
            row["metrics"] = json.loads(evaluate_windows(strain, windows).to_json())["windows"]
        if cfg.images or args.images:
            _strain_png(out / f"strain_{p.pair_id}.png", strain.values)
        rows.append(row)
    (out / "report.json").write_text(json.dumps({"pairs": rows}, indent=2) + "\n")
    _write_resolved(out, cfg)
    print(out / "report.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=5")
    common.add_argument("--images", action="store_true", help="also write PNG images")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="usflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="render phantom pairs with ground truth")
    p = sub.add_parser("train", parents=[common], help="unsupervised fine-tuning on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--init", help="checkpoint to start from")
    p = sub.add_parser("infer", parents=[common], help="estimate displacement for one pair")
    p.add_argument("--checkpoint", help="trained backbone; omitted = per-pair direct solve")
    p.add_argument("--manifest")
    p.add_argument("--pair", help="pair id inside the manifest (default: first)")
    p.add_argument("--frames", nargs=2, metavar=("PRE", "POST"), help="two .rfd files")
    p = sub.add_parser("strain", parents=[common], help="axial strain from a flow file")
    p.add_argument("--flow", required=True)
    p = sub.add_parser("metrics", parents=[common], help="CNR and strain ratio over windows")
    p.add_argument("--strain", required=True)
    p.add_argument("--windows", help="JSON file with window pairs (else config 'windows')")
    p = sub.add_parser("report", parents=[common], help="summary over inferred flows")
    p.add_argument("--manifest", required=True)
    p.add_argument("--flows", required=True, help="directory holding flow_<id>.gt files")
    p.add_argument("--windows")
    return parser


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "infer": cmd_infer,
            "strain": cmd_strain, "metrics": cmd_metrics, "report": cmd_report}


def _fail(code: str, message: str, status: int) -> int:
    sys.stderr.write(json.dumps({"code": code, "message": message}) + "\n")
    return status


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_run_config(args.config, args.set, args.seed)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.status)
    except ConfigError as exc:
        return _fail("config_error", str(exc), 2)
    except TrainingAborted as exc:
        return _fail("training_aborted", str(exc), 3)
    except SolveDiverged as exc:
        return _fail("solve_diverged", str(exc), 3)
    except FileFormatError as exc:
        return _fail("file_format", str(exc), 1)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail("io_error", str(exc), 1)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail("invalid_input", str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
