"""Unsupervised optical-flow displacement estimation for ultrasound elastography."""

from .backbone import DirectField, TinyPyramidNet, load_checkpoint, save_checkpoint
from .loss import LossConfig, OutlierMask, total_loss
from .phantom import GroundTruthDeformation, ImagingGrid, Inclusion, PsfParams, simulate_pair
from .rf import RfFrame, build_channel_stack
from .strain import WindowPair, cnr_sr, lsq_strain
from .train import DirectSolveConfig, Pair, TrainConfig, run_direct_solve, run_finetune
from .warp import DisplacementField, warp_image

__version__ = "0.1.0"
