"""Segmentation kernels built on a self-contained reverse-mode tensor tape.

The building blocks: morph-offset convolution (kernels that bend along thin
structures via accumulated sub-pixel offsets), selective state-space fusion
over axis-matched scan orders, reverse-guided decoder fusion, and a
U-shaped network assembling them, plus a desk-scale training and evaluation
harness.

Respect MMUNET_THREADS by capping BLAS pools before numpy's first import.
"""

import os as _os

_threads = _os.environ.get("MMUNET_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from .errors import (ConfigError, ContractError, DimensionError, FormatError,
                     IngestionError, MmunetError, TrainingAborted)
from .tensor import Tensor, elementwise, matmul, no_grad
from .conv import bilinear_resize, conv2d, maxpool2d
from .gradcheck import GradCheckReport, gradcheck
from .morph import (Axis, CoordinateSet, KernelGeometry, OffsetField, axis_aggregate,
                    base_grid, bilinear_sample, morph_coordinates, predict_offsets)
from .sstate import (MmcLayer, ScanDirection, ScanOrder, SsmParams, discretize,
                     linear_scan, make_scan_order, mmc_forward, morph_ssm_fuse,
                     selective_scan, ssm_apply_2d)
from .guidance import CbamBlock, ConcatFuse, RssgBlock, RssgInputs, cbam, reverse_mask, rssg_forward
from .network import ForwardArtifacts, MMUNet, NetworkConfig, count_params
from .checkpoint import load_checkpoint, read_entries, save_checkpoint
from .data import Sample, load_dataset, read_pnm, save_samples, synth_vessels, write_pgm, write_ppm
from .metrics import Metrics, confusion, evaluate
from .training import TrainConfig, adamw_step, loss, lr_at, parse_config_file, train, wd_at

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
