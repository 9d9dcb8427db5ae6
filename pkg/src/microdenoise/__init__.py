"""CPU toolkit for denoising low-dose electron micrographs.

An atrous convolutional encoder-decoder trained on Poisson-corrupted
crops of well-exposed micrographs, nine classical baselines, and the
benchmarking, tiling, and inspection machinery around them. Everything
runs on a tape-based autodiff engine over numpy; no accelerator needed.
"""

from __future__ import annotations

from .autodiff import Tensor, backward, no_grad
from .classical import METHODS, denoise
from .data import (Fixed, ImagePair, LowDoseExponential, Micrograph,
                   OrdinaryUniform, PairSynthesizer, apply_poisson,
                   ingest_micrograph, make_pair, split_dataset)
from .errors import (CheckpointError, ConfigError, DegenerateInputError,
                     FormatError, InternalError, MicrodenoiseError,
                     NumericError, ShapeMismatchError)
from .formats import (load_container, load_image, load_tensor,
                      read_corpus_manifest, save_container, save_image,
                      save_tensor)
from .gradcheck import check_network, run_all
from .metrics import clahe, kde_pdf, mae_map, mse, run_benchmark, ssim
from .network import DenoiseNetwork, NetworkConfig, build_network
from .tiling import TileConfig, denoise_image, tile_plan
from .train import (LossConfig, OptimizerConfig, PAPER_LOW_DOSE_SCHEDULE,
                    TrainState, load_checkpoint, load_operator, loss,
                    lr_at, save_checkpoint, save_identity_checkpoint,
                    sync_replica_step, train)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad",
    "METHODS", "denoise",
    "Fixed", "ImagePair", "LowDoseExponential", "Micrograph",
    "OrdinaryUniform", "PairSynthesizer", "apply_poisson",
    "ingest_micrograph", "make_pair", "split_dataset",
    "CheckpointError", "ConfigError", "DegenerateInputError", "FormatError",
    "InternalError", "MicrodenoiseError", "NumericError", "ShapeMismatchError",
    "load_container", "load_image", "load_tensor", "read_corpus_manifest",
    "save_container", "save_image", "save_tensor",
    "check_network", "run_all",
    "clahe", "kde_pdf", "mae_map", "mse", "run_benchmark", "ssim",
    "DenoiseNetwork", "NetworkConfig", "build_network",
    "TileConfig", "denoise_image", "tile_plan",
    "LossConfig", "OptimizerConfig", "PAPER_LOW_DOSE_SCHEDULE", "TrainState",
    "load_checkpoint", "load_operator", "loss", "lr_at", "save_checkpoint",
    "save_identity_checkpoint", "sync_replica_step", "train",
    "__version__",
]
