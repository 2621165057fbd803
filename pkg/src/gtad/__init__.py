"""Temporal-aggregation denoising pipeline for 3D semantic occupancy.

Submodules:

* ``numerics``: fp64 tensors, reverse-mode tape, sampling kernels, RNG,
  and the GTADCKPT checkpoint format.
* ``geometry``: poses, pinhole cameras, voxel-grid layout, alignment.
* ``deform_attn``: the deformable-attention primitive.
* ``encoders``: spatial and temporal encoders plus the BEV queue fusion.
* ``denoiser``: corruption schedule and the in-model denoising stack.
* ``heads_losses``: decoder, heads, segmentation losses, mIoU.
* ``scenegen``: synthetic multi-camera scenes and the GTADSCN file format.
* ``pipeline``: model assembly, training, ablations, reports, BEV export.
* ``cli``: the ``gtad`` command (gen / train / eval / ablate / export).
"""

from . import (cli, deform_attn, denoiser, encoders, geometry, heads_losses,
               numerics, pipeline, scenegen)
from .numerics import Parameter, ParamStore, Rng, Tensor, backward
from .pipeline import GtadModel, PipelineConfig, RunReport, train

__version__ = "0.1.0"

__all__ = [
    "cli", "deform_attn", "denoiser", "encoders", "geometry", "heads_losses",
    "numerics", "pipeline", "scenegen",
    "Parameter", "ParamStore", "Rng", "Tensor", "backward",
    "GtadModel", "PipelineConfig", "RunReport", "train",
    "__version__",
]
