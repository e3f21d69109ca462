"""Desk-scale flow-matching diffusion transformer with per-block attention
head scheduling, plus the limited-data curation pipeline that feeds it."""

from .blocks import BlockSpec, DiTBlock, JointSelfAttention, SwiGluMlp, rope2d_rotate
from .flow import FlowBatch, SamplerConfig, cfg_velocity, icfm_loss, make_flow_batch, sample
from .model import DiTModel, ModelConfig, head_schedule_default, patchify, unpatchify
from .tensor import Tensor, no_grad
from .trainer import (LoopConfig, OptimizerState, StageSpec, TrainState,
                      adamw_step, init_train_state, load_checkpoint, lr_at,
                      run_stage, save_checkpoint, spike_detect)

__version__ = "0.1.0"

__all__ = [
    "BlockSpec", "DiTBlock", "JointSelfAttention", "SwiGluMlp", "rope2d_rotate",
    "FlowBatch", "SamplerConfig", "cfg_velocity", "icfm_loss", "make_flow_batch",
    "sample", "DiTModel", "ModelConfig", "head_schedule_default", "patchify",
    "unpatchify", "Tensor", "no_grad", "LoopConfig", "OptimizerState", "StageSpec",
    "TrainState", "adamw_step", "init_train_state", "load_checkpoint", "lr_at",
    "run_stage", "save_checkpoint", "spike_detect", "__version__",
]
