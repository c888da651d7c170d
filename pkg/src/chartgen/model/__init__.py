from .checkpoint import load_checkpoint, save_checkpoint
from .layers import attention, rms_norm, swiglu_ffn
from .loss import combine_losses, token_loss, token_loss_grad
from .optim import AdamState, adamw_step, clip_grad_norm
from .transformer import ChartTransformer, ModelConfig

__all__ = [
    "AdamState",
    "ChartTransformer",
    "ModelConfig",
    "adamw_step",
    "attention",
    "clip_grad_norm",
    "combine_losses",
    "load_checkpoint",
    "rms_norm",
    "save_checkpoint",
    "swiglu_ffn",
    "token_loss",
    "token_loss_grad",
]
