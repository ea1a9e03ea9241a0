"""U-net semantic segmentation and unsupervised change detection on a from-scratch numpy CNN."""

__version__ = "0.1.0"

from .changedet import ThresholdSchedule, detect, difference_image, null_response, render_change
from .checkpoint import load_checkpoint, save_checkpoint
from .unet import UNetConfig, UNetModel, decoder_forward, encoder_forward, init_model, segment

__all__ = [
    "ThresholdSchedule",
    "UNetConfig",
    "UNetModel",
    "decoder_forward",
    "detect",
    "difference_image",
    "encoder_forward",
    "init_model",
    "load_checkpoint",
    "null_response",
    "render_change",
    "save_checkpoint",
    "segment",
]
