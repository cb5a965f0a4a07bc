"""Count-supervised moving infrared small-target detection."""

from .core import Box, Config, FrameClip, PseudoLabel, QuantityPrompt, iou, mask_to_box

__version__ = "0.1.0"

__all__ = [
    "Box", "Config", "FrameClip", "PseudoLabel", "QuantityPrompt",
    "iou", "mask_to_box", "__version__",
]
