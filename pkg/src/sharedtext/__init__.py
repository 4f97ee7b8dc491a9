"""Joint text detection and recognition on a shared convolutional trunk."""

__version__ = "0.1.0"

from .autodiff import Tensor, adam_step, grad_check
from .boxes import Box, Detection, decode_box, encode_box, iou, nms
from .recognizer import AlphabetCodec, ctc_brute_force, ctc_loss, greedy_decode

__all__ = [
    "Tensor", "adam_step", "grad_check",
    "Box", "Detection", "decode_box", "encode_box", "iou", "nms",
    "AlphabetCodec", "ctc_brute_force", "ctc_loss", "greedy_decode",
    "__version__",
]
