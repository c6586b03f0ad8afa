"""Vertical-patch text recognizer with visual and language pretraining stages, at toy scale."""

from .data import TextDataset, Vocab, encode_label, preprocess, char_boxes_to_patch_indices
from .model import MaskOCR, ModelConfig, patchify, unpatchify
from .checkpoint import Checkpoint

__version__ = "0.1.0"

__all__ = ["TextDataset", "Vocab", "encode_label", "preprocess", "char_boxes_to_patch_indices", "MaskOCR",
           "ModelConfig", "patchify", "unpatchify", "Checkpoint"]
