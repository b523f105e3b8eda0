"""Mask-conditioned region classification toolkit.

Builds region embeddings by fusing mask-restricted attention into the late
layers of a small vision transformer, scores them against category text
embeddings through order-preserving or free-form similarity heads, fine-tunes
on ground-truth masks, and evaluates mask classification and semantic
segmentation with generator-score ensembling and an IoU-matching oracle.
"""

from .data import (DataFormatError, SegmentationSample, SyntheticDatasetSpec,
                   Vocabulary, build_token_masks, generate_synthetic_dataset,
                   load_dataset, mask_to_token_grid, read_tensor, write_tensor)
from .encoder import EncoderDims, MaskEncoder, TokenStates, init_encoder, mask_bias, patchify
from .infer import (MaskProposalSet, assemble_semantic, classify_masks, ensemble,
                    iou, iou_matrix, load_proposals, mask_acc, miou, oracle_assign,
                    save_proposals)
from .psm import (InconsistencyConfig, PsmHead, apply_psm, classification_loss,
                  canonical_inconsistency_config, demo_inconsistency,
                  effective_affine, raw_similarity)
from .textenc import TextEmbeddings, load_text_embeddings, save_text_embeddings, toy_encode
from .training import (TrainConfig, TrainResult, cosine_lr_factor, grad_check,
                    load_checkpoint, save_checkpoint, train, trainable_set)

__version__ = "0.1.0"

__all__ = [
    "DataFormatError", "SegmentationSample", "SyntheticDatasetSpec", "Vocabulary",
    "build_token_masks", "generate_synthetic_dataset", "load_dataset",
    "mask_to_token_grid", "read_tensor", "write_tensor",
    "EncoderDims", "MaskEncoder", "TokenStates", "init_encoder", "mask_bias", "patchify",
    "MaskProposalSet", "assemble_semantic", "classify_masks", "ensemble", "iou",
    "iou_matrix", "load_proposals", "mask_acc", "miou", "oracle_assign", "save_proposals",
    "InconsistencyConfig", "PsmHead", "apply_psm", "classification_loss",
    "canonical_inconsistency_config", "demo_inconsistency", "effective_affine",
    "raw_similarity",
    "TextEmbeddings", "load_text_embeddings", "save_text_embeddings", "toy_encode",
    "TrainConfig", "TrainResult", "cosine_lr_factor", "grad_check",
    "load_checkpoint", "save_checkpoint", "train", "trainable_set",
]
