"""Inference-time integration: mask classification, generator-score
ensembling, semantic map assembly, and the evaluation metrics (maskAcc, mIoU,
IoU-matching oracle).

Proposal files live next to a dataset as ``<dir>/NNNN.mcpp`` (a Q x H x W
soft-mask stack) plus ``<dir>/NNNN.json`` carrying the generator's class
scores, its vocabulary, and a partial map from generator categories to
evaluation categories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .data import DataFormatError, build_token_masks, read_tensor, write_tensor
from .encoder import MaskEncoder, patchify
from .psm import PsmHead, apply_psm, raw_similarity
from .textenc import TextEmbeddings

VOID = -1


@dataclass
class MaskProposalSet:
    """External mask-generator output for one image."""

    masks: np.ndarray       # (Q, H, W) soft values in [0, 1]
    gen_scores: np.ndarray  # (Q, K_gen) probabilities over the generator vocab
    gen_vocab: list
    in_vocab_map: dict      # generator category index -> evaluation category index

    def validate(self) -> None:
        if self.masks.ndim != 3 or self.masks.shape[0] < 1:
            raise ValueError("proposals need a (Q, H, W) mask stack with Q >= 1")
        if self.masks.min() < 0 or self.masks.max() > 1:
            raise ValueError("proposal masks must lie in [0, 1]")
        if self.gen_scores.shape != (self.masks.shape[0], len(self.gen_vocab)):
            raise ValueError("gen_scores must be (Q, len(gen_vocab))")
        sums = self.gen_scores.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise ValueError("gen_scores rows must sum to 1 within 1e-4")
        for g in self.in_vocab_map:
            if not 0 <= int(g) < len(self.gen_vocab):
                raise ValueError(f"in_vocab_map references unknown generator category {g}")


def save_proposals(directory, index, proposals: MaskProposalSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sid = index if isinstance(index, str) else f"{index:04d}"
    write_tensor(directory / f"{sid}.mcpp", proposals.masks)
    meta = {
        "gen_vocab": list(proposals.gen_vocab),
        "gen_scores": [[float(v) for v in row] for row in proposals.gen_scores],
        "in_vocab_map": {str(k): int(v) for k, v in proposals.in_vocab_map.items()},
    }
    (directory / f"{sid}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_proposals(directory, index) -> MaskProposalSet:
    directory = Path(directory)
    sid = index if isinstance(index, str) else f"{index:04d}"
    mask_file = directory / f"{sid}.mcpp"
    meta_file = directory / f"{sid}.json"
    if not mask_file.exists() or not meta_file.exists():
        raise DataFormatError(f"missing proposal files for sample {sid} in {directory}")
    masks = read_tensor(mask_file)
    meta = json.loads(meta_file.read_text())
    out = MaskProposalSet(
        masks=masks,
        gen_scores=np.asarray(meta["gen_scores"], dtype=np.float64),
        gen_vocab=list(meta["gen_vocab"]),
        in_vocab_map={int(k): int(v) for k, v in meta["in_vocab_map"].items()},
    )
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


def _refined_scores(encoder: MaskEncoder, psm: PsmHead | None,
                    text_embeddings: TextEmbeddings, patches, token_masks,
                    use_psm: bool) -> torch.Tensor:
    states = encoder.extract(torch.as_tensor(patches))
    emb = encoder.fuse(states, token_masks)
    e_t = torch.as_tensor(text_embeddings.values)
    if use_psm:
        if psm is None:
            raise ValueError("use_psm=True requires a similarity head")
        return apply_psm(psm, emb, e_t)
    return raw_similarity(emb, e_t)


def classify_masks(encoder: MaskEncoder, psm: PsmHead | None,
                   text_embeddings: TextEmbeddings, image, masks,
                   use_psm: bool = True) -> np.ndarray:
    """Per-proposal class probabilities (Q, K) on the evaluation vocabulary.

    Proposals whose footprint vanishes on the token grid get a uniform row.
    """
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim != 3 or masks.shape[0] < 1:
        raise ValueError("need a (Q, H, W) stack of proposal masks")
    n_cat = text_embeddings.values.shape[0]
    token_masks, kept = build_token_masks(masks, encoder.dims.grid)
    probs = np.full((masks.shape[0], n_cat), 1.0 / n_cat)
    if kept:
        with torch.no_grad():
            scores = _refined_scores(encoder, psm, text_embeddings,
                                     patchify(image, encoder.dims), token_masks,
                                     use_psm)
            scale = torch.exp(psm.log_logit_scale) if psm is not None else 100.0
            rows = torch.softmax(scale * scores, dim=1).numpy()
        probs[kept] = rows
    return probs


def ensemble(probs: np.ndarray, proposals: MaskProposalSet, gamma: float) -> np.ndarray:
    """Geometric blend with generator scores on mapped categories.

    P_out = P_gen^gamma * P_model^(1-gamma) where the generator vocabulary
    maps into the evaluation one; elsewhere the model score passes through.
    No renormalisation: argmax consumes the result directly.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    probs = np.asarray(probs, dtype=np.float64)
    n_cat = probs.shape[1]
    gen_on_eval = np.zeros_like(probs)
    cols = set()
    for g, e in proposals.in_vocab_map.items():
        g, e = int(g), int(e)
        if not 0 <= e < n_cat:
            raise ValueError(f"in_vocab_map targets unknown evaluation category {e}")
        if not 0 <= g < proposals.gen_scores.shape[1]:
            raise ValueError(f"in_vocab_map references unknown generator category {g}")
        gen_on_eval[:, e] += proposals.gen_scores[:, g]
        cols.add(e)
    out = probs.copy()
    if cols:
        cols = sorted(cols)
        out[:, cols] = gen_on_eval[:, cols] ** gamma * probs[:, cols] ** (1.0 - gamma)
    return out


def assemble_semantic(masks: np.ndarray, probs: np.ndarray,
                      threshold_void: float = 0.0) -> np.ndarray:
    """Soft-mask-weighted class scores per pixel -> argmax label map.

    Pixels whose best score falls below ``threshold_void`` become VOID (-1).
    """
    masks = np.asarray(masks, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if masks.shape[0] != probs.shape[0]:
        raise ValueError("mask and probability counts disagree")
    scores = np.einsum("qhw,qk->hwk", masks, probs)
    labels = scores.argmax(axis=-1).astype(np.int64)
    labels[scores.max(axis=-1) < threshold_void] = VOID
    return labels


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def mask_acc(encoder: MaskEncoder, psm: PsmHead | None,
             text_embeddings: TextEmbeddings, dataset,
             use_psm: bool = True, category_filter=None) -> float:
    """Top-1 accuracy over ground-truth masks, optionally restricted to a
    category subset (classification always runs over the full vocabulary)."""
    keep = None if category_filter is None else {int(c) for c in category_filter}
    correct = 0
    total = 0
    with torch.no_grad():
        for sample in dataset:
            token_masks, kept = build_token_masks(sample.masks, encoder.dims.grid)
            if not kept:
                continue
            scores = _refined_scores(encoder, psm, text_embeddings,
                                     patchify(sample.image, encoder.dims),
                                     token_masks, use_psm)
            pred = scores.argmax(dim=1).numpy()
            for row, q in enumerate(kept):
                label = int(sample.labels[q])
                if keep is not None and label not in keep:
                    continue
                total += 1
                correct += int(pred[row] == label)
    if total == 0:
        raise ValueError("no ground-truth masks to score")
    return correct / total


def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Intersection over union of masks thresholded at 0.5; empty pair -> 0."""
    a = np.asarray(mask_a) >= 0.5
    b = np.asarray(mask_b) >= 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(masks_a: np.ndarray, masks_b: np.ndarray) -> np.ndarray:
    """(Qa, Qb) pairwise IoU of two mask stacks (thresholded at 0.5)."""
    a = (np.asarray(masks_a) >= 0.5).reshape(masks_a.shape[0], -1).astype(np.float64)
    b = (np.asarray(masks_b) >= 0.5).reshape(masks_b.shape[0], -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(axis=1)[:, None] + b.sum(axis=1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass
class OracleAssignment:
    pairs: list              # (proposal index, gt index) with positive IoU
    total_iou: float
    probs: np.ndarray        # (Q, K): one-hot gt label if matched, else uniform
    semantic_map: np.ndarray  # (H, W) labels assembled from the relabeling


def oracle_assign(proposal_masks: np.ndarray, gt_masks: np.ndarray,
                  gt_labels, n_categories: int) -> OracleAssignment:
    """Relabel proposals by maximum-total-IoU one-to-one matching.

    Matched proposals inherit the ground-truth label with probability one;
    unmatched proposals (including zero-IoU assignments) get a uniform row.
    The returned semantic map assembles the proposals under the new labels.
    """
    proposal_masks = np.asarray(proposal_masks)
    if proposal_masks.ndim != 3 or proposal_masks.shape[0] < 1:
        raise ValueError("need at least one proposal mask")
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    matrix = iou_matrix(proposal_masks, gt_masks)
    rows, cols = linear_sum_assignment(-matrix)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if matrix[r, c] > 0]
    total = float(sum(matrix[r, c] for r, c in pairs))
    probs = np.full((proposal_masks.shape[0], n_categories), 1.0 / n_categories)
    for r, c in pairs:
        probs[r] = 0.0
        probs[r, gt_labels[c]] = 1.0
    return OracleAssignment(pairs=pairs, total_iou=total, probs=probs,
                            semantic_map=assemble_semantic(proposal_masks, probs))


@dataclass
class MiouResult:
    per_class: np.ndarray  # (K,) IoU, NaN where the class is absent everywhere
    mean: float


def miou(preds, gts, n_categories: int) -> MiouResult:
    """Mean IoU of predicted label maps against ground truth.

    Accepts one (H, W) pair or matching sequences. Pixels with ground-truth
    VOID are ignored entirely; classes absent from both prediction and ground
    truth are excluded from the mean.
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    inter = np.zeros(n_categories)
    pred_count = np.zeros(n_categories)
    gt_count = np.zeros(n_categories)
    for pred, gt in zip(preds, gts, strict=True):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != gt shape {gt.shape}")
        valid = gt != VOID
        p = pred[valid]
        g = gt[valid]
        for k in range(n_categories):
            pk = p == k
            gk = g == k
            inter[k] += np.logical_and(pk, gk).sum()
            pred_count[k] += pk.sum()
            gt_count[k] += gk.sum()
    union = pred_count + gt_count - inter
    per_class = np.full(n_categories, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    if not present.any():
        raise ValueError("no classes present in prediction or ground truth")
    return MiouResult(per_class=per_class, mean=float(per_class[present].mean()))


def generator_probs(proposals: MaskProposalSet, n_categories: int) -> np.ndarray:
    """Generator class scores mapped onto the evaluation vocabulary.

    Categories outside the generator's mapped vocabulary get zero mass.
    """
    out = np.zeros((proposals.gen_scores.shape[0], n_categories))
    for g, e in proposals.in_vocab_map.items():
        g, e = int(g), int(e)
        if not 0 <= e < n_categories:
            raise ValueError(f"in_vocab_map targets unknown evaluation category {e}")
        out[:, e] += proposals.gen_scores[:, g]
    return out
