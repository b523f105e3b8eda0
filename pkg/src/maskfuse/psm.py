"""Similarity heads over region/text embeddings and the classification loss.

Three head variants refine the raw cosine similarity matrix S:

* ``sim_affine``  — each scalar similarity is lifted to a wide hidden vector
  and projected back: R = w2.(w1*s + b1) + b2. The composition is affine in
  s, so for a positive effective slope the per-row ranking of R always equals
  that of S (order-preserving by construction).
* ``embed_left``  — R = <normalize(Theta @ E_m), E_t>.
* ``embed_right`` — R = <E_m, normalize(Theta @ E_t)>.

The embed variants can reorder similarities; ``demo_inconsistency`` shows the
resulting failure mode on a two-mask toy problem where one gradient step
improves the refined ordering while degrading the raw one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

PSM_VARIANTS = ("sim_affine", "embed_left", "embed_right")
DEFAULT_HIDDEN = 768
DEFAULT_LOG_LOGIT_SCALE = float(np.log(100.0))


class PsmHead(nn.Module):
    """One similarity-refinement variant plus the softmax logit scale."""

    def __init__(self, variant: str = "sim_affine", embed_dim: int | None = None,
                 hidden: int = DEFAULT_HIDDEN, seed: int = 0,
                 log_logit_scale: float = DEFAULT_LOG_LOGIT_SCALE):
        super().__init__()
        if variant not in PSM_VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {PSM_VARIANTS}")
        self.variant = variant
        self.hidden = hidden
        self.embed_dim = embed_dim
        gen = torch.Generator().manual_seed(seed)
        if variant == "sim_affine":
            if hidden < 1:
                raise ValueError("hidden dimension must be >= 1")
            base = 1.0 / np.sqrt(hidden)
            noise = torch.randn(2, hidden, generator=gen, dtype=torch.float64) * 1e-3
            self.w1 = nn.Parameter(base + noise[0])
            self.b1 = nn.Parameter(torch.zeros(hidden, dtype=torch.float64))
            self.w2 = nn.Parameter(base + noise[1])
            self.b2 = nn.Parameter(torch.zeros((), dtype=torch.float64))
        else:
            if embed_dim is None:
                raise ValueError("embed_dim required for embed_left/embed_right")
            noise = torch.randn(embed_dim, embed_dim, generator=gen, dtype=torch.float64)
            self.theta = nn.Parameter(torch.eye(embed_dim, dtype=torch.float64) + 0.02 * noise)
        self.log_logit_scale = nn.Parameter(
            torch.tensor(log_logit_scale, dtype=torch.float64))

    def config(self) -> dict:
        return {"variant": self.variant, "hidden": self.hidden,
                "embed_dim": self.embed_dim}


def raw_similarity(mask_emb, text_emb) -> torch.Tensor:
    """Cosine similarity matrix (masks x categories) of unit-norm rows."""
    e_m = torch.as_tensor(mask_emb, dtype=torch.float64)
    e_t = torch.as_tensor(text_emb, dtype=torch.float64)
    if e_m.shape[-1] != e_t.shape[-1]:
        raise ValueError(f"embedding dims differ: {e_m.shape[-1]} vs {e_t.shape[-1]}")
    return e_m @ e_t.T


def apply_psm(head: PsmHead, mask_emb, text_emb) -> torch.Tensor:
    """Refined similarity matrix for the head's variant."""
    e_m = torch.as_tensor(mask_emb, dtype=torch.float64)
    e_t = torch.as_tensor(text_emb, dtype=torch.float64)
    if head.variant == "embed_left":
        z = e_m @ head.theta.T
        z = z / z.norm(dim=-1, keepdim=True)
        return z @ e_t.T
    if head.variant == "embed_right":
        z = e_t @ head.theta.T
        z = z / z.norm(dim=-1, keepdim=True)
        return e_m @ z.T
    s = raw_similarity(e_m, e_t)
    hidden = s.unsqueeze(-1) * head.w1 + head.b1  # (..., Q, K, P)
    return hidden @ head.w2 + head.b2


def effective_affine(head: PsmHead) -> tuple[float, float]:
    """Slope and offset of the sim_affine head: R = a*S + c exactly."""
    if head.variant != "sim_affine":
        raise ValueError(f"effective_affine needs a sim_affine head, got {head.variant!r}")
    with torch.no_grad():
        a = float(head.w2 @ head.w1)
        c = float(head.w2 @ head.b1 + head.b2)
    return a, c


def classification_loss(refined: torch.Tensor, labels, log_logit_scale) -> torch.Tensor:
    """Mean cross-entropy of softmax(exp(log_logit_scale) * R) against labels."""
    refined = torch.as_tensor(refined, dtype=torch.float64)
    if refined.shape[0] == 0:
        raise ValueError("no masks to classify")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if not torch.is_tensor(log_logit_scale):
        log_logit_scale = torch.tensor(float(log_logit_scale), dtype=torch.float64)
    logits = torch.exp(log_logit_scale) * refined
    logz = torch.logsumexp(logits, dim=1)
    picked = logits[torch.arange(len(labels)), labels]
    return (logz - picked).mean()


# ---------------------------------------------------------------------------
# Ordering-inconsistency demonstration
# ---------------------------------------------------------------------------


@dataclass
class InconsistencyConfig:
    """Two mask embeddings, a linear head Theta, and L1 targets for r."""

    text_vec: np.ndarray          # (D,), unit norm
    mask_vecs: np.ndarray         # (2, D)
    theta: np.ndarray             # (D, D)
    targets: np.ndarray           # (2,) desired refined similarities
    lr: float = 0.1
    steps: int = 1


@dataclass
class DemoRow:
    step: int
    s1: float
    s2: float
    r1: float
    r2: float
    s_rank_correct: bool
    r_rank_correct: bool


def canonical_inconsistency_config() -> InconsistencyConfig:
    """Frozen witness: one L1 step on the masks flips the refined ordering to
    match the targets while pushing the raw ordering away from them.

    Found by grid search over rotation angles and step sizes; Theta is a
    120-degree rotation scaled by 2.
    """
    angle = np.deg2rad(120.0)
    theta = 2.0 * np.array([
        [np.cos(angle), -np.sin(angle)],
        [np.sin(angle), np.cos(angle)],
    ])
    return InconsistencyConfig(
        text_vec=np.array([1.0, 0.0]),
        mask_vecs=np.array([
            [0.40, -1.0 / np.sqrt(3.0)],
            [0.45, -0.55 / np.sqrt(3.0)],
        ]),
        theta=theta,
        targets=np.array([0.1, 0.7]),
        lr=0.1,
        steps=1,
    )


def demo_inconsistency(config: InconsistencyConfig) -> list[DemoRow]:
    """Gradient-descent trace of raw (s) and refined (r) similarities.

    Only the mask embeddings are updated, minimising the L1 distance between
    the refined similarities and the targets. Ordering flags compare the sign
    of the pair gap against the target gap.
    """
    t = np.asarray(config.text_vec, dtype=np.float64)
    m = np.array(config.mask_vecs, dtype=np.float64)
    theta = np.asarray(config.theta, dtype=np.float64)
    targets = np.asarray(config.targets, dtype=np.float64)
    if m.shape[0] != 2 or targets.shape != (2,):
        raise ValueError("demo uses exactly two mask embeddings and two targets")
    back = theta.T @ t
    if not back.any():
        raise ValueError("degenerate theta: gradients on the masks vanish")

    target_sign = np.sign(targets[0] - targets[1])
    rows = []
    for step in range(config.steps + 1):
        s = m @ t
        r = (m @ theta.T) @ t
        rows.append(DemoRow(
            step=step,
            s1=float(s[0]), s2=float(s[1]),
            r1=float(r[0]), r2=float(r[1]),
            s_rank_correct=bool(np.sign(s[0] - s[1]) == target_sign),
            r_rank_correct=bool(np.sign(r[0] - r[1]) == target_sign),
        ))
        if step < config.steps:
            grad = np.sign(r - targets)[:, None] * back[None, :]
            m = m - config.lr * grad
    return rows
