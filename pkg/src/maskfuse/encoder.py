"""Small pre-norm vision transformer with mask-conditioned fusion attention.

The stack is split into an extractor (early layers, plain self-attention over
CLS + patch tokens) and a fuser (late layers). Region embeddings are built by
running one query token per mask through the fuser: the token starts from the
extractor's CLS state and attends over patch tokens under a mask-derived
additive bias, reusing the fuser layers' own projections and MLPs. All math is
float64 so gradients can be checked against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

# Finite stand-in for the -inf attention bias: out-of-mask positions receive
# -alpha * NEG_BIAS_SCALE, so alpha = 0 recovers unbiased attention while any
# alpha >= e^-5 drives out-of-mask weight below 1e-12.
NEG_BIAS_SCALE = 1.0e4


@dataclass(frozen=True)
class EncoderDims:
    layers: int = 4             # total transformer depth
    extractor_layers: int = 2   # depth of the plain feature-extraction stage
    width: int = 64             # token channel count
    embed_dim: int = 32         # output embedding dimension
    heads: int = 4
    grid: tuple[int, int] = (16, 16)  # token grid (rows, cols)
    patch: int = 4              # pixels per grid cell side

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        if not 1 <= self.extractor_layers < self.layers:
            raise ValueError("need 1 <= extractor_layers < layers")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if min(self.grid) < 1 or self.patch < 1:
            raise ValueError("grid and patch must be positive")

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_features(self) -> int:
        return 3 * self.patch * self.patch

    def to_json(self) -> dict:
        return {
            "layers": self.layers,
            "extractor_layers": self.extractor_layers,
            "width": self.width,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "grid": list(self.grid),
            "patch": self.patch,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderDims":
        return cls(layers=obj["layers"], extractor_layers=obj["extractor_layers"],
                   width=obj["width"], embed_dim=obj["embed_dim"], heads=obj["heads"],
                   grid=tuple(obj["grid"]), patch=obj["patch"])


@dataclass
class TokenStates:
    """Image-token snapshots entering each fuser layer, plus the final state.

    ``layers[0]`` is the extractor output; ``layers[i]`` feeds fuser layer i;
    ``layers[-1]`` is the state after the last layer. Each entry is
    (tokens+1, width) for a single image or (batch, tokens+1, width).
    """

    layers: list = field(default_factory=list)

    @property
    def batched(self) -> bool:
        return self.layers[0].dim() == 3

    def select(self, index: int) -> "TokenStates":
        if not self.batched:
            raise ValueError("states are not batched")
        return TokenStates([t[index] for t in self.layers])


def patchify(image: np.ndarray, dims: EncoderDims) -> np.ndarray:
    """(H, W, 3) image -> (n_tokens, 3*patch^2) rows in [0, 1], row-major cells."""
    image = np.asarray(image)
    g_h, g_w = dims.grid
    p = dims.patch
    if image.shape != (g_h * p, g_w * p, 3):
        raise ValueError(f"image shape {image.shape} does not tile a "
                         f"{dims.grid} grid of {p}px patches")
    x = image.astype(np.float64)
    if image.dtype == np.uint8:
        x = x / 255.0
    x = x.reshape(g_h, p, g_w, p, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(g_h * g_w, 3 * p * p))


def mask_bias(mask_row: np.ndarray, alpha: float, neg_scale: float = NEG_BIAS_SCALE) -> np.ndarray:
    """Additive attention bias for one token mask row.

    Positions at or above half the row maximum get alpha * value; the rest get
    -alpha * neg_scale, a finite surrogate for -inf that vanishes at alpha = 0.
    """
    row = np.asarray(mask_row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("mask row must be 1-D")
    peak = row.max()
    if peak <= 0.0:
        raise ValueError("mask row is all zero")
    if alpha < 0.0:
        raise ValueError("alpha must be non-negative")
    return np.where(row >= peak / 2.0, alpha * row, -alpha * neg_scale)


def _mask_bias_matrix(masks: torch.Tensor, alpha) -> torch.Tensor:
    peaks = masks.max(dim=1, keepdim=True).values
    if (peaks <= 0).any():
        raise ValueError("mask row is all zero")
    inside = masks >= peaks / 2.0
    return torch.where(inside, alpha * masks, -alpha * NEG_BIAS_SCALE * torch.ones_like(masks))


def _trunc_normal_(tensor: torch.Tensor, std: float, gen: torch.Generator) -> None:
    # Resample draws beyond 2 sigma; deterministic for a given generator.
    with torch.no_grad():
        x = torch.randn(tensor.shape, generator=gen, dtype=tensor.dtype)
        bad = x.abs() > 2.0
        while bad.any():
            x[bad] = torch.randn(int(bad.sum()), generator=gen, dtype=tensor.dtype)
            bad = x.abs() > 2.0
        tensor.copy_(x * std)


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        kw = dict(dtype=torch.float64)
        self.ln1 = nn.LayerNorm(width, **kw)
        self.q = nn.Linear(width, width, **kw)
        self.k = nn.Linear(width, width, **kw)
        self.v = nn.Linear(width, width, **kw)
        self.o = nn.Linear(width, width, **kw)
        self.ln2 = nn.LayerNorm(width, **kw)
        self.fc1 = nn.Linear(width, 4 * width, **kw)
        self.fc2 = nn.Linear(4 * width, width, **kw)
        self.heads = heads
        self.head_dim = width // heads

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)  # (b, h, t, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.ln1(x)
        q = self._split(self.q(y))
        k = self._split(self.k(y))
        v = self._split(self.v(y))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        pooled = (att @ v).transpose(1, 2).reshape(x.shape)
        x = x + self.o(pooled)
        x = x + self.mlp(x)
        return x

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nn.functional.gelu(self.fc1(self.ln2(x))))


class MaskEncoder(nn.Module):
    """Vision transformer whose late layers double as a mask-fusion head."""

    def __init__(self, dims: EncoderDims = EncoderDims(), seed: int = 0):
        super().__init__()
        self.dims = dims
        c = dims.width
        self.patch_embed = nn.Parameter(torch.empty(dims.patch_features, c, dtype=torch.float64))
        self.pos_embed = nn.Parameter(torch.empty(dims.n_tokens + 1, c, dtype=torch.float64))
        self.cls_token = nn.Parameter(torch.empty(c, dtype=torch.float64))
        self.blocks = nn.ModuleList(_Block(c, dims.heads) for _ in range(dims.layers))
        self.ln_f = nn.LayerNorm(c, dtype=torch.float64)
        self.out_proj = nn.Parameter(torch.empty(c, dims.embed_dim, dtype=torch.float64))
        self.log_alpha = nn.Parameter(torch.tensor(-5.0, dtype=torch.float64))
        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "log_alpha":
                    p.fill_(-5.0)
                elif p.dim() >= 2 or name in ("cls_token", "pos_embed"):
                    _trunc_normal_(p, 0.02, gen)
                else:
                    p.zero_()  # biases and norm params; norms fixed below
            for mod in self.modules():
                if isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()

    @property
    def alpha(self) -> torch.Tensor:
        return torch.exp(self.log_alpha)

    def extract(self, patches) -> TokenStates:
        """Run the extractor and image-side fuser over patch rows.

        ``patches`` is (n_tokens, 3*patch^2) for one image or (batch, ...).
        Records the token state entering each fuser layer plus the final
        state; mask queries never write back into these.
        """
        x = torch.as_tensor(patches, dtype=torch.float64)
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        b, n, e = x.shape
        if n != self.dims.n_tokens or e != self.dims.patch_features:
            raise ValueError(f"expected ({self.dims.n_tokens}, {self.dims.patch_features}) "
                             f"patch rows, got ({n}, {e})")
        tok = x @ self.patch_embed
        cls = self.cls_token.expand(b, 1, -1)
        x = torch.cat([cls, tok], dim=1) + self.pos_embed
        split = self.dims.extractor_layers
        for blk in self.blocks[:split]:
            x = blk(x)
        states = [x]
        for blk in self.blocks[split:]:
            x = blk(x)
            states.append(x)
        if squeeze:
            states = [s.squeeze(0) for s in states]
        return TokenStates(states)

    def _fuser_blocks(self):
        return self.blocks[self.dims.extractor_layers:]

    def fuse(self, states: TokenStates, token_masks, alpha=None, return_weights: bool = False):
        """Mask-conditioned fusion -> (n_masks, embed_dim) unit-norm embeddings.

        Each mask spawns a query token initialised from the extractor-output
        CLS state. Per fuser layer the query attends over that layer's patch
        tokens with the mask bias added to every head's logits, then passes
        through the layer's output projection and MLP with residuals, exactly
        as the CLS path would. ``alpha`` overrides exp(log_alpha) when given.
        """
        if states.batched:
            raise ValueError("per-sample states required; use states.select(b)")
        masks = torch.as_tensor(token_masks, dtype=torch.float64)
        if masks.dim() != 2 or masks.shape[1] != self.dims.n_tokens:
            raise ValueError(f"token masks must be (Q, {self.dims.n_tokens})")
        if alpha is None:
            alpha = self.alpha
        elif not torch.is_tensor(alpha):
            alpha = torch.tensor(float(alpha), dtype=torch.float64)
        bias = _mask_bias_matrix(masks, alpha)  # (Q, N)

        n_masks = masks.shape[0]
        h, d = self.dims.heads, self.dims.width // self.dims.heads
        emb = states.layers[0][0].unsqueeze(0).expand(n_masks, -1)  # CLS init, (Q, C)
        weights = []
        for i, blk in enumerate(self._fuser_blocks()):
            patch_tok = states.layers[i][1:]  # (N, C); CLS is not an attention target
            ym = blk.ln1(emb)
            yf = blk.ln1(patch_tok)
            q = blk.q(ym).view(n_masks, h, d)
            k = blk.k(yf).view(-1, h, d)
            v = blk.v(yf).view(-1, h, d)
            scores = torch.einsum("qhd,nhd->hqn", q, k) / math.sqrt(d) + bias.unsqueeze(0)
            phi = torch.softmax(scores, dim=-1)  # (h, Q, N)
            pooled = torch.einsum("hqn,nhd->qhd", phi, v).reshape(n_masks, -1)
            emb = emb + blk.o(pooled)
            emb = emb + blk.mlp(emb)
            if return_weights:
                weights.append(phi.permute(1, 0, 2))  # (Q, h, N)
        out = self.ln_f(emb) @ self.out_proj
        out = out / out.norm(dim=1, keepdim=True)
        if return_weights:
            return out, weights
        return out

    def fuse_avg_pool(self, states: TokenStates, token_masks) -> torch.Tensor:
        """Degenerate fusion: L1-normalised mask weights over final patch tokens."""
        if states.batched:
            raise ValueError("per-sample states required; use states.select(b)")
        masks = torch.as_tensor(token_masks, dtype=torch.float64)
        if masks.dim() != 2 or masks.shape[1] != self.dims.n_tokens:
            raise ValueError(f"token masks must be (Q, {self.dims.n_tokens})")
        total = masks.sum(dim=1, keepdim=True)
        if (total <= 0).any():
            raise ValueError("mask row is all zero")
        weights = masks / total
        pooled = weights @ states.layers[-1][1:]
        out = self.ln_f(pooled) @ self.out_proj
        return out / out.norm(dim=1, keepdim=True)


def init_encoder(dims: EncoderDims = EncoderDims(), seed: int = 0) -> MaskEncoder:
    """Fresh encoder with truncated-normal weights and alpha = e^-5."""
    return MaskEncoder(dims, seed=seed)
