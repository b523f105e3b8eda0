"""Fine-tuning loop, gradient checking, and checkpoint IO.

The trainable set is deliberately narrow: every layer's query/value
projections (at a boosted learning rate), the mask-bias sharpness log_alpha,
and the similarity head. Everything else stays frozen at its initial values.
Optimisation is AdamW with cosine-annealed learning rates; training priors
can be weakened from ground-truth masks to bounding boxes or single cells.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import infer
from .data import Vocabulary, mask_to_token_grid, read_tensor, write_tensor
from .encoder import EncoderDims, MaskEncoder, patchify
from .psm import PsmHead, apply_psm, classification_loss
from .textenc import TextEmbeddings

PRIORS = ("mask", "box", "pixel")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    qv_lr_multiplier: float = 100.0
    batch_size: int = 4
    total_steps: int = 2000
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    seen_category_filter: tuple[int, ...] | None = None
    prior: str = "mask"
    val_every: int = 0

    def __post_init__(self):
        if self.seen_category_filter is not None:
            object.__setattr__(self, "seen_category_filter",
                               tuple(int(c) for c in self.seen_category_filter))
        if self.base_lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.total_steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch size must be positive")
        if self.qv_lr_multiplier < 1:
            raise ValueError("qv_lr_multiplier must be >= 1")
        if self.prior not in PRIORS:
            raise ValueError(f"unknown prior {self.prior!r}; choose from {PRIORS}")

    def to_json(self) -> dict:
        out = {
            "base_lr": self.base_lr,
            "qv_lr_multiplier": self.qv_lr_multiplier,
            "batch_size": self.batch_size,
            "total_steps": self.total_steps,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "seed": self.seed,
            "seen_category_filter": (list(self.seen_category_filter)
                                     if self.seen_category_filter is not None else None),
            "prior": self.prior,
            "val_every": self.val_every,
        }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        fields = dict(obj)
        if fields.get("seen_category_filter") is not None:
            fields["seen_category_filter"] = tuple(fields["seen_category_filter"])
        return cls(**fields)

    def digest(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def cosine_lr_factor(step: int, total_steps: int) -> float:
    """Cosine annealing from 1 at step 0 to 0 at total_steps."""
    return 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def trainable_set(encoder: MaskEncoder, psm: PsmHead) -> dict[str, torch.nn.Parameter]:
    """Exactly the fine-tuned parameters: q/v projections of every layer
    (weights and biases), log_alpha, and all similarity-head parameters."""
    out = {}
    for name, p in encoder.named_parameters():
        parts = name.split(".")
        if name == "log_alpha" or (len(parts) == 4 and parts[2] in ("q", "v")):
            out[f"encoder.{name}"] = p
    for name, p in psm.named_parameters():
        out[f"psm.{name}"] = p
    return out


def freeze_non_trainable(encoder: MaskEncoder, psm: PsmHead) -> dict[str, torch.nn.Parameter]:
    trainable = trainable_set(encoder, psm)
    wanted = {id(p) for p in trainable.values()}
    for p in list(encoder.parameters()) + list(psm.parameters()):
        p.requires_grad_(id(p) in wanted)
    return trainable


def make_optimizer(encoder: MaskEncoder, psm: PsmHead, config: TrainConfig):
    """AdamW with q/v at base_lr * multiplier; weight decay on matrices only.

    Returns (optimizer, scales) where scales[i] is group i's learning-rate
    multiple of the cosine-annealed base rate.
    """
    trainable = trainable_set(encoder, psm)
    groups = {"qv_w": [], "qv_b": [], "head_w": [], "head_b": []}
    for name, p in trainable.items():
        boosted = name.startswith("encoder.blocks.")
        decayed = p.dim() >= 1 and not name.endswith(("b1", "b2", ".bias"))
        if name.endswith(("encoder.log_alpha", "log_logit_scale")):
            decayed = False
        key = ("qv" if boosted else "head") + ("_w" if decayed else "_b")
        groups[key].append(p)
    mult = config.qv_lr_multiplier
    spec = [
        ("qv_w", mult, config.weight_decay),
        ("qv_b", mult, 0.0),
        ("head_w", 1.0, config.weight_decay),
        ("head_b", 1.0, 0.0),
    ]
    param_groups = []
    scales = []
    for key, scale, wd in spec:
        if not groups[key]:
            continue
        param_groups.append({"params": groups[key], "lr": config.base_lr * scale,
                             "weight_decay": wd})
        scales.append(scale)
    opt = torch.optim.AdamW(param_groups, betas=(config.beta1, config.beta2),
                            eps=config.adam_eps)
    return opt, scales


# ---------------------------------------------------------------------------
# Training priors and sample caching
# ---------------------------------------------------------------------------


def prior_token_mask(mask: np.ndarray, prior: str, grid: tuple[int, int],
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Token-grid row for one pixel mask under the given training prior.

    ``box`` replaces the mask by its bounding rectangle; ``pixel`` keeps a
    single cell, sampled like a random annotated pixel (probability
    proportional to the cell's mask mass; the peak cell without an rng).
    """
    if prior == "mask":
        return mask_to_token_grid(mask, grid)
    if prior == "box":
        ys, xs = np.where(mask >= 0.5)
        rect = np.zeros_like(mask)
        rect[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = 1.0
        return mask_to_token_grid(rect, grid)
    if prior == "pixel":
        row = mask_to_token_grid(mask, grid)
        out = np.zeros_like(row)
        if rng is None:
            cell = int(np.argmax(row))
        else:
            cell = int(rng.choice(row.size, p=row / row.sum()))
        out[cell] = 1.0
        return out
    raise ValueError(f"unknown prior {prior!r}")


@dataclass
class _CachedSample:
    patches: np.ndarray      # (N, 3p^2)
    token_masks: np.ndarray  # (Q, N)
    labels: np.ndarray       # (Q,)


def _build_cache(dataset, dims: EncoderDims, prior: str,
                 category_filter=None, seed: int = 0) -> list[_CachedSample]:
    keep = None if category_filter is None else set(int(c) for c in category_filter)
    rng = np.random.default_rng(seed)
    cache = []
    for sample in dataset:
        rows = []
        labels = []
        for q in range(sample.masks.shape[0]):
            label = int(sample.labels[q])
            if keep is not None and label not in keep:
                continue
            row = prior_token_mask(sample.masks[q], prior, dims.grid, rng=rng)
            if row.max() <= 0:
                continue
            rows.append(row)
            labels.append(label)
        if rows:
            cache.append(_CachedSample(
                patches=patchify(sample.image, dims),
                token_masks=np.stack(rows),
                labels=np.asarray(labels, dtype=np.int64),
            ))
    return cache


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    aborted: bool
    steps_run: int
    metrics: list = field(default_factory=list)


def _batch_loss(encoder: MaskEncoder, psm: PsmHead, e_t: torch.Tensor,
                batch: list[_CachedSample]) -> torch.Tensor:
    patches = torch.as_tensor(np.stack([b.patches for b in batch]))
    states = encoder.extract(patches)
    embs = []
    labels = []
    for i, item in enumerate(batch):
        embs.append(encoder.fuse(states.select(i), item.token_masks))
        labels.append(torch.as_tensor(item.labels))
    refined = apply_psm(psm, torch.cat(embs), e_t)
    return classification_loss(refined, torch.cat(labels), psm.log_logit_scale)


def train(config: TrainConfig, dataset, encoder: MaskEncoder,
          text_embeddings: TextEmbeddings, psm: PsmHead,
          val_dataset=None, start_step: int = 0) -> TrainResult:
    """Run the fine-tuning recipe; mutates encoder and psm in place.

    Aborts on a non-finite loss, restoring the last parameters that produced
    a finite one. Deterministic for a fixed config and seed.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    freeze_non_trainable(encoder, psm)
    opt, scales = make_optimizer(encoder, psm, config)
    e_t = torch.as_tensor(text_embeddings.values, dtype=torch.float64)

    cache = _build_cache(dataset, encoder.dims, config.prior,
                         config.seen_category_filter, seed=config.seed)
    if not cache:
        raise ValueError("no training instances after category filtering")

    rng = np.random.default_rng(config.seed)
    for _ in range(start_step):  # resumed runs replay the batch sequence
        rng.choice(len(cache), size=config.batch_size,
                   replace=len(cache) < config.batch_size)
    snapshot = None
    metrics = []
    aborted = False
    steps_run = start_step
    for step in range(start_step, config.total_steps):
        factor = cosine_lr_factor(step, config.total_steps)
        for group, scale in zip(opt.param_groups, scales):
            group["lr"] = config.base_lr * scale * factor

        idx = rng.choice(len(cache), size=config.batch_size,
                         replace=len(cache) < config.batch_size)
        loss = _batch_loss(encoder, psm, e_t, [cache[i] for i in idx])
        if not torch.isfinite(loss):
            if snapshot is not None:
                encoder.load_state_dict(snapshot[0])
                psm.load_state_dict(snapshot[1])
            aborted = True
            warnings.warn(f"non-finite loss at step {step}; restored last good parameters")
            break
        snapshot = (copy.deepcopy(encoder.state_dict()), copy.deepcopy(psm.state_dict()))

        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        steps_run = step + 1

        if (config.val_every and val_dataset is not None
                and (step + 1) % config.val_every == 0):
            val_acc = infer.mask_acc(encoder, psm, text_embeddings, val_dataset)
        else:
            val_acc = None
        metrics.append({
            "step": step,
            "lr": config.base_lr * factor,
            "loss": loss.item(),
            "val_maskacc": val_acc,
        })
    return TrainResult(aborted=aborted, steps_run=steps_run, metrics=metrics)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(loss_fn, params: dict[str, torch.Tensor], eps: float = 1e-5,
               n_coords: int = 20, seed: int = 0, zero_tol: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    Checks up to ``n_coords`` randomly chosen coordinates per named tensor.
    ``loss_fn`` must rebuild the loss from current parameter values. A pair
    where both the analytic and numeric values sit below ``zero_tol`` counts
    as zero error: finite differences cannot resolve an exactly-zero gradient
    beyond their 64-bit roundoff floor.
    """
    for p in params.values():
        p.requires_grad_(True)
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {}
    for name, p in params.items():
        grads[name] = (p.grad.detach().clone() if p.grad is not None
                       else torch.zeros_like(p))

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            count = min(n_coords, flat.numel())
            coords = rng.choice(flat.numel(), size=count, replace=False)
            gflat = grads[name].reshape(-1)
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                f_plus = loss_fn().item()
                flat[c] = orig - eps
                f_minus = loss_fn().item()
                flat[c] = orig
                fd = (f_plus - f_minus) / (2.0 * eps)
                a = gflat[c].item()
                scale = max(abs(a), abs(fd))
                if scale <= zero_tol:
                    continue
                worst = max(worst, abs(a - fd) / scale)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


@dataclass
class LoadedCheckpoint:
    encoder: MaskEncoder
    psm: PsmHead
    step: int
    config: dict
    text_embeddings: TextEmbeddings | None = None
    vocab: Vocabulary | None = None


def save_checkpoint(path, encoder: MaskEncoder, psm: PsmHead, config: TrainConfig,
                    step: int, text_embeddings: TextEmbeddings | None = None,
                    vocab: Vocabulary | None = None) -> None:
    """Write manifest + one tensor file per parameter; byte-stable."""
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in encoder.state_dict().items():
        tensors[f"encoder.{name}"] = t.detach().numpy()
    for name, t in psm.state_dict().items():
        tensors[f"psm.{name}"] = t.detach().numpy()
    if text_embeddings is not None:
        tensors["text_embeddings"] = text_embeddings.values
    entries = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        write_tensor(root / "tensors" / f"{name}.mcpp", arr)
        entries.append({"name": name, "dims": list(arr.shape)})
    manifest = {
        "format": "maskfuse-checkpoint",
        "version": 1,
        "step": int(step),
        "config": config.to_json(),
        "config_digest": config.digest(),
        "encoder_dims": encoder.dims.to_json(),
        "psm": psm.config(),
        "vocab": ({"names": list(vocab.names), "templates": list(vocab.templates)}
                  if vocab is not None else None),
        "text_vocab_hash": (text_embeddings.vocab_hash
                            if text_embeddings is not None else None),
        "tensors": entries,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, config: TrainConfig | None = None,
                    override: bool = False) -> LoadedCheckpoint:
    """Rebuild encoder + head from a checkpoint directory.

    If ``config`` is given its digest must match the stored one; pass
    ``override=True`` to continue (with a warning) after a mismatch.
    """
    root = Path(path)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    if config is not None and config.digest() != manifest["config_digest"]:
        if not override:
            raise ValueError("checkpoint was written with a different config "
                             "(pass override=True to load anyway)")
        warnings.warn("loading checkpoint despite config digest mismatch")

    encoder = MaskEncoder(EncoderDims.from_json(manifest["encoder_dims"]))
    pcfg = manifest["psm"]
    psm = PsmHead(variant=pcfg["variant"], embed_dim=pcfg["embed_dim"],
                  hidden=pcfg["hidden"])

    loaded = {}
    for entry in manifest["tensors"]:
        arr = read_tensor(root / "tensors" / f"{entry['name']}.mcpp")
        if list(arr.shape) != list(entry["dims"]):
            raise ValueError(f"tensor {entry['name']}: manifest dims {entry['dims']} "
                             f"do not match file dims {list(arr.shape)}")
        loaded[entry["name"]] = arr

    def take(prefix):
        state = {}
        for name, arr in loaded.items():
            if name.startswith(prefix):
                state[name[len(prefix):]] = torch.as_tensor(arr, dtype=torch.float64)
        return state

    encoder.load_state_dict(take("encoder."))
    psm.load_state_dict(take("psm."))

    vocab = None
    if manifest.get("vocab"):
        vocab = Vocabulary(tuple(manifest["vocab"]["names"]),
                           tuple(manifest["vocab"]["templates"]))
    text = None
    if "text_embeddings" in loaded:
        text = TextEmbeddings(values=loaded["text_embeddings"],
                              vocab_hash=manifest.get("text_vocab_hash") or "")
    return LoadedCheckpoint(encoder=encoder, psm=psm, step=int(manifest["step"]),
                            config=manifest["config"], text_embeddings=text,
                            vocab=vocab)
