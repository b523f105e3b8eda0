"""Category text embeddings: a deterministic toy encoder plus file import.

The toy encoder stands in for a real text tower: each template-expanded
category name seeds a keyed hash, the hash drives a Gaussian draw, and the
per-template vectors are averaged and unit-normalised. Real embeddings
exported from elsewhere can be loaded from the tensor container instead.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataFormatError, Vocabulary, read_tensor, write_tensor


@dataclass
class TextEmbeddings:
    values: np.ndarray  # (K, D) float64, rows unit-norm
    vocab_hash: str

    def verify_vocab(self, vocab: Vocabulary, force: bool = False) -> None:
        """Refuse embeddings bound to a different vocabulary unless forced."""
        if not force and vocab.digest() != self.vocab_hash:
            raise ValueError("text embeddings were built for a different vocabulary "
                             "(pass force=True to override)")


def _hashed_normal(seed: int, text: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x1f{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))
    return rng.standard_normal(dim)


def toy_encode(vocab: Vocabulary, embed_dim: int, seed: int = 0) -> TextEmbeddings:
    """Deterministic pseudo-embeddings, one unit row per category."""
    if embed_dim < 2:
        raise ValueError("embed_dim must be at least 2")
    rows = []
    for name in vocab.names:
        vecs = [_hashed_normal(seed, prompt, embed_dim) for prompt in vocab.expand(name)]
        avg = np.mean(vecs, axis=0)
        rows.append(avg / np.linalg.norm(avg))
    return TextEmbeddings(values=np.stack(rows), vocab_hash=vocab.digest())


def save_text_embeddings(path, embeddings: TextEmbeddings, vocab: Vocabulary,
                         seed: int | None = None) -> None:
    """Write (K, D) values plus a JSON sidecar describing the vocabulary."""
    path = Path(path)
    write_tensor(path, embeddings.values)
    sidecar = {
        "names": list(vocab.names),
        "templates": list(vocab.templates),
        "seed": seed,
        "vocab_hash": embeddings.vocab_hash,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_text_embeddings(path, vocab: Vocabulary) -> TextEmbeddings:
    """Load (K, D) embeddings, re-normalising rows and binding to ``vocab``."""
    path = Path(path)
    values = read_tensor(path)
    if values.ndim != 2:
        raise DataFormatError(f"{path}: expected a 2-D embedding matrix")
    if values.shape[0] != len(vocab):
        raise DataFormatError(f"{path}: file holds {values.shape[0]} rows but the "
                              f"vocabulary has {len(vocab)} categories")
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if meta.get("names") and tuple(meta["names"]) != vocab.names:
            raise DataFormatError(f"{sidecar}: sidecar names do not match the vocabulary")
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    if (norms == 0).any():
        raise DataFormatError(f"{path}: zero-norm embedding row")
    return TextEmbeddings(values=values / norms, vocab_hash=vocab.digest())
