"""Tag vocabulary, prompt tokenization and the tag encoder.

Prompts are comma-separated tag lists.  The encoder has no positional
embedding: a prompt is a set of tags, so reordering tags only permutes the
rows of the conditioning matrix.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError
from .nn import Attention, Embedding, FeedForward, LayerNorm, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
NULL_TOKEN = "<null>"
PAD_ID = 0
NULL_ID = 1


class TagVocabulary:
    """Ordered tag list; line number in the saved file is the id."""

    def __init__(self, tags: Sequence[str]):
        tags = [t.strip().lower() for t in tags]
        if PAD_TOKEN in tags or NULL_TOKEN in tags:
            raise ContractError("reserved tokens cannot be used as tags")
        if len(set(tags)) != len(tags):
            raise ContractError("duplicate tags in vocabulary")
        self.tokens = [PAD_TOKEN, NULL_TOKEN, *tags]
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def reference(cls) -> "TagVocabulary":
        from .scenes import reference_tags

        return cls(reference_tags())

    @property
    def tags(self) -> list[str]:
        return self.tokens[2:]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tag):
        return tag in self._ids and self._ids[tag] > NULL_ID

    def id(self, tag: str) -> int:
        return self._ids[tag]

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TagVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:2] != [PAD_TOKEN, NULL_TOKEN]:
            raise DataError(f"{path}: vocabulary must start with {PAD_TOKEN} and {NULL_TOKEN}")
        return cls(lines[2:])

    def __eq__(self, other):
        return isinstance(other, TagVocabulary) and self.tokens == other.tokens


class Tokens(NamedTuple):
    ids: np.ndarray
    dropped: int


def split_tags(prompt: str) -> list[str]:
    return [part.strip().lower() for part in prompt.split(",") if part.strip()]


def tokenize(prompt: str, vocab: TagVocabulary, max_len: int = 16) -> Tokens:
    """Map a comma-separated prompt to ``max_len`` ids.

    Unknown tags are dropped and counted; duplicates are kept.
    """
    ids, dropped = [], 0
    for tag in split_tags(prompt):
        if tag in vocab:
            ids.append(vocab.id(tag))
        else:
            dropped += 1
    if dropped:
        logger.warning("dropped %d unknown tag(s) from prompt %r", dropped, prompt)
    ids = ids[:max_len] + [PAD_ID] * max(0, max_len - len(ids))
    return Tokens(np.asarray(ids, dtype=np.int64), dropped)


def null_ids(max_len: int = 16) -> np.ndarray:
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = NULL_ID
    return ids


@dataclass
class ConditioningMatrix:
    """Rows of tag embeddings ``[B, M, d]`` and the mask of real (non-PAD) rows."""

    matrix: Tensor
    mask: np.ndarray

    @property
    def batch(self) -> int:
        return self.matrix.shape[0]

    def repeat(self, n: int) -> "ConditioningMatrix":
        """Tile every row of the batch ``n`` times, keeping per-sample order."""
        data = np.repeat(self.matrix.data, n, axis=0)
        return ConditioningMatrix(Tensor(data, dtype=data.dtype), np.repeat(self.mask, n, axis=0))

    def detach(self) -> "ConditioningMatrix":
        return ConditioningMatrix(self.matrix.detach(), self.mask)

    @staticmethod
    def concat(items: Sequence["ConditioningMatrix"]) -> "ConditioningMatrix":
        return ConditioningMatrix(T.concat([c.matrix for c in items], axis=0),
                                  np.concatenate([c.mask for c in items], axis=0))


class EncoderLayer(Module):
    def __init__(self, dim, heads, rng, dtype):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, rng, heads=heads, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ff = FeedForward(dim, rng, dtype=dtype)

    def forward(self, x, key_mask):
        x = T.add(x, self.attn(self.norm1(x), key_mask=key_mask))
        return T.add(x, self.ff(self.norm2(x)))


class TagEncoder(Module):
    """Embedding lookup followed by a small self-attention transformer."""

    def __init__(self, vocab_size, rng, dim=64, layers=2, heads=4, max_len=16, dtype=np.float32):
        self.dim = dim
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.embed = Embedding(vocab_size, dim, rng, dtype)
        self.layers = [EncoderLayer(dim, heads, rng, dtype) for _ in range(layers)]
        self.norm = LayerNorm(dim, dtype)

    def forward(self, ids) -> ConditioningMatrix:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != self.max_len:
            raise ContractError(f"expected sequences of length {self.max_len}, got {ids.shape[1]}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ContractError(f"token id outside [0, {self.vocab_size})")
        mask = ids != PAD_ID
        x = self.embed(ids)
        for layer in self.layers:
            x = layer(x, mask)
        return ConditioningMatrix(self.norm(x), mask)

    encode_tags = forward

    def unconditional(self, batch: int = 1) -> ConditioningMatrix:
        """The NULL-prompt matrix used as the unconditional branch of guidance."""
        return self(np.tile(null_ids(self.max_len), (batch, 1)))
