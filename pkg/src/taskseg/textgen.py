"""Text lists built from task targets, a word-level tokenizer and the text mapper.

The text mapper encodes each entry of the padded text list into one query
vector and appends a block of learnable context vectors, giving one text query
per object query.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import gradkernel as gk
from .annotations import TASKS, CapacityError, ClassTable, TaskGroundTruth, TaskKind
from .gradkernel import Tensor
from .nn import Embedding, LayerNorm, Linear, MLP, Module, MultiHeadAttention

PAD, EOS, UNK = 0, 1, 2
BOS = EOS
RESERVED = ("<pad>", "<eos>", "<unk>")
TEMPLATE_WORDS = ("a", "an", "photo", "with", "the", "task", "is")

CLASS_TEMPLATE = "a photo with a {}"
PAD_TEMPLATE = "a {} photo"
TASK_TEMPLATE = "the task is {}"


@dataclass(frozen=True)
class TextList:
    entries: tuple[str, ...]
    n_real: int

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    length: int


def normalize(text: str) -> list[str]:
    return text.lower().split()


def build_text_list(gt: TaskGroundTruth, classes: ClassTable, n_text: int) -> TextList:
    n = len(gt.targets)
    if n > n_text:
        raise CapacityError(f"{n} targets exceed the text list length {n_text} by {n - n_text}")
    entries = [CLASS_TEMPLATE.format(classes[t.class_id].name) for t in gt.targets]
    entries += [PAD_TEMPLATE.format(gt.task.value)] * (n_text - n)
    return TextList(tuple(entries), n)


class Vocabulary:
    """Word-level vocabulary; ids 0-2 are PAD, BOS/EOS and UNK."""

    def __init__(self, words: Iterable[str]):
        self.tokens: list[str] = list(RESERVED)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for w in words:
            if w not in self.index:
                self.index[w] = len(self.tokens)
                self.tokens.append(w)

    @classmethod
    def from_classes(cls, classes: ClassTable) -> "Vocabulary":
        words = list(TEMPLATE_WORDS) + [t.value for t in TASKS]
        for name in classes.names:
            words.extend(normalize(name))
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:3]) != RESERVED:
            raise ValueError("vocabulary file must start with the three reserved tokens")
        return cls(lines[3:])

    def tokenize(self, text: str, width: int) -> TokenSequence:
        words = normalize(text)[: max(width - 2, 0)]
        ids = [BOS] + [self.index.get(w, UNK) for w in words] + [EOS]
        length = len(ids)
        return TokenSequence(tuple(ids + [PAD] * (width - length)), length)


def tokenize(text: str, vocab: Vocabulary, width: int = 10) -> TokenSequence:
    return vocab.tokenize(text, width)


class TextEncoder(Module):
    """Token embeddings -> E pre-norm self-attention blocks -> masked mean pool."""

    def __init__(self, vocab_size: int, width: int, d: int, depth: int, heads: int, rng: np.random.Generator):
        self.token_embed = Embedding(vocab_size, d, rng, scale=0.5)
        self.pos_embed = gk.parameter(rng.normal(0.0, 0.02, (width, d)))
        self.blocks = [_EncoderBlock(d, heads, rng) for _ in range(depth)]
        self.norm = LayerNorm(d)
        self.proj = Linear(d, d, rng)

    def __call__(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """ids: (n, width) int; returns (n, d)."""
        n, width = ids.shape
        valid = np.arange(width)[None, :] < lengths[:, None]
        x = self.token_embed(ids) + self.pos_embed
        key_mask = np.broadcast_to(~valid[:, None, :], (n, width, width))
        for block in self.blocks:
            x = block(x, key_mask)
        x = self.norm(x)
        weights = (valid / lengths[:, None]).astype(np.float32)[:, :, None]
        pooled = gk.sum(x * weights, axis=1)
        return self.proj(pooled)


class _EncoderBlock(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = MLP(d, 2 * d, d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, mask)
        return x + self.ffn(self.norm2(x))


class TextMapper(Module):
    """Maps a padded text list to ``n_text + n_ctx`` text queries."""

    def __init__(
        self,
        vocab: Vocabulary,
        d: int,
        n_ctx: int,
        depth: int = 1,
        heads: int = 1,
        width: int = 10,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab = vocab
        self.width = width
        self.encoder = TextEncoder(len(vocab), width, d, depth, heads, rng)
        self.context = gk.parameter(rng.normal(0.0, 0.02, (n_ctx, d))) if n_ctx else None

    def encode_entries(self, entries: Sequence[str]) -> Tensor:
        """Encode each distinct entry once and gather rows back in list order."""
        unique = list(dict.fromkeys(entries))
        seqs = [self.vocab.tokenize(e, self.width) for e in unique]
        ids = np.array([s.ids for s in seqs], dtype=np.int64)
        lengths = np.array([s.length for s in seqs], dtype=np.int64)
        encoded = self.encoder(ids, lengths)
        where = {e: i for i, e in enumerate(unique)}
        return gk.take(encoded, [where[e] for e in entries], axis=0)

    def __call__(self, text_list: TextList) -> Tensor:
        rows = self.encode_entries(text_list.entries)
        if self.context is None:
            return rows
        return gk.concat([rows, self.context], axis=0)


def text_mapper_forward(text_list: TextList, mapper: TextMapper) -> Tensor:
    return mapper(text_list)
