"""Synthetic transduction tasks, plain-text corpora and padded batches."""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .errors import FormatError, InvalidArgument

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
MARKERS = ("E", "L")
TASKS = ("copy", "rotate", "marker_lookahead")


class Vocabulary:
    """Token/id bijection with ids 0-3 reserved for PAD, BOS, EOS, UNK."""

    def __init__(self, tokens):
        self.itos = list(RESERVED)
        for tok in tokens:
            if tok in RESERVED:
                continue
            if tok in self.itos:
                raise InvalidArgument(f"duplicate token {tok!r}")
            self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        """``size`` total ids: reserved, the two task markers, then symbols a, b, ..."""
        n = size - len(RESERVED) - len(MARKERS)
        if n < 1:
            raise InvalidArgument(f"vocabulary of {size} leaves no content symbols")
        letters = string.ascii_lowercase
        symbols = [letters[i] if i < len(letters) else f"s{i}" for i in range(n)]
        return cls(list(MARKERS) + symbols)

    @property
    def content_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.itos) if i >= len(RESERVED) and t not in MARKERS]

    def encode(self, tokens, add_eos: bool = True) -> list[int]:
        ids = [self.stoi.get(t, UNK) for t in tokens]
        return ids + [EOS] if add_eos else ids

    def decode(self, ids, strip_eos: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_eos and i == EOS:
                break
            out.append(self.itos[i] if 0 <= i < len(self.itos) else RESERVED[UNK])
        return out

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "marker_lookahead"
    vocab_size: int = 32
    min_len: int = 6
    max_len: int = 12
    lookahead_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise InvalidArgument(f"unknown task {self.kind!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise InvalidArgument("need 1 <= min_len <= max_len")
        if not 0.0 <= self.lookahead_fraction <= 1.0:
            raise InvalidArgument("lookahead_fraction must lie in [0, 1]")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.synthetic(self.vocab_size)


def generate_pair(spec: TaskSpec, index: int, vocab: Vocabulary | None = None):
    """Deterministic ``(source_ids, target_ids)`` for ``index``; both end in EOS.

    ``min_len``/``max_len`` bound the number of content symbols, excluding the
    marker and EOS.
    """
    vocab = vocab or spec.vocabulary()
    rng = np.random.default_rng([spec.seed, index])
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    symbols = np.asarray(vocab.content_ids)
    body = [int(t) for t in symbols[rng.integers(0, len(symbols), size=n)]]
    if spec.kind == "copy":
        return body + [EOS], body + [EOS]
    if spec.kind == "rotate":
        return body + [EOS], body[1:] + body[:1] + [EOS]
    if rng.random() < spec.lookahead_fraction:
        return [vocab.stoi["L"]] + body + [EOS], [body[-1]] + body[:-1] + [EOS]
    return [vocab.stoi["E"]] + body + [EOS], body + [EOS]


def generate_corpus(spec: TaskSpec, count: int, start: int = 0):
    vocab = spec.vocabulary()
    return [generate_pair(spec, start + i, vocab) for i in range(count)]


def load_parallel_corpus(src_path, tgt_path, vocab: Vocabulary):
    """Line-aligned, whitespace-tokenised source/target files to id pairs."""
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        line = min(len(src_lines), len(tgt_lines)) + 1
        raise FormatError(
            f"{src_path} has {len(src_lines)} lines but {tgt_path} has {len(tgt_lines)}", line=line)
    return [(vocab.encode(s.split()), vocab.encode(t.split())) for s, t in zip(src_lines, tgt_lines)]


@dataclass
class Batch:
    src: torch.Tensor
    tgt: torch.Tensor
    src_lens: torch.Tensor
    tgt_lens: torch.Tensor

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def src_mask(self) -> torch.Tensor:
        return nx.length_mask(self.src_lens, self.src.shape[1])

    @property
    def tgt_mask(self) -> torch.Tensor:
        return nx.length_mask(self.tgt_lens, self.tgt.shape[1])


def pad_batch(pairs) -> Batch:
    src_lens = [len(s) for s, _ in pairs]
    tgt_lens = [len(t) for _, t in pairs]
    src = torch.full((len(pairs), max(src_lens)), PAD, dtype=torch.long)
    tgt = torch.full((len(pairs), max(tgt_lens)), PAD, dtype=torch.long)
    for b, (s, t) in enumerate(pairs):
        src[b, :len(s)] = torch.tensor(s)
        tgt[b, :len(t)] = torch.tensor(t)
    return Batch(src, tgt, torch.tensor(src_lens), torch.tensor(tgt_lens))


def make_batches(pairs, batch_size: int, seed: int | None = 0) -> list[Batch]:
    """Shuffle by ``seed`` (``None`` keeps order) and cut into padded batches."""
    if batch_size < 1:
        raise InvalidArgument("batch_size must be >= 1")
    order = np.arange(len(pairs)) if seed is None else nx.SeededRng(seed).permutation(len(pairs))
    return [pad_batch([pairs[i] for i in order[k:k + batch_size]])
            for k in range(0, len(pairs), batch_size)]
