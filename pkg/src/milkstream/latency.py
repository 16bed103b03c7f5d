"""Latency metrics (AP, AL, DAL) and the latency-augmented objective.

Delays ``g`` are 1-indexed source counts: ``g[i]`` source tokens had been
read when target token ``i`` was written.  Hard traces give integers;
training uses expected (fractional) delays as differentiable tensors.
Functions return a float for plain sequences and a tensor when handed a
tensor, so the same code serves evaluation and training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from . import numerics as nx
from .errors import InvalidArgument

FRACTIONAL_TOL = 1e-6


@dataclass
class DelayVector:
    g: Sequence[float] | torch.Tensor
    source_len: int
    target_len: int | None = None

    def __post_init__(self):
        if self.target_len is None:
            self.target_len = len(self.g)
        if self.source_len < 1 or self.target_len < 1:
            raise InvalidArgument("source and target lengths must be >= 1")
        if len(self.g) != self.target_len:
            raise InvalidArgument(f"{len(self.g)} delays for target length {self.target_len}")

    @property
    def gamma(self) -> float:
        return self.target_len / self.source_len

    def tensor(self) -> torch.Tensor:
        return nx.as_tensor(self.g)


@dataclass(frozen=True)
class LatencyReport:
    ap: float
    al: float
    dal: float


def _out(value: torch.Tensor, like):
    return value if isinstance(like, torch.Tensor) else float(value)


def expected_delay(alpha_row, require_normalized: bool = True):
    """``sum_j j * alpha[j]`` over 1-indexed positions (works row-wise on batches)."""
    a = nx.as_tensor(alpha_row)
    if require_normalized and ((a.sum(dim=-1) - 1.0).abs() > FRACTIONAL_TOL).any():
        raise InvalidArgument("expected_delay needs a normalised alpha row")
    pos = torch.arange(1, a.shape[-1] + 1, dtype=nx.DTYPE)
    return _out((a * pos).sum(dim=-1), alpha_row)


def average_proportion(d: DelayVector):
    g = d.tensor()
    return _out(g.sum() / (d.source_len * d.target_len), d.g)


def _tau(g: torch.Tensor, source_len: int) -> int:
    hits = (g >= source_len - FRACTIONAL_TOL).nonzero()
    return int(hits[0]) + 1 if len(hits) else len(g)


def average_lagging(d: DelayVector, truncate: bool = True):
    """Mean lag behind an ideal simultaneous translator, truncated at full consumption.

    ``truncate=False`` averages over every target position instead, which
    under-reports lag once the source is exhausted.  When the source is never
    fully read the average runs over the whole target.
    """
    g = d.tensor()
    tau = _tau(g, d.source_len) if truncate else len(g)
    i = torch.arange(tau, dtype=nx.DTYPE)
    lags = g[:tau] - i / d.gamma
    return _out(lags.mean(), d.g)


def _clamped(d: DelayVector) -> torch.Tensor:
    g = d.tensor()
    step = 1.0 / d.gamma
    out = [g[0]]
    for i in range(1, len(g)):
        out.append(torch.maximum(g[i], out[-1] + step))
    return torch.stack(out)


def clamp_delays(d: DelayVector):
    """``g'[1] = g[1]``, ``g'[i] = max(g[i], g'[i-1] + 1/gamma)``."""
    clamped = _clamped(d)
    if isinstance(d.g, torch.Tensor):
        return clamped
    return [float(x) for x in clamped]


def differentiable_average_lagging(d: DelayVector):
    g_clamped = _clamped(d)
    i = torch.arange(len(g_clamped), dtype=nx.DTYPE)
    return _out((g_clamped - i / d.gamma).mean(), d.g)


def latency_report(d: DelayVector) -> LatencyReport:
    plain = DelayVector([float(x) for x in d.g], d.source_len, d.target_len)
    return LatencyReport(average_proportion(plain), average_lagging(plain),
                         differentiable_average_lagging(plain))


def batch_dal(g: torch.Tensor, source_lens, target_lens) -> torch.Tensor:
    """Per-sentence DAL for padded ``(batch, max_target)`` delays."""
    g = nx.as_tensor(g)
    src = torch.as_tensor(source_lens, dtype=nx.DTYPE)
    tgt = torch.as_tensor(target_lens, dtype=nx.DTYPE)
    step = src / tgt
    cols = [g[:, 0]]
    for i in range(1, g.shape[1]):
        cols.append(torch.maximum(g[:, i], cols[-1] + step))
    clamped = torch.stack(cols, dim=1)
    i = torch.arange(g.shape[1], dtype=nx.DTYPE)
    lags = clamped - i.unsqueeze(0) * step.unsqueeze(1)
    mask = nx.length_mask(torch.as_tensor(target_lens), g.shape[1])
    return (lags * mask).sum(dim=1) / tgt


def latency_augmented_loss(nll, g, lam: float, d: DelayVector | None = None,
                           source_lens=None, target_lens=None):
    """``nll + lam * DAL(g)``.

    Pass a :class:`DelayVector` for one sentence, or padded batch delays with
    ``source_lens``/``target_lens``, in which case DAL is averaged over the batch.
    """
    if lam < 0:
        raise InvalidArgument(f"latency weight must be >= 0, got {lam}")
    if lam == 0:
        return nll
    if d is not None:
        cost = differentiable_average_lagging(DelayVector(g, d.source_len, d.target_len))
    else:
        cost = batch_dal(g, source_lens, target_lens).mean()
    return nll + lam * cost


# ------------------------------------------------------------------ traces


@dataclass(frozen=True)
class Action:
    kind: str  # "r" or "w"
    token: str
    pos: int


@dataclass
class DecodeTrace:
    actions: list
    source_len: int | None = None
    terminated: bool = True

    def validate(self):
        last_r = last_w = 0
        for a in self.actions:
            if a.kind == "r":
                if a.pos != last_r + 1:
                    raise InvalidArgument(f"read positions must advance by one, got {a.pos} after {last_r}")
                last_r = a.pos
            elif a.kind == "w":
                if a.pos != last_w + 1:
                    raise InvalidArgument(f"write positions must advance by one, got {a.pos} after {last_w}")
                last_w = a.pos
            else:
                raise InvalidArgument(f"unknown action {a.kind!r}")
        if self.source_len is not None and last_r > self.source_len:
            raise InvalidArgument("trace reads past the end of the source")
        if last_w == 0:
            raise InvalidArgument("trace has no writes")
        return self

    @property
    def reads(self) -> int:
        return sum(a.kind == "r" for a in self.actions)

    @property
    def writes(self) -> int:
        return sum(a.kind == "w" for a in self.actions)

    @classmethod
    def from_string(cls, pattern: str, source_len: int | None = None) -> "DecodeTrace":
        """Build a trace from e.g. ``"R R W R W"`` with placeholder tokens."""
        acts, r, w = [], 0, 0
        for ch in pattern.replace(" ", "").upper():
            if ch == "R":
                r += 1
                acts.append(Action("r", f"x{r}", r))
            elif ch == "W":
                w += 1
                acts.append(Action("w", f"y{w}", w))
            else:
                raise InvalidArgument(f"bad trace symbol {ch!r}")
        return cls(acts, source_len=source_len if source_len is not None else r)

    def initial_delay(self) -> int:
        for n, a in enumerate(self.actions):
            if a.kind == "w":
                return n
        raise InvalidArgument("trace has no writes")


def delays_from_trace(trace: DecodeTrace) -> DelayVector:
    trace.validate()
    g, reads = [], 0
    for a in trace.actions:
        if a.kind == "r":
            reads += 1
        else:
            g.append(reads)
    source_len = trace.source_len if trace.source_len is not None else reads
    if g[0] < 1:
        raise InvalidArgument("first write happens before any read")
    return DelayVector(g, source_len, len(g))
