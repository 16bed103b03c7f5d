"""Streaming recurrent encoder-decoder with pluggable attention.

Training runs teacher-forced in expectation over the monotonic head (noise on
the selection energies, expected delays, DAL penalty).  Decoding is greedy and
streams the source: tokens are encoded only when the schedule reads them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import attention as att
from . import numerics as nx
from .data import BOS, EOS, Batch, Vocabulary
from .errors import ContractViolation, InvalidArgument, NumericFailure, VersionError
from .latency import Action, DecodeTrace, batch_dal, expected_delay, latency_augmented_loss

CKPT_MAGIC = b"MILKSTREAM-CKPT-1\n"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    embed_dim: int = 16
    hidden_dim: int = 32
    attn_dim: int = 16
    encoder_layers: int = 1
    decoder_layers: int = 1
    attention: att.AttentionConfig = field(default_factory=att.AttentionConfig)
    label_smoothing: float = 0.1
    bidirectional: bool = False
    init_seed: int = 0

    def __post_init__(self):
        dims = (self.vocab_size, self.embed_dim, self.hidden_dim, self.attn_dim,
                self.encoder_layers, self.decoder_layers)
        if min(dims) < 1:
            raise InvalidArgument("all model dimensions must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InvalidArgument("label_smoothing must lie in [0, 1)")
        if self.bidirectional and self.attention.streaming:
            raise InvalidArgument(f"{self.attention.kind} attention needs a unidirectional encoder")
        if self.bidirectional:
            raise InvalidArgument("bidirectional encoders are not implemented")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["attention"] = att.AttentionConfig(**d["attention"])
        return cls(**d)


@dataclass(frozen=True)
class WaitKSchedule:
    """Read ``k`` tokens, then ``emission_rate`` more per write (fractional parts accumulate)."""

    k: int
    emission_rate: float = 1.0

    def __post_init__(self):
        if self.k < 1 or self.emission_rate <= 0:
            raise InvalidArgument("wait-k needs k >= 1 and a positive emission rate")

    def delay(self, i: int, source_len: int) -> int:
        """Source tokens read before target token ``i`` (1-indexed)."""
        rate = Fraction(str(self.emission_rate))
        return min(self.k + math.floor(rate * (i - 1)), source_len)


class MinimalGatedCell(nn.Module):
    """One forget gate shared between reset and update roles, tanh candidate."""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.gate_x = nn.Linear(input_dim, hidden_dim, dtype=nx.DTYPE)
        self.gate_h = nn.Linear(hidden_dim, hidden_dim, bias=False, dtype=nx.DTYPE)
        self.cand_x = nn.Linear(input_dim, hidden_dim, dtype=nx.DTYPE)
        self.cand_h = nn.Linear(hidden_dim, hidden_dim, bias=False, dtype=nx.DTYPE)

    def forward(self, x, h):
        f = torch.sigmoid(self.gate_x(x) + self.gate_h(h))
        cand = torch.tanh(self.cand_x(x) + self.cand_h(f * h))
        return (1.0 - f) * h + f * cand


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim, dtype=nx.DTYPE)
        dims = [cfg.embed_dim] + [cfg.hidden_dim] * cfg.encoder_layers
        self.cells = nn.ModuleList(MinimalGatedCell(dims[n], cfg.hidden_dim)
                                   for n in range(cfg.encoder_layers))
        self.hidden_dim = cfg.hidden_dim

    def initial_state(self, batch: int):
        return [torch.zeros(batch, self.hidden_dim, dtype=nx.DTYPE) for _ in self.cells]

    def step(self, tokens, state):
        x = self.embed(tokens)
        new = []
        for cell, h in zip(self.cells, state):
            x = cell(x, h)
            new.append(x)
        return x, new

    def forward(self, src):
        state = self.initial_state(src.shape[0])
        outs = []
        for j in range(src.shape[1]):
            out, state = self.step(src[:, j], state)
            outs.append(out)
        return torch.stack(outs, dim=1)


class StreamingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        H, E, A = cfg.hidden_dim, cfg.embed_dim, cfg.attn_dim
        self.encoder = Encoder(cfg)
        self.tgt_embed = nn.Embedding(cfg.vocab_size, E, dtype=nx.DTYPE)
        self.query_cell = MinimalGatedCell(E + H, H)
        self.upper_cells = nn.ModuleList(MinimalGatedCell(2 * H if n == 0 else H, H)
                                         for n in range(cfg.decoder_layers - 1))
        self.soft_energy = att.SoftEnergy(H, H, A)
        if cfg.attention.kind in ("monotonic", "mocha", "milk"):
            self.mono_energy = att.MonotonicEnergy(H, H, A, cfg.attention.energy_offset)
        else:
            self.mono_energy = None
        self.output = nn.Linear(2 * H, cfg.vocab_size, dtype=nx.DTYPE)
        self.reset_parameters(cfg.init_seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("mono_energy.offset"):
                continue
            if name.endswith("mono_energy.gain"):
                nn.init.constant_(p, self.cfg.attn_dim ** -0.5)
                continue
            fan = p.shape[-1] if p.dim() > 1 else self.cfg.hidden_dim
            bound = 1.0 / math.sqrt(fan)
            with torch.no_grad():
                p.copy_(torch.rand(p.shape, generator=gen, dtype=nx.DTYPE) * 2 * bound - bound)

    @property
    def schedule(self) -> WaitKSchedule:
        a = self.cfg.attention
        return WaitKSchedule(a.wait_k, a.emission_rate)

    # -------------------------------------------------------------- decoder

    def _decoder_step(self, y_prev, query, upper, ctx_prev):
        x = torch.cat([self.tgt_embed(y_prev), ctx_prev], dim=-1)
        return self.query_cell(x, query)

    def _output(self, query, upper, ctx):
        top = query
        new_upper = []
        x = torch.cat([query, ctx], dim=-1)
        for cell, h in zip(self.upper_cells, upper):
            x = cell(x, h)
            new_upper.append(x)
            top = x
        logits = self.output(torch.cat([top, ctx], dim=-1))
        return logits, new_upper

    @staticmethod
    def _score(energy: att.SoftEnergy, query, key_proj, monotonic: bool):
        hidden = torch.tanh((query @ energy.w_query.T).unsqueeze(-2) + key_proj + energy.bias)
        if not monotonic:
            return hidden @ energy.v
        v = energy.v
        direction = v / torch.clamp(torch.linalg.vector_norm(v), min=1e-12)
        return energy.gain * (hidden @ direction) + energy.offset

    def forward_expectation(self, batch: Batch, rng: nx.SeededRng | None = None,
                            full_read: bool = False):
        """Teacher-forced pass; returns log-probs ``(B, Ty, V)``, delays ``(B, Ty)`` and betas.

        ``full_read`` pins the monotonic head to the end of the source, which
        turns a streaming model into plain soft attention over the same energies.
        """
        cfg = self.cfg.attention
        if full_read:
            cfg = cfg.with_(kind="soft")
        H = self.encoder(batch.src)
        B, Ty = batch.tgt.shape
        soft_keys = H @ self.soft_energy.w_key.T
        mono_keys = None
        if self.mono_energy is not None and cfg.kind != "soft":
            mono_keys = H @ self.mono_energy.w_key.T
        query = torch.zeros(B, self.cfg.hidden_dim, dtype=nx.DTYPE)
        upper = [torch.zeros(B, self.cfg.hidden_dim, dtype=nx.DTYPE) for _ in self.upper_cells]
        ctx = torch.zeros(B, self.cfg.hidden_dim, dtype=nx.DTYPE)
        alpha = att.first_alpha(H.shape[:2])
        y_prev = torch.full((B,), BOS, dtype=torch.long)
        logps, delays, betas = [], [], []
        for i in range(Ty):
            query = self._decoder_step(y_prev, query, upper, ctx)
            u = self._score(self.soft_energy, query, soft_keys, False)
            e = self._score(self.mono_energy, query, mono_keys, True) if mono_keys is not None else None
            prefix = None
            if cfg.kind == "wait_k":
                prefix = torch.clamp(cfg.wait_k + math.floor(Fraction(str(cfg.emission_rate)) * i)
                                     + torch.zeros_like(batch.src_lens), max=batch.src_lens)
            row = att.attention_row(cfg, e, u, alpha, batch.src_lens, rng, prefix)
            alpha = row.alpha
            ctx = att.expected_context(row.beta, H)
            logits, upper = self._output(query, upper, ctx)
            logps.append(torch.log_softmax(logits, dim=-1))
            delays.append(expected_delay(row.alpha, require_normalized=False))
            betas.append(row.beta)
            y_prev = batch.tgt[:, i]
        return torch.stack(logps, 1), torch.stack(delays, 1), torch.stack(betas, 1)

    # ------------------------------------------------------------ streaming

    def encode_prefix(self, tokens, upto: int):
        """Encoder states ``h_1..h_upto`` for one sentence, shape ``(upto, hidden)``."""
        self._check_tokens(tokens)
        if not 0 <= upto <= len(tokens):
            raise InvalidArgument(f"upto={upto} outside [0, {len(tokens)}]")
        state = self.encoder.initial_state(1)
        outs = []
        with torch.no_grad():
            for j in range(upto):
                out, state = self.encoder.step(torch.tensor([tokens[j]]), state)
                outs.append(out[0])
        if not outs:
            return torch.zeros(0, self.cfg.hidden_dim, dtype=nx.DTYPE)
        return torch.stack(outs)

    def _check_tokens(self, tokens):
        for t in tokens:
            if not 0 <= int(t) < self.cfg.vocab_size:
                raise InvalidArgument(f"token id {t} outside vocabulary of {self.cfg.vocab_size}")


class StreamingSource:
    """Reads and encodes source tokens one at a time, logging read actions."""

    def __init__(self, model: StreamingModel, tokens, vocab: Vocabulary | None = None):
        model._check_tokens(tokens)
        self.model, self.tokens, self.vocab = model, list(tokens), vocab
        self.state = model.encoder.initial_state(1)
        self.states: list[torch.Tensor] = []
        self.actions: list[Action] = []

    def __len__(self):
        return len(self.tokens)

    @property
    def n_read(self) -> int:
        return len(self.states)

    def read(self):
        j = self.n_read
        if j >= len(self.tokens):
            raise ContractViolation("read past the end of the source")
        out, self.state = self.model.encoder.step(torch.tensor([self.tokens[j]]), self.state)
        self.states.append(out[0])
        self.actions.append(Action("r", _tok(self.vocab, self.tokens[j]), j + 1))

    def read_upto(self, n: int):
        while self.n_read < n:
            self.read()

    def state_at(self, j: int) -> torch.Tensor:
        """Encoder state at 1-indexed ``j``; may read exactly one new token."""
        if j == self.n_read + 1:
            self.read()
        elif j > self.n_read:
            raise ContractViolation(f"position {j} requested with only {self.n_read} tokens read")
        return self.states[j - 1]

    def matrix(self) -> torch.Tensor:
        return torch.stack(self.states)


def _tok(vocab, i) -> str:
    return vocab.itos[i] if vocab is not None else str(int(i))


@dataclass
class DecodeResult:
    tokens: list
    trace: DecodeTrace
    beta: np.ndarray          # (|y|, |x|) attention actually used at each write
    heads: list               # source prefix length at each write


def greedy_simultaneous_decode(model: StreamingModel, source, max_len: int | None = None,
                               vocab: Vocabulary | None = None,
                               schedule: WaitKSchedule | None = None) -> DecodeResult:
    """Greedy decode that interleaves reads and writes according to the attention kind."""
    cfg = model.cfg.attention
    if len(source) == 0:
        raise InvalidArgument("empty source")
    max_len = max_len if max_len is not None else 2 * len(source) + 10
    if max_len < 1:
        raise InvalidArgument("max_len must be >= 1")
    if schedule is None and cfg.kind == "wait_k":
        schedule = model.schedule
    src = StreamingSource(model, source, vocab)
    n = len(src)
    H = model.cfg.hidden_dim
    head = att.HardHead()
    actions: list[Action] = []
    out_tokens, betas, heads = [], [], []
    with torch.no_grad():
        query = torch.zeros(1, H, dtype=nx.DTYPE)
        upper = [torch.zeros(1, H, dtype=nx.DTYPE) for _ in model.upper_cells]
        ctx = torch.zeros(1, H, dtype=nx.DTYPE)
        y_prev = torch.tensor([BOS])
        for i in range(1, max_len + 1):
            query = model._decoder_step(y_prev, query, upper, ctx)
            lo = 1
            if schedule is not None:
                t = schedule.delay(i, n)
                src.read_upto(t)
            elif cfg.kind == "soft":
                t = n
                src.read_upto(n)
            else:
                mono = model.mono_energy
                qm = query[0] @ mono.w_query.T

                def energy_at(j):
                    h = src.state_at(j)
                    return float(_mono_score(mono, qm, h))

                head, t = att.hard_decode_step(energy_at, head, n)
                if cfg.kind == "monotonic":
                    lo = t
                elif cfg.kind == "mocha":
                    lo = max(1, t - cfg.chunk_size + 1)
            keys = src.matrix()[lo - 1:t]
            if cfg.kind == "monotonic" and schedule is None:
                weights = torch.ones(1, dtype=nx.DTYPE)
            else:
                u = model._score(model.soft_energy, query, (keys @ model.soft_energy.w_key.T).unsqueeze(0), False)
                weights = torch.softmax(u[0], dim=-1)
            ctx = (weights.unsqueeze(-1) * keys).sum(0, keepdim=True)
            logits, upper = model._output(query, upper, ctx)
            y = int(torch.argmax(logits[0]))
            actions.extend(src.actions)
            src.actions.clear()
            actions.append(Action("w", _tok(vocab, y), i))
            row = np.zeros(n)
            row[lo - 1:t] = weights.numpy()
            betas.append(row)
            heads.append(t)
            out_tokens.append(y)
            if y == EOS:
                break
            y_prev = torch.tensor([y])
    trace = DecodeTrace(actions, source_len=n, terminated=out_tokens[-1] == EOS)
    return DecodeResult(out_tokens, trace.validate(), np.stack(betas), heads)


def _mono_score(mono: att.MonotonicEnergy, query_proj, h):
    hidden = torch.tanh(query_proj + h @ mono.w_key.T + mono.bias)
    v = mono.v
    direction = v / torch.clamp(torch.linalg.vector_norm(v), min=1e-12)
    return mono.gain * (hidden @ direction) + mono.offset


def wait_k_decode(model: StreamingModel, source, schedule: WaitKSchedule,
                  max_len: int | None = None, vocab: Vocabulary | None = None) -> DecodeResult:
    return greedy_simultaneous_decode(model, source, max_len, vocab, schedule=schedule)


# ------------------------------------------------------------------ training


def sentence_losses(model: StreamingModel, batch: Batch, lam: float,
                    rng: nx.SeededRng | None = None, full_read: bool = False):
    """Per-sentence smoothed NLL and DAL on expected delays."""
    logp, delays, _ = model.forward_expectation(batch, rng, full_read)
    eps = model.cfg.label_smoothing
    gold = logp.gather(-1, batch.tgt.unsqueeze(-1)).squeeze(-1)
    tok = -(1.0 - eps) * gold - eps * logp.mean(dim=-1) if eps > 0 else -gold
    nll = (tok * batch.tgt_mask).sum(dim=1)
    dal = batch_dal(delays, batch.src_lens, batch.tgt_lens)
    return nll, dal, delays


def batch_loss(model: StreamingModel, batch: Batch, lam: float, rng: nx.SeededRng | None = None,
               full_read: bool = False):
    if lam < 0:
        raise InvalidArgument("latency weight must be >= 0")
    nll, dal, delays = sentence_losses(model, batch, lam, rng, full_read)
    bad = (~torch.isfinite(nll)) | (~torch.isfinite(dal))
    if bad.any():
        idx = int(bad.nonzero()[0])
        raise NumericFailure(f"non-finite loss for sentence {idx} of the batch "
                             f"(nll={float(nll[idx].detach())}, dal={float(dal[idx].detach())})")
    loss = latency_augmented_loss(nll.mean(), delays, lam,
                                  source_lens=batch.src_lens, target_lens=batch.tgt_lens)
    return loss, {"nll": float(nll.detach().mean()), "dal": float(dal.detach().mean())}


def train_step(model: StreamingModel, batch: Batch, lam: float, rng: nx.SeededRng | None):
    """Loss and gradients for one batch; gradients are left on the parameters too."""
    if batch.size == 0:
        raise InvalidArgument("empty batch")
    model.zero_grad(set_to_none=False)
    loss, stats = batch_loss(model, batch, lam, rng)
    loss.backward()
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for n, p in model.named_parameters()}
    return float(loss.detach()), grads, stats


def sequence_accuracy(hyps, refs) -> tuple[float, float]:
    """(exact-match rate, token accuracy over reference positions)."""
    if len(hyps) != len(refs):
        raise InvalidArgument(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not refs:
        raise InvalidArgument("no references")
    exact = sum(list(h) == list(r) for h, r in zip(hyps, refs))
    hits = total = 0
    for h, r in zip(hyps, refs):
        total += len(r)
        hits += sum(a == b for a, b in zip(h, r))
    return exact / len(refs), hits / total


# --------------------------------------------------------------- checkpoint


def save_checkpoint(model: StreamingModel, path, vocab: Vocabulary | None = None, meta=None):
    """Magic line, one JSON header line, then raw little-endian float64 arrays."""
    arrays = [(n, p.detach().numpy().astype("<f8")) for n, p in model.state_dict().items()]
    header = {
        "config": model.cfg.to_dict(),
        "vocab": vocab.itos if vocab is not None else None,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, a in arrays:
            f.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path):
    """Returns ``(model, vocab, meta)``."""
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != CKPT_MAGIC:
            raise VersionError(f"{path}: not a {CKPT_MAGIC.decode().strip()} checkpoint")
        header = json.loads(f.readline())
        blob = f.read()
    cfg = ModelConfig.from_dict(header["config"])
    model = StreamingModel(cfg)
    state, offset = {}, 0
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        a = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(spec["shape"])
        offset += 8 * count
        state[spec["name"]] = torch.from_numpy(a.copy())
    if offset != len(blob):
        raise VersionError(f"{path}: {len(blob) - offset} trailing bytes")
    model.load_state_dict(state)
    itos = header.get("vocab")
    vocab = None
    if itos is not None:
        vocab = Vocabulary(itos)
    return model, vocab, header.get("meta", {})
