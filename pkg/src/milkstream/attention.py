"""Soft, monotonic, MoChA and MILk attention.

Training-time mechanisms compute expectations over the hard monotonic head;
inference uses :func:`hard_decode_step`.  Every row-level function works on
the last axis, so a leading batch dimension is processed in one call.  Source
positions are 1-indexed in docstrings and 0-indexed in tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import torch

from . import numerics as nx
from .errors import ContractViolation, InvalidArgument, NumericFailure

KINDS = ("soft", "monotonic", "mocha", "milk", "wait_k")
STREAMING_KINDS = ("monotonic", "mocha", "milk", "wait_k")


@dataclass(frozen=True)
class AttentionConfig:
    kind: str = "milk"
    chunk_size: int = 2
    noise_n: float = 4.0
    energy_offset: float = -4.0
    eps: float = nx.EPS
    preserve_mass: bool = True
    wait_k: int = 3
    emission_rate: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown attention kind {self.kind!r}")
        if self.kind == "mocha" and self.chunk_size < 1:
            raise InvalidArgument("chunk_size must be >= 1 for mocha")
        if self.noise_n < 0:
            raise InvalidArgument("noise_n must be >= 0")
        if self.kind == "wait_k" and (self.wait_k < 1 or self.emission_rate <= 0):
            raise InvalidArgument("wait-k needs k >= 1 and a positive emission rate")

    @property
    def streaming(self) -> bool:
        return self.kind in STREAMING_KINDS

    def with_(self, **kw) -> "AttentionConfig":
        return replace(self, **kw)


@dataclass
class AttentionRow:
    p: torch.Tensor | None
    alpha: torch.Tensor
    beta: torch.Tensor
    residual_mass: torch.Tensor


@dataclass
class HardHead:
    position: int = 1
    halted: bool = False


# ---------------------------------------------------------------- energies


def _check_energy_dims(query, keys, w_query, w_key):
    if query.shape[-1] != w_query.shape[-1] or keys.shape[-1] != w_key.shape[-1]:
        raise InvalidArgument(
            f"state dims {tuple(query.shape)}/{tuple(keys.shape)} do not match "
            f"projections {tuple(w_query.shape)}/{tuple(w_key.shape)}")


def _additive_hidden(query, keys, w_query, w_key, bias):
    query, keys = nx.as_tensor(query), nx.as_tensor(keys)
    _check_energy_dims(query, keys, w_query, w_key)
    q = query @ w_query.T
    k = keys @ w_key.T
    if k.dim() > q.dim():
        q = q.unsqueeze(-2)
    return torch.tanh(q + k + bias)


def soft_energy(decoder_state, encoder_state, params) -> torch.Tensor:
    """Additive energy ``v . tanh(W_s s + W_h h + b)``.

    ``params`` maps ``w_query``, ``w_key``, ``bias``, ``v``.  ``encoder_state``
    may be a single vector or a ``(..., T, key_dim)`` stack of them.
    """
    hidden = _additive_hidden(decoder_state, encoder_state, params["w_query"],
                              params["w_key"], params["bias"])
    return hidden @ params["v"]


def monotonic_energy(decoder_state, encoder_state, params) -> torch.Tensor:
    """Weight-normalised additive energy ``g * (v / |v|) . tanh(...) + r``."""
    hidden = _additive_hidden(decoder_state, encoder_state, params["w_query"],
                              params["w_key"], params["bias"])
    v = params["v"]
    direction = v / torch.clamp(torch.linalg.vector_norm(v), min=1e-12)
    return params["gain"] * (hidden @ direction) + params["offset"]


class SoftEnergy(torch.nn.Module):
    def __init__(self, query_dim: int, key_dim: int, attn_dim: int):
        super().__init__()
        self.w_query = torch.nn.Parameter(torch.zeros(attn_dim, query_dim, dtype=nx.DTYPE))
        self.w_key = torch.nn.Parameter(torch.zeros(attn_dim, key_dim, dtype=nx.DTYPE))
        self.bias = torch.nn.Parameter(torch.zeros(attn_dim, dtype=nx.DTYPE))
        self.v = torch.nn.Parameter(torch.zeros(attn_dim, dtype=nx.DTYPE))

    def params(self):
        return {"w_query": self.w_query, "w_key": self.w_key, "bias": self.bias, "v": self.v}

    def forward(self, query, keys):
        return soft_energy(query, keys, self.params())


class MonotonicEnergy(SoftEnergy):
    def __init__(self, query_dim: int, key_dim: int, attn_dim: int, offset: float = -4.0):
        super().__init__(query_dim, key_dim, attn_dim)
        self.gain = torch.nn.Parameter(torch.tensor(attn_dim ** -0.5, dtype=nx.DTYPE))
        self.offset = torch.nn.Parameter(torch.tensor(float(offset), dtype=nx.DTYPE))

    def params(self):
        return {**super().params(), "gain": self.gain, "offset": self.offset}

    def forward(self, query, keys):
        return monotonic_energy(query, keys, self.params())


# ------------------------------------------------------- expectation paths


def selection_probabilities(energies, noise_n: float = 0.0, rng: nx.SeededRng | None = None,
                            training: bool = True, mask=None) -> torch.Tensor:
    """Stopping probabilities ``sigmoid(e + N(0, n))``; noise only while training."""
    if noise_n < 0:
        raise InvalidArgument("noise_n must be >= 0")
    e = nx.as_tensor(energies)
    if training and noise_n > 0:
        if rng is None:
            raise InvalidArgument("noisy selection probabilities need an rng")
        e = e + torch.as_tensor(nx.gaussian_noise(rng, noise_n, tuple(e.shape)), dtype=nx.DTYPE)
    if mask is not None:
        e = e.masked_fill(~mask, nx.MASK_ENERGY)
    return torch.sigmoid(e)


def first_alpha(shape, dtype=nx.DTYPE) -> torch.Tensor:
    """Previous-step alpha for the first output step: one-hot at position 1."""
    a = torch.zeros(shape, dtype=dtype)
    a[..., 0] = 1.0
    return a


def monotonic_alpha_row(p, alpha_prev, eps: float = nx.EPS) -> torch.Tensor:
    """Probability that the hard head stops at each position.

    Parallel form of ``a_j = p_j((1 - p_{j-1}) a_{j-1} / p_{j-1} + a'_j)``:
    ``a = p * cp * cumsum(a' / cp)`` with ``cp`` the exclusive cumulative
    product of ``1 - p`` clamped into ``[eps, 1]``.
    """
    p, alpha_prev = nx.as_tensor(p), nx.as_tensor(alpha_prev)
    if p.shape != alpha_prev.shape:
        raise InvalidArgument(f"p {tuple(p.shape)} and alpha_prev {tuple(alpha_prev.shape)} differ")
    cp = nx.exclusive_cumulative_product(torch.clamp(1.0 - p, eps, 1.0))
    return p * cp * nx.cumulative_sum(nx.clamped_divide(alpha_prev, cp, eps))


def _last_valid_onehot(like: torch.Tensor, lengths=None) -> torch.Tensor:
    onehot = torch.zeros_like(like)
    if lengths is None:
        onehot[..., -1] = 1.0
    else:
        idx = torch.as_tensor(lengths, dtype=torch.long).reshape(*like.shape[:-1], 1) - 1
        onehot.scatter_(-1, idx, 1.0)
    return onehot


def preserve_mass(alpha, lengths=None, tol: float = 1e-6) -> torch.Tensor:
    """Move the overshoot mass ``1 - sum(alpha)`` onto the last valid position."""
    alpha = nx.as_tensor(alpha)
    total = alpha.sum(dim=-1, keepdim=True)
    if (total > 1.0 + tol).any():
        raise NumericFailure(f"alpha row sums to {float(total.max()):.9g} > 1")
    return alpha + (1.0 - total) * _last_valid_onehot(alpha, lengths)


def _check_normalized(alpha, tol=1e-6):
    if ((alpha.sum(dim=-1) - 1.0).abs() > tol).any():
        raise InvalidArgument("alpha must be normalised (apply preserve_mass first)")


def milk_beta_row(alpha, u, mask=None, require_normalized: bool = True) -> torch.Tensor:
    """Attention induced by a soft head looking back over everything up to the hard head.

    ``beta_j = exp(u_j) * sum_{k>=j} alpha_k / sum_{l<=k} exp(u_l)``, with the
    prefix denominators from a running log-sum-exp and the outer sum as a
    reversed cumulative sum.
    """
    alpha, u = nx.as_tensor(alpha), nx.as_tensor(u)
    if require_normalized:
        _check_normalized(alpha)
    if mask is not None:
        u = u.masked_fill(~mask, nx.MASK_ENERGY)
    log_den = torch.logcumsumexp(u, dim=-1)
    c = u.max(dim=-1, keepdim=True).values.detach()
    return torch.exp(u - c) * nx.reversed_cumulative_sum(alpha * torch.exp(c - log_den))


def _shift_left(x, d, fill):
    if d == 0:
        return x
    pad = torch.full_like(x[..., :d], fill)
    return torch.cat([x[..., d:], pad], dim=-1)


def _shift_right(x, d, fill):
    if d == 0:
        return x
    pad = torch.full_like(x[..., :d], fill)
    return torch.cat([pad, x[..., :-d]], dim=-1)


def mocha_beta_row(alpha, u, chunk_size: int, mask=None,
                   require_normalized: bool = True) -> torch.Tensor:
    """Soft attention over the ``chunk_size`` states ending at the hard head.

    ``beta_j = sum_{k=j}^{j+cs-1} alpha_k exp(u_j) / sum_{l=k-cs+1}^{k} exp(u_l)``.
    """
    if chunk_size < 1:
        raise InvalidArgument(f"chunk_size must be >= 1, got {chunk_size}")
    alpha, u = nx.as_tensor(alpha), nx.as_tensor(u)
    if require_normalized:
        _check_normalized(alpha)
    if mask is not None:
        u = u.masked_fill(~mask, nx.MASK_ENERGY)
    cs = min(chunk_size, u.shape[-1])
    window = torch.stack([_shift_right(u, d, nx.MASK_ENERGY) for d in range(cs)], dim=0)
    log_w = torch.logsumexp(window, dim=0)
    beta = torch.zeros_like(u)
    for d in range(cs):
        a_k = _shift_left(alpha, d, 0.0)
        lw_k = _shift_left(log_w, d, -nx.MASK_ENERGY)
        beta = beta + a_k * torch.exp(u - lw_k)
    return beta


def expected_context(beta, encoder_states) -> torch.Tensor:
    beta, h = nx.as_tensor(beta), nx.as_tensor(encoder_states)
    if beta.shape[-1] != h.shape[-2]:
        raise InvalidArgument(f"{beta.shape[-1]} weights for {h.shape[-2]} encoder states")
    return (beta.unsqueeze(-1) * h).sum(dim=-2)


def attention_row(config: AttentionConfig, mono_energy, soft_energy_row, alpha_prev,
                  lengths, rng: nx.SeededRng | None = None, prefix=None) -> AttentionRow:
    """One output step of expectation-mode attention for a batch.

    ``prefix`` (per-row read counts) is required for wait-k, whose fixed
    schedule replaces the learned head.
    """
    u = nx.as_tensor(soft_energy_row)
    mask = nx.length_mask(lengths, u.shape[-1])
    zero = torch.zeros(u.shape[:-1], dtype=nx.DTYPE)
    if config.kind in ("soft", "wait_k"):
        stop = lengths if config.kind == "soft" else prefix
        beta = nx.masked_softmax(u, stop)
        alpha = _last_valid_onehot(u, stop)
        return AttentionRow(None, alpha, beta, zero)
    p = selection_probabilities(mono_energy, config.noise_n, rng, training=rng is not None, mask=mask)
    alpha = monotonic_alpha_row(p, alpha_prev, config.eps)
    residual = 1.0 - alpha.sum(dim=-1)
    if config.preserve_mass:
        alpha = preserve_mass(alpha, lengths)
    strict = config.preserve_mass
    if config.kind == "monotonic":
        beta = alpha
    elif config.kind == "mocha":
        beta = mocha_beta_row(alpha, u, config.chunk_size, mask, require_normalized=strict)
    else:
        beta = milk_beta_row(alpha, u, mask, require_normalized=strict)
    return AttentionRow(p, alpha, beta, residual)


# ------------------------------------------------------------ hard inference


def hard_decode_step(energies_fn: Callable[[int], float], head: HardHead,
                     source_len: int) -> tuple[HardHead, int]:
    """Advance the hard head for one output step.

    Scans from ``head.position`` and stops at the first ``j`` whose monotonic
    energy is positive, or at ``source_len`` (the head always stops at EOS).
    ``energies_fn(j)`` is called with 1-indexed positions in increasing order;
    the caller reads source token ``j`` before answering, so every visited
    position (including a forced stop at EOS) is queried exactly once.
    """
    if head.position > source_len or head.position < 1:
        raise ContractViolation(f"head at {head.position} outside source of length {source_len}")
    j = head.position
    while float(energies_fn(j)) <= 0 and j < source_len:
        j += 1
    return HardHead(position=j, halted=j == source_len), j
