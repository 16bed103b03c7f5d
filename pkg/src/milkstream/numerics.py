"""Differentiable array primitives, seeded noise and a finite-difference oracle.

Reverse-mode differentiation is delegated to torch autograd; every op here
takes and returns float64 tensors so gradients flow through them.  Scans run
along the last axis, so a ``(batch, time)`` tensor is processed row by row.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import InvalidArgument, NumericFailure

DTYPE = torch.float64
EPS = 1e-10
# Stand-in for -inf on padded source positions; finite so backward never sees inf - inf.
MASK_ENERGY = -1e30


def as_tensor(v) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v if v.dtype == DTYPE else v.to(DTYPE)
    return torch.as_tensor(np.asarray(v, dtype=np.float64))


def _nonempty(v) -> torch.Tensor:
    v = as_tensor(v)
    if v.dim() == 0 or v.shape[-1] == 0:
        raise InvalidArgument("scan over an empty vector")
    return v


def cumulative_sum(v) -> torch.Tensor:
    return torch.cumsum(_nonempty(v), dim=-1)


def cumulative_product(v) -> torch.Tensor:
    return torch.cumprod(_nonempty(v), dim=-1)


def reversed_cumulative_sum(v) -> torch.Tensor:
    v = _nonempty(v)
    return torch.flip(torch.cumsum(torch.flip(v, [-1]), dim=-1), [-1])


def exclusive_cumulative_product(v) -> torch.Tensor:
    """Cumulative product shifted right by one, starting at 1."""
    v = _nonempty(v)
    ones = torch.ones_like(v[..., :1])
    return torch.cumprod(torch.cat([ones, v[..., :-1]], dim=-1), dim=-1)


def clamped_divide(num, den, eps: float = EPS) -> torch.Tensor:
    if not eps > 0:
        raise InvalidArgument(f"eps must be positive, got {eps}")
    return as_tensor(num) / torch.clamp(as_tensor(den), min=eps)


def logistic(x):
    """Numerically stable sigmoid; floats in, floats out."""
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x.to(DTYPE))
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def length_mask(lengths, size: int) -> torch.Tensor:
    """Boolean ``(batch, size)`` mask, True on the first ``lengths[b]`` slots."""
    lengths = torch.as_tensor(lengths, dtype=torch.long)
    return torch.arange(size).unsqueeze(0) < lengths.reshape(-1, 1)


def masked_softmax(e, valid_len) -> torch.Tensor:
    """Softmax over the first ``valid_len`` entries; the rest are exactly zero.

    ``valid_len`` may be an int (applies to every row) or one length per row.
    """
    e = _nonempty(e)
    size = e.shape[-1]
    lens = torch.as_tensor(valid_len, dtype=torch.long)
    if (lens < 1).any() or (lens > size).any():
        raise InvalidArgument(f"valid_len {valid_len} outside [1, {size}]")
    if lens.dim() == 0:
        mask = torch.arange(size) < lens
    else:
        mask = length_mask(lens, size).reshape(*e.shape[:-1], size)
    filled = e.masked_fill(~mask, MASK_ENERGY)
    z = filled - filled.max(dim=-1, keepdim=True).values.detach()
    w = torch.exp(z) * mask
    return w / w.sum(dim=-1, keepdim=True)


class SeededRng:
    """Deterministic uniform/normal source.

    Uniforms come from numpy's PCG64 seeded with ``seed``.  Normals use the
    basic Box-Muller transform on pairs ``(u1, u2)`` with ``u1`` in (0, 1]:
    ``r = sqrt(-2 ln u1)``, emitting ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``.
    A request for an odd count discards the unused sine branch.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def standard_normal(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def state(self) -> dict:
        return self._gen.bit_generator.state


def gaussian_noise(rng: SeededRng, stddev: float, size=None):
    """Zero-mean normal draw(s); ``stddev == 0`` yields exact zeros without consuming the stream."""
    if stddev < 0:
        raise InvalidArgument(f"stddev must be non-negative, got {stddev}")
    if stddev == 0:
        return 0.0 if size is None else np.zeros(size)
    return stddev * rng.standard_normal(size)


def finite_difference_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise InvalidArgument(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericFailure(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def gradients_close(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-7) -> bool:
    """Elementwise |a - n| <= rtol * max(|a|, |n|) + atol."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    return bool(np.all(np.abs(a - n) <= rtol * scale + atol))
