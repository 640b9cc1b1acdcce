"""Neural-network operations on top of the autodiff substrate.

Fused forward/backward implementations of layer norm, softmax, GELU and
the two cross-entropy variants, plus masked scaled-dot-product attention
and a small named-parameter registry used by every model component.

Numerical choices: softmax subtracts the row max before exponentiating;
attention replaces forbidden logits with -1e9 (never -inf, so no NaNs
can propagate); layer norm uses eps=1e-5 with biased row variance.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .autodiff import Tensor, _accumulate, _make, add, matmul, transpose
from .errors import ConfigurationError, DataError, ShapeError

MASK_FILL = -1e9
LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ParamStore:
    """Ordered registry of named, role-tagged trainable tensors."""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self._params: dict[str, tuple[Tensor, str]] = {}

    def add(self, name: str, array: np.ndarray, role: str) -> Tensor:
        full = f"{self.prefix}{name}"
        if full in self._params:
            raise ConfigurationError(f"duplicate parameter name {full!r}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self._params[full] = (t, role)
        return t

    def items(self):
        return self._params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[f"{self.prefix}{name}"][0]

    def __len__(self) -> int:
        return len(self._params)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    data = y * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * y).sum(axis=lead))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead))
        if x.requires_grad:
            dy = g * gain.data
            gx = inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _make(data, (x, gain, bias), bwd)


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        _accumulate(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    e = erf(x.data * _INV_SQRT2)

    def bwd(g):
        d = 0.5 * (1.0 + e) + x.data * np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accumulate(x, g * d)

    return _make(0.5 * x.data * (1.0 + e), (x,), bwd)


def apply_attention_mask(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Replace logits at forbidden positions (mask False) with MASK_FILL."""
    data = np.where(mask, scores.data, MASK_FILL)

    def bwd(g):
        _accumulate(scores, g * mask)

    return _make(data, (scores,), bwd)


def masked_softmax_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention restricted to mask-permitted columns.

    ``q``, ``k``, ``v`` share shape ``(..., seq, head_dim)``; ``mask`` is a
    boolean ``(seq, seq)`` matrix where True means "may attend". Rows of
    the resulting attention weights sum to 1 over permitted columns;
    forbidden columns receive exactly zero weight (their shifted logits
    underflow in exp).
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    seq = q.shape[-2]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (seq, seq):
        raise ShapeError(f"mask shape {mask.shape} does not match sequence length {seq}")
    if not mask.any(axis=-1).all():
        raise ConfigurationError("attention mask has a row with no permitted columns")
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(q.shape[-1]))
    weights = softmax(apply_attention_mask(scores, mask))
    return matmul(weights, v)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Classification loss, dispatched on the label kind.

    Integer target(s): softmax cross-entropy against class indices.
    Binary vector/matrix matching ``logits``: mean per-label binary
    cross-entropy on sigmoid outputs. Reduction is the mean over the
    batch (and labels, in the binary case); the result is a scalar.
    """
    if isinstance(target, Tensor):
        target = target.data
    target = np.asarray(target)
    if np.issubdtype(target.dtype, np.integer) and target.ndim <= 1 and target.shape != logits.shape:
        return _cross_entropy_index(logits, target)
    if target.shape == logits.shape:
        return _binary_cross_entropy(logits, target.astype(np.float64))
    raise ShapeError(f"target shape {target.shape} incompatible with logits {logits.shape}")


def _cross_entropy_index(logits: Tensor, target: np.ndarray) -> Tensor:
    squeeze = logits.data.ndim == 1
    x = logits.data[None, :] if squeeze else logits.data
    idx = np.atleast_1d(target).astype(np.intp)
    n, k = x.shape
    if idx.shape != (n,):
        raise ShapeError(f"expected {n} class indices, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= k:
        raise DataError(f"class index out of range [0, {k}): {idx.min()}..{idx.max()}")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(denom)
    data = np.float64(-logp[np.arange(n), idx].mean())

    def bwd(g):
        p = e / denom
        p[np.arange(n), idx] -= 1.0
        gx = p * (float(g) / n)
        _accumulate(logits, gx[0] if squeeze else gx)

    return _make(data, (logits,), bwd)


def _binary_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    x = logits.data
    data = np.float64((np.logaddexp(0.0, x) - target * x).mean())

    def bwd(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accumulate(logits, (s - target) * (float(g) / x.size))

    return _make(data, (logits,), bwd)
