"""Rotary position encoding and position-dependent attention-logits scaling.

RoPE rotates interleaved channel pairs (2i, 2i+1) of a head vector at
absolute position t by angle t * theta^(-2i/head_dim).  Inner products of
rotated q/k then depend only on relative position.  NoPE is simply the
absence of this rotation.

The logits scaling s_t = log_a(t + a) sharpens attention at positions beyond
the training length; it multiplies q before the attention product and is an
inference-time mechanism (s_t = 1 during training).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, Tensor, _emit


@dataclass(frozen=True)
class RopeParams:
    """Base frequency and head width for the rotary encoding."""

    theta: float
    head_dim: int

    def __post_init__(self):
        if self.head_dim % 2 != 0 or self.head_dim < 2:
            raise ConfigError(f"RoPE head_dim must be even and positive, got {self.head_dim}")
        if self.theta <= 0:
            raise ConfigError(f"RoPE theta must be positive, got {self.theta}")


@dataclass(frozen=True)
class ScaleBase:
    """Base a of the position-dependent scaling s_t = log_a(t + a)."""

    a: float

    def __post_init__(self):
        if self.a <= 1.0:
            raise ConfigError(f"scaling base must exceed 1, got {self.a}")


@dataclass(frozen=True)
class ConstantScale:
    """Position-independent logits scaling s_t = s (ablation baseline)."""

    s: float

    def __post_init__(self):
        if self.s <= 0.0:
            raise ConfigError(f"constant scale must be positive, got {self.s}")


def logits_scale(t: int, base: ScaleBase) -> float:
    """s_t = log_a(t + a); equals 1 at t = 0 and grows without bound."""
    if t < 0:
        raise ValueError(f"position must be nonnegative, got {t}")
    return math.log(t + base.a) / math.log(base.a)


def scale_vector(positions: np.ndarray, base) -> np.ndarray:
    """Vectorized s_t per absolute position.

    `base` may be None (no scaling), a ScaleBase (position-dependent), or a
    ConstantScale (the same factor everywhere).
    """
    positions = np.asarray(positions, dtype=np.float64)
    if base is None:
        return np.ones_like(positions)
    if isinstance(base, ConstantScale):
        return np.full_like(positions, base.s)
    return np.log(positions + base.a) / math.log(base.a)


def _rope_tables(params: RopeParams, start_pos: int, length: int):
    half = params.head_dim // 2
    freqs = params.theta ** (-np.arange(half, dtype=np.float64) * 2.0 / params.head_dim)
    angles = np.arange(start_pos, start_pos + length, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def rope_apply(x: Tensor, start_pos: int, params: RopeParams, time_axis: int = 0) -> Tensor:
    """Rotate channel pairs of x at absolute positions start_pos, start_pos+1, ...

    x carries positions along `time_axis` and head channels along the last
    axis (which must equal params.head_dim).  The default time_axis=0 suits
    [seq, heads, head_dim]; mixers pass time_axis=-2 for [..., heads, seq,
    head_dim] layouts.  Rotation is an isometry per pair, and the backward
    pass is the inverse rotation.
    """
    if start_pos < 0:
        raise ValueError(f"start_pos must be nonnegative, got {start_pos}")
    X = x.data
    if X.shape[-1] != params.head_dim:
        raise ConfigError(f"input last dim {X.shape[-1]} != RoPE head_dim {params.head_dim}")
    axis = time_axis % X.ndim
    if axis == X.ndim - 1:
        raise ConfigError("time axis cannot be the channel axis")
    cos, sin = _rope_tables(params, start_pos, X.shape[axis])
    # Broadcast tables to [.., T, .., head_dim/2]: T at `axis`, half at last.
    shape = [1] * X.ndim
    shape[axis] = X.shape[axis]
    shape[-1] = params.head_dim // 2
    cos = cos.reshape(shape).astype(X.dtype)
    sin = sin.reshape(shape).astype(X.dtype)

    def rotate(arr, c, s):
        even, odd = arr[..., 0::2], arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    out = rotate(X, cos, sin)

    def dx(g):
        # Transpose of a rotation is the rotation by the negated angle.
        return rotate(g, cos, -sin)

    return _emit(out, [(x, dx)])


def fit_scale_base(model, corpus, candidates) -> ScaleBase:
    """Pick the scaling base minimizing mean next-token loss on a corpus.

    `corpus` is a sequence of token-id arrays longer than the model's
    training context; ties break toward the smaller base.  This is a
    post-training grid search: model weights are not touched.
    """
    from .model import mean_nll  # local import: positional must stay below model

    candidates = [float(a) for a in candidates]
    if not candidates:
        raise ValueError("fit_scale_base needs at least one candidate")
    if any(a <= 1.0 for a in candidates):
        raise ConfigError(f"all candidates must exceed 1, got {candidates}")
    seqs = list(corpus)
    if not seqs:
        raise ValueError("fit_scale_base needs a non-empty corpus")

    best_a, best_loss = None, None
    for a in sorted(candidates):
        base = ScaleBase(a)
        losses = [mean_nll(model, seq, scale_base=base) for seq in seqs]
        loss = float(np.mean(losses))
        if best_loss is None or loss < best_loss:
            best_a, best_loss = a, loss
    return ScaleBase(best_a)


DEFAULT_BASE_GRID = (100.0, 200.0, 300.0, 500.0, 1000.0, 2000.0, 5000.0)
