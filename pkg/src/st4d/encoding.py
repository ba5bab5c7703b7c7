"""Learnable Fourier coordinate encodings and 4D prompt assembly.

The position encoder maps normalized (x, y, z) through a learnable
frequency matrix into paired cos/sin features; the time encoder does the
same for t and scales each token's row by a motion factor ``1 + phi``
where ``phi`` is a softmax of flow magnitudes over the token's frame.
Both halves are mixed by a learnable linear map and aligned to the visual
feature width by a small MLP, producing one prompt vector per patch token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Array,
    DimensionError,
    linear_bwd,
    linear_fwd,
    mlp_bwd,
    mlp_fwd,
    softmax_rows,
)


@dataclass
class FourierEncoder:
    """Learnable Fourier features for 3-D position and 1-D time.

    ``pos_freq`` is (d/2, 3) and ``time_freq`` is (d/2, 1); both live in the
    ParamStore, so holding views here keeps the encoder in sync with
    training. One instance is shared between the vision and language paths.
    """

    pos_freq: Array
    time_freq: Array

    def __post_init__(self):
        if self.pos_freq.shape[1] != 3 or self.time_freq.shape[1] != 1:
            raise DimensionError(
                f"frequency shapes must be (d/2, 3) and (d/2, 1), got "
                f"{self.pos_freq.shape} and {self.time_freq.shape}")
        if self.pos_freq.shape[0] != self.time_freq.shape[0]:
            raise DimensionError("position and time encoders must share d")

    @property
    def d(self) -> int:
        return 2 * self.pos_freq.shape[0]


def _fourier_fwd(freq: Array, x: Array):
    phase = x @ freq.T
    scale = 1.0 / math.sqrt(2 * freq.shape[0])
    out = np.concatenate([np.cos(phase), np.sin(phase)], axis=1) * scale
    return out, (freq, x, phase, scale)


def _fourier_bwd(grad_out: Array, cache):
    freq, x, phase, scale = cache
    half = freq.shape[0]
    d_cos = grad_out[:, :half] * scale
    d_sin = grad_out[:, half:] * scale
    d_phase = -np.sin(phase) * d_cos + np.cos(phase) * d_sin
    d_freq = d_phase.T @ x
    d_x = d_phase @ freq
    return d_freq, d_x


def encode_position(enc: FourierEncoder, xyz: Array):
    """Fourier-encode normalized positions; rows have norm exactly 1/sqrt(2).

    Returns ``(out (n, d), cache)``.
    """
    return _fourier_fwd(enc.pos_freq, xyz)


def encode_position_bwd(grad_out: Array, cache):
    """Returns ``(d_pos_freq, d_xyz)``."""
    return _fourier_bwd(grad_out, cache)


def encode_time(enc: FourierEncoder, t: Array, flow_mag: Array, frame_groups):
    """Fourier-encode time with per-frame motion modulation.

    Each row of the base encoding is scaled by ``1 + softmax(flow)`` where
    the softmax runs over the tokens of the row's frame (``frame_groups``
    is an iterable of index slices covering all rows). With modulation
    disabled (``frame_groups=None``) the factor is exactly 1.
    """
    base, f_cache = _fourier_fwd(enc.time_freq, t.reshape(-1, 1))
    n = base.shape[0]
    factor = np.ones((n, 1))
    if frame_groups is not None:
        flow = np.asarray(flow_mag, dtype=np.float64).reshape(-1)
        for sl in frame_groups:
            phi = softmax_rows(flow[sl].reshape(1, -1)).reshape(-1, 1)
            factor[sl] = 1.0 + phi
    out = base * factor
    return out, (f_cache, base, factor)


def encode_time_bwd(grad_out: Array, cache):
    """Returns ``d_time_freq`` (flow and t are inputs, not parameters)."""
    f_cache, base, factor = cache
    d_base = grad_out * factor
    d_freq, _ = _fourier_bwd(d_base, f_cache)
    return d_freq


@dataclass
class PromptMlp:
    """Width-alignment MLP for the prompt: 2d -> hidden -> d_p."""

    w1: Array
    b1: Array
    w2: Array
    b2: Array


@dataclass
class PromptEmbedding:
    """One encoded 4D prompt vector per patch token."""

    vectors: Array
    layout: object = None


def assemble_prompt(p_xyz: Array, p_t: Array, mix_w: Array, mlp: PromptMlp):
    """Mix position and time encodings into the prompt.

    ``p_4d = MLP(mix_w @ [p_xyz || p_t])`` rowwise, where the MLP aligns the
    2d-wide mix to the visual feature width. Returns ``(vectors, cache)``.
    """
    both = np.concatenate([p_xyz, p_t], axis=1)
    if mix_w.shape[1] != both.shape[1]:
        raise DimensionError(
            f"mix weight expects width {mix_w.shape[1]}, encodings give {both.shape[1]}")
    mixed, lin_cache = linear_fwd(both, mix_w)
    vectors, mlp_cache = mlp_fwd(mixed, mlp.w1, mlp.b1, mlp.w2, mlp.b2)
    return vectors, (lin_cache, mlp_cache, p_xyz.shape[1])


def assemble_prompt_bwd(grad_out: Array, cache):
    """Returns ``(d_p_xyz, d_p_t, d_mix_w, mlp_grads)``."""
    lin_cache, mlp_cache, d_half = cache
    d_mixed, mlp_grads = mlp_bwd(grad_out, mlp_cache)
    d_both, d_mix_w, _ = linear_bwd(d_mixed, lin_cache)
    return d_both[:, :d_half], d_both[:, d_half:], d_mix_w, mlp_grads
