"""Patch features, spatiotemporal disentanglement, and gated prompt fusion.

Features are disentangled by attention pooling: each token attends over
the other views at its own time (spatial component) and over its adjacent
frame in its own view (temporal component). The encoded 4D prompt then
queries a cross-attention over the stacked [spatial, temporal] rows of its
frame, and a sigmoid object gate blends the attention output with the
spatial path. Every stage has an analytic backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PatchLayout, sorted_frames
from .numerics import (
    Array,
    DimensionError,
    attention_bwd,
    attention_fwd,
    linear_bwd,
    linear_fwd,
    mlp_bwd,
    mlp_fwd,
    sigmoid,
)

FUSION_STRATEGIES = ("concat", "weighting", "attention")


class DisentangleError(ValueError):
    """Raised when the layout cannot support a disentanglement direction."""


@dataclass
class FeatureBundle:
    """Raw, disentangled, fused, and projected features for one scene."""

    f: Array
    f_s: Array = None
    f_t: Array = None
    f_st: Array = None
    tau_v: Array = None
    layout: PatchLayout = None


@dataclass
class GateMlp:
    """Object gate: d_p -> d_p/2 -> 1, squashed by a sigmoid at use site."""

    w1: Array
    b1: Array
    w2: Array
    b2: Array


@dataclass
class FusionWeights:
    """Learnable pieces of the fusion stage."""

    wq: Array
    wk: Array
    wv: Array
    heads: int
    gate: GateMlp
    concat_w: Array = None
    weighting_w: Array = None

    def __post_init__(self):
        d_p = self.wq.shape[0]
        if d_p % self.heads:
            raise DimensionError(f"head count {self.heads} must divide width {d_p}")


@dataclass
class ProjectorMlp:
    """Token projector into the language width: d_p -> hidden -> d_l."""

    w1: Array
    b1: Array
    w2: Array
    b2: Array


def extract_patches(frames, patch_size: int) -> Array:
    """Flatten every patch of every frame, rows ordered (view, time, row, col)."""
    fs = sorted_frames(frames)
    p = patch_size
    blocks = []
    for f in fs:
        h, w, c = f.pixels.shape
        if h % p or w % p:
            raise DimensionError(f"image {h}x{w} not divisible by patch {p}")
        x = f.pixels.reshape(h // p, p, w // p, p, c)
        x = x.transpose(0, 2, 1, 3, 4).reshape(-1, p * p * c)
        blocks.append(x)
    return np.concatenate(blocks, axis=0)


def encode_patches(frames, patch_size: int, w_embed: Array, b_embed: Array):
    """Linear patch embedding. Returns ``(f (m, d_p), cache)``."""
    x = extract_patches(frames, patch_size)
    if x.shape[1] != w_embed.shape[1]:
        raise DimensionError(
            f"patch vector width {x.shape[1]} does not match embedding "
            f"input width {w_embed.shape[1]}")
    f, cache = linear_fwd(x, w_embed, b_embed)
    return f, cache


def encode_patches_bwd(grad_out: Array, cache):
    """Returns ``(d_w_embed, d_b_embed)``."""
    _, dw, db = linear_bwd(grad_out, cache)
    return dw, db


def disentangle_spatial(f: Array, layout: PatchLayout):
    """Cross-view attention pooling at fixed time, averaged over other views.

    Token m in view i attends over each other view j's tokens at the same
    time with weights softmax(f_m . f_n / sqrt(d_p)); the spatial component
    is the mean of the pooled vectors over the V-1 other views.
    """
    if layout.n_views < 2:
        raise DisentangleError(
            "spatial disentanglement needs >= 2 views; run in 3D-ablation "
            "mode with f_s := f instead")
    d_p = f.shape[1]
    scale = 1.0 / math.sqrt(d_p)
    f_s = np.zeros_like(f)
    caches = []
    for t in range(layout.n_times):
        views = [f[layout.frame_slice(v, t)] for v in range(layout.n_views)]
        for i in range(layout.n_views):
            acc = np.zeros_like(views[i])
            for j in range(layout.n_views):
                if j == i:
                    continue
                pooled, cache = attention_fwd(views[i], views[j], views[j], scale)
                acc += pooled
                caches.append((t, i, j, cache))
            f_s[layout.frame_slice(i, t)] = acc / (layout.n_views - 1)
    return f_s, (layout, caches)


def disentangle_spatial_bwd(grad_out: Array, cache) -> Array:
    layout, caches = cache
    df = np.zeros_like(grad_out)
    denom = layout.n_views - 1
    for t, i, j, att_cache in caches:
        dq, dk, dv = attention_bwd(grad_out[layout.frame_slice(i, t)] / denom, att_cache)
        df[layout.frame_slice(i, t)] += dq
        df[layout.frame_slice(j, t)] += dk + dv
    return df


def disentangle_temporal(f: Array, layout: PatchLayout):
    """Cross-time attention pooling against the adjacent frame per view.

    Each token attends over its view's next frame (the last frame attends
    backward). The pooled vector is a convex combination of neighbor rows.
    """
    if layout.n_times < 2:
        raise DisentangleError(
            "temporal disentanglement needs >= 2 frames; run in "
            "static-ablation mode with f_t := 0 instead")
    d_p = f.shape[1]
    scale = 1.0 / math.sqrt(d_p)
    f_t = np.zeros_like(f)
    caches = []
    for v in range(layout.n_views):
        for t in range(layout.n_times):
            nb = t + 1 if t < layout.n_times - 1 else t - 1
            query = f[layout.frame_slice(v, t)]
            keys = f[layout.frame_slice(v, nb)]
            pooled, att_cache = attention_fwd(query, keys, keys, scale)
            f_t[layout.frame_slice(v, t)] = pooled
            caches.append((v, t, nb, att_cache))
    return f_t, (layout, caches)


def disentangle_temporal_bwd(grad_out: Array, cache) -> Array:
    layout, caches = cache
    df = np.zeros_like(grad_out)
    for v, t, nb, att_cache in caches:
        dq, dk, dv = attention_bwd(grad_out[layout.frame_slice(v, t)], att_cache)
        df[layout.frame_slice(v, t)] += dq
        df[layout.frame_slice(v, nb)] += dk + dv
    return df


def _gate_fwd(prompt: Array, gate: GateMlp):
    pre, cache = mlp_fwd(prompt, gate.w1, gate.b1, gate.w2, gate.b2)
    alpha = sigmoid(pre)
    return alpha, (cache, alpha)


def _gate_bwd(d_alpha: Array, cache):
    mlp_cache, alpha = cache
    d_pre = d_alpha * alpha * (1.0 - alpha)
    d_prompt, grads = mlp_bwd(d_pre, mlp_cache)
    return d_prompt, grads


def fuse(f_s: Array, f_t: Array, prompt: Array, weights: FusionWeights,
         layout: PatchLayout, strategy: str = "attention", scope: str = "frame"):
    """Blend spatiotemporal features with the 4D prompt.

    attention: multi-head cross-attention with the prompt as query over the
    stacked [f_s, f_t] rows of the query's frame (``scope="global"`` uses
    all frames), gated per token: f_st = alpha * o + (1 - alpha) * f_s.
    weighting: f_st = alpha * (W [f_s || f_t]) + (1 - alpha) * f_s.
    concat: f_st = W [f_s || f_t || prompt].
    Returns ``(f_st, cache)``.
    """
    if f_s.shape != f_t.shape or f_s.shape[0] != prompt.shape[0]:
        raise DimensionError(
            f"row mismatch: f_s {f_s.shape}, f_t {f_t.shape}, prompt {prompt.shape}")
    if strategy not in FUSION_STRATEGIES:
        raise ValueError(f"unknown fusion strategy {strategy!r}")

    if strategy == "concat":
        c = np.concatenate([f_s, f_t, prompt], axis=1)
        f_st, lin_cache = linear_fwd(c, weights.concat_w)
        return f_st, ("concat", lin_cache, f_s.shape[1])

    if strategy == "weighting":
        c = np.concatenate([f_s, f_t], axis=1)
        base, lin_cache = linear_fwd(c, weights.weighting_w)
        alpha, gate_cache = _gate_fwd(prompt, weights.gate)
        f_st = alpha * base + (1.0 - alpha) * f_s
        return f_st, ("weighting", lin_cache, gate_cache, base, f_s, alpha)

    d_p = f_s.shape[1]
    heads = weights.heads
    dh = d_p // heads
    scale = 1.0 / math.sqrt(dh)
    q, q_cache = linear_fwd(prompt, weights.wq)
    kv_in = np.concatenate([f_s, f_t], axis=0)
    k, k_cache = linear_fwd(kv_in, weights.wk)
    v, v_cache = linear_fwd(kv_in, weights.wv)

    n = f_s.shape[0]
    o = np.zeros_like(f_s)
    att_caches = []
    if scope == "global":
        blocks = [(slice(0, n), np.concatenate([np.arange(n), n + np.arange(n)]))]
    else:
        blocks = []
        for _, _, sl in layout.frame_slices():
            rows = np.arange(sl.start, sl.stop)
            blocks.append((sl, np.concatenate([rows, n + rows])))
    for sl, kv_rows in blocks:
        for h in range(heads):
            cs = slice(h * dh, (h + 1) * dh)
            oh, att_cache = attention_fwd(q[sl, cs], k[kv_rows, cs], v[kv_rows, cs], scale)
            o[sl, cs] = oh
            att_caches.append((sl, kv_rows, cs, att_cache))
    alpha, gate_cache = _gate_fwd(prompt, weights.gate)
    f_st = alpha * o + (1.0 - alpha) * f_s
    return f_st, ("attention", q_cache, k_cache, v_cache, att_caches,
                  gate_cache, o, f_s, alpha, n)


def fuse_bwd(grad_out: Array, cache):
    """Returns ``(d_f_s, d_f_t, d_prompt, grads dict)``."""
    kind = cache[0]
    if kind == "concat":
        _, lin_cache, d_p = cache
        dc, dw, _ = linear_bwd(grad_out, lin_cache)
        return (dc[:, :d_p], dc[:, d_p:2 * d_p], dc[:, 2 * d_p:],
                {"concat_w": dw})

    if kind == "weighting":
        _, lin_cache, gate_cache, base, f_s, alpha = cache
        d_p = f_s.shape[1]
        d_alpha = ((base - f_s) * grad_out).sum(axis=1, keepdims=True)
        d_base = alpha * grad_out
        d_fs = (1.0 - alpha) * grad_out
        dc, dw, _ = linear_bwd(d_base, lin_cache)
        d_fs += dc[:, :d_p]
        d_ft = dc[:, d_p:]
        d_prompt, gate_grads = _gate_bwd(d_alpha, gate_cache)
        grads = {"weighting_w": dw,
                 "gate.w1": gate_grads[0], "gate.b1": gate_grads[1],
                 "gate.w2": gate_grads[2], "gate.b2": gate_grads[3]}
        return d_fs, d_ft, d_prompt, grads

    (_, q_cache, k_cache, v_cache, att_caches,
     gate_cache, o, f_s, alpha, n) = cache
    d_alpha = ((o - f_s) * grad_out).sum(axis=1, keepdims=True)
    d_o = alpha * grad_out
    d_fs = (1.0 - alpha) * grad_out
    dq = np.zeros_like(o)
    dk = np.zeros((2 * n, o.shape[1]))
    dv = np.zeros((2 * n, o.shape[1]))
    for sl, kv_rows, cs, att_cache in att_caches:
        dqh, dkh, dvh = attention_bwd(d_o[sl, cs], att_cache)
        dq[sl, cs] += dqh
        dk[np.ix_(kv_rows, np.arange(cs.start, cs.stop))] += dkh
        dv[np.ix_(kv_rows, np.arange(cs.start, cs.stop))] += dvh
    d_prompt, dwq, _ = linear_bwd(dq, q_cache)
    d_kv_k, dwk, _ = linear_bwd(dk, k_cache)
    d_kv_v, dwv, _ = linear_bwd(dv, v_cache)
    d_kv = d_kv_k + d_kv_v
    d_fs += d_kv[:n]
    d_ft = d_kv[n:]
    d_prompt_gate, gate_grads = _gate_bwd(d_alpha, gate_cache)
    d_prompt += d_prompt_gate
    grads = {"wq": dwq, "wk": dwk, "wv": dwv,
             "gate.w1": gate_grads[0], "gate.b1": gate_grads[1],
             "gate.w2": gate_grads[2], "gate.b2": gate_grads[3]}
    return d_fs, d_ft, d_prompt, grads


def project_tokens(f_st: Array, proj: ProjectorMlp):
    """Project fused features into the language width. Returns ``(tau_v, cache)``."""
    return mlp_fwd(f_st, proj.w1, proj.b1, proj.w2, proj.b2)


def project_tokens_bwd(grad_out: Array, cache):
    """Returns ``(d_f_st, (d_w1, d_b1, d_w2, d_b2))``."""
    return mlp_bwd(grad_out, cache)
