"""Pure-Python (numpy) kernels: the canonical arithmetic of the model.

This module *defines* the arithmetic contract; the compiled twin in
``_core.pyx`` reproduces it bit for bit.  The rules that make results
reproducible and backend-independent:

* all arithmetic is float64;
* every reduction is a sequential sum in ascending index order -- numpy's
  pairwise ``np.sum``/``np.dot`` are never used on the model path;
* the two time-axis reductions inside attention pooling (softmax
  normalizer, weighted pooling) sort their addends by value first, so the
  eval-mode output is bit-invariant under any permutation of timesteps;
* ``exp`` comes from libm (``math.exp``), never ``np.exp``, because numpy's
  SIMD exp may differ from libm in the last ulp;
* dropout masks are regenerated from a ``(seed, counter)`` SplitMix64
  stream, drawn in ascending flattened-element order.

Elementwise numpy ufuncs (+,-,*,/, sqrt, maximum) are IEEE-754 correct per
element and therefore match the scalar C loops exactly.
"""

from __future__ import annotations

import math

import numpy as np

from ..rng import uniform_block

BN_EPS = 1e-5

name = "pure"
compiled = False


def exp_arr(x: np.ndarray) -> np.ndarray:
    """Elementwise libm exp. Model-path callers guarantee x <= 0."""
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = math.exp(flat[i])
    return out.reshape(x.shape)


def sigmoid_arr(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic; branch keeps every exp argument <= 0."""
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        v = flat[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            out[i] = e / (1.0 + e)
    return out.reshape(x.shape)


def seq_sum(x2: np.ndarray) -> np.ndarray:
    """Sum of rows of a (N, ...) array in ascending row order."""
    acc = np.zeros(x2.shape[1:], dtype=np.float64)
    for i in range(x2.shape[0]):
        acc += x2[i]
    return acc


def sorted_time_sum(x: np.ndarray) -> np.ndarray:
    """Sum over axis 1 with addends sorted ascending by value.

    The sort canonicalizes summation order by value instead of position,
    which is what makes eval output invariant under timestep permutation.
    """
    s = np.sort(x, axis=1)
    acc = np.zeros(x.shape[:1] + x.shape[2:], dtype=np.float64)
    for t in range(x.shape[1]):
        acc += s[:, t]
    return acc


def linear_seq(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y[..., o] = b[o] + sum_c x[..., c] * w[o, c], ascending c."""
    out = np.empty(x.shape[:-1] + (w.shape[0],), dtype=np.float64)
    out[...] = b
    for c in range(x.shape[-1]):
        out += x[..., c : c + 1] * w[:, c]
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def dropout_mask(shape: tuple[int, ...], rate: float, seed: int, counter: int):
    """0/1 keep mask drawn elementwise in C order; keep iff u >= rate.

    Returns (mask, n_draws).  rate == 0 consumes no draws.
    """
    if rate == 0.0:
        return np.ones(shape, dtype=np.float64), 0
    n = 1
    for s in shape:
        n *= s
    u = uniform_block(seed, counter, n).reshape(shape)
    mask = (u >= rate).astype(np.float64)
    return mask, n


def apply_dropout(x: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    """Inverted dropout: gate (exact) then one scaling rounding."""
    inv = 1.0 / (1.0 - rate)
    return (x * mask) * inv


def bn_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    """Per-channel normalization by batch-and-time statistics.

    Biased variance; epsilon under the square root.  Returns
    (out, xb_norm, mean, var) -- running stats are the caller's business.
    """
    B, T, C = x.shape
    n = B * T
    x2 = x.reshape(n, C)
    mean = seq_sum(x2) / n
    cen = x - mean
    var = seq_sum((cen * cen).reshape(n, C)) / n
    denom = np.sqrt(var + BN_EPS)
    norm = cen / denom
    out = gamma * norm + beta
    return out, norm, mean, var


def bn_eval(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
            rmean: np.ndarray, rvar: np.ndarray) -> np.ndarray:
    denom = np.sqrt(rvar + BN_EPS)
    norm = (x - rmean) / denom
    return gamma * norm + beta


def softmax_time(s: np.ndarray) -> np.ndarray:
    """Softmax over axis 1 with max-shift and a value-sorted normalizer."""
    m = np.max(s, axis=1)
    e = exp_arr(s - m[:, None])
    denom = sorted_time_sum(e)
    return e / denom[:, None]


def attention_scores(a: np.ndarray, attn_w1, attn_b1, attn_w2, attn_b2,
                     rate: float, seed: int, counter: int, train: bool):
    """Per-timestep scalar scores from the 2-layer scorer.

    Returns (scores, z1, mask2, r, n_draws); mask2/r are None in eval mode.
    """
    z1 = linear_seq(a, attn_w1, attn_b1)
    if train:
        mask2, n2 = dropout_mask(z1.shape, rate, seed, counter)
        dz = apply_dropout(z1, mask2, rate)
    else:
        mask2, n2 = None, 0
        dz = z1
    r = relu(dz)
    s = linear_seq(r, attn_w2, attn_b2)[..., 0]
    return s, z1, mask2, r, n2


def forward_train(x, gamma, beta, proj_w, proj_b, attn_w1, attn_b1,
                  attn_w2, attn_b2, out_w, out_b,
                  rate: float, apply_sigmoid: bool, seed: int, counter: int):
    """Fused training forward pass.

    Composes the stage helpers above, so chaining the public stage ops
    reproduces this output bit for bit.  Returns (out, cache, mean, var,
    n_draws); the caller applies the running-statistics EMA.
    """
    xb, norm, mean, var = bn_train(x, gamma, beta)
    y = linear_seq(xb, proj_w, proj_b)
    mask1, n1 = dropout_mask(y.shape, rate, seed, counter)
    a = relu(apply_dropout(y, mask1, rate))
    s, z1, mask2, r, n2 = attention_scores(
        a, attn_w1, attn_b1, attn_w2, attn_b2, rate, seed, counter + n1, True)
    w = softmax_time(s)
    pooled = sorted_time_sum(w[:, :, None] * a)
    o = linear_seq(pooled, out_w, out_b)
    out = sigmoid_arr(o) if apply_sigmoid else o
    cache = {
        "xb": xb, "norm": norm, "y": y, "mask1": mask1, "a": a,
        "z1": z1, "mask2": mask2, "r": r, "w": w, "pooled": pooled,
        "out": out,
    }
    return out, cache, mean, var, n1 + n2


def forward_eval(x, gamma, beta, rmean, rvar, proj_w, proj_b,
                 attn_w1, attn_b1, attn_w2, attn_b2, out_w, out_b,
                 apply_sigmoid: bool):
    """Fused eval forward pass: running stats, no dropout, no cache."""
    xb = bn_eval(x, gamma, beta, rmean, rvar)
    y = linear_seq(xb, proj_w, proj_b)
    a = relu(y)
    s, _, _, _, _ = attention_scores(
        a, attn_w1, attn_b1, attn_w2, attn_b2, 0.0, 0, 0, False)
    w = softmax_time(s)
    pooled = sorted_time_sum(w[:, :, None] * a)
    o = linear_seq(pooled, out_w, out_b)
    out = sigmoid_arr(o) if apply_sigmoid else o
    return out, w


def backward(cache: dict, proj_w, attn_w1, attn_w2, out_w,
             rate: float, apply_sigmoid: bool, go: np.ndarray) -> dict:
    """Exact gradients for every learnable tensor.

    ``go`` is the loss gradient w.r.t. the forward *output* (post-sigmoid
    for the regression head).  Reductions over batch/time run in ascending
    index order; no input gradient is formed (batch statistics do not
    depend on any parameter, so gamma/beta gradients close the chain).
    """
    xb, norm = cache["xb"], cache["norm"]
    y, mask1, a = cache["y"], cache["mask1"], cache["a"]
    z1, mask2, r = cache["z1"], cache["mask2"], cache["r"]
    w, pooled, out = cache["w"], cache["pooled"], cache["out"]
    B, T, H = a.shape
    J = z1.shape[2]
    C = xb.shape[2]
    K = out.shape[1]
    n = B * T
    inv = 1.0 / (1.0 - rate)

    if apply_sigmoid:
        do = go * (out * (1.0 - out))
    else:
        do = go

    d_out_w = np.zeros((K, H), dtype=np.float64)
    d_out_b = np.zeros(K, dtype=np.float64)
    for i in range(B):
        d_out_w += do[i][:, None] * pooled[i]
        d_out_b += do[i]
    dpooled = np.zeros((B, H), dtype=np.float64)
    for k in range(K):
        dpooled += do[:, k : k + 1] * out_w[k]

    dw = np.zeros((B, T), dtype=np.float64)
    for h in range(H):
        dw += dpooled[:, h : h + 1] * a[:, :, h]
    sdot = np.zeros(B, dtype=np.float64)
    for t in range(T):
        sdot += w[:, t] * dw[:, t]
    ds = w * (dw - sdot[:, None])

    ds2 = ds.reshape(n)
    r2 = r.reshape(n, J)
    d_attn_w2 = np.zeros((1, J), dtype=np.float64)
    d_attn_b2 = np.zeros(1, dtype=np.float64)
    for i in range(n):
        d_attn_w2[0] += ds2[i] * r2[i]
        d_attn_b2[0] += ds2[i]
    dr = ds[:, :, None] * attn_w2[0]

    dz1 = (dr * ((z1 > 0.0).astype(np.float64) * mask2)) * inv
    dz1_2 = dz1.reshape(n, J)
    a2 = a.reshape(n, H)
    d_attn_w1 = np.zeros((J, H), dtype=np.float64)
    d_attn_b1 = np.zeros(J, dtype=np.float64)
    for i in range(n):
        d_attn_w1 += dz1_2[i][:, None] * a2[i]
        d_attn_b1 += dz1_2[i]

    da = w[:, :, None] * dpooled[:, None, :]
    for j in range(J):
        da += dz1[:, :, j : j + 1] * attn_w1[j]

    dy = (da * ((y > 0.0).astype(np.float64) * mask1)) * inv
    dy2 = dy.reshape(n, H)
    xb2 = xb.reshape(n, C)
    d_proj_w = np.zeros((H, C), dtype=np.float64)
    d_proj_b = np.zeros(H, dtype=np.float64)
    for i in range(n):
        d_proj_w += dy2[i][:, None] * xb2[i]
        d_proj_b += dy2[i]

    dxb = np.zeros((B, T, C), dtype=np.float64)
    for h in range(H):
        dxb += dy[:, :, h : h + 1] * proj_w[h]
    prod = (dxb * norm).reshape(n, C)
    dxb2 = dxb.reshape(n, C)
    d_gamma = np.zeros(C, dtype=np.float64)
    d_beta = np.zeros(C, dtype=np.float64)
    for i in range(n):
        d_gamma += prod[i]
        d_beta += dxb2[i]

    return {
        "bn_gamma": d_gamma, "bn_beta": d_beta,
        "proj_weight": d_proj_w, "proj_bias": d_proj_b,
        "attn_w1": d_attn_w1, "attn_b1": d_attn_b1,
        "attn_w2": d_attn_w2, "attn_b2": d_attn_b2,
        "out_weight": d_out_w, "out_bias": d_out_b,
    }
