# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled twin of the pure kernels.

Every loop reproduces the arithmetic contract documented in ``pure``:
same per-element operation sequences, same ascending reduction orders,
value-sorted time-axis sums, libm transcendentals, and the SplitMix64
counter stream for dropout masks.  Build with ``-ffp-contract=off`` (see
setup.py) so the compiler cannot fuse multiply-adds; with that flag the
results are bit-identical to the pure backend.
"""

import numpy as np

from libc.math cimport exp, ldexp, sqrt
from libc.stdint cimport uint64_t
from libc.stdlib cimport free, malloc

name = "compiled"
compiled = True

cdef double BN_EPS = 1e-5
cdef double INV53 = ldexp(1.0, -53)


cdef inline double u01(uint64_t seed, uint64_t n) noexcept nogil:
    cdef uint64_t z = seed + n * (<uint64_t>0x9E3779B97F4A7C15)
    z = (z ^ (z >> 30)) * (<uint64_t>0xBF58476D1CE4E5B9)
    z = (z ^ (z >> 27)) * (<uint64_t>0x94D049BB133111EB)
    z = z ^ (z >> 31)
    return (<double>(z >> 11)) * INV53


cdef inline void isort(double* a, int n) noexcept nogil:
    cdef int i, j
    cdef double key
    for i in range(1, n):
        key = a[i]
        j = i - 1
        while j >= 0 and a[j] > key:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = key


cdef inline double sigmoid_scalar(double v) noexcept nogil:
    cdef double e
    if v >= 0.0:
        return 1.0 / (1.0 + exp(-v))
    e = exp(v)
    return e / (1.0 + e)


def forward_train(x_arr, gamma_arr, beta_arr, proj_w_arr, proj_b_arr,
                  attn_w1_arr, attn_b1_arr, attn_w2_arr, attn_b2_arr,
                  out_w_arr, out_b_arr, double rate, bint apply_sigmoid,
                  unsigned long long seed, unsigned long long counter):
    """Fused training forward; see the pure backend for the contract."""
    cdef double[:, :, ::1] x = x_arr
    cdef double[::1] gamma = gamma_arr
    cdef double[::1] beta = beta_arr
    cdef double[:, ::1] proj_w = proj_w_arr
    cdef double[::1] proj_b = proj_b_arr
    cdef double[:, ::1] attn_w1 = attn_w1_arr
    cdef double[::1] attn_b1 = attn_b1_arr
    cdef double[:, ::1] attn_w2 = attn_w2_arr
    cdef double[::1] attn_b2 = attn_b2_arr
    cdef double[:, ::1] out_w = out_w_arr
    cdef double[::1] out_b = out_b_arr

    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t T = x.shape[1]
    cdef Py_ssize_t C = x.shape[2]
    cdef Py_ssize_t H = proj_w.shape[0]
    cdef Py_ssize_t J = attn_w1.shape[0]
    cdef Py_ssize_t K = out_w.shape[0]
    cdef Py_ssize_t n = B * T

    mean_np = np.zeros(C, dtype=np.float64)
    var_np = np.zeros(C, dtype=np.float64)
    norm_np = np.empty((B, T, C), dtype=np.float64)
    xb_np = np.empty((B, T, C), dtype=np.float64)
    y_np = np.empty((B, T, H), dtype=np.float64)
    mask1_np = np.ones((B, T, H), dtype=np.float64)
    a_np = np.empty((B, T, H), dtype=np.float64)
    z1_np = np.empty((B, T, J), dtype=np.float64)
    mask2_np = np.ones((B, T, J), dtype=np.float64)
    r_np = np.empty((B, T, J), dtype=np.float64)
    s_np = np.empty((B, T), dtype=np.float64)
    w_np = np.empty((B, T), dtype=np.float64)
    pooled_np = np.empty((B, H), dtype=np.float64)
    out_np = np.empty((B, K), dtype=np.float64)

    cdef double[::1] mean = mean_np
    cdef double[::1] var = var_np
    cdef double[:, :, ::1] norm = norm_np
    cdef double[:, :, ::1] xb = xb_np
    cdef double[:, :, ::1] y = y_np
    cdef double[:, :, ::1] mask1 = mask1_np
    cdef double[:, :, ::1] a = a_np
    cdef double[:, :, ::1] z1 = z1_np
    cdef double[:, :, ::1] mask2 = mask2_np
    cdef double[:, :, ::1] r = r_np
    cdef double[:, ::1] s = s_np
    cdef double[:, ::1] w = w_np
    cdef double[:, ::1] pooled = pooled_np
    cdef double[:, ::1] out = out_np

    cdef Py_ssize_t b, t, c, h, j, k
    cdef double acc, cen, denomc, m, inv, d, dz, o
    cdef uint64_t base1 = counter
    cdef uint64_t base2 = counter
    cdef Py_ssize_t ndraws = 0
    cdef double* buf = <double*>malloc(T * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        # batch statistics: ascending (b, t) per channel, biased variance
        for b in range(B):
            for t in range(T):
                for c in range(C):
                    mean[c] += x[b, t, c]
        for c in range(C):
            mean[c] = mean[c] / n
        for b in range(B):
            for t in range(T):
                for c in range(C):
                    cen = x[b, t, c] - mean[c]
                    var[c] += cen * cen
        for c in range(C):
            var[c] = var[c] / n
        for b in range(B):
            for t in range(T):
                for c in range(C):
                    denomc = sqrt(var[c] + BN_EPS)
                    cen = x[b, t, c] - mean[c]
                    norm[b, t, c] = cen / denomc
                    xb[b, t, c] = gamma[c] * norm[b, t, c] + beta[c]

        # projection: bias first, ascending input channel
        for b in range(B):
            for t in range(T):
                for h in range(H):
                    acc = proj_b[h]
                    for c in range(C):
                        acc += xb[b, t, c] * proj_w[h, c]
                    y[b, t, h] = acc

        # dropout masks in flat draw order, then (gate * scale) and ReLU
        inv = 1.0 / (1.0 - rate)
        if rate > 0.0:
            for b in range(B):
                for t in range(T):
                    for h in range(H):
                        mask1[b, t, h] = 1.0 if u01(seed, base1 + ((b * T + t) * H + h)) >= rate else 0.0
            ndraws = n * H
            base2 = counter + (<uint64_t>ndraws)
        for b in range(B):
            for t in range(T):
                for h in range(H):
                    d = (y[b, t, h] * mask1[b, t, h]) * inv
                    a[b, t, h] = d if d > 0.0 else 0.0

        # attention scorer layer 1 + dropout + ReLU
        for b in range(B):
            for t in range(T):
                for j in range(J):
                    acc = attn_b1[j]
                    for h in range(H):
                        acc += a[b, t, h] * attn_w1[j, h]
                    z1[b, t, j] = acc
        if rate > 0.0:
            for b in range(B):
                for t in range(T):
                    for j in range(J):
                        mask2[b, t, j] = 1.0 if u01(seed, base2 + ((b * T + t) * J + j)) >= rate else 0.0
            ndraws += n * J
        for b in range(B):
            for t in range(T):
                for j in range(J):
                    dz = (z1[b, t, j] * mask2[b, t, j]) * inv
                    r[b, t, j] = dz if dz > 0.0 else 0.0

        # scorer layer 2, softmax over time with a value-sorted normalizer
        for b in range(B):
            for t in range(T):
                acc = attn_b2[0]
                for j in range(J):
                    acc += r[b, t, j] * attn_w2[0, j]
                s[b, t] = acc
        for b in range(B):
            m = s[b, 0]
            for t in range(1, T):
                if s[b, t] > m:
                    m = s[b, t]
            for t in range(T):
                w[b, t] = exp(s[b, t] - m)
            for t in range(T):
                buf[t] = w[b, t]
            isort(buf, <int>T)
            acc = 0.0
            for t in range(T):
                acc += buf[t]
            for t in range(T):
                w[b, t] = w[b, t] / acc

        # weighted pooling, value-sorted per (b, h)
        for b in range(B):
            for h in range(H):
                for t in range(T):
                    buf[t] = w[b, t] * a[b, t, h]
                isort(buf, <int>T)
                acc = 0.0
                for t in range(T):
                    acc += buf[t]
                pooled[b, h] = acc

        # output head
        for b in range(B):
            for k in range(K):
                o = out_b[k]
                for h in range(H):
                    o += pooled[b, h] * out_w[k, h]
                out[b, k] = sigmoid_scalar(o) if apply_sigmoid else o
    finally:
        free(buf)

    cache = {
        "xb": xb_np, "norm": norm_np, "y": y_np, "mask1": mask1_np,
        "a": a_np, "z1": z1_np, "mask2": mask2_np, "r": r_np,
        "w": w_np, "pooled": pooled_np, "out": out_np,
    }
    return out_np, cache, mean_np, var_np, int(ndraws)


def forward_eval(x_arr, gamma_arr, beta_arr, rmean_arr, rvar_arr,
                 proj_w_arr, proj_b_arr, attn_w1_arr, attn_b1_arr,
                 attn_w2_arr, attn_b2_arr, out_w_arr, out_b_arr,
                 bint apply_sigmoid):
    """Fused eval forward: running statistics, no dropout, no cache."""
    cdef double[:, :, ::1] x = x_arr
    cdef double[::1] gamma = gamma_arr
    cdef double[::1] beta = beta_arr
    cdef double[::1] rmean = rmean_arr
    cdef double[::1] rvar = rvar_arr
    cdef double[:, ::1] proj_w = proj_w_arr
    cdef double[::1] proj_b = proj_b_arr
    cdef double[:, ::1] attn_w1 = attn_w1_arr
    cdef double[::1] attn_b1 = attn_b1_arr
    cdef double[:, ::1] attn_w2 = attn_w2_arr
    cdef double[::1] attn_b2 = attn_b2_arr
    cdef double[:, ::1] out_w = out_w_arr
    cdef double[::1] out_b = out_b_arr

    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t T = x.shape[1]
    cdef Py_ssize_t C = x.shape[2]
    cdef Py_ssize_t H = proj_w.shape[0]
    cdef Py_ssize_t J = attn_w1.shape[0]
    cdef Py_ssize_t K = out_w.shape[0]

    w_np = np.empty((B, T), dtype=np.float64)
    out_np = np.empty((B, K), dtype=np.float64)
    cdef double[:, ::1] w = w_np
    cdef double[:, ::1] out = out_np

    cdef Py_ssize_t b, t, c, h, j, k
    cdef double acc, denomc, nrm, val, m, o
    cdef double* abuf = <double*>malloc(T * H * sizeof(double))
    cdef double* rbuf = <double*>malloc(J * sizeof(double))
    cdef double* buf = <double*>malloc(T * sizeof(double))
    cdef double* sbuf = <double*>malloc(T * sizeof(double))
    if abuf == NULL or rbuf == NULL or buf == NULL or sbuf == NULL:
        free(abuf); free(rbuf); free(buf); free(sbuf)
        raise MemoryError()
    try:
        for b in range(B):
            # per-sample hidden activations (eval: dropout is the identity)
            for t in range(T):
                for h in range(H):
                    acc = proj_b[h]
                    for c in range(C):
                        denomc = sqrt(rvar[c] + BN_EPS)
                        nrm = (x[b, t, c] - rmean[c]) / denomc
                        val = gamma[c] * nrm + beta[c]
                        acc += val * proj_w[h, c]
                    abuf[t * H + h] = acc if acc > 0.0 else 0.0
            for t in range(T):
                for j in range(J):
                    acc = attn_b1[j]
                    for h in range(H):
                        acc += abuf[t * H + h] * attn_w1[j, h]
                    rbuf[j] = acc if acc > 0.0 else 0.0
                acc = attn_b2[0]
                for j in range(J):
                    acc += rbuf[j] * attn_w2[0, j]
                sbuf[t] = acc
            m = sbuf[0]
            for t in range(1, T):
                if sbuf[t] > m:
                    m = sbuf[t]
            for t in range(T):
                w[b, t] = exp(sbuf[t] - m)
            for t in range(T):
                buf[t] = w[b, t]
            isort(buf, <int>T)
            acc = 0.0
            for t in range(T):
                acc += buf[t]
            for t in range(T):
                w[b, t] = w[b, t] / acc
            for k in range(K):
                o = out_b[k]
                for h in range(H):
                    for t in range(T):
                        buf[t] = w[b, t] * abuf[t * H + h]
                    isort(buf, <int>T)
                    acc = 0.0
                    for t in range(T):
                        acc += buf[t]
                    o += acc * out_w[k, h]
                out[b, k] = sigmoid_scalar(o) if apply_sigmoid else o
    finally:
        free(abuf); free(rbuf); free(buf); free(sbuf)
    return out_np, w_np


def backward(cache, proj_w_arr, attn_w1_arr, attn_w2_arr, out_w_arr,
             double rate, bint apply_sigmoid, go_arr):
    """Exact gradients; mirrors the pure backward op for op."""
    cdef double[:, :, ::1] xb = cache["xb"]
    cdef double[:, :, ::1] norm = cache["norm"]
    cdef double[:, :, ::1] y = cache["y"]
    cdef double[:, :, ::1] mask1 = cache["mask1"]
    cdef double[:, :, ::1] a = cache["a"]
    cdef double[:, :, ::1] z1 = cache["z1"]
    cdef double[:, :, ::1] mask2 = cache["mask2"]
    cdef double[:, :, ::1] r = cache["r"]
    cdef double[:, ::1] w = cache["w"]
    cdef double[:, ::1] pooled = cache["pooled"]
    cdef double[:, ::1] out = cache["out"]
    cdef double[:, ::1] proj_w = proj_w_arr
    cdef double[:, ::1] attn_w1 = attn_w1_arr
    cdef double[:, ::1] attn_w2 = attn_w2_arr
    cdef double[:, ::1] out_w = out_w_arr
    cdef double[:, ::1] go = go_arr

    cdef Py_ssize_t B = a.shape[0]
    cdef Py_ssize_t T = a.shape[1]
    cdef Py_ssize_t H = a.shape[2]
    cdef Py_ssize_t J = z1.shape[2]
    cdef Py_ssize_t C = xb.shape[2]
    cdef Py_ssize_t K = out.shape[1]
    cdef double inv = 1.0 / (1.0 - rate)

    do_np = np.empty((B, K), dtype=np.float64)
    d_out_w_np = np.zeros((K, H), dtype=np.float64)
    d_out_b_np = np.zeros(K, dtype=np.float64)
    dpooled_np = np.zeros((B, H), dtype=np.float64)
    dw_np = np.zeros((B, T), dtype=np.float64)
    sdot_np = np.zeros(B, dtype=np.float64)
    ds_np = np.empty((B, T), dtype=np.float64)
    d_attn_w2_np = np.zeros((1, J), dtype=np.float64)
    d_attn_b2_np = np.zeros(1, dtype=np.float64)
    dz1_np = np.empty((B, T, J), dtype=np.float64)
    d_attn_w1_np = np.zeros((J, H), dtype=np.float64)
    d_attn_b1_np = np.zeros(J, dtype=np.float64)
    da_np = np.empty((B, T, H), dtype=np.float64)
    dy_np = np.empty((B, T, H), dtype=np.float64)
    d_proj_w_np = np.zeros((H, C), dtype=np.float64)
    d_proj_b_np = np.zeros(H, dtype=np.float64)
    dxb_np = np.zeros((B, T, C), dtype=np.float64)
    d_gamma_np = np.zeros(C, dtype=np.float64)
    d_beta_np = np.zeros(C, dtype=np.float64)

    cdef double[:, ::1] do = do_np
    cdef double[:, ::1] d_out_w = d_out_w_np
    cdef double[::1] d_out_b = d_out_b_np
    cdef double[:, ::1] dpooled = dpooled_np
    cdef double[:, ::1] dw = dw_np
    cdef double[::1] sdot = sdot_np
    cdef double[:, ::1] ds = ds_np
    cdef double[:, ::1] d_attn_w2 = d_attn_w2_np
    cdef double[::1] d_attn_b2 = d_attn_b2_np
    cdef double[:, :, ::1] dz1 = dz1_np
    cdef double[:, ::1] d_attn_w1 = d_attn_w1_np
    cdef double[::1] d_attn_b1 = d_attn_b1_np
    cdef double[:, :, ::1] da = da_np
    cdef double[:, :, ::1] dy = dy_np
    cdef double[:, ::1] d_proj_w = d_proj_w_np
    cdef double[::1] d_proj_b = d_proj_b_np
    cdef double[:, :, ::1] dxb = dxb_np
    cdef double[::1] d_gamma = d_gamma_np
    cdef double[::1] d_beta = d_beta_np

    cdef Py_ssize_t b, t, c, h, j, k
    cdef double gate, acc, p

    if apply_sigmoid:
        for b in range(B):
            for k in range(K):
                do[b, k] = go[b, k] * (out[b, k] * (1.0 - out[b, k]))
    else:
        for b in range(B):
            for k in range(K):
                do[b, k] = go[b, k]

    for b in range(B):
        for k in range(K):
            for h in range(H):
                d_out_w[k, h] += do[b, k] * pooled[b, h]
            d_out_b[k] += do[b, k]
    for b in range(B):
        for k in range(K):
            for h in range(H):
                dpooled[b, h] += do[b, k] * out_w[k, h]

    for b in range(B):
        for h in range(H):
            for t in range(T):
                dw[b, t] += dpooled[b, h] * a[b, t, h]
    for b in range(B):
        for t in range(T):
            sdot[b] += w[b, t] * dw[b, t]
    for b in range(B):
        for t in range(T):
            ds[b, t] = w[b, t] * (dw[b, t] - sdot[b])

    for b in range(B):
        for t in range(T):
            for j in range(J):
                d_attn_w2[0, j] += ds[b, t] * r[b, t, j]
            d_attn_b2[0] += ds[b, t]
    for b in range(B):
        for t in range(T):
            for j in range(J):
                gate = (1.0 if z1[b, t, j] > 0.0 else 0.0) * mask2[b, t, j]
                dz1[b, t, j] = ((ds[b, t] * attn_w2[0, j]) * gate) * inv
    for b in range(B):
        for t in range(T):
            for j in range(J):
                for h in range(H):
                    d_attn_w1[j, h] += dz1[b, t, j] * a[b, t, h]
                d_attn_b1[j] += dz1[b, t, j]

    for b in range(B):
        for t in range(T):
            for h in range(H):
                acc = w[b, t] * dpooled[b, h]
                for j in range(J):
                    acc += dz1[b, t, j] * attn_w1[j, h]
                da[b, t, h] = acc
    for b in range(B):
        for t in range(T):
            for h in range(H):
                gate = (1.0 if y[b, t, h] > 0.0 else 0.0) * mask1[b, t, h]
                dy[b, t, h] = (da[b, t, h] * gate) * inv

    for b in range(B):
        for t in range(T):
            for h in range(H):
                for c in range(C):
                    d_proj_w[h, c] += dy[b, t, h] * xb[b, t, c]
                d_proj_b[h] += dy[b, t, h]
    for b in range(B):
        for t in range(T):
            for c in range(C):
                acc = 0.0
                for h in range(H):
                    acc += dy[b, t, h] * proj_w[h, c]
                dxb[b, t, c] = acc
    for b in range(B):
        for t in range(T):
            for c in range(C):
                p = dxb[b, t, c] * norm[b, t, c]
                d_gamma[c] += p
                d_beta[c] += dxb[b, t, c]

    return {
        "bn_gamma": d_gamma_np, "bn_beta": d_beta_np,
        "proj_weight": d_proj_w_np, "proj_bias": d_proj_b_np,
        "attn_w1": d_attn_w1_np, "attn_b1": d_attn_b1_np,
        "attn_w2": d_attn_w2_np, "attn_b2": d_attn_b2_np,
        "out_weight": d_out_w_np, "out_bias": d_out_b_np,
    }
