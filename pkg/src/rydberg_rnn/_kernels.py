"""GRU cell with a batch-independent operation order.

The small matrix products run in compiled row loops, each output row
built from its own input row in a fixed order; BLAS gemm gives no such
guarantee, and its results can change with batch size.  The exponentials
go through numpy's vectorized ``exp``, which acts on each element alone,
so they stay cheap without coupling rows.  Batched and per-sample
evaluations therefore agree bit for bit.

Both nonlinearities are written in terms of e = exp(-|a|):
sigmoid(a) = 1/(1+e) or e/(1+e), tanh(a) = +-(1-e)/(1+e) with e = exp(-2|a|).
"""

import numpy as np
from numba import njit

# rows per block: keeps the temporaries in cache
BLOCK = 256


@njit(cache=True)
def _gate_inputs(table, urz, codes, h):
    """Pre-activations table[code, :2nh] + h @ urz and their -|.|."""
    b, nh = h.shape
    pre = np.empty((b, 2 * nh))
    neg = np.empty((b, 2 * nh))
    for row in range(b):
        t = table[codes[row]]
        for k in range(2 * nh):
            pre[row, k] = t[k]
        for j in range(nh):
            hj = h[row, j]
            for k in range(2 * nh):
                pre[row, k] += hj * urz[j, k]
        for k in range(2 * nh):
            neg[row, k] = -abs(pre[row, k])
    return pre, neg


@njit(cache=True)
def _candidate_inputs(table, uc, codes, h, pre, e, r, z):
    """Gates r, z (written in place) from exp(-|pre|); returns the candidate pre-activation and its -2|.|."""
    b, nh = h.shape
    cand = np.empty((b, nh))
    neg = np.empty((b, nh))
    for row in range(b):
        for k in range(nh):
            ek = e[row, k]
            r[row, k] = 1.0 / (1.0 + ek) if pre[row, k] >= 0.0 else ek / (1.0 + ek)
            ek = e[row, nh + k]
            z[row, k] = 1.0 / (1.0 + ek) if pre[row, nh + k] >= 0.0 else ek / (1.0 + ek)
        t = table[codes[row]]
        for k in range(nh):
            cand[row, k] = t[2 * nh + k]
        for j in range(nh):
            v = r[row, j] * h[row, j]
            for k in range(nh):
                cand[row, k] += v * uc[j, k]
        for k in range(nh):
            neg[row, k] = -2.0 * abs(cand[row, k])
    return cand, neg


@njit(cache=True)
def _update(h, z, cand, e, dv, dc, hc, h_new, d):
    """tanh from exp(-2|cand|), h + z (hc - h), and dc + h_new . dv, all written in place."""
    b, nh = h.shape
    for row in range(b):
        acc = dc
        for k in range(nh):
            ek = e[row, k]
            c = (1.0 - ek) / (1.0 + ek)
            if cand[row, k] < 0.0:
                c = -c
            hc[row, k] = c
            hn = h[row, k] + z[row, k] * (c - h[row, k])
            h_new[row, k] = hn
            acc += hn * dv[k]
        d[row] = acc


def gru_cell(table, urz, uc, dv, dc, codes, h, out=None, full=True):
    """Fused GRU update for a batch.

    table: (3, 3nh) input-plus-bias rows by input code; urz: (nh, 2nh);
    uc: (nh, nh); dv: (nh,) logit-difference head; codes: (B,) ints; h: (B, nh).
    Returns r, z, hc, h_new (B, nh) and the logit difference d (B,), or only
    (h_new, d) when ``full`` is false.  ``out`` receives h_new and must not
    alias ``h``.
    """
    b, nh = h.shape
    h_new = np.empty_like(h) if out is None else out
    d = np.empty(b)
    if full:
        r, z, hc = np.empty_like(h), np.empty_like(h), np.empty_like(h)
    else:
        rt, zt, ht = (np.empty((min(b, BLOCK), nh)) for _ in range(3))
    for start in range(0, b, BLOCK):
        sl = slice(start, min(start + BLOCK, b))
        m = sl.stop - start
        rb, zb, hb = (r[sl], z[sl], hc[sl]) if full else (rt[:m], zt[:m], ht[:m])
        pre, e = _gate_inputs(table, urz, codes[sl], h[sl])
        np.exp(e, out=e)
        cand, e2 = _candidate_inputs(table, uc, codes[sl], h[sl], pre, e, rb, zb)
        np.exp(e2, out=e2)
        _update(h[sl], zb, cand, e2, dv, dc, hb, h_new[sl], d[sl])
    if full:
        return r, z, hc, h_new, d
    return h_new, d
