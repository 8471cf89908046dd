"""Fused loss kernels.

Each kernel returns the loss value together with its gradient with respect to
the kernel input. Two implementations exist for every kernel: a numba
``@njit`` loop version and a vectorised numpy version. The numba path is used
when numba imports cleanly and ``CLIM_DISABLE_NUMBA`` is unset (or ``0``).

Both paths compute the same quantities; they are not bit-identical to each
other because the summation order differs.
"""

import os

import numpy as np

_DISABLE = os.environ.get("CLIM_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("numba disabled by CLIM_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def info_nce_numpy(z, tau):
    n = z.shape[0]
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    u = z / norms[:, None]
    s = (u @ u.T) / tau
    np.fill_diagonal(s, -np.inf)
    row_max = s.max(axis=1)
    e = np.exp(s - row_max[:, None])
    lse = row_max + np.log(e.sum(axis=1))
    pos = np.arange(n) ^ 1
    losses = lse - s[np.arange(n), pos]
    loss = losses.sum() / n

    p = np.exp(s - lse[:, None])
    g = p
    g[np.arange(n), pos] -= 1.0
    g /= n
    du = ((g + g.T) @ u) / tau
    radial = np.einsum("ij,ij->i", u, du)
    dz = (du - u * radial[:, None]) / norms[:, None]
    return loss, dz


def xent_numpy(logits, labels):
    m = logits.shape[0]
    row_max = logits.max(axis=1, keepdims=True)
    shifted = logits - row_max
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(m), labels].sum() / m
    g = np.exp(logp)
    g[np.arange(m), labels] -= 1.0
    g /= m
    return loss, g


def _safe_log(p):
    out = np.zeros_like(p)
    np.log(p, out=out, where=p > 0)
    return out


def mi_numpy(p, threshold, gated):
    m = p.shape[0]
    logp = _safe_log(p)
    cond = -(p * logp).sum() / m
    pbar = p.mean(axis=0)
    logpbar = _safe_log(pbar)
    h_marg = -(pbar * logpbar).sum()
    active = (not gated) or h_marg < threshold
    g = -(logp + 1.0) / m
    loss = cond
    if active:
        loss = cond - h_marg
        g = g + (logpbar + 1.0)[None, :] / m
    return loss, g, h_marg, active


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def info_nce_numba(z, tau):
        n, d = z.shape
        norms = np.empty(n)
        u = np.empty((n, d))
        for i in range(n):
            acc = 0.0
            for c in range(d):
                acc += z[i, c] * z[i, c]
            norms[i] = np.sqrt(acc)
            for c in range(d):
                u[i, c] = z[i, c] / norms[i]

        s = np.empty((n, n))
        for i in range(n):
            for k in range(i, n):
                acc = 0.0
                for c in range(d):
                    acc += u[i, c] * u[k, c]
                s[i, k] = acc / tau
                s[k, i] = s[i, k]

        g = np.zeros((n, n))
        total = 0.0
        for i in range(n):
            row_max = -np.inf
            for k in range(n):
                if k != i and s[i, k] > row_max:
                    row_max = s[i, k]
            acc = 0.0
            for k in range(n):
                if k != i:
                    g[i, k] = np.exp(s[i, k] - row_max)
                    acc += g[i, k]
            pos = i ^ 1
            total += row_max + np.log(acc) - s[i, pos]
            scale = 1.0 / (acc * n)
            for k in range(n):
                g[i, k] *= scale
            g[i, pos] -= 1.0 / n
        loss = total / n

        # symmetric weights, then row sweeps over contiguous u rows
        dz = np.zeros((n, d))
        for i in range(n):
            for k in range(n):
                w = (g[i, k] + g[k, i]) / tau
                if w != 0.0:
                    for c in range(d):
                        dz[i, c] += w * u[k, c]
        for i in range(n):
            radial = 0.0
            for c in range(d):
                radial += u[i, c] * dz[i, c]
            for c in range(d):
                dz[i, c] = (dz[i, c] - u[i, c] * radial) / norms[i]
        return loss, dz

    @njit(cache=True)
    def xent_numba(logits, labels):
        m, c_count = logits.shape
        g = np.empty((m, c_count))
        total = 0.0
        for i in range(m):
            row_max = logits[i, 0]
            for c in range(1, c_count):
                if logits[i, c] > row_max:
                    row_max = logits[i, c]
            acc = 0.0
            for c in range(c_count):
                acc += np.exp(logits[i, c] - row_max)
            lse = np.log(acc)
            for c in range(c_count):
                g[i, c] = np.exp(logits[i, c] - row_max - lse) / m
            total -= logits[i, labels[i]] - row_max - lse
            g[i, labels[i]] -= 1.0 / m
        return total / m, g

    @njit(cache=True)
    def _mi_numba(p, threshold, gated):
        m, c_count = p.shape
        g = np.empty((m, c_count))
        pbar = np.zeros(c_count)
        cond = 0.0
        for i in range(m):
            for c in range(c_count):
                v = p[i, c]
                pbar[c] += v
                lg = np.log(v) if v > 0.0 else 0.0
                cond -= v * lg
                g[i, c] = -(lg + 1.0) / m
        cond /= m
        h_marg = 0.0
        for c in range(c_count):
            pbar[c] /= m
            if pbar[c] > 0.0:
                h_marg -= pbar[c] * np.log(pbar[c])
        active = (not gated) or h_marg < threshold
        loss = cond
        if active:
            loss = cond - h_marg
            for c in range(c_count):
                lg = np.log(pbar[c]) if pbar[c] > 0.0 else 0.0
                for i in range(m):
                    g[i, c] += (lg + 1.0) / m
        return loss, g, h_marg, active

    def mi_numba(p, threshold, gated):
        loss, g, h_marg, active = _mi_numba(p, float(threshold), bool(gated))
        return float(loss), g, float(h_marg), bool(active)

    info_nce = info_nce_numba
    xent = xent_numba
    mi = mi_numba
    BACKEND = "numba"
else:
    info_nce = info_nce_numpy
    xent = xent_numpy
    mi = mi_numpy
    BACKEND = "numpy"
