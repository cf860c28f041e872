"""Compiled proximal-gradient loop for the inner regression problems.

The structure matrix is passed in CSR form.  Penalty kinds are coded as
0 = none, 1 = l1, 2 = scad.
"""

import numpy as np
from numba import njit

KIND_CODES = {"none": 0, "l1": 1, "scad": 2}


@njit(cache=True)
def _scad_value(x, lam, a):
    if x <= lam:
        return lam * x
    if x <= a * lam:
        return (2.0 * a * lam * x - x * x - lam * lam) / (2.0 * (a - 1.0))
    return 0.5 * (a + 1.0) * lam * lam


@njit(cache=True)
def _clip(x, lo, hi):
    return min(max(x, lo), hi)


@njit(cache=True)
def _better(c, obj, best, best_obj):
    # lower objective wins; ties go to the smaller magnitude
    return obj < best_obj or (obj == best_obj and c < best)


@njit(cache=True)
def scad_magnitude(z, lam, a, t):
    best = 0.0
    best_obj = 0.5 * z * z
    for j in range(5):
        if j == 0:
            c = _clip(z - t * lam, 0.0, lam)
        elif j == 1:
            c = lam
        elif j == 2:
            c = a * lam
        elif j == 3:
            c = max(z, a * lam)
        else:
            denom = a - 1.0 - t
            if denom <= 0.0:
                continue
            c = _clip(((a - 1.0) * z - t * a * lam) / denom, lam, a * lam)
        obj = 0.5 * (c - z) ** 2 + t * _scad_value(c, lam, a)
        if _better(c, obj, best, best_obj):
            best = c
            best_obj = obj
    return best


@njit(cache=True)
def prox_scalar(z, kind, lam, a, t, nonneg):
    if nonneg and z <= 0.0:
        return 0.0
    az = abs(z)
    if kind == 0 or lam == 0.0 or t == 0.0:
        m = az
    elif kind == 1:
        m = max(az - t * lam, 0.0)
    else:
        m = scad_magnitude(az, lam, a, t)
    return m if z >= 0.0 else -m


@njit(cache=True)
def prox_grad(target, indptr, indices, data, alpha, L, kind, lam, a, nonneg,
              x0, tol, max_iter, accelerate):
    n = target.shape[0]
    step = 1.0 / L
    x = x0.copy()
    y = x0.copy()
    xn = np.empty(n)
    om = np.zeros(n)
    beta = (np.sqrt(L) - 1.0) / (np.sqrt(L) + 1.0)
    for _ in range(max_iter):
        if alpha != 0.0:
            for i in range(n):
                acc = 0.0
                for jj in range(indptr[i], indptr[i + 1]):
                    acc += data[jj] * y[indices[jj]]
                om[i] = acc
        dsq = 0.0
        nsq = 0.0
        mom = 0.0
        for i in range(n):
            z = y[i] - step * (y[i] + alpha * om[i] - target[i])
            xi = prox_scalar(z, kind, lam, a, step, nonneg)
            d = xi - y[i]
            dsq += d * d
            nsq += xi * xi
            mom += (xi - x[i]) * d
            xn[i] = xi
        if L * np.sqrt(dsq) <= tol * np.sqrt(nsq):
            return xn, True
        if accelerate and mom >= 0.0:
            for i in range(n):
                y[i] = xn[i] + beta * (xn[i] - x[i])
        else:
            for i in range(n):
                y[i] = xn[i]
        for i in range(n):
            x[i] = xn[i]
    return x, False
