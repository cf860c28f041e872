"""Sparsity penalties and their proximal operators.

Every penalty here is separable, so the proximal problem

    argmin_x  0.5 * ||x - y||^2 + t * R(x)

is solved coordinate by coordinate, where ``R(x) = penalty_value(spec, x)``
already contains the level ``spec.lam``.  In the alternating solver ``t`` is
the step ``1 / L``, so for the l1 penalty the effective threshold is
``t * lam``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PenaltySpec", "prox", "prox_nonneg", "penalty_value", "soft_threshold"]

PENALTY_KINDS = ("none", "l1", "scad")


@dataclass(frozen=True)
class PenaltySpec:
    """Sparsity penalty: ``kind`` in {none, l1, scad}, level ``lam``.

    ``a`` is the SCAD concavity parameter and must exceed 2.  ``nonneg``
    restricts the factor to the non-negative orthant.
    """

    kind: str = "l1"
    lam: float = 0.0
    nonneg: bool = False
    a: float = 3.7

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}; expected one of {PENALTY_KINDS}")
        lam = float(self.lam)
        if not np.isfinite(lam) or lam < 0:
            raise ValueError(f"penalty level must be finite and non-negative, got {self.lam}")
        if self.kind == "scad" and not self.a > 2:
            raise ValueError(f"SCAD requires a > 2, got {self.a}")
        object.__setattr__(self, "lam", 0.0 if self.kind == "none" else lam)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "nonneg", bool(self.nonneg))

    def with_lam(self, lam: float) -> PenaltySpec:
        return PenaltySpec(self.kind, lam, self.nonneg, self.a)

    @property
    def is_convex(self) -> bool:
        return self.kind != "scad"


def soft_threshold(y, threshold):
    """``sign(y) * max(|y| - threshold, 0)``."""
    return np.sign(y) * np.maximum(np.abs(y) - threshold, 0.0)


def _scad(absx, lam, a):
    return np.where(
        absx <= lam,
        lam * absx,
        np.where(
            absx <= a * lam,
            (2 * a * lam * absx - absx**2 - lam**2) / (2 * (a - 1)),
            0.5 * (a + 1) * lam**2,
        ),
    )


def _scad_prox_magnitude(z, lam, a, t):
    """Minimiser over ``x >= 0`` of ``0.5 (x - z)^2 + t * SCAD(x)`` for ``z >= 0``.

    Each of the three SCAD pieces is a smooth function on its interval, so the
    minimiser is one of the clipped stationary points or an interval end.  All
    candidates are scored and the smallest magnitude wins ties.
    """
    z = np.asarray(z, dtype=float)
    cands = [
        np.zeros_like(z),
        np.clip(z - t * lam, 0.0, lam),
        np.full_like(z, lam),
        np.full_like(z, a * lam),
        np.maximum(z, a * lam),
    ]
    denom = a - 1 - t
    if denom > 0:
        cands.append(np.clip(((a - 1) * z - t * a * lam) / denom, lam, a * lam))
    cands = np.stack(cands)
    cands.sort(axis=0)
    obj = 0.5 * (cands - z) ** 2 + t * _scad(cands, lam, a)
    # argmin returns the first minimum, i.e. the smallest magnitude
    best = np.argmin(obj, axis=0)
    return np.take_along_axis(cands, best[None], axis=0)[0]


def _check(y, t):
    if t < 0:
        raise ValueError(f"step t must be non-negative, got {t}")
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("prox input contains non-finite values")
    return y


def prox(spec: PenaltySpec, y, t: float = 1.0) -> np.ndarray:
    """Proximal operator of ``t * penalty_value(spec, .)`` at ``y``.

    Examples
    --------
    >>> prox(PenaltySpec("l1", 1.0), [2.0, -0.3, 0.5], 0.5)
    array([1.5, 0. , 0. ])
    """
    if spec.nonneg:
        return prox_nonneg(spec, y, t)
    y = _check(y, t)
    if spec.kind == "none" or t == 0 or spec.lam == 0:
        return y.copy()
    if spec.kind == "l1":
        return soft_threshold(y, t * spec.lam)
    return np.sign(y) * _scad_prox_magnitude(np.abs(y), spec.lam, spec.a, t)


def prox_nonneg(spec: PenaltySpec, y, t: float = 1.0) -> np.ndarray:
    """Proximal operator restricted to ``x >= 0``.

    The penalties are even and non-decreasing in ``|x|``, so the constrained
    minimiser is zero for ``y <= 0`` and matches the unconstrained one
    otherwise; for l1 this is ``max(y - t * lam, 0)``.
    """
    y = _check(y, t)
    ypos = np.maximum(y, 0.0)
    if spec.kind == "none" or t == 0 or spec.lam == 0:
        return ypos
    if spec.kind == "l1":
        return np.maximum(y - t * spec.lam, 0.0)
    return _scad_prox_magnitude(ypos, spec.lam, spec.a, t)


def penalty_value(spec: PenaltySpec, x) -> float:
    """``lam * ||x||_1`` for l1, summed SCAD for scad, 0 for none."""
    if spec.kind == "none" or spec.lam == 0:
        return 0.0
    absx = np.abs(np.asarray(x, dtype=float))
    if spec.kind == "l1":
        return float(spec.lam * absx.sum())
    return float(_scad(absx, spec.lam, spec.a).sum())
