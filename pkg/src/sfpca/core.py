"""Rank-one SFPCA solver, greedy multi-rank fitting and deflation.

The rank-one problem is

    maximize   u' X v - R_u(u) - R_v(v)
    subject to u' S_u u <= 1,  v' S_v v <= 1,

with ``S = I + alpha * Omega`` and ``R`` a sparsity penalty.  It is solved by
block ascent: with ``v`` fixed the optimal ``u`` is the solution of the
penalized regression

    minimize_u  0.5 ||X v - u||^2 + R_u(u) + (alpha_u / 2) u' Omega_u u

rescaled to unit ``S_u``-norm, and vice versa for ``v``.  Each regression is
solved by proximal gradient descent with step ``1 / L``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _kernels
from .exceptions import ConvergenceWarning, DimensionError
from .prox import PenaltySpec, penalty_value, prox, soft_threshold
from .structmat import SmoothOperator, StructureMatrix, chain_diff_matrix

logger = logging.getLogger(__name__)

__all__ = [
    "DataMatrix",
    "SFPCAConfig",
    "RankOneFactor",
    "ModelFit",
    "init_rank1",
    "inner_ascent",
    "rescale",
    "fit_rank_one",
    "sparsity_threshold",
    "objective",
    "smooth_loss",
    "smooth_gradient",
    "deflate",
    "fit",
]

# rescale() treats an S-norm at or below this as a collapsed factor
ZERO_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class DataMatrix:
    """An ``n x p`` observation matrix, rows are observations."""

    values: np.ndarray
    row_labels: Sequence[str] | None = None
    col_labels: Sequence[str] | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or min(values.shape) < 1:
            raise DimensionError(f"data must be a non-empty 2-D matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("data matrix contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.row_labels is not None and len(self.row_labels) != values.shape[0]:
            raise DimensionError("row_labels length does not match the number of rows")
        if self.col_labels is not None and len(self.col_labels) != values.shape[1]:
            raise DimensionError("col_labels length does not match the number of columns")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def centered(self) -> bool:
        means = np.abs(self.values.mean(axis=0))
        return bool(np.all(means <= 1e-8 * (self.values.std(axis=0) + 1)))

    def center(self) -> DataMatrix:
        """Copy with column means removed."""
        return DataMatrix(self.values - self.values.mean(axis=0), self.row_labels, self.col_labels)


def _as_array(X) -> np.ndarray:
    if isinstance(X, DataMatrix):
        return X.values
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {X.shape}")
    return X


@dataclass(frozen=True)
class SFPCAConfig:
    """Parameters of one rank-one fit.

    ``u_smooth``/``v_smooth`` of ``None`` mean no smoothing (``S = I``).
    ``init`` is ``None`` for the rank-one SVD start, or a ``(u0, v0)`` pair
    that is normalized before use.  ``accelerate`` switches the inner solver
    to a restarted momentum scheme.
    """

    u_penalty: PenaltySpec = field(default_factory=lambda: PenaltySpec("none"))
    v_penalty: PenaltySpec = field(default_factory=lambda: PenaltySpec("none"))
    u_smooth: SmoothOperator | None = None
    v_smooth: SmoothOperator | None = None
    outer_tol: float = 1e-7
    inner_tol: float = 1e-8
    max_outer: int = 500
    max_inner: int = 5000
    init: tuple | None = None
    accelerate: bool = False

    def __post_init__(self):
        if not (self.outer_tol > 0 and self.inner_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be at least 1")

    @classmethod
    def from_params(cls, n: int, p: int, lambda_u=0.0, lambda_v=0.0, alpha_u=0.0,
                    alpha_v=0.0, omega_u: StructureMatrix | None = None,
                    omega_v: StructureMatrix | None = None, penalty: str = "l1",
                    nonneg: bool = False, scad_a: float = 3.7, **kwargs) -> SFPCAConfig:
        """Build a config from scalar levels.

        Missing structure matrices default to chain second differences.
        """
        if omega_u is None and alpha_u > 0:
            omega_u = chain_diff_matrix(n, 2)
        if omega_v is None and alpha_v > 0:
            omega_v = chain_diff_matrix(p, 2)
        return cls(
            u_penalty=PenaltySpec(penalty, lambda_u, nonneg, scad_a),
            v_penalty=PenaltySpec(penalty, lambda_v, nonneg, scad_a),
            u_smooth=SmoothOperator(alpha_u, omega_u, n),
            v_smooth=SmoothOperator(alpha_v, omega_v, p),
            **kwargs,
        )

    def smooth_ops(self, n: int, p: int) -> tuple[SmoothOperator, SmoothOperator]:
        su = self.u_smooth if self.u_smooth is not None else SmoothOperator.identity(n)
        sv = self.v_smooth if self.v_smooth is not None else SmoothOperator.identity(p)
        if su.dim != n or sv.dim != p:
            raise DimensionError(
                f"smoothing operators have dims ({su.dim}, {sv.dim}) but data is {n}x{p}"
            )
        return su, sv

    def params(self) -> dict:
        su, sv = self.u_smooth, self.v_smooth
        return {
            "lambda_u": self.u_penalty.lam,
            "alpha_u": su.alpha if su is not None else 0.0,
            "lambda_v": self.v_penalty.lam,
            "alpha_v": sv.alpha if sv is not None else 0.0,
        }


@dataclass(eq=False)
class RankOneFactor:
    """Scale ``d`` and unit-norm factors ``u``, ``v``.

    ``u_snorm2`` and ``v_snorm2`` are ``u' S u`` and ``v' S v`` at the
    solution before the final rescaling to unit Euclidean norm.
    """

    d: float
    u: np.ndarray
    v: np.ndarray
    objective_trace: list[float]
    converged: bool
    zero_solution: bool
    u_snorm2: float = 0.0
    v_snorm2: float = 0.0
    n_outer: int = 0
    inner_converged: bool = True

    @property
    def outer(self) -> np.ndarray:
        return self.d * np.outer(self.u, self.v)


@dataclass(eq=False)
class ModelFit:
    factors: list[RankOneFactor]
    residual: np.ndarray
    config_per_rank: list[SFPCAConfig]

    @property
    def rank(self) -> int:
        return len(self.factors)

    @property
    def d(self) -> np.ndarray:
        return np.array([f.d for f in self.factors])

    @property
    def U(self) -> np.ndarray:
        return np.column_stack([f.u for f in self.factors]) if self.factors else None

    @property
    def V(self) -> np.ndarray:
        return np.column_stack([f.v for f in self.factors]) if self.factors else None

    def reconstruction(self) -> np.ndarray:
        out = np.zeros_like(self.residual)
        for f in self.factors:
            out += f.outer
        return out


def _sign_convention(u, v):
    """Flip both factors so the largest-magnitude entry of ``v`` is >= 0."""
    i = int(np.argmax(np.abs(v)))
    if v[i] < 0:
        return -u, -v
    return u, v


def init_rank1(X, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0):
    """Leading singular vector pair by power iteration on ``X' X``.

    Stops once successive unit iterates of ``v`` differ by at most ``tol``.
    Returns ``(u, v)`` with unit Euclidean norms and the sign convention
    applied.  Warns with :class:`ConvergenceWarning` when the cap is hit,
    which happens when the top singular values are tied.
    """
    X = _as_array(X)
    if not np.any(X):
        raise ValueError("cannot initialize from a zero matrix")
    v = np.random.default_rng(seed).standard_normal(X.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = X.T @ (X @ v)
        wnorm = np.linalg.norm(w)
        if wnorm == 0:
            # start vector was in the null space
            v = X[np.argmax(np.abs(X).sum(axis=1))].copy()
            v /= np.linalg.norm(v)
            continue
        w /= wnorm
        if np.linalg.norm(w - v) <= tol:
            v = w
            break
        v = w
    else:
        warnings.warn(
            "power iteration for the SVD start stagnated; leading singular values may be tied",
            ConvergenceWarning,
            stacklevel=2,
        )
    u = X @ v
    u /= np.linalg.norm(u)
    return _sign_convention(u, v)


def smooth_loss(target, u, smooth: SmoothOperator) -> float:
    """Differentiable part ``0.5 ||target - u||^2 + (alpha / 2) u' Omega u``."""
    r = np.asarray(target, dtype=float) - u
    quad = smooth.alpha * smooth.omega.quad(u) if smooth.alpha > 0 else 0.0
    return 0.5 * float(r @ r) + 0.5 * quad


def smooth_gradient(target, u, smooth: SmoothOperator) -> np.ndarray:
    """Gradient of :func:`smooth_loss` in ``u``, i.e. ``S u - target``."""
    return smooth.apply(np.asarray(u, dtype=float)) - target


def _prox_map(penalty: PenaltySpec, step: float):
    """Validated-once prox for a fixed step, used inside the hot loop."""
    if penalty.kind == "l1" and not penalty.nonneg:
        thr = step * penalty.lam
        if thr == 0:
            return lambda z: z
        return lambda z: soft_threshold(z, thr)
    if penalty.kind == "l1":
        thr = step * penalty.lam
        return lambda z: np.maximum(z - thr, 0.0)
    if penalty.kind == "none" and not penalty.nonneg:
        return lambda z: z
    return lambda z: prox(penalty, z, step)



def inner_ascent(target, smooth: SmoothOperator, penalty: PenaltySpec, start=None,
                 tol: float = 1e-8, max_iter: int = 5000, accelerate: bool = False,
                 engine: str = "numba"):
    """Solve ``min_u 0.5 ||target - u||^2 + R(u) + (alpha / 2) u' Omega u``.

    Proximal gradient iterations
    ``u <- prox(u + (target - S u) / L, 1 / L)`` run from ``start`` until
    ``L * ||u_new - u|| <= tol * ||u_new||``.  Because ``S >= I`` this bounds
    the distance to the solution by ``tol`` relative for convex penalties.

    With ``accelerate=True`` momentum extrapolation is used with a restart
    whenever the step direction reverses.  ``engine="numpy"`` runs the same
    iteration in plain numpy (slower; kept as a cross-check).

    Returns
    -------
    u : ndarray
        The (approximate) minimizer.
    converged : bool
        False when ``max_iter`` was reached first.
    """
    target = np.asarray(target, dtype=float)
    if target.shape != (smooth.dim,):
        raise DimensionError(f"target has shape {target.shape}, expected ({smooth.dim},)")
    x = np.zeros_like(target) if start is None else np.array(start, dtype=float)
    if x.shape != target.shape:
        raise DimensionError("start vector does not match the target")

    if smooth.alpha == 0:
        # S = I and L = 1: one step from anywhere lands on prox(target)
        return prox(penalty, target, 1.0), True
    if engine == "numba":
        indptr, indices, data = smooth.omega.csr
        return _kernels.prox_grad(
            target, indptr, indices, data, smooth.alpha, smooth.lipschitz,
            _kernels.KIND_CODES[penalty.kind], penalty.lam, penalty.a, penalty.nonneg,
            x, tol, max_iter, accelerate,
        )
    if engine != "numpy":
        raise ValueError(f"unknown engine {engine!r}")
    return _inner_numpy(target, smooth, penalty, x, tol, max_iter, accelerate)


def _inner_numpy(target, smooth, penalty, x, tol, max_iter, accelerate):
    L = smooth.lipschitz
    step = 1.0 / L
    pmap = _prox_map(penalty, step)
    beta = (np.sqrt(L) - 1.0) / (np.sqrt(L) + 1.0)
    y = x
    for _ in range(max_iter):
        x_new = pmap(y - step * smooth_gradient(target, y, smooth))
        dx = x_new - y
        if L * np.sqrt(dx @ dx) <= tol * np.sqrt(x_new @ x_new):
            return x_new, True
        mom = x_new - x
        if accelerate and mom @ dx >= 0:
            y = x_new + beta * mom
        else:
            y = x_new
        x = x_new
    return x, False


def rescale(u_hat, smooth: SmoothOperator) -> np.ndarray:
    """Scale ``u_hat`` to unit ``S``-norm; zero when the norm is negligible."""
    u_hat = np.asarray(u_hat, dtype=float)
    nrm = smooth.norm(u_hat)
    if nrm <= ZERO_NORM:
        return np.zeros_like(u_hat)
    return u_hat / nrm


def sparsity_threshold(target, penalty: PenaltySpec) -> float:
    """Smallest penalty level that makes the inner solution exactly zero.

    For l1 this is ``max |target_i|`` whatever the smoothing level; SCAD has
    the same subdifferential at zero and shares the value.  With
    non-negativity only positive entries of ``target`` matter.
    """
    if penalty.kind == "none":
        return float("inf")
    target = np.asarray(target, dtype=float)
    if target.size == 0:
        return 0.0
    if penalty.nonneg:
        return float(max(target.max(), 0.0))
    return float(np.abs(target).max())


def objective(X, u, v, config: SFPCAConfig) -> float:
    """``u' X v - R_u(u) - R_v(v)``."""
    X = _as_array(X)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(u @ X @ v) - penalty_value(config.u_penalty, u) - penalty_value(config.v_penalty, v)


def _warm_start(x, target, penalty):
    # best multiple c*x of the previous factor for the regression objective
    c = float(target @ x) - penalty_value(penalty, x)
    return max(c, 0.0) * x


def _zero_factor(n, p, trace, n_outer=0, inner_ok=True):
    return RankOneFactor(0.0, np.zeros(n), np.zeros(p), trace, True, True, 0.0, 0.0,
                         n_outer, inner_ok)


def fit_rank_one(X, config: SFPCAConfig | None = None) -> RankOneFactor:
    """Fit one sparse and smooth factor pair by alternating proximal gradient.

    Parameters
    ----------
    X : DataMatrix or ndarray
        Data, ideally column-centered.
    config : SFPCAConfig
        Penalties, smoothing operators, tolerances and initialization.

    Returns
    -------
    RankOneFactor
        ``objective_trace`` holds the objective at the (feasible) start and
        after every half-step.  A half-step that would lower the objective
        (possible only through inexact inner solves or non-convex penalties)
        is rejected, so the trace never decreases.
    """
    if config is None:
        config = SFPCAConfig()
    if isinstance(X, DataMatrix) and not X.centered:
        logger.warning("data matrix is not column-centered")
    X = _as_array(X)
    n, p = X.shape
    su, sv = config.smooth_ops(n, p)
    pu, pv = config.u_penalty, config.v_penalty

    if not np.any(X):
        return _zero_factor(n, p, [0.0])

    if config.init is None:
        u, v = init_rank1(X)
    else:
        u, v = (np.array(a, dtype=float) for a in config.init)
        if u.shape != (n,) or v.shape != (p,):
            raise DimensionError("supplied initial vectors do not match the data dimensions")
        if not (np.any(u) and np.any(v)):
            raise ValueError("supplied initial vectors must be non-zero")
        u = u / np.linalg.norm(u)
        v = v / np.linalg.norm(v)
    # start on the boundary of the feasible set
    u = rescale(u, su)
    v = rescale(v, sv)

    def obj(a, b):
        val = float(a @ X @ b) - penalty_value(pu, a) - penalty_value(pv, b)
        if not np.isfinite(val):
            raise FloatingPointError(
                f"objective became non-finite (|u|={np.linalg.norm(a)}, |v|={np.linalg.norm(b)})"
            )
        return val

    trace = [obj(u, v)]
    converged = False
    inner_ok = True
    kw = dict(tol=config.inner_tol, max_iter=config.max_inner, accelerate=config.accelerate)
    k = 0
    for k in range(1, config.max_outer + 1):
        f_start = trace[-1]

        target = X @ v
        u_hat, ok = inner_ascent(target, su, pu, _warm_start(u, target, pu), **kw)
        inner_ok &= ok
        u_new = rescale(u_hat, su)
        f_new = obj(u_new, v)
        if f_new >= trace[-1]:
            u = u_new
        else:
            f_new = trace[-1]
        trace.append(f_new)
        if not np.any(u):
            return _zero_factor(n, p, trace, k, inner_ok)

        target = X.T @ u
        v_hat, ok = inner_ascent(target, sv, pv, _warm_start(v, target, pv), **kw)
        inner_ok &= ok
        v_new = rescale(v_hat, sv)
        f_new = obj(u, v_new)
        if f_new >= trace[-1]:
            v = v_new
        else:
            f_new = trace[-1]
        trace.append(f_new)
        if not np.any(v):
            return _zero_factor(n, p, trace, k, inner_ok)

        if abs(f_new - f_start) <= config.outer_tol * max(abs(f_new), np.finfo(float).tiny):
            converged = True
            break

    if not converged:
        warnings.warn(f"rank-one fit did not converge in {config.max_outer} outer iterations",
                      ConvergenceWarning, stacklevel=2)
    u_snorm2, v_snorm2 = su.quad(u), sv.quad(v)
    u = u / np.linalg.norm(u)
    v = v / np.linalg.norm(v)
    u, v = _sign_convention(u, v)
    d = float(u @ X @ v)
    return RankOneFactor(d, u, v, trace, converged, False, u_snorm2, v_snorm2, k, inner_ok)


def deflate(X, f: RankOneFactor):
    """Hotelling deflation ``X - d u v'``; returns the input type."""
    arr = _as_array(X)
    if f.u.shape != (arr.shape[0],) or f.v.shape != (arr.shape[1],):
        raise DimensionError("factor dimensions do not match the data matrix")
    out = arr - f.d * np.outer(f.u, f.v) if not f.zero_solution else arr.copy()
    if isinstance(X, DataMatrix):
        return DataMatrix(out, X.row_labels, X.col_labels)
    return out


def fit(X, K: int, configs: SFPCAConfig | Sequence[SFPCAConfig] | None = None) -> ModelFit:
    """Greedy rank-``K`` fit: ``fit_rank_one`` then ``deflate``, ``K`` times.

    Stops early, with a warning, at the first rank whose fit collapses to
    zero; that factor is not included.
    """
    arr = _as_array(X)
    n, p = arr.shape
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > min(n, p):
        raise DimensionError(f"K={K} exceeds min(n, p)={min(n, p)}")
    if configs is None:
        configs = SFPCAConfig()
    if isinstance(configs, SFPCAConfig):
        configs = [configs] * K
    configs = list(configs)
    if len(configs) != K:
        raise ValueError(f"expected {K} configs, got {len(configs)}")
    if isinstance(X, DataMatrix) and not X.centered:
        logger.warning("data matrix is not column-centered")

    factors, used = [], []
    resid = arr
    for k, cfg in enumerate(configs):
        f = fit_rank_one(resid, cfg)
        if f.zero_solution:
            warnings.warn(f"rank {k + 1} collapsed to a zero solution; stopping at rank {k}",
                          stacklevel=2)
            break
        factors.append(f)
        used.append(cfg)
        resid = deflate(resid, f)
    return ModelFit(factors, resid, used)


def with_init(config: SFPCAConfig, u0, v0) -> SFPCAConfig:
    return replace(config, init=(u0, v0))
