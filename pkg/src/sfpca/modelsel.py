"""Degrees of freedom, BIC and nested penalty selection.

Instead of searching all four levels jointly, the sparsity and smoothness
levels of each side are chosen by BIC inside the alternating half-steps: with
``v`` fixed, every ``(lambda_u, alpha_u)`` candidate is fitted on the
regression target ``X v`` (warm-starting down each lambda path) and the
minimizer of the BIC is adopted before moving to ``v``.  After a few sweeps,
a confirming fit at the frozen levels guarantees a stationary point.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    SFPCAConfig,
    RankOneFactor,
    _as_array,
    fit_rank_one,
    init_rank1,
    inner_ascent,
    rescale,
    sparsity_threshold,
)
from .prox import PenaltySpec
from .structmat import SmoothOperator, StructureMatrix, chain_diff_matrix

logger = logging.getLogger(__name__)

__all__ = ["ParamGrid", "SelectionResult", "df_l1", "bic_score", "nested_select"]

RSS_FLOOR = 1e-300
DF_METHODS = ("stated", "ridge")


@dataclass(frozen=True)
class ParamGrid:
    """Candidate sparsity and smoothness levels for one side.

    With ``relative=True`` the lambdas are fractions of the current
    ``lambda_max = max |target_i|`` and are converted at every half-step.
    """

    lambdas: tuple[float, ...]
    alphas: tuple[float, ...]
    relative: bool = False

    def __post_init__(self):
        for name in ("lambdas", "alphas"):
            vals = tuple(float(x) for x in getattr(self, name))
            if not vals:
                raise ValueError(f"{name} grid is empty")
            if not all(np.isfinite(x) and x >= 0 for x in vals):
                raise ValueError(f"{name} must be finite and non-negative")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, vals)

    @classmethod
    def default(cls) -> ParamGrid:
        """0 plus 10 log-spaced fractions of lambda_max in [1e-3, 1]; 0 plus
        9 log-spaced alphas in [1e-2, 1e2]."""
        return cls(
            (0.0, *np.logspace(-3, 0, 10)),
            (0.0, *np.logspace(-2, 2, 9)),
            relative=True,
        )

    @classmethod
    def single(cls, lam: float, alpha: float) -> ParamGrid:
        return cls((lam,), (alpha,))

    @property
    def size(self) -> int:
        return len(self.lambdas) * len(self.alphas)


@dataclass(eq=False)
class SelectionResult:
    """Outcome of :func:`nested_select`.

    ``bic_table`` holds the candidates scored at the last sweep, ``history``
    those of every sweep.  ``stabilized`` is True when the chosen grid points
    repeated across two consecutive sweeps.
    """

    chosen: dict
    bic_table: list[dict]
    refit: RankOneFactor
    stabilized: bool
    n_sweeps: int
    config: SFPCAConfig
    history: list[dict] = field(default_factory=list)

    def write_bic_csv(self, path) -> None:
        cols = ["side", "lambda", "alpha", "df", "residual", "bic"]
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.bic_table:
                w.writerow([row["side"]] + [repr(float(row[c])) for c in cols[1:]])


def df_l1(u_hat, alpha: float, omega: StructureMatrix | None, method: str = "stated") -> float:
    """Degrees of freedom of an l1 + smoothness regression solution.

    ``method="stated"`` gives ``tr[I_A - alpha * Omega(A, A)]`` over the
    active set ``A`` (this can be negative; callers clamp).  ``"ridge"``
    gives ``tr[(I_A + alpha * Omega(A, A))^-1]``, which lies in ``(0, |A|]``.
    """
    if method not in DF_METHODS:
        raise ValueError(f"unknown df method {method!r}")
    active = np.flatnonzero(np.asarray(u_hat) != 0)
    if active.size == 0:
        return 0.0
    if alpha == 0 or omega is None:
        return float(active.size)
    if method == "stated":
        return float(active.size - alpha * omega.diagonal()[active].sum())
    sub = omega.submatrix(active)
    eig = np.linalg.eigvalsh(np.eye(active.size) + alpha * sub)
    return float(np.sum(1.0 / eig))


def bic_score(residual_target, u_hat, df: float, dim: int | None = None) -> float:
    """``log(||target - u_hat||^2 / (2 dim)) + log(dim) * df / dim``.

    The argument of the logarithm is floored at 1e-300.
    """
    r = np.asarray(residual_target, dtype=float) - np.asarray(u_hat, dtype=float)
    if dim is None:
        dim = r.size
    fit_term = max(float(r @ r) / (2 * dim), RSS_FLOOR)
    return float(np.log(fit_term) + np.log(dim) / dim * df)


def _score_side(side, target, grid, omega, penalty, dim, inner_kw, df_method):
    lam_max = sparsity_threshold(target, penalty.with_lam(0.0) if penalty.kind != "none"
                                 else PenaltySpec("l1", 0.0, penalty.nonneg))
    rows = []
    sols = []
    for ai, alpha in enumerate(grid.alphas):
        smooth = SmoothOperator(alpha, omega if alpha > 0 else None, dim)
        x = np.zeros(dim)
        # descending lambda path, each solve warm-started from the last
        for li in reversed(range(len(grid.lambdas))):
            lam = grid.lambdas[li] * lam_max if grid.relative else grid.lambdas[li]
            x, _ = inner_ascent(target, smooth, penalty.with_lam(lam), start=x, **inner_kw)
            resid = float(np.sum((target - x) ** 2))
            df_raw = df_l1(x, alpha, omega, df_method)
            df = max(df_raw, 0.0)
            if df_raw < 0:
                logger.debug("%s-side df %.3g clamped to 0 (lambda=%g, alpha=%g)",
                             side, df_raw, lam, alpha)
            rows.append({
                "side": side, "lambda": lam, "alpha": alpha, "df": df, "df_raw": df_raw,
                "residual": resid, "bic": bic_score(target, x, df, dim),
                "degenerate": resid / (2 * dim) <= RSS_FLOOR,
                "lambda_index": li, "alpha_index": ai,
            })
            sols.append((x, smooth))
    # saturated fits (zero residual) have a meaningless BIC
    pool = [i for i, r in enumerate(rows) if not r["degenerate"]] or list(range(len(rows)))
    best = min(pool, key=lambda i: (rows[i]["bic"], -rows[i]["lambda"], -rows[i]["alpha"]))
    return best, rows, sols


def nested_select(X, u_grid: ParamGrid | None = None, v_grid: ParamGrid | None = None,
                  config_base: SFPCAConfig | None = None, max_nested: int = 5,
                  df_method: str = "stated", accelerate: bool | None = None) -> SelectionResult:
    """Choose ``(lambda_u, alpha_u, lambda_v, alpha_v)`` by nested BIC, then refit.

    Parameters
    ----------
    X : DataMatrix or ndarray
    u_grid, v_grid : ParamGrid
        Candidates per side; :meth:`ParamGrid.default` when omitted.
    config_base : SFPCAConfig
        Supplies penalty kind, non-negativity, structure matrices (chain second
        differences when absent), tolerances and initialization.  Its levels
        are ignored.
    max_nested : int
        Maximum number of selection sweeps.
    df_method : {"stated", "ridge"}
        Degrees-of-freedom formula, see :func:`df_l1`.
    accelerate : bool, optional
        Momentum for the candidate solves.  Defaults to on for convex
        penalties; it changes speed, not the solutions.
    """
    X = _as_array(X)
    n, p = X.shape
    u_grid = u_grid or ParamGrid.default()
    v_grid = v_grid or ParamGrid.default()
    cfg = config_base or SFPCAConfig(PenaltySpec("l1"), PenaltySpec("l1"))
    if max_nested < 1:
        raise ValueError("max_nested must be at least 1")
    if df_method not in DF_METHODS:
        raise ValueError(f"unknown df method {df_method!r}")

    su0, sv0 = cfg.smooth_ops(n, p)
    omega_u = su0.omega if su0.omega is not None else (
        chain_diff_matrix(n, 2) if max(u_grid.alphas) > 0 else None)
    omega_v = sv0.omega if sv0.omega is not None else (
        chain_diff_matrix(p, 2) if max(v_grid.alphas) > 0 else None)
    pu, pv = cfg.u_penalty, cfg.v_penalty
    if accelerate is None:
        accelerate = pu.is_convex and pv.is_convex
    inner_kw = dict(tol=cfg.inner_tol, max_iter=cfg.max_inner, accelerate=accelerate)

    if not np.any(X):
        u = np.zeros(n)
        v = np.zeros(p)
    elif cfg.init is None:
        u, v = init_rank1(X)
    else:
        u, v = (np.asarray(a, dtype=float) for a in cfg.init)
        u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)

    history = []
    prev_key = None
    stabilized = False
    choice = {"lambda_u": 0.0, "alpha_u": 0.0, "lambda_v": 0.0, "alpha_v": 0.0}
    table = []
    sweep = 0
    for sweep in range(1, max_nested + 1):
        bu, rows_u, sols_u = _score_side("u", X @ v, u_grid, omega_u, pu, n, inner_kw, df_method)
        u = rescale(*sols_u[bu])
        bv, rows_v, sols_v = _score_side("v", X.T @ u, v_grid, omega_v, pv, p, inner_kw, df_method)
        v = rescale(*sols_v[bv])
        choice = {
            "lambda_u": rows_u[bu]["lambda"], "alpha_u": rows_u[bu]["alpha"],
            "lambda_v": rows_v[bv]["lambda"], "alpha_v": rows_v[bv]["alpha"],
        }
        key = tuple(r[k] for r in (rows_u[bu], rows_v[bv])
                    for k in ("lambda_index", "alpha_index"))
        table = rows_u + rows_v
        for r in table:
            history.append({"sweep": sweep, **r})
        logger.info("sweep %d: %s", sweep, choice)
        if key == prev_key:
            stabilized = True
            break
        prev_key = key
        if not (np.any(u) and np.any(v)):
            break

    refit_cfg = replace(
        cfg,
        u_penalty=pu.with_lam(choice["lambda_u"]),
        v_penalty=pv.with_lam(choice["lambda_v"]),
        u_smooth=SmoothOperator(choice["alpha_u"], omega_u if choice["alpha_u"] > 0 else None, n),
        v_smooth=SmoothOperator(choice["alpha_v"], omega_v if choice["alpha_v"] > 0 else None, p),
    )
    refit = fit_rank_one(X, refit_cfg)
    return SelectionResult(choice, table, refit, stabilized, sweep, refit_cfg, history)
