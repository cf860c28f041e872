"""Synthetic low-rank data, recovery metrics and ROC sweeps.

Data follow ``X = sum_k d_k u_k v_k' + E`` with ``E_ij ~ N(0, 1)``.

Signal shapes (frozen; ``m`` is the support size, placed centrally)

``sine-<T>``
    ``m = round(0.69 p)`` (31% zeros).  ``sin(pi * h * (j + 0.5) / m)`` for
    ``j < m`` where ``h`` is the odd integer nearest ``2 m / T``, so the
    curve spans ``h`` half periods of length close to ``T`` samples and
    meets zero at both support ends.  ``h`` odd keeps every in-support
    sample non-zero.
``gauss-pulse-<f>``
    ``m = round(0.75 p)`` (25% zeros).  ``exp(-x^2 / (2 s^2)) *
    sin(2 pi f x / m)`` with ``x = j + 0.75 - m / 2`` and ``s = m / 6``,
    i.e. ``f`` carrier cycles across the support.
``grid-smooth``
    Two isotropic Gaussian bumps of width ``0.1 * min(rows, cols)`` centred
    at 30% and 70% of each axis, set to zero below 1% of the peak.
``grid-edged``
    Indicator of rows ``[0.55, 0.85)`` and columns ``[0.15, 0.45)`` of the
    grid (fractions floored to cells).

Random numbers come from Philox4x64-10 with key ``(seed, 0)``; block ``i``
(``i = 1, 2, ...``) encrypts the counter ``(i, 0, 0, 0)`` and yields four
words in order, as numpy's ``Philox`` does.  Each 64-bit output ``w``
becomes ``U = ((w >> 11) + 0.5) / 2**53`` and a standard normal
``Z = Phi^-1(U)``.  Draws are consumed row-major: first
the ``n x K`` Gaussian matrix whose left singular vectors give ``u`` (when
random), then the ``n x p`` noise.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .core import SFPCAConfig, _sign_convention, fit_rank_one, init_rank1
from .prox import PenaltySpec
from .structmat import SmoothOperator, chain_diff_matrix

__all__ = [
    "SimScenario",
    "SimTruth",
    "EvalReport",
    "philox_normal",
    "gen_signal",
    "gen_grid_signals",
    "gen_data",
    "svd_baseline",
    "score",
    "roc_sweep",
    "SUPPORT_TOL",
]

SUPPORT_TOL = 1e-10

SIGNAL_KINDS = ("sine-60", "gauss-pulse-7", "sine-30", "grid-smooth", "grid-edged")


def philox_normal(seed: int, size) -> np.ndarray:
    """Standard normals from Philox keyed by ``seed`` via the inverse CDF."""
    bitgen = np.random.Philox(key=int(seed))
    count = int(np.prod(size))
    raw = bitgen.random_raw(count)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53
    return ndtri(u).reshape(size)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _nearest_odd(x: float) -> int:
    return max(1, 2 * _round_half_up((x - 1) / 2) + 1)


def gen_signal(kind: str, p: int = 200) -> np.ndarray:
    """Unit-norm sparse signal of the given kind (see module docstring)."""
    if p < 10:
        raise ValueError(f"p must be at least 10, got {p}")
    m_sine = re.fullmatch(r"sine-(\d+(?:\.\d+)?)", kind)
    m_pulse = re.fullmatch(r"gauss-pulse-(\d+(?:\.\d+)?)", kind)
    v = np.zeros(p)
    if m_sine:
        period = float(m_sine.group(1))
        m = _round_half_up(0.69 * p)
        h = _nearest_odd(2 * m / period)
        j = np.arange(m)
        seg = np.sin(np.pi * h * (j + 0.5) / m)
    elif m_pulse:
        cycles = float(m_pulse.group(1))
        m = _round_half_up(0.75 * p)
        x = np.arange(m) + 0.75 - m / 2
        seg = np.exp(-(x**2) / (2 * (m / 6) ** 2)) * np.sin(2 * np.pi * cycles * x / m)
    else:
        raise ValueError(f"unknown signal kind {kind!r}")
    start = (p - m) // 2
    v[start:start + m] = seg
    if np.count_nonzero(np.abs(v) > SUPPORT_TOL) != m:
        raise ValueError(f"signal {kind!r} has an in-support zero at p={p}")
    return v / np.linalg.norm(v)


def gen_grid_signals(rows: int = 25, cols: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Spatial factors on a grid, vectorized row-major.

    Returns the two-bump smooth factor and the block-indicator factor.
    """
    if rows < 5 or cols < 5:
        raise ValueError(f"grid must be at least 5x5, got {rows}x{cols}")
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    width = 0.1 * min(rows, cols)
    smooth = np.zeros((rows, cols))
    for frac in (0.3, 0.7):
        ci, cj = frac * (rows - 1), frac * (cols - 1)
        smooth += np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * width**2))
    smooth[smooth < 0.01 * smooth.max()] = 0.0
    edged = np.zeros((rows, cols))
    edged[int(0.55 * rows):int(0.85 * rows), int(0.15 * cols):int(0.45 * cols)] = 1.0
    u1 = smooth.ravel()
    u2 = edged.ravel()
    return u1 / np.linalg.norm(u1), u2 / np.linalg.norm(u2)


@dataclass(frozen=True)
class SimScenario:
    """A low-rank simulation setting.

    ``scales=None`` uses ``n/4, n/5, n/6`` for random left factors and
    ``n/6, n/7`` for grid left factors.  ``u_kinds=None`` draws random
    orthonormal left factors.
    """

    n: int = 100
    p: int = 200
    v_kinds: tuple[str, ...] = ("sine-60", "gauss-pulse-7", "sine-30")
    scales: tuple[float, ...] | None = None
    u_kinds: tuple[str, ...] | None = None
    grid_shape: tuple[int, int] = (25, 25)
    seed: int = 0

    def __post_init__(self):
        K = len(self.v_kinds)
        if K < 1:
            raise ValueError("at least one signal is required")
        for kind in self.v_kinds:
            gen_signal(kind, self.p)
        if self.u_kinds is not None:
            bad = [k for k in self.u_kinds if k not in ("grid-smooth", "grid-edged")]
            if bad:
                raise ValueError(f"unknown grid signal kind(s) {bad}")
            if len(self.u_kinds) != K:
                raise ValueError("u_kinds and v_kinds must have equal length")
            if self.n != self.grid_shape[0] * self.grid_shape[1]:
                raise ValueError("n must equal the number of grid cells for grid factors")
        if self.scales is not None:
            s = tuple(float(x) for x in self.scales)
            if len(s) != K or any(x <= 0 for x in s) or any(b > a for a, b in zip(s, s[1:])):
                raise ValueError("scales must be positive, non-increasing, one per signal")
            object.__setattr__(self, "scales", s)

    @property
    def rank(self) -> int:
        return len(self.v_kinds)

    def resolved_scales(self) -> tuple[float, ...]:
        if self.scales is not None:
            return self.scales
        divisors = (6, 7, 8, 9) if self.u_kinds is not None else (4, 5, 6, 7, 8, 9)
        if self.rank > len(divisors):
            raise ValueError("give scales explicitly for this many signals")
        return tuple(self.n / k for k in divisors[: self.rank])

    def with_seed(self, seed: int) -> SimScenario:
        return SimScenario(self.n, self.p, self.v_kinds, self.scales, self.u_kinds,
                           self.grid_shape, seed)

    @classmethod
    def rank3(cls, n: int = 100, seed: int = 0) -> SimScenario:
        return cls(n=n, seed=seed)

    @classmethod
    def rank1(cls, kind: str = "sine-60", n: int = 100, d: float | None = None,
              seed: int = 0) -> SimScenario:
        return cls(n=n, v_kinds=(kind,), scales=(n / 2 if d is None else d,), seed=seed)

    @classmethod
    def two_way(cls, seed: int = 0, grid_shape=(25, 25)) -> SimScenario:
        return cls(n=grid_shape[0] * grid_shape[1], v_kinds=("sine-60", "gauss-pulse-7"),
                   u_kinds=("grid-smooth", "grid-edged"), grid_shape=tuple(grid_shape),
                   seed=seed)

    def to_dict(self) -> dict:
        return {"n": self.n, "p": self.p, "v_kinds": list(self.v_kinds),
                "u_kinds": None if self.u_kinds is None else list(self.u_kinds),
                "scales": list(self.resolved_scales()), "grid_shape": list(self.grid_shape),
                "seed": self.seed}


@dataclass(eq=False)
class SimTruth:
    d: np.ndarray
    U: np.ndarray
    V: np.ndarray

    @property
    def signal(self) -> np.ndarray:
        return (self.U * self.d) @ self.V.T

    @property
    def v_supports(self) -> list[np.ndarray]:
        return [np.abs(self.V[:, k]) > SUPPORT_TOL for k in range(self.V.shape[1])]

    @property
    def u_supports(self) -> list[np.ndarray]:
        return [np.abs(self.U[:, k]) > SUPPORT_TOL for k in range(self.U.shape[1])]


def gen_data(scenario: SimScenario) -> tuple[np.ndarray, SimTruth]:
    """Seeded realization ``(X, truth)`` of ``scenario``."""
    n, p, K = scenario.n, scenario.p, scenario.rank
    V = np.column_stack([gen_signal(k, p) for k in scenario.v_kinds])
    d = np.array(scenario.resolved_scales())
    draws = philox_normal(scenario.seed, (n * K + n * p,)) if scenario.u_kinds is None \
        else philox_normal(scenario.seed, (n * p,))
    if scenario.u_kinds is None:
        G = draws[: n * K].reshape(n, K)
        U, _, _ = np.linalg.svd(G, full_matrices=False)
        for k in range(K):
            U[:, k] = _sign_convention(np.zeros(1), U[:, k])[1]
        noise = draws[n * K:].reshape(n, p)
    else:
        grid = dict(zip(("grid-smooth", "grid-edged"), gen_grid_signals(*scenario.grid_shape)))
        try:
            U = np.column_stack([grid[k] for k in scenario.u_kinds])
        except KeyError as exc:
            raise ValueError(f"unknown grid signal kind {exc.args[0]!r}") from None
        noise = draws.reshape(n, p)
    truth = SimTruth(d, U, V)
    return truth.signal + noise, truth


def svd_baseline(X, K: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``K`` singular triplets ``(d, U, V)`` of ``X``."""
    U, s, Vt = np.linalg.svd(np.asarray(X, dtype=float), full_matrices=False)
    return s[:K], U[:, :K], Vt[:K].T


@dataclass(eq=False)
class EvalReport:
    """Recovery metrics; ``tp``/``fp``/``rel_angle`` average the factors.

    ``rel_angle`` and ``rse`` are None when no SVD baseline was supplied.
    """

    tp: float
    fp: float
    rel_angle: float | None
    rse: float | None
    per_factor: list[dict] = field(default_factory=list)
    baseline_missing: bool = False

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "rel_angle": self.rel_angle, "rse": self.rse,
                "baseline_missing": self.baseline_missing, "per_factor": self.per_factor}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _rates(est, support):
    found = np.abs(est) > SUPPORT_TOL
    k = int(support.sum())
    tp = np.count_nonzero(found & support) / k if k else 0.0
    neg = support.size - k
    fp = np.count_nonzero(found & ~support) / neg if neg else 0.0
    return tp, fp


def score(estimate, truth: SimTruth, X=None, svd_baseline=None, side: str = "v") -> EvalReport:
    """Compare estimated factors with the truth, matched by extraction order.

    Parameters
    ----------
    estimate : sequence of RankOneFactor (or a ModelFit)
    truth : SimTruth
    X : unused, accepted for call-site symmetry with the baseline
    svd_baseline : (d, U, V) from :func:`svd_baseline`, optional
    side : "v" or "u"
        Which factor the support and angle metrics refer to.
    """
    factors = list(getattr(estimate, "factors", estimate))
    K = truth.V.shape[1]
    true_f = truth.V if side == "v" else truth.U
    dim = true_f.shape[0]
    est_hat = np.zeros_like(truth.signal)
    for f in factors:
        est_hat += f.d * np.outer(f.u, f.v)
    per = []
    for k in range(K):
        vstar = true_f[:, k]
        if k < len(factors):
            vhat = factors[k].v if side == "v" else factors[k].u
        else:
            vhat = np.zeros(dim)
        tp, fp = _rates(vhat, np.abs(vstar) > SUPPORT_TOL)
        row = {"factor": k + 1, "tp": tp, "fp": fp}
        if svd_baseline is not None:
            base = svd_baseline[2 if side == "v" else 1][:, k]
            den = 1.0 - abs(float(base @ vstar))
            num = 1.0 - abs(float(vhat @ vstar))
            row["rel_angle"] = num / den if den > 0 else float("inf") if num > 0 else 0.0
        per.append(row)
    rel_angle = rse = None
    if svd_baseline is not None:
        rel_angle = float(np.mean([r["rel_angle"] for r in per]))
        d_s, U_s, V_s = svd_baseline
        x_svd = (U_s[:, :K] * d_s[:K]) @ V_s[:, :K].T
        den = float(np.sum((truth.signal - x_svd) ** 2))
        rse = float(np.sum((truth.signal - est_hat) ** 2)) / den
    return EvalReport(
        tp=float(np.mean([r["tp"] for r in per])),
        fp=float(np.mean([r["fp"] for r in per])),
        rel_angle=rel_angle,
        rse=rse,
        per_factor=per,
        baseline_missing=svd_baseline is None,
    )


def _auc(fp, tp) -> float:
    pts = sorted(set(zip(fp, tp)) | {(0.0, 0.0), (1.0, 1.0)})
    xs = np.array([q[0] for q in pts])
    ys = np.array([q[1] for q in pts])
    # several tp values at one fp: the curve steps through them
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2))


def roc_sweep(scenario: SimScenario, alphas=(0.0, 10.0), lambda_path=None,
              replicates: int = 10, config_base: SFPCAConfig | None = None) -> dict:
    """ROC of support recovery for ``v`` along a sparsity path, per smoothness.

    ``lambda_path`` holds fractions of ``lambda_max = max |X' u0|`` with
    ``u0`` the SVD start of each replicate (default 41 points on [0, 1]).
    Every fit starts from the SVD pair, so each point depends on its level
    only and the fraction 1 always yields the empty support.
    Replicate ``r`` uses seed ``scenario.seed + r``.

    Returns a dict with ``long`` rows (alpha, lambda, replicate, tp, fp),
    the replicate-averaged ``curve`` per alpha and ``auc`` per alpha (mean of
    the per-replicate areas), plus ``excluded`` replicate failures.
    """
    if scenario.rank != 1:
        raise ValueError("ROC sweeps need a rank-one scenario")
    lambda_path = np.linspace(0.0, 1.0, 41) if lambda_path is None else np.asarray(lambda_path)
    cfg0 = config_base or SFPCAConfig()
    p, n = scenario.p, scenario.n
    omega = chain_diff_matrix(p, 2)
    long_rows, excluded = [], []
    per_rep_auc = {float(a): [] for a in alphas}
    for r in range(replicates):
        X, truth = gen_data(scenario.with_seed(scenario.seed + r))
        support = truth.v_supports[0]
        u0, v0 = init_rank1(X)
        lam_max = float(np.abs(X.T @ u0).max())
        for a in alphas:
            a = float(a)
            sv = SmoothOperator(a, omega if a > 0 else None, p)
            fps, tps, rows = [], [], []
            try:
                for frac in lambda_path:
                    cfg = SFPCAConfig(
                        u_penalty=PenaltySpec("none"),
                        v_penalty=PenaltySpec(cfg0.v_penalty.kind if cfg0.v_penalty.kind != "none"
                                              else "l1", frac * lam_max, cfg0.v_penalty.nonneg,
                                              cfg0.v_penalty.a),
                        u_smooth=SmoothOperator.identity(n), v_smooth=sv,
                        outer_tol=cfg0.outer_tol, inner_tol=cfg0.inner_tol,
                        max_outer=cfg0.max_outer, max_inner=cfg0.max_inner,
                        init=(u0, v0), accelerate=cfg0.accelerate,
                    )
                    f = fit_rank_one(X, cfg)
                    tp, fp = _rates(f.v, support)
                    tps.append(tp)
                    fps.append(fp)
                    rows.append({"alpha": a, "lambda": float(frac), "replicate": r,
                                      "tp": tp, "fp": fp})
            except (FloatingPointError, ValueError) as exc:
                excluded.append({"replicate": r, "alpha": a, "error": str(exc)})
                continue
            long_rows.extend(rows)
            per_rep_auc[a].append(_auc(fps, tps))
    curve = {}
    for a in per_rep_auc:
        rows = [q for q in long_rows if q["alpha"] == a]
        curve[a] = [
            {"lambda": float(frac),
             "tp": float(np.mean([q["tp"] for q in rows if q["lambda"] == float(frac)])),
             "fp": float(np.mean([q["fp"] for q in rows if q["lambda"] == float(frac)]))}
            for frac in lambda_path
        ] if rows else []
    auc = {a: float(np.mean(v)) if v else float("nan") for a, v in per_rep_auc.items()}
    return {"long": long_rows, "curve": curve, "auc": auc, "excluded": excluded,
            "lambda_path": [float(x) for x in lambda_path]}
