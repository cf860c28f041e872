"""Roughness (structure) matrices and the smoothing operators built on them.

A structure matrix ``Omega`` is a symmetric positive semi-definite matrix whose
quadratic form ``z @ Omega @ z`` measures how rough ``z`` is.  The built-in
kinds are squared finite-difference matrices ``D.T @ D`` along a chain or over
a rectangular grid; anything else can be read from a file.

:class:`SmoothOperator` pairs a structure matrix with a smoothing level
``alpha`` and represents ``S = I + alpha * Omega`` together with a Lipschitz
constant ``L >= lambda_max(S)`` used as the proximal-gradient step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from math import comb
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .exceptions import ConvergenceWarning, DimensionError, StructureMatrixError

__all__ = [
    "LIPSCHITZ_SAFETY",
    "StructureMatrix",
    "SmoothOperator",
    "chain_diff_matrix",
    "grid_diff_matrix",
    "load_structure_matrix",
    "save_structure_matrix",
    "largest_eigenvalue",
]

# Multiplier on the estimated lambda_max so the step 1/L never overshoots.
LIPSCHITZ_SAFETY = 1.01

KINDS = ("chain-diff2", "chain-diff4", "grid-diff2", "user-supplied")


@dataclass(frozen=True, eq=False)
class StructureMatrix:
    """Symmetric PSD roughness matrix.

    Parameters
    ----------
    entries : ndarray or scipy sparse array
        Square symmetric matrix.  Built-in kinds are stored as CSR.
    kind : str
        One of ``chain-diff2``, ``chain-diff4``, ``grid-diff2``,
        ``user-supplied``.
    """

    entries: np.ndarray | sp.sparray
    kind: str = "user-supplied"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown structure kind {self.kind!r}")
        shape = self.entries.shape
        if len(shape) != 2 or shape[0] != shape[1] or shape[0] < 1:
            raise StructureMatrixError(f"structure matrix must be square, got shape {shape}")
        asym = self.entries - self.entries.T
        asym = abs(asym).max() if sp.issparse(asym) else np.abs(asym).max()
        if asym != 0:
            raise StructureMatrixError("structure matrix is not exactly symmetric")

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.entries)

    def dot(self, x):
        return self.entries @ x

    def quad(self, z) -> float:
        """Quadratic form ``z @ Omega @ z``."""
        z = np.asarray(z, dtype=float)
        return float(z @ (self.entries @ z))

    def toarray(self) -> np.ndarray:
        if self.is_sparse:
            return self.entries.toarray()
        return np.array(self.entries, dtype=float)

    def diagonal(self) -> np.ndarray:
        if self.is_sparse:
            return self.entries.diagonal()
        return np.diag(self.entries).copy()

    def submatrix(self, idx) -> np.ndarray:
        """Dense ``Omega[idx][:, idx]``."""
        idx = np.asarray(idx, dtype=np.intp)
        if self.is_sparse:
            return self.entries[idx][:, idx].toarray()
        return np.asarray(self.entries)[np.ix_(idx, idx)]

    @cached_property
    def max_eigenvalue(self) -> float:
        return largest_eigenvalue(self.entries)

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(indptr, indices, data)`` of the CSR form, for compiled loops."""
        m = sp.csr_array(self.entries)
        m.sort_indices()
        return (np.ascontiguousarray(m.indptr, dtype=np.int64),
                np.ascontiguousarray(m.indices, dtype=np.int64),
                np.ascontiguousarray(m.data, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SmoothOperator:
    """``S = I + alpha * Omega`` with a cached step constant.

    ``omega`` may be omitted when ``alpha == 0``; ``dim`` is then required.
    """

    alpha: float = 0.0
    omega: StructureMatrix | None = None
    dim: int | None = None
    lipschitz: float = field(init=False)

    def __post_init__(self):
        alpha = float(self.alpha)
        if not np.isfinite(alpha) or alpha < 0:
            raise ValueError(f"alpha must be a finite non-negative number, got {self.alpha}")
        object.__setattr__(self, "alpha", alpha)
        if self.omega is None:
            if alpha != 0:
                raise ValueError("a structure matrix is required when alpha > 0")
            if self.dim is None or self.dim < 1:
                raise DimensionError("dim is required when no structure matrix is given")
        else:
            if self.dim is not None and self.dim != self.omega.dim:
                raise DimensionError(
                    f"dim={self.dim} does not match structure matrix dim {self.omega.dim}"
                )
            object.__setattr__(self, "dim", self.omega.dim)
        if alpha == 0:
            lip = 1.0
        else:
            # lambda_max(I + a*Omega) = 1 + a*lambda_max(Omega) for PSD Omega
            lip = LIPSCHITZ_SAFETY * (1.0 + alpha * self.omega.max_eigenvalue)
        object.__setattr__(self, "lipschitz", lip)

    @classmethod
    def identity(cls, dim: int) -> SmoothOperator:
        return cls(0.0, None, dim)

    def with_alpha(self, alpha: float) -> SmoothOperator:
        return SmoothOperator(alpha, self.omega, self.dim)

    def apply(self, x):
        """Return ``S @ x``; the input itself when ``alpha == 0``."""
        if self.alpha == 0:
            return x
        return x + self.alpha * (self.omega.entries @ x)

    def quad(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.apply(x))

    def norm(self, x) -> float:
        """Elliptical norm ``sqrt(x @ S @ x)``."""
        return float(np.sqrt(max(self.quad(x), 0.0)))

    def toarray(self) -> np.ndarray:
        eye = np.eye(self.dim)
        if self.alpha == 0:
            return eye
        return eye + self.alpha * self.omega.toarray()


def _difference_operator(p: int, order: int) -> sp.csr_array:
    coeffs = [(-1) ** (order - k) * comb(order, k) for k in range(order + 1)]
    return sp.diags_array(
        [np.full(p - order, float(c)) for c in coeffs],
        offsets=list(range(order + 1)),
        shape=(p - order, p),
        format="csr",
    )


def _chain_omega(p: int, order: int) -> sp.csr_array:
    d = _difference_operator(p, order)
    return sp.csr_array(d.T @ d)


def chain_diff_matrix(p: int, order: int = 2) -> StructureMatrix:
    """Squared finite-difference matrix ``D.T @ D`` along a chain of length ``p``.

    ``D`` is the ``(p - order) x p`` forward-difference operator with the
    stencil ``(1, -2, 1)`` for ``order=2`` or ``(1, -4, 6, -4, 1)`` for
    ``order=4``; boundaries are free.

    Examples
    --------
    >>> chain_diff_matrix(3).toarray()
    array([[ 1., -2.,  1.],
           [-2.,  4., -2.],
           [ 1., -2.,  1.]])
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    if p <= order:
        raise DimensionError(f"chain length p={p} must exceed the difference order {order}")
    return StructureMatrix(_chain_omega(p, order), kind=f"chain-diff{order}")


def grid_diff_matrix(rows: int, cols: int) -> StructureMatrix:
    """Second-difference roughness over a ``rows x cols`` grid.

    Sum of the chain second-difference forms along each row and each column
    of the grid.  Grid cell ``(i, j)`` maps to index ``i * cols + j``.
    """
    if rows < 3 or cols < 3:
        raise DimensionError(f"grid must be at least 3x3, got {rows}x{cols}")
    along_rows = sp.kron(sp.eye_array(rows), _chain_omega(cols, 2))
    along_cols = sp.kron(_chain_omega(rows, 2), sp.eye_array(cols))
    return StructureMatrix(sp.csr_array(along_rows + along_cols), kind="grid-diff2")


def largest_eigenvalue(M, tol: float = 1e-10, max_iter: int = 100_000,
                       seed: int = 0, return_converged: bool = False):
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops when the Rayleigh quotient changes by less than ``tol`` relative.
    The raw estimate is returned; callers using it as a step constant apply
    :data:`LIPSCHITZ_SAFETY` themselves.

    Parameters
    ----------
    M : ndarray, sparse array or LinearOperator
        Symmetric PSD matrix.
    tol : float
        Relative tolerance on the Rayleigh quotient.
    max_iter : int
        Iteration cap.  Hitting it emits a :class:`ConvergenceWarning`.
    seed : int
        Seed for the random start vector.
    return_converged : bool
        Also return whether the tolerance was met.
    """
    n = M.shape[0]
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    rho = 0.0
    converged = False
    for _ in range(max_iter):
        y = M @ x
        rho_new = float(x @ y)
        ynorm = np.linalg.norm(y)
        if ynorm == 0.0:
            rho, converged = 0.0, True
            break
        x = y / ynorm
        if abs(rho_new - rho) <= tol * abs(rho_new):
            rho, converged = rho_new, True
            break
        rho = rho_new
    if not converged:
        warnings.warn(
            f"power iteration did not reach tol={tol} in {max_iter} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )
    if return_converged:
        return rho, converged
    return rho


def _read_matrix_file(path: Path) -> np.ndarray:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StructureMatrixError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise StructureMatrixError(f"{path} is empty")
    head = lines[0].strip()
    try:
        if head.startswith("#"):
            tokens = head.lstrip("#").split()
            if len(tokens) != 2 or tokens[0].lower() != "coo":
                raise StructureMatrixError(f"unrecognised header {head!r} in {path}")
            dim = int(tokens[1])
            triplets = np.loadtxt(lines[1:], delimiter=",", ndmin=2) if lines[1:] \
                else np.empty((0, 3))
            if triplets.shape[1] != 3:
                raise StructureMatrixError("coordinate format needs row,col,value triplets")
            rows, cols = triplets[:, 0], triplets[:, 1]
            if np.any(rows != np.round(rows)) or np.any(cols != np.round(cols)):
                raise StructureMatrixError("coordinate indices must be integers")
            rows, cols = rows.astype(np.intp), cols.astype(np.intp)
            if rows.size and (min(rows.min(), cols.min()) < 0 or max(rows.max(), cols.max()) >= dim):
                raise StructureMatrixError(f"coordinate index out of range for dim {dim}")
            out = np.zeros((dim, dim))
            np.add.at(out, (rows, cols), triplets[:, 2])
            return out
        return np.loadtxt(lines, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise StructureMatrixError(f"cannot parse {path}: {exc}") from exc


def load_structure_matrix(path) -> StructureMatrix:
    """Read a user-supplied structure matrix.

    Two plain-text formats are accepted: a dense comma-separated matrix, or
    a coordinate list whose first line is ``# coo <dim>`` followed by
    ``row,col,value`` lines with 0-based indices (duplicates are summed).

    The matrix is symmetrized as ``(Omega + Omega.T) / 2`` after checking that
    the asymmetry is within 1e-8 relative, and rejected when its smallest
    eigenvalue is below ``-1e-8 * lambda_max``.
    """
    path = Path(path)
    omega = _read_matrix_file(path)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise StructureMatrixError(f"{path} does not hold a square matrix (shape {omega.shape})")
    if not np.all(np.isfinite(omega)):
        raise StructureMatrixError(f"{path} contains non-finite entries")
    scale = np.abs(omega).max()
    if np.abs(omega - omega.T).max() > 1e-8 * max(scale, np.finfo(float).tiny):
        raise StructureMatrixError(f"{path} is not symmetric")
    omega = (omega + omega.T) / 2
    n = omega.shape[0]
    lo = scipy.linalg.eigvalsh(omega, subset_by_index=[0, 0])[0]
    hi = scipy.linalg.eigvalsh(omega, subset_by_index=[n - 1, n - 1])[0]
    if lo < -1e-8 * max(abs(hi), np.finfo(float).tiny):
        raise StructureMatrixError(
            f"{path} is not positive semi-definite (smallest eigenvalue {lo:.3g})"
        )
    probes = np.random.default_rng(0).standard_normal((16, n))
    if np.any(np.einsum("ij,jk,ik->i", probes, omega, probes)
              < -1e-10 * np.einsum("ij,ij->i", probes, probes) * max(abs(hi), 1.0)):
        raise StructureMatrixError(f"{path} failed the probe-vector PSD check")
    return StructureMatrix(omega, kind="user-supplied")


def save_structure_matrix(omega: StructureMatrix, path, fmt: str = "csv") -> None:
    """Write ``omega`` as dense CSV (``fmt="csv"``) or coordinate list (``"coo"``)."""
    path = Path(path)
    if fmt == "csv":
        np.savetxt(path, omega.toarray(), delimiter=",", fmt="%.17g", encoding="utf-8")
    elif fmt == "coo":
        coo = sp.coo_array(omega.entries)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# coo {omega.dim}\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r},{c},{v:.17g}\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
