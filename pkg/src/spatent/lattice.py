"""Regular-lattice geometry, neighbourhood graphs, and CAR precision matrices.

The precision of the latent field is Q = tau * (D - rho * A), where A is the
0/1 adjacency matrix of the chosen neighbourhood scheme and D the diagonal
matrix of its row sums.  Q is symmetric positive definite for tau > 0 and
|rho| < 1, which is what the factorization and log-determinant routines below
rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee


class NotPositiveDefiniteError(ValueError):
    """Raised when a matrix expected to be SPD fails its Cholesky pivot test."""


@dataclass(frozen=True)
class GridSpec:
    """Rectangular lattice of rows x cols cells, indexed row-major."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.rows}x{self.cols}")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def index_of(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ValueError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def coords_of(self, index: int) -> tuple[int, int]:
        if not (0 <= index < self.n):
            raise ValueError(f"index {index} outside grid of {self.n} cells")
        return divmod(index, self.cols)


class NeighbourhoodScheme(Enum):
    """Neighbourhood structures on the lattice.

    FOUR_NEAREST: the 4 cells sharing an edge.
    TWELVE_NEAREST: two consecutive cells in each cardinal direction plus the
    four diagonal cells at offset (+-1, +-1).
    """

    FOUR_NEAREST = "4nn"
    TWELVE_NEAREST = "12nn"

    @property
    def offsets(self) -> tuple[tuple[int, int], ...]:
        if self is NeighbourhoodScheme.FOUR_NEAREST:
            return ((0, 1), (0, -1), (1, 0), (-1, 0))
        return (
            (0, 1), (0, -1), (0, 2), (0, -2),
            (1, 0), (-1, 0), (2, 0), (-2, 0),
            (1, 1), (1, -1), (-1, 1), (-1, -1),
        )

    @classmethod
    def parse(cls, name: str) -> "NeighbourhoodScheme":
        for scheme in cls:
            if scheme.value == name:
                return scheme
        raise ValueError(f"unknown neighbourhood scheme {name!r}; use '4nn' or '12nn'")


def build_adjacency(grid: GridSpec, scheme: NeighbourhoodScheme) -> sp.csr_matrix:
    """Sparse symmetric 0/1 adjacency matrix of the lattice neighbourhood graph.

    Boundary cells keep truncated neighbourhoods: no wraparound.
    """
    rows = np.repeat(np.arange(grid.rows), grid.cols)
    cols = np.tile(np.arange(grid.cols), grid.rows)
    src, dst = [], []
    for dr, dc in scheme.offsets:
        r2, c2 = rows + dr, cols + dc
        ok = (r2 >= 0) & (r2 < grid.rows) & (c2 >= 0) & (c2 < grid.cols)
        src.append(rows[ok] * grid.cols + cols[ok])
        dst.append(r2[ok] * grid.cols + c2[ok])
    u = np.concatenate(src)
    v = np.concatenate(dst)
    A = sp.csr_matrix((np.ones(len(u)), (u, v)), shape=(grid.n, grid.n))
    A.sum_duplicates()
    return A


def degree_matrix(A: sp.spmatrix) -> np.ndarray:
    """Row sums of A as a vector (the diagonal of D)."""
    return np.asarray(A.sum(axis=1)).ravel()


@dataclass(frozen=True)
class PrecisionMatrix:
    """Q = tau * (D - rho * A) with its parameters."""

    matrix: sp.csr_matrix
    tau: float
    rho: float

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def build_precision(A: sp.spmatrix, degrees: np.ndarray, tau: float, rho: float) -> PrecisionMatrix:
    """Assemble the CAR precision Q = tau * (D - rho * A).

    tau must be positive and rho strictly inside (-1, 1); at |rho| = 1 the
    matrix D - rho*A is singular or indefinite.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not abs(rho) < 1:
        raise ValueError(f"singular or indefinite precision: rho={rho} outside (-1, 1)")
    Q = tau * (sp.diags(degrees) - rho * A)
    return PrecisionMatrix(matrix=Q.tocsr(), tau=float(tau), rho=float(rho))


class CholeskyFactor:
    """Banded Cholesky factor of a sparse SPD matrix under a band-reducing permutation.

    Stores L with P Q P' = L L', where P is the reverse Cuthill-McKee
    permutation.  Solves and sampling run on LAPACK banded kernels.
    """

    def __init__(self, Q: sp.spmatrix):
        Q = sp.csr_matrix(Q)
        n = Q.shape[0]
        perm = np.asarray(reverse_cuthill_mckee(Q, symmetric_mode=True))
        Qp = Q[perm][:, perm].tocoo()
        bandwidth = int(np.max(np.abs(Qp.row - Qp.col))) if Qp.nnz else 0
        band = np.zeros((bandwidth + 1, n))
        lower = Qp.row >= Qp.col
        band[Qp.row[lower] - Qp.col[lower], Qp.col[lower]] = Qp.data[lower]
        try:
            factor = sla.cholesky_banded(band, lower=True)
        except sla.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"not positive definite: {exc}") from exc
        if np.any(factor[0] <= 0):
            raise NotPositiveDefiniteError("not positive definite: nonpositive pivot")
        self.n = n
        self.bandwidth = bandwidth
        self.permutation = perm
        self._lower_band = factor
        # same factor laid out for solves against L'
        upper = np.zeros_like(factor)
        for k in range(bandwidth + 1):
            upper[bandwidth - k, k:] = factor[k, : n - k]
        self._upper_band = upper

    def log_det(self) -> float:
        """log det Q = 2 * sum(log diag L)."""
        return float(2.0 * np.log(self._lower_band[0]).sum())

    def sample_from_noise(self, z: np.ndarray) -> np.ndarray:
        """Map standard-normal noise z to a draw with covariance Q^{-1}.

        Solves L' y = z in the permuted frame and scatters back, so the zero
        vector maps to the zero vector and cov(out) = Q^{-1} exactly.
        """
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n,):
            raise ValueError(f"noise length {z.shape} does not match n={self.n}")
        y = sla.solve_banded((0, self.bandwidth), self._upper_band, z)
        out = np.empty(self.n)
        out[self.permutation] = y
        return out

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve Q x = b."""
        b = np.asarray(b, dtype=float)
        w = sla.solve_banded((self.bandwidth, 0), self._lower_band, b[self.permutation])
        y = sla.solve_banded((0, self.bandwidth), self._upper_band, w)
        out = np.empty(self.n)
        out[self.permutation] = y
        return out

    def dense_factor(self) -> np.ndarray:
        """Dense lower-triangular L (permuted frame); intended for small n."""
        L = np.zeros((self.n, self.n))
        for k in range(self.bandwidth + 1):
            idx = np.arange(self.n - k)
            L[idx + k, idx] = self._lower_band[k, : self.n - k]
        return L

    def reconstruction_error(self, Q: sp.spmatrix) -> float:
        """max |L L' - P Q P'| / max |Q|, for factorization checks."""
        Qp = sp.csr_matrix(Q)[self.permutation][:, self.permutation].toarray()
        L = self.dense_factor()
        return float(np.abs(L @ L.T - Qp).max() / np.abs(Qp).max())


def sparse_cholesky(Q: PrecisionMatrix | sp.spmatrix) -> CholeskyFactor:
    """Factor a precision matrix; raises NotPositiveDefiniteError if any pivot fails."""
    matrix = Q.matrix if isinstance(Q, PrecisionMatrix) else Q
    return CholeskyFactor(matrix)


def normalized_adjacency_eigenvalues(A: sp.spmatrix, degrees: np.ndarray) -> np.ndarray:
    """Eigenvalues of D^{-1/2} A D^{-1/2}, clipped to [-1, 1].

    The clip removes round-off excursions beyond the theoretical range; the
    extreme eigenvalue 1 is attained exactly on every connected lattice.
    """
    scale = 1.0 / np.sqrt(degrees)
    M = (A.multiply(scale[:, None])).multiply(scale[None, :]).toarray()
    return np.clip(np.linalg.eigvalsh(M), -1.0, 1.0)


@lru_cache(maxsize=32)
def lattice_spectrum(rows: int, cols: int, scheme: NeighbourhoodScheme) -> np.ndarray:
    """Cached generalized adjacency spectrum for a lattice, keyed by shape and scheme.

    The MCMC evaluates the log determinant at every rho proposal; this makes
    that evaluation O(n) after a one-off dense eigendecomposition.
    """
    grid = GridSpec(rows, cols)
    A = build_adjacency(grid, scheme)
    eigs = normalized_adjacency_eigenvalues(A, degree_matrix(A))
    eigs.setflags(write=False)
    return eigs


def log_det_precision(
    degrees: np.ndarray,
    A: sp.spmatrix,
    tau: float,
    rho: float,
    eigenvalues: np.ndarray | None = None,
) -> float:
    """log det[tau (D - rho A)] via the generalized adjacency spectrum.

    Equals n*log(tau) + sum(log d_u) + sum(log(1 - rho*lambda_k)) with
    lambda_k the eigenvalues of D^{-1/2} A D^{-1/2}.  Pass precomputed
    eigenvalues to avoid the dense eigendecomposition.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not abs(rho) < 1:
        raise ValueError(f"singular or indefinite precision: rho={rho} outside (-1, 1)")
    if eigenvalues is None:
        eigenvalues = normalized_adjacency_eigenvalues(A, degrees)
    n = len(degrees)
    return float(n * np.log(tau) + np.log(degrees).sum() + np.log1p(-rho * eigenvalues).sum())


def write_edge_list(A: sp.spmatrix, path) -> None:
    """Export adjacency as text: one '1-based u v' line per undirected edge."""
    coo = sp.coo_matrix(A)
    mask = coo.row < coo.col
    order = np.lexsort((coo.col[mask], coo.row[mask]))
    u = coo.row[mask][order] + 1
    v = coo.col[mask][order] + 1
    lines = "".join(f"{a} {b}\n" for a, b in zip(u, v))
    with open(path, "w") as fh:
        fh.write(lines)
