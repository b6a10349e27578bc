"""Synthetic binary fields on a lattice.

Two generators: the latent-Gaussian CAR model (logit p_u = beta0 + phi_u with
phi ~ MVN(0, [tau(D - rho A)]^{-1})) and the centered autologistic model
(logit p_u = beta0 + eta * sum over neighbours of (x_i - mu), mu = expit(beta0)).
Fields are coded {0, 1} with 1 the "success" category.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logit

from .lattice import (
    CholeskyFactor,
    GridSpec,
    NeighbourhoodScheme,
    build_adjacency,
    build_precision,
    degree_matrix,
    sparse_cholesky,
)

GIBBS_BURNIN_FLOOR = 1_000


@dataclass
class BinaryField:
    """One 0/1 realization per lattice cell, row-major."""

    grid: GridSpec
    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x)
        if self.x.shape != (self.grid.n,):
            raise ValueError(f"field length {self.x.shape} does not match grid n={self.grid.n}")
        if not np.isin(self.x, (0, 1)).all():
            raise ValueError("field entries must be 0 or 1")
        self.x = self.x.astype(np.int8)

    def as_grid(self) -> np.ndarray:
        return self.x.reshape(self.grid.rows, self.grid.cols)


def sample_gmrf(chol: CholeskyFactor, rng: np.random.Generator) -> np.ndarray:
    """Exact draw phi ~ MVN(0, Q^{-1}) from a factored precision."""
    return chol.sample_from_noise(rng.standard_normal(chol.n))


def bernoulli_field(grid: GridSpec, beta0: float, phi: np.ndarray, rng: np.random.Generator) -> BinaryField:
    """Independent Bernoulli draws with logit(p_u) = beta0 + phi_u."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (grid.n,):
        raise ValueError(f"phi length {phi.shape} does not match grid n={grid.n}")
    p = expit(beta0 + phi)
    return BinaryField(grid=grid, x=(rng.random(grid.n) < p).astype(np.int8))


@dataclass(frozen=True)
class AutologisticParams:
    """Centered autologistic with a single shared dependence parameter."""

    grid: GridSpec
    scheme: NeighbourhoodScheme
    beta0: float
    eta: float


def _colour_classes(A: sp.csr_matrix) -> list[np.ndarray]:
    """Greedy graph colouring in index order; same-colour cells are non-adjacent."""
    n = A.shape[0]
    indptr, indices = A.indptr, A.indices
    colour = np.full(n, -1, dtype=np.int64)
    for u in range(n):
        taken = {colour[v] for v in indices[indptr[u]:indptr[u + 1]] if colour[v] >= 0}
        c = 0
        while c in taken:
            c += 1
        colour[u] = c
    return [np.flatnonzero(colour == c) for c in range(colour.max() + 1)]


class AutologisticSampler:
    """Gibbs sampler for the centered autologistic model.

    A sweep visits every cell exactly once in a fixed colour-block schedule:
    all cells of one colour update simultaneously (they are conditionally
    independent given the rest), colours in ascending order.
    """

    def __init__(self, params: AutologisticParams, rng: np.random.Generator,
                 init: np.ndarray | None = None):
        self.params = params
        self.rng = rng
        A = build_adjacency(params.grid, params.scheme)
        self._classes = _colour_classes(A)
        self._class_rows = [A[idx] for idx in self._classes]
        self._mu = float(expit(params.beta0))
        if init is None:
            self._x = (rng.random(params.grid.n) < self._mu).astype(float)
        else:
            self._x = np.asarray(init, dtype=float).copy()

    @property
    def field(self) -> BinaryField:
        return BinaryField(grid=self.params.grid, x=self._x.astype(np.int8))

    def sweep(self) -> None:
        beta0, eta = self.params.beta0, self.params.eta
        for idx, rows in zip(self._classes, self._class_rows):
            centred_sum = rows @ (self._x - self._mu)
            p = expit(beta0 + eta * centred_sum)
            self._x[idx] = self.rng.random(len(idx)) < p


def gibbs_autologistic(params: AutologisticParams, sweeps: int, rng: np.random.Generator) -> BinaryField:
    """Run systematic Gibbs sweeps and return the final field.

    sweeps must be at least the burn-in floor of 1,000 so the returned field
    is close to the model's stationary law.
    """
    if sweeps < GIBBS_BURNIN_FLOOR:
        raise ValueError(f"sweeps must be >= {GIBBS_BURNIN_FLOOR}, got {sweeps}")
    sampler = AutologisticSampler(params, rng)
    for _ in range(sweeps):
        sampler.sweep()
    return sampler.field


def beta0_schedule(expit_min: float, expit_max: float, replicates: int) -> np.ndarray:
    """Intercepts whose independence-case success probabilities are evenly spaced."""
    if not (0 < expit_min < expit_max < 1):
        raise ValueError("need 0 < expit_min < expit_max < 1")
    return logit(np.linspace(expit_min, expit_max, replicates))


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario of the latent-Gaussian CAR generator."""

    name: str
    grid: GridSpec = field(default_factory=lambda: GridSpec(40, 40))
    scheme: NeighbourhoodScheme = NeighbourhoodScheme.TWELVE_NEAREST
    tau: float = 0.1
    rho: float = 0.99
    replicates: int = 200
    expit_min: float = 0.1
    expit_max: float = 0.9
    master_seed: int = 0

    def schedule(self) -> np.ndarray:
        return beta0_schedule(self.expit_min, self.expit_max, self.replicates)

    def replicate_seed_key(self, replicate: int) -> list[int]:
        return [self.master_seed, zlib.crc32(self.name.encode()), replicate]


@dataclass
class TruthRecord:
    """Generating parameters of one replicate, kept for coverage checks."""

    beta0: float
    tau: float
    rho: float
    seed_key: list[int]
    phi: np.ndarray

    @property
    def p(self) -> np.ndarray:
        return expit(self.beta0 + self.phi)


@dataclass
class Replicate:
    field: BinaryField
    truth: TruthRecord


def simulate_scenario(config: ScenarioConfig) -> list[Replicate]:
    """Generate the scenario's replicate set, deterministic under the master seed.

    Each replicate owns its random stream (derived from the master seed, the
    scenario name, and the replicate index), so the set is reproducible
    bit-for-bit and order-independent.
    """
    A = build_adjacency(config.grid, config.scheme)
    degrees = degree_matrix(A)
    chol = sparse_cholesky(build_precision(A, degrees, config.tau, config.rho))
    schedule = config.schedule()
    replicates = []
    for r in range(config.replicates):
        seed_key = config.replicate_seed_key(r)
        rng = np.random.default_rng(np.random.SeedSequence(seed_key))
        beta0 = float(schedule[r])
        phi = sample_gmrf(chol, rng)
        fld = bernoulli_field(config.grid, beta0, phi, rng)
        replicates.append(Replicate(
            field=fld,
            truth=TruthRecord(beta0=beta0, tau=config.tau, rho=config.rho,
                              seed_key=seed_key, phi=phi),
        ))
    return replicates


def write_field_csv(field_: BinaryField, path) -> None:
    """Field file: rows x cols of 0/1, comma separated."""
    lines = "\n".join(",".join(str(v) for v in row) for row in field_.as_grid())
    with open(path, "w") as fh:
        fh.write(lines + "\n")


def read_field_csv(path) -> BinaryField:
    values = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    if not np.isin(values, (0, 1)).all():
        raise ValueError(f"field file {path} contains values other than 0/1")
    grid = GridSpec(rows=values.shape[0], cols=values.shape[1])
    return BinaryField(grid=grid, x=values.ravel())


def write_truth_json(truth: TruthRecord, path) -> None:
    payload = {
        "beta0": truth.beta0,
        "tau": truth.tau,
        "rho": truth.rho,
        "seed": truth.seed_key,
        "phi": [float(v) for v in truth.phi],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def read_truth_json(path) -> TruthRecord:
    with open(path) as fh:
        payload = json.load(fh)
    return TruthRecord(
        beta0=float(payload["beta0"]),
        tau=float(payload["tau"]),
        rho=float(payload["rho"]),
        seed_key=list(payload["seed"]),
        phi=np.asarray(payload["phi"], dtype=float),
    )
