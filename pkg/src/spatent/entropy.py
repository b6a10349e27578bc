"""Shannon entropy, classical count-based estimators, and lattice entropy surfaces.

All entropies are in nats.  For a binary cell with success probability p the
local entropy is p*log(1/p) + (1-p)*log(1/(1-p)), maximal at log(2).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit, xlogy

from .lattice import GridSpec

LOG2 = float(np.log(2.0))


def shannon_entropy(pmf) -> float:
    """Entropy H = sum p_i log(1/p_i) of a probability mass function.

    Zero-probability categories contribute nothing (0*log(1/0) = 0).
    """
    p = np.asarray(pmf, dtype=float)
    if p.ndim != 1 or len(p) < 2:
        raise ValueError("pmf must be a vector with at least 2 categories")
    if np.any(p < 0):
        raise ValueError("pmf entries must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"pmf sums to {p.sum()}, not 1")
    return float(-xlogy(p, p).sum())


def plugin_estimator(counts) -> float:
    """Plug-in entropy of the empirical pmf n_i / n.

    Computed as log(n) - sum(n_i log n_i)/n, the entropy of the empirical
    distribution.
    """
    n_i = _validate_counts(counts, min_total=1)
    n = n_i.sum()
    return float(np.log(n) - xlogy(n_i, n_i).sum() / n)


def miller_madow(counts) -> float:
    """Plug-in entropy plus the (I+ - 1)/(2n) first-order bias correction.

    I+ counts the categories actually observed (n_i > 0).
    """
    n_i = _validate_counts(counts, min_total=1)
    observed = int((n_i > 0).sum())
    return plugin_estimator(n_i) + (observed - 1) / (2.0 * n_i.sum())


def jackknife_estimator(counts) -> float:
    """Jackknifed entropy n*H - (n-1)*mean of leave-one-out plug-in entropies.

    The leave-one-out mean runs over the I distinct removal cases weighted by
    n_i/n, which equals the average over all n single-observation removals.
    """
    n_i = _validate_counts(counts, min_total=2)
    n = int(n_i.sum())
    h_full = plugin_estimator(n_i)
    clogc = xlogy(n_i, n_i)
    total = clogc.sum()
    loo_mean = 0.0
    for i in np.flatnonzero(n_i):
        c = n_i[i]
        reduced_sum = total - clogc[i] + xlogy(c - 1, c - 1)
        loo_mean += (c / n) * (np.log(n - 1) - reduced_sum / (n - 1))
    return float(n * h_full - (n - 1) * loo_mean)


def _validate_counts(counts, min_total: int) -> np.ndarray:
    n_i = np.asarray(counts)
    if n_i.ndim != 1 or len(n_i) < 2:
        raise ValueError("counts must be a vector with at least 2 categories")
    if np.any(n_i < 0) or not np.all(n_i == np.floor(n_i)):
        raise ValueError("counts must be nonnegative integers")
    n_i = n_i.astype(np.int64)
    if n_i.sum() < min_total:
        raise ValueError(f"need at least {min_total} observations, got {n_i.sum()}")
    return n_i


def local_entropy(p):
    """Binary entropy p*log(1/p) + (1-p)*log(1/(1-p)); accepts scalars or arrays."""
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p must lie in [0, 1]")
    h = -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p))
    return float(h) if h.ndim == 0 else h


@dataclass
class EntropySurface:
    """Per-cell entropy layers on a lattice; absent layers are None.

    point:  entropy of the posterior-mean success probability (plug-in path)
    mean/sd/lower/upper: summaries of the per-draw entropy distribution
    """

    grid: GridSpec
    point: np.ndarray | None = None
    mean: np.ndarray | None = None
    sd: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def layers(self) -> dict[str, np.ndarray]:
        out = {}
        for f in fields(self):
            if f.name == "grid":
                continue
            value = getattr(self, f.name)
            if value is not None:
                out[f.name] = value
        return out

    def layer_grid(self, name: str) -> np.ndarray:
        values = getattr(self, name)
        if values is None:
            raise ValueError(f"surface has no {name!r} layer")
        return values.reshape(self.grid.rows, self.grid.cols)


def entropy_surface_point(summary) -> EntropySurface:
    """Entropy of each cell's posterior-mean probability (mean first, then entropy)."""
    return EntropySurface(grid=summary.grid, point=local_entropy(summary.p_mean))


def posterior_entropy_surface(samples) -> EntropySurface:
    """Per-draw entropy surface summarized cell by cell (entropy first, then mean).

    For each retained draw s, H_u^(s) = local_entropy(expit(beta0^(s) + phi_u^(s)));
    the layers are the per-cell mean, sd, and equal-tailed 95% interval, plus the
    point layer from the posterior-mean probabilities.
    """
    if samples.n_draws == 0:
        raise ValueError("no retained draws")
    h = local_entropy(expit(samples.beta0[:, None] + samples.phi))
    p_mean = expit(samples.beta0[:, None] + samples.phi).mean(axis=0)
    lower, upper = np.quantile(h, [0.025, 0.975], axis=0)
    return EntropySurface(
        grid=samples.grid,
        point=local_entropy(p_mean),
        mean=h.mean(axis=0),
        sd=h.std(axis=0, ddof=1) if samples.n_draws > 1 else np.zeros(samples.n_cells),
        lower=lower,
        upper=upper,
    )


def write_surface_csv(layer: np.ndarray, path) -> None:
    """Write one surface layer as rows x cols CSV."""
    with open(path, "w") as fh:
        for row in np.atleast_2d(layer):
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def read_surface_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_surface_pgm(layer: np.ndarray, path) -> None:
    """Write a layer as a binary 16-bit PGM (P5), scaled so log(2) -> 65535.

    The scale is recorded on the comment line; sample values are big-endian
    per the PGM specification.
    """
    grid = np.atleast_2d(layer)
    scaled = np.clip(grid / LOG2, 0.0, 1.0)
    pixels = np.rint(scaled * 65535).astype(">u2")
    header = (
        b"P5\n"
        + f"# entropy scale: 0 = 0.0 nats, 65535 = log(2) = {LOG2!r} nats\n".encode()
        + f"{grid.shape[1]} {grid.shape[0]}\n65535\n".encode()
    )
    with open(path, "wb") as fh:
        fh.write(header + pixels.tobytes())


def read_surface_pgm(path) -> np.ndarray:
    """Read a surface PGM back to entropy values (inverse of write_surface_pgm)."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end]
        pos = end + 1
        if not line.startswith(b"#"):
            tokens.extend(line.split())
    if tokens[0] != b"P5" or tokens[3] != b"65535":
        raise ValueError("not a 16-bit P5 graymap")
    width, height = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data[pos:], dtype=">u2", count=width * height)
    return pixels.reshape(height, width).astype(float) / 65535.0 * LOG2
