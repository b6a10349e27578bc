"""Posterior computation for the latent-Gaussian CAR logit model.

The sampler is Metropolis-within-Gibbs:
  (a) the spatial effect phi moves in row blocks via Langevin proposals
      preconditioned by tau*(D - rho*A) restricted to the block plus the
      Bernoulli likelihood's diagonal curvature;
  (b) beta0 moves by adaptive random walk, plus a joint shift move
      (beta0 + d, phi - d) that leaves the likelihood invariant and breaks
      the near-confounding of the intercept with the field mean;
  (c) (log tau, atanh rho) move jointly by adaptive random walk with an
      empirically adapted proposal covariance; tau and rho additionally move
      through energy-matched ridge proposals that rescale phi so the GMRF
      quadratic form stays fixed, which decouples the hyperparameters from
      the current field scale (their Jacobians are exact because the rescale
      factor is scale-free in phi).
A Laplace independence kernel runs every few dozen iterations on top: it
jointly proposes (tau, rho) by a mixture of a local walk and a prior draw,
with phi drawn from the Gaussian approximation at its conditional mode, and
is what carries the chain between the spatial and the spatially-flat
explanations of the data.  Hyperparameter moves engage only after a short
phi warm-up (the cold start has phi = 0, where the tau prior would otherwise
drag the chain into the flat mode before the field has grown).  All adapted
proposal scales freeze at the end of burn-in.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.special import expit, gammaln, logit

from .lattice import GridSpec, log_det_precision, normalized_adjacency_eigenvalues
from .simulate import BinaryField

DRAWS_MAGIC = "#spatent-draws v1"


class AdaptationDivergedError(RuntimeError):
    """A proposal family's acceptance rate left [0.05, 0.95] after the adaptation freeze."""


@dataclass(frozen=True)
class Priors:
    """Weakly informative defaults; the dependence prior lives on atanh(rho)."""

    beta0_mean: float = 0.0
    beta0_sd: float = 10.0
    tau_shape: float = 1.0
    tau_rate: float = 0.01
    rho_z_mean: float = 0.0
    rho_z_sd: float = 2.0

    def __post_init__(self):
        for name in ("beta0_sd", "tau_shape", "tau_rate", "rho_z_sd"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def log_beta0(self, beta0: float) -> float:
        z = (beta0 - self.beta0_mean) / self.beta0_sd
        return -0.5 * z * z - np.log(self.beta0_sd) - 0.5 * np.log(2 * np.pi)

    def log_tau(self, tau: float) -> float:
        if tau <= 0:
            return -np.inf
        a, b = self.tau_shape, self.tau_rate
        return a * np.log(b) - gammaln(a) + (a - 1) * np.log(tau) - b * tau

    def log_rho_z(self, rho_z: float) -> float:
        z = (rho_z - self.rho_z_mean) / self.rho_z_sd
        return -0.5 * z * z - np.log(self.rho_z_sd) - 0.5 * np.log(2 * np.pi)


@dataclass(frozen=True)
class FitConfig:
    chains: int = 4
    iterations: int = 20_000
    burn_in: int = 10_000
    thinning: int = 10
    phi_block_rows: int = 1
    laplace_every: int = 75
    warmup: int | None = None    # field-only iterations before hyper moves engage
    seed: int = 0
    # initial proposal scales, adapted during burn-in
    phi_scale: float = 0.6
    beta0_scale: float = 0.2
    shift_scale: float = 0.5
    hyper_scale: float = 0.3

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1 (>= 2 for R-hat diagnostics)")
        if not 0 < self.burn_in < self.iterations:
            raise ValueError("need 0 < burn_in < iterations")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if (self.iterations - self.burn_in) % self.thinning != 0:
            raise ValueError("iterations - burn_in must be a multiple of thinning")
        if self.phi_block_rows < 1:
            raise ValueError("phi_block_rows must be >= 1")
        if self.laplace_every < 0:
            raise ValueError("laplace_every must be >= 0 (0 disables the kernel)")
        if self.warmup is not None and not 0 <= self.warmup < self.burn_in:
            raise ValueError("warmup must lie in [0, burn_in)")

    @property
    def retained_per_chain(self) -> int:
        return (self.iterations - self.burn_in) // self.thinning

    @property
    def effective_warmup(self) -> int:
        if self.warmup is not None:
            return self.warmup
        return min(max(300, self.burn_in // 5), self.burn_in // 2, 1000)


@dataclass
class PosteriorSamples:
    """Retained MCMC draws of (beta0, tau, rho, phi_1..phi_n) with provenance."""

    draws: np.ndarray
    columns: list[str]
    chain_id: np.ndarray
    grid: GridSpec
    scheme: str | None
    acceptance: dict
    seed: int
    config: dict

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        self.chain_id = np.asarray(self.chain_id, dtype=np.int64)
        if self.draws.shape[0] != len(self.chain_id):
            raise ValueError("chain labels do not match draw count")
        if self.draws.shape[1] != len(self.columns):
            raise ValueError("column names do not match draw width")
        if np.any(self.tau <= 0):
            raise ValueError("tau draws must be positive")
        if np.any(np.abs(self.rho) >= 1):
            raise ValueError("rho draws must lie in (-1, 1)")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def n_cells(self) -> int:
        return self.draws.shape[1] - 3

    @property
    def beta0(self) -> np.ndarray:
        return self.draws[:, 0]

    @property
    def tau(self) -> np.ndarray:
        return self.draws[:, 1]

    @property
    def rho(self) -> np.ndarray:
        return self.draws[:, 2]

    @property
    def phi(self) -> np.ndarray:
        return self.draws[:, 3:]

    @property
    def chains(self) -> list[int]:
        return sorted(set(self.chain_id.tolist()))

    def chain_matrix(self, column: str) -> np.ndarray:
        """Draws of one parameter as a (chains, draws-per-chain) matrix."""
        j = self.columns.index(column)
        rows = [self.draws[self.chain_id == c, j] for c in self.chains]
        width = min(len(r) for r in rows)
        return np.vstack([r[:width] for r in rows])


@dataclass
class PosteriorSummary:
    """Per-cell success-probability summaries plus hyperparameter intervals."""

    grid: GridSpec
    p_mean: np.ndarray
    p_sd: np.ndarray
    p_lower: np.ndarray
    p_upper: np.ndarray
    hyper: dict


def bernoulli_loglik(beta0: float, phi: np.ndarray, x: np.ndarray) -> float:
    """sum_u [x_u * eta_u - log(1 + exp(eta_u))] with eta = beta0 + phi."""
    eta = beta0 + phi
    return float(x @ eta - np.logaddexp(0.0, eta).sum())


def gmrf_logpdf_unnorm(phi: np.ndarray, degrees: np.ndarray, A: sp.spmatrix,
                       tau: float, rho: float, eigenvalues: np.ndarray | None = None) -> float:
    """GMRF prior term 0.5*logdet[tau(D-rho A)] - 0.5*tau*phi'(D-rho A)phi."""
    quad = (degrees * phi * phi).sum() - rho * (phi @ (A @ phi))
    return 0.5 * log_det_precision(degrees, A, tau, rho, eigenvalues) - 0.5 * tau * quad


def log_posterior(state, data: BinaryField, A: sp.spmatrix, degrees: np.ndarray,
                  priors: Priors, eigenvalues: np.ndarray | None = None) -> float:
    """Unnormalized log posterior of (beta0, tau, rho, phi) on the natural scale.

    Returns -inf outside the support (tau <= 0 or |rho| >= 1).  The prior on
    rho is the one induced by atanh(rho) ~ Normal, so the density includes
    the change-of-variable factor 1/(1 - rho^2).
    """
    beta0, tau, rho, phi = state
    phi = np.asarray(phi, dtype=float)
    if tau <= 0 or abs(rho) >= 1:
        return -np.inf
    x = data.x.astype(float)
    out = bernoulli_loglik(beta0, phi, x)
    out += gmrf_logpdf_unnorm(phi, degrees, A, tau, rho, eigenvalues)
    out += priors.log_beta0(beta0)
    out += priors.log_tau(tau)
    out += priors.log_rho_z(np.arctanh(rho)) - np.log1p(-rho * rho)
    return float(out)


# ---------------------------------------------------------------------------
# sampler internals
# ---------------------------------------------------------------------------

_PHI_TARGET = 0.574
_SCALAR_TARGET = 0.44
_HYPER_TARGET = 0.30


def _adapt_rate(t: int) -> float:
    return (t + 20.0) ** -0.6


class _ConditionalGaussian:
    """Banded factorizations of H = tau*(D - rho*A) + diag(w) on a fixed layout.

    The sparsity pattern never changes, so the RCM permutation and band
    placement are computed once; each call to factor() only refills the band
    and runs LAPACK's banded Cholesky.
    """

    def __init__(self, A, degrees):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        pattern = sp.csr_matrix(A + sp.eye(n))
        perm = np.asarray(reverse_cuthill_mckee(pattern, symmetric_mode=True))
        inverse = np.empty(n, dtype=np.int64)
        inverse[perm] = np.arange(n)
        coo = A.tocoo()
        pr, pc = inverse[coo.row], inverse[coo.col]
        lower = pr >= pc
        self.n = n
        self.perm = perm
        self.bandwidth = int((pr[lower] - pc[lower]).max()) if lower.any() else 0
        self._offdiag_flat = (pr[lower] - pc[lower]) * n + pc[lower]
        self._degrees_perm = degrees[perm]
        self._A = A
        self._degrees = degrees

    def factor(self, tau, rho, w):
        """Cholesky of tau*(D - rho*A) + diag(w); raises LinAlgError if not PD."""
        band = np.zeros((self.bandwidth + 1) * self.n)
        band[self._offdiag_flat] = -tau * rho
        band[: self.n] = tau * self._degrees_perm + w[self.perm]
        cb = sla.cholesky_banded(band.reshape(self.bandwidth + 1, self.n),
                                 lower=True, check_finite=False)
        return _BandedFactor(cb, self.perm, self.bandwidth)

    def matvec(self, tau, rho, w, v):
        """(tau*(D - rho*A) + diag(w)) @ v without materializing the matrix."""
        return tau * (self._degrees * v - rho * (self._A @ v)) + w * v


class _BandedFactor:
    def __init__(self, lower_band, perm, bandwidth):
        self._lower = lower_band
        self.perm = perm
        self.bandwidth = bandwidth
        n = lower_band.shape[1]
        upper = np.zeros_like(lower_band)
        for k in range(bandwidth + 1):
            upper[bandwidth - k, k:] = lower_band[k, : n - k]
        self._upper = upper

    def log_det(self):
        return float(2.0 * np.log(self._lower[0]).sum())

    def solve(self, b):
        w = sla.solve_banded((self.bandwidth, 0), self._lower, b[self.perm],
                             check_finite=False)
        y = sla.solve_banded((0, self.bandwidth), self._upper, w, check_finite=False)
        out = np.empty_like(y)
        out[self.perm] = y
        return out

    def sample_around(self, mean, z):
        y = sla.solve_banded((0, self.bandwidth), self._upper, z, check_finite=False)
        out = mean.copy()
        out[self.perm] += y
        return out


def _newton_mode(cond: _ConditionalGaussian, x, beta0, tau, rho,
                 max_iter=40, tol=1e-6):
    """Conditional mode of phi given (beta0, tau, rho) and its Hessian factor.

    Deterministic in its arguments (always started from zero), which the
    Laplace kernel's reverse-proposal density relies on.  The target is
    strictly concave, so damped Newton converges globally.
    """
    n = cond.n
    phi = np.zeros(n)
    zero = np.zeros(n)

    def target(p):
        eta = beta0 + p
        quad = cond.matvec(tau, rho, zero, p) @ p
        return x @ eta - np.logaddexp(0.0, eta).sum() - 0.5 * quad

    f = target(phi)
    for _ in range(max_iter):
        eta = beta0 + phi
        mu = expit(eta)
        g = x - mu - cond.matvec(tau, rho, zero, phi)
        if np.abs(g).max() < tol:
            break
        factor = cond.factor(tau, rho, mu * (1.0 - mu))
        step = factor.solve(g)
        a = 1.0
        while a > 1e-8:
            f_try = target(phi + a * step)
            if f_try > f - 1e-12:
                break
            a *= 0.5
        phi = phi + a * step
        f = f_try
    mu = expit(beta0 + phi)
    return phi, cond.factor(tau, rho, mu * (1.0 - mu))


def _run_chain(x, A, degrees, eigenvalues, rows, cols, priors: Priors,
               config: FitConfig, chain_index: int):
    """One MCMC chain; returns (retained draws, acceptance record)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, chain_index]))
    n = len(x)
    sum_d = degrees.sum()
    log_d_sum = np.log(degrees).sum()
    cond = _ConditionalGaussian(A, degrees)
    zero_n = np.zeros(n)

    # row blocks and their precision pieces
    block_size = config.phi_block_rows * cols
    starts = list(range(0, n, block_size))
    blocks = []
    for s in starts:
        e = min(s + block_size, n)
        A_rows = A[s:e].tocsr()
        A_BB = A_rows[:, s:e].toarray()
        diag = np.diag_indices(e - s)
        # (start, end, full rows of A, dense in-block A, diag index pair,
        #  degrees, data, scratch buffers for the two preconditioners)
        blocks.append((s, e, A_rows, A_BB, diag, degrees[s:e], x[s:e],
                       np.empty_like(A_BB), np.empty_like(A_BB)))
    n_blocks = len(blocks)

    # state; tau starts low so the field can grow toward the data before the
    # hyperparameter moves engage (a cold start at large tau pins phi at zero,
    # from where the tau prior drags the chain into the spatially-flat mode)
    xbar = x.mean()
    with np.errstate(divide="ignore"):
        beta0 = float(np.clip(logit(xbar), -4.0, 4.0))
    phi = np.zeros(n)
    log_tau, z_rho = np.log(0.1), 0.0
    tau, rho = 0.1, 0.0
    eta = beta0 + phi

    def hyper_logpost(log_tau_, z_rho_, qd_, qa_):
        tau_ = np.exp(log_tau_)
        rho_ = np.tanh(z_rho_)
        if abs(rho_) >= 1.0:    # tanh saturated in float: D - rho*A singular
            return -np.inf
        half_logdet = 0.5 * (n * log_tau_ + log_d_sum + np.log1p(-rho_ * eigenvalues).sum())
        quad = -0.5 * tau_ * (qd_ - rho_ * qa_)
        # Gamma prior on tau plus the log-scale Jacobian; Normal prior on atanh(rho)
        return (half_logdet + quad + priors.log_tau(tau_) + log_tau_
                + priors.log_rho_z(z_rho_))

    init_lp = (bernoulli_loglik(beta0, phi, x)
               + hyper_logpost(log_tau, z_rho, 0.0, 0.0)
               + priors.log_beta0(beta0))
    if not np.isfinite(init_lp):
        raise ValueError("non-finite posterior at initialization")

    # adaptation state
    log_s_phi = np.full(n_blocks, np.log(config.phi_scale))
    log_s_beta = np.log(config.beta0_scale)
    log_s_shift = np.log(config.shift_scale)
    log_s_scale = np.log(config.hyper_scale)
    log_s_ridge = np.log(config.hyper_scale)
    log_s_hyper = np.log(config.hyper_scale)
    hyper_mean = np.zeros(2)
    hyper_cov = np.eye(2) * 0.01
    hyper_count = 0
    warmup = config.effective_warmup

    families = ("phi", "beta0", "beta0_prior", "shift", "scale", "ridge",
                "hyper", "hyper_prior", "laplace")
    sum_x = float(x.sum())
    acc = {f: np.zeros(2) for f in families}    # post-freeze [accepted, proposed]
    acc_pre = {f: np.zeros(2) for f in families}

    retained = np.empty((config.retained_per_chain, 3 + n))
    kept = 0

    for t in range(config.iterations):
        adapting = t < config.burn_in
        tally = acc_pre if adapting else acc

        # (a) phi row blocks: preconditioned Langevin proposals
        for b, (s_, e_, A_rows, A_BB, diag, d_B, x_B, P, P_new) in enumerate(blocks):
            bsize = e_ - s_
            step = np.exp(log_s_phi[b])
            phi_B = phi[s_:e_]
            eta_B = eta[s_:e_]

            Aphi_B = A_rows @ phi
            Mphi_B = d_B * phi_B - rho * Aphi_B
            v = Mphi_B - (d_B * phi_B - rho * (A_BB @ phi_B))

            sig = expit(eta_B)
            g = x_B - sig - tau * Mphi_B
            np.multiply(A_BB, -tau * rho, out=P)
            P[diag] += tau * d_B + sig * (1.0 - sig)
            U = sla.cholesky(P, lower=False, check_finite=False)
            half_logdet_P = np.log(U[diag]).sum()

            z = rng.standard_normal(bsize)
            mean_fwd = phi_B + 0.5 * step * step * sla.cho_solve((U, False), g, check_finite=False)
            phi_new = mean_fwd + step * sla.solve_triangular(U, z, lower=False, check_finite=False)
            log_q_fwd = -0.5 * (z @ z) + half_logdet_P

            eta_new = beta0 + phi_new
            sig_new = expit(eta_new)
            Mphi_new = d_B * phi_new - rho * (A_BB @ phi_new) + v
            g_new = x_B - sig_new - tau * Mphi_new
            np.multiply(A_BB, -tau * rho, out=P_new)
            P_new[diag] += tau * d_B + sig_new * (1.0 - sig_new)
            U_new = sla.cholesky(P_new, lower=False, check_finite=False)
            mean_rev = phi_new + 0.5 * step * step * sla.cho_solve((U_new, False), g_new,
                                                                   check_finite=False)
            diff = phi_B - mean_rev
            log_q_rev = (-0.5 / (step * step) * (diff @ (P_new @ diff))
                         + np.log(U_new[diag]).sum())

            d_lik = (x_B @ (eta_new - eta_B)
                     - (np.logaddexp(0.0, eta_new) - np.logaddexp(0.0, eta_B)).sum())
            quad_old = phi_B @ (Mphi_B + v)
            quad_new = phi_new @ (Mphi_new + v)
            d_target = d_lik - 0.5 * tau * (quad_new - quad_old)

            log_alpha = d_target + log_q_rev - log_q_fwd
            accepted = np.log(rng.random()) < log_alpha
            if accepted:
                phi[s_:e_] = phi_new
                eta[s_:e_] = eta_new
            tally["phi"] += (accepted, 1)
            if adapting:
                log_s_phi[b] += _adapt_rate(t) * (min(1.0, np.exp(min(log_alpha, 0.0))) - _PHI_TARGET)

        # refresh cached field summaries used by the scalar moves
        Aphi = A @ phi
        qd = float(degrees @ (phi * phi))
        qa = float(phi @ Aphi)
        sd_phi = float(degrees @ phi)
        sa_phi = float(Aphi.sum())

        # (b) beta0 random walk
        delta = np.exp(log_s_beta) * rng.standard_normal()
        prop = beta0 + delta
        d_lik = (delta * sum_x
                 - (np.logaddexp(0.0, eta + delta) - np.logaddexp(0.0, eta)).sum())
        log_alpha = d_lik + priors.log_beta0(prop) - priors.log_beta0(beta0)
        accepted = np.log(rng.random()) < log_alpha
        if accepted:
            beta0 = prop
            eta = eta + delta
        tally["beta0"] += (accepted, 1)
        if adapting:
            log_s_beta += _adapt_rate(t) * (min(1.0, np.exp(min(log_alpha, 0.0))) - _SCALAR_TARGET)

        # independence refresh of beta0 from its prior: crosses the flat
        # likelihood plateaus of saturated data in one jump
        prop = rng.normal(priors.beta0_mean, priors.beta0_sd)
        delta = prop - beta0
        log_alpha = (delta * sum_x
                     - (np.logaddexp(0.0, eta + delta) - np.logaddexp(0.0, eta)).sum())
        accepted = np.log(rng.random()) < log_alpha
        if accepted:
            beta0 = prop
            eta = eta + delta
        tally["beta0_prior"] += (accepted, 1)

        # joint shift (beta0 + d, phi - d): likelihood-invariant
        delta = np.exp(log_s_shift) * rng.standard_normal()
        prop = beta0 + delta
        ones_M_phi = sd_phi - rho * sa_phi
        d_quad = tau * delta * ones_M_phi - 0.5 * tau * delta * delta * (1.0 - rho) * sum_d
        log_alpha = d_quad + priors.log_beta0(prop) - priors.log_beta0(beta0)
        accepted = np.log(rng.random()) < log_alpha
        if accepted:
            beta0 = prop
            phi = phi - delta
            qd = qd - 2 * delta * sd_phi + delta * delta * sum_d
            qa = qa - 2 * delta * sa_phi + delta * delta * sum_d
            sd_phi -= delta * sum_d
            sa_phi -= delta * sum_d
        tally["shift"] += (accepted, 1)
        if adapting:
            log_s_shift += _adapt_rate(t) * (min(1.0, np.exp(min(log_alpha, 0.0))) - _SCALAR_TARGET)

        if t < warmup:
            continue

        # (tau, phi) ridge: log_tau + eps with phi shrunk by exp(-eps/2); the
        # GMRF energy is invariant and the Jacobian cancels the det term
        eps = np.exp(log_s_scale) * rng.standard_normal()
        shrink = np.exp(-0.5 * eps)
        eta_prop = beta0 + shrink * phi
        d_lik = (x @ (eta_prop - eta)
                 - (np.logaddexp(0.0, eta_prop) - np.logaddexp(0.0, eta)).sum())
        log_alpha = (d_lik + priors.log_tau(np.exp(log_tau + eps)) + (log_tau + eps)
                     - priors.log_tau(tau) - log_tau)
        accepted = np.log(rng.random()) < log_alpha
        if accepted:
            log_tau += eps
            tau = float(np.exp(log_tau))
            phi = shrink * phi
            eta = eta_prop
            qd *= shrink * shrink
            qa *= shrink * shrink
            sd_phi *= shrink
            sa_phi *= shrink
        tally["scale"] += (accepted, 1)
        if adapting:
            log_s_scale += _adapt_rate(t) * (min(1.0, np.exp(min(log_alpha, 0.0))) - _SCALAR_TARGET)

        # (rho, phi) ridge: move atanh(rho), rescale phi to keep phi'(D-rho A)phi
        # fixed; the factor is scale-free in phi so the Jacobian is exactly c^n
        if qd > 0:
            eps = np.exp(log_s_ridge) * rng.standard_normal()
            z_prop = z_rho + eps
            rho_prop = float(np.tanh(z_prop))
            if abs(rho_prop) >= 1.0:    # tanh saturated: singular proposal
                log_alpha = -np.inf
                accepted = False
            else:
                c2 = (qd - rho * qa) / (qd - rho_prop * qa)
                c = float(np.sqrt(c2))
                eta_prop = beta0 + c * phi
                d_lik = (x @ (eta_prop - eta)
                         - (np.logaddexp(0.0, eta_prop) - np.logaddexp(0.0, eta)).sum())
                d_logdet = 0.5 * (np.log1p(-rho_prop * eigenvalues).sum()
                                  - np.log1p(-rho * eigenvalues).sum())
                log_alpha = (d_lik + d_logdet + n * np.log(c)
                             + priors.log_rho_z(z_prop) - priors.log_rho_z(z_rho))
                accepted = np.log(rng.random()) < log_alpha
            if accepted:
                z_rho = float(z_prop)
                rho = rho_prop
                phi = c * phi
                eta = eta_prop
                qd *= c2
                qa *= c2
                sd_phi *= c
                sa_phi *= c
            tally["ridge"] += (accepted, 1)
            if adapting:
                log_s_ridge += _adapt_rate(t) * (min(1.0, np.exp(min(log_alpha, 0.0))) - _SCALAR_TARGET)

        # exact conjugate Gibbs draw for tau: the full conditional given
        # (phi, rho) is Gamma(a + n/2, b + phi'(D - rho A)phi / 2)
        tau = float(rng.gamma(priors.tau_shape + 0.5 * n,
                              1.0 / (priors.tau_rate + 0.5 * (qd - rho * qa))))
        log_tau = float(np.log(tau))

        # independence refresh of (tau, rho) from their priors: with the
        # prior as proposal the ratio reduces to the GMRF terms alone
        tau_prop = rng.gamma(priors.tau_shape, 1.0 / priors.tau_rate)
        z_prop = rng.normal(priors.rho_z_mean, priors.rho_z_sd)
        rho_prop = float(np.tanh(z_prop))
        if abs(rho_prop) >= 1.0 or tau_prop <= 0:
            accepted = False
        else:
            log_alpha = (0.5 * (n * (np.log(tau_prop) - log_tau)
                                + np.log1p(-rho_prop * eigenvalues).sum()
                                - np.log1p(-rho * eigenvalues).sum())
                         - 0.5 * (tau_prop * (qd - rho_prop * qa) - tau * (qd - rho * qa)))
            accepted = np.log(rng.random()) < log_alpha
        if accepted:
            tau = float(tau_prop)
            log_tau = float(np.log(tau_prop))
            z_rho, rho = float(z_prop), rho_prop
        tally["hyper_prior"] += (accepted, 1)

        # (c) (log tau, atanh rho) joint adaptive random walk
        theta = np.array([log_tau, z_rho])
        if hyper_count >= 20:
            prop_cov = (2.38 ** 2 / 2.0) * (hyper_cov + 1e-9 * np.eye(2))
        else:
            prop_cov = np.eye(2) * 0.01
        Lc = np.linalg.cholesky(prop_cov)
        theta_prop = theta + np.exp(log_s_hyper) * (Lc @ rng.standard_normal(2))
        log_alpha = (hyper_logpost(theta_prop[0], theta_prop[1], qd, qa)
                     - hyper_logpost(log_tau, z_rho, qd, qa))
        accepted = np.log(rng.random()) < log_alpha
        if accepted:
            log_tau, z_rho = theta_prop
            tau, rho = float(np.exp(log_tau)), float(np.tanh(z_rho))
        tally["hyper"] += (accepted, 1)
        if adapting:
            log_s_hyper += _adapt_rate(t) * (min(1.0, np.exp(min(log_alpha, 0.0))) - _HYPER_TARGET)
            hyper_count += 1
            w = 1.0 / hyper_count
            current = np.array([log_tau, z_rho])
            old_mean = hyper_mean.copy()
            hyper_mean = hyper_mean + w * (current - hyper_mean)
            if hyper_count > 1:
                hyper_cov = ((1 - w) * hyper_cov
                             + w * np.outer(current - old_mean, current - hyper_mean))

        # Laplace kernel: random-walk (log tau, atanh rho) with phi proposed
        # from the Gaussian approximation at its conditional mode.  This is
        # the move that hops between the spatial and the spatially-flat
        # explanations of the data; the cheap kernels only mix within one.
        if config.laplace_every and (t + 1) % config.laplace_every == 0:
            # theta proposal: mixture of a local walk and a prior draw; the
            # prior branch is the global jump that escapes a wrong basin
            if rng.random() < 0.5:
                log_tau_prop = log_tau + 0.5 * rng.standard_normal()
                z_prop = float(z_rho + 0.4 * rng.standard_normal())
                tau_prop = float(np.exp(log_tau_prop))
            else:
                tau_prop = float(rng.gamma(priors.tau_shape, 1.0 / priors.tau_rate))
                log_tau_prop = float(np.log(tau_prop))
                z_prop = float(rng.normal(priors.rho_z_mean, priors.rho_z_sd))
            rho_prop = float(np.tanh(z_prop))
            if abs(rho_prop) < 1.0 and tau_prop > 0:
                def theta_mix_logpdf(lt_to, z_to, lt_from, z_from):
                    walk = (-0.5 * ((lt_to - lt_from) / 0.5) ** 2 - np.log(0.5)
                            - 0.5 * ((z_to - z_from) / 0.4) ** 2 - np.log(0.4)
                            - np.log(2 * np.pi))
                    prior = priors.log_tau(np.exp(lt_to)) + lt_to + priors.log_rho_z(z_to)
                    return np.logaddexp(walk, prior) + np.log(0.5)

                def cond_logpost(lt, zr, t_, r_, p):
                    eta_ = beta0 + p
                    lik = x @ eta_ - np.logaddexp(0.0, eta_).sum()
                    half_logdet = 0.5 * (n * lt + np.log1p(-r_ * eigenvalues).sum())
                    quad = -0.5 * (cond.matvec(t_, r_, zero_n, p) @ p)
                    return (lik + half_logdet + quad
                            + priors.log_tau(t_) + lt + priors.log_rho_z(zr))

                mode_prop, factor_prop = _newton_mode(cond, x, beta0, tau_prop, rho_prop)
                phi_prop = factor_prop.sample_around(mode_prop, rng.standard_normal(n))
                mode_cur, factor_cur = _newton_mode(cond, x, beta0, tau, rho)

                diff_prop = phi_prop - mode_prop
                diff_cur = phi - mode_cur
                w_prop = expit(beta0 + mode_prop)
                w_prop = w_prop * (1.0 - w_prop)
                w_cur = expit(beta0 + mode_cur)
                w_cur = w_cur * (1.0 - w_cur)
                log_q_prop = (0.5 * factor_prop.log_det()
                              - 0.5 * (cond.matvec(tau_prop, rho_prop, w_prop, diff_prop) @ diff_prop))
                log_q_cur = (0.5 * factor_cur.log_det()
                             - 0.5 * (cond.matvec(tau, rho, w_cur, diff_cur) @ diff_cur))
                log_alpha = (cond_logpost(log_tau_prop, z_prop, tau_prop, rho_prop, phi_prop)
                             - cond_logpost(log_tau, z_rho, tau, rho, phi)
                             + theta_mix_logpdf(log_tau, z_rho, log_tau_prop, z_prop)
                             - theta_mix_logpdf(log_tau_prop, z_prop, log_tau, z_rho)
                             + log_q_cur - log_q_prop)
                accepted = np.log(rng.random()) < log_alpha
                if accepted:
                    log_tau, z_rho = log_tau_prop, z_prop
                    tau, rho = tau_prop, rho_prop
                    phi = phi_prop
                    eta = beta0 + phi
                    Aphi = A @ phi
                    qd = float(degrees @ (phi * phi))
                    qa = float(phi @ Aphi)
                    sd_phi = float(degrees @ phi)
                    sa_phi = float(Aphi.sum())
                tally["laplace"] += (accepted, 1)

        if not adapting and (t - config.burn_in + 1) % config.thinning == 0:
            retained[kept, 0] = beta0
            retained[kept, 1] = tau
            retained[kept, 2] = rho
            retained[kept, 3:] = phi
            kept += 1

    record = {
        family: {
            "adapting": _rate(acc_pre[family]),
            "frozen": _rate(acc[family]),
            "frozen_proposals": int(acc[family][1]),
        }
        for family in families
    }
    return retained[:kept], record


def _rate(counter: np.ndarray) -> float | None:
    return float(counter[0] / counter[1]) if counter[1] > 0 else None


def fit_mcmc(data: BinaryField, A: sp.spmatrix, degrees: np.ndarray, priors: Priors,
             config: FitConfig, eigenvalues: np.ndarray | None = None,
             scheme: str | None = None, workers: int = 1) -> PosteriorSamples:
    """Sample the posterior of (beta0, tau, rho, phi) given a binary field.

    Chains run independently (in processes when workers > 1) from a common
    initialization; draws are concatenated in chain order.  Raises
    AdaptationDivergedError if any proposal family's post-freeze acceptance
    rate sits outside [0.05, 0.95] with at least 100 proposals.
    """
    A = sp.csr_matrix(A)
    if A.shape[0] != data.grid.n:
        raise ValueError("adjacency does not match the field's lattice")
    if eigenvalues is None:
        eigenvalues = normalized_adjacency_eigenvalues(A, degrees)
    x = data.x.astype(float)
    args = [(x, A, degrees, eigenvalues, data.grid.rows, data.grid.cols,
             priors, config, c) for c in range(config.chains)]
    if workers > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(workers, config.chains)) as pool:
            results = list(pool.map(_run_chain_star, args))
    else:
        results = [_run_chain(*a) for a in args]

    draws = np.vstack([r[0] for r in results])
    chain_id = np.concatenate([np.full(len(r[0]), c) for c, r in enumerate(results)])
    acceptance = {f"chain_{c}": r[1] for c, r in enumerate(results)}
    _check_adaptation(acceptance)
    columns = ["beta0", "tau", "rho"] + [f"phi_{i + 1:04d}" for i in range(data.grid.n)]
    return PosteriorSamples(
        draws=draws, columns=columns, chain_id=chain_id, grid=data.grid,
        scheme=scheme, acceptance=acceptance, seed=config.seed, config=asdict(config),
    )


def _run_chain_star(args):
    return _run_chain(*args)


def _check_adaptation(acceptance: dict) -> None:
    # independence and fixed-scale kernels are not adapted: near-zero
    # acceptance is expected for them whenever the data is informative
    exempt = {"beta0_prior", "hyper_prior", "laplace"}
    for chain, families in acceptance.items():
        for family, rates in families.items():
            if family in exempt:
                continue
            rate = rates["frozen"]
            if rates["frozen_proposals"] >= 100 and rate is not None and not 0.05 <= rate <= 0.95:
                raise AdaptationDivergedError(
                    f"adaptation diverged: {family} acceptance {rate:.3f} in {chain}"
                )


def posterior_summary(samples: PosteriorSamples) -> PosteriorSummary:
    """Equal-tailed per-cell summaries of p_u = expit(beta0 + phi_u)."""
    if samples.n_draws == 0:
        raise ValueError("no retained draws")
    p = expit(samples.beta0[:, None] + samples.phi)
    lower, upper = np.quantile(p, [0.025, 0.975], axis=0)
    hyper = {}
    for name in ("beta0", "tau", "rho"):
        values = getattr(samples, name)
        lo, hi = np.quantile(values, [0.025, 0.975])
        hyper[name] = {"mean": float(values.mean()), "lower": float(lo), "upper": float(hi)}
    sd = p.std(axis=0, ddof=1) if samples.n_draws > 1 else np.zeros(samples.n_cells)
    return PosteriorSummary(grid=samples.grid, p_mean=p.mean(axis=0), p_sd=sd,
                            p_lower=lower, p_upper=upper, hyper=hyper)


# ---------------------------------------------------------------------------
# convergence diagnostics
# ---------------------------------------------------------------------------

def split_rhat(chains: np.ndarray) -> float:
    """Split potential scale reduction factor; NaN when chains are degenerate."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise ValueError("need a (chains, draws) matrix with >= 2 chains")
    half = chains.shape[1] // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    split = np.vstack([chains[:, :half], chains[:, half: 2 * half]])
    m, s = split.shape
    within = split.var(axis=1, ddof=1).mean()
    between = s * split.mean(axis=1).var(ddof=1)
    if within == 0:
        return float("nan")
    var_plus = (s - 1) / s * within + between / s
    return float(np.sqrt(var_plus / within))


def effective_sample_size(chains: np.ndarray) -> float:
    """ESS across chains via Geyer's initial monotone positive sequence."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("need a (chains, draws) matrix")
    m, s = chains.shape
    if s < 4:
        raise ValueError("need at least 4 draws per chain")
    within = chains.var(axis=1, ddof=1).mean()
    if within == 0:
        return float("nan")
    var_plus = (s - 1) / s * within
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    acov = np.array([_autocovariance(c) for c in chains]).mean(axis=0)
    rho = 1.0 - (within - acov) / var_plus
    # Geyer: accumulate lag pairs while positive, forcing monotone decrease
    tau_int = -1.0
    prev_pair = np.inf
    for k in range(0, s - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        pair = min(pair, prev_pair)
        prev_pair = pair
        tau_int += 2.0 * pair
    return float(m * s / max(tau_int, 1.0 / (m * s)))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = len(x)
    centred = x - x.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centred, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n].real / n
    return acov


def diagnostics(samples: PosteriorSamples, n_phi_cells: int = 10) -> dict:
    """Split R-hat and ESS for the hyperparameters and a seeded sample of phi cells.

    Parameters with zero variance across all chains are reported as degenerate
    rather than given an R-hat.  Any R-hat above 1.05 lands in `flagged`.
    """
    if len(samples.chains) < 2:
        raise ValueError("diagnostics requires at least 2 chains")
    cell_rng = np.random.default_rng(np.random.SeedSequence([samples.seed, 0xD1A6]))
    n_pick = min(n_phi_cells, samples.n_cells)
    cells = np.sort(cell_rng.choice(samples.n_cells, size=n_pick, replace=False))
    names = ["beta0", "tau", "rho"] + [f"phi_{c + 1:04d}" for c in cells]
    report = {"parameters": {}, "flagged": [], "phi_cells": [int(c + 1) for c in cells]}
    max_rhat = None
    for name in names:
        matrix = samples.chain_matrix(name)
        rhat = split_rhat(matrix)
        if np.isnan(rhat):
            report["parameters"][name] = {"rhat": None, "ess": None, "degenerate": True}
            continue
        ess = effective_sample_size(matrix)
        report["parameters"][name] = {"rhat": rhat, "ess": ess, "degenerate": False}
        max_rhat = rhat if max_rhat is None else max(max_rhat, rhat)
        if rhat > 1.05:
            report["flagged"].append(name)
    report["max_rhat"] = max_rhat
    return report


# ---------------------------------------------------------------------------
# persistence: flat binary table + JSON sidecar
# ---------------------------------------------------------------------------

def save_draws(samples: PosteriorSamples, path, sidecar_path=None) -> None:
    """Write draws as little-endian float64 rows after a two-line text header.

    Header line 1 is a magic marker, line 2 a JSON object with the column
    names and shape.  The chain label is stored as the first column.  The
    sidecar JSON carries config, seed, and acceptance rates.
    """
    meta = {
        "columns": ["chain"] + samples.columns,
        "rows": samples.n_draws,
        "grid": [samples.grid.rows, samples.grid.cols],
        "scheme": samples.scheme,
        "seed": samples.seed,
    }
    table = np.column_stack([samples.chain_id.astype(float), samples.draws])
    with open(path, "wb") as fh:
        fh.write((DRAWS_MAGIC + "\n").encode())
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode())
        fh.write(table.astype("<f8").tobytes())
    if sidecar_path is not None:
        sidecar = {
            "config": samples.config,
            "seed": samples.seed,
            "acceptance": samples.acceptance,
            "scheme": samples.scheme,
            "grid": [samples.grid.rows, samples.grid.cols],
        }
        with open(sidecar_path, "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_draws(path, sidecar_path=None) -> PosteriorSamples:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().strip()
        if magic != DRAWS_MAGIC:
            raise ValueError(f"{path} is not a spatent draws file")
        meta = json.loads(fh.readline().decode())
        table = np.frombuffer(fh.read(), dtype="<f8")
    columns = meta["columns"]
    table = table.reshape(meta["rows"], len(columns))
    sidecar = {}
    if sidecar_path is not None:
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
    return PosteriorSamples(
        draws=table[:, 1:],
        columns=columns[1:],
        chain_id=table[:, 0].astype(np.int64),
        grid=GridSpec(*meta["grid"]),
        scheme=meta.get("scheme"),
        acceptance=sidecar.get("acceptance", {}),
        seed=int(meta.get("seed", 0)),
        config=sidecar.get("config", {}),
    )
