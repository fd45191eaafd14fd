"""Analytic identity suite for the mixture oracle.

Every check evaluates two sides of an identity (or an analytic quantity
and its finite-difference estimate) and reports the largest discrepancy.
With ``fault=True`` the second side is computed on a copy of the mixture
whose first mean is shifted by ``1e-3``, which every check must detect.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from guidelab.gmm import GaussianMixture, OracleDenoiser, sym_pair
from guidelab.guidance import GuidanceConfig, GuidanceRng, guided_denoise

FAULT_SHIFT = 1e-3


@dataclass(frozen=True)
class IdentityResult:
    name: str
    max_error: float
    tolerance: float
    kind: str = "abs"

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28s} max {self.kind} error {self.max_error:.3e}"
                f"  (tol {self.tolerance:.0e})")


@dataclass
class VerifyReport:
    results: list[IdentityResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]


def five_component_mixture(seed: int = 7) -> GaussianMixture:
    """A fixed 5-component mixture in three dimensions."""
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 1.5, 5)
    return GaussianMixture(rng.uniform(-3, 3, (5, 3)), w / w.sum())


def shifted(mixture: GaussianMixture, eps: float = FAULT_SHIFT) -> GaussianMixture:
    """Copy of ``mixture`` with the first coordinate of the first mean moved by ``eps``."""
    means = np.array(mixture.means)
    means[0, 0] += eps
    return GaussianMixture(means, mixture.weights, mixture.schedule)


def _probe(mixture: GaussianMixture, n: int, rng, t_lo: float = 0.0):
    t = rng.uniform(t_lo, 1.0, n)
    x, _ = mixture.sample_data(n, int(rng.integers(2 ** 31)))
    z = x + mixture.schedule.sigma(t)[:, None] * rng.standard_normal(x.shape)
    return z, t


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.linalg.norm(a - b, axis=-1)
                        / np.maximum(np.linalg.norm(b, axis=-1), 1e-12)))


def _abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _central_grad(f, z, h):
    g = np.zeros_like(z)
    for j in range(z.shape[-1]):
        e = np.zeros(z.shape[-1])
        e[j] = h
        g[..., j] = (f(z + e) - f(z - e)) / (2 * h)
    return g


def check_lemma(m, other, rng, name):
    z, t = _probe(m, 1000, rng)
    mixed = np.einsum("nk,nkd->nd", other.posterior_weight(z, t), other.all_cond_scores(z, t))
    return IdentityResult(name, _abs(m.uncond_score(z, t), mixed), 1e-12)


def check_posterior_bayes(m, other, rng):
    # moderate noise keeps the plain-exp ratio free of underflow
    z, t = _probe(m, 1000, rng, t_lo=0.05)
    joint = np.exp(other.component_log_density(z, t)) * other.weights
    direct = joint / joint.sum(-1, keepdims=True)
    post = m.posterior_weight(z, t)
    err = max(_abs(post, direct), _abs(post.sum(-1), 1.0))
    return IdentityResult("posterior_bayes_rule", err, 1e-12)


def check_theorem(m, other, rng):
    err = 0.0
    for _ in range(5):
        q = rng.dirichlet(np.ones(m.n_components))
        z, t = _probe(m, 100, rng)
        lhs = np.einsum("k,nkd->nd", q, m.all_cond_scores(z, t))
        rhs = other.uncond_score(z, t) - other.kl_gradient(q, z, t)
        err = max(err, _abs(lhs, rhs))
    return IdentityResult("kl_theorem", err, 1e-10)


def check_kl_gradient(m, other, rng):
    err = 0.0
    for _ in range(5):
        q = rng.dirichlet(np.ones(m.n_components))
        z, t = _probe(m, 100, rng, t_lo=0.02)
        fd = _central_grad(lambda u: other.kl_divergence(q, u, t), z, 1e-4)
        err = max(err, _rel(m.kl_gradient(q, z, t), fd))
    return IdentityResult("kl_gradient_fd", err, 1e-4, "rel")


def check_score_gradients(m, other, rng):
    z, t = _probe(m, 200, rng, t_lo=0.02)
    y = rng.integers(0, m.n_components, len(z))
    fd_u = _central_grad(lambda u: other.log_density(u, t), z, 1e-5)
    fd_c = _central_grad(lambda u: other.cond_log_density(u, t, y), z, 1e-5)
    err = max(_rel(m.uncond_score(z, t), fd_u), _rel(m.cond_score(z, t, y), fd_c))
    return IdentityResult("scores_are_gradients", err, 1e-6, "rel")


def check_cfg_closed_form(m, other, rng):
    z, t = _probe(m, 1000, rng)
    err = 0.0
    var = (1.0 + m.schedule.sigma(t) ** 2)[:, None]
    for y in (0, 1):
        post_other = other.posterior_weight(z, t)[:, 1 - y, None]
        formula = post_other * (other.means[y] - other.means[1 - y]) / var
        err = max(err, _abs(m.cond_score(z, t, y) - m.uncond_score(z, t), formula))
    return IdentityResult("cfg_closed_form", err, 1e-12)


def check_icg_closed_form(m, other, rng):
    z, t = _probe(m, 1000, rng)
    var = (1.0 + m.schedule.sigma(t) ** 2)[:, None]
    err = 0.0
    for _ in range(5):
        q = rng.dirichlet(np.ones(2))
        formula = q[1] * (other.means[0] - other.means[1]) / var
        err = max(err, _abs(m.icg_expected_direction(q, z, t, 0), formula))
    return IdentityResult("icg_closed_form", err, 1e-12)


def check_icg_unbiased(m, other, rng):
    z, t = _probe(m, 200, rng)
    err = 0.0
    for zi, ti in zip(z, t):
        post = m.posterior_weight(zi, ti)
        for y in range(m.n_components):
            err = max(err, _abs(m.icg_expected_direction(post, zi, ti, y),
                                other.cfg_direction_closed_form(zi, ti, y)))
    return IdentityResult("icg_unbiased_at_posterior", err, 1e-12)


def check_cfg_guided_oracle(m, other, rng):
    # sigma >= 0.2 keeps the D -> score conversion well conditioned
    z, t = _probe(m, 1000, rng, t_lo=0.01)
    y = rng.integers(0, 2, len(z))
    w = 2.0
    d_hat = guided_denoise(OracleDenoiser(m), z, t, y, GuidanceConfig("cfg", w_cfg=w),
                           GuidanceRng(0))
    s2 = m.schedule.sigma(t)[:, None] ** 2
    direction = ((d_hat - z) / s2 - m.cond_score(z, t, y)) / (w - 1.0)
    ref = np.where(y[:, None] == 0, other.cfg_direction_closed_form(z, t, 0),
                   other.cfg_direction_closed_form(z, t, 1))
    return IdentityResult("cfg_rule_matches_oracle", _abs(direction, ref), 1e-12)


def run_verify(seed: int = 0, fault: bool = False) -> VerifyReport:
    """Run the identity suite; ``fault`` injects a ``1e-3`` mean shift."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    pair, five = sym_pair(), five_component_mixture()
    pair_b = shifted(pair) if fault else pair
    five_b = shifted(five) if fault else five
    results = [
        check_lemma(pair, pair_b, rng, "lemma_sym_pair"),
        check_lemma(five, five_b, rng, "lemma_five_component"),
        check_posterior_bayes(five, five_b, rng),
        check_theorem(five, five_b, rng),
        check_kl_gradient(five, five_b, rng),
        check_score_gradients(five, five_b, rng),
        check_cfg_closed_form(pair, pair_b, rng),
        check_icg_closed_form(pair, pair_b, rng),
        check_icg_unbiased(pair, pair_b, rng),
        check_cfg_guided_oracle(pair, pair_b, rng),
    ]
    return VerifyReport(results, time.perf_counter() - start)
