"""Labelled mixtures of isotropic Gaussians with exact noisy scores.

Every component has identity covariance, so after the variance-exploding
forward process ``z_t = x + sigma(t) * eps`` each class density is
``N(mu_k, (1 + sigma^2) I)`` and all scores, posteriors and guidance
directions are available in closed form.

Array conventions: points have shape ``(..., d)``; ``t`` is a scalar or
broadcasts against the leading axes of ``z``; class labels are integers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from guidelab.errors import DomainError

__all__ = [
    "NoiseSchedule",
    "GaussianMixture",
    "IndependentConditionLaw",
    "OracleDenoiser",
    "sym_pair",
]


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise DomainError(f"time must lie in [0, 1], got {t}")
    return t


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance-exploding schedule ``sigma(t) = t * sigma_max``."""

    sigma_max: float = 20.0

    def __post_init__(self):
        if not self.sigma_max > 0:
            raise DomainError("sigma_max must be positive")

    def sigma(self, t):
        return _check_time(t) * self.sigma_max

    def sigma_dot(self, t):
        return np.full_like(_check_time(t), self.sigma_max)

    def time(self, sigma):
        """Inverse of :meth:`sigma`."""
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma < 0) or np.any(sigma > self.sigma_max * (1 + 1e-12)):
            raise DomainError(f"sigma must lie in [0, {self.sigma_max}]")
        return np.minimum(sigma / self.sigma_max, 1.0)


@dataclass(frozen=True)
class IndependentConditionLaw:
    """Distribution ``q`` of the independent condition used by ICG.

    Args:
        mode: ``"uniform"``, ``"fixed"`` or ``"categorical"``.
        k: class index for the ``"fixed"`` mode.
        probabilities: class probabilities for the ``"categorical"`` mode.
    """

    mode: str = "uniform"
    k: int | None = None
    probabilities: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("uniform", "fixed", "categorical"):
            raise DomainError(f"unknown condition law mode {self.mode!r}")
        if self.mode == "fixed" and (self.k is None or self.k < 0):
            raise DomainError("fixed mode needs a non-negative class index k")
        if self.mode == "categorical":
            if self.probabilities is None:
                raise DomainError("categorical mode needs probabilities")
            p = np.asarray(self.probabilities, dtype=float)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise DomainError("probabilities must be nonnegative and sum to 1")
            object.__setattr__(self, "probabilities", tuple(float(v) for v in p))

    @classmethod
    def categorical(cls, probabilities) -> "IndependentConditionLaw":
        return cls("categorical", probabilities=tuple(np.asarray(probabilities, float)))

    def probs(self, n_classes: int) -> np.ndarray:
        """Return ``q`` as a length-``n_classes`` probability vector."""
        if self.mode == "uniform":
            return np.full(n_classes, 1.0 / n_classes)
        if self.mode == "fixed":
            if self.k >= n_classes:
                raise DomainError(f"class {self.k} out of range for {n_classes} classes")
            q = np.zeros(n_classes)
            q[self.k] = 1.0
            return q
        q = np.asarray(self.probabilities, dtype=float)
        if q.shape != (n_classes,):
            raise DomainError(f"law has {q.size} entries, mixture has {n_classes} classes")
        return q

    def sample(self, rng: np.random.Generator, n_classes: int, size) -> np.ndarray:
        return rng.choice(n_classes, size=size, p=self.probs(n_classes))


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of identity-covariance Gaussians; component ``k`` is class ``k``.

    Attributes:
        means: component means, shape ``(K, d)``.
        weights: mixing weights, shape ``(K,)``.
        schedule: the forward-process noise schedule.
    """

    means: np.ndarray
    weights: np.ndarray
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        means = np.array(self.means, dtype=float)
        if means.ndim != 2 or means.shape[0] < 1 or means.shape[1] < 1:
            raise DomainError("means must be a non-empty (K, d) array")
        weights = np.array(self.weights, dtype=float)
        if weights.shape != (means.shape[0],):
            raise DomainError("one weight per component is required")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise DomainError("weights must be strictly positive and sum to 1")
        means.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def sigma_max(self) -> float:
        return self.schedule.sigma_max

    # ------------------------------------------------------------------
    # sampling

    def sample_data(self, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` labelled points; the result is a pure function of ``seed``."""
        if n < 1:
            raise DomainError("n must be at least 1")
        rng = np.random.default_rng(seed)
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        points = self.means[labels] + rng.standard_normal((n, self.dim))
        return points, labels

    def sample_class(self, labels, seed: int) -> np.ndarray:
        """Draw one clean point per entry of ``labels``."""
        labels = self._check_class(labels)
        rng = np.random.default_rng(seed)
        return self.means[labels] + rng.standard_normal(labels.shape + (self.dim,))

    def forward_perturb(self, x, t, seed: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        sigma = self.schedule.sigma(t)
        eps = np.random.default_rng(seed).standard_normal(x.shape)
        return x + np.expand_dims(sigma, -1) * eps

    # ------------------------------------------------------------------
    # densities

    def _check_class(self, y) -> np.ndarray:
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer):
            if np.all(np.mod(y, 1) == 0):
                y = y.astype(int)
            else:
                raise DomainError(f"class labels must be integers, got {y}")
        if np.any(y < 0) or np.any(y >= self.n_components):
            raise DomainError(f"class index out of range [0, {self.n_components})")
        return y

    def _variance(self, t) -> np.ndarray:
        return 1.0 + self.schedule.sigma(t) ** 2

    def component_log_density(self, z, t) -> np.ndarray:
        """``log N(z; mu_k, (1 + sigma^2) I)`` for every ``k``, shape ``(..., K)``."""
        z = np.asarray(z, dtype=float)
        var = np.expand_dims(self._variance(t), -1)
        sq = np.sum((z[..., None, :] - self.means) ** 2, axis=-1)
        return -0.5 * sq / var - 0.5 * self.dim * np.log(2 * np.pi * var)

    def cond_log_density(self, z, t, y) -> np.ndarray:
        y = self._check_class(y)
        logp = self.component_log_density(z, t)
        return np.take_along_axis(logp, np.broadcast_to(y, logp.shape[:-1])[..., None], -1)[..., 0]

    def log_density(self, z, t) -> np.ndarray:
        return logsumexp(self.component_log_density(z, t) + np.log(self.weights), axis=-1)

    def posterior_weight(self, z, t) -> np.ndarray:
        """Responsibilities ``p_t(y = k | z)``, computed in the log domain."""
        joint = self.component_log_density(z, t) + np.log(self.weights)
        return np.exp(joint - logsumexp(joint, axis=-1, keepdims=True))

    # ------------------------------------------------------------------
    # scores

    def cond_score(self, z, t, y) -> np.ndarray:
        """Score of class ``y``: ``(mu_y - z) / (1 + sigma(t)^2)``."""
        y = self._check_class(y)
        z = np.asarray(z, dtype=float)
        return (self.means[y] - z) / np.expand_dims(self._variance(t), -1)

    def all_cond_scores(self, z, t) -> np.ndarray:
        """Scores of every class, shape ``(..., K, d)``."""
        z = np.asarray(z, dtype=float)
        var = self._variance(t)[..., None, None]
        return (self.means - z[..., None, :]) / var

    def uncond_score(self, z, t) -> np.ndarray:
        post = self.posterior_weight(z, t)
        return np.einsum("...k,...kd->...d", post, self.all_cond_scores(z, t))

    def denoise(self, z, t, y=None) -> np.ndarray:
        """Posterior mean ``E[x | z_t (, y)] = z + sigma^2 * score``."""
        sigma2 = np.expand_dims(self.schedule.sigma(t) ** 2, -1)
        score = self.uncond_score(z, t) if y is None else self.cond_score(z, t, y)
        return np.asarray(z, dtype=float) + sigma2 * score

    # ------------------------------------------------------------------
    # guidance directions

    def cfg_direction(self, z, t, y) -> np.ndarray:
        """Score-space CFG direction ``s(z, y) - s(z)`` for any K."""
        return self.cond_score(z, t, y) - self.uncond_score(z, t)

    def cfg_direction_closed_form(self, z, t, y) -> np.ndarray:
        """Two-class closed form ``p_t(other | z) * (mu_y - mu_other) / (1 + sigma^2)``.

        Falls back to :meth:`cfg_direction` for ``K != 2``.
        """
        y = self._check_class(y)
        if self.n_components != 2:
            return self.cfg_direction(z, t, y)
        other = 1 - y
        post_other = np.take_along_axis(
            self.posterior_weight(z, t),
            np.broadcast_to(other, np.shape(z)[:-1])[..., None], -1)
        delta = self.means[y] - self.means[other]
        return post_other * delta / np.expand_dims(self._variance(t), -1)

    def icg_expected_direction(self, q: IndependentConditionLaw | np.ndarray, z, t, y) -> np.ndarray:
        """Expectation over ``y_hat ~ q`` of ``s(z, y) - s(z, y_hat)``."""
        qv = self._law(q)
        mixed = np.einsum("k,...kd->...d", qv, self.all_cond_scores(z, t))
        return self.cond_score(z, t, y) - mixed

    def kl_divergence(self, q, z, t) -> np.ndarray:
        """``KL(q || p_t(y | z))``."""
        qv = self._law(q)
        joint = self.component_log_density(z, t) + np.log(self.weights)
        log_post = joint - logsumexp(joint, axis=-1, keepdims=True)
        nz = qv > 0
        return np.sum(qv[nz] * (np.log(qv[nz]) - log_post[..., nz]), axis=-1)

    def kl_gradient(self, q, z, t) -> np.ndarray:
        """Gradient in ``z`` of ``KL(q || p_t(y | z))``.

        For identity components ``grad log p_t(k | z) = (mu_k - mean_post) / (1 + sigma^2)``
        where ``mean_post`` is the posterior-averaged mean, hence the gradient is
        ``(mean_post - mean_q) / (1 + sigma^2)``.
        """
        qv = self._law(q)
        post = self.posterior_weight(z, t)
        mean_post = post @ self.means
        mean_q = qv @ self.means
        return (mean_post - mean_q) / np.expand_dims(self._variance(t), -1)

    def _law(self, q) -> np.ndarray:
        if isinstance(q, IndependentConditionLaw):
            return q.probs(self.n_components)
        qv = np.asarray(q, dtype=float)
        if qv.shape != (self.n_components,):
            raise DomainError(f"law has shape {qv.shape}, expected ({self.n_components},)")
        if np.any(qv < 0) or abs(qv.sum() - 1.0) > 1e-9:
            raise DomainError("law must be nonnegative and sum to 1")
        return qv

    # ------------------------------------------------------------------
    # serialisation

    def to_config(self) -> dict[str, str]:
        return {
            "dim": str(self.dim),
            "means": json.dumps(self.means.tolist()),
            "weights": json.dumps(self.weights.tolist()),
            "sigma_max": repr(float(self.sigma_max)),
        }

    @classmethod
    def from_config(cls, cfg) -> "GaussianMixture":
        means = np.asarray(json.loads(cfg["means"]), dtype=float)
        dim = int(cfg.get("dim", means.shape[-1]))
        if means.ndim != 2 or means.shape[1] != dim:
            raise DomainError(f"means do not have dimension {dim}")
        weights = json.loads(cfg["weights"]) if "weights" in cfg else None
        if weights is None:
            weights = np.full(means.shape[0], 1.0 / means.shape[0])
        sigma_max = float(cfg.get("sigma_max", 20.0))
        return cls(means, np.asarray(weights, dtype=float), NoiseSchedule(sigma_max))

    def __eq__(self, other):
        if not isinstance(other, GaussianMixture):
            return NotImplemented
        return (np.array_equal(self.means, other.means)
                and np.array_equal(self.weights, other.weights)
                and self.schedule == other.schedule)

    __hash__ = None


def sym_pair(sigma_max: float = 20.0) -> GaussianMixture:
    """Two unit Gaussians at ``(-2, 0)`` and ``(2, 0)`` with equal weights."""
    return GaussianMixture(np.array([[-2.0, 0.0], [2.0, 0.0]]), np.array([0.5, 0.5]),
                           NoiseSchedule(sigma_max))


class OracleDenoiser:
    """Exact posterior-mean denoiser of a mixture, usable wherever a model is.

    The null condition (``None`` or label ``-1``) yields the unconditional
    posterior mean, so CFG and ICG can be run against exact scores.  There
    is no embedding, so time-step guidance is unavailable.
    """

    has_null_token = True

    def __init__(self, mixture: GaussianMixture):
        self.mixture = mixture
        self.schedule = mixture.schedule
        self.dim = mixture.dim
        self.n_classes = mixture.n_components

    def denoise(self, z, t, cond=None, layer_embeddings=None) -> np.ndarray:
        if layer_embeddings is not None:
            raise DomainError("the oracle has no layer embeddings")
        mix = self.mixture
        z = np.asarray(z, dtype=float)
        if cond is None:
            return mix.denoise(z, t)
        cond = np.asarray(cond)
        if not np.issubdtype(cond.dtype, np.integer):
            raise DomainError("the oracle only accepts class labels or the null condition")
        null = cond == -1
        if not np.any(null):
            return mix.denoise(z, t, cond)
        out = mix.denoise(z, t)
        if np.all(null):
            return out
        safe = np.where(null, 0, cond)
        return np.where(np.expand_dims(null, -1), out, mix.denoise(z, t, safe))

    __call__ = denoise

    def denoiser_score(self, z, t, cond=None) -> np.ndarray:
        sigma = self.schedule.sigma(t)
        if np.any(sigma <= 0):
            raise DomainError("the score is undefined at sigma = 0")
        s2 = sigma ** 2 if np.ndim(sigma) == 0 else np.expand_dims(sigma, -1) ** 2
        return (self.denoise(z, t, cond) - np.asarray(z, float)) / s2
