"""Reverse-time integrators for the variance-exploding probability-flow ODE/SDE.

Step functions take a *denoise source* ``D(z, sigma) -> x_hat`` and work in
``sigma`` rather than ``t``; with ``sigma(t) = t * sigma_max`` the ODE
``dz = -sigma_dot * sigma * score dt`` becomes ``dz/dsigma = (z - D) / sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from guidelab.errors import DomainError, SamplingError
from guidelab.guidance import GuidanceConfig, GuidanceRng, guided_denoise

SOLVERS = ("euler_ode", "heun_ode", "euler_maruyama_sde", "langevin_churn")


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler settings.

    ``beta`` is the constant churn rate of the SDE (and the Langevin
    corrector strength for ``langevin_churn``).  Chains are processed in
    blocks of ``batch_size``; block ``b`` draws from a generator seeded by
    ``(seed, b)``, so results do not depend on how blocks are scheduled.
    """

    solver: str = "heun_ode"
    steps: int = 64
    sigma_min: float = 0.01
    sigma_max: float | None = None
    beta: float = 0.0
    seed: int = 0
    batch_size: int = 4096

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise DomainError(f"unknown solver {self.solver!r}")
        if self.steps < 1:
            raise DomainError("steps must be at least 1")
        if self.beta < 0:
            raise DomainError("beta must be nonnegative")
        if self.batch_size < 1:
            raise DomainError("batch_size must be positive")

    def to_config(self) -> dict[str, str]:
        return {
            "solver": self.solver,
            "steps": str(self.steps),
            "sigma_min": repr(self.sigma_min),
            "sigma_max": "" if self.sigma_max is None else repr(self.sigma_max),
            "beta": repr(self.beta),
            "seed": str(self.seed),
            "batch_size": str(self.batch_size),
        }

    @classmethod
    def from_config(cls, cfg) -> "SamplerConfig":
        kw = {}
        for name, conv in (("solver", str), ("steps", int), ("sigma_min", float),
                           ("beta", float), ("seed", int), ("batch_size", int)):
            if name in cfg:
                kw[name] = conv(cfg[name])
        if cfg.get("sigma_max", ""):
            kw["sigma_max"] = float(cfg["sigma_max"])
        return cls(**kw)


@dataclass
class Trajectory:
    """States of every chain after each step; ``states[0]`` is the initial draw."""

    sigmas: np.ndarray
    times: np.ndarray
    states: np.ndarray


def make_sigma_grid(cfg: SamplerConfig, sigma_max: float | None = None) -> np.ndarray:
    """``N + 1`` noise levels: geometric from ``sigma_max`` to ``sigma_min``, then 0."""
    sigma_max = cfg.sigma_max if cfg.sigma_max is not None else sigma_max
    if sigma_max is None:
        raise DomainError("sigma_max is not known")
    if not cfg.sigma_min > 0:
        raise DomainError("sigma_min must be positive")
    if cfg.steps > 1 and not cfg.sigma_min < sigma_max:
        raise DomainError("sigma_min must be below sigma_max")
    if cfg.steps == 1:
        return np.array([sigma_max, 0.0])
    return np.append(np.geomspace(sigma_max, cfg.sigma_min, cfg.steps), 0.0)


# ----------------------------------------------------------------------
# steps


def _check_sigma(sigma):
    if not sigma > 0:
        raise DomainError("the current noise level must be positive")


def euler_ode_step(denoise, z, sigma, sigma_next):
    _check_sigma(sigma)
    d = (z - denoise(z, sigma)) / sigma
    return z + (sigma_next - sigma) * d


def heun_ode_step(denoise, z, sigma, sigma_next):
    """Second-order step; falls back to Euler when ``sigma_next == 0``."""
    _check_sigma(sigma)
    if sigma_next == sigma:
        return z
    d = (z - denoise(z, sigma)) / sigma
    z_euler = z + (sigma_next - sigma) * d
    if sigma_next == 0:
        return z_euler
    d_next = (z_euler - denoise(z_euler, sigma_next)) / sigma_next
    return z + (sigma_next - sigma) * 0.5 * (d + d_next)


def euler_maruyama_step(denoise, z, sigma, sigma_next, beta, rng, sigma_max):
    """One Euler-Maruyama step of the reverse SDE with constant churn ``beta``.

    Drift ``-sigma_dot sigma score dt - beta sigma^2 score dt`` and diffusion
    ``sqrt(2 beta) sigma dW`` with ``dt = (sigma_next - sigma) / sigma_max < 0``.
    """
    _check_sigma(sigma)
    if beta == 0:
        return euler_ode_step(denoise, z, sigma, sigma_next)
    x_hat = denoise(z, sigma)
    score = (x_hat - z) / sigma ** 2
    dt = (sigma_next - sigma) / sigma_max
    z_ode = z + (sigma_next - sigma) * (z - x_hat) / sigma
    noise = np.sqrt(2.0 * beta * abs(dt)) * sigma * rng.standard_normal(np.shape(z))
    return z_ode - beta * sigma ** 2 * score * dt + noise


def langevin_churn_step(denoise, z, sigma, eta, rng, noise=True):
    """Langevin step ``z + eta * score + sqrt(2 eta) xi`` at fixed ``sigma``."""
    _check_sigma(sigma)
    if eta < 0:
        raise DomainError("eta must be nonnegative")
    score = (denoise(z, sigma) - z) / sigma ** 2
    out = z + eta * score
    if noise:
        out = out + np.sqrt(2.0 * eta) * rng.standard_normal(np.shape(z))
    return out


# ----------------------------------------------------------------------
# full sampler


def _labels_block(labels, lo, hi):
    if labels is None:
        return None
    labels = np.asarray(labels)
    return labels if labels.ndim == 0 else labels[lo:hi]


def _denoise_source(model, guidance, labels, rng, sigma_max, time_offset, t_floor):
    schedule = model.schedule

    def source(z, sigma):
        t = float(schedule.time(min(sigma, sigma_max)))
        if time_offset == 0.0:
            return guided_denoise(model, z, t, labels, guidance, rng)
        return _offset_denoise(model, z, t, labels, time_offset, t_floor)

    return source


def _offset_denoise(model, z, t, labels, delta, t_floor):
    # the whole network (input scaling included) sees the shifted time; the
    # floor keeps it inside the noise range the sampler itself visits
    return model.denoise(z, float(np.clip(t + delta, t_floor, 1.0)), labels)


def sample(model, guidance: GuidanceConfig | None, cfg: SamplerConfig, n: int,
           labels=None, return_trajectory: bool = False, time_offset: float = 0.0):
    """Draw ``n`` samples by integrating from ``sigma_max`` down to 0.

    Args:
        model: anything with ``denoise``/``schedule`` (trained net or oracle).
        guidance: guidance settings; ``None`` means unguided.
        labels: class per chain (array of length ``n`` or a scalar);
            ``None`` samples unconditionally through the null branch.
        time_offset: when nonzero, the model is evaluated at ``t + time_offset``
            (clipped to ``[t(sigma_min), 1]``) and guidance is skipped.

    Returns:
        ``(n, d)`` samples, and a :class:`Trajectory` if requested.

    Raises:
        SamplingError: if any state becomes non-finite.
    """
    guidance = guidance or GuidanceConfig()
    d = model.dim
    sigma_max = cfg.sigma_max if cfg.sigma_max is not None else model.schedule.sigma_max
    grid = make_sigma_grid(cfg, sigma_max)
    t_floor = float(model.schedule.time(cfg.sigma_min))
    if labels is not None and np.ndim(labels) and len(labels) != n:
        raise DomainError("need one label per chain")
    outs, states = [], []
    for block, lo in enumerate(range(0, n, cfg.batch_size)):
        hi = min(n, lo + cfg.batch_size)
        rng = np.random.default_rng([cfg.seed, block])
        grng = GuidanceRng([cfg.seed, guidance.seed, block])
        source = _denoise_source(model, guidance, _labels_block(labels, lo, hi), grng,
                                 sigma_max, time_offset, t_floor)
        z = sigma_max * rng.standard_normal((hi - lo, d))
        history = [z] if return_trajectory else None
        for i in range(cfg.steps):
            s, s_next = grid[i], grid[i + 1]
            if cfg.solver == "euler_ode":
                z = euler_ode_step(source, z, s, s_next)
            elif cfg.solver == "heun_ode":
                z = heun_ode_step(source, z, s, s_next)
            elif cfg.solver == "euler_maruyama_sde":
                z = euler_maruyama_step(source, z, s, s_next, cfg.beta, rng, sigma_max)
            else:
                z = euler_ode_step(source, z, s, s_next)
                if s_next > 0 and cfg.beta > 0:
                    eta = cfg.beta * s_next ** 2 * (s - s_next) / sigma_max
                    z = langevin_churn_step(source, z, s_next, eta, rng)
            if not np.all(np.isfinite(z)):
                raise SamplingError(i)
            if history is not None:
                history.append(z)
        outs.append(z)
        if history is not None:
            states.append(np.stack(history))
    points = np.concatenate(outs) if outs else np.empty((0, d))
    if not return_trajectory:
        return points
    traj_states = (np.concatenate(states, axis=1) if states
                   else np.empty((cfg.steps + 1, 0, d)))
    return points, Trajectory(grid, grid / sigma_max, traj_states)


def offset_time_sample(model, delta: float, cfg: SamplerConfig, n: int, labels=None):
    """Unguided sampling with the denoiser always told ``t + delta``.

    Positive ``delta`` makes every step remove too much noise (samples
    contract), negative ``delta`` too little.
    """
    return sample(model, None, cfg, n, labels=labels, time_offset=delta)


def balanced_labels(n: int, n_classes: int) -> np.ndarray:
    """``n`` labels cycling through the classes (equal counts up to one)."""
    return np.arange(n) % n_classes
