"""Classifier-free, independent-condition and time-step guidance.

Every rule is written as a correction around the conditional prediction,
``D(z, t, y) + (w - 1) * (D(z, t, y) - D_weak)``, which is algebraically the
usual ``D_weak + w * (D(z, t, y) - D_weak)`` but returns the conditional
prediction bit-for-bit at ``w = 1``.  The weak branch is

* CFG: the null condition,
* ICG: a condition drawn independently of ``z``,
* TSG: the same condition with a noise-perturbed time-step embedding.

Any object with ``denoise(z, t, cond, layer_embeddings=None)`` can be guided;
TSG and Gaussian-noise ICG additionally need the embedding helpers of
:class:`~guidelab.denoiser.MlpDenoiser`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from guidelab.errors import ConfigurationError, DomainError
from guidelab.gmm import IndependentConditionLaw

RULES = ("none", "cfg", "icg", "tsg", "icg_and_tsg")
ICG_MODES = ("random_condition", "gaussian_noise")


@dataclass(frozen=True)
class TsgSchedule:
    """Noise schedule for the perturbed time-step embedding.

    The perturbation std is ``s`` (``kind="constant"``) or ``s * t**alpha``
    (``kind="power"``), times ``std(e_t)`` when ``std_scaling`` is on.  It is
    applied only for ``t`` in ``[t_min, t_max]`` and only to the first
    ``layer_count`` layers (``None`` means all layers).
    """

    kind: str = "power"
    s: float = 1.0
    alpha: float = 1.0
    t_min: float = 0.0
    t_max: float = 1.0
    std_scaling: bool = True
    layer_count: int | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "power"):
            raise DomainError(f"unknown TSG schedule kind {self.kind!r}")
        if self.s < 0:
            raise DomainError("TSG noise scale must be nonnegative")
        if not 0.0 <= self.t_min <= self.t_max <= 1.0:
            raise DomainError("need 0 <= t_min <= t_max <= 1")
        if self.layer_count is not None and self.layer_count < 0:
            raise DomainError("layer_count must be nonnegative")

    def active(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (t >= self.t_min) & (t <= self.t_max)

    def noise_std(self, t, e_t) -> np.ndarray:
        """Per-sample perturbation std (zero where the gate is closed)."""
        t = np.asarray(t, dtype=float)
        scale = np.full(t.shape, float(self.s))
        if self.kind == "power":
            scale = scale * t ** self.alpha
        if self.std_scaling:
            scale = scale * np.std(e_t, axis=-1)
        return np.where(self.active(t), scale, 0.0)


@dataclass(frozen=True)
class GuidanceConfig:
    """Which guidance rule to apply and with what parameters.

    ``icg_scale`` multiplies the class-table std in the Gaussian-noise ICG
    mode; ``icg_law`` is the condition law of the random-condition mode.
    """

    rule: str = "none"
    w_cfg: float = 1.0
    w_icg: float = 1.0
    w_tsg: float = 1.0
    icg_mode: str = "random_condition"
    icg_scale: float = 1.0
    icg_law: IndependentConditionLaw = field(default_factory=IndependentConditionLaw)
    tsg: TsgSchedule = field(default_factory=TsgSchedule)
    seed: int = 0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigurationError(f"unknown guidance rule {self.rule!r}")
        if self.icg_mode not in ICG_MODES:
            raise ConfigurationError(f"unknown ICG mode {self.icg_mode!r}")
        if min(self.w_cfg, self.w_icg, self.w_tsg) < 0 or self.icg_scale < 0:
            raise ConfigurationError("guidance weights and scales must be nonnegative")

    @property
    def evaluations(self) -> int:
        """Model evaluations per call."""
        return {"none": 1, "icg_and_tsg": 3}.get(self.rule, 2)

    def to_config(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "icg_law":
                out["icg_law"] = v.mode
                if v.k is not None:
                    out["icg_law_k"] = str(v.k)
                if v.probabilities is not None:
                    out["icg_law_probabilities"] = ",".join(repr(p) for p in v.probabilities)
            elif f.name == "tsg":
                for g in fields(v):
                    out[f"tsg_{g.name}"] = _fmt(getattr(v, g.name))
            else:
                out[f.name] = _fmt(v)
        return out

    @classmethod
    def from_config(cls, cfg) -> "GuidanceConfig":
        cfg = dict(cfg)
        kw = {}
        for name, conv in (("rule", str), ("w_cfg", float), ("w_icg", float),
                           ("w_tsg", float), ("icg_mode", str), ("icg_scale", float),
                           ("seed", int)):
            if name in cfg:
                kw[name] = conv(cfg[name])
        if "icg_law" in cfg:
            k = cfg.get("icg_law_k")
            probs = cfg.get("icg_law_probabilities")
            kw["icg_law"] = IndependentConditionLaw(
                cfg["icg_law"], None if k in (None, "") else int(k),
                None if not probs else tuple(float(p) for p in probs.split(",")))
        tsg = {}
        for g in fields(TsgSchedule):
            key = f"tsg_{g.name}"
            if key in cfg:
                tsg[g.name] = _parse(cfg[key], g.name)
        kw["tsg"] = TsgSchedule(**tsg)
        return cls(**kw)

    def with_weight(self, w: float) -> "GuidanceConfig":
        """Copy with the weight of the active single rule set to ``w``."""
        key = {"cfg": "w_cfg", "icg": "w_icg", "tsg": "w_tsg"}.get(self.rule)
        if key is None:
            raise ConfigurationError(f"rule {self.rule!r} has no single weight")
        return replace(self, **{key: float(w)})


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, name: str):
    if name in ("kind",):
        return text
    if name == "std_scaling":
        return text.strip().lower() in ("1", "true", "yes", "on")
    if name == "layer_count":
        return None if text.strip() == "" else int(text)
    return float(text)


class GuidanceRng:
    """Independent random streams for ICG conditions and TSG noise.

    Keeping the streams separate means a combined run with one weight at 1
    consumes exactly the random numbers of the corresponding single rule.
    """

    def __init__(self, seed):
        icg_seq, tsg_seq = np.random.SeedSequence(seed).spawn(2)
        self.icg = np.random.default_rng(icg_seq)
        self.tsg = np.random.default_rng(tsg_seq)


def _streams(rng):
    if isinstance(rng, GuidanceRng):
        return rng.icg, rng.tsg
    return rng, rng


def _n_points(z) -> tuple[int, bool]:
    z = np.asarray(z)
    return (1, True) if z.ndim == 1 else (z.shape[0], False)


# ----------------------------------------------------------------------
# independent conditions


def draw_independent_condition(mode: str, rng: np.random.Generator, n: int, n_classes: int,
                               law: IndependentConditionLaw | None = None, scale: float = 1.0,
                               reference_std: float | None = None, emb_dim: int | None = None):
    """Draw ``n`` conditions independent of the noisy input.

    The noisy input is deliberately not an argument.

    Returns:
        Integer labels (``random_condition``) or an ``(n, emb_dim)`` array of
        Gaussian vectors with std ``scale * reference_std`` (``gaussian_noise``).
    """
    if mode == "random_condition":
        law = law or IndependentConditionLaw()
        return law.sample(rng, n_classes, n)
    if mode == "gaussian_noise":
        if reference_std is None or emb_dim is None:
            raise ConfigurationError("gaussian_noise mode needs an embedding reference scale")
        return rng.standard_normal((n, emb_dim)) * (scale * reference_std)
    raise ConfigurationError(f"unknown ICG mode {mode!r}")


def _draw_for_model(model, guidance: GuidanceConfig, rng, n):
    if guidance.icg_mode == "gaussian_noise":
        if not hasattr(model, "params"):
            raise ConfigurationError("gaussian_noise ICG needs a model with a condition table")
        table = model.params["cond_table"][: model.n_classes]
        return draw_independent_condition("gaussian_noise", rng, n, model.n_classes,
                                          scale=guidance.icg_scale,
                                          reference_std=float(np.std(table)),
                                          emb_dim=model.emb_dim)
    return draw_independent_condition("random_condition", rng, n, model.n_classes,
                                      law=guidance.icg_law)


# ----------------------------------------------------------------------
# rules


def cfg_denoise(model, z, t, y, w: float) -> np.ndarray:
    """Classifier-free guidance with the null condition as the weak branch."""
    if not getattr(model, "has_null_token", False):
        raise ConfigurationError(
            "model was trained without label dropping, so its null token is meaningless; "
            "use ICG (rule='icg') instead")
    d_cond = model.denoise(z, t, y)
    d_null = model.denoise(z, t, None)
    return d_cond + (w - 1.0) * (d_cond - d_null)


def icg_denoise(model, z, t, y, w: float, guidance: GuidanceConfig | None = None,
                rng=None) -> np.ndarray:
    """Independent condition guidance; a fresh condition is drawn per call."""
    guidance = guidance or GuidanceConfig(rule="icg", w_icg=w)
    rng = rng if rng is not None else np.random.default_rng(guidance.seed)
    icg_rng, _ = _streams(rng)
    n, single = _n_points(z)
    y_hat = _draw_for_model(model, guidance, icg_rng, n)
    if single:
        y_hat = y_hat[0]
    d_cond = model.denoise(z, t, y)
    d_ind = model.denoise(z, t, y_hat)
    return d_cond + (w - 1.0) * (d_cond - d_ind)


def tsg_perturb_embedding(e_t, t, sched: TsgSchedule, rng: np.random.Generator) -> np.ndarray:
    """Add ``N(0, std^2)`` noise to the time embedding inside the gating interval."""
    e_t = np.asarray(e_t, dtype=float)
    std = sched.noise_std(t, e_t)
    if not np.any(std > 0):
        return e_t
    noise = rng.standard_normal(e_t.shape)
    return e_t + noise * np.expand_dims(std, -1)


def _perturbed_layers(model, z, t, cond, sched: TsgSchedule, rng):
    if not hasattr(model, "embed_time"):
        raise ConfigurationError("time-step guidance needs a model with a time embedding")
    n, _ = _n_points(z)
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    e_t = np.broadcast_to(model.embed_time(t_arr), (n, model.emb_dim))
    e_c = model.cond_embedding(cond, n)
    e_tilde = tsg_perturb_embedding(e_t, t_arr, sched, rng)
    clean = e_t + e_c
    perturbed = e_tilde + e_c
    count = model.depth if sched.layer_count is None else min(sched.layer_count, model.depth)
    return [perturbed] * count + [clean] * (model.depth - count)


def tsg_denoise(model, z, t, cond, w: float, sched: TsgSchedule, rng) -> np.ndarray:
    """Time-step guidance; works for conditional (``cond``) and unconditional (``None``) calls."""
    _, tsg_rng = _streams(rng)
    layers = _perturbed_layers(model, z, t, cond, sched, tsg_rng)
    d_clean = model.denoise(z, t, cond)
    d_pert = model.denoise(z, t, cond, layer_embeddings=layers)
    return d_clean + (w - 1.0) * (d_clean - d_pert)


def guided_denoise(model, z, t, y, guidance: GuidanceConfig, rng) -> np.ndarray:
    """Apply ``guidance.rule``; ``y=None`` requests the unconditional branch."""
    rule = guidance.rule
    if rule == "none":
        return model.denoise(z, t, y)
    if rule == "cfg":
        return cfg_denoise(model, z, t, y, guidance.w_cfg)
    if rule == "icg":
        return icg_denoise(model, z, t, y, guidance.w_icg, guidance, rng)
    if rule == "tsg":
        return tsg_denoise(model, z, t, y, guidance.w_tsg, guidance.tsg, rng)
    # icg_and_tsg: both corrections share the conditional evaluation
    icg_rng, tsg_rng = _streams(rng)
    layers = _perturbed_layers(model, z, t, y, guidance.tsg, tsg_rng)
    n, single = _n_points(z)
    y_hat = _draw_for_model(model, guidance, icg_rng, n)
    if single:
        y_hat = y_hat[0]
    d_cond = model.denoise(z, t, y)
    d_ind = model.denoise(z, t, y_hat)
    d_pert = model.denoise(z, t, y, layer_embeddings=layers)
    return (d_cond + (guidance.w_icg - 1.0) * (d_cond - d_ind)
            + (guidance.w_tsg - 1.0) * (d_cond - d_pert))
