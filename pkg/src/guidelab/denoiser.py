"""Small MLP denoiser ``D(z, t, y)`` trained by denoising score matching.

Layout (``L`` hidden layers of width ``W``)::

    u   = z / sqrt(1 + sigma(t)^2)
    h_0 = u
    h_{l+1} = silu(W_l h_l + b_l + P_l e_l)      l = 0 .. L-1
    D   = W_out h_L + b_out + S u

where ``e_l = embed_time(t) + cond_table[y]`` unless a per-layer override is
supplied.  The per-layer injection is what lets time-step guidance perturb
only the leading layers, and accepting an explicit condition vector is what
lets independent-condition guidance use Gaussian-noise conditions.

Gradients are accumulated by hand; :func:`loss_and_grad` is checked against
finite differences in the test suite.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid

from guidelab.errors import CheckpointError, DomainError, TrainingError
from guidelab.gmm import GaussianMixture, NoiseSchedule, _check_time

CHECKPOINT_VERSION = 1
NULL = -1
"""Label value selecting the null token."""

_T_FLOOR = 1e-6


def embed_time(t, dim: int = 32, freq_min: float = 0.5, freq_max: float = 8.0) -> np.ndarray:
    """Sinusoidal features of ``log t``; shape ``(..., dim)``, entries in [-1, 1].

    The log warp spreads the three decades of noise levels the sampler visits
    evenly across the frequency bank.
    """
    if dim % 2:
        raise DomainError("embedding dimension must be even")
    t = _check_time(t)
    u = np.log(np.maximum(t, _T_FLOOR))
    freqs = np.geomspace(freq_min, freq_max, dim // 2)
    arg = u[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _silu(a):
    s = np.exp(-a)
    s += 1.0
    np.reciprocal(s, out=s)
    return a * s, s


@dataclass
class TrainConfig:
    """Recipe for :func:`train`.

    ``p_drop`` is the label-dropping probability; ``p_drop=0`` trains a purely
    conditional model.  Noise levels are drawn log-uniformly in
    ``[sigma_min, sigma_max]``.
    """

    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 20_000
    p_drop: float = 0.0
    sigma_min: float = 0.005
    optimizer: str = "sgd"
    seed: int = 0
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise DomainError("p_drop must lie in [0, 1]")
        if self.steps < 1 or self.batch_size < 1:
            raise DomainError("steps and batch_size must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0 or not self.sigma_min > 0:
            raise DomainError("lr and sigma_min must be positive")


class MlpDenoiser:
    """Denoiser network.  Evaluation never mutates the parameters.

    Args:
        dim: data dimension ``d``.
        n_classes: number of classes ``K``; the condition table has ``K + 1``
            rows, the last one being the null token.
        width: hidden width ``W``.
        depth: number of hidden layers ``L``.
        emb_dim: embedding dimension ``E``.
        schedule: noise schedule mapping ``t`` to ``sigma``.
        seed: initialisation seed.
        input_scaling: divide ``z`` by ``sqrt(1 + sigma^2)`` before the first layer.
    """

    def __init__(self, dim: int, n_classes: int, width: int = 128, depth: int = 6,
                 emb_dim: int = 32, schedule: NoiseSchedule | None = None, seed: int = 0,
                 input_scaling: bool = True, params: dict | None = None,
                 metadata: dict | None = None):
        if min(dim, n_classes, width, depth, emb_dim) < 1:
            raise DomainError("all network sizes must be positive")
        self.dim = dim
        self.n_classes = n_classes
        self.width = width
        self.depth = depth
        self.emb_dim = emb_dim
        self.schedule = schedule or NoiseSchedule()
        self.seed = seed
        self.input_scaling = input_scaling
        self.metadata = dict(metadata or {})
        self.params = params if params is not None else self._init_params(seed)

    @classmethod
    def for_mixture(cls, mixture: GaussianMixture, **kwargs) -> "MlpDenoiser":
        return cls(mixture.dim, mixture.n_components, schedule=mixture.schedule, **kwargs)

    def _init_params(self, seed: int) -> dict:
        rng = np.random.default_rng([seed, 2])
        W, E, d = self.width, self.emb_dim, self.dim
        p = {"cond_table": rng.standard_normal((self.n_classes + 1, E))}
        fan_in = d
        for l in range(self.depth):
            p[f"W{l}"] = rng.standard_normal((W, fan_in)) / np.sqrt(fan_in)
            p[f"b{l}"] = np.zeros(W)
            p[f"P{l}"] = rng.standard_normal((W, E)) / np.sqrt(E)
            fan_in = W
        p["W_out"] = rng.standard_normal((d, W)) / np.sqrt(W) * 0.1
        p["b_out"] = np.zeros(d)
        p["S"] = np.eye(d)
        return p

    def copy(self) -> "MlpDenoiser":
        return MlpDenoiser(self.dim, self.n_classes, self.width, self.depth, self.emb_dim,
                           self.schedule, self.seed, self.input_scaling,
                           {k: v.copy() for k, v in self.params.items()}, self.metadata)

    @property
    def has_null_token(self) -> bool:
        """Whether the null token was trained (label dropping was used)."""
        return self.metadata.get("p_drop", 0.0) > 0.0

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # ------------------------------------------------------------------
    # embeddings

    def embed_time(self, t) -> np.ndarray:
        return embed_time(t, self.emb_dim)

    def cond_embedding(self, cond, n: int) -> np.ndarray:
        """Resolve ``cond`` to an ``(n, E)`` array of condition vectors.

        ``cond`` may be ``None`` (null token), an integer label or integer
        array (``NULL`` selects the null token per sample), or a float array
        whose last axis has length ``E`` (used verbatim).
        """
        table = self.params["cond_table"]
        if cond is None:
            return np.broadcast_to(table[self.n_classes], (n, self.emb_dim))
        cond = np.asarray(cond)
        if np.issubdtype(cond.dtype, np.floating):
            if cond.shape[-1] != self.emb_dim:
                raise DomainError(f"explicit condition must have length {self.emb_dim}")
            return np.broadcast_to(cond, (n, self.emb_dim))
        if not np.issubdtype(cond.dtype, np.integer):
            raise DomainError(f"unsupported condition {cond!r}")
        return np.broadcast_to(table[self._rows(cond)], (n, self.emb_dim))

    def _rows(self, labels: np.ndarray) -> np.ndarray:
        if np.any((labels < 0) & (labels != NULL)) or np.any(labels >= self.n_classes):
            raise DomainError(f"class index out of range [0, {self.n_classes})")
        return np.where(labels == NULL, self.n_classes, labels)

    def base_embedding(self, t, cond, n: int) -> np.ndarray:
        """The vector ``embed_time(t) + e_cond`` injected into every layer."""
        t = np.asarray(t, dtype=float)
        if t.ndim and t.size and np.all(t == t.flat[0]):
            t = t.flat[0]
        e_t = np.broadcast_to(self.embed_time(t), (n, self.emb_dim))
        return e_t + self.cond_embedding(cond, n)

    # ------------------------------------------------------------------
    # evaluation

    def _inputs(self, z, t):
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        z2 = np.atleast_2d(z)
        n = z2.shape[0]
        t = np.broadcast_to(_check_time(t), (n,))
        if self.input_scaling:
            u = z2 / np.sqrt(1.0 + self.schedule.sigma(t) ** 2)[:, None]
        else:
            u = z2
        return z2, u, t, n, single

    def _forward(self, u, embeddings):
        p = self.params
        hs, gates, acts = [u], [], []
        h = u
        for l in range(self.depth):
            a = h @ p[f"W{l}"].T
            a += p[f"b{l}"]
            a += embeddings[l] @ p[f"P{l}"].T
            h, s = _silu(a)
            acts.append(a)
            gates.append(s)
            hs.append(h)
        out = h @ p["W_out"].T + p["b_out"] + u @ p["S"].T
        return out, (hs, acts, gates)

    def _forward_eval(self, u, embeddings):
        # same operations as _forward, written into reused buffers: large
        # temporaries otherwise dominate the cost through page faults
        p = self.params
        n = u.shape[0]
        a = np.empty((n, self.width))
        s = np.empty_like(a)
        proj = np.empty_like(a)
        h_next = np.empty_like(a)
        h = u
        for l in range(self.depth):
            np.matmul(h, p[f"W{l}"].T, out=a)
            a += p[f"b{l}"]
            np.matmul(embeddings[l], p[f"P{l}"].T, out=proj)
            a += proj
            np.negative(a, out=s)
            np.exp(s, out=s)
            s += 1.0
            np.reciprocal(s, out=s)
            np.multiply(a, s, out=h_next)
            h, h_next = h_next, (h if l else np.empty_like(a))
        return h @ p["W_out"].T + p["b_out"] + u @ p["S"].T

    def denoise(self, z, t, cond=None, layer_embeddings: Sequence | None = None) -> np.ndarray:
        """Predict the clean point from ``z`` at time ``t``.

        Args:
            z: noisy points ``(n, d)`` or a single ``(d,)`` point.
            t: scalar time or one time per point.
            cond: see :meth:`cond_embedding`.
            layer_embeddings: optional list of exactly ``L`` arrays, each
                broadcastable to ``(n, E)``, replacing the injected vector of
                the corresponding layer.
        """
        z2, u, t, n, single = self._inputs(z, t)
        if layer_embeddings is None:
            e = self.base_embedding(t, cond, n)
            embeddings = [e] * self.depth
        else:
            if len(layer_embeddings) != self.depth:
                raise DomainError(f"expected {self.depth} layer embeddings, "
                                  f"got {len(layer_embeddings)}")
            embeddings = [np.broadcast_to(np.asarray(e, float), (n, self.emb_dim))
                          for e in layer_embeddings]
        out = self._forward_eval(u, embeddings)
        return out[0] if single else out

    __call__ = denoise

    def denoiser_score(self, z, t, cond=None, layer_embeddings=None) -> np.ndarray:
        """Score estimate ``(D(z, t, cond) - z) / sigma(t)^2``."""
        sigma = self.schedule.sigma(t)
        if np.any(sigma <= 0):
            raise DomainError("the score is undefined at sigma = 0")
        x_hat = self.denoise(z, t, cond, layer_embeddings)
        z = np.asarray(z, dtype=float)
        s2 = sigma ** 2 if np.ndim(sigma) == 0 else sigma[:, None] ** 2
        return (x_hat - z) / s2

    def time_derivative(self, z, t, cond=None, h: float = 1e-4) -> np.ndarray:
        """Central difference ``(D(z, t + h) - D(z, t - h)) / 2h``."""
        if not h > 0:
            raise DomainError("h must be positive")
        t = np.asarray(t, dtype=float)
        if np.any(t - h < 0) or np.any(t + h > 1):
            raise DomainError("finite-difference stencil leaves [0, 1]")
        return (self.denoise(z, t + h, cond) - self.denoise(z, t - h, cond)) / (2 * h)

    # ------------------------------------------------------------------
    # training objective

    def loss_and_grad(self, x, z, t, labels) -> tuple[float, dict]:
        """Batch loss ``mean_i ||D(z_i, t_i, y_i) - x_i||^2`` and its gradient."""
        p = self.params
        z2, u, t, n, _ = self._inputs(z, t)
        rows = self._rows(np.asarray(labels))
        e = self.embed_time(t) + p["cond_table"][rows]
        out, (hs, acts, gates) = self._forward(u, [e] * self.depth)
        r = out - x
        loss = float(np.sum(r * r) / n)

        g = {}
        g_out = 2.0 * r / n
        g["W_out"] = g_out.T @ hs[-1]
        g["b_out"] = g_out.sum(0)
        g["S"] = g_out.T @ u
        dh = g_out @ p["W_out"]
        de = np.zeros_like(e)
        for l in reversed(range(self.depth)):
            a, s = acts[l], gates[l]
            da = dh * (s * (1.0 + a * (1.0 - s)))
            g[f"W{l}"] = da.T @ hs[l]
            g[f"b{l}"] = da.sum(0)
            g[f"P{l}"] = da.T @ e
            de += da @ p[f"P{l}"]
            if l:
                dh = da @ p[f"W{l}"]
        g_table = np.zeros_like(p["cond_table"])
        np.add.at(g_table, rows, de)
        g["cond_table"] = g_table
        return loss, g


def gradient_check(model: MlpDenoiser, x, z, t, labels, n_params: int = 20, h: float = 1e-5,
                   seed: int = 0) -> float:
    """Largest relative error of :meth:`MlpDenoiser.loss_and_grad` against central differences.

    ``n_params`` entries are drawn uniformly over all parameter arrays; the
    denominator is floored at ``1e-6`` so entries with vanishing gradient
    (unused condition rows) compare on an absolute scale.  The model's
    parameters are restored exactly afterwards.
    """
    rng = np.random.default_rng(seed)
    _, grads = model.loss_and_grad(x, z, t, labels)
    names = sorted(model.params)
    sizes = np.array([model.params[k].size for k in names])
    worst = 0.0
    for flat in rng.choice(sizes.sum(), size=n_params, replace=False):
        i = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        arr = model.params[names[i]].reshape(-1)
        j = flat - (sizes[:i].sum() if i else 0)
        keep = arr[j]
        arr[j] = keep + h
        up, _ = model.loss_and_grad(x, z, t, labels)
        arr[j] = keep - h
        down, _ = model.loss_and_grad(x, z, t, labels)
        arr[j] = keep
        fd = (up - down) / (2 * h)
        analytic = grads[names[i]].reshape(-1)[j]
        worst = max(worst, abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-6))
    return worst


# ----------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: MlpDenoiser
    losses: np.ndarray
    snapshots: dict = field(default_factory=dict)


def _sgd(params, grads, state, lr):
    for k, g in grads.items():
        params[k] -= lr * g


def _adam(params, grads, state, lr, b1=0.9, b2=0.999, eps=1e-8):
    state["t"] = state.get("t", 0) + 1
    c1 = 1 - b1 ** state["t"]
    c2 = 1 - b2 ** state["t"]
    for k, g in grads.items():
        m = state.setdefault(("m", k), np.zeros_like(g))
        v = state.setdefault(("v", k), np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def train(mixture: GaussianMixture, cfg: TrainConfig, model: MlpDenoiser | None = None,
          snapshots: Sequence[float] = (), **model_kwargs) -> TrainResult:
    """Fit a denoiser to ``mixture`` with the denoising score-matching loss.

    Each step draws a fresh batch of labelled points, noise levels and noise.
    With probability ``cfg.p_drop`` a label is replaced by the null token.
    The data stream depends only on ``cfg.seed``, so runs that differ only in
    ``p_drop`` see identical ``(x, y, sigma, eps)`` batches.

    Args:
        snapshots: training fractions in (0, 1] at which a copy of the model
            is kept in ``TrainResult.snapshots``.

    Raises:
        TrainingError: if the loss becomes non-finite or exceeds
            ``cfg.divergence_threshold``.
    """
    if model is None:
        model_kwargs.setdefault("seed", cfg.seed)
        model = MlpDenoiser.for_mixture(mixture, **model_kwargs)
    else:
        model = model.copy()
    data_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])
    step_fn = _sgd if cfg.optimizer == "sgd" else _adam
    state: dict = {}
    snap_steps = {max(1, int(round(f * cfg.steps))): f for f in snapshots}
    kept = {}
    losses = np.empty(cfg.steps)
    B, K, d = cfg.batch_size, mixture.n_components, mixture.dim
    log_lo, log_hi = np.log(cfg.sigma_min), np.log(mixture.sigma_max)
    for step in range(cfg.steps):
        labels = data_rng.choice(K, size=B, p=mixture.weights)
        x = mixture.means[labels] + data_rng.standard_normal((B, d))
        sigma = np.exp(data_rng.uniform(log_lo, log_hi, size=B))
        z = x + sigma[:, None] * data_rng.standard_normal((B, d))
        dropped = drop_rng.random(B) < cfg.p_drop
        labels = np.where(dropped, NULL, labels)
        t = mixture.schedule.time(sigma)
        loss, grads = model.loss_and_grad(x, z, t, labels)
        if not np.isfinite(loss) or loss > cfg.divergence_threshold:
            raise TrainingError(step, loss)
        losses[step] = loss
        step_fn(model.params, grads, state, cfg.lr)
        if step + 1 in snap_steps:
            snap = model.copy()
            snap.metadata.update(_train_metadata(cfg, step + 1))
            kept[snap_steps[step + 1]] = snap
    model.metadata.update(_train_metadata(cfg, cfg.steps))
    return TrainResult(model, losses, kept)


def _train_metadata(cfg: TrainConfig, steps_done: int) -> dict:
    meta = asdict(cfg)
    meta["steps_done"] = steps_done
    return meta


def smooth(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    values = np.asarray(values, dtype=float)
    if values.size < window:
        return np.array([values.mean()])
    c = np.cumsum(np.insert(values, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def mmse_floor(mixture: GaussianMixture, sigma_min: float = 0.005, n: int = 4001) -> float:
    """Conditional MMSE ``E_sigma[d sigma^2 / (1 + sigma^2)]`` under the log-uniform law."""
    log_sigma = np.linspace(np.log(sigma_min), np.log(mixture.sigma_max), n)
    s2 = np.exp(2 * log_sigma)
    vals = mixture.dim * s2 / (1 + s2)
    return float(trapezoid(vals, log_sigma) / (log_sigma[-1] - log_sigma[0]))


def write_loss_csv(losses, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{float(v)!r}\n")


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MlpDenoiser, path) -> None:
    """Write a versioned ``.npz`` container with weights, sizes and metadata."""
    header = {
        "version": CHECKPOINT_VERSION,
        "dim": model.dim,
        "n_classes": model.n_classes,
        "width": model.width,
        "depth": model.depth,
        "emb_dim": model.emb_dim,
        "sigma_max": model.schedule.sigma_max,
        "seed": model.seed,
        "input_scaling": model.input_scaling,
        "metadata": model.metadata,
        "param_names": sorted(model.params),
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    buf = io.BytesIO()
    np.savez(buf, header=np.array(json.dumps(header)), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expect_dim: int | None = None) -> MlpDenoiser:
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            params = {k: data[f"param/{k}"].copy() for k in header["param_names"]}
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if expect_dim is not None and header["dim"] != expect_dim:
        raise CheckpointError(f"checkpoint dim {header['dim']} != expected {expect_dim}")
    model = MlpDenoiser(header["dim"], header["n_classes"], header["width"], header["depth"],
                        header["emb_dim"], NoiseSchedule(header["sigma_max"]), header["seed"],
                        header["input_scaling"], params, header["metadata"])
    expected = model._init_params(0)
    for k, v in expected.items():
        if k not in params or params[k].shape != v.shape:
            raise CheckpointError(f"parameter {k} missing or mis-shaped")
    return model
