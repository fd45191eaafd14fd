"""Sample-quality metrics on raw coordinates.

Desk-scale stand-ins for FID and improved precision/recall: a Gaussian
Frechet distance between moment fits and k-NN manifold precision/recall.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from guidelab.errors import DomainError
from guidelab.gmm import GaussianMixture

_REG = 1e-9


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + Tr(A + B - 2 (A^1/2 B A^1/2)^1/2)``."""
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def _moments(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < d + 1:
        raise DomainError(f"need at least {d + 1} points of dimension {d}")
    return x.mean(0), np.atleast_2d(np.cov(x, rowvar=False))


def frechet_gaussian(samples_a, samples_b, return_flag: bool = False):
    """Frechet distance between Gaussian fits of two point sets.

    Singular covariances get ``1e-9 * I`` added; ``return_flag=True`` also
    returns whether that happened.
    """
    d = np.shape(samples_a)[-1]
    mu_a, cov_a = _moments(samples_a, d)
    mu_b, cov_b = _moments(samples_b, d)
    flagged = False
    for cov in (cov_a, cov_b):
        if np.linalg.eigvalsh(cov).min() <= _REG:
            flagged = True
    if flagged:
        cov_a = cov_a + _REG * np.eye(d)
        cov_b = cov_b + _REG * np.eye(d)
    # symmetrise the result; the two cross terms agree to rounding
    value = 0.5 * (frechet_from_moments(mu_a, cov_a, mu_b, cov_b)
                   + frechet_from_moments(mu_b, cov_b, mu_a, cov_a))
    return (value, flagged) if return_flag else value


def _kth_radius(points: np.ndarray, k: int) -> np.ndarray:
    dist, _ = cKDTree(points).query(points, k=k + 1)
    return dist[:, k]


def _covered(queries: np.ndarray, centers: np.ndarray, radii: np.ndarray,
             n_buckets: int = 8, probe: int = 32) -> np.ndarray:
    """Whether each query lies in at least one ball ``|q - c_j| <= r_j``."""
    covered = np.zeros(len(queries), dtype=bool)
    order = np.argsort(radii, kind="stable")
    for bucket in np.array_split(order, n_buckets):
        if bucket.size == 0:
            continue
        todo = np.flatnonzero(~covered)
        if todo.size == 0:
            break
        c, r = centers[bucket], radii[bucket]
        r_hi = r.max()
        tree = cKDTree(c)
        kk = min(probe, bucket.size)
        dist, idx = tree.query(queries[todo], k=kk, distance_upper_bound=r_hi)
        dist = dist.reshape(len(todo), kk)
        idx = idx.reshape(len(todo), kk)
        found = dist <= np.where(idx < bucket.size, r[np.minimum(idx, bucket.size - 1)], -1.0)
        hit = found.any(1)
        saturated = ~hit & np.isfinite(dist[:, -1])
        for j in np.flatnonzero(saturated):
            q = queries[todo[j]]
            near = tree.query_ball_point(q, r_hi)
            if near:
                near = np.asarray(near)
                hit[j] = np.any(np.linalg.norm(c[near] - q, axis=1) <= r[near])
        covered[todo[hit]] = True
    return covered


def knn_precision_recall(samples, reference, k: int = 5) -> tuple[float, float]:
    """Improved precision/recall with k-NN balls on raw coordinates.

    Precision is the fraction of samples inside some reference ball (radius =
    distance to the k-th nearest other reference point); recall swaps roles.
    """
    samples = np.asarray(samples, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if k < 1 or k >= len(samples) or k >= len(reference):
        raise DomainError("k must be at least 1 and smaller than both set sizes")
    r_ref = _kth_radius(reference, k)
    r_smp = _kth_radius(samples, k)
    precision = float(_covered(samples, reference, r_ref).mean())
    recall = float(_covered(reference, samples, r_smp).mean())
    return precision, recall


def mode_stats(samples, mixture: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of samples nearest each mean and their mean distance to it."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or len(samples) == 0:
        raise DomainError("mode_stats needs a non-empty (n, d) array")
    dist = np.linalg.norm(samples[:, None, :] - mixture.means, axis=-1)
    nearest = dist.argmin(1)
    K = mixture.n_components
    fractions = np.bincount(nearest, minlength=K) / len(samples)
    mean_dist = np.array([dist[nearest == k, k].mean() if np.any(nearest == k) else np.nan
                          for k in range(K)])
    return fractions, mean_dist


def score_field_mse(model, oracle: GaussianMixture, t_list, n_probe: int = 1000,
                    conditional: bool = True, seed: int = 0) -> float:
    """Mean squared score error against the exact field over ``z ~ p_t``."""
    errs = []
    for i, t in enumerate(t_list):
        x, y = oracle.sample_data(n_probe, seed + i)
        z = oracle.forward_perturb(x, t, seed + 1000 + i)
        if conditional:
            est = model.denoiser_score(z, t, y)
            ref = oracle.cond_score(z, t, y)
        else:
            est = model.denoiser_score(z, t, None)
            ref = oracle.uncond_score(z, t)
        errs.append(np.mean(np.sum((est - ref) ** 2, axis=1)))
    return float(np.mean(errs))


@dataclass
class MetricsReport:
    """Metrics for one sample set.

    For class-conditional runs ``frechet``, ``precision`` and ``recall`` are
    averaged over classes (each class against its own reference points) and
    ``frechet_pooled`` compares the pooled sets.
    """

    frechet: float
    precision: float
    recall: float
    frechet_pooled: float
    mode_fractions: list = field(default_factory=list)
    mode_mean_dist: list = field(default_factory=list)
    score_mse: float | None = None
    regularized: bool = False

    def __post_init__(self):
        for name in ("frechet", "precision", "recall", "frechet_pooled"):
            if not np.isfinite(getattr(self, name)):
                raise DomainError(f"{name} is not finite")
        if not (0 <= self.precision <= 1 and 0 <= self.recall <= 1):
            raise DomainError("precision and recall must lie in [0, 1]")

    @property
    def max_mode_fraction(self) -> float:
        return float(max(self.mode_fractions)) if self.mode_fractions else float("nan")

    def columns(self) -> list[str]:
        cols = ["frechet", "precision", "recall", "frechet_pooled", "max_mode_fraction"]
        cols += [f"mode{k}_fraction" for k in range(len(self.mode_fractions))]
        cols += [f"mode{k}_mean_dist" for k in range(len(self.mode_mean_dist))]
        return cols + ["score_mse", "regularized"]

    def row(self) -> dict:
        out = {k: v for k, v in asdict(self).items()
               if k not in ("mode_fractions", "mode_mean_dist")}
        out["max_mode_fraction"] = self.max_mode_fraction
        for k, v in enumerate(self.mode_fractions):
            out[f"mode{k}_fraction"] = v
        for k, v in enumerate(self.mode_mean_dist):
            out[f"mode{k}_mean_dist"] = v
        out["score_mse"] = "" if self.score_mse is None else self.score_mse
        return {c: out[c] for c in self.columns()}

    def to_csv_row(self) -> str:
        return ",".join(_csv(v) for v in self.row().values())

    def csv_header(self) -> str:
        return ",".join(self.columns())


def _csv(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def evaluate(samples, labels, reference, ref_labels, mixture: GaussianMixture,
             k: int = 5) -> MetricsReport:
    """Metrics of ``samples`` against ``reference``.

    With ``labels`` given, quality is assessed per class against the
    reference points of that class and averaged; otherwise the pooled sets
    are compared.
    """
    samples = np.asarray(samples, dtype=float)
    reference = np.asarray(reference, dtype=float)
    pooled, flag = frechet_gaussian(samples, reference, return_flag=True)
    if labels is None:
        fd, (prec, rec) = pooled, knn_precision_recall(samples, reference, k)
    else:
        labels = np.asarray(labels)
        ref_labels = np.asarray(ref_labels)
        fds, precs, recs = [], [], []
        for c in np.unique(labels):
            a, b = samples[labels == c], reference[ref_labels == c]
            f, fl = frechet_gaussian(a, b, return_flag=True)
            flag |= fl
            p, r = knn_precision_recall(a, b, k)
            fds.append(f)
            precs.append(p)
            recs.append(r)
        fd, prec, rec = float(np.mean(fds)), float(np.mean(precs)), float(np.mean(recs))
    fractions, dists = mode_stats(samples, mixture)
    return MetricsReport(fd, prec, rec, pooled, fractions.tolist(), dists.tolist(),
                         regularized=flag)
