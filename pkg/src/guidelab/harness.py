"""Config-driven experiment harness.

An :class:`ExperimentConfig` is a plain-text INI file with one section per
concern (``run``, ``mixture``, ``model``, ``train``, ``guidance``,
``sampler``, ``sweep``).  :class:`Lab` owns the trained models, the
reference sets and a cache of evaluated cells, so commands that share a
cell (the unguided baseline, say) sample it once.

Seeds: every random quantity of a cell derives from ``(master seed, stream,
index)``.  Evaluation repeats use indices ``0 .. eval_seeds - 1``; weight
tuning uses a separate held-out index.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from guidelab import __version__
from guidelab.denoiser import (MlpDenoiser, TrainConfig, load_checkpoint, mmse_floor,
                               save_checkpoint, smooth, train, write_loss_csv)
from guidelab.errors import ConfigurationError
from guidelab.gmm import GaussianMixture, sym_pair
from guidelab.guidance import GuidanceConfig, TsgSchedule
from guidelab.metrics import MetricsReport, evaluate, frechet_gaussian
from guidelab.samplers import SamplerConfig, balanced_labels, offset_time_sample, sample

TUNE_INDEX = 1_000_003
"""Seed index of the held-out repeat used for weight tuning."""

_STREAM_SAMPLER, _STREAM_GUIDANCE, _STREAM_REFERENCE = 1, 2, 3


def derive_seed(*keys: int) -> int:
    """A 32-bit seed that depends on every key."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _join(values) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def _bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


@dataclass(frozen=True)
class SweepAxes:
    cfg_weights: tuple[float, ...] = (1.0, 1.1, 1.25, 1.5, 2.0)
    icg_weights: tuple[float, ...] = (1.0, 1.02, 1.05, 1.1, 1.2)
    tsg_weights: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0, 5.0)
    tsg_s: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 20.0)
    tsg_alpha: tuple[float, ...] = (0.5, 1.0, 2.0)
    tsg_layers: tuple[int, ...] = (0, 1, 2, 4)
    tsg_gates: tuple[tuple[float, float], ...] = ((0.0, 1.0), (0.2, 0.8))
    icg_modes: tuple[str, ...] = ("random_condition", "gaussian_noise")
    offsets: tuple[float, ...] = (-0.05, -0.02, 0.0, 0.02, 0.05)
    ablate_weight: float = 2.0
    compare_cfg_weight: float = 1.5
    compare_icg_weight: float = 1.4

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple) and not v:
                raise ConfigurationError(f"sweep axis {f.name} is empty")

    def to_config(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "tsg_gates":
                out[f.name] = ",".join(f"{a!r}:{b!r}" for a, b in v)
            elif isinstance(v, tuple):
                out[f.name] = _join(v)
            else:
                out[f.name] = repr(v)
        return out

    @classmethod
    def from_config(cls, cfg) -> "SweepAxes":
        kw = {}
        for f in fields(cls):
            if f.name not in cfg:
                continue
            text = cfg[f.name]
            if f.name == "tsg_gates":
                kw[f.name] = tuple(tuple(float(x) for x in g.split(":"))
                                   for g in text.split(",") if g.strip())
            elif f.name == "tsg_layers":
                kw[f.name] = _ints(text)
            elif f.name == "icg_modes":
                kw[f.name] = tuple(m.strip() for m in text.split(",") if m.strip())
            elif f.name in ("ablate_weight", "compare_cfg_weight", "compare_icg_weight"):
                kw[f.name] = float(text)
            else:
                kw[f.name] = _floats(text)
        return cls(**kw)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one harness run needs.

    ``model`` and ``model_p0`` optionally point at existing checkpoints for
    the label-dropping and purely conditional final models; when absent the
    harness trains them into ``<out>/checkpoints``.
    """

    mixture: GaussianMixture = field(default_factory=sym_pair)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=20_000, optimizer="sgd", lr=1e-3, batch_size=256))
    width: int = 64
    depth: int = 4
    emb_dim: int = 32
    p_drops: tuple[float, ...] = (0.0, 0.1)
    fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    train_seeds: tuple[int, ...] = (0, 1, 2)
    guidance: GuidanceConfig = field(default_factory=lambda: GuidanceConfig(
        tsg=TsgSchedule(kind="power", s=2.0, alpha=1.0)))
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(
        steps=32, batch_size=1024))
    sweep: SweepAxes = field(default_factory=SweepAxes)
    n_samples: int = 10_000
    n_reference: int = 10_000
    k: int = 5
    eval_seeds: int = 3
    seed: int = 0
    out: str = "results"
    threads: int = 1
    model: str = ""
    model_p0: str = ""

    def __post_init__(self):
        if self.n_samples < 2 * (self.k + 1) or self.n_reference < 2 * (self.k + 1):
            raise ConfigurationError("sample counts too small for the k-NN metrics")
        if self.eval_seeds < 1 or self.threads < 1:
            raise ConfigurationError("eval_seeds and threads must be at least 1")
        if not self.p_drops or not self.fractions or not self.train_seeds:
            raise ConfigurationError("p_drops, fractions and train_seeds must be non-empty")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigurationError("checkpoint fractions must lie in (0, 1]")
        for path in (self.model, self.model_p0):
            if path and not os.path.exists(path):
                raise ConfigurationError(f"referenced checkpoint {path!r} does not exist")

    # ------------------------------------------------------------------
    # serialisation

    def to_parser(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {
            "seed": str(self.seed), "out": self.out, "threads": str(self.threads),
            "n_samples": str(self.n_samples), "n_reference": str(self.n_reference),
            "k": str(self.k), "eval_seeds": str(self.eval_seeds),
            "model": self.model, "model_p0": self.model_p0,
        }
        cp["mixture"] = self.mixture.to_config()
        cp["model"] = {"width": str(self.width), "depth": str(self.depth),
                       "emb_dim": str(self.emb_dim)}
        tr = {f.name: repr(v) if isinstance(v, float) else str(v)
              for f in fields(self.train) for v in [getattr(self.train, f.name)]}
        tr.update(p_drops=_join(self.p_drops), fractions=_join(self.fractions),
                  train_seeds=_join(self.train_seeds))
        cp["train"] = tr
        cp["guidance"] = self.guidance.to_config()
        cp["sampler"] = self.sampler.to_config()
        cp["sweep"] = self.sweep.to_config()
        return cp

    def to_text(self) -> str:
        buf = io.StringIO()
        self.to_parser().write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(text)
        return cls.from_parser(cp)

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser) -> "ExperimentConfig":
        kw = {}
        if cp.has_section("run"):
            r = cp["run"]
            for name, conv in (("seed", int), ("out", str), ("threads", int),
                               ("n_samples", int), ("n_reference", int), ("k", int),
                               ("eval_seeds", int), ("model", str), ("model_p0", str)):
                if name in r:
                    kw[name] = conv(r[name])
        if cp.has_section("mixture"):
            kw["mixture"] = GaussianMixture.from_config(cp["mixture"])
        if cp.has_section("model"):
            for name in ("width", "depth", "emb_dim"):
                if name in cp["model"]:
                    kw[name] = int(cp["model"][name])
        if cp.has_section("train"):
            t = dict(cp["train"])
            for name, conv in (("p_drops", _floats), ("fractions", _floats),
                               ("train_seeds", _ints)):
                if name in t:
                    kw[name] = conv(t.pop(name))
            conv = {"lr": float, "batch_size": int, "steps": int, "p_drop": float,
                    "sigma_min": float, "optimizer": str, "seed": int,
                    "divergence_threshold": float}
            unknown = set(t) - set(conv)
            if unknown:
                raise ConfigurationError(f"unknown train keys {sorted(unknown)}")
            kw["train"] = TrainConfig(**{k: conv[k](v) for k, v in t.items()})
        if cp.has_section("guidance"):
            kw["guidance"] = GuidanceConfig.from_config(cp["guidance"])
        if cp.has_section("sampler"):
            kw["sampler"] = SamplerConfig.from_config(cp["sampler"])
        if cp.has_section("sweep"):
            kw["sweep"] = SweepAxes.from_config(cp["sweep"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        with open(path) as fh:
            cp.read_file(fh)
        return cls.from_parser(cp)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def training_hash(self) -> str:
        """Hash of the sections that determine trained weights."""
        cp = self.to_parser()
        blob = json.dumps({s: dict(cp[s]) for s in ("mixture", "model", "train")},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ----------------------------------------------------------------------
# checks and results


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


@dataclass
class CommandResult:
    command: str
    header: list[str] = field(default_factory=list)
    rows: list[list] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    files: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], config: ExperimentConfig,
              seed: int | None = None) -> str:
    """Write rows under a provenance comment line and a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seed = config.seed if seed is None else seed
    with open(path, "w", newline="") as fh:
        fh.write(f"# guidelab {__version__} config={config.config_hash()} seed={seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return str(path)


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    """Return ``(provenance line, header, rows)``."""
    with open(path, newline="") as fh:
        provenance = fh.readline().rstrip("\n")
        rows = list(csv.reader(fh))
    return provenance, rows[0], rows[1:]


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error (zero for a single value)."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def monotone_within_noise(means, ses, increasing: bool, z: float = 2.0) -> bool:
    """No adjacent step moves against the direction by more than ``z`` combined SEs."""
    m, s = np.asarray(means, float), np.asarray(ses, float)
    step = np.diff(m) if increasing else -np.diff(m)
    tol = z * np.sqrt(s[1:] ** 2 + s[:-1] ** 2)
    return bool(np.all(step >= -tol - 1e-12))


def interior_minimum(xs, means) -> tuple[bool, float]:
    """Whether the argmin lies strictly inside the grid at some ``x > 1``."""
    i = int(np.argmin(means))
    return (0 < i < len(means) - 1 and xs[i] > 1.0), float(xs[i])


# ----------------------------------------------------------------------
# the lab


@dataclass(frozen=True)
class Cell:
    samples: np.ndarray
    labels: np.ndarray
    report: MetricsReport


def rule_guidance(base: GuidanceConfig, rule: str, w: float, **tsg_changes) -> GuidanceConfig:
    """``base`` with ``rule`` active at weight ``w`` (and TSG fields replaced)."""
    g = replace(base, rule=rule)
    if tsg_changes:
        g = replace(g, tsg=replace(g.tsg, **tsg_changes))
    return g.with_weight(w) if rule in ("cfg", "icg", "tsg") else g


class Lab:
    """Shared state for one configuration: models, references, cell cache."""

    def __init__(self, config: ExperimentConfig, log: Callable[[str], None] | None = None):
        self.config = config
        self.mixture = config.mixture
        self.log = log or (lambda msg: None)
        self._models: dict = {}
        self._refs: dict = {}
        self._cells: dict = {}

    # models ----------------------------------------------------------

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.config.out) / "checkpoints"

    def checkpoint_path(self, p: float, train_seed: int, fraction: float) -> Path:
        name = f"{self.config.training_hash()}_p{p:g}_s{train_seed}_f{fraction:g}.npz"
        return self.checkpoint_dir / name

    def train_variant(self, p: float, train_seed: int) -> dict:
        """Train (or load) one variant; returns ``{fraction: model}``."""
        cfg = self.config
        fracs = sorted(set(cfg.fractions) | {1.0})
        paths = {f: self.checkpoint_path(p, train_seed, f) for f in fracs}
        if all(path.exists() for path in paths.values()):
            return {f: load_checkpoint(path, cfg.mixture.dim) for f, path in paths.items()}
        self.log(f"training p={p:g} seed={train_seed}")
        tcfg = replace(cfg.train, p_drop=p, seed=train_seed)
        result = train(cfg.mixture, tcfg, snapshots=fracs, width=cfg.width,
                       depth=cfg.depth, emb_dim=cfg.emb_dim)
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        for f, model in result.snapshots.items():
            save_checkpoint(model, paths[f])
        write_loss_csv(result.losses, self.checkpoint_dir /
                       f"{cfg.training_hash()}_loss_p{p:g}_s{train_seed}.csv")
        return dict(result.snapshots)

    def model(self, p: float = 0.1, fraction: float = 1.0, train_seed: int | None = None):
        cfg = self.config
        train_seed = cfg.train_seeds[0] if train_seed is None else train_seed
        key = (float(p), float(fraction), int(train_seed))
        if key not in self._models:
            explicit = {0.1: cfg.model, 0.0: cfg.model_p0}.get(float(p), "")
            if explicit and fraction == 1.0 and train_seed == cfg.train_seeds[0]:
                self._models[key] = load_checkpoint(explicit, cfg.mixture.dim)
            else:
                for f, m in self.train_variant(p, train_seed).items():
                    self._models[(float(p), float(f), int(train_seed))] = m
        return self._models[key]

    # references and cells --------------------------------------------

    def reference(self, index: int):
        if index not in self._refs:
            seed = derive_seed(self.config.seed, _STREAM_REFERENCE, index)
            self._refs[index] = self.mixture.sample_data(self.config.n_reference, seed)
        return self._refs[index]

    def cell(self, guidance: GuidanceConfig | None, index: int, p: float = 0.1,
             fraction: float = 1.0, train_seed: int | None = None, steps: int | None = None,
             time_offset: float = 0.0) -> Cell:
        """Sample and score one configuration at seed index ``index``."""
        cfg = self.config
        guidance = guidance or replace(cfg.guidance, rule="none")
        train_seed = cfg.train_seeds[0] if train_seed is None else train_seed
        steps = steps or cfg.sampler.steps
        key = (json.dumps(guidance.to_config(), sort_keys=True), index, float(p),
               float(fraction), int(train_seed), steps, float(time_offset))
        if key in self._cells:
            return self._cells[key]
        model = self.model(p, fraction, train_seed)
        scfg = replace(cfg.sampler, steps=steps,
                       seed=derive_seed(cfg.seed, _STREAM_SAMPLER, index))
        g = replace(guidance, seed=derive_seed(cfg.seed, _STREAM_GUIDANCE, index))
        labels = balanced_labels(cfg.n_samples, self.mixture.n_components)
        x = sample(model, g, scfg, cfg.n_samples, labels=labels, time_offset=time_offset)
        ref, ref_labels = self.reference(index)
        report = evaluate(x, labels, ref, ref_labels, self.mixture, cfg.k)
        result = Cell(x, labels, report)
        self._cells[key] = result
        return result

    def cells(self, specs: Sequence[dict]) -> list[Cell]:
        """Evaluate many cells, in parallel when ``threads > 1``."""
        # models are loaded up front so worker threads never train
        for spec in specs:
            self.model(spec.get("p", 0.1), spec.get("fraction", 1.0), spec.get("train_seed"))
        return _pmap(lambda s: self.cell(**s), list(specs), self.config.threads)

    def repeats(self, guidance, **kw) -> list[Cell]:
        return self.cells([dict(guidance=guidance, index=i, **kw)
                           for i in range(self.config.eval_seeds)])

    def tune(self, rule: str, weights: Sequence[float], base: GuidanceConfig | None = None,
             **kw) -> float:
        """Weight with the lowest Frechet distance on the held-out seed."""
        base = base or self.config.guidance
        cells = self.cells([dict(guidance=rule_guidance(base, rule, w), index=TUNE_INDEX, **kw)
                            for w in weights])
        return float(weights[int(np.argmin([c.report.frechet for c in cells]))])


# ----------------------------------------------------------------------
# helpers shared by commands


def _report_row(r: MetricsReport) -> list:
    return [r.frechet, r.precision, r.recall, r.frechet_pooled, r.max_mode_fraction]


_REPORT_COLS = ["frechet", "precision", "recall", "frechet_pooled", "max_mode_fraction"]


def set_frechet(a: Cell, b: Cell) -> float:
    """Class-averaged Frechet distance between two sample sets."""
    vals = [frechet_gaussian(a.samples[a.labels == c], b.samples[b.labels == c])
            for c in np.unique(a.labels)]
    return float(np.mean(vals))


def mode_traces(cell: Cell) -> list[float]:
    """Covariance trace of the samples of each class."""
    return [float(np.trace(np.atleast_2d(np.cov(cell.samples[cell.labels == c], rowvar=False))))
            for c in np.unique(cell.labels)]


def _out(config: ExperimentConfig, name: str) -> Path:
    return Path(config.out) / name


# ----------------------------------------------------------------------
# commands


def cmd_verify(config: ExperimentConfig | None = None, fault: bool = False) -> CommandResult:
    from guidelab.verify import run_verify

    seed = config.seed if config else 0
    report = run_verify(seed=seed, fault=fault)
    res = CommandResult("verify", ["identity", "max_error", "tolerance", "passed"])
    for r in report.results:
        res.rows.append([r.name, r.max_error, r.tolerance, r.passed])
        res.checks.append(Check(r.name, r.passed, f"max error {r.max_error:.3e} "
                                                  f"(tol {r.tolerance:.0e})"))
    res.checks.append(Check("runtime", report.seconds < 10.0, f"{report.seconds:.2f} s"))
    if config is not None:
        res.files.append(write_csv(_out(config, "verify.csv"), res.header, res.rows, config))
    return res


def cmd_train(config: ExperimentConfig, lab: Lab | None = None) -> CommandResult:
    """Train every (p, seed) variant with matched seeds and checkpoint fractions."""
    lab = lab or Lab(config)
    res = CommandResult("train", ["p_drop", "train_seed", "fraction", "checkpoint"])
    floor = mmse_floor(config.mixture, config.train.sigma_min)
    for s in config.train_seeds:
        for p in config.p_drops:
            lab.train_variant(p, s)
            for f in sorted(set(config.fractions) | {1.0}):
                path = lab.checkpoint_path(p, s, f)
                res.rows.append([p, s, f, str(path)])
                res.files.append(str(path))
            loss_path = lab.checkpoint_dir / f"{config.training_hash()}_loss_p{p:g}_s{s}.csv"
            if loss_path.exists():
                res.files.append(str(loss_path))
                losses = np.loadtxt(loss_path, delimiter=",", skiprows=1, usecols=1)
                final = float(smooth(losses, 100)[-1])
                res.checks.append(Check(f"loss_near_floor p={p:g} seed={s}",
                                        final < 1.2 * floor,
                                        f"smoothed final {final:.4f}, floor {floor:.4f}"))
    res.files.append(write_csv(_out(config, "train.csv"), res.header, res.rows, config))
    return res


def cmd_sample(config: ExperimentConfig, lab: Lab | None = None, p: float = 0.1) -> CommandResult:
    """Sample with the configured guidance and write the points."""
    lab = lab or Lab(config)
    cell = lab.cell(config.guidance, 0, p=p)
    d = config.mixture.dim
    res = CommandResult("sample", [f"x{j}" for j in range(d)] + ["label", "chain"])
    res.rows = [list(x) + [int(y), i] for i, (x, y) in enumerate(zip(cell.samples, cell.labels))]
    res.files.append(write_csv(_out(config, "samples.csv"), res.header, res.rows, config))
    metrics = CommandResult("metrics", _REPORT_COLS, [_report_row(cell.report)])
    res.files.append(write_csv(_out(config, "sample_metrics.csv"), metrics.header,
                               metrics.rows, config))
    return res


def sweep_rule(lab: Lab, rule: str, weights: Sequence[float], base: GuidanceConfig | None = None,
               p: float = 0.1) -> dict:
    """Per-weight repeats for one rule: ``{w: [Cell, ...]}``."""
    base = base or lab.config.guidance
    return {w: lab.repeats(rule_guidance(base, rule, w), p=p) for w in weights}


def summarise_sweep(rule: str, table: dict) -> tuple[list[Check], dict]:
    ws = sorted(table)
    stats = {key: [mean_se([getattr(c.report, key) for c in table[w]]) for w in ws]
             for key in ("frechet", "precision", "recall")}
    fd = [m for m, _ in stats["frechet"]]
    ok, w_best = interior_minimum(ws, fd)
    checks = [
        Check(f"{rule} interior minimum", ok,
              f"argmin w={w_best:g}; frechet " + ", ".join(f"{w:g}:{m:.4f}" for w, m in zip(ws, fd))),
        Check(f"{rule} precision non-decreasing",
              monotone_within_noise(*zip(*stats["precision"]), increasing=True),
              ", ".join(f"{m:.4f}" for m, _ in stats["precision"])),
        Check(f"{rule} recall non-increasing",
              monotone_within_noise(*zip(*stats["recall"]), increasing=False),
              ", ".join(f"{m:.4f}" for m, _ in stats["recall"])),
    ]
    return checks, stats


def cmd_sweep(config: ExperimentConfig, lab: Lab | None = None,
              rules: Sequence[str] = ("cfg", "icg", "tsg")) -> CommandResult:
    lab = lab or Lab(config)
    sw = config.sweep
    grids = {"cfg": sw.cfg_weights, "icg": sw.icg_weights, "tsg": sw.tsg_weights}
    res = CommandResult("sweep", ["rule", "weight", "seed_index"] + _REPORT_COLS)
    base_cells = lab.repeats(None)
    for i, c in enumerate(base_cells):
        res.rows.append(["none", 1.0, i] + _report_row(c.report))
    for rule in rules:
        table = sweep_rule(lab, rule, grids[rule])
        for w in sorted(table):
            for i, c in enumerate(table[w]):
                res.rows.append([rule, w, i] + _report_row(c.report))
        checks, _ = summarise_sweep(rule, table)
        res.checks += checks
        if 1.0 in table:
            same = all(np.array_equal(a.samples, b.samples)
                       for a, b in zip(table[1.0], base_cells))
            res.checks.append(Check(f"{rule} w=1 equals unguided", same, ""))
    res.files.append(write_csv(_out(config, "sweep.csv"), res.header, res.rows, config))
    return res


def cmd_compare(config: ExperimentConfig, lab: Lab | None = None, fraction: float = 1.0,
                train_seed: int | None = None) -> CommandResult:
    """Unguided, CFG and ICG on the label-dropping model, ICG on the conditional model."""
    lab = lab or Lab(config)
    sw, base = config.sweep, config.guidance
    kw = dict(fraction=fraction, train_seed=train_seed)
    w_cfg = lab.tune("cfg", sw.cfg_weights, p=0.1, **kw)
    w_icg = lab.tune("icg", sw.icg_weights, p=0.1, **kw)
    w_icg0 = lab.tune("icg", sw.icg_weights, p=0.0, **kw)
    arms = {
        "unguided": (None, 0.1),
        "cfg_p0.1": (rule_guidance(base, "cfg", w_cfg), 0.1),
        "icg_p0.1": (rule_guidance(base, "icg", w_icg), 0.1),
        "icg_p0": (rule_guidance(base, "icg", w_icg0), 0.0),
    }
    weights = {"unguided": 1.0, "cfg_p0.1": w_cfg, "icg_p0.1": w_icg, "icg_p0": w_icg0}
    cells = {name: lab.repeats(g, p=p, **kw) for name, (g, p) in arms.items()}
    res = CommandResult("compare", ["arm", "weight", "seed_index"] + _REPORT_COLS
                        + ["frechet_to_cfg"])
    for name, cs in cells.items():
        for i, c in enumerate(cs):
            res.rows.append([name, weights[name], i] + _report_row(c.report)
                            + [set_frechet(c, cells["cfg_p0.1"][i])])
    fd = {name: mean_se([c.report.frechet for c in cs]) for name, cs in cells.items()}
    prec = {name: np.mean([c.report.precision for c in cs]) for name, cs in cells.items()}
    gap = fd["unguided"][0] - min(m for m, _ in fd.values())
    diff = abs(fd["icg_p0.1"][0] - fd["cfg_p0.1"][0])
    d0 = [a.report.frechet - b.report.frechet for a, b in zip(cells["icg_p0"], cells["cfg_p0.1"])]
    m0, se0 = mean_se(d0)
    res.checks += [
        Check("icg close to cfg", gap > 0 and diff < 0.2 * gap,
              f"|icg - cfg| = {diff:.4f}, unguided gap {gap:.4f}"),
        Check("icg on p=0 matches cfg on p=0.1", m0 <= se0,
              f"mean difference {m0:+.4f} (se {se0:.4f})"),
        Check("guided precision beats unguided",
              prec["cfg_p0.1"] > prec["unguided"] and prec["icg_p0.1"] > prec["unguided"],
              f"unguided {prec['unguided']:.4f}, cfg {prec['cfg_p0.1']:.4f}, "
              f"icg {prec['icg_p0.1']:.4f}"),
    ]
    res.files.append(write_csv(_out(config, "compare.csv"), res.header, res.rows, config))
    return res


def cmd_ablate(config: ExperimentConfig, lab: Lab | None = None) -> CommandResult:
    """TSG grid over ``s``, ``alpha``, layer count and gate at a fixed weight."""
    lab = lab or Lab(config)
    sw, base = config.sweep, config.guidance
    w = sw.ablate_weight
    res = CommandResult("ablate", ["axis", "value", "seed_index"] + _REPORT_COLS)
    unguided = lab.repeats(None)
    axes = {
        "s": [dict(s=v) for v in sw.tsg_s],
        "alpha": [dict(alpha=v) for v in sw.tsg_alpha],
        "layer_count": [dict(layer_count=v) for v in sw.tsg_layers],
        "gate": [dict(t_min=a, t_max=b) for a, b in sw.tsg_gates],
    }
    tables = {}
    for axis, variants in axes.items():
        tables[axis] = []
        for changes in variants:
            cells = lab.repeats(rule_guidance(base, "tsg", w, **changes))
            value = ":".join(f"{v:g}" for v in changes.values())
            tables[axis].append((value, cells))
            for i, c in enumerate(cells):
                res.rows.append([axis, value, i] + _report_row(c.report))
    s_stats = {key: [mean_se([getattr(c.report, key) for c in cells])
                     for _, cells in tables["s"]] for key in ("precision", "recall", "frechet")}
    res.checks.append(Check("precision non-decreasing in s",
                            monotone_within_noise(*zip(*s_stats["precision"]), increasing=True),
                            ", ".join(f"{m:.4f}" for m, _ in s_stats["precision"])))
    res.checks.append(Check("recall non-increasing in s",
                            monotone_within_noise(*zip(*s_stats["recall"]), increasing=False),
                            ", ".join(f"{m:.4f}" for m, _ in s_stats["recall"])))
    fd_unguided = np.mean([c.report.frechet for c in unguided])
    res.checks.append(Check("extreme s worse than unguided",
                            s_stats["frechet"][-1][0] > fd_unguided,
                            f"s={sw.tsg_s[-1]:g}: {s_stats['frechet'][-1][0]:.4f} "
                            f"vs {fd_unguided:.4f}"))
    for value, cells in tables["layer_count"]:
        if value == "0":
            same = all(np.array_equal(a.samples, b.samples) for a, b in zip(cells, unguided))
            res.checks.append(Check("layer_count=0 equals unguided", same, ""))
    res.files.append(write_csv(_out(config, "ablate.csv"), res.header, res.rows, config))
    return res


def cmd_steps(config: ExperimentConfig, lab: Lab | None = None) -> CommandResult:
    """Unguided at N and 2N steps against TSG at N steps (equal model evaluations)."""
    lab = lab or Lab(config)
    n_steps = config.sampler.steps
    w = lab.tune("tsg", config.sweep.tsg_weights)
    arms = {
        f"unguided_N{n_steps}": lab.repeats(None, steps=n_steps),
        f"unguided_N{2 * n_steps}": lab.repeats(None, steps=2 * n_steps),
        f"tsg_N{n_steps}": lab.repeats(rule_guidance(config.guidance, "tsg", w), steps=n_steps),
    }
    res = CommandResult("steps", ["arm", "weight", "seed_index"] + _REPORT_COLS)
    for name, cells in arms.items():
        for i, c in enumerate(cells):
            res.rows.append([name, w if name.startswith("tsg") else 1.0, i]
                            + _report_row(c.report))
    fd = {name: [c.report.frechet for c in cells] for name, cells in arms.items()}
    u1, u2, tg = (fd[k] for k in arms)
    res.checks.append(Check("tsg@N beats unguided@2N in every seed",
                            all(a < b for a, b in zip(tg, u2)),
                            f"tsg {np.round(tg, 4).tolist()} vs unguided@2N "
                            f"{np.round(u2, 4).tolist()}"))
    rel = abs(np.mean(u2) - np.mean(u1)) / np.mean(u1)
    res.checks.append(Check("unguided converged in steps", rel < 0.1,
                            f"relative change {rel:.3f}"))
    res.files.append(write_csv(_out(config, "steps.csv"), res.header, res.rows, config))
    return res


def cmd_probe(config: ExperimentConfig, lab: Lab | None = None) -> CommandResult:
    """Per-class covariance trace of offset-time sampling for each offset."""
    lab = lab or Lab(config)
    offsets = sorted(config.sweep.offsets)
    res = CommandResult("probe", ["delta", "seed_index", "mean_trace"]
                        + [f"trace_mode{k}" for k in range(config.mixture.n_components)])
    means, ses = [], []
    for delta in offsets:
        cells = lab.cells([dict(guidance=None, index=i, time_offset=delta)
                           for i in range(config.eval_seeds)])
        traces = [mode_traces(c) for c in cells]
        for i, tr in enumerate(traces):
            res.rows.append([delta, i, float(np.mean(tr))] + tr)
        m, se = mean_se([np.mean(tr) for tr in traces])
        means.append(m)
        ses.append(se)
    inc = monotone_within_noise(means, ses, increasing=True)
    dec = monotone_within_noise(means, ses, increasing=False)
    direction = "increasing" if inc else "decreasing" if dec else "none"
    res.checks.append(Check("trace monotone in offset", inc or dec,
                            f"direction {direction}; traces "
                            + ", ".join(f"{d:+g}:{m:.4f}" for d, m in zip(offsets, means))))
    if 0.0 in offsets:
        # recompute outside the cell cache so the comparison is not vacuous
        base = lab.cell(None, 0)
        scfg = replace(config.sampler, seed=derive_seed(config.seed, _STREAM_SAMPLER, 0))
        zero = offset_time_sample(lab.model(), 0.0, scfg, config.n_samples, labels=base.labels)
        res.checks.append(Check("offset 0 equals plain sampling",
                                bool(np.array_equal(base.samples, zero)), ""))
    res.files.append(write_csv(_out(config, "probe.csv"), res.header, res.rows, config))
    return res


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "steps": cmd_steps,
    "probe": cmd_probe,
}
