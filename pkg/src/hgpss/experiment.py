"""Compressive-sensing experiments on structured sparse frame sequences.

A run builds (or loads) a ground-truth ``beta`` sequence, senses it with one
i.i.d. Gaussian matrix shared by all frames, reconstructs it with one of
three model variants and scores the reconstruction.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .ep_frame import EPConfig, EPDivergedError, GaussianBelief, ep_frame_run
from .evaluation import MetricReport, compare_runs, default_threshold, metric_report
from .gaussian_math import KernelParams
from .hier_temporal import OuterConfig, hier_ep_run
from .model import (
    INDICATOR_MEANS_SPIKE,
    RNG_ALGORITHM,
    Hyperparameters,
    make_rng,
    make_sensing_matrix,
    observe,
    sample_trajectory,
)

logger = logging.getLogger(__name__)

VARIANTS = ("hierarchical", "one_level", "independent")
DATA_SOURCES = ("blobs", "csv", "model")


class ConfigError(ValueError):
    pass


class CSVFormatError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class EmptyCSVError(CSVFormatError):
    pass


class RaggedCSVError(CSVFormatError):
    pass


class NonNumericCSVError(CSVFormatError):
    pass


# --------------------------------------------------------------------------
# data

@dataclass(frozen=True)
class BlobSpec:
    n: int = 64
    t_steps: int = 10
    num_blobs: int = 3
    blob_width: int = 5
    drift_std: float = 1.0
    amplitude_std: float = 1.0

    def __post_init__(self):
        if self.n < 1 or self.t_steps < 1:
            raise ConfigError("n and t_steps must be >= 1")
        if self.blob_width < 1:
            raise ConfigError("blob_width must be >= 1")
        if self.num_blobs < 0 or self.num_blobs * self.blob_width > self.n / 2:
            raise ConfigError("num_blobs * blob_width must not exceed n / 2")
        if self.drift_std < 0 or self.amplitude_std <= 0:
            raise ConfigError("drift_std must be >= 0 and amplitude_std > 0")


def _reflect(c, lo, hi):
    if hi == lo:
        return lo
    period = 2 * (hi - lo)
    r = (c - lo) % period
    return lo + (r if r <= hi - lo else period - r)


def generate_blob_sequence(spec: BlobSpec, seed: int) -> np.ndarray:
    """T x N frames of drifting rectangular blobs on an exact-zero background.

    Blob centres take rounded Gaussian steps reflected at the borders; blob
    values are drawn once and jittered by ``0.1 * amplitude_std`` per frame.
    """
    rng = make_rng(seed)
    half = spec.blob_width // 2
    lo, hi = half, spec.n - spec.blob_width + half
    centres = rng.integers(lo, hi + 1, size=spec.num_blobs)
    values = spec.amplitude_std * rng.standard_normal((spec.num_blobs, spec.blob_width))
    out = np.zeros((spec.t_steps, spec.n))
    for t in range(spec.t_steps):
        if t > 0:
            steps = np.rint(spec.drift_std * rng.standard_normal(spec.num_blobs)).astype(int)
            centres = np.array([_reflect(int(c + s), lo, hi) for c, s in zip(centres, steps)])
            values = values + 0.1 * spec.amplitude_std * rng.standard_normal(values.shape)
        for c, v in zip(centres, values):
            start = c - half
            out[t, start:start + spec.blob_width] = v
    return out


def ingest_csv_frames(path) -> np.ndarray:
    """Read a headerless numeric CSV, one frame per row."""
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                vals = [float(cell) for cell in row]
            except ValueError:
                raise NonNumericCSVError(f"{path}: non-numeric cell in row {lineno}", lineno) from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise RaggedCSVError(
                    f"{path}: row {lineno} has {len(vals)} values, expected {width}", lineno)
            rows.append(vals)
    if not rows:
        raise EmptyCSVError(f"{path}: no data rows", 1)
    return np.array(rows, dtype=float)


def write_matrix_csv(path, matrix) -> None:
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in m:
            w.writerow([repr(float(v)) for v in row])


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    csv_path: str | None = None
    n: int = 64
    t_steps: int = 10
    num_blobs: int = 3
    blob_width: int = 5
    drift_std: float = 1.0
    amplitude_std: float = 1.0

    def blob_spec(self) -> BlobSpec:
        return BlobSpec(self.n, self.t_steps, self.num_blobs, self.blob_width,
                        self.drift_std, self.amplitude_std)


@dataclass(frozen=True)
class ModelConfig:
    noise_var: float = 1e-2
    slab_var: float = 1.0
    spatial_amplitude: float = 1.0
    spatial_lengthscale: float = 3.0
    temporal_amplitude: float = 0.25
    temporal_lengthscale: float = 3.0
    data_noise_var: float | None = None  # sensing noise; None means noise_var

    def hyper(self, n, k, t_steps) -> Hyperparameters:
        return Hyperparameters(
            n=n, k=k, t_steps=t_steps, noise_var=self.noise_var, slab_var=self.slab_var,
            spatial_kernel=KernelParams(self.spatial_amplitude, self.spatial_lengthscale),
            temporal_kernel=KernelParams(self.temporal_amplitude, self.temporal_lengthscale),
        )


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    sensing: int = 1
    noise: int = 2
    inference: int = 3

    def offset(self, k: int) -> "Seeds":
        return Seeds(self.data + k, self.sensing + k, self.noise + k, self.inference + k)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    measurement_ratio: float = 0.4
    variant: str = "hierarchical"
    ep: EPConfig = field(default_factory=EPConfig)
    outer: OuterConfig = field(default_factory=OuterConfig)
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str | None = None
    threshold: float | None = None
    mask_source: str = "magnitude"  # or "inclusion": slab responsibility >= 0.5

    def __post_init__(self):
        if not 0 < self.measurement_ratio <= 1:
            raise ConfigError("measurement_ratio must lie in (0, 1]")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.data.source not in DATA_SOURCES:
            raise ConfigError(f"data source must be one of {DATA_SOURCES}")
        if self.data.source == "csv" and not self.data.csv_path:
            raise ConfigError("csv data source needs data.csv_path")
        if self.mask_source not in ("magnitude", "inclusion"):
            raise ConfigError("mask_source must be 'magnitude' or 'inclusion'")
        if self.threshold is not None and not self.threshold > 0:
            raise ConfigError("threshold must be positive")

    def resolved_threshold(self) -> float:
        return self.threshold if self.threshold is not None else default_threshold(self.model.slab_var)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threshold"] = self.resolved_threshold()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {"data": DataConfig, "model": ModelConfig, "ep": EPConfig,
                  "outer": OuterConfig, "seeds": Seeds}
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in nested:
                sub = nested[key]
                allowed = {f.name for f in fields(sub)}
                bad = set(value) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                try:
                    kwargs[key] = sub(**value)
                except ValueError as err:
                    raise ConfigError(f"{key}: {err}") from err
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err

    def updated(self, **sections) -> "ExperimentConfig":
        """Copy with top-level fields replaced; nested sections given as dicts merge."""
        changes = {}
        for key, value in sections.items():
            current = getattr(self, key)
            changes[key] = replace(current, **value) if isinstance(value, dict) else value
        return replace(self, **changes)


# --------------------------------------------------------------------------
# running

@dataclass
class RunResult:
    config: ExperimentConfig
    report: MetricReport
    beta_true: np.ndarray
    beta_hat: np.ndarray
    inclusion_prob: np.ndarray
    mu_smoothed: np.ndarray | None
    diagnostics: dict


class _JitterLog(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())


@contextmanager
def _capture_jitter():
    handler = _JitterLog()
    log = logging.getLogger("hgpss.gaussian_math")
    log.addHandler(handler)
    try:
        yield handler
    finally:
        log.removeHandler(handler)


def load_truth(config: ExperimentConfig) -> np.ndarray:
    d = config.data
    if d.source == "csv":
        return ingest_csv_frames(d.csv_path)
    if d.source == "blobs":
        return generate_blob_sequence(d.blob_spec(), config.seeds.data)
    hyper = config.model.hyper(d.n, max(1, round(config.measurement_ratio * d.n)), d.t_steps)
    return sample_trajectory(hyper, config.seeds.data)[0].beta


def _frame_diagnostics(frames):
    return {
        "sweeps": [f.sweeps_used for f in frames],
        "converged": [bool(f.converged) for f in frames],
        "clip_events": [f.clip_events for f in frames],
        "skipped_sites": [f.skipped_sites for f in frames],
        "log_evidence": [float(f.log_evidence) for f in frames],
    }


def execute(config: ExperimentConfig) -> RunResult:
    """Run one experiment in memory. Raises EPDivergedError on divergence."""
    beta_true = load_truth(config)
    t_steps, n = beta_true.shape
    k = max(1, round(config.measurement_ratio * n))
    hyper = config.model.hyper(n, k, t_steps)
    x = make_sensing_matrix(hyper, config.seeds.sensing)
    data_noise = config.model.noise_var if config.model.data_noise_var is None else config.model.data_noise_var
    y = observe(x, beta_true, data_noise, config.seeds.noise)
    ep_config = replace(config.ep, seed=config.seeds.inference)

    diagnostics = {
        "package_version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "indicator_means_spike": INDICATOR_MEANS_SPIKE,
        "variant": config.variant,
        "shape": {"n": n, "k": k, "t_steps": t_steps},
    }
    mu_means = None
    with _capture_jitter() as jit:
        if config.variant == "hierarchical":
            res = hier_ep_run(y, x, hyper, ep_config, config.outer)
            frames = res.frames
            mu_means = res.mu_means
            diagnostics["outer_iters"] = res.outer_iters
            diagnostics["outer_converged"] = res.converged
            diagnostics["outer_history"] = res.diagnostics["outer"]
        else:
            if config.variant == "one_level":
                cov = hyper.spatial_cov()
            else:
                cov = hyper.spatial_kernel.amplitude * np.eye(n)
            prior = GaussianBelief(np.zeros(n), cov)
            frames = []
            for t in range(t_steps):
                try:
                    frames.append(ep_frame_run(y[t], x, hyper, prior, ep_config, spatial_cov=cov))
                except EPDivergedError as err:
                    diag = dict(err.diagnostics, frame=t)
                    raise EPDivergedError(f"frame {t}: {err}", err.sweep, err.sites, diag) from err
    diagnostics["frames"] = _frame_diagnostics(frames)
    diagnostics["clip_events_total"] = int(sum(f.clip_events for f in frames))
    diagnostics["jitter_events"] = len(jit.messages)
    diagnostics["jitter_log"] = jit.messages
    diagnostics["max_frame_jitter"] = float(max(f.max_jitter for f in frames))

    beta_hat = np.array([f.beta_belief.mean for f in frames])
    incl = np.array([f.inclusion_prob for f in frames])
    threshold = config.resolved_threshold()
    pred_mask = (1.0 - incl) >= 0.5 if config.mask_source == "inclusion" else None
    report = metric_report(config.variant, beta_true, beta_hat, threshold, pred_mask)
    return RunResult(config, report, beta_true, beta_hat, incl, mu_means, diagnostics)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def metrics_payload(result: RunResult) -> dict:
    d = result.report.to_dict()
    d["mask_source"] = result.config.mask_source
    return d


def write_run(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.resolved.json", result.config.to_dict())
    _dump_json(out / "metrics.json", metrics_payload(result))
    (out / "metrics.csv").write_text(
        "metric,value\n"
        f"nmse,{result.report.nmse!r}\n"
        f"f_measure,{result.report.f_measure!r}\n"
        f"threshold,{result.report.threshold_used!r}\n",
        encoding="utf-8",
    )
    write_matrix_csv(out / "beta_true.csv", result.beta_true)
    write_matrix_csv(out / "beta_hat.csv", result.beta_hat)
    write_matrix_csv(out / "inclusion_prob.csv", result.inclusion_prob)
    if result.mu_smoothed is not None:
        write_matrix_csv(out / "mu_smoothed.csv", result.mu_smoothed)
    _dump_json(out / "diagnostics.json", _jsonable(result.diagnostics))
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def run_experiment(config: ExperimentConfig, out_dir=None) -> RunResult:
    """Execute and, when an output directory is known, write every artifact.

    On divergence ``diagnostics.json`` is still written before re-raising.
    """
    out_dir = out_dir or config.output_dir
    try:
        result = execute(config)
    except EPDivergedError as err:
        if out_dir:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            _dump_json(out / "config.resolved.json", config.to_dict())
            _dump_json(out / "diagnostics.json", _jsonable({
                "error": str(err), "sweep": err.sweep, "sites": list(err.sites),
                "details": err.diagnostics, "rng_algorithm": RNG_ALGORITHM,
            }))
        raise
    if out_dir:
        write_run(result, out_dir)
    return result


# --------------------------------------------------------------------------
# paired-seed comparison

def _compare_job(args):
    config, out_dir = args
    res = run_experiment(config, out_dir)
    return res.report


def run_comparison(config: ExperimentConfig, n_seeds=10, variants=VARIANTS, out_dir=None, jobs=1):
    """Run every variant on ``n_seeds`` paired seed sets (seeds offset by 0..n-1)."""
    jobs_list = []
    for s in range(n_seeds):
        for v in variants:
            cfg = replace(config, variant=v, seeds=config.seeds.offset(s), output_dir=None)
            sub = Path(out_dir) / f"seed_{s:03d}" / v if out_dir else None
            jobs_list.append((cfg, sub))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            reports = list(pool.map(_compare_job, jobs_list))
    else:
        reports = [_compare_job(j) for j in jobs_list]

    per_seed = {v: [] for v in variants}
    for (cfg, _), rep in zip(jobs_list, reports):
        per_seed[cfg.variant].append(rep)
    means = [
        MetricReport(
            v,
            float(np.mean([r.nmse for r in per_seed[v]])),
            float(np.mean([r.f_measure for r in per_seed[v]])),
            per_seed[v][0].threshold_used,
        )
        for v in variants
    ]
    table = compare_runs(means)
    summary = {
        "n_seeds": n_seeds,
        "variants": list(variants),
        "per_seed": {v: [{"nmse": r.nmse, "f_measure": r.f_measure} for r in per_seed[v]] for v in variants},
        "mean": table.to_dict(),
    }
    if "hierarchical" in variants:
        h = per_seed["hierarchical"]
        summary["hierarchical_nmse_wins"] = {
            v: int(sum(a.nmse <= b.nmse for a, b in zip(h, per_seed[v])))
            for v in variants if v != "hierarchical"
        }
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.csv").write_text(table.to_csv(), encoding="utf-8")
        (out / "compare.txt").write_text(table.to_text() + "\n", encoding="utf-8")
        _dump_json(out / "compare.json", summary)
        _dump_json(out / "config.resolved.json", config.to_dict())
    return table, summary
