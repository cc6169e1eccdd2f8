"""Evaluation harness: timing table, detection/MSE sweeps, convergence traces.

Every method receives the measurement and the true number of active users
and returns a detected user set. Channels are then re-estimated on that set
with :func:`csmud.recovery.mmse_estimate`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, fields, replace
from math import comb
from pathlib import Path

import numpy as np

from . import kernels
from .neural.network import Network, build_network
from .neural.training import TrainConfig, train
from .recovery import biht, bomp, brute_force_oracle, detect_support, iht, mmse_estimate, omp
from .sysmodel import SplitPolicy, SystemConfig, generate_dataset, make_dictionary

log = logging.getLogger(__name__)

SOLVERS = ("OMP", "BOMP", "IHT", "BIHT")
NETWORKS = ("DNN", "BRNN")
METHODS = SOLVERS + NETWORKS + ("ORACLE",)
CONTROLS = ("GENIE", "RANDOM")  # true support / uniformly random support
ORACLE_LIMIT = 10**6


class MissingArtifact(LookupError):
    """A model or dataset needed by the run does not exist."""


@dataclass
class ExperimentConfig:
    system: SystemConfig
    methods: tuple = ("OMP", "BOMP", "IHT", "BIHT", "DNN", "BRNN")
    sweep_axis: str = "n"
    sweep_values: tuple = (1, 2, 3)
    trials: int = 1000
    out_dir: str = "runs"
    seed: int = 0
    timing_samples: int = 1000
    warmup: int = 50
    timing_grid: tuple = ()  # (Ns, n) pairs; empty -> the system's own
    mse_normalized: bool = True
    noiseless: bool = False

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.sweep_values = tuple(self.sweep_values)
        self.timing_grid = tuple(tuple(p) for p in self.timing_grid)
        bad = set(self.methods) - set(METHODS + CONTROLS)
        if bad:
            raise ValueError(f"unknown methods: {sorted(bad)}")
        if self.trials < 1 or self.timing_samples < 1 or self.warmup < 0:
            raise ValueError("trials and timing_samples must be >= 1, warmup >= 0")
        if self.sweep_axis not in ("n", "Ns"):
            raise ValueError("sweep_axis must be 'n' or 'Ns'")
        if not self.sweep_values:
            raise ValueError("sweep_values must be nonempty")
        if "ORACLE" in self.methods:
            for sc in self.points():
                if comb(sc.K, sc.n) > ORACLE_LIMIT:
                    raise ValueError(f"ORACLE not enumerable at K={sc.K}, n={sc.n}")

    def points(self):
        """SystemConfig per sweep value."""
        for v in self.sweep_values:
            yield replace(self.system, **{self.sweep_axis: int(v)})

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["system"] = self.system.to_dict()
        d["methods"] = list(self.methods)
        d["sweep_values"] = list(self.sweep_values)
        d["timing_grid"] = [list(p) for p in self.timing_grid]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["system"] = SystemConfig.from_dict(d["system"])
        return cls(**d)


@dataclass
class MetricsRow:
    method: str
    sweep_axis: str
    sweep_value: int
    trials: int
    exact_set_success_rate: float
    user_hit_ratio: float
    channel_mse: float
    mean_time_s: float
    confidence_halfwidth: float
    empty_support_trials: int = 0


@dataclass
class TimingRow:
    method: str
    Ns: int
    n: int
    samples: int
    mean_time_s: float
    confidence_halfwidth: float


TIMING_COLUMNS = ("mean_time_s", "confidence_halfwidth")


def halfwidth(p: float, trials: int) -> float:
    """95% normal-approximation halfwidth of a Bernoulli mean."""
    return 1.96 * float(np.sqrt(p * (1 - p) / trials))


def _model_for(models, arch, config: SystemConfig) -> Network:
    if models:
        for key in ((arch, config.Ns), arch):
            net = models.get(key)
            if net is not None and net.K == config.K and net.M == config.M and net.L == config.L:
                return net
    raise MissingArtifact(f"no trained {arch} model for K={config.K}, Ns={config.Ns}, L={config.L}")


def make_detector(method, config: SystemConfig, dictionary, models=None, seed=0):
    """Return ``detect(y, n) -> user tuple`` for one method."""
    L = config.L
    if method == "OMP":
        return lambda y, n: detect_support(omp(dictionary, y, n * L).x_hat, L, n)
    if method == "BOMP":
        return lambda y, n: detect_support(bomp(dictionary, y, n).x_hat, L, n)
    if method == "IHT":
        return lambda y, n: detect_support(iht(dictionary, y, n * L).x_hat, L, n)
    if method == "BIHT":
        return lambda y, n: detect_support(biht(dictionary, y, n).x_hat, L, n)
    if method == "ORACLE":
        return lambda y, n: brute_force_oracle(dictionary, y, n).support_users
    if method in NETWORKS:
        net = _model_for(models, method, config)

        def detect(y, n):
            s = net.scores(y)[0]
            return tuple(sorted(int(k) for k in np.argsort(-s, kind="mergesort")[:n]))
        return detect
    if method == "RANDOM":
        rng = np.random.default_rng(seed)
        return lambda y, n: tuple(sorted(int(k) for k in rng.choice(config.K, n, replace=False)))
    raise ValueError(f"no detector for {method!r}")


def evaluate(dataset, methods, models=None, *, mse_normalized=True, sweep_axis="n",
             sweep_value=None, dictionary=None, seed=0):
    """Run each method over every sample of ``dataset``; one row per method."""
    config = dataset.config
    D = make_dictionary(config) if dictionary is None else dictionary
    prior_var = 1.0 / config.L
    rows = []
    for method in methods:
        detect = None if method == "GENIE" else make_detector(method, config, D, models, seed)
        T = len(dataset)
        success = hit = mse = tsum = 0.0
        empty = 0
        for y, active, x in dataset:
            n = len(active)
            t0 = time.perf_counter()
            if n == 0:
                found = ()
            elif detect is None:
                found = tuple(active)
            else:
                found = detect(y, n)
            tsum += time.perf_counter() - t0
            success += found == tuple(active)
            hit += len(set(found) & set(active)) / n if n else 1.0
            if found:
                x_hat = mmse_estimate(D, y, found, dataset.noise_var, prior_var)
            else:
                x_hat = np.zeros_like(x)
                empty += n > 0
            err = float(np.sum(np.abs(x_hat - x) ** 2))
            ref = float(np.sum(np.abs(x) ** 2))
            if mse_normalized:
                err = err / ref if ref > 0 else 0.0
            mse += err
        p = success / T
        rows.append(MetricsRow(method, sweep_axis, int(sweep_value if sweep_value is not None
                                                       else config.n), T, p, hit / T, mse / T,
                               max(tsum / T, 1e-12), halfwidth(p, T), empty))
        log.info("%s @ %s=%s: success %.3f, mse %.4g", method, sweep_axis, sweep_value, p, mse / T)
    return rows


def _sweep_dataset(exp: ExperimentConfig, sc: SystemConfig, i: int):
    return generate_dataset(sc, SplitPolicy("test", n=sc.n), exp.trials,
                            seed=exp.seed + 7919 * (i + 1), noiseless=exp.noiseless)


def run_detection_sweep(exp: ExperimentConfig, models=None) -> list:
    """Exact-set success and user hit ratio per method and sweep point (10 dB test data)."""
    rows = []
    for i, sc in enumerate(exp.points()):
        ds = _sweep_dataset(exp, sc, i)
        rows += evaluate(ds, exp.methods, models, mse_normalized=exp.mse_normalized,
                         sweep_axis=exp.sweep_axis, sweep_value=getattr(sc, exp.sweep_axis),
                         seed=exp.seed)
    return rows


def run_mse_sweep(exp: ExperimentConfig, models=None) -> list:
    """Channel MSE after MMSE re-estimation on each method's detected support.

    Shares data and detectors with :func:`run_detection_sweep`, so the rows
    carry every metric; the MSE report keeps the channel columns.
    """
    return run_detection_sweep(exp, models)


def single_thread():
    """Context manager pinning BLAS/OpenMP pools to one thread."""
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def run_timing(exp: ExperimentConfig, models=None) -> list:
    """Mean wall-clock per sample; the first ``warmup`` samples are discarded."""
    grid = exp.timing_grid or ((exp.system.Ns, exp.system.n),)
    rows = []
    with single_thread():
        for j, (Ns, n) in enumerate(grid):
            sc = replace(exp.system, Ns=int(Ns), n=int(n))
            D = make_dictionary(sc)
            ds = generate_dataset(sc, SplitPolicy("test", n=sc.n), exp.warmup + exp.timing_samples,
                                  seed=exp.seed + 104729 * (j + 1), dictionary=D)
            for method in exp.methods:
                detect = make_detector(method, sc, D, models, exp.seed)
                times = np.empty(len(ds))
                for i, y in enumerate(ds.y):
                    t0 = time.perf_counter()
                    detect(y, n)
                    times[i] = time.perf_counter() - t0
                t = times[exp.warmup:]
                hw = 1.96 * float(t.std(ddof=1)) / np.sqrt(t.size) if t.size > 1 else 0.0
                rows.append(TimingRow(method, sc.Ns, sc.n, int(t.size), float(t.mean()), hw))
                log.info("timing %s (Ns=%d, n=%d): %.3g s", method, sc.Ns, sc.n, t.mean())
    return rows


def run_convergence(system: SystemConfig, train_set, val_set, train_config: TrainConfig,
                    *, seed=0, **arch_kwargs) -> dict:
    """Train DNN and BRNN from the same seed on the same data; returns traces."""
    traces = {}
    for arch in NETWORKS:
        net = build_network(arch, system.K, system.L, system.M, seed=seed, **arch_kwargs)
        _, traces[arch] = train(net, train_set, val_set, train_config)
    return traces


# --- reports ----------------------------------------------------------------

def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(rows, path, columns=None) -> None:
    """Rows of dataclasses to CSV with a fixed column order; empty rows give a header."""
    if columns is None:
        columns = [f.name for f in fields(rows[0])] if rows else [f.name for f in fields(MetricsRow)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in columns])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def emit_report(rows, path, config: ExperimentConfig | None = None, inputs=(),
                columns=None) -> Path:
    """Write ``path`` (CSV) plus ``<path>.manifest.json``; returns the manifest path."""
    path = Path(path)
    write_csv(rows, path, columns)
    cfg = config.to_dict() if config is not None else None
    manifest = {
        "report": path.name,
        "config": cfg,
        "config_sha256": hashlib.sha256(canonical_json(cfg).encode()).hexdigest(),
        "seed": cfg["seed"] if cfg else None,
        "inputs": {Path(p).name: sha256_file(p) for p in inputs},
        "environment": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "kernel_backend": kernels.BACKEND,
            "machine": platform.machine(),
            "note": "timing columns depend on hardware and load",
        },
    }
    mpath = path.with_name(path.name + ".manifest.json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def load_manifest_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text())["config"])
