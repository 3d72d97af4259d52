"""Experiment configuration, run reports, and their file formats.

One declarative config dataclass drives every experiment kind; validation
happens up front and names the offending field. Reports serialize to a JSON
document plus a flat CSV of the metric series, and round-trip losslessly.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field

__all__ = [
    "ConfigError",
    "NumericAbort",
    "DatasetConfig",
    "LossConfig",
    "OptimizerConfig",
    "ScheduleConfig",
    "ExperimentConfig",
    "RunReport",
    "report_io",
    "report_read",
    "EXPERIMENT_KINDS",
]

EXPERIMENT_KINDS = ("rsk", "rsk-simix", "ls", "feds", "esupcon", "gradcheck", "oracle-suite")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


class NumericAbort(RuntimeError):
    """Numeric failure mid-run; ``epoch`` records how far the run got."""

    def __init__(self, epoch: int, cause: Exception):
        super().__init__(f"numeric failure at epoch {epoch}: {cause}")
        self.epoch = epoch
        self.cause = cause


@dataclass
class DatasetConfig:
    classes: int = 8
    per_class: int = 16
    dim: int = 16
    sigma: float = 0.3
    strings: int = 256
    length: int = 6
    alphabet: int = 8
    noise: float = 0.5
    val_fraction: float = 0.25


@dataclass
class LossConfig:
    # Desk-scale temperatures; SmoothParams carries the large-batch defaults.
    tau1: float = 0.2
    tau2: float = 0.2
    k_set: tuple = (1, 2, 4, 8, 16)
    ramp_lower: float = 0.5
    ramp_upper: float = 1.5
    tau_contrastive: float = 0.1
    virtual_per_batch: int | None = None


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.01
    post_lr: float = 0.001  # gentler rate for surrogate post-tuning phases
    proto_lr: float = 0.002  # prototype rows move slower than the backbone
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ScheduleConfig:
    steps: int = 500
    eval_every: int = 25
    proxy_steps: int = 30
    surrogate_steps: int = 20
    model_steps: int = 30
    rounds: int = 10
    batch_size: int = 16
    samples_per_class: int = 4
    batch_cap: int = 4000
    chunk_size: int | None = None
    mc_samples: int = 1_000_000
    oracle_pairs: int = 1000
    gradcheck_instances: int = 20
    label_corruption: float = 0.0
    hidden: int = 32


@dataclass
class ExperimentConfig:
    kind: str = "rsk"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0
    out: str | None = None

    # -- validation --------------------------------------------------------

    def validate(self):
        """Reject every downstream precondition violation before any compute."""
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError("kind", f"must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed", "must be an integer")
        d, l, o, s = self.dataset, self.loss, self.optimizer, self.schedule

        if d.classes < 2:
            raise ConfigError("dataset.classes", "need at least 2 classes")
        if d.per_class < 1:
            raise ConfigError("dataset.per_class", "must be positive")
        if d.dim < 1:
            raise ConfigError("dataset.dim", "must be positive")
        if d.sigma < 0:
            raise ConfigError("dataset.sigma", "must be non-negative")
        if d.strings < 8:
            raise ConfigError("dataset.strings", "need at least 8 samples to split")
        if d.length < 1:
            raise ConfigError("dataset.length", "must be positive")
        if d.alphabet < 2:
            raise ConfigError("dataset.alphabet", "need an alphabet of at least 2")
        if d.noise < 0:
            raise ConfigError("dataset.noise", "must be non-negative")
        if not (0.0 < d.val_fraction < 1.0):
            raise ConfigError("dataset.val_fraction", "must lie in (0, 1)")

        if l.tau1 <= 0:
            raise ConfigError("loss.tau1", "temperature must be positive")
        if l.tau2 <= 0:
            raise ConfigError("loss.tau2", "temperature must be positive")
        ks = tuple(l.k_set)
        if not ks or any(int(k) < 1 for k in ks):
            raise ConfigError("loss.k_set", "needs positive k values")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ConfigError("loss.k_set", "must be strictly increasing")
        if l.ramp_lower < 0:
            raise ConfigError("loss.ramp_lower", "must be non-negative")
        if not l.ramp_upper > l.ramp_lower:
            raise ConfigError("loss.ramp_upper", "must exceed ramp_lower")
        if l.tau_contrastive <= 0:
            raise ConfigError("loss.tau_contrastive", "must be positive")
        if l.virtual_per_batch is not None and l.virtual_per_batch < 1:
            raise ConfigError("loss.virtual_per_batch", "must be positive when set")

        if o.kind not in ("sgd", "adam"):
            raise ConfigError("optimizer.kind", f"must be sgd or adam, got {o.kind!r}")
        if o.lr <= 0:
            raise ConfigError("optimizer.lr", "must be positive")
        if o.post_lr <= 0:
            raise ConfigError("optimizer.post_lr", "must be positive")
        if o.proto_lr <= 0:
            raise ConfigError("optimizer.proto_lr", "must be positive")
        if not (0 <= o.beta1 < 1) or not (0 <= o.beta2 < 1):
            raise ConfigError("optimizer.beta1", "betas must lie in [0, 1)")
        if o.eps <= 0:
            raise ConfigError("optimizer.eps", "must be positive")

        if s.steps < 1:
            raise ConfigError("schedule.steps", "must be positive")
        if s.eval_every < 1:
            raise ConfigError("schedule.eval_every", "must be positive")
        if s.proxy_steps < 0:
            raise ConfigError("schedule.proxy_steps", "must be non-negative")
        if s.surrogate_steps < 1:
            raise ConfigError("schedule.surrogate_steps", "must be positive")
        if s.model_steps < 1:
            raise ConfigError("schedule.model_steps", "must be positive")
        if s.rounds < 0:
            raise ConfigError("schedule.rounds", "must be non-negative")
        if s.batch_size < 1:
            raise ConfigError("schedule.batch_size", "must be positive")
        if s.samples_per_class < 2:
            raise ConfigError("schedule.samples_per_class",
                              "need at least 2 per class so every query has a positive")
        if s.samples_per_class > d.per_class:
            raise ConfigError("schedule.samples_per_class",
                              "cannot exceed dataset.per_class")
        if s.batch_cap < s.samples_per_class:
            raise ConfigError("schedule.batch_cap", "smaller than one class group")
        if s.chunk_size is not None:
            batch = min(s.batch_cap, s.samples_per_class * d.classes)
            if not (1 <= s.chunk_size <= batch):
                raise ConfigError("schedule.chunk_size", f"must lie in [1, {batch}]")
        if s.mc_samples < 1000:
            raise ConfigError("schedule.mc_samples", "too few samples for the oracle")
        if s.oracle_pairs < 1:
            raise ConfigError("schedule.oracle_pairs", "must be positive")
        if s.gradcheck_instances < 1:
            raise ConfigError("schedule.gradcheck_instances", "must be positive")
        if not (0.0 <= s.label_corruption <= 0.5):
            raise ConfigError("schedule.label_corruption", "must lie in [0, 0.5]")
        if s.hidden < 1:
            raise ConfigError("schedule.hidden", "must be positive")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        def plain(value):
            if dataclasses.is_dataclass(value):
                return {k: plain(v) for k, v in dataclasses.asdict(value).items()}
            if isinstance(value, tuple):
                return [plain(v) for v in value]
            return value

        return {
            "kind": self.kind,
            "dataset": plain(self.dataset),
            "loss": plain(self.loss),
            "optimizer": plain(self.optimizer),
            "schedule": plain(self.schedule),
            "seed": self.seed,
            "out": self.out,
        }

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a mapping")
        known = {"kind", "dataset", "loss", "optimizer", "schedule", "seed", "out"}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown config field")

        def build(cls, section: str, values):
            if values is None:
                return cls()
            if not isinstance(values, dict):
                raise ConfigError(section, "must be a mapping")
            names = {f.name for f in dataclasses.fields(cls)}
            for k in values:
                if k not in names:
                    raise ConfigError(f"{section}.{k}", "unknown config field")
            kwargs = dict(values)
            if "k_set" in kwargs and kwargs["k_set"] is not None:
                kwargs["k_set"] = tuple(kwargs["k_set"])
            return cls(**kwargs)

        return ExperimentConfig(
            kind=raw.get("kind", "rsk"),
            dataset=build(DatasetConfig, "dataset", raw.get("dataset")),
            loss=build(LossConfig, "loss", raw.get("loss")),
            optimizer=build(OptimizerConfig, "optimizer", raw.get("optimizer")),
            schedule=build(ScheduleConfig, "schedule", raw.get("schedule")),
            seed=raw.get("seed", 0),
            out=raw.get("out"),
        )

    def with_override(self, dotted: str, value) -> "ExperimentConfig":
        """Functional update through a dotted path like ``loss.tau1``."""
        raw = self.to_dict()
        parts = dotted.split(".")
        cursor = raw
        for p in parts[:-1]:
            if not isinstance(cursor.get(p), dict):
                raise ConfigError(dotted, "no such config section")
            cursor = cursor[p]
        if parts[-1] not in cursor:
            raise ConfigError(dotted, "no such config field")
        cursor[parts[-1]] = value
        return ExperimentConfig.from_dict(raw)


@dataclass
class RunReport:
    """Structured result of one experiment run."""

    config: dict
    series: dict
    wall_clock_s: float
    version: str
    seed: int

    def __post_init__(self):
        lengths = {len(v) for v in self.series.values()}
        if len(lengths) > 1:
            raise ValueError(f"metric series lengths differ: {sorted(lengths)}")
        for name, vals in self.series.items():
            clean = []
            for v in vals:
                v = float(v)
                if not math.isfinite(v):
                    raise ValueError(f"series {name!r} contains a non-finite value")
                clean.append(v)
            self.series[name] = clean

    @property
    def epochs(self) -> int:
        if not self.series:
            return 0
        return len(next(iter(self.series.values())))

    def series_bytes(self) -> bytes:
        """Canonical byte encoding of the metric series, for determinism checks."""
        return json.dumps(self.series, sort_keys=True).encode("utf-8")


def _report_json(report: RunReport) -> str:
    doc = {
        "config": report.config,
        "series": report.series,
        "wall_clock_s": report.wall_clock_s,
        "version": report.version,
        "seed": report.seed,
    }
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _report_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = sorted(report.series)
    writer.writerow(["epoch"] + names)
    for e in range(report.epochs):
        writer.writerow([e] + [repr(report.series[n][e]) for n in names])
    return buf.getvalue()


def report_io(report: RunReport, path: str) -> tuple[str, str]:
    """Write ``<path>.json`` and ``<path>.csv``; returns the two file paths."""
    json_path, csv_path = f"{path}.json", f"{path}.csv"
    try:
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(_report_json(report))
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(_report_csv(report))
    except OSError as exc:
        raise OSError(f"cannot write report at {path!r}: {exc}") from exc
    return json_path, csv_path


def report_read(path: str) -> RunReport:
    """Read a report previously written by :func:`report_io`."""
    try:
        with open(f"{path}.json", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read report at {path!r}: {exc}") from exc
    return RunReport(
        config=doc["config"],
        series=doc["series"],
        wall_clock_s=doc["wall_clock_s"],
        version=doc["version"],
        seed=doc["seed"],
    )
