"""Session configuration and the per-iteration training report.

The canonical JSON form of a SessionConfig (sorted keys, compact separators)
is the attestation digest input: every participant must hold byte-identical
configuration for key release to succeed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..accounting import Budget, EpsDelta
from ..data import Batch, load_idx, synth_blobs
from ..errors import ConfigurationError
from ..privacy import PrivacyParams


@dataclass
class DynamicClippingConfig:
    enabled: bool = False
    cadence: int = 10
    r: float | None = None  # defaults to privacy.target_unclipped_fraction

    def __post_init__(self):
        if self.cadence < 1:
            raise ConfigurationError("dynamic clipping cadence must be >= 1")
        if self.r is not None and not 0.0 < self.r <= 1.0:
            raise ConfigurationError("dynamic clipping r must be in (0, 1]")


@dataclass
class StopConfig:
    max_iterations: int | None = None  # defaults to the session's iterations
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if self.target_accuracy is not None and not 0.0 < self.target_accuracy <= 1.0:
            raise ConfigurationError("target_accuracy must be in (0, 1]")


@dataclass
class ModelSpec:
    layer_dims: tuple
    init_seed: int = 0

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            raise ConfigurationError("model layer_dims must be >= 2 positive sizes")


def resolve_dataset(ref: dict) -> Batch:
    """Materialize a dataset reference into a Batch."""
    kind = ref.get("kind")
    if kind == "blobs":
        center_seed = ref.get("center_seed")
        return synth_blobs(
            num_classes=int(ref["num_classes"]),
            dim=int(ref["dim"]),
            per_class=int(ref["per_class"]),
            spread=float(ref["spread"]),
            seed=int(ref["seed"]),
            center_seed=None if center_seed is None else int(center_seed),
        )
    if kind == "idx":
        batch = load_idx(ref["images"], ref["labels"])
        offset = int(ref.get("offset", 0))
        count = ref.get("count")
        if offset or count is not None:
            stop = len(batch) if count is None else offset + int(count)
            if not 0 <= offset < stop <= len(batch):
                raise ConfigurationError(f"idx slice [{offset}, {stop}) out of range")
            batch = batch.take(np.arange(offset, stop))
        return batch
    raise ConfigurationError(f"unknown dataset kind {kind!r}")


@dataclass
class SessionConfig:
    """Everything one collaborative training session agrees on up front."""

    session_id: str
    num_workers: int
    iterations: int
    privacy: PrivacyParams
    budget: Budget
    model: ModelSpec
    worker_datasets: list
    test_dataset: dict
    learning_rate: float
    batch_size: int
    seed: int
    dynamic_clipping: DynamicClippingConfig = field(default_factory=DynamicClippingConfig)
    stop: StopConfig = field(default_factory=StopConfig)
    subsampling_ratio: float = 1.0  # recorded for provenance; batches are deterministic
    evaluation_cadence: int = 1

    def __post_init__(self):
        if self.num_workers < 1:
            raise ConfigurationError("num_workers must be >= 1")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.evaluation_cadence < 1:
            raise ConfigurationError("evaluation_cadence must be >= 1")
        if not 0.0 < self.subsampling_ratio <= 1.0:
            raise ConfigurationError("subsampling_ratio must be in (0, 1]")
        if len(self.worker_datasets) != self.num_workers:
            raise ConfigurationError(
                f"{len(self.worker_datasets)} worker dataset refs for {self.num_workers} workers"
            )
        if self.privacy.sigma > 0 and self.dynamic_clipping.enabled and self.privacy.sigma_g <= 0:
            raise ConfigurationError(
                "dynamic clipping on a private session requires sigma_g > 0"
            )

    @property
    def max_iterations(self) -> int:
        if self.stop.max_iterations is None:
            return self.iterations
        return min(self.iterations, self.stop.max_iterations)

    @property
    def unclipped_fraction(self) -> float:
        if self.dynamic_clipping.r is not None:
            return self.dynamic_clipping.r
        return self.privacy.target_unclipped_fraction

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "num_workers": self.num_workers,
            "iterations": self.iterations,
            "privacy": {
                "sigma": self.privacy.sigma,
                "clip_bound": self.privacy.clip_bound,
                "lambda": self.privacy.lam,
                "target_unclipped_fraction": self.privacy.target_unclipped_fraction,
                "sigma_g": self.privacy.sigma_g,
                "bin_edges": [float(e) for e in self.privacy.bin_edges],
                "blinding_factor": self.privacy.blinding_factor,
            },
            "dynamic_clipping": {
                "enabled": self.dynamic_clipping.enabled,
                "cadence": self.dynamic_clipping.cadence,
                "r": self.dynamic_clipping.r,
            },
            "budget": {"epsilon": self.budget.target.epsilon, "delta": self.budget.target.delta},
            "model": {"layer_dims": list(self.model.layer_dims), "init_seed": self.model.init_seed},
            "datasets": {"workers": self.worker_datasets, "test": self.test_dataset},
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "subsampling_ratio": self.subsampling_ratio,
            "seed": self.seed,
            "stop": {
                "max_iterations": self.stop.max_iterations,
                "target_accuracy": self.stop.target_accuracy,
            },
            "evaluation_cadence": self.evaluation_cadence,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SessionConfig":
        try:
            privacy_raw = dict(raw["privacy"])
            privacy = PrivacyParams(
                sigma=float(privacy_raw["sigma"]),
                clip_bound=float(privacy_raw["clip_bound"]),
                lam=float(privacy_raw.get("lambda", 0.0)),
                target_unclipped_fraction=float(privacy_raw.get("target_unclipped_fraction", 0.75)),
                sigma_g=float(privacy_raw.get("sigma_g", 0.0)),
                bin_edges=privacy_raw.get("bin_edges"),
                blinding_factor=float(privacy_raw.get("blinding_factor", 100.0)),
            )
            dyn_raw = raw.get("dynamic_clipping", {})
            stop_raw = raw.get("stop", {})
            budget_raw = raw["budget"]
            return cls(
                session_id=str(raw["session_id"]),
                num_workers=int(raw["num_workers"]),
                iterations=int(raw["iterations"]),
                privacy=privacy,
                dynamic_clipping=DynamicClippingConfig(
                    enabled=bool(dyn_raw.get("enabled", False)),
                    cadence=int(dyn_raw.get("cadence", 10)),
                    r=None if dyn_raw.get("r") is None else float(dyn_raw["r"]),
                ),
                budget=Budget(EpsDelta(float(budget_raw["epsilon"]), float(budget_raw["delta"]))),
                model=ModelSpec(
                    layer_dims=raw["model"]["layer_dims"],
                    init_seed=int(raw["model"].get("init_seed", 0)),
                ),
                worker_datasets=list(raw["datasets"]["workers"]),
                test_dataset=dict(raw["datasets"]["test"]),
                learning_rate=float(raw["learning_rate"]),
                batch_size=int(raw["batch_size"]),
                subsampling_ratio=float(raw.get("subsampling_ratio", 1.0)),
                seed=int(raw["seed"]),
                stop=StopConfig(
                    max_iterations=stop_raw.get("max_iterations"),
                    target_accuracy=stop_raw.get("target_accuracy"),
                ),
                evaluation_cadence=int(raw.get("evaluation_cadence", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid session config: {exc}") from exc

    def canonical_bytes(self) -> bytes:
        """Deterministic serialization used as the attestation digest input."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()


STOP_BUDGET_EXHAUSTED = "budget_exhausted"
STOP_MAX_ITERATIONS = "max_iterations"
STOP_TARGET_ACCURACY = "target_accuracy"

REPORT_HEADER = "iteration,loss,accuracy,clip_bound,epsilon"


@dataclass(frozen=True)
class ReportRow:
    iteration: int
    loss: float
    accuracy: float
    clip_bound: float
    epsilon: float


@dataclass
class TrainingReport:
    """Per-iteration records plus the single reason the session stopped."""

    rows: list = field(default_factory=list)
    stop_reason: str | None = None

    @property
    def iterations_completed(self) -> int:
        return len(self.rows)

    @property
    def final_epsilon(self) -> float:
        return self.rows[-1].epsilon if self.rows else 0.0

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].accuracy if self.rows else 0.0

    def append(self, row: ReportRow) -> None:
        if self.rows and row.epsilon < self.rows[-1].epsilon:
            raise ConfigurationError("epsilon column must be monotone nondecreasing")
        self.rows.append(row)

    def to_csv(self) -> str:
        lines = [REPORT_HEADER]
        for r in self.rows:
            lines.append(f"{r.iteration},{r.loss!r},{r.accuracy!r},{r.clip_bound!r},{r.epsilon!r}")
        return "\n".join(lines) + "\n"
