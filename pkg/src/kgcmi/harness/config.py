"""Run configuration: defaults, JSON round-trip and ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError

TASK_FAMILIES = ("visual", "text", "kg", "open")


@dataclass
class RunConfig:
    # architecture
    d: int = 64
    num_queries: int = 32
    ssm_state: int = 16
    num_cmm_blocks: int = 2
    qqformer_layers: int = 1
    gat_layers: int = 1
    gat_slope: float = 0.2
    classifier_hidden: int | None = None
    residuals: bool = True
    use_knowledge: bool = True
    # objective
    tau: float = 0.07
    similarity_reduce: str = "max"
    cls_loss: str = "bce"
    alpha: float = 0.2
    beta: float = 0.3
    eta: float = 0.1
    theta: float = 0.1
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    seeds: list[int] = field(default_factory=list)
    # data
    task: str = "visual"
    n_train: int = 512
    n_test: int = 256
    image_vocab: int = 64
    text_vocab: int = 256
    answer_vocab: int = 32
    num_answers: int = 8
    image_len: int = 4
    question_len: int = 6
    encoder_scale: float | None = None
    kg_organs: int = 4
    kg_findings_per_organ: int = 8
    kg_holdout_per_organ: int = 3
    kg_path: str | None = None
    # output
    out_dir: str = "runs/default"
    record_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = (
            "d", "num_queries", "ssm_state", "num_cmm_blocks", "qqformer_layers", "gat_layers",
            "batch_size", "n_train", "n_test", "image_vocab", "text_vocab", "answer_vocab",
            "image_len", "question_len", "kg_organs", "kg_findings_per_organ",
        )
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("alpha", "beta", "eta", "theta", "weight_decay", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.d < 2:
            raise ConfigError("d must be at least 2 (layer normalization)")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.num_answers < 2:
            raise ConfigError(f"num_answers must be at least 2, got {self.num_answers}")
        if not 0 < self.gat_slope < 1:
            raise ConfigError(f"gat_slope must lie in (0, 1), got {self.gat_slope}")
        if self.similarity_reduce not in ("max", "mean"):
            raise ConfigError(f"similarity_reduce must be 'max' or 'mean', got {self.similarity_reduce!r}")
        if self.cls_loss not in ("bce", "ce"):
            raise ConfigError(f"cls_loss must be 'bce' or 'ce', got {self.cls_loss!r}")
        if self.task not in TASK_FAMILIES:
            raise ConfigError(f"task must be one of {TASK_FAMILIES}, got {self.task!r}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be nonnegative")
        if not 0 <= self.kg_holdout_per_organ < self.kg_findings_per_organ:
            raise ConfigError("kg_holdout_per_organ must leave at least one training finding per organ")

    @property
    def fused_len(self) -> int:
        return self.num_queries + self.question_len

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``key=value`` strings; values parse as JSON, falling back to plain strings."""
        changes = {}
        known = {f.name for f in dataclasses.fields(self)}
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                changes[key] = json.loads(raw)
            except json.JSONDecodeError:
                changes[key] = raw
        return self.replace(**changes)
