"""Run configuration.  Defaults reproduce the full-scale hyperparameters; the
``desk`` preset shrinks the run to something a laptop finishes in minutes."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetworkConfig(_Strict):
    input_days: int = Field(4, ge=1)
    horizon_days: int = Field(2, ge=1)
    resolution: int = Field(24, ge=1)
    dilations: list[list[int]] = [[2], [4], [8]]
    patch_hidden: int = Field(5, ge=1)
    patch_context: int = Field(5, ge=1)
    series_context_len: int = Field(2, ge=1)
    embedded_context_len: int = Field(10, ge=1)
    date_embedding_size: int = Field(3, ge=1)
    team_top_k: int = Field(3, ge=1)
    team_size: int = Field(4, ge=1)
    quantile_knots: list[float] = [0.2, 0.6]
    quantile_half_overlap: float = 0.1
    leaky_slope: float = 0.01

    no_context: bool = False
    no_global_adapter: bool = False
    no_per_series_adapter: bool = False
    sequential_adapters: bool = False
    no_patches: bool = False
    no_teams: bool = False
    no_subranges: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.team_top_k > self.team_size:
            raise ValueError(f"team top-K {self.team_top_k} exceeds team size {self.team_size}")
        if not self.dilations or any(not block for block in self.dilations):
            raise ValueError("dilations need at least one block with one layer")
        if any(d < 1 for block in self.dilations for d in block):
            raise ValueError("every dilation must be >= 1")
        return self

    @property
    def layer_dilations(self) -> list[int]:
        return [d for block in self.dilations for d in block]

    @property
    def members(self) -> tuple[int, int]:
        """``(top_k, team_size)`` after the no_teams toggle."""
        return (1, 1) if self.no_teams else (self.team_top_k, self.team_size)

    @property
    def knots(self) -> tuple[float, ...]:
        return () if self.no_subranges else tuple(self.quantile_knots)

    @property
    def half_overlap(self) -> float:
        return 0.0 if self.no_subranges else self.quantile_half_overlap

    @property
    def toggles(self) -> dict[str, bool]:
        names = ("no_context", "no_global_adapter", "no_per_series_adapter", "sequential_adapters",
                 "no_patches", "no_teams", "no_subranges")
        return {n: getattr(self, n) for n in names}


class TrainConfig(_Strict):
    epochs: int = Field(8, ge=1)
    batch_schedule: dict[int, int] = {0: 2, 2: 5, 3: 12, 4: 25}
    learning_rate: float = Field(1e-3, gt=0)
    lr_divisors: dict[int, float] = {5: 3.0, 6: 8.0, 7: 20.0}
    lr_multiplier_per_series: float = Field(3.0, gt=0)
    updates_per_epoch: list[int] | None = None
    updates_first_epoch: int = Field(8320, ge=1)
    updates_exponent: float = 0.3
    training_steps: int = Field(20, ge=1)
    warmup_steps: int | None = Field(None, ge=0)
    crit_selection_prob: float = Field(0.9, gt=0, le=1)
    losses_ratio: float = Field(5.0, gt=0)
    controller_every: int = Field(20, ge=1)
    controller_c: float = 0.01
    gamma1_init: float = Field(0.0, ge=0)
    gamma2_init: float = 1.0
    gamma2_rule: Literal["literal", "ratio"] = "literal"
    beta_shape: float = Field(0.5, gt=0, lt=1)

    @model_validator(mode="after")
    def _check(self):
        if 0 not in self.batch_schedule:
            raise ValueError("batch_schedule must define epoch 0")
        if self.updates_per_epoch is not None and len(self.updates_per_epoch) < self.epochs:
            raise ValueError("updates_per_epoch must list a value for every epoch")
        return self


class SplitConfig(_Strict):
    train_end: str = "2010-01-01"
    valid_end: str = "2013-01-01"
    test_end: str | None = "2016-01-01"


class RunConfig(_Strict):
    network: NetworkConfig = NetworkConfig()
    training: TrainConfig = TrainConfig()
    split: SplitConfig = SplitConfig()
    ensemble_size: int = Field(1, ge=1)
    seed: int = 0
    data: str | None = None
    output_dir: str | None = None

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; paths do not contribute."""
        payload = self.model_dump(mode="json", exclude={"data", "output_dir"})
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc


def desk_config() -> RunConfig:
    """Reduced setup used by the acceptance experiment on the synthetic panel."""
    return RunConfig(
        network=NetworkConfig(dilations=[[2], [4]]),
        training=TrainConfig(
            epochs=4,
            batch_schedule={0: 2, 2: 5, 3: 12, 4: 25},
            updates_first_epoch=500,
            lr_divisors={3: 3.0},
        ),
        split=SplitConfig(train_end="2003-01-01", valid_end="2004-01-01", test_end="2005-01-01"),
    )
