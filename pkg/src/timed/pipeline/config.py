"""Run configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..diffusion import NoiseSchedule, build_linear_schedule
from ..losses import LossWeights
from ..networks import TransformerConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Strict):
    name: Literal["sines", "ecg", "stocks", "energy", "csv"] = "sines"
    n: int = Field(2000, ge=1)
    t: int = Field(24, ge=2)
    f: int = Field(4, ge=1)
    csv: Optional[str] = None
    columns: Optional[list[str]] = None
    stride: int = Field(1, ge=1)
    ecg_noise_std: float = Field(0.02, ge=0)

    @model_validator(mode="after")
    def _csv_needs_path(self):
        if self.name in ("csv", "stocks", "energy") and not self.csv:
            raise ValueError(f"dataset {self.name!r} needs a 'csv' path")
        return self


class ModelConfig(_Strict):
    d: int = Field(32, ge=1)
    H: int = Field(4, ge=1)
    L: int = Field(2, ge=1)
    d_ff: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.d % self.H:
            raise ValueError(f"d={self.d} must be divisible by H={self.H}")
        return self


class DiffusionConfig(_Strict):
    T_diff: int = Field(50, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 1e-1

    @model_validator(mode="after")
    def _bounds(self):
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        return self


class WeightsConfig(_Strict):
    lambda_ar: float = Field(1.0, ge=0)
    lambda_mmd: float = Field(1.0, ge=0)
    lambda_w: float = Field(0.1, ge=0)
    gp_lambda: float = Field(10.0, ge=0)
    mmd_sigma: Optional[float] = Field(None, gt=0)


class AblationConfig(_Strict):
    disable_asl: bool = False
    disable_mmd: bool = False
    disable_wc: bool = False
    disable_mask: bool = False


class EvalConfig(_Strict):
    repeats: int = Field(4, ge=1)
    n_samples: Optional[int] = Field(None, ge=2)
    gru_steps: int = Field(2000, ge=1)
    gru_batch: int = Field(128, ge=1)
    gru_lr: float = Field(1e-3, gt=0)


class RunConfig(_Strict):
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    weights: WeightsConfig = WeightsConfig()
    ablation: AblationConfig = AblationConfig()
    eval: EvalConfig = EvalConfig()
    delta: int = Field(1, ge=1)
    epochs: tuple[int, int, int] = (20, 50, 50)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    critic_updates_per_step: int = Field(5, ge=1)
    seed: int = 0
    out: str = "runs/default"

    @field_validator("epochs")
    @classmethod
    def _epochs_nonneg(cls, v):
        if any(e < 0 for e in v):
            raise ValueError("stage epochs must be nonnegative")
        return v

    @model_validator(mode="after")
    def _delta_fits(self):
        if 2 * self.delta > self.dataset.t:
            raise ValueError(f"delta={self.delta} must be at most half the sequence length {self.dataset.t}")
        return self

    # derived views -------------------------------------------------------

    def transformer(self, n_features: int | None = None) -> TransformerConfig:
        m = self.model
        return TransformerConfig(T_data=self.dataset.t, F=n_features or self.dataset.f, d=m.d, H=m.H, L=m.L, d_ff=m.d_ff)

    def schedule(self) -> NoiseSchedule:
        d = self.diffusion
        return build_linear_schedule(d.T_diff, d.beta_start, d.beta_end)

    def loss_weights(self) -> LossWeights:
        """Weights after applying the ablation switches."""
        w, a = self.weights, self.ablation
        return LossWeights(
            lambda_ar=0.0 if a.disable_asl else w.lambda_ar,
            lambda_mmd=0.0 if a.disable_mmd else w.lambda_mmd,
            lambda_w=0.0 if a.disable_wc else w.lambda_w,
            gp_lambda=w.gp_lambda,
        )

    def with_updates(self, **changes) -> "RunConfig":
        """Copy with (possibly nested, dotted) fields replaced, re-validated."""
        data = self.model_dump()
        for key, value in changes.items():
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = value
        return RunConfig.model_validate(data)

    def fingerprint(self) -> str:
        """Hash of everything that determines trained weights and samples."""
        data = self.model_dump(mode="json", exclude={"out", "eval"})
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2) + "\n"


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    return RunConfig.model_validate(json.loads(text))


def builtin_config(name: str) -> RunConfig:
    """Packaged presets: ``desk`` and ``paper``."""
    text = resources.files("timed.configs").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return RunConfig.model_validate(json.loads(text))
