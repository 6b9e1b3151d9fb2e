"""Strict JSON experiment configuration.

Unknown keys are rejected and every error names the offending field
path, e.g. ``model.hidden_dims.1``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import SAMPLING_STRATEGIES, FilterSpec, InitSpectrum
from .exceptions import ConfigurationError
from .kernels import KernelSpec
from .model import ModelGraph, build_ann, build_sdkn
from .trainer import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SpectrumSection(_Strict):
    peak_wavenumber: float = Field(8.0, gt=0)
    u_rms: float = Field(1.0, gt=0)


class DnsSection(_Strict):
    n: int = 1024
    viscosity: float = Field(0.01, gt=0)
    dt: float = Field(1e-4, gt=0)
    t_end: float = Field(0.2, gt=0)
    spectrum: SpectrumSection = SpectrumSection()


class FilterSection(_Strict):
    family: Literal["fourier_cutoff", "top_hat", "l2_projection"]
    n_coarse: int = Field(64, ge=1)
    degree: int = Field(0, ge=0)
    cutoff: Optional[int] = Field(None, ge=0)


class DatasetSection(_Strict):
    seed: int = 0
    blind_test_seed: Optional[int] = None
    dns: DnsSection = DnsSection()
    filter: FilterSection
    sampling: Literal["GRU1", "GRU2", "GRU3"] = "GRU1"
    splits: tuple[float, float, float] = (0.7, 0.15, 0.15)
    sample_every: int = Field(1, ge=1)
    target: Literal["filtered_flux", "closure"] = "filtered_flux"


class KernelSection(_Strict):
    family: Literal["gaussian", "wendland0"] = "gaussian"
    epsilon: float = Field(1.0, gt=0)


class GruSection(_Strict):
    hidden: int = Field(16, ge=1)
    position: int = Field(1, ge=0)


class ModelSection(_Strict):
    kind: Literal["sdkn", "ann", "krr"] = "sdkn"
    hidden_dims: tuple[int, ...] = (16, 32, 16)
    gru: Optional[GruSection] = None
    kernel: KernelSection = KernelSection()
    n_centers: int = Field(5, ge=1)
    krr_lambda: float = Field(0.0, ge=0)
    normalize_targets: bool = True
    init_seed: int = 0

    @model_validator(mode="after")
    def _dims_positive(self):
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims entries must be >= 1")
        return self


class TrainerSection(_Strict):
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(25, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    halving_period: int = Field(5, ge=1)
    regularization: float = Field(0.0, ge=0)
    seed: int = 0
    checkpoint_every: int = Field(0, ge=0)


class ExperimentConfig(_Strict):
    dataset: DatasetSection
    model: ModelSection = ModelSection()
    trainer: TrainerSection = TrainerSection()
    output_dir: str = "runs/experiment"

    # -- derived objects -------------------------------------------------

    def filter_spec(self) -> FilterSpec:
        f = self.dataset.filter
        return FilterSpec(f.family, f.n_coarse, f.degree, f.cutoff)

    def sampling_strategy(self):
        return SAMPLING_STRATEGIES[self.dataset.sampling]

    def init_spectrum(self) -> InitSpectrum:
        s = self.dataset.dns.spectrum
        return InitSpectrum(s.peak_wavenumber, s.u_rms)

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.model.kernel.family, self.model.kernel.epsilon)

    def train_config(self) -> TrainConfig:
        t = self.trainer
        return TrainConfig(t.batch_size, t.epochs, t.learning_rate, t.halving_period,
                           t.regularization, t.seed)

    def build_graph(self, d_in: int, d_out: int) -> ModelGraph:
        m = self.model
        gru = dict(gru_hidden=m.gru.hidden, gru_position=m.gru.position) if m.gru else {}
        if m.kind == "sdkn":
            return build_sdkn(d_in, m.hidden_dims, d_out, kernel=self.kernel_spec(),
                              n_centers=m.n_centers, **gru)
        if m.kind == "ann":
            return build_ann(d_in, m.hidden_dims, d_out, **gru)
        raise ConfigurationError("krr models have no block graph")

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def _format_error(err: ValidationError) -> str:
    first = err.errors()[0]
    path = ".".join(str(p) for p in first["loc"]) or "<root>"
    return f"{path}: {first['msg']}"


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigurationError(f"invalid config at {_format_error(err)}") from None


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON config file.  IO errors propagate as ``OSError``."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"{path}: not valid JSON ({err})") from None
    return parse_config(data)
