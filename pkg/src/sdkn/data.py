"""Closure-term dataset factory built on a 1D viscous Burgers DNS.

The fine-grid solution is advanced with a dealiased pseudo-spectral scheme.
Coarse data is obtained with one of three LES filters (global Fourier
cutoff, local box average, local L2 projection onto piecewise
polynomials), and samples pair a short time series of the filtered
velocity at one coarse point with the filtered flux divergence (or the
perfect closure) at the last instance of that series.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numpy.polynomial import legendre
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError, NumericalError, UsageError

DOMAIN_LENGTH = 2.0 * np.pi

FILTER_FAMILIES = ("fourier_cutoff", "top_hat", "l2_projection")
TARGETS = ("filtered_flux", "closure")


# ---------------------------------------------------------------------------
# DNS
# ---------------------------------------------------------------------------


def _wavenumbers(n: int) -> np.ndarray:
    return np.arange(n // 2 + 1, dtype=np.float64)


def flux_divergence(u, viscosity, *, flux="burgers", speed=1.0):
    """Evaluate ``d/dx F(u) - nu * d2u/dx2`` pseudo-spectrally on the last axis.

    ``flux="burgers"`` uses ``F = u**2 / 2`` with 2/3-rule dealiasing,
    ``flux="linear"`` uses ``F = speed * u``.  The Nyquist mode is dropped
    from the first derivative.
    """
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[-1]
    k = _wavenumbers(n)
    u_hat = np.fft.rfft(u, axis=-1)
    if flux == "burgers":
        keep = k <= n / 3.0
        u_trunc = np.fft.irfft(u_hat * keep, n, axis=-1)
        f_hat = np.fft.rfft(0.5 * u_trunc * u_trunc, axis=-1) * keep
    elif flux == "linear":
        f_hat = speed * u_hat
    else:
        raise ConfigurationError(f"unknown flux {flux!r}")
    ik = 1j * k
    if n % 2 == 0:
        ik[-1] = 0.0
    return np.fft.irfft(ik * f_hat + viscosity * k * k * u_hat, n, axis=-1)


@dataclass(frozen=True)
class InitSpectrum:
    """Random-phase initial condition with ``E(k) ~ k^4 exp(-(k/k0)^2)``."""

    peak_wavenumber: float = 8.0
    u_rms: float = 1.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        k = np.arange(1, n // 2, dtype=np.float64)
        energy = k**4 * np.exp(-((k / self.peak_wavenumber) ** 2))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=k.size)
        u_hat = np.zeros(n // 2 + 1, dtype=np.complex128)
        u_hat[1 : n // 2] = np.sqrt(energy) * np.exp(1j * phases)
        u = np.fft.irfft(u_hat, n)
        return u * (self.u_rms / np.sqrt(np.mean(u * u)))


@dataclass
class DnsField:
    """Stored DNS trajectory on a periodic grid of ``n`` points over ``[0, 2pi)``."""

    n: int
    viscosity: float
    dt: float
    times: np.ndarray
    snapshots: np.ndarray  # (n_snapshots, n)
    flux: str = "burgers"
    speed: float = 1.0
    length: float = DOMAIN_LENGTH

    def index_of(self, t: float) -> int:
        idx = int(round(t / self.dt))
        if idx < 0 or idx >= len(self.times) or abs(self.times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise UsageError(f"no DNS snapshot stored at t={t!r}")
        return idx

    def snapshot(self, t: float) -> np.ndarray:
        return self.snapshots[self.index_of(t)]

    def flux_divergence(self, u):
        return flux_divergence(u, self.viscosity, flux=self.flux, speed=self.speed)


def burgers_dns(
    seed: int,
    n: int,
    viscosity: float,
    dt: float,
    t_end: float,
    spectrum: InitSpectrum | None = None,
    *,
    u0=None,
    flux: str = "burgers",
    speed: float = 1.0,
) -> DnsField:
    """Integrate ``u_t + d/dx F(u) = nu u_xx`` with RK4 and keep every step.

    ``u0`` overrides the random initial field drawn from ``spectrum``.
    """
    if n < 2 or n & (n - 1):
        raise ConfigurationError(f"grid size must be a power of two, got {n}")
    if viscosity <= 0 or dt <= 0 or t_end < 0:
        raise ConfigurationError("viscosity and dt must be positive and t_end non-negative")
    if u0 is None:
        u0 = (spectrum or InitSpectrum()).sample(np.random.default_rng(seed), n)
    u = np.array(u0, dtype=np.float64)
    if u.shape != (n,):
        raise ConfigurationError(f"initial field has shape {u.shape}, expected ({n},)")
    umax0 = float(np.max(np.abs(u)))
    if umax0 > 0 and dt > 0.5 * (DOMAIN_LENGTH / n) / umax0:
        raise ConfigurationError(
            f"CFL violated: dt={dt} > {0.5 * (DOMAIN_LENGTH / n) / umax0:.6g}"
        )

    def rhs(v):
        return -flux_divergence(v, viscosity, flux=flux, speed=speed)

    n_steps = int(round(t_end / dt))
    snaps = np.empty((n_steps + 1, n))
    snaps[0] = u
    limit = 100.0 * umax0
    for step in range(1, n_steps + 1):
        k1 = rhs(u)
        k2 = rhs(u + 0.5 * dt * k1)
        k3 = rhs(u + 0.5 * dt * k2)
        k4 = rhs(u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        umax = np.max(np.abs(u))
        if not np.isfinite(umax) or umax > limit:
            raise NumericalError(f"DNS blew up at step {step} (max|u|={umax:.3g})")
        snaps[step] = u
    times = np.arange(n_steps + 1) * dt
    return DnsField(n, viscosity, dt, times, snaps, flux, speed)


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterSpec:
    """LES filter description.

    ``cutoff`` is only used by ``fourier_cutoff`` (defaults to ``n_coarse // 2``)
    and ``degree`` only by ``l2_projection``.
    """

    family: str
    n_coarse: int
    degree: int = 0
    cutoff: int | None = None

    @property
    def cutoff_wavenumber(self) -> int:
        return self.n_coarse // 2 if self.cutoff is None else self.cutoff

    def validate(self, n: int) -> None:
        if self.family not in FILTER_FAMILIES:
            raise ConfigurationError(f"unknown filter family {self.family!r}")
        if not 1 <= self.n_coarse <= n or n % self.n_coarse:
            raise ConfigurationError(
                f"coarse size {self.n_coarse} must divide the fine size {n}"
            )
        if self.family == "fourier_cutoff":
            if not 0 <= self.cutoff_wavenumber <= self.n_coarse // 2:
                raise ConfigurationError(
                    f"cutoff {self.cutoff_wavenumber} exceeds n_coarse/2={self.n_coarse // 2}"
                )
        elif self.family == "l2_projection":
            p = self.degree
            if p < 0 or self.n_coarse % (p + 1):
                raise ConfigurationError(
                    f"n_coarse={self.n_coarse} is not a multiple of degree+1={p + 1}"
                )
            n_el = self.n_coarse // (p + 1)
            if n % n_el or n // n_el < p + 1:
                raise ConfigurationError(
                    f"{n_el} elements do not tile {n} fine points with >= {p + 1} points each"
                )


def _projection_operators(n: int, spec: FilterSpec):
    """Matrices mapping fine element values to nodal values and back.

    Fine points act as equal-weight quadrature nodes at the element's cell
    centres; nodal points are equispaced cell centres so the coarse grid
    is uniform across elements.
    """
    p = spec.degree
    m = n // (spec.n_coarse // (p + 1))
    xi_fine = -1.0 + (2.0 * np.arange(m) + 1.0) / m
    xi_nodes = -1.0 + (2.0 * np.arange(p + 1) + 1.0) / (p + 1)
    vf = legendre.legvander(xi_fine, p)
    vn = legendre.legvander(xi_nodes, p)
    to_nodes = vn @ np.linalg.pinv(vf)
    to_fine = vf @ np.linalg.inv(vn)
    return to_nodes, to_fine


def apply_filter(u, spec: FilterSpec) -> np.ndarray:
    """Filter fine-grid field(s) along the last axis onto ``spec.n_coarse`` points."""
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[-1]
    spec.validate(n)
    lead = u.shape[:-1]
    if spec.family == "fourier_cutoff":
        u_hat = np.fft.rfft(u, axis=-1)
        u_hat[..., _wavenumbers(n) > spec.cutoff_wavenumber] = 0.0
        return np.fft.irfft(u_hat, n, axis=-1)[..., :: n // spec.n_coarse]
    if spec.family == "top_hat":
        return u.reshape(*lead, spec.n_coarse, n // spec.n_coarse).mean(axis=-1)
    to_nodes, _ = _projection_operators(n, spec)
    n_el = spec.n_coarse // (spec.degree + 1)
    elems = u.reshape(*lead, n_el, -1)
    # project deviations from each element's first value so constants come back exactly
    ref = elems[..., :1]
    return (ref + (elems - ref) @ to_nodes.T).reshape(*lead, spec.n_coarse)


def lift(coarse, spec: FilterSpec, n: int) -> np.ndarray:
    """Reconstruct a fine-grid field from filtered values in the filter's own representation."""
    coarse = np.asarray(coarse, dtype=np.float64)
    spec.validate(n)
    lead = coarse.shape[:-1]
    nc = spec.n_coarse
    if spec.family == "fourier_cutoff":
        c_hat = np.fft.rfft(coarse, axis=-1) * (n / nc)
        if nc % 2 == 0 and nc < n:
            c_hat[..., -1] *= 0.5
        f_hat = np.zeros(lead + (n // 2 + 1,), dtype=np.complex128)
        f_hat[..., : c_hat.shape[-1]] = c_hat
        return np.fft.irfft(f_hat, n, axis=-1)
    if spec.family == "top_hat":
        return np.repeat(coarse, n // nc, axis=-1)
    _, to_fine = _projection_operators(n, spec)
    n_el = nc // (spec.degree + 1)
    return (coarse.reshape(*lead, n_el, -1) @ to_fine.T).reshape(*lead, n)


def closure_term(dns: DnsField, t: float, spec: FilterSpec, coarse_operator=None) -> np.ndarray:
    """Perfect LES closure ``R~(filter(u)) - filter(R(F(u)))`` at time ``t``.

    ``coarse_operator`` defaults to the DNS scheme evaluated at coarse
    resolution.
    """
    u = dns.snapshot(t)
    return _closure_from_fields(dns, u, spec, coarse_operator)


def _closure_from_fields(dns, u, spec, coarse_operator=None):
    op = coarse_operator or dns.flux_divergence
    return op(apply_filter(u, spec)) - apply_filter(dns.flux_divergence(u), spec)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingStrategy:
    name: str
    n_seq: int
    dt_seq: float


SAMPLING_STRATEGIES = {
    "GRU1": SamplingStrategy("GRU1", 3, 1e-3),
    "GRU2": SamplingStrategy("GRU2", 10, 1e-4),
    "GRU3": SamplingStrategy("GRU3", 21, 1e-4),
}


class ClosureSample(NamedTuple):
    inputs: np.ndarray  # (n_seq, d_in)
    target: np.ndarray  # (d_out,)
    point_index: int
    final_time: float


@dataclass
class SampleSet:
    """Column-stored collection of :class:`ClosureSample` records."""

    inputs: np.ndarray  # (n, n_seq, d_in)
    targets: np.ndarray  # (n, d_out)
    point_index: np.ndarray = field(default=None)
    final_time: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.inputs)
        if self.point_index is None:
            self.point_index = np.full(n, -1, dtype=np.int64)
        if self.final_time is None:
            self.final_time = np.full(n, np.nan)

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, i) -> ClosureSample:
        return ClosureSample(
            self.inputs[i], self.targets[i], int(self.point_index[i]), float(self.final_time[i])
        )


@dataclass
class ClosureDataset:
    train: SampleSet
    val: SampleSet
    test: SampleSet
    n_seq: int
    dt_seq: float

    def split(self, name: str) -> SampleSet:
        if name not in ("train", "val", "test"):
            raise UsageError(f"unknown split {name!r}")
        return getattr(self, name)


def _sample_block(dns, spec, strategy, final_idx, stride, target):
    n_seq = strategy.n_seq
    offsets = (np.arange(n_seq) - (n_seq - 1)) * stride
    window = final_idx[:, None] + offsets[None, :]  # (n_final, n_seq)
    needed = np.unique(window)
    filtered = apply_filter(dns.snapshots[needed], spec)
    lookup = np.searchsorted(needed, window)
    series = filtered[lookup]  # (n_final, n_seq, n_c)
    fine_final = dns.snapshots[final_idx]
    flux_f = apply_filter(dns.flux_divergence(fine_final), spec)
    if target == "filtered_flux":
        tgt = flux_f
    else:
        tgt = dns.flux_divergence(filtered[np.searchsorted(needed, final_idx)]) - flux_f
    n_final, n_c = len(final_idx), spec.n_coarse
    inputs = series.transpose(0, 2, 1).reshape(n_final * n_c, n_seq, 1)
    return SampleSet(
        inputs=np.ascontiguousarray(inputs),
        targets=tgt.reshape(n_final * n_c, 1),
        point_index=np.tile(np.arange(n_c), n_final),
        final_time=np.repeat(dns.times[final_idx], n_c),
    )


def _stride(dns: DnsField, strategy: SamplingStrategy) -> int:
    ratio = strategy.dt_seq / dns.dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * ratio:
        raise ConfigurationError(
            f"DNS step {dns.dt} does not divide the series spacing {strategy.dt_seq}"
        )
    return stride


def admissible_final_indices(dns: DnsField, strategy: SamplingStrategy, sample_every: int = 1):
    start = (strategy.n_seq - 1) * _stride(dns, strategy)
    if start >= len(dns.times):
        raise ConfigurationError(
            f"{strategy.name} needs {start + 1} snapshots, DNS has {len(dns.times)}"
        )
    return np.arange(start, len(dns.times), sample_every)


def _split_counts(n_final: int, fractions: Sequence[float]):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n_train = int(math.floor(fractions[0] * n_final))
    n_val = int(math.floor(fractions[1] * n_final))
    return n_train, n_val, n_final - n_train - n_val


def build_dataset(
    dns: DnsField,
    spec: FilterSpec,
    strategy: SamplingStrategy,
    split: Sequence[float] = (0.7, 0.15, 0.15),
    *,
    sample_every: int = 1,
    target: str = "filtered_flux",
    blind_dns: DnsField | None = None,
) -> ClosureDataset:
    """Cut the DNS into samples and split them by blocks of final time.

    Every coarse point and every admissible final time gives one sample.
    Train final times precede validation ones, which precede test ones.
    With ``blind_dns`` the test block is taken from that second simulation
    over the same final-time window.
    """
    if target not in TARGETS:
        raise ConfigurationError(f"unknown target {target!r}; expected one of {TARGETS}")
    if sample_every < 1:
        raise ConfigurationError("sample_every must be >= 1")
    spec.validate(dns.n)
    stride = _stride(dns, strategy)
    final_idx = admissible_final_indices(dns, strategy, sample_every)
    n_train, n_val, n_test = _split_counts(len(final_idx), split)
    blocks = np.split(final_idx, [n_train, n_train + n_val])
    parts = [_sample_block(dns, spec, strategy, b, stride, target) for b in blocks[:2]]
    if blind_dns is not None:
        if blind_dns.n != dns.n or blind_dns.dt != dns.dt or len(blind_dns.times) != len(dns.times):
            raise ConfigurationError("blind-test DNS must share grid, time step and length")
        parts.append(_sample_block(blind_dns, spec, strategy, blocks[2], stride, target))
    else:
        parts.append(_sample_block(dns, spec, strategy, blocks[2], stride, target))
    return ClosureDataset(*parts, n_seq=strategy.n_seq, dt_seq=strategy.dt_seq)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


class Normalizer(TransformerMixin, BaseEstimator):
    """Zero-mean, unit-variance scaling per feature (last axis).

    Statistics pool every other axis, so for sequence input of shape
    ``(n, n_seq, d)`` each of the ``d`` channels shares one mean and one
    standard deviation across time instances.
    """

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(-1, X.shape[-1])
        if flat.shape[0] == 0:
            raise ConfigurationError("cannot fit a normalizer on an empty array")
        self.mean_ = flat.mean(axis=0)
        self.scale_ = flat.std(axis=0)
        if np.any(~(self.scale_ > 0)):
            bad = np.flatnonzero(~(self.scale_ > 0)).tolist()
            raise ConfigurationError(f"zero-variance feature(s) {bad}")
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.mean_

    def to_dict(self):
        return {"mean": self.mean_.tolist(), "std": self.scale_.tolist()}

    @classmethod
    def from_dict(cls, d):
        self = cls()
        self.mean_ = np.asarray(d["mean"], dtype=np.float64)
        self.scale_ = np.asarray(d["std"], dtype=np.float64)
        return self


def fit_normalizer(samples: SampleSet) -> Normalizer:
    return Normalizer().fit(samples.inputs)


def apply_normalizer(norm: Normalizer, samples: SampleSet) -> SampleSet:
    return SampleSet(norm.transform(samples.inputs), samples.targets.copy(),
                     samples.point_index, samples.final_time)


# ---------------------------------------------------------------------------
# Binary dataset file
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"SDKNDS01"
DATASET_VERSION = 1
_HEADER = struct.Struct("<7I")


def write_dataset(path, dataset: ClosureDataset, sidecar: dict | None = None) -> Path:
    """Write the binary dataset and, when given, a JSON sidecar next to it."""
    path = Path(path)
    splits = [dataset.train, dataset.val, dataset.test]
    d_in = splits[0].inputs.shape[-1]
    d_out = splits[0].targets.shape[-1]
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_HEADER.pack(DATASET_VERSION, dataset.n_seq, d_in, d_out, *map(len, splits)))
        for s in splits:
            rows = np.concatenate(
                [s.inputs.reshape(len(s), dataset.n_seq * d_in), s.targets.reshape(len(s), d_out)],
                axis=1,
            )
            fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())
    if sidecar is not None:
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_dataset(path, dt_seq: float = float("nan")) -> ClosureDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise ConfigurationError(f"{path}: not a dataset file (bad magic)")
    version, n_seq, d_in, d_out, *counts = _HEADER.unpack_from(raw, 8)
    if version != DATASET_VERSION:
        raise ConfigurationError(f"{path}: unsupported dataset version {version}")
    width = n_seq * d_in + d_out
    body = np.frombuffer(raw, dtype="<f8", offset=8 + _HEADER.size)
    if body.size != width * sum(counts):
        raise ConfigurationError(f"{path}: truncated or oversized payload")
    rows = body.reshape(-1, width).astype(np.float64)
    parts, start = [], 0
    for c in counts:
        block = rows[start : start + c]
        parts.append(SampleSet(block[:, : n_seq * d_in].reshape(c, n_seq, d_in).copy(),
                               block[:, n_seq * d_in :].copy()))
        start += c
    return ClosureDataset(*parts, n_seq=n_seq, dt_seq=dt_seq)


def read_sidecar(path) -> dict:
    return json.loads(sidecar_path(path).read_text())


def spec_dict(spec) -> dict:
    return asdict(spec)
