import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdkn.data import (SAMPLING_STRATEGIES, ClosureDataset, FilterSpec, InitSpectrum, Normalizer,
                       SampleSet, admissible_final_indices, apply_filter, build_dataset,
                       burgers_dns, closure_term, fit_normalizer, lift, read_dataset,
                       read_sidecar, write_dataset)
from sdkn.exceptions import ConfigurationError, NumericalError, UsageError

N = 128
X = 2 * np.pi * np.arange(N) / N
FILTERS = [FilterSpec("fourier_cutoff", 32, cutoff=10), FilterSpec("top_hat", 32),
           FilterSpec("l2_projection", 32, degree=3)]


@pytest.fixture(scope="module")
def small_dns():
    return burgers_dns(3, N, 0.05, 1e-4, 0.006, InitSpectrum(4.0, 1.0))


def test_zero_field_is_fixed_point():
    dns = burgers_dns(0, 64, 0.1, 1e-3, 0.05, u0=np.zeros(64))
    assert np.all(dns.snapshots == 0.0)
    assert len(dns.times) == 51


def test_initial_spectrum_rms():
    u = InitSpectrum(8.0, 2.5).sample(np.random.default_rng(0), 256)
    assert np.sqrt(np.mean(u * u)) == pytest.approx(2.5, rel=1e-12)
    assert abs(u.mean()) < 1e-12


def test_dns_is_deterministic():
    a = burgers_dns(5, 64, 0.1, 1e-3, 0.02)
    b = burgers_dns(5, 64, 0.1, 1e-3, 0.02)
    assert a.snapshots.tobytes() == b.snapshots.tobytes()


def test_dns_rejects_cfl_violation():
    with pytest.raises(ConfigurationError):
        burgers_dns(0, 1024, 0.01, 1.0, 2.0)


def test_dns_blow_up_is_numeric_error():
    with pytest.raises(NumericalError):
        burgers_dns(0, 64, 1e3, 1e-2, 1.0, u0=np.sin(X[::2]) * 0.01)


def test_dns_decays_energy(small_dns):
    e = np.mean(small_dns.snapshots ** 2, axis=1)
    assert e[-1] < e[0]


def test_small_mode_decays_viscously():
    # amplitude small enough that advection is negligible next to diffusion
    u0 = 1e-8 * np.sin(3 * X)
    dns = burgers_dns(0, N, 0.2, 1e-3, 0.1, u0=u0)
    np.testing.assert_allclose(dns.snapshots[-1], u0 * np.exp(-0.2 * 9 * 0.1), rtol=0,
                               atol=1e-15)


def test_missing_snapshot_is_usage_error(small_dns):
    with pytest.raises(UsageError):
        small_dns.snapshot(1.0)


@pytest.mark.parametrize("spec", FILTERS, ids=lambda s: s.family)
def test_filter_preserves_constants(spec):
    np.testing.assert_allclose(apply_filter(np.full(N, 3.25), spec), 3.25, rtol=0, atol=1e-13)


def test_fourier_keeps_resolved_mode():
    out = apply_filter(np.sin(X), FILTERS[0])
    np.testing.assert_allclose(out, np.sin(X[::4]), atol=1e-13)


def test_fourier_removes_mode_above_cutoff():
    np.testing.assert_allclose(apply_filter(np.sin(12 * X), FILTERS[0]), 0.0, atol=1e-13)


def test_top_hat_is_block_mean():
    u = np.arange(8.0)
    np.testing.assert_array_equal(apply_filter(u, FilterSpec("top_hat", 2)), [1.5, 5.5])


def test_projection_reproduces_polynomials():
    # within each element a cubic is reproduced exactly at the nodes
    spec = FilterSpec("l2_projection", 8, degree=3)
    n = 64
    u = np.zeros(n)
    xi = -1 + (2 * np.arange(32) + 1) / 32
    u[:32] = xi ** 3 - xi
    u[32:] = 2 * xi ** 2
    nodes = -1 + (2 * np.arange(4) + 1) / 4
    np.testing.assert_allclose(apply_filter(u, spec), np.r_[nodes ** 3 - nodes, 2 * nodes ** 2],
                               atol=1e-13)


def test_filter_size_errors():
    with pytest.raises(ConfigurationError):
        apply_filter(np.zeros(100), FilterSpec("top_hat", 32))
    with pytest.raises(ConfigurationError):
        apply_filter(np.zeros(N), FilterSpec("l2_projection", 30, degree=3))
    with pytest.raises(ConfigurationError):
        apply_filter(np.zeros(N), FilterSpec("gaussian", 32))


@pytest.mark.parametrize("spec", FILTERS, ids=lambda s: s.family)
def test_lift_then_filter_is_identity(spec, rng):
    coarse = apply_filter(rng.normal(size=N), spec)
    np.testing.assert_allclose(apply_filter(lift(coarse, spec, N), spec), coarse, atol=1e-12)


def test_identity_filter_closure_vanishes(small_dns):
    spec = FilterSpec("fourier_cutoff", N, cutoff=N // 2)
    assert np.max(np.abs(closure_term(small_dns, small_dns.times[10], spec))) < 1e-10


def test_linear_flux_commutes_with_fourier_filter():
    dns = burgers_dns(1, N, 0.05, 1e-3, 0.01, flux="linear", speed=1.7)
    c = closure_term(dns, dns.times[-1], FilterSpec("fourier_cutoff", 32, cutoff=10))
    assert np.max(np.abs(c)) < 1e-10


def test_large_viscosity_closure_is_small():
    u0 = np.sin(X) + 0.5 * np.cos(2 * X)
    dns = burgers_dns(0, N, 5.0, 1e-4, 0.001, u0=u0)
    spec = FilterSpec("fourier_cutoff", 32)
    c = closure_term(dns, dns.times[-1], spec)
    flux = apply_filter(dns.flux_divergence(dns.snapshots[-1]), spec)
    assert np.linalg.norm(c) < 1e-3 * np.linalg.norm(flux)


@pytest.mark.parametrize("name,n_seq,dt_seq", [("GRU1", 3, 1e-3), ("GRU2", 10, 1e-4),
                                               ("GRU3", 21, 1e-4)])
def test_table1_strategies(name, n_seq, dt_seq):
    s = SAMPLING_STRATEGIES[name]
    assert (s.n_seq, s.dt_seq) == (n_seq, dt_seq)


def test_gru3_series_spacing(small_dns):
    spec = FilterSpec("top_hat", 32)
    ds = build_dataset(small_dns, spec, SAMPLING_STRATEGIES["GRU3"])
    assert ds.train.inputs.shape[1:] == (21, 1)
    sample = ds.train[5]
    t_final = sample.final_time
    for j in range(21):
        t = t_final - (20 - j) * 1e-4
        ref = apply_filter(small_dns.snapshot(t), spec)[sample.point_index]
        assert sample.inputs[j, 0] == ref


def test_dataset_counting_rule(small_dns):
    spec = FilterSpec("top_hat", 32)
    strat = SAMPLING_STRATEGIES["GRU1"]
    ds = build_dataset(small_dns, spec, strat)
    n_final = len(admissible_final_indices(small_dns, strat))
    assert n_final == 61 - 20
    assert len(ds.train) + len(ds.val) + len(ds.test) == 32 * n_final


def test_splits_are_time_blocked(small_dns):
    ds = build_dataset(small_dns, FilterSpec("top_hat", 32), SAMPLING_STRATEGIES["GRU2"])
    assert ds.train.final_time.max() < ds.val.final_time.min()
    assert ds.val.final_time.max() < ds.test.final_time.min()


def test_insufficient_span():
    dns = burgers_dns(0, 64, 0.1, 1e-4, 0.001)
    with pytest.raises(ConfigurationError):
        build_dataset(dns, FilterSpec("top_hat", 16), SAMPLING_STRATEGIES["GRU1"])


def test_dns_step_must_divide_spacing():
    dns = burgers_dns(0, 64, 0.1, 3e-4, 0.01)
    with pytest.raises(ConfigurationError):
        build_dataset(dns, FilterSpec("top_hat", 16), SAMPLING_STRATEGIES["GRU2"])


def test_closure_target_matches_closure_term(small_dns):
    spec = FilterSpec("fourier_cutoff", 32, cutoff=10)
    ds = build_dataset(small_dns, spec, SAMPLING_STRATEGIES["GRU1"], target="closure")
    s = ds.train[40]
    assert s.target[0] == pytest.approx(closure_term(small_dns, s.final_time, spec)[s.point_index],
                                        abs=1e-12)


def test_normalizer_examples():
    z = Normalizer().fit_transform(np.array([[0.0], [2.0]]))
    np.testing.assert_array_equal(z, [[-1.0], [1.0]])


def test_normalizer_shift_invariance(rng):
    x = rng.normal(size=(30, 4, 1))
    a = Normalizer().fit_transform(x)
    b = Normalizer().fit_transform(x + 17.0)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_normalizer_standard_data_unchanged(rng):
    x = rng.normal(size=(50, 2))
    x = (x - x.mean(0)) / x.std(0)
    np.testing.assert_allclose(Normalizer().fit_transform(x), x, atol=1e-12)


def test_normalizer_zero_variance():
    with pytest.raises(ConfigurationError):
        Normalizer().fit(np.ones((5, 1)))


def test_normalizer_roundtrip(rng):
    x = rng.normal(size=(10, 3, 2))
    n = Normalizer().fit(x)
    m = Normalizer.from_dict(n.to_dict())
    np.testing.assert_array_equal(m.transform(x), n.transform(x))
    np.testing.assert_allclose(n.inverse_transform(n.transform(x)), x, atol=1e-14)


def test_fit_normalizer_uses_inputs(small_dns):
    ds = build_dataset(small_dns, FilterSpec("top_hat", 32), SAMPLING_STRATEGIES["GRU1"])
    n = fit_normalizer(ds.train)
    z = n.transform(ds.train.inputs)
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12


def test_dataset_file_roundtrip(small_dns, tmp_path):
    ds = build_dataset(small_dns, FilterSpec("top_hat", 32), SAMPLING_STRATEGIES["GRU1"])
    path = write_dataset(tmp_path / "d.sdknds", ds, {"hello": 1})
    back = read_dataset(path)
    assert back.n_seq == 3
    for name in ("train", "val", "test"):
        np.testing.assert_array_equal(back.split(name).inputs, ds.split(name).inputs)
        np.testing.assert_array_equal(back.split(name).targets, ds.split(name).targets)
    assert read_sidecar(path) == {"hello": 1}
    raw = path.read_bytes()
    assert raw[:8] == b"SDKNDS01"
    assert int.from_bytes(raw[12:16], "little") == 3
    write_dataset(tmp_path / "e.sdknds", ds)
    assert (tmp_path / "e.sdknds").read_bytes() == raw


def test_bad_dataset_file(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTADATA" + bytes(40))
    with pytest.raises(ConfigurationError):
        read_dataset(tmp_path / "x")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-5, 5), st.floats(-5, 5))
def test_filter_linearity_property(seed, a, b):
    r = np.random.default_rng(seed)
    u, v = r.normal(size=N), r.normal(size=N)
    for spec in FILTERS:
        lhs = apply_filter(a * u + b * v, spec)
        rhs = a * apply_filter(u, spec) + b * apply_filter(v, spec)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + abs(a) + abs(b)) * 10)
