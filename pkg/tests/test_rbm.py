import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liouvgap.errors import InvalidAncillaryError
from liouvgap.model import all_configs, is_diagonal
from liouvgap.rbm import (
    CHAIN_RULE,
    LITERAL,
    AncillaryState,
    LookupTable,
    RbmParameters,
    amplitude_ratio,
    exact_trace,
    format_checkpoint,
    init_parameters,
    load_checkpoint,
    log_amplitude,
    log_cosh,
    log_derivatives,
    log_trial_amplitude,
    make_trial,
    parse_checkpoint,
    refresh_alpha,
    save_checkpoint,
    trial_amplitude,
    trial_vector,
)

seeds = st.integers(0, 2**32 - 1)


def direct_amplitude(rbm, x):
    """Product form: exp(visible terms) * prod_k 2 cosh(theta_k) / 2."""
    x = np.asarray(x, dtype=float)
    n = rbm.n_sites
    vis = np.exp(rbm.a @ x[:n] + rbm.b @ x[n:])
    prod = 1.0 + 0j
    for k in range(rbm.n_hidden):
        theta = rbm.c[k] + rbm.w_r[k] @ x[:n] + rbm.w_l[k] @ x[n:]
        prod *= np.cosh(theta)
    return vis * prod


def random_config(rng, n):
    return rng.choice(np.array([-1, 1], dtype=np.int8), 2 * n)


def test_init_parameters():
    rbm = init_parameters(4, 24, 0.01, np.random.default_rng(0))
    assert rbm.n_real == 448
    assert init_parameters(4, 24, 0.01, np.random.default_rng(0)) == rbm
    z = rbm.to_complex()
    assert np.all(np.abs(z.real) <= 0.01) and np.all(np.abs(z.imag) <= 0.01)
    with pytest.raises(ValueError):
        init_parameters(2, 4, 0.0)
    with pytest.raises(ValueError):
        init_parameters(0, 4, 0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), seeds)
def test_flatten_roundtrip(n, m, seed):
    rbm = init_parameters(n, m, 0.5, np.random.default_rng(seed))
    vec = rbm.flatten()
    assert len(vec) == 2 * (2 * n + m + 2 * m * n)
    assert RbmParameters.unflatten(vec, n, m) == rbm
    np.testing.assert_array_equal(RbmParameters.unflatten(vec, n, m).flatten(), vec)
    with pytest.raises(ValueError):
        RbmParameters.unflatten(vec[:-2], n, m)


@settings(max_examples=50, deadline=None)
@given(st.complex_numbers(max_magnitude=30, allow_nan=False, allow_infinity=False))
def test_log_cosh_matches_numpy(z):
    ref = np.cosh(z)
    if ref == 0:
        return
    np.testing.assert_allclose(np.exp(log_cosh(z)), ref, rtol=1e-9, atol=1e-12)


def test_log_cosh_no_overflow():
    big = np.array([1000 + 0.3j, -1000 - 2j])
    vals = log_cosh(big)
    assert np.all(np.isfinite(vals))
    np.testing.assert_allclose(vals.real, 1000 - np.log(2))


def test_log_amplitude_examples():
    rbm = RbmParameters.from_complex(np.zeros(2 * 2 + 3 + 12), 2, 3)
    for x in all_configs(4):
        assert log_amplitude(rbm, x) == 0
    z = np.zeros(2 * 2 + 3 + 12, dtype=complex)
    z[0] = 1
    rbm = RbmParameters.from_complex(z, 2, 3)
    assert log_amplitude(rbm, [1, -1, 1, 1]) == pytest.approx(1)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_log_amplitude_matches_product_form(seed):
    rng = np.random.default_rng(seed)
    rbm = init_parameters(2, 4, 0.8, rng)
    configs = all_configs(4)
    batch = log_amplitude(rbm, configs)
    for x, lv in zip(configs, batch):
        np.testing.assert_allclose(np.exp(lv), direct_amplitude(rbm, x), rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seeds, st.lists(st.integers(0, 5), min_size=0, max_size=4))
def test_amplitude_ratio(seed, flips):
    rng = np.random.default_rng(seed)
    rbm = init_parameters(3, 5, 0.7, rng)
    x = random_config(rng, 3)
    table = LookupTable(rbm, x)
    y = x.copy()
    for s in flips:
        y[s] *= -1
    ref = np.exp(log_amplitude(rbm, y) - log_amplitude(rbm, x))
    np.testing.assert_allclose(amplitude_ratio(rbm, table, x, flips), ref, rtol=1e-10)


def test_amplitude_ratio_trivial():
    rbm = init_parameters(2, 3, 0.5, np.random.default_rng(1))
    x = np.array([1, -1, 1, -1], dtype=np.int8)
    table = LookupTable(rbm, x)
    assert amplitude_ratio(rbm, table, x, []) == 1
    assert amplitude_ratio(rbm, table, x, [2, 2]) == pytest.approx(1, abs=1e-14)


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_lookup_table_after_many_flips(seed):
    rng = np.random.default_rng(seed)
    rbm = init_parameters(4, 12, 0.5, rng)
    table = LookupTable(rbm, random_config(rng, 4))
    for _ in range(500):
        k = rng.integers(1, 5)
        sites = rng.choice(8, k, replace=False)
        table.accept(*table.proposal(sites, distinct=True))
    assert table.check(1e-10)
    assert table.log_amp == pytest.approx(complex(log_amplitude(rbm, table.x)), abs=1e-9)


def test_ancillary_states():
    ident = AncillaryState.identity()
    assert ident.trace(3) == 8
    assert ident.describe() == "identity"
    configs = all_configs(4)
    np.testing.assert_array_equal(ident.amplitude(configs, 2), is_diagonal(configs, 2))
    down = AncillaryState.parse("all-down", 2)
    assert down.trace(2) == 1
    assert down.amplitude(configs, 2).sum() == 1
    assert down.amplitude([-1, -1, -1, -1], 2) == 1
    off = AncillaryState.parse("product:uddd", 2)
    assert off.trace(2) == 0
    assert AncillaryState.parse(off.describe(), 2).describe() == "product:uddd"
    with pytest.raises(InvalidAncillaryError):
        AncillaryState.parse("bogus", 2)
    trial = make_trial(init_parameters(2, 4, 0.1, np.random.default_rng(0)), AncillaryState.identity())
    with pytest.raises(InvalidAncillaryError):
        refresh_alpha(trial.replace(ancillary=off), 1.0)


def test_refresh_alpha():
    rbm = init_parameters(2, 4, 0.1, np.random.default_rng(0))
    trial = make_trial(rbm, AncillaryState.identity())
    assert refresh_alpha(trial, 0).alpha == 0
    assert refresh_alpha(trial, 4 + 0j).alpha == pytest.approx(-1)
    assert refresh_alpha(trial.replace(ancillary=AncillaryState.parse("all-down", 2)), 2 - 1j).alpha == pytest.approx(-2 + 1j)


@pytest.mark.parametrize("anc", ["identity", "all-down"])
@settings(max_examples=10, deadline=None)
@given(seed=seeds)
def test_trace_zero_after_refresh(anc, seed):
    rbm = init_parameters(2, 4, 0.5, np.random.default_rng(seed))
    trial = make_trial(rbm, AncillaryState.parse(anc, 2))
    vec = trial_vector(trial).reshape(4, 4)
    assert abs(np.trace(vec)) < 1e-12 * max(1.0, np.abs(vec).max())
    assert trial.trace_estimate == pytest.approx(exact_trace(rbm))


def test_trial_amplitude_away_from_ancillary():
    rbm = init_parameters(2, 4, 0.5, np.random.default_rng(3))
    for anc, x in [("all-down", [1, -1, -1, -1]), ("identity", [1, -1, -1, -1])]:
        trial = make_trial(rbm, AncillaryState.parse(anc, 2))
        assert trial_amplitude(trial, x) == pytest.approx(np.exp(log_amplitude(rbm, x)))
    trial = make_trial(rbm, AncillaryState.identity())
    x = np.array([1, -1, 1, -1])
    assert trial_amplitude(trial, x) == pytest.approx(np.exp(log_amplitude(rbm, x)) + trial.alpha)
    np.testing.assert_allclose(np.exp(log_trial_amplitude(trial, x)), trial_amplitude(trial, x), rtol=1e-10)


def test_log_derivative_closed_forms():
    rbm = init_parameters(2, 3, 0.4, np.random.default_rng(5))
    trial = refresh_alpha(make_trial(rbm, AncillaryState.identity()), 0)
    x = np.array([1, -1, -1, 1])
    o = log_derivatives(trial, x)
    k = rbm.n_complex
    np.testing.assert_array_equal(o[:2], x[:2])  # Re(a_j) -> sigma_{j,R}
    np.testing.assert_allclose(o[k:k + 2], 1j * x[:2])
    zero = RbmParameters.from_complex(np.zeros(k), 2, 3)
    o0 = log_derivatives(refresh_alpha(make_trial(zero, AncillaryState.identity()), 0), x)
    np.testing.assert_array_equal(o0[4:7], 0)  # Re(c_k) -> tanh(0)


def finite_difference(trial, x, h=1e-6):
    vec = trial.rbm.flatten()
    n, m = trial.n_sites, trial.rbm.n_hidden
    out = np.zeros(len(vec), dtype=complex)
    for i in range(len(vec)):
        step = np.zeros_like(vec)
        step[i] = h
        up = trial.replace(rbm=RbmParameters.unflatten(vec + step, n, m))
        dn = trial.replace(rbm=RbmParameters.unflatten(vec - step, n, m))
        out[i] = (np.log(trial_amplitude(up, x)) - np.log(trial_amplitude(dn, x))) / (2 * h)
    return out


@pytest.mark.parametrize("anc", ["identity", "all-down"])
@settings(max_examples=5, deadline=None)
@given(seed=seeds)
def test_log_derivatives_finite_differences(anc, seed):
    rng = np.random.default_rng(seed)
    rbm = init_parameters(2, 4, 0.5, rng)
    trial = make_trial(rbm, AncillaryState.parse(anc, 2), CHAIN_RULE)
    for x in (np.array([-1, -1, -1, -1]), random_config(rng, 2)):
        fd = finite_difference(trial, x)
        o = log_derivatives(trial, x)
        np.testing.assert_allclose(o, fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())


def test_literal_variant_skips_ratio():
    rbm = init_parameters(2, 4, 0.5, np.random.default_rng(2))
    chain = make_trial(rbm, AncillaryState.identity(), CHAIN_RULE)
    literal = chain.replace(o_variant=LITERAL)
    x = np.array([1, -1, 1, -1])  # diagonal, so alpha contributes
    ratio = np.exp(log_amplitude(rbm, x)) / trial_amplitude(chain, x)
    np.testing.assert_allclose(log_derivatives(chain, x), log_derivatives(literal, x) * ratio, rtol=1e-12)
    off = np.array([1, 1, 1, -1])
    np.testing.assert_allclose(log_derivatives(chain, off), log_derivatives(literal, off), rtol=1e-12)
    with pytest.raises(ValueError):
        make_trial(rbm, AncillaryState.identity(), "other")


def test_batched_log_derivatives_match_single():
    rbm = init_parameters(2, 3, 0.5, np.random.default_rng(9))
    trial = make_trial(rbm, AncillaryState.parse("all-down", 2))
    configs = all_configs(4)
    batch = log_derivatives(trial, configs)
    for x, row in zip(configs, batch):
        np.testing.assert_allclose(row, log_derivatives(trial, x), rtol=1e-12)


@pytest.mark.parametrize("anc,variant", list(itertools.product(["identity", "all-down", "product:udud"], [CHAIN_RULE, LITERAL])))
def test_checkpoint_roundtrip(tmp_path, anc, variant):
    rbm = init_parameters(2, 5, 0.3, np.random.default_rng(11))
    trial = make_trial(rbm, AncillaryState.parse(anc, 2), variant)
    if anc.startswith("product"):
        trial = trial.replace(log_alpha=None, trace_estimate=0j)
    path = tmp_path / "ck.txt"
    save_checkpoint(path, trial, 17)
    back, it = load_checkpoint(path)
    assert it == 17
    assert back.rbm == trial.rbm
    assert back.ancillary.describe() == trial.ancillary.describe()
    assert back.o_variant == variant
    assert back.trace_estimate == trial.trace_estimate
    assert back.alpha == trial.alpha
    assert format_checkpoint(back, 17) == format_checkpoint(trial, 17)


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        parse_checkpoint("hello\n1.0\n")
    text = format_checkpoint(make_trial(init_parameters(1, 1, 0.1, np.random.default_rng(0)), AncillaryState.identity()), 0)
    with pytest.raises(ValueError):
        parse_checkpoint(text + "1.0\n")
