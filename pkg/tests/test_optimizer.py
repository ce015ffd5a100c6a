import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liouvgap.errors import EstimatorInconsistencyError, SingularSystemError
from liouvgap.exact import dense_liouvillian, full_spectrum, subspace_fidelity
from liouvgap.model import all_configs, build_chain, build_xyz_model, vectorize
from liouvgap.optimizer import (
    BETA_JOINT,
    BETA_OFF,
    BETA_TWO_PHASE,
    RunError,
    RunOptions,
    RunTrace,
    SrSystem,
    TraceRecord,
    assemble,
    gap_estimate,
    run,
    schedules,
    solve_update,
)
from liouvgap.rbm import AncillaryState, RbmParameters, exact_trace, init_parameters, make_trial, refresh_alpha, trial_vector
from liouvgap.sampler import ChainConfig, EstimatorBundle, exact_estimation

EXACT = ChainConfig(n_samples=10, exact=True, seed=0)


def xxz2():
    return build_xyz_model(build_chain(2), 1, 1, 2, 1.0)


def new_trial(seed, n=2, m=12, anc="all-down", scale=0.01):
    return make_trial(init_parameters(n, m, scale, np.random.default_rng(seed)), AncillaryState.parse(anc, n))


def decay_distance(trial, modes):
    f = subspace_fidelity(trial_vector(trial), modes)
    return np.sqrt(max(0.0, 1 - f * f))


def test_schedules():
    assert schedules(0) == (0.1, 1.0)
    eps, reg = schedules(1)
    assert eps == pytest.approx(0.096) and reg == pytest.approx(0.9)
    assert schedules(10**4) == (0.01, 1e-4)
    with pytest.raises(ValueError):
        schedules(-1)


@settings(max_examples=50)
@given(st.integers(0, 10**5))
def test_schedules_bounds(p):
    eps, reg = schedules(p)
    assert 0.01 <= eps <= 0.1 and 1e-4 <= reg <= 1
    assert schedules(p + 1)[0] <= eps


def test_assemble_single_sample():
    o = np.array([0.3 + 1j, -2.0, 0.5j])
    loc = 0.2 - 0.7j
    bundle = EstimatorBundle(loc, o, np.outer(o.conj(), o), o.conj() * loc, np.conj(loc) * o, 1)
    system = assemble(bundle)
    np.testing.assert_allclose(system.s, 0, atol=1e-15)
    np.testing.assert_allclose(system.f, 0, atol=1e-15)
    np.testing.assert_allclose(system.f_imag, 0, atol=1e-15)


def test_assemble_against_direct_covariance():
    trial = new_trial(3, m=4, scale=0.4)
    b = exact_estimation(trial, vectorize(xxz2()), keep_samples=True)
    w, o, loc = b.samples["weights"], b.samples["o"], b.samples["local"]
    do = o - w @ o
    dl = loc - w @ loc
    cov = do.conj().T @ (w[:, None] * do)
    s_ref = 2 * cov.real
    f_ref = 2 * (do.conj().T @ (w * dl)).real
    f_imag_ref = -2 * (do.conj().T @ (w * dl)).imag
    system = assemble(b)
    np.testing.assert_allclose(system.s, system.s.T, atol=1e-12)
    np.testing.assert_allclose(system.s, s_ref, atol=1e-12)
    np.testing.assert_allclose(system.f, f_ref, atol=1e-12)
    np.testing.assert_allclose(system.f_imag, f_imag_ref, atol=1e-12)
    assert np.linalg.eigvalsh(system.s + 1e-4 * np.eye(len(system.f))).min() > 0


def test_assemble_rejects_inconsistent_bundle():
    o = np.array([1.0, 1j])
    oo = np.array([[1.0, 0.5], [0.5, 1.0]], dtype=complex)  # not Hermitian-consistent with mean_o
    oo[0, 1] = 3j
    bundle = EstimatorBundle(0j, o, oo, np.zeros(2, complex), np.zeros(2, complex), 10)
    with pytest.raises(EstimatorInconsistencyError):
        assemble(bundle)


def test_solve_update_examples():
    f = np.array([1.0, 0, 0])
    system = SrSystem(np.zeros((3, 3)), f, np.zeros(3), reg=1.0, eps=0.01)
    np.testing.assert_allclose(solve_update(system), 0.01 * f)
    s = np.random.default_rng(0).normal(size=(3, 3))
    s = s @ s.T
    big = SrSystem(s, np.array([1.0, -2, 3]), np.zeros(3), reg=1e8, eps=0.1)
    np.testing.assert_allclose(solve_update(big), 0.1 / 1e8 * big.f, rtol=1e-6)
    joint = SrSystem(np.eye(2), np.array([1.0, 0]), np.array([0.0, 1]), reg=0.0, eps=1.0, beta=0.5)
    np.testing.assert_allclose(solve_update(joint), [1, 0.5])


def test_solve_update_fallback_and_failure():
    # indefinite matrix: Cholesky fails at every retry, least squares still answers
    system = SrSystem(np.diag([1.0, -10.0]), np.array([1.0, 1.0]), np.zeros(2), reg=1e-4, eps=1.0)
    sol = solve_update(system)
    np.testing.assert_allclose((system.s + 1e-4 * np.eye(2)) @ sol, system.f, rtol=1e-8)
    bad = SrSystem(np.full((2, 2), np.nan), np.ones(2), np.zeros(2))
    with pytest.raises(SingularSystemError):
        solve_update(bad)


def test_single_step_reduces_distance():
    model = xxz2()
    spec = full_spectrum(dense_liouvillian(model))
    modes = spec.first_decay_modes()
    liouv = vectorize(model)
    for seed in range(3):
        trial = new_trial(seed)
        eps, reg = schedules(0)
        delta = solve_update(assemble(exact_estimation(trial, liouv), reg, eps))
        rbm = RbmParameters.unflatten(trial.rbm.flatten() + delta, 2, 12)
        stepped = refresh_alpha(trial.replace(rbm=rbm), exact_trace(rbm))
        assert decay_distance(stepped, modes) < decay_distance(trial, modes)


def test_argmin_consistency():
    model = xxz2()
    modes = full_spectrum(dense_liouvillian(model)).first_decay_modes()
    liouv = vectorize(model)
    trial, _ = run(new_trial(0), liouv, EXACT, RunOptions(max_iters=1500, min_iters=1500))
    assert decay_distance(trial, modes) < 1e-3
    seen = []
    trial, trace = run(trial, liouv, EXACT, RunOptions(max_iters=100, min_iters=100), callback=lambda p, t, b: seen.append(decay_distance(t, modes)))
    seen.append(decay_distance(trial, modes))
    assert max(seen) < 1e-2
    gap, err = gap_estimate(trace)
    assert gap == pytest.approx(0.5, abs=1e-3)


def test_run_trace_and_convergence():
    trial = new_trial(1)
    final, trace = run(trial, vectorize(xxz2()), EXACT, RunOptions(max_iters=400, window=10, tol=1e-4, min_iters=40))
    assert trace.converged
    assert len(trace) < 400
    steps = [r.step for r in trace.records]
    assert steps == list(range(len(trace)))
    re = trace.re_l
    assert abs(re[-10:].mean() - re[-20:-10].mean()) < 1e-4
    # the final trial is traceless to rounding
    mat = trial_vector(final).reshape(4, 4)
    assert abs(np.trace(mat)) < 1e-12 * np.abs(mat).max()


def test_run_reproducible_with_sampling():
    cfg = ChainConfig(n_samples=300, seed=4)
    liouv = vectorize(xxz2())
    _, a = run(new_trial(2, m=4), liouv, cfg, RunOptions(max_iters=5))
    _, b = run(new_trial(2, m=4), liouv, cfg, RunOptions(max_iters=5))
    assert a.to_jsonl() == b.to_jsonl()


def test_persistent_chains_change_the_samples_only():
    cfg = ChainConfig(n_samples=300, seed=4)
    liouv = vectorize(xxz2())
    _, a = run(new_trial(2, m=4), liouv, cfg, RunOptions(max_iters=5, persistent=True))
    _, b = run(new_trial(2, m=4), liouv, cfg, RunOptions(max_iters=5, persistent=True))
    _, c = run(new_trial(2, m=4), liouv, cfg, RunOptions(max_iters=5))
    assert a.to_jsonl() == b.to_jsonl()
    # the first iteration has no previous chain to continue
    assert a.re_l[0] == c.re_l[0]
    assert not np.array_equal(a.re_l, c.re_l)
    # exact summation has no chains and ignores the flag
    _, d = run(new_trial(2, m=4), liouv, EXACT, RunOptions(max_iters=3, persistent=True))
    _, e = run(new_trial(2, m=4), liouv, EXACT, RunOptions(max_iters=3))
    assert d.to_jsonl() == e.to_jsonl()


def test_run_error_keeps_partial_trace():
    # an off-diagonal product ancillary has zero trace, so the alpha refresh fails
    trial = new_trial(0).replace(ancillary=AncillaryState.parse("product:uddd", 2))
    with pytest.raises(RunError) as info:
        run(trial, vectorize(xxz2()), EXACT, RunOptions(max_iters=3))
    assert len(info.value.trace) == 1
    assert info.value.trial is not None


def test_run_options():
    assert RunOptions().effective_beta_mode == BETA_OFF
    assert RunOptions(beta=0.01).effective_beta_mode == BETA_TWO_PHASE
    assert RunOptions(beta=0.01, beta_mode=BETA_JOINT).effective_beta_mode == BETA_JOINT
    with pytest.raises(ValueError):
        RunOptions(beta=-1)
    with pytest.raises(ValueError):
        RunOptions(beta_mode="sideways")


def test_two_phase_switches_on_beta():
    model = build_xyz_model(build_chain(2), 4, 3, 2, 1)
    opts = RunOptions(max_iters=300, window=10, tol=1e-2, min_iters=20, beta=0.01, beta_mode=BETA_TWO_PHASE)
    _, trace = run(new_trial(0), vectorize(model), EXACT, opts)
    assert trace.phase_switch is not None
    betas = [r.beta for r in trace.records]
    assert set(betas[: trace.phase_switch]) == {0.0}
    assert set(betas[trace.phase_switch:]) == {0.01}


def test_trace_jsonl_roundtrip():
    tr = RunTrace()
    for p in range(3):
        tr.append(TraceRecord(p, -0.5 + p, 0.1, 0.3, 0.0, 1e-3, 1.0, 0.0, 2.0, 0.0))
    back = RunTrace.from_jsonl(tr.to_jsonl())
    assert back.records == tr.records
    with pytest.raises(ValueError):
        tr.append(TraceRecord(1, 0, 0, 0, 0, 0, 0, 0, 0, 0))


def test_gap_estimate():
    tr = RunTrace()
    for p in range(30):
        tr.append(TraceRecord(p, -1.0 if p < 10 else -0.5, 0, 0, 0, 0, 0, 0, 0, 0))
    gap, err = gap_estimate(tr, window=20)
    assert gap == 0.5 and err == 0
    b = EstimatorBundle(-0.25 + 1j, np.zeros(1), np.zeros((1, 1)), np.zeros(1), np.zeros(1), 5, l_stderr=0.01)
    assert gap_estimate(b) == (0.25, 0.01)
    with pytest.raises(ValueError):
        gap_estimate(RunTrace())


def test_gap_estimate_steady_state_is_zero():
    # the all-down product state is the steady state; its <L> vanishes
    z = np.zeros(4 + 2 + 8, dtype=complex)
    z[:4] = -40
    from liouvgap.rbm import TrialState

    trial = TrialState(RbmParameters.from_complex(z, 2, 2), AncillaryState.identity())
    assert gap_estimate(exact_estimation(trial, vectorize(xxz2())))[0] == pytest.approx(0, abs=1e-12)
