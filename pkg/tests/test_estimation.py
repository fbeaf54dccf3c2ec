import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slowspec.basis import BasisSet
from slowspec.dynamics import Trajectory
from slowspec.eigensolver import ritz_solve, roothaan_hall_solve
from slowspec.estimation import (
    EstimationError,
    _lagged_sum,
    block_bootstrap,
    bootstrap_rayleigh,
    data_edges,
    estimate_correlation_matrices,
    estimate_H,
    estimate_H_lags,
    estimate_msm_transition_matrix,
    estimate_S,
    estimate_stationary_density,
    load_matrix,
    msm_density_matrix,
    msm_from_counts,
    msm_spectrum,
    rayleigh_coefficient,
    save_matrix,
)

LAMBDA2 = 0.99891318  # grid reference at tau = 0.025


# -- density --------------------------------------------------------------------


def test_single_frame_density():
    d = estimate_stationary_density(Trajectory(np.array([0.3]), 1.0), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(d.masses, [1.0, 0.0])
    assert d(0.1) == 2.0 and d(0.7) == 0.0


def test_uniform_states_give_uniform_masses():
    x = (np.arange(1000) + 0.5) / 1000
    d = estimate_stationary_density(Trajectory(x, 1.0), np.linspace(0, 1, 11))
    np.testing.assert_allclose(d.masses, 0.1)
    np.testing.assert_allclose(d.values, 1.0)


def test_density_clamping():
    traj = Trajectory(np.array([-5.0, 0.5, 5.0]), 1.0)
    d = estimate_stationary_density(traj, [0.0, 1.0, 2.0])
    np.testing.assert_allclose(d.masses, [2 / 3, 1 / 3])
    with pytest.raises(EstimationError):
        estimate_stationary_density(traj, [0.0, 1.0, 2.0], clamp=False)


def test_density_masses_sum_to_one(dw_traj):
    d = estimate_stationary_density(dw_traj, data_edges(dw_traj, 1000))
    assert d.masses.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.sum(d.values * d.widths) == pytest.approx(1.0, abs=1e-12)


def test_density_l1_error(dw, dw_traj):
    edges = np.linspace(-6, 6, 51)
    d = estimate_stationary_density(dw_traj, edges)
    from scipy import integrate

    exact = np.array([integrate.quad(dw.density, a, b)[0] for a, b in zip(edges[:-1], edges[1:])])
    assert np.abs(d.masses - exact).sum() < 0.02


def test_density_csv(tmp_path):
    d = estimate_stationary_density(Trajectory(np.array([0.1, 0.2, 0.9]), 1.0), [0.0, 0.5, 1.0])
    lines = d.to_csv(tmp_path / "mu.csv").read_text().splitlines()
    assert lines[0] == "bin_left,bin_right,mass,density"
    assert len(lines) == 3


def test_data_edges():
    e = data_edges(Trajectory(np.array([1.0, -2.0, 3.0]), 1.0), 5)
    np.testing.assert_allclose(e, np.linspace(-2, 3, 6))
    with pytest.raises(EstimationError):
        data_edges(Trajectory(np.array([1.0, 1.0]), 1.0), 5)


# -- correlation matrices -----------------------------------------------------


@pytest.fixture(scope="module")
def short_traj(dw):
    from slowspec.dynamics import simulate

    return simulate(dw, -2.0, 0.025, 200_000, seed=5)


@pytest.fixture(scope="module")
def short_mu(short_traj):
    return estimate_stationary_density(short_traj, data_edges(short_traj, 200))


def test_lag_zero_H_equals_S(short_traj, short_mu):
    b = BasisSet.gaussian(np.linspace(-4, 4, 9), 1.0)
    S = estimate_S(short_traj, b, short_mu)
    H0 = estimate_H(short_traj, b, short_mu, 0)
    assert H0.tobytes() == S.tobytes()
    np.testing.assert_array_equal(S, S.T)


def test_estimated_H_symmetric_and_deterministic(short_traj, short_mu):
    b = BasisSet.hermite(6)
    H = estimate_H(short_traj, b, short_mu, 3)
    np.testing.assert_array_equal(H, H.T)
    assert estimate_H(short_traj, b, short_mu, 3).tobytes() == H.tobytes()
    raw = estimate_H(short_traj, b, short_mu, 3, symmetrize=False)
    assert not np.array_equal(raw, raw.T)


def test_sqrt_mu_hat_gives_unit_h(short_traj, short_mu):
    """With phi = sqrt(mu_hat) on the histogram bins every frame contributes 1."""
    b = BasisSet.indicator(short_mu.edges, short_mu.masses + 1e-300, density=short_mu)
    # the sum of all half-weighted indicators weighted by sqrt(pi_i) is sqrt(mu_hat)
    coef = np.sqrt(short_mu.masses)
    H = estimate_H(short_traj, b, short_mu, 1)
    S = estimate_S(short_traj, b, short_mu)
    assert coef @ S @ coef == pytest.approx(1.0, abs=1e-12)
    assert coef @ H @ coef == pytest.approx(1.0, abs=1e-12)


def test_acf_at_lag_zero_is_one(short_traj, short_mu):
    f = lambda x: np.sin(x) + 0.3 * x  # noqa: E731
    assert rayleigh_coefficient(short_traj, f, lag=0, normalize=True) == pytest.approx(1.0, abs=1e-12)
    assert rayleigh_coefficient(short_traj, f, lag=5, normalize=True) < 1.0


def test_chunk_invariance(short_traj):
    fn = lambda x: np.vstack([np.cos(x), x, x**2])  # noqa: E731
    ref, n_ref, _ = _lagged_sum(short_traj.states, fn, 7, chunk=1 << 20)
    for chunk in (1000, 4097, 65536):
        tot, n, _ = _lagged_sum(short_traj.states, fn, 7, chunk=chunk)
        assert n == n_ref
        np.testing.assert_allclose(tot, ref, rtol=1e-14, atol=0)


def test_multi_lag_matches_single_lag(short_traj, short_mu):
    b = BasisSet.gaussian(np.linspace(-3, 3, 5), 1.0)
    many = estimate_H_lags(short_traj, b, short_mu, [0, 1, 10])
    for m, H in many.items():
        assert H.tobytes() == estimate_H(short_traj, b, short_mu, m).tobytes()


def test_strided_pairs(short_traj, short_mu):
    b = BasisSet.hermite(3)
    H1 = estimate_H(short_traj, b, short_mu, 4)
    H4 = estimate_H(short_traj, b, short_mu, 4, stride=4)
    assert np.abs(H4 - H1).max() < 0.05
    with pytest.raises(ValueError):
        estimate_H(short_traj, b, short_mu, 4, stride=0)


def test_correlation_bundle(short_traj, short_mu):
    cm = estimate_correlation_matrices(short_traj, BasisSet.hermite(4), short_mu, 2)
    assert cm.frames_used == short_traj.n_frames - 2
    assert cm.skipped == 0


def test_density_holes_are_skipped_or_rejected():
    x = np.array([0.1, 0.2, 0.3, 0.4] * 50 + [0.9])
    traj = Trajectory(x, 1.0)
    mu = estimate_stationary_density(Trajectory(x[:-1], 1.0), [0.0, 0.5, 1.0])
    b = BasisSet.hermite(2)
    estimate_H(traj, b, mu, 1)  # one bad frame out of 200 pairs is tolerated
    bad = Trajectory(np.concatenate([x[:20], np.full(20, 0.9)]), 1.0)
    with pytest.raises(EstimationError, match="density estimate inconsistent"):
        estimate_H(bad, b, mu, 1)


def test_lag_too_long():
    traj = Trajectory(np.zeros(5), 1.0)
    with pytest.raises(EstimationError):
        estimate_H(traj, BasisSet.hermite(2), lambda x: np.ones_like(x), 5)


# -- Markov state models ---------------------------------------------------------


def test_msm_rows_stochastic(short_traj):
    msm = estimate_msm_transition_matrix(short_traj, np.linspace(-6, 6, 21), 1)
    a = msm.active
    np.testing.assert_allclose(msm.T[a].sum(axis=1), 1.0, atol=1e-14)
    np.testing.assert_array_equal(msm.counts, msm.counts.T)
    assert msm.eigenvalues()[0] == pytest.approx(1.0, abs=1e-12)


def test_msm_identity_when_pairs_stay():
    traj = Trajectory(np.array([0.1, 0.2, 0.3, 0.15, 0.05]), 1.0)
    msm = estimate_msm_transition_matrix(traj, [0.0, 0.5, 1.0], 1)
    assert msm.T[0, 0] == 1.0
    assert msm.unvisited == (1,)
    np.testing.assert_array_equal(msm_spectrum(msm), [1.0])


def test_msm_unsymmetrized_spectrum():
    C = np.array([[8.0, 2.0], [1.0, 9.0]])
    msm = msm_from_counts(C)
    T = C / C.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(msm_spectrum(msm), np.sort(np.linalg.eigvals(T).real)[::-1])


@given(st.integers(2, 12), st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_msm_ritz_equivalence_synthetic(n, seed):
    rng = np.random.default_rng(seed)
    C = rng.integers(1, 50, size=(n, n)).astype(float)
    C = C + C.T
    msm = msm_from_counts(C)
    H = msm_density_matrix(msm)
    ev_T = np.sort(np.linalg.eigvals(msm.T).real)[::-1]
    np.testing.assert_allclose(ritz_solve(H).eigenvalues, ev_T, atol=1e-10)


@given(st.lists(st.floats(-3.5, 3.5), min_size=2, max_size=15, unique=True))
@settings(max_examples=25, deadline=None)
def test_msm_ritz_equivalence_partitions(interior):
    traj = _equiv_traj()
    edges = np.concatenate([[-8.0], np.sort(interior), [8.0]])
    if np.any(np.diff(edges) < 1e-6):
        return
    msm = estimate_msm_transition_matrix(traj, edges, 2)
    ev_T = np.sort(np.linalg.eigvals(msm.T[np.ix_(msm.active, msm.active)]).real)[::-1]
    np.testing.assert_allclose(ritz_solve(msm_density_matrix(msm)).eigenvalues, ev_T, atol=1e-10)


_EQUIV = {}


def _equiv_traj():
    if "t" not in _EQUIV:
        from slowspec.dynamics import PotentialSpec, simulate

        _EQUIV["t"] = simulate(PotentialSpec.double_gaussian(), -2.0, 0.025, 50_000, seed=3)
    return _EQUIV["t"]


# -- trajectory spectra with error bars ---------------------------------------------


@pytest.fixture(scope="module")
def hermite_bootstrap(dw, dw_traj):
    b = BasisSet.hermite(20)
    return b, block_bootstrap(dw_traj, b, dw.density, 1, n_boot=50, block_length=40000, seed=0)


def test_hermite_trajectory_spectrum(dw, dw_traj, hermite_bootstrap):
    b, boot = hermite_bootstrap
    H = estimate_H_lags(dw_traj, b, dw.density, [0, 1])
    lam = roothaan_hall_solve(H[1], H[0]).eigenvalues
    assert 0.996 <= lam[0] <= 1.002
    assert abs(lam[1] - LAMBDA2) < 3 * boot.std[1]
    assert boot.block_length >= 40000


def test_hermite_trajectory_with_histogram_density(dw_traj):
    # the histogram density adds a small downward bias of a few 1e-5
    b = BasisSet.hermite(20)
    mu = estimate_stationary_density(dw_traj, data_edges(dw_traj, 1000))
    H = estimate_H_lags(dw_traj, b, mu, [0, 1])
    lam = roothaan_hall_solve(H[1], H[0]).eigenvalues
    assert abs(lam[1] - LAMBDA2) < 1e-4
    S = H[0]
    inner = np.abs(S[:10, :10] - np.eye(10)).max()
    assert inner < 0.05


def test_rayleigh_of_reference_eigenfunction(dw_traj, dw_ref):
    f = lambda x: dw_ref.r(2, x)  # noqa: E731
    r2 = rayleigh_coefficient(dw_traj, f, lag=1, normalize=True)
    boot = bootstrap_rayleigh(dw_traj, f, 1, n_boot=100, block_length=40000)
    assert abs(r2 - LAMBDA2) < 3 * boot.std[0]
    g = lambda x: np.tanh(x) * np.exp(-0.2 * x**2) + 0.1  # noqa: E731
    assert rayleigh_coefficient(dw_traj, g, lag=1, normalize=True) < 1.0


def test_bootstrap_deterministic(short_traj, short_mu):
    b = BasisSet.hermite(4)
    a = block_bootstrap(short_traj, b, short_mu, 1, n_boot=10, seed=4)
    c = block_bootstrap(short_traj, b, short_mu, 1, n_boot=10, seed=4)
    assert a.replicates.tobytes() == c.replicates.tobytes()
    assert a.replicates.shape == (10, 4)


# -- matrix files ------------------------------------------------------------------------


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_matrix_roundtrip(tmp_path, suffix, rng):
    M = rng.normal(size=(4, 3))
    back = load_matrix(save_matrix(tmp_path / f"m{suffix}", M))
    assert back.tobytes() == M.tobytes()
