from __future__ import annotations

import itertools

import numpy as np
import pandas as pd
import pytest
from scipy.special import logsumexp

from support.dyngroup.gaussian import g_table, log_likelihood_ratio_table
from support.dyngroup.generator import GenConfig, ObservationSet, sample_dataset
from support.dyngroup.filters import (
    FilterBank,
    NumericalDegeneracyError,
    append_filter_trace,
    build_product_chain,
    finalize_estep,
    observation_weights,
    omega_weights,
    run_estep,
    step_jump_filter,
    step_occupation_filter,
    step_pi_filter,
    step_state_filter,
    step_T_filter,
    uniform_initial,
)
from support.dyngroup.model import kron_all, mean_table, random_params


def _with_missing_slice(obs: ObservationSet, t: int, i: int) -> ObservationSet:
    counts = obs.counts.copy()
    Z = obs.Z.copy()
    n = obs.n.copy()
    counts[t, i] = 0
    Z[t, i] = 0.0
    n[t, i] = 0
    return ObservationSet(Z=Z, counts=counts, n=n)


@pytest.fixture
def brute_case():
    params = random_params(K=2, N=2, I=2, state_counts=(2, 2), rng=np.random.default_rng(21))
    obs, _ = sample_dataset(GenConfig(params=params, T=5, fixed_n=15, seed=8))
    return params, _with_missing_slice(obs, 2, 1)


def _brute_force(params, obs, i: int) -> dict:
    """Exhaustive expectations over every joint path of source i."""
    chain = build_product_chain(params.transitions)
    means = mean_table(params)
    z = obs.z_vectors()
    T, Q, D = obs.T, chain.Q, obs.D
    log_lam = np.stack([log_likelihood_ratio_table(means, z[t], obs.n[t])[i] for t in range(T)])
    g2 = np.stack([g_table(means, z[t])[0][i] for t in range(T)])
    g3 = np.stack([g_table(means, z[t])[1][i] for t in range(T)])
    pi0 = kron_all([np.full(q, 1.0 / q) for q in params.dims.state_counts])

    paths = list(itertools.product(range(Q), repeat=T))
    logw = np.array(
        [
            np.log(pi0[p[0]]) + sum(np.log(chain.Phi[p[t - 1], p[t]]) for t in range(1, T)) + sum(log_lam[t, p[t]] for t in range(T))
            for p in paths
        ]
    )
    total = logsumexp(logw)
    w = np.exp(logw - total)

    out = {
        "loglik": total,
        "abar": np.zeros(Q),
        "abar_observed": np.zeros(Q),
        "nbar": np.zeros(Q),
        "zetabar": np.zeros((Q, D)),
        "bbar": np.zeros((Q, D)),
        "final": np.zeros(Q),
        "jumps": [np.zeros((q, q)) for q in params.dims.state_counts],
    }
    for weight, p in zip(w, paths):
        out["final"][p[-1]] += weight
        for t, q in enumerate(p):
            n_t = float(obs.n[t, i])
            out["abar"][q] += weight
            out["abar_observed"][q] += weight * (n_t > 0)
            out["nbar"][q] += weight * n_t
            out["zetabar"][q] += weight * n_t * g2[t, q]
            out["bbar"][q] += weight * n_t * g3[t, q]
            if t > 0:
                for j in range(params.dims.J):
                    out["jumps"][j][chain.index[p[t - 1], j], chain.index[q, j]] += weight
    return out


def test_product_filters_match_exhaustive_path_sums(brute_case) -> None:
    params, obs = brute_case
    stats = run_estep(params, obs, family="product")
    for i in range(obs.I):
        brute = _brute_force(params, obs, i)
        assert stats.log_likelihood[i] == pytest.approx(brute["loglik"], rel=1e-9, abs=1e-9)
        assert np.allclose(stats.abar[i], brute["abar"], atol=1e-9)
        assert np.allclose(stats.abar_observed[i], brute["abar_observed"], atol=1e-9)
        assert np.allclose(stats.nbar[i], brute["nbar"], atol=1e-8)
        assert np.allclose(stats.zetabar[i], brute["zetabar"], atol=1e-8)
        assert np.allclose(stats.bbar[i], brute["bbar"], atol=1e-8)
        assert np.allclose(stats.pi_posteriors[-1, i], brute["final"], atol=1e-9)
        for j in range(params.dims.J):
            assert np.allclose(stats.jumps[j][i], brute["jumps"][j], atol=1e-9)


def test_expected_counts_are_consistent(brute_case) -> None:
    params, obs = brute_case
    stats = run_estep(params, obs)
    assert np.allclose(stats.abar.sum(axis=1), obs.T)
    assert np.allclose(stats.abar_observed.sum(axis=1), obs.observed.sum(axis=0))
    assert np.allclose(stats.nbar.sum(axis=1), obs.n.sum(axis=0))
    for j in range(params.dims.J):
        assert np.allclose(stats.jumps[j].sum(axis=(1, 2)), obs.T - 1)
    for post in stats.state_posteriors:
        assert np.allclose(post.sum(axis=-1), 1.0)


def test_group_family_is_exact_for_a_single_group() -> None:
    params = random_params(K=3, N=2, I=2, state_counts=(3,), rng=np.random.default_rng(5))
    obs, _ = sample_dataset(GenConfig(params=params, T=6, poisson_rate=20.0, seed=2))
    product = run_estep(params, obs, family="product")
    group = run_estep(params, obs, family="group")
    assert np.allclose(product.jumps[0], group.jumps[0], atol=1e-9)
    assert np.allclose(product.state_posteriors[0], group.state_posteriors[0], atol=1e-9)
    assert np.allclose(product.log_likelihood, group.log_likelihood)


def test_group_family_yields_proper_distributions_for_several_groups(small_params, small_dataset) -> None:
    obs, _ = small_dataset
    stats = run_estep(small_params, obs, family="group")
    assert stats.family == "group"
    for j, post in enumerate(stats.state_posteriors):
        assert np.allclose(post.sum(axis=-1), 1.0)
        assert np.allclose(stats.jumps[j].sum(axis=(1, 2)), obs.T - 1)


def test_unknown_filter_family_is_rejected(small_params, small_dataset) -> None:
    obs, _ = small_dataset
    with pytest.raises(ValueError, match="filter_family"):
        run_estep(small_params, obs, family="smoother")


def test_run_estep_rejects_dimension_mismatch(small_params) -> None:
    obs = ObservationSet(Z=np.zeros((2, 2, 4, 3)), counts=np.zeros((2, 2, 4, 3)), n=np.zeros((2, 2)))
    with pytest.raises(ValueError, match="data_model_dims_mismatch"):
        run_estep(small_params, obs)


def test_finalize_requires_filters_at_the_horizon(small_params, small_dataset) -> None:
    obs, _ = small_dataset
    chain = build_product_chain(small_params.transitions)
    means = mean_table(small_params)
    z = obs.z_vectors()
    bank = FilterBank.start(
        chain,
        uniform_initial(small_params),
        log_likelihood_ratio_table(means, z[0], obs.n[0]),
        observation_weights(means, z[0], obs.n[0]),
    )
    with pytest.raises(ValueError, match="filters_not_at_horizon"):
        finalize_estep(bank, obs.T)


def test_single_step_state_and_jump_filters() -> None:
    A = np.array([[0.9, 0.1], [0.3, 0.7]])
    F_s = np.array([[0.6, 0.4]])
    omega = np.array([[2.0, 1.0]])
    out = step_state_filter(F_s, A, omega)
    assert np.allclose(out, [[2.0 * (0.54 + 0.12), 1.0 * (0.06 + 0.28)]])

    F_J = np.zeros((1, 2))
    jump = step_jump_filter(F_J, F_s, A, omega, k=0, m=1)
    assert np.allclose(jump, [[0.0, 1.0 * 0.1 * 0.6]])


def test_single_step_product_filters() -> None:
    Phi = np.array([[0.5, 0.5], [0.25, 0.75]])
    F_pi = np.array([[1.0, 0.0]])
    lam = np.array([[2.0, 4.0]])
    assert np.allclose(step_pi_filter(F_pi, Phi, lam), [[1.0, 2.0]])
    gamma = step_occupation_filter(np.zeros((1, 2)), F_pi, Phi, lam, q=1)
    assert np.allclose(gamma, [[0.0, 2.0]])
    tf = step_T_filter(np.zeros((1, 2)), F_pi, Phi, lam, q=1, n_t=10.0, g_val=0.5)
    assert np.allclose(tf, [[0.0, 10.0]])


def test_zero_likelihood_everywhere_is_a_numerical_degeneracy() -> None:
    Phi = np.eye(2)
    with pytest.raises(NumericalDegeneracyError, match="filter_mass_vanished"):
        step_pi_filter(np.array([[0.5, 0.5]]), Phi, np.zeros((1, 2)))


def test_omega_weights_sum_over_group_members() -> None:
    chain = build_product_chain(
        random_params(K=2, N=2, I=1, state_counts=(2, 3), rng=np.random.default_rng(0)).transitions
    )
    lam = np.arange(1.0, 7.0)[None, :]
    assert np.allclose(omega_weights(lam, chain, 0), [[6.0, 15.0]])
    assert np.allclose(omega_weights(lam, chain, 1), [[5.0, 7.0, 9.0]])


def test_filter_trace_appends_rows_with_a_single_header(tmp_path, small_params, small_dataset) -> None:
    obs, _ = small_dataset
    stats = run_estep(small_params, obs)
    path = tmp_path / "filter_trace.csv"
    append_filter_trace(path, stats, iteration=0)
    append_filter_trace(path, stats, iteration=1)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["iteration", "t", "i", "j", "state", "posterior"]
    assert sorted(frame["iteration"].unique().tolist()) == [0, 1]
    per_iteration = obs.T * obs.I * sum(small_params.dims.state_counts)
    assert len(frame) == 2 * per_iteration


def test_product_chain_for_two_groups_is_the_kronecker_product() -> None:
    A1 = np.array([[0.9, 0.1], [0.2, 0.8]])
    A2 = np.array([[0.5, 0.5], [0.3, 0.7]])
    params = random_params(K=2, N=2, I=1, state_counts=(2, 2), rng=np.random.default_rng(0), transitions=(A1, A2))
    chain = build_product_chain(params.transitions)
    # joint order (0,0) (0,1) (1,0) (1,1)
    assert np.allclose(chain.Phi[0], [0.45, 0.45, 0.05, 0.05])
    assert np.allclose(chain.Phi[3], [0.06, 0.14, 0.24, 0.56])
    assert np.allclose(chain.Phi.sum(axis=1), 1.0)

    identity = build_product_chain(
        random_params(K=2, N=2, I=1, state_counts=(2, 2), rng=np.random.default_rng(0), transitions=(np.eye(2), np.eye(2))).transitions
    )
    assert np.array_equal(identity.Phi, np.eye(4))


def test_product_chain_marginals_recover_each_group(rng) -> None:
    params = random_params(K=2, N=2, I=1, state_counts=(2, 3, 2), rng=rng)
    chain = build_product_chain(params.transitions)
    assert np.allclose(chain.Phi.sum(axis=1), 1.0)
    for j, transition in enumerate(params.transitions):
        assert np.allclose(chain.Phi @ chain.memberships[j], transition.A[chain.index[:, j]])
    single = build_product_chain(params.transitions[:1])
    assert np.allclose(single.Phi, params.transitions[0].A)


def test_pi_filter_for_one_group_coincides_with_the_state_filter() -> None:
    A = np.array([[0.7, 0.3], [0.4, 0.6]])
    F = np.array([[0.2, 0.8], [0.5, 0.5]])
    lam = np.array([[1.5, 0.5], [2.0, 3.0]])
    assert np.allclose(step_pi_filter(F, A, lam), step_state_filter(F, A, lam))


def _estep_with_offsets(params, obs, offsets: np.ndarray, family: str):
    chain = build_product_chain(params.transitions)
    means = mean_table(params)
    z = obs.z_vectors()
    bank = None
    for t in range(obs.T):
        log_lambda = log_likelihood_ratio_table(means, z[t], obs.n[t]) + offsets[t][:, None]
        weights = observation_weights(means, z[t], obs.n[t])
        if bank is None:
            bank = FilterBank.start(chain, uniform_initial(params), log_lambda, weights, family=family)
        else:
            bank.step(log_lambda, weights)
    return finalize_estep(bank, obs.T)


@pytest.mark.parametrize("family", ["product", "group"])
def test_filters_are_invariant_to_rescaling_the_likelihood_ratios(family, rng, small_params, small_dataset) -> None:
    obs, _ = small_dataset
    offsets = rng.uniform(-30.0, 30.0, size=(obs.T, obs.I))
    base = _estep_with_offsets(small_params, obs, np.zeros((obs.T, obs.I)), family)
    scaled = _estep_with_offsets(small_params, obs, offsets, family)
    for name in ("abar", "abar_observed", "nbar", "zetabar", "bbar"):
        assert np.allclose(getattr(scaled, name), getattr(base, name), rtol=1e-10, atol=1e-10), name
    for a, b in zip(scaled.jumps, base.jumps):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-10)
    assert np.allclose(scaled.log_likelihood - base.log_likelihood, offsets.sum(axis=0), rtol=1e-10)


def test_group_posteriors_are_marginals_of_the_joint_posterior(brute_case) -> None:
    params, obs = brute_case
    stats = run_estep(params, obs, family="product")
    chain = build_product_chain(params.transitions)
    for i in range(obs.I):
        final = _brute_force(params, obs, i)["final"]
        for j in range(params.dims.J):
            assert np.allclose(stats.state_posteriors[j][-1, i], final @ chain.memberships[j], atol=1e-9)
            assert np.allclose(stats.state_posteriors[j][:, i], stats.pi_posteriors[:, i] @ chain.memberships[j])
