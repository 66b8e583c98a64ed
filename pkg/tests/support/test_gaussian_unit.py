from __future__ import annotations

import numpy as np
import pytest

from support.dyngroup.gaussian import (
    DegenerateGaussian,
    SupportedProbVector,
    centering_projector,
    g_functions,
    g_table,
    generalized_inverse,
    likelihood_ratio,
    log_likelihood_ratio,
    log_likelihood_ratio_table,
    log_pseudo_determinant,
    pseudo_determinant,
    reference_log_density,
)


def _eigen_pdet(M: np.ndarray) -> float:
    w = np.linalg.eigvalsh(M)
    return float(np.prod(w[w > 1e-10]))


def _eigen_pinv(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(M)
    keep = w > 1e-10
    return (V[:, keep] / w[keep]) @ V[:, keep].T


def _face_point(rng, p: SupportedProbVector) -> np.ndarray:
    z = np.zeros_like(p.values)
    on = np.flatnonzero(p.chi)
    z[on] = rng.dirichlet(np.ones(on.size))
    return z


@pytest.mark.parametrize(
    "values",
    [
        [0.2, 0.3, 0.5],
        [0.1, 0.0, 0.4, 0.5],
        [0.25, 0.25, 0.25, 0.25, 0.0, 0.0],
    ],
)
def test_generalized_inverse_matches_eigen_pseudo_inverse(values) -> None:
    p = SupportedProbVector.of(values)
    assert np.allclose(generalized_inverse(p), _eigen_pinv(p.covariance()), atol=1e-9)


@pytest.mark.parametrize("values", [[0.2, 0.3, 0.5], [0.6, 0.0, 0.4], [0.1, 0.2, 0.3, 0.4, 0.0]])
def test_pseudo_determinant_matches_eigenvalue_product(values) -> None:
    p = SupportedProbVector.of(values)
    assert pseudo_determinant(p) == pytest.approx(_eigen_pdet(p.covariance()), rel=1e-8)
    on = [v for v in values if v > 0]
    assert log_pseudo_determinant(p) == pytest.approx(np.log(len(on) * np.prod(on)))


def test_support_bookkeeping() -> None:
    p = SupportedProbVector.of([0.5, 0.0, 0.5])
    assert p.support_size == 2
    assert np.array_equal(p.chi, [1.0, 0.0, 1.0])
    assert np.allclose(p.p_plus, [2.0, 0.0, 2.0])
    H = centering_projector(p)
    assert np.allclose(H @ H, H)
    assert np.allclose(H @ p.chi, 0.0)


def test_log_density_matches_dense_restricted_normal(rng) -> None:
    p = SupportedProbVector.of([0.1, 0.0, 0.4, 0.5])
    n = 40.0
    z = _face_point(rng, p)
    cov = p.covariance() / n
    rank = p.support_size - 1
    r = z - p.values
    expected = -0.5 * rank * np.log(2 * np.pi) - 0.5 * np.log(_eigen_pdet(cov)) - 0.5 * r @ _eigen_pinv(cov) @ r
    assert DegenerateGaussian(mean=p, n=n).log_density(z) == pytest.approx(expected, rel=1e-9)


def test_log_likelihood_ratio_equals_density_over_reference_on_the_face(rng) -> None:
    p = SupportedProbVector.of([0.2, 0.3, 0.0, 0.5])
    z = _face_point(rng, p)
    n = 25.0
    direct = DegenerateGaussian(mean=p, n=n).log_density(z) - reference_log_density(p, z)
    assert log_likelihood_ratio(p, z, n) == pytest.approx(direct, rel=1e-9, abs=1e-9)
    assert likelihood_ratio(p, z, n) == pytest.approx(np.exp(direct), rel=1e-8)


def test_log_likelihood_ratio_is_zero_for_an_empty_observation() -> None:
    p = SupportedProbVector.of([0.2, 0.8])
    assert log_likelihood_ratio(p, np.zeros(2), 0) == 0.0
    with pytest.raises(ValueError, match="negative_sample_size"):
        log_likelihood_ratio(p, np.zeros(2), -1)


def test_dimension_mismatch_is_rejected() -> None:
    p = SupportedProbVector.of([0.2, 0.8])
    with pytest.raises(ValueError, match="dimension_mismatch"):
        log_likelihood_ratio(p, np.zeros(3), 5)


def test_sample_size_must_be_positive() -> None:
    with pytest.raises(ValueError, match="sample_size_not_positive"):
        DegenerateGaussian(mean=SupportedProbVector.of([1.0]), n=0.0)


def test_batched_tables_match_scalar_functions(rng) -> None:
    I, Q, D = 2, 3, 4
    means = rng.dirichlet(np.ones(D), size=(I, Q))
    means[0, 1] = [0.0, 0.5, 0.5, 0.0]
    z = rng.dirichlet(np.ones(D), size=I)
    n = np.array([30.0, 0.0])
    table = log_likelihood_ratio_table(means, z, n)
    g2, g3 = g_table(means, z)
    assert table.shape == (I, Q)
    for i in range(I):
        for q in range(Q):
            p = SupportedProbVector.of(means[i, q])
            assert table[i, q] == pytest.approx(log_likelihood_ratio(p, z[i], n[i]), rel=1e-10, abs=1e-10)
            g1_s, g2_s, g3_s = g_functions(p, z[i])
            assert g1_s == 1.0
            assert np.allclose(g2[i, q], g2_s)
            assert np.allclose(g3[i, q], g3_s)
    assert np.all(table[1] == 0.0)


def test_g_functions_mask_off_support_entries() -> None:
    p = SupportedProbVector.of([0.5, 0.0, 0.5])
    _, g2, g3 = g_functions(p, np.array([0.2, 0.3, 0.5]))
    assert np.allclose(g2, [0.2, 0.0, 0.5])
    # centered on the support: mean of (0.2, 0.5) is 0.35
    assert np.allclose(g3, [0.15**2, 0.0, 0.15**2])
