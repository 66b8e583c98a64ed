"""Degenerate multivariate normal approximation of normalized multinomial counts.

For a mean p on the simplex the covariance Sigma = diag(p) - p p^T is singular. With
S the support of p, s = |S| and H = diag(chi) - chi chi^T / s the centering projector
on S, the closed forms used here are

    |Sigma|_+  = s * prod_{k in S} p_k
    Sigma^+    = H diag(p^+) H

so no dense inversion is ever needed. Densities are with respect to Lebesgue measure
on the (s - 1)-dimensional affine hull of the support face.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ProbVector

SUPPORT_TOL = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SupportedProbVector:
    p: ProbVector
    chi: np.ndarray = field(init=False)
    p_plus: np.ndarray = field(init=False)
    support_size: int = field(init=False)

    def __post_init__(self) -> None:
        values = self.p.values
        chi = (values >= SUPPORT_TOL).astype(float)
        p_plus = np.divide(1.0, values, out=np.zeros_like(values), where=chi > 0)
        chi.setflags(write=False)
        p_plus.setflags(write=False)
        object.__setattr__(self, "chi", chi)
        object.__setattr__(self, "p_plus", p_plus)
        object.__setattr__(self, "support_size", int(chi.sum()))

    @classmethod
    def of(cls, values: Sequence[float] | np.ndarray) -> "SupportedProbVector":
        return cls(p=ProbVector(values=np.asarray(values, dtype=float)))

    @property
    def values(self) -> np.ndarray:
        return self.p.values

    def covariance(self) -> np.ndarray:
        """Dense Sigma; only for diagnostics and small dims."""
        v = self.values
        return np.diag(v) - np.outer(v, v)


@dataclass(frozen=True)
class DegenerateGaussian:
    mean: SupportedProbVector
    n: float = 1.0

    def __post_init__(self) -> None:
        if not float(self.n) > 0:
            raise ValueError(f"invalid_argument:sample_size_not_positive:{self.n}")

    def log_density(self, z: Sequence[float] | np.ndarray) -> float:
        return log_density(self, z)


def pseudo_determinant(p: SupportedProbVector) -> float:
    return float(np.exp(log_pseudo_determinant(p)))


def log_pseudo_determinant(p: SupportedProbVector) -> float:
    on = p.chi > 0
    return float(np.log(p.support_size) + np.log(p.values[on]).sum())


def centering_projector(p: SupportedProbVector) -> np.ndarray:
    return np.diag(p.chi) - np.outer(p.chi, p.chi) / p.support_size


def generalized_inverse(p: SupportedProbVector) -> np.ndarray:
    H = centering_projector(p)
    return (H * p.p_plus[None, :]) @ H


def _centered_on_support(p: SupportedProbVector, r: np.ndarray) -> np.ndarray:
    # H r
    return p.chi * (r - float((p.chi * r).sum()) / p.support_size)


def _check_dims(p: SupportedProbVector, z: np.ndarray) -> None:
    if z.shape != p.values.shape:
        raise ValueError(f"invalid_argument:dimension_mismatch:{z.shape}!={p.values.shape}")


def log_density(g: DegenerateGaussian, z: Sequence[float] | np.ndarray) -> float:
    p = g.mean
    z = np.asarray(z, dtype=float)
    _check_dims(p, z)
    n = float(g.n)
    rank = p.support_size - 1
    log_pdet = rank * (LOG_2PI - np.log(n)) + log_pseudo_determinant(p)
    hr = _centered_on_support(p, z - p.values)
    quad = float((hr * hr * p.p_plus).sum())
    return -0.5 * log_pdet - 0.5 * n * quad


def reference_log_density(p: SupportedProbVector, z: Sequence[float] | np.ndarray) -> float:
    """Observation density under the reference measure: N(0, H) restricted to the support of p."""
    z = np.asarray(z, dtype=float)
    _check_dims(p, z)
    hz = _centered_on_support(p, z)
    return -0.5 * (p.support_size - 1) * LOG_2PI - 0.5 * float((hz * hz).sum())


def g_functions(p: SupportedProbVector, z: Sequence[float] | np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    _check_dims(p, z)
    g2 = p.chi * z
    beta = _centered_on_support(p, g2)
    return 1.0, g2, beta * beta


def log_likelihood_ratio(p: SupportedProbVector, z: Sequence[float] | np.ndarray, n: float) -> float:
    """log f(z | p, n) - log f_Q(z) in closed form; an empty observation (n == 0) carries no information."""
    z = np.asarray(z, dtype=float)
    _check_dims(p, z)
    if n == 0:
        return 0.0
    if n < 0:
        raise ValueError(f"invalid_argument:negative_sample_size:{n}")
    s = p.support_size
    on = p.chi > 0
    g2 = p.chi * z
    sum_g2 = float(g2.sum())
    eta = (float(p.values[on].sum()) - sum_g2) / s
    resid = g2[on] - p.values[on] + eta
    quad = float((resid * resid / p.values[on]).sum())
    ref = float((g2 * g2).sum()) - sum_g2 * sum_g2 / s
    return 0.5 * (s - 1) * np.log(n) - 0.5 * log_pseudo_determinant(p) - 0.5 * n * quad + 0.5 * ref


def likelihood_ratio(p: SupportedProbVector, z: Sequence[float] | np.ndarray, n: float) -> float:
    return float(np.exp(log_likelihood_ratio(p, z, n)))


def _support_parts(means: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    chi = (means >= SUPPORT_TOL).astype(float)
    s = chi.sum(axis=-1)
    p_safe = np.where(chi > 0, means, 1.0)
    return chi, s, p_safe


def log_likelihood_ratio_table(means: np.ndarray, z: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Batched log-likelihood ratios.

    means: (I, Q, D) candidate means; z: (I, D) observations; n: (I,) sample sizes.
    Returns (I, Q). Rows with n == 0 are identically zero.
    """
    chi, s, p_safe = _support_parts(means)
    n = np.asarray(n, dtype=float)
    g2 = chi * z[:, None, :]
    sum_g2 = g2.sum(axis=-1)
    eta = ((chi * means).sum(axis=-1) - sum_g2) / s
    resid = chi * (g2 - means + eta[..., None])
    quad = (resid * resid / p_safe).sum(axis=-1)
    log_pdet = np.log(s) + (chi * np.log(p_safe)).sum(axis=-1)
    ref = (g2 * g2).sum(axis=-1) - sum_g2 * sum_g2 / s
    n_safe = np.where(n > 0, n, 1.0)[:, None]
    out = 0.5 * (s - 1) * np.log(n_safe) - 0.5 * log_pdet - 0.5 * n_safe * quad + 0.5 * ref
    return np.where((n > 0)[:, None], out, 0.0)


def g_table(means: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched g2 and g3 for (I, Q, D) means against (I, D) observations."""
    chi, s, _ = _support_parts(means)
    g2 = chi * z[:, None, :]
    beta = chi * (g2 - (g2.sum(axis=-1) / s)[..., None])
    return g2, beta * beta
