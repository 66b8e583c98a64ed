"""Change-of-measure recursive filters for the E-step.

Every filter is an unnormalized conditional expectation under the reference measure,
kept in row-vector form (``F' = lambda * (F @ Phi)``). Normalized quantities are ratios of
inner products with the ones vector, so each step may rescale all filters of a source by
a common positive constant; the dropped log factors are accumulated in ``log_scale``.

Sources are batched along the leading axis and never mixed.

Two families are available for the per-group quantities:

- ``product``: state posteriors and jump counts are read off the product chain. Exact.
- ``group``: the per-group recursions driven by the omega weights. Exact when J == 1 or
  when the likelihood ratios factorize across groups.

Occupation and weighted-sum filters always run on the product chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .gaussian import g_table, log_likelihood_ratio_table
from .generator import ObservationSet
from .model import (
    ModelParams,
    StateIndexArray,
    TransitionMatrix,
    enumerate_state_index_arrays,
    kron_all,
    mean_table,
    membership_matrix,
    state_index_matrix,
)

FILTER_FAMILIES = ("product", "group")
TRACE_COLUMNS = ["iteration", "t", "i", "j", "state", "posterior"]


class NumericalDegeneracyError(RuntimeError):
    """Filter mass vanished: the model gives zero weight to every state path that explains the data."""


@dataclass(frozen=True)
class ProductChain:
    order: tuple[StateIndexArray, ...]
    Phi: np.ndarray
    state_counts: tuple[int, ...]
    transitions: tuple[np.ndarray, ...] = field(repr=False)
    index: np.ndarray = field(repr=False)
    memberships: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def Q(self) -> int:
        return int(self.Phi.shape[0])


def build_product_chain(transitions: Sequence[TransitionMatrix]) -> ProductChain:
    state_counts = tuple(int(t.A.shape[0]) for t in transitions)
    Phi = kron_all([t.A for t in transitions])
    return ProductChain(
        order=enumerate_state_index_arrays(state_counts),
        Phi=Phi,
        state_counts=state_counts,
        transitions=tuple(t.A for t in transitions),
        index=state_index_matrix(state_counts),
        memberships=tuple(membership_matrix(state_counts, j) for j in range(len(state_counts))),
    )


def omega_weights(lambdas: np.ndarray, chain: ProductChain, j: int) -> np.ndarray:
    """Component m = sum of lambda over joint states whose group-j entry is m."""
    return np.asarray(lambdas, dtype=float) @ chain.memberships[j]


def _require_mass(F: np.ndarray, where: str) -> np.ndarray:
    mass = F.sum(axis=-1)
    if not np.all(np.isfinite(mass)) or np.any(mass <= 0):
        bad = np.flatnonzero(~(np.isfinite(mass) & (mass > 0)))
        raise NumericalDegeneracyError(f"filter_mass_vanished:{where}:rows={bad.tolist()}")
    return mass


def step_state_filter(F_s: np.ndarray, A: np.ndarray, omega: np.ndarray) -> np.ndarray:
    out = omega * (F_s @ A)
    _require_mass(out, "state_filter")
    return out


def step_pi_filter(F_pi: np.ndarray, Phi: np.ndarray, lambda_vec: np.ndarray) -> np.ndarray:
    out = lambda_vec * (F_pi @ Phi)
    _require_mass(out, "pi_filter")
    return out


def step_jump_filter(
    F_J: np.ndarray,
    F_s: np.ndarray,
    A: np.ndarray,
    omega: np.ndarray,
    k: int,
    m: int,
) -> np.ndarray:
    """Per-group jump filter for k -> m transitions; ``F_s`` is the state filter before the step."""
    out = omega * (F_J @ A)
    out[..., m] += omega[..., m] * A[k, m] * F_s[..., k]
    return out


def step_product_jump_filter(
    F_J: np.ndarray,
    F_pi: np.ndarray,
    chain: ProductChain,
    lambda_vec: np.ndarray,
    j: int,
    k: int,
    m: int,
) -> np.ndarray:
    """Jump filter for group-j transitions k -> m carried on the product chain."""
    M = chain.memberships[j]
    out = lambda_vec * (F_J @ chain.Phi)
    out += lambda_vec * M[:, m] * ((F_pi * M[:, k]) @ chain.Phi)
    return out


def step_occupation_filter(
    F_Gamma: np.ndarray,
    F_pi: np.ndarray,
    Phi: np.ndarray,
    lambda_vec: np.ndarray,
    q: int,
) -> np.ndarray:
    out = lambda_vec * (F_Gamma @ Phi)
    out[..., q] += lambda_vec[..., q] * (F_pi @ Phi)[..., q]
    return out


def step_T_filter(
    F_T: np.ndarray,
    F_pi: np.ndarray,
    Phi: np.ndarray,
    lambda_vec: np.ndarray,
    q: int,
    n_t: float | np.ndarray,
    g_val: float | np.ndarray,
) -> np.ndarray:
    """Weighted-sum filter for joint state q.

    ``F_T`` may carry a trailing component axis (..., Q, R); ``g_val`` then carries it too.
    """
    F_T = np.asarray(F_T, dtype=float)
    entering = lambda_vec[..., q] * (F_pi @ Phi)[..., q]
    if F_T.ndim == np.ndim(lambda_vec):
        out = lambda_vec * (F_T @ Phi)
        out[..., q] += n_t * g_val * entering
        return out
    out = lambda_vec[..., None] * np.einsum("...ar,ab->...br", F_T, Phi)
    out[..., q, :] += np.asarray(n_t, dtype=float)[..., None] * g_val * entering[..., None]
    return out


def observation_weights(means: np.ndarray, z: np.ndarray, n: np.ndarray) -> np.ndarray:
    """(I, Q, 2 + 2D) weights of the weighted-sum filters at one time step.

    Components: observed indicator, n, n * g2, n * g3.
    """
    I, Q, D = means.shape
    g2, g3 = g_table(means, z)
    n = np.asarray(n, dtype=float)
    out = np.empty((I, Q, 2 + 2 * D))
    out[..., 0] = (n > 0)[:, None]
    out[..., 1] = n[:, None]
    out[..., 2 : 2 + D] = n[:, None, None] * g2
    out[..., 2 + D :] = n[:, None, None] * g3
    return out


@dataclass
class FilterBank:
    """Batched filters for all sources; arrays carry a leading source axis.

    F_Gamma: (I, Q, Q), entry [i, q] is the occupation filter for joint state q.
    F_T: (I, Q, Q, R), entry [i, q, :, r] is the weighted-sum filter for component r.
    F_J[j]: (I, Q_j, Q_j, Q) on the product chain, or (I, Q_j, Q_j, Q_j) for the group family.
    F_s[j]: (I, Q_j), group family only.
    """

    chain: ProductChain
    family: str
    F_pi: np.ndarray
    F_Gamma: np.ndarray
    F_T: np.ndarray
    F_J: list[np.ndarray]
    F_s: list[np.ndarray]
    log_scale: np.ndarray
    t: int = 1

    @classmethod
    def start(
        cls,
        chain: ProductChain,
        initial: Sequence[np.ndarray],
        log_lambda: np.ndarray,
        weights: np.ndarray,
        *,
        family: str = "product",
    ) -> "FilterBank":
        """Absorb the first observation; ``initial[j]`` is the (I, Q_j) distribution of s_ij(1)."""
        if family not in FILTER_FAMILIES:
            raise ValueError(f"invalid_argument:filter_family:{family}")
        I, Q = log_lambda.shape
        lam, shift = _scaled(log_lambda)
        pi0 = np.stack([kron_all([np.asarray(d[i], dtype=float) for d in initial]) for i in range(I)])
        F_pi = lam * pi0
        diag = np.arange(Q)
        F_Gamma = np.zeros((I, Q, Q))
        F_Gamma[:, diag, diag] = F_pi
        F_T = np.zeros((I, Q, Q, weights.shape[-1]))
        F_T[:, diag, diag, :] = weights * F_pi[..., None]
        F_J: list[np.ndarray] = []
        F_s: list[np.ndarray] = []
        for j, q_j in enumerate(chain.state_counts):
            if family == "product":
                F_J.append(np.zeros((I, q_j, q_j, Q)))
            else:
                F_J.append(np.zeros((I, q_j, q_j, q_j)))
                F_s.append(omega_weights(lam, chain, j) * np.asarray(initial[j], dtype=float))
        bank = cls(
            chain=chain,
            family=family,
            F_pi=F_pi,
            F_Gamma=F_Gamma,
            F_T=F_T,
            F_J=F_J,
            F_s=F_s,
            log_scale=shift,
        )
        bank._rescale()
        return bank

    def step(self, log_lambda: np.ndarray, weights: np.ndarray) -> None:
        chain = self.chain
        Phi = chain.Phi
        lam, shift = _scaled(log_lambda)
        prev_pi = self.F_pi

        F_Gamma = np.empty_like(self.F_Gamma)
        F_T = np.empty_like(self.F_T)
        for q in range(chain.Q):
            F_Gamma[:, q] = step_occupation_filter(self.F_Gamma[:, q], prev_pi, Phi, lam, q)
            # weights already carry n_t
            F_T[:, q] = step_T_filter(self.F_T[:, q], prev_pi, Phi, lam, q, 1.0, weights[:, q])

        for j, A in enumerate(chain.transitions):
            F_J = np.empty_like(self.F_J[j])
            q_j = A.shape[0]
            if self.family == "product":
                for k in range(q_j):
                    for m in range(q_j):
                        F_J[:, k, m] = step_product_jump_filter(self.F_J[j][:, k, m], prev_pi, chain, lam, j, k, m)
            else:
                omega = omega_weights(lam, chain, j)
                prev_s = self.F_s[j]
                for k in range(q_j):
                    for m in range(q_j):
                        F_J[:, k, m] = step_jump_filter(self.F_J[j][:, k, m], prev_s, A, omega, k, m)
                self.F_s[j] = step_state_filter(prev_s, A, omega)
            self.F_J[j] = F_J

        self.F_pi = step_pi_filter(prev_pi, Phi, lam)
        self.F_Gamma = F_Gamma
        self.F_T = F_T
        self.log_scale = self.log_scale + shift
        self.t += 1
        self._rescale()

    def _rescale(self) -> None:
        mass = _require_mass(self.F_pi, f"pi_filter:t={self.t}")
        self.F_pi = self.F_pi / mass[:, None]
        self.F_Gamma = self.F_Gamma / mass[:, None, None]
        self.F_T = self.F_T / mass[:, None, None, None]
        self.log_scale = self.log_scale + np.log(mass)
        if self.family == "product":
            self.F_J = [F / mass[:, None, None, None] for F in self.F_J]
        else:
            for j in range(len(self.F_s)):
                group_mass = _require_mass(self.F_s[j], f"state_filter:group={j}:t={self.t}")
                self.F_s[j] = self.F_s[j] / group_mass[:, None]
                self.F_J[j] = self.F_J[j] / group_mass[:, None, None, None]

    def pi_posterior(self) -> np.ndarray:
        return self.F_pi / self.F_pi.sum(axis=-1, keepdims=True)

    def state_posteriors(self) -> list[np.ndarray]:
        if self.family == "group":
            return [F / F.sum(axis=-1, keepdims=True) for F in self.F_s]
        post = self.pi_posterior()
        return [post @ M for M in self.chain.memberships]


def _scaled(log_lambda: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shift = log_lambda.max(axis=-1)
    return np.exp(log_lambda - shift[:, None]), shift


@dataclass(frozen=True)
class EStepStats:
    """Conditional expectations given all observations, per source.

    jumps[j]: (I, Q_j, Q_j); abar, abar_observed, nbar: (I, Q); zetabar, bbar: (I, Q, D).
    ``abar_observed`` counts only periods with at least one event.
    state_posteriors[j]: (T, I, Q_j) filtered posteriors; pi_posteriors: (T, I, Q).
    """

    jumps: tuple[np.ndarray, ...]
    abar: np.ndarray
    abar_observed: np.ndarray
    nbar: np.ndarray
    zetabar: np.ndarray
    bbar: np.ndarray
    log_likelihood: np.ndarray
    state_posteriors: tuple[np.ndarray, ...] = ()
    pi_posteriors: np.ndarray | None = None
    family: str = "product"


def finalize_estep(
    bank: FilterBank,
    T: int,
    *,
    state_posteriors: Sequence[np.ndarray] = (),
    pi_posteriors: np.ndarray | None = None,
) -> EStepStats:
    if bank.t != T:
        raise ValueError(f"invalid_argument:filters_not_at_horizon:t={bank.t}:T={T}")
    denom = _require_mass(bank.F_pi, "finalize")
    D = (bank.F_T.shape[-1] - 2) // 2
    sums = bank.F_T.sum(axis=2) / denom[:, None, None]
    if bank.family == "product":
        jumps = tuple(F.sum(axis=-1) / denom[:, None, None] for F in bank.F_J)
    else:
        jumps = tuple(
            F.sum(axis=-1) / _require_mass(F_s, f"finalize:group={j}")[:, None, None]
            for j, (F, F_s) in enumerate(zip(bank.F_J, bank.F_s))
        )
    return EStepStats(
        jumps=jumps,
        abar=bank.F_Gamma.sum(axis=-1) / denom[:, None],
        abar_observed=sums[..., 0],
        nbar=sums[..., 1],
        zetabar=sums[..., 2 : 2 + D],
        bbar=sums[..., 2 + D :],
        log_likelihood=bank.log_scale + np.log(denom),
        state_posteriors=tuple(state_posteriors),
        pi_posteriors=pi_posteriors,
        family=bank.family,
    )


def uniform_initial(params: ModelParams) -> tuple[np.ndarray, ...]:
    dims = params.dims
    return tuple(np.full((dims.I, q), 1.0 / q) for q in dims.state_counts)


def run_estep(
    params: ModelParams,
    obs: ObservationSet,
    *,
    family: str = "product",
    initial: Sequence[np.ndarray] | None = None,
) -> EStepStats:
    dims = params.dims
    if (obs.I, obs.K, obs.N) != (dims.I, dims.K, dims.N):
        raise ValueError(
            f"invalid_argument:data_model_dims_mismatch:data={(obs.I, obs.K, obs.N)}:model={(dims.I, dims.K, dims.N)}"
        )
    chain = build_product_chain(params.transitions)
    init = tuple(initial) if initial is not None else uniform_initial(params)
    means = mean_table(params)
    z = obs.z_vectors()
    post_s = [np.zeros((obs.T, dims.I, q)) for q in dims.state_counts]
    post_pi = np.zeros((obs.T, dims.I, dims.Q))
    bank: FilterBank | None = None
    for t in range(obs.T):
        log_lambda = log_likelihood_ratio_table(means, z[t], obs.n[t])
        weights = observation_weights(means, z[t], obs.n[t])
        if bank is None:
            bank = FilterBank.start(chain, init, log_lambda, weights, family=family)
        else:
            bank.step(log_lambda, weights)
        post_pi[t] = bank.pi_posterior()
        for j, post in enumerate(bank.state_posteriors()):
            post_s[j][t] = post
    assert bank is not None
    return finalize_estep(bank, obs.T, state_posteriors=post_s, pi_posteriors=post_pi)


def filter_trace_frame(stats: EStepStats, *, iteration: int) -> pd.DataFrame:
    frames = []
    for j, post in enumerate(stats.state_posteriors):
        T, I, Q_j = post.shape
        tt, ii, ss = np.meshgrid(np.arange(T), np.arange(I), np.arange(Q_j), indexing="ij")
        frames.append(
            pd.DataFrame(
                {
                    "iteration": iteration,
                    "t": tt.ravel(),
                    "i": ii.ravel(),
                    "j": j,
                    "state": ss.ravel(),
                    "posterior": post.ravel(),
                }
            )
        )
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=TRACE_COLUMNS)


def append_filter_trace(path: Path, stats: EStepStats, *, iteration: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    filter_trace_frame(stats, iteration=iteration).to_csv(path, mode="a", header=not path.exists(), index=False)
