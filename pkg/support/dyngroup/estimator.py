"""Generalized EM: closed-form transition update plus block-wise projected-gradient sweeps on X, Y, C."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from .filters import FILTER_FAMILIES, EStepStats, NumericalDegeneracyError, append_filter_trace, run_estep
from .gaussian import SUPPORT_TOL, SupportedProbVector
from .generator import ObservationSet
from .model import (
    DynamicTensor,
    ModelParams,
    StateIndexArray,
    TransitionMatrix,
    mean_table,
    project_columns,
    project_rows,
    state_index_matrix,
)
from .utils import debug, progress, read_json, reject_unknown_keys, write_json

UPDATE_RULES = ("multiplicative", "additive")
ARMIJO_FRACTION = 1e-4


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 200
    alpha_x: float = 1e-2
    alpha_y: float = 1e-2
    alpha_c: float = 1e-2
    tol: float = 1e-6
    patience: int = 3
    floor: float = 1e-9
    seed: int = 0
    update: str = "multiplicative"
    max_backtracks: int = 40
    inner_steps: int = 5
    monotone_guard: bool = False
    min_step_scale: float = 1e-6
    symmetric: bool = False
    filter_family: str = "product"

    def __post_init__(self) -> None:
        if int(self.max_iters) < 0:
            raise ValueError(f"invalid_argument:max_iters_negative:{self.max_iters}")
        for name in ("alpha_x", "alpha_y", "alpha_c"):
            if not float(getattr(self, name)) > 0:
                raise ValueError(f"invalid_argument:{name}_not_positive")
        if not 0.0 <= float(self.floor) <= 1e-6:
            raise ValueError(f"invalid_argument:floor_out_of_range:{self.floor}")
        if self.update not in UPDATE_RULES:
            raise ValueError(f"invalid_argument:update_rule:{self.update}")
        if self.filter_family not in FILTER_FAMILIES:
            raise ValueError(f"invalid_argument:filter_family:{self.filter_family}")
        if int(self.patience) < 1:
            raise ValueError("invalid_argument:patience_below_one")
        if int(self.inner_steps) < 1:
            raise ValueError("invalid_argument:inner_steps_below_one")
        if int(self.max_backtracks) < 0:
            raise ValueError("invalid_argument:max_backtracks_negative")

    @classmethod
    def from_mapping(cls, payload: dict[str, Any]) -> "FitConfig":
        allowed = set(cls.__dataclass_fields__)
        reject_unknown_keys(payload, allowed, where="fit_config")
        return cls(**payload)

    def snapshot(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class FitReport:
    params: ModelParams
    mse_trace: list[float]
    loglik_trace: list[float]
    decoded_states: np.ndarray
    iterations: int
    converged: bool
    stop_reason: str
    stats: EStepStats | None = field(default=None, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "mse_trace": [float(v) for v in self.mse_trace],
            "loglik_trace": [float(v) for v in self.loglik_trace],
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "stop_reason": self.stop_reason,
        }

    def save(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        write_json(out_dir / "report.json", self.to_dict())
        pd.DataFrame({"iteration": np.arange(len(self.mse_trace)), "mse": self.mse_trace}).to_csv(
            out_dir / "mse_trace.csv", index=False
        )
        T, I, J = self.decoded_states.shape
        tt, ii, jj = np.meshgrid(np.arange(T), np.arange(I), np.arange(J), indexing="ij")
        pd.DataFrame(
            {"t": tt.ravel(), "source": ii.ravel(), "group": jj.ravel(), "state": self.decoded_states.ravel()}
        ).to_csv(out_dir / "decoded_states.csv", index=False)
        return out_dir

    @classmethod
    def load(cls, out_dir: Path) -> "FitReport":
        out_dir = Path(out_dir)
        payload = read_json(out_dir / "report.json")
        frame = pd.read_csv(out_dir / "decoded_states.csv")
        T, I, J = (int(frame[col].max()) + 1 for col in ("t", "source", "group"))
        decoded = np.zeros((T, I, J), dtype=np.int64)
        decoded[frame["t"], frame["source"], frame["group"]] = frame["state"]
        return cls(
            params=ModelParams.from_dict(payload["params"]),
            mse_trace=[float(v) for v in payload.get("mse_trace") or []],
            loglik_trace=[float(v) for v in payload.get("loglik_trace") or []],
            decoded_states=decoded,
            iterations=int(payload.get("iterations") or 0),
            converged=bool(payload.get("converged")),
            stop_reason=str(payload.get("stop_reason") or ""),
        )


@dataclass(frozen=True)
class Gradients:
    X: tuple[np.ndarray, ...]
    Y: tuple[np.ndarray, ...]
    C: np.ndarray

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"X_{j}", g) for j, g in enumerate(self.X)]
        out += [(f"Y_{j}", g) for j, g in enumerate(self.Y)]
        out.append(("C", self.C))
        return out


def update_transitions(stats: EStepStats, previous: Sequence[TransitionMatrix]) -> tuple[TransitionMatrix, ...]:
    out = []
    for j, (jumps, prev) in enumerate(zip(stats.jumps, previous)):
        totals = np.asarray(jumps).sum(axis=0)
        if np.any(totals < 0):
            raise ValueError(f"invalid_argument:negative_jump_expectation:group={j}")
        row_sums = totals.sum(axis=1, keepdims=True)
        A = np.where(row_sums > 0, totals / np.where(row_sums > 0, row_sums, 1.0), prev.A)
        out.append(TransitionMatrix(A=A, group_id=j))
    return tuple(out)


def _quadratic_weights(
    chi: np.ndarray, s: np.ndarray, nbar: np.ndarray, zetabar: np.ndarray, bbar: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    zsum = (chi * zetabar).sum(axis=-1, keepdims=True)
    s = s[..., None]
    nb = nbar[..., None]
    w2 = bbar + 2.0 * (zetabar - zsum / s) / s + nb / (s * s)
    w1 = zetabar - zsum / s + nb / s
    return w2, w1


def _support(p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    chi = (p >= SUPPORT_TOL).astype(float)
    p_plus = np.divide(1.0, p, out=np.zeros_like(p), where=chi > 0)
    return chi, chi.sum(axis=-1), p_plus


def h_table(means: np.ndarray, abar: np.ndarray, nbar: np.ndarray, zetabar: np.ndarray, bbar: np.ndarray) -> np.ndarray:
    """Expected log-density h_i(p_i^l) up to a p-independent constant, batched over leading axes."""
    chi, s, p_plus = _support(means)
    w2, w1 = _quadratic_weights(chi, s, nbar, zetabar, bbar)
    p_safe = np.where(chi > 0, means, 1.0)
    log_term = np.log(s) + (chi * np.log(p_safe)).sum(axis=-1)
    quad = (chi * (w2 * p_plus - 2.0 * w1 + nbar[..., None] * means)).sum(axis=-1)
    return -0.5 * abar * log_term - 0.5 * quad


def grad_h_table(
    means: np.ndarray, abar: np.ndarray, nbar: np.ndarray, zetabar: np.ndarray, bbar: np.ndarray
) -> np.ndarray:
    chi, s, p_plus = _support(means)
    s_ = s[..., None]
    zsum = (chi * zetabar).sum(axis=-1, keepdims=True)
    kappa = (nbar[..., None] / 2.0 - zsum) / (s_ * s_)
    lead = (bbar / 2.0 + zetabar / s_ + kappa) * p_plus * p_plus
    return chi * (lead - (abar[..., None] / 2.0) * p_plus - (nbar[..., None] / 2.0))


def h_value(p: SupportedProbVector, abar: float, nbar: float, zetabar: np.ndarray, bbar: np.ndarray) -> float:
    return float(
        h_table(p.values[None], np.array([abar]), np.array([nbar]), np.asarray(zetabar)[None], np.asarray(bbar)[None])[0]
    )


def grad_h(p: SupportedProbVector, abar: float, nbar: float, zetabar: np.ndarray, bbar: np.ndarray) -> np.ndarray:
    return grad_h_table(
        p.values[None], np.array([abar]), np.array([nbar]), np.asarray(zetabar)[None], np.asarray(bbar)[None]
    )[0]


def cost(params: ModelParams, stats: EStepStats) -> float:
    """Negative expected log-likelihood of the observations (X, Y, C part of the Q-function)."""
    means = mean_table(params)
    return -float(h_table(means, stats.abar_observed, stats.nbar, stats.zetabar, stats.bbar).sum())


def jacobian_chain(
    params: ModelParams,
    i: int,
    ell: StateIndexArray,
    block: str,
    grad: np.ndarray,
    *,
    j: int | None = None,
) -> np.ndarray:
    """Contribution of one mean p_i^l to the cost gradient of a parameter block.

    ``block`` is "X", "Y" (with ``j``) or "C"; the result has the block's shape.
    """
    dims = params.dims
    ell.validate(dims.state_counts)
    G = np.asarray(grad, dtype=float).reshape(dims.N, dims.K).T
    if block == "C":
        out = np.zeros((dims.I, dims.J))
        for g, (dic, m) in enumerate(zip(params.dictionaries, ell.ell)):
            out[i, g] = -float(dic.X[:, m] @ G @ dic.Y[:, m])
        return out
    if j is None or not 0 <= j < dims.J:
        raise ValueError(f"invalid_argument:jacobian_block_group:{j}")
    dic = params.dictionaries[j]
    m = ell.ell[j]
    c = params.mixture.C[i, j]
    if block == "X":
        out = np.zeros_like(dic.X)
        out[:, m] = -c * (G @ dic.Y[:, m])
        return out
    if block == "Y":
        out = np.zeros_like(dic.Y)
        out[:, m] = -c * (G.T @ dic.X[:, m])
        return out
    raise ValueError(f"invalid_argument:jacobian_block:{block}")


def accumulate_gradients(params: ModelParams, stats: EStepStats) -> Gradients:
    """Cost gradient: minus the sum over (i, l) of the mean Jacobians applied to grad h."""
    dims = params.dims
    means = mean_table(params)
    G = grad_h_table(means, stats.abar_observed, stats.nbar, stats.zetabar, stats.bbar)
    Gm = np.swapaxes(G.reshape(dims.I, dims.Q, dims.N, dims.K), 2, 3)
    index = state_index_matrix(dims.state_counts)
    C = params.mixture.C
    gX, gY = [], []
    gC = np.zeros((dims.I, dims.J))
    for j, dic in enumerate(params.dictionaries):
        M = np.eye(dic.num_states)[index[:, j]]
        xcols = dic.X[:, index[:, j]]
        ycols = dic.Y[:, index[:, j]]
        gx = np.einsum("iqkn,nq->iqk", Gm, ycols)
        gy = np.einsum("iqkn,kq->iqn", Gm, xcols)
        gX.append(-np.einsum("iqk,i,qm->km", gx, C[:, j], M))
        gY.append(-np.einsum("iqn,i,qm->nm", gy, C[:, j], M))
        gC[:, j] = -np.einsum("iqk,kq->i", gx, xcols)
    grads = Gradients(X=tuple(gX), Y=tuple(gY), C=gC)
    for name, g in grads.blocks():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non_finite_gradient:{name}")
    return grads


def _step_block(value: np.ndarray, grad: np.ndarray, rate: float, rule: str) -> np.ndarray:
    if rule == "multiplicative":
        return np.clip(1.0 - rate * grad, 0.0, None) * value
    return value - rate * grad


def _to_simplex_columns(M: np.ndarray, rule: str, eps: float) -> np.ndarray:
    """Multiplicative steps are renormalized by their column sums, additive ones projected; then floored."""
    if rule == "multiplicative":
        totals = M.sum(axis=0, keepdims=True)
        out = np.where(totals > 0, M / np.where(totals > 0, totals, 1.0), 1.0 / M.shape[0])
    else:
        out = project_columns(M)
    if eps <= 0:
        return out
    out = np.maximum(out, eps)
    return out / out.sum(axis=0, keepdims=True)


def block_names(params: ModelParams, cfg: FitConfig) -> tuple[str, ...]:
    """Update order within one sweep: X_j then Y_j per group (Y tied to X when symmetric), C last."""
    names: list[str] = []
    for j in range(params.dims.J):
        names.append(f"X_{j}")
        if not cfg.symmetric:
            names.append(f"Y_{j}")
    names.append("C")
    return tuple(names)


def initial_rates(params: ModelParams, cfg: FitConfig) -> dict[str, float]:
    alphas = {"X": cfg.alpha_x, "Y": cfg.alpha_y, "C": cfg.alpha_c}
    return {name: float(alphas[name[0]]) for name in block_names(params, cfg)}


def _block_gradient(grads: Gradients, name: str, symmetric: bool) -> np.ndarray:
    if name == "C":
        return grads.C
    j = int(name.split("_", 1)[1])
    if name.startswith("X"):
        return grads.X[j] + grads.Y[j] if symmetric else grads.X[j]
    return grads.Y[j]


def _block_value(params: ModelParams, name: str) -> np.ndarray:
    if name == "C":
        return params.mixture.C
    j = int(name.split("_", 1)[1])
    dic = params.dictionaries[j]
    return dic.X if name.startswith("X") else dic.Y


def _apply_block(params: ModelParams, name: str, grad: np.ndarray, rate: float, cfg: FitConfig) -> ModelParams:
    if name == "C":
        stepped = _step_block(params.mixture.C.T, grad.T, rate, cfg.update)
        return params.replace(C=_to_simplex_columns(stepped, cfg.update, cfg.floor).T)
    j = int(name.split("_", 1)[1])
    X = [d.X for d in params.dictionaries]
    Y = [d.Y for d in params.dictionaries]
    target = X if name.startswith("X") else Y
    if cfg.symmetric and X[j].shape != Y[j].shape:
        raise ValueError(f"invalid_argument:symmetric_requires_square_grid:group={j}")
    target[j] = _to_simplex_columns(_step_block(target[j], grad, rate, cfg.update), cfg.update, cfg.floor)
    if cfg.symmetric:
        Y[j] = X[j]
    return params.replace(X=X, Y=Y)


def projected_update(
    params: ModelParams,
    grads: Gradients,
    cfg: FitConfig,
    *,
    rates: Mapping[str, float] | None = None,
    scale: float = 1.0,
    transitions: Sequence[TransitionMatrix] | None = None,
) -> ModelParams:
    """One projected step on every block from a fixed gradient; ``rates`` default to the configured alphas."""
    for name, g in grads.blocks():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non_finite_gradient:{name}")
    rates = dict(rates) if rates is not None else initial_rates(params, cfg)
    out = params
    for name in block_names(params, cfg):
        out = _apply_block(out, name, _block_gradient(grads, name, cfg.symmetric), rates[name] * scale, cfg)
    if transitions is not None:
        out = out.replace(A=[t.A for t in transitions])
    return out


def decode_states(stats: EStepStats) -> np.ndarray:
    """(T, I, J) argmax of the filtered state posteriors; ties go to the lowest index."""
    return np.stack([np.argmax(post, axis=-1) for post in stats.state_posteriors], axis=-1)


def recover_tensor(params: ModelParams, decoded: np.ndarray) -> DynamicTensor:
    dims = params.dims
    decoded = np.asarray(decoded, dtype=np.int64)
    T = decoded.shape[0]
    q = np.ravel_multi_index(tuple(decoded[..., j] for j in range(dims.J)), dims.state_counts)
    vec = mean_table(params)[np.arange(dims.I)[None, :], q]
    return DynamicTensor(slices=np.swapaxes(vec.reshape(T, dims.I, dims.N, dims.K), 2, 3))


def mse(recovered: DynamicTensor, observed: ObservationSet) -> float:
    """Squared Frobenius distance summed over all (t, i) slices and divided by I * T.

    Empty and masked slices count with their zero entries.
    """
    P = recovered.slices
    if P.shape != observed.Z.shape:
        raise ValueError(f"invalid_argument:mse_shape_mismatch:{P.shape}!={observed.Z.shape}")
    return float(((P - observed.Z) ** 2).sum() / (observed.T * observed.I))


@dataclass(frozen=True)
class Alignment:
    group_order: tuple[int, ...]
    state_orders: tuple[tuple[int, ...], ...]
    aligned: ModelParams
    errors: dict[str, float]

    def map_states(self, decoded: np.ndarray) -> np.ndarray:
        """Decoded estimate states (T, I, J) expressed in the truth's group and state labels."""
        out = np.zeros_like(decoded)
        for b, (a, order) in enumerate(zip(self.group_order, self.state_orders)):
            inverse = np.argsort(np.asarray(order))
            out[..., b] = inverse[decoded[..., a]]
        return out


def _column_cost(est_x: np.ndarray, est_y: np.ndarray, true_x: np.ndarray, true_y: np.ndarray) -> np.ndarray:
    dx = ((true_x[:, :, None] - est_x[:, None, :]) ** 2).sum(axis=0)
    dy = ((true_y[:, :, None] - est_y[:, None, :]) ** 2).sum(axis=0)
    return dx + dy


def align_to_truth(estimate: ModelParams, truth: ModelParams) -> Alignment:
    """Best group permutation and per-group state permutations by assignment on dictionary columns."""
    ed, td = estimate.dims, truth.dims
    if (ed.K, ed.N, ed.I, ed.J) != (td.K, td.N, td.I, td.J):
        raise ValueError("invalid_argument:alignment_dims_mismatch")
    J = td.J
    group_cost = np.full((J, J), 1e12)
    state_orders: dict[tuple[int, int], tuple[int, ...]] = {}
    for b, tdic in enumerate(truth.dictionaries):
        for a, edic in enumerate(estimate.dictionaries):
            if edic.num_states != tdic.num_states:
                continue
            cost_ab = _column_cost(edic.X, edic.Y, tdic.X, tdic.Y)
            rows, cols = linear_sum_assignment(cost_ab)
            group_cost[b, a] = float(cost_ab[rows, cols].sum())
            state_orders[(b, a)] = tuple(int(c) for c in cols)
    rows, cols = linear_sum_assignment(group_cost)
    if np.any(group_cost[rows, cols] >= 1e12):
        raise ValueError("invalid_argument:alignment_state_counts_incompatible")
    group_order = tuple(int(c) for c in cols)
    orders = tuple(state_orders[(b, a)] for b, a in enumerate(group_order))
    X = [estimate.dictionaries[a].X[:, list(o)] for a, o in zip(group_order, orders)]
    Y = [estimate.dictionaries[a].Y[:, list(o)] for a, o in zip(group_order, orders)]
    A = [estimate.transitions[a].A[np.ix_(o, o)] for a, o in zip(group_order, orders)]
    C = estimate.mixture.C[:, list(group_order)]
    aligned = ModelParams.from_arrays(X=X, Y=Y, C=C, A=A)
    errors = {
        "X": max(float(np.max(np.abs(a.X - t.X))) for a, t in zip(aligned.dictionaries, truth.dictionaries)),
        "Y": max(float(np.max(np.abs(a.Y - t.Y))) for a, t in zip(aligned.dictionaries, truth.dictionaries)),
        "C": float(np.max(np.abs(aligned.mixture.C - truth.mixture.C))),
        "A": max(float(np.max(np.abs(a.A - t.A))) for a, t in zip(aligned.transitions, truth.transitions)),
    }
    return Alignment(group_order=group_order, state_orders=orders, aligned=aligned, errors=errors)


def _evaluate(params: ModelParams, obs: ObservationSet, cfg: FitConfig) -> tuple[EStepStats, np.ndarray, float]:
    stats = run_estep(params, obs, family=cfg.filter_family)
    decoded = decode_states(stats)
    return stats, decoded, mse(recover_tensor(params, decoded), obs)


def _line_search(
    params: ModelParams,
    stats: EStepStats,
    name: str,
    cfg: FitConfig,
    rates: dict[str, float],
    scale: float,
    base: float,
) -> tuple[ModelParams, float, bool]:
    """Armijo backtracking on one block; an accepted rate is doubled for the next visit."""
    grad = _block_gradient(accumulate_gradients(params, stats), name, cfg.symmetric)
    if not np.any(grad):
        return params, base, False
    value = _block_value(params, name)
    rate = rates[name] * scale
    for _ in range(cfg.max_backtracks + 1):
        candidate = _apply_block(params, name, grad, rate, cfg)
        decrease = float(np.sum(grad * (_block_value(candidate, name) - value)))
        if decrease < 0:
            trial = cost(candidate, stats)
            if np.isfinite(trial) and trial <= base + ARMIJO_FRACTION * decrease:
                rates[name] = 2.0 * rate / scale
                debug(f"[fit] {name} rate={rate:.3e} cost {base:.6e} -> {trial:.6e}")
                return candidate, trial, True
        rate *= 0.5
    debug(f"[fit] {name} no descent after {cfg.max_backtracks} halvings")
    return params, base, False


def _descent_step(
    params: ModelParams,
    stats: EStepStats,
    cfg: FitConfig,
    rates: dict[str, float],
    scale: float = 1.0,
) -> tuple[ModelParams, bool]:
    """M-step: closed-form transitions, then up to ``inner_steps`` block sweeps. Returns (params, moved)."""
    transitions = update_transitions(stats, params.transitions)
    current = params
    base = cost(current, stats)
    moved = False
    for _ in range(cfg.inner_steps):
        swept = False
        for name in block_names(current, cfg):
            current, base, accepted = _line_search(current, stats, name, cfg, rates, scale, base)
            swept = swept or accepted
        if not swept:
            break
        moved = True
    return current.replace(A=[t.A for t in transitions]), moved


def _aborted_report(params: ModelParams, obs: ObservationSet, reason: str) -> FitReport:
    return FitReport(
        params=params,
        mse_trace=[],
        loglik_trace=[],
        decoded_states=np.zeros((obs.T, obs.I, params.dims.J), dtype=np.int64),
        iterations=0,
        converged=False,
        stop_reason=f"aborted:{reason}",
    )


def fit(
    obs: ObservationSet,
    init: ModelParams,
    cfg: FitConfig,
    *,
    on_iteration: Callable[[int, float], None] | None = None,
    trace_path: Path | None = None,
    verbose: bool = True,
) -> FitReport:
    """Generalized EM from ``init``.

    Stops on ``tolerance`` (relative MSE change below ``tol`` for ``patience`` moving
    iterations), ``no_descent`` (``patience`` M-steps in a row that could not lower the
    cost), ``max_iters``, ``step_scale_exhausted`` (monotone guard only) or ``aborted:<reason>``.
    """
    params = init
    try:
        stats, decoded, current = _evaluate(params, obs, cfg)
    except (NumericalDegeneracyError, FloatingPointError) as exc:
        if verbose:
            progress(f"[fit] stopping before the first iteration: {exc}")
        return _aborted_report(params, obs, str(exc))
    mse_trace = [current]
    loglik_trace = [float(stats.log_likelihood.sum())]
    if trace_path is not None:
        append_filter_trace(trace_path, stats, iteration=0)
    if verbose:
        progress(f"[fit] iter=0 mse={current:.6e}")
    rates = initial_rates(params, cfg)
    scale = 1.0
    streak = 0
    stalls = 0
    iterations = 0
    converged = False
    stop_reason = "max_iters"
    while iterations < cfg.max_iters:
        iterations += 1
        try:
            candidate, moved = _descent_step(params, stats, cfg, rates, scale)
            cand_stats, cand_decoded, cand_mse = _evaluate(candidate, obs, cfg)
        except (NumericalDegeneracyError, FloatingPointError) as exc:
            stop_reason = f"aborted:{exc}"
            if verbose:
                progress(f"[fit] stopping early: {exc}")
            break
        if cfg.monotone_guard and moved and cand_mse > current:
            scale *= 0.5
            debug(f"[fit] iter={iterations} rejected mse={cand_mse:.6e} > {current:.6e}; scale={scale:.3e}")
            if scale < cfg.min_step_scale:
                converged = True
                stop_reason = "step_scale_exhausted"
                break
            continue
        rel = abs(current - cand_mse) / max(current, 1e-300)
        params, stats, decoded, current = candidate, cand_stats, cand_decoded, cand_mse
        mse_trace.append(current)
        loglik_trace.append(float(stats.log_likelihood.sum()))
        if trace_path is not None:
            append_filter_trace(trace_path, stats, iteration=len(mse_trace) - 1)
        if on_iteration is not None:
            on_iteration(iterations, current)
        if verbose:
            progress(f"[fit] iter={iterations} mse={current:.6e} rel_change={rel:.3e} moved={moved}")
        if not moved:
            streak = 0
            stalls += 1
            if stalls >= cfg.patience:
                stop_reason = "no_descent"
                break
            continue
        stalls = 0
        streak = streak + 1 if rel < cfg.tol else 0
        if streak >= cfg.patience:
            converged = True
            stop_reason = "tolerance"
            break
    return FitReport(
        params=params,
        mse_trace=mse_trace,
        loglik_trace=loglik_trace,
        decoded_states=decoded,
        iterations=iterations,
        converged=converged,
        stop_reason=stop_reason,
        stats=stats,
    )
