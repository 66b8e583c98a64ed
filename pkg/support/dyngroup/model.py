"""Domain types of the latent-group tensor model, simplex geometry and slice assembly.

Conventions used across the package:
- state indices are 0-based (state ``m`` of the math is ``m - 1`` here);
- ``vec(.)`` is column-major (``order="F"``), so entry ``(k, n)`` of a K x N slice
  sits at position ``k + K * n``;
- joint state arrays are enumerated mixed-radix with the last group varying fastest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .utils import read_json, write_json

ASSEMBLY_TOL = 1e-10
ITERATE_TOL = 1e-8
PROB_TOL = 1e-12


def _frozen(values: Any, *, dtype: Any = float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_stochastic(arr: np.ndarray, *, axis: int, tol: float, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"invalid_argument:{what}:non_finite")
    if np.any(arr < -tol):
        raise ValueError(f"invalid_argument:{what}:negative_entry")
    sums = arr.sum(axis=axis)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=tol):
        raise ValueError(f"invalid_argument:{what}:sums_not_one:max_dev={float(np.max(np.abs(sums - 1.0))):.3e}")


@dataclass(frozen=True)
class ProbVector:
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen(self.values)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("invalid_argument:prob_vector_shape")
        _check_stochastic(arr, axis=0, tol=PROB_TOL * max(1, arr.size) * 10, what="prob_vector")
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class Dictionary:
    """Per-group PMF dictionaries: column m of X (K x Q_j) and Y (N x Q_j) belong to state m."""

    X: np.ndarray
    Y: np.ndarray
    group_id: int

    def __post_init__(self) -> None:
        X = _frozen(self.X)
        Y = _frozen(self.Y)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
            raise ValueError(f"invalid_argument:dictionary_shape:group={self.group_id}")
        _check_stochastic(X, axis=0, tol=ITERATE_TOL, what=f"X_{self.group_id}")
        _check_stochastic(Y, axis=0, tol=ITERATE_TOL, what=f"Y_{self.group_id}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def num_states(self) -> int:
        return int(self.X.shape[1])


@dataclass(frozen=True)
class GroupMixture:
    """Row-stochastic I x J matrix of group probabilities c_ij."""

    C: np.ndarray

    def __post_init__(self) -> None:
        C = _frozen(self.C)
        if C.ndim != 2:
            raise ValueError("invalid_argument:mixture_shape")
        _check_stochastic(C, axis=1, tol=ITERATE_TOL, what="C")
        object.__setattr__(self, "C", C)


@dataclass(frozen=True)
class TransitionMatrix:
    A: np.ndarray
    group_id: int

    def __post_init__(self) -> None:
        A = _frozen(self.A)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"invalid_argument:transition_shape:group={self.group_id}")
        _check_stochastic(A, axis=1, tol=ITERATE_TOL, what=f"A_{self.group_id}")
        object.__setattr__(self, "A", A)


@dataclass(frozen=True)
class MarkovState:
    index: int
    source_id: int
    group_id: int
    time: int


@dataclass(frozen=True)
class StateIndexArray:
    ell: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ell", tuple(int(v) for v in self.ell))

    def validate(self, state_counts: Sequence[int]) -> None:
        if len(self.ell) != len(state_counts):
            raise ValueError(f"invalid_argument:state_array_length:{len(self.ell)}!={len(state_counts)}")
        for j, (m, q) in enumerate(zip(self.ell, state_counts)):
            if not 0 <= m < q:
                raise ValueError(f"invalid_argument:state_out_of_range:group={j}:state={m}:Q={q}")


@dataclass(frozen=True)
class ModelDims:
    K: int
    N: int
    I: int
    state_counts: tuple[int, ...]

    @property
    def J(self) -> int:
        return len(self.state_counts)

    @property
    def Q(self) -> int:
        return int(np.prod(self.state_counts))

    @property
    def D(self) -> int:
        return self.K * self.N


@dataclass(frozen=True)
class ModelParams:
    dictionaries: tuple[Dictionary, ...]
    mixture: GroupMixture
    transitions: tuple[TransitionMatrix, ...]
    dims: ModelDims = field(init=False)

    def __post_init__(self) -> None:
        dictionaries = tuple(self.dictionaries)
        transitions = tuple(self.transitions)
        object.__setattr__(self, "dictionaries", dictionaries)
        object.__setattr__(self, "transitions", transitions)
        if not dictionaries:
            raise ValueError("invalid_argument:no_groups")
        J = len(dictionaries)
        if len(transitions) != J or self.mixture.C.shape[1] != J:
            raise ValueError("invalid_argument:group_count_mismatch")
        K = dictionaries[0].X.shape[0]
        N = dictionaries[0].Y.shape[0]
        counts = []
        for j, (d, a) in enumerate(zip(dictionaries, transitions)):
            if d.X.shape[0] != K or d.Y.shape[0] != N:
                raise ValueError(f"invalid_argument:dictionary_dims:group={j}")
            if a.A.shape[0] != d.num_states:
                raise ValueError(f"invalid_argument:transition_dims:group={j}")
            counts.append(d.num_states)
        object.__setattr__(
            self, "dims", ModelDims(K=K, N=N, I=int(self.mixture.C.shape[0]), state_counts=tuple(counts))
        )

    @classmethod
    def from_arrays(
        cls,
        X: Sequence[np.ndarray],
        Y: Sequence[np.ndarray],
        C: np.ndarray,
        A: Sequence[np.ndarray],
    ) -> "ModelParams":
        return cls(
            dictionaries=tuple(Dictionary(X=x, Y=y, group_id=j) for j, (x, y) in enumerate(zip(X, Y))),
            mixture=GroupMixture(C=C),
            transitions=tuple(TransitionMatrix(A=a, group_id=j) for j, a in enumerate(A)),
        )

    def replace(
        self,
        *,
        X: Sequence[np.ndarray] | None = None,
        Y: Sequence[np.ndarray] | None = None,
        C: np.ndarray | None = None,
        A: Sequence[np.ndarray] | None = None,
    ) -> "ModelParams":
        return ModelParams.from_arrays(
            X=X if X is not None else [d.X for d in self.dictionaries],
            Y=Y if Y is not None else [d.Y for d in self.dictionaries],
            C=C if C is not None else self.mixture.C,
            A=A if A is not None else [t.A for t in self.transitions],
        )

    def to_dict(self) -> dict[str, Any]:
        d = self.dims
        return {
            "dims": {"K": d.K, "N": d.N, "I": d.I, "J": d.J, "Q": list(d.state_counts)},
            "X": [dic.X.tolist() for dic in self.dictionaries],
            "Y": [dic.Y.tolist() for dic in self.dictionaries],
            "C": self.mixture.C.tolist(),
            "A": [t.A.tolist() for t in self.transitions],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "ModelParams":
        dims = payload.get("dims") if isinstance(payload.get("dims"), dict) else None
        if dims is None:
            raise ValueError("invalid_argument:params_missing_dims")
        params = cls.from_arrays(
            X=[np.asarray(x, dtype=float) for x in payload["X"]],
            Y=[np.asarray(y, dtype=float) for y in payload["Y"]],
            C=np.asarray(payload["C"], dtype=float),
            A=[np.asarray(a, dtype=float) for a in payload["A"]],
        )
        got = params.dims
        want = (int(dims["K"]), int(dims["N"]), int(dims["I"]), tuple(int(q) for q in dims["Q"]))
        if (got.K, got.N, got.I, got.state_counts) != want:
            raise ValueError(f"invalid_argument:params_dims_header_mismatch:{want}")
        return params

    def save_json(self, path: Path) -> None:
        write_json(Path(path), self.to_dict())

    @classmethod
    def load_json(cls, path: Path) -> "ModelParams":
        return cls.from_dict(read_json(Path(path)))


@dataclass(frozen=True)
class DynamicTensor:
    """T x I x K x N stack of frontal slices."""

    slices: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen(self.slices)
        if arr.ndim != 4:
            raise ValueError("invalid_argument:dynamic_tensor_shape")
        if np.any(arr < -PROB_TOL):
            raise ValueError("invalid_argument:dynamic_tensor_negative")
        object.__setattr__(self, "slices", arr)


def project_to_simplex(v: Iterable[float]) -> ProbVector:
    """Euclidean projection onto the canonical simplex (sort-based)."""
    x = np.asarray(list(v) if not isinstance(v, np.ndarray) else v, dtype=float).ravel()
    if x.size < 1:
        raise ValueError("invalid_argument:empty_vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("invalid_argument:non_finite_vector")
    return ProbVector(values=_project_rows(x[None, :])[0])


def _project_rows(V: np.ndarray) -> np.ndarray:
    n_features = V.shape[1]
    U = np.sort(V, axis=1)[:, ::-1]
    cssv = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(n_features) + 1
    cond = U - cssv / ind > 0
    rho = np.count_nonzero(cond, axis=1)
    theta = cssv[np.arange(len(V)), rho - 1] / rho
    out = np.maximum(V - theta[:, None], 0.0)
    # exact re-normalization keeps already-stochastic inputs fixed to the last bit
    return out / out.sum(axis=1, keepdims=True)


def project_rows(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("invalid_argument:non_finite_matrix")
    return _project_rows(M)


def project_columns(M: np.ndarray) -> np.ndarray:
    return project_rows(np.asarray(M, dtype=float).T).T


def enumerate_state_index_arrays(state_counts: Sequence[int]) -> tuple[StateIndexArray, ...]:
    if any(int(q) < 1 for q in state_counts):
        raise ValueError("invalid_argument:state_count_below_one")
    return tuple(StateIndexArray(ell=combo) for combo in itertools.product(*(range(int(q)) for q in state_counts)))


def state_index_matrix(state_counts: Sequence[int]) -> np.ndarray:
    """(Q, J) integer matrix whose row q is the joint state array ell_q."""
    combos = enumerate_state_index_arrays(state_counts)
    return np.array([c.ell for c in combos], dtype=int).reshape(len(combos), len(state_counts))


def membership_matrix(state_counts: Sequence[int], j: int) -> np.ndarray:
    """(Q, Q_j) one-hot matrix: entry (q, m) = 1 iff ell_q[j] == m (the sets A_j(m))."""
    index = state_index_matrix(state_counts)
    return np.eye(int(state_counts[j]))[index[:, j]]


def assemble_dynamic_slice(params: ModelParams, i: int, states: StateIndexArray) -> np.ndarray:
    dims = params.dims
    if not 0 <= i < dims.I:
        raise ValueError(f"invalid_argument:source_out_of_range:{i}")
    states.validate(dims.state_counts)
    P = np.zeros((dims.K, dims.N))
    for j, (dic, m) in enumerate(zip(params.dictionaries, states.ell)):
        P += params.mixture.C[i, j] * np.outer(dic.X[:, m], dic.Y[:, m])
    return P


def assemble_static_slice(params: ModelParams, i: int) -> np.ndarray:
    if any(q != 1 for q in params.dims.state_counts):
        raise ValueError("invalid_argument:static_slice_requires_single_state_groups")
    return assemble_dynamic_slice(params, i, StateIndexArray(ell=(0,) * params.dims.J))


def mean_vector(params: ModelParams, i: int, ell: StateIndexArray) -> ProbVector:
    return ProbVector(values=assemble_dynamic_slice(params, i, ell).ravel(order="F"))


def mean_table(params: ModelParams) -> np.ndarray:
    """All means p_i^ell as an (I, Q, K*N) array, rows ordered by the joint enumeration."""
    dims = params.dims
    index = state_index_matrix(dims.state_counts)
    out = np.zeros((dims.I, dims.Q, dims.D))
    for j, dic in enumerate(params.dictionaries):
        # vec(x y^T) in column-major order is kron(y, x)
        cells = np.stack([np.kron(dic.Y[:, m], dic.X[:, m]) for m in range(dic.num_states)])
        out += params.mixture.C[:, j][:, None, None] * cells[index[:, j]][None, :, :]
    return out


def build_cbar(mixture: GroupMixture, states: Sequence[MarkovState], num_states: int) -> np.ndarray:
    C = mixture.C
    if len(states) != C.shape[0]:
        raise ValueError(f"invalid_argument:cbar_needs_one_state_per_source:{len(states)}!={C.shape[0]}")
    cbar = np.zeros((C.shape[0], int(num_states)))
    for st in states:
        if not 0 <= st.index < num_states:
            raise ValueError(f"invalid_argument:state_out_of_range:source={st.source_id}:state={st.index}")
        cbar[st.source_id, st.index] = C[st.source_id, st.group_id]
    return cbar


def stacked_factors(params: ModelParams, cbars: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """[X_1..X_J], [Y_1..Y_J], [Cbar_1..Cbar_J]."""
    Xbar = np.hstack([d.X for d in params.dictionaries])
    Ybar = np.hstack([d.Y for d in params.dictionaries])
    Cbar = np.hstack(list(cbars))
    return Xbar, Ybar, Cbar


def expand_cbar_slices(params: ModelParams, cbars: Sequence[np.ndarray]) -> np.ndarray:
    """Outer-product expansion of the stacked factors: (I, K, N) slices."""
    Xbar, Ybar, Cbar = stacked_factors(params, cbars)
    return np.einsum("kr,nr,ir->ikn", Xbar, Ybar, Cbar)


def k_rank(M: np.ndarray, *, tol: float = 1e-10) -> int:
    """Largest r such that every r columns of M are linearly independent."""
    M = np.asarray(M, dtype=float)
    ncols = M.shape[1]
    best = 0
    for r in range(1, ncols + 1):
        if r > M.shape[0]:
            break
        if all(np.linalg.matrix_rank(M[:, list(cols)], tol=tol) == r for cols in itertools.combinations(range(ncols), r)):
            best = r
        else:
            break
    return best


@dataclass(frozen=True)
class KruskalReport:
    k_x: int
    k_y: int
    k_c: int
    total_columns: int
    holds: bool


def kruskal_diagnostic(params: ModelParams, states: Sequence[StateIndexArray]) -> KruskalReport:
    """k-ranks of the stacked factors at one time point and the uniqueness condition."""
    dims = params.dims
    if len(states) != dims.I:
        raise ValueError("invalid_argument:kruskal_needs_one_state_array_per_source")
    cbars = []
    for j, q_j in enumerate(dims.state_counts):
        per_source = [MarkovState(index=s.ell[j], source_id=i, group_id=j, time=0) for i, s in enumerate(states)]
        cbars.append(build_cbar(params.mixture, per_source, q_j))
    Xbar, Ybar, Cbar = stacked_factors(params, cbars)
    kx, ky, kc = k_rank(Xbar), k_rank(Ybar), k_rank(Cbar)
    total = int(Xbar.shape[1])
    if total == 1:
        holds = min(kx, ky, kc) >= 1
    else:
        holds = kx + ky + kc >= 2 * total + 2
    return KruskalReport(k_x=kx, k_y=ky, k_c=kc, total_columns=total, holds=holds)


def kron_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    return reduce(np.kron, mats)


def random_params(
    *,
    K: int,
    N: int,
    I: int,
    state_counts: Sequence[int],
    rng: np.random.Generator,
    concentration: float = 1.0,
    transitions: Sequence[np.ndarray] | None = None,
) -> ModelParams:
    """Dirichlet-sampled parameters; C rows are uniform on the simplex."""
    X = [rng.dirichlet(np.full(K, concentration), size=q).T for q in state_counts]
    Y = [rng.dirichlet(np.full(N, concentration), size=q).T for q in state_counts]
    C = rng.dirichlet(np.ones(len(state_counts)), size=I)
    if transitions is None:
        # sticky chains: extra Dirichlet mass on the diagonal
        A = [np.stack([rng.dirichlet(np.ones(q) + 2.0 * np.eye(q)[m]) for m in range(q)]) for q in state_counts]
    else:
        A = [np.asarray(a, dtype=float) for a in transitions]
    return ModelParams.from_arrays(X=X, Y=Y, C=C, A=A)
