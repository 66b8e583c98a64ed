from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .model import ModelParams, k_rank, random_params
from .utils import reject_unknown_keys

BENCHMARK_A1 = np.array([[0.85, 0.15], [0.2, 0.8]])
BENCHMARK_A2 = np.array([[0.8, 0.1, 0.1], [0.1, 0.75, 0.15], [0.15, 0.1, 0.75]])
BENCHMARK_K = 6
BENCHMARK_N = 8


@dataclass(frozen=True)
class ObservationSet:
    """Normalized slices Z, raw counts and sample sizes, indexed (t, i, k, n).

    A masked set keeps ``n`` as recorded while the masked cells of ``Z`` and
    ``counts`` are zero, so its slices no longer sum to one.
    """

    Z: np.ndarray
    counts: np.ndarray
    n: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        Z = np.asarray(self.Z, dtype=float)
        counts = np.asarray(self.counts)
        n = np.asarray(self.n, dtype=np.int64)
        if Z.ndim != 4 or counts.shape != Z.shape or n.shape != Z.shape[:2]:
            raise ValueError(f"invalid_argument:observation_shapes:Z={Z.shape}:counts={counts.shape}:n={n.shape}")
        if np.any(counts < 0) or np.any(n < 0):
            raise ValueError("invalid_argument:negative_counts")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "n", n)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != Z.shape:
                raise ValueError("invalid_argument:mask_shape")
            object.__setattr__(self, "mask", mask)

    @property
    def T(self) -> int:
        return int(self.Z.shape[0])

    @property
    def I(self) -> int:
        return int(self.Z.shape[1])

    @property
    def K(self) -> int:
        return int(self.Z.shape[2])

    @property
    def N(self) -> int:
        return int(self.Z.shape[3])

    @property
    def D(self) -> int:
        return self.K * self.N

    @property
    def observed(self) -> np.ndarray:
        """(T, I) flags of slices that carry at least one event."""
        return self.n > 0

    def z_vectors(self) -> np.ndarray:
        """(T, I, K*N) column-major vectorized slices."""
        return np.swapaxes(self.Z, 2, 3).reshape(self.T, self.I, self.D)

    def with_mask(self, mask: np.ndarray) -> "ObservationSet":
        keep = ~mask
        return ObservationSet(Z=self.Z * keep, counts=self.counts * keep, n=self.n.copy(), mask=mask)


@dataclass(frozen=True)
class HiddenRecord:
    """True state paths (T, I, J) and, optionally, per-(t, i) event counts by group (T, I, J)."""

    states: np.ndarray
    group_draws: np.ndarray | None = None


@dataclass(frozen=True)
class GenConfig:
    params: ModelParams
    T: int
    poisson_rate: float | None = None
    fixed_n: int | None = None
    seed: int = 0
    initial_state_dist: tuple[np.ndarray, ...] | None = None
    retain_group_draws: bool = False

    def __post_init__(self) -> None:
        if int(self.T) < 1:
            raise ValueError(f"invalid_argument:horizon_below_one:{self.T}")
        has_rate = self.poisson_rate is not None
        has_fixed = self.fixed_n is not None
        if has_rate == has_fixed:
            raise ValueError("invalid_argument:need_exactly_one_of_poisson_rate_or_fixed_n")
        if has_rate and not float(self.poisson_rate) > 0:
            raise ValueError(f"invalid_argument:poisson_rate_not_positive:{self.poisson_rate}")
        if has_fixed and int(self.fixed_n) < 1:
            raise ValueError(f"invalid_argument:fixed_n_below_one:{self.fixed_n}")
        if self.initial_state_dist is not None:
            dims = self.params.dims
            dists = []
            for j, (raw, q) in enumerate(zip(self.initial_state_dist, dims.state_counts)):
                arr = np.broadcast_to(np.asarray(raw, dtype=float), (dims.I, q)).copy()
                if np.any(arr < 0) or not np.allclose(arr.sum(axis=1), 1.0, atol=1e-10):
                    raise ValueError(f"invalid_argument:initial_state_dist:group={j}")
                dists.append(arr)
            if len(dists) != dims.J:
                raise ValueError("invalid_argument:initial_state_dist_group_count")
            object.__setattr__(self, "initial_state_dist", tuple(dists))

    def initial_distributions(self) -> tuple[np.ndarray, ...]:
        """Per group an (I, Q_j) matrix of p(s_ij(1)); uniform unless configured."""
        if self.initial_state_dist is not None:
            return self.initial_state_dist
        dims = self.params.dims
        return tuple(np.full((dims.I, q), 1.0 / q) for q in dims.state_counts)

    @classmethod
    def from_mapping(cls, payload: dict[str, Any], *, base_dir: Path | None = None) -> "GenConfig":
        reject_unknown_keys(
            payload,
            {"params", "synthetic", "T", "poisson_rate", "fixed_n", "seed", "initial_state_dist", "retain_group_draws"},
            where="gen_config",
        )
        seed = int(payload.get("seed", 0))
        params = _params_from_config(payload, seed=seed, base_dir=base_dir)
        init = payload.get("initial_state_dist")
        return cls(
            params=params,
            T=int(payload.get("T", 100)),
            poisson_rate=float(payload["poisson_rate"]) if payload.get("poisson_rate") is not None else None,
            fixed_n=int(payload["fixed_n"]) if payload.get("fixed_n") is not None else None,
            seed=seed,
            initial_state_dist=tuple(np.asarray(d, dtype=float) for d in init) if init is not None else None,
            retain_group_draws=bool(payload.get("retain_group_draws", False)),
        )

    def snapshot(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "params": self.params.to_dict(),
            "T": int(self.T),
            "poisson_rate": self.poisson_rate,
            "fixed_n": self.fixed_n,
            "seed": int(self.seed),
            "retain_group_draws": bool(self.retain_group_draws),
        }
        if self.initial_state_dist is not None:
            out["initial_state_dist"] = [d.tolist() for d in self.initial_state_dist]
        return out


def _params_from_config(payload: dict[str, Any], *, seed: int, base_dir: Path | None) -> ModelParams:
    raw = payload.get("params")
    synthetic = payload.get("synthetic")
    if (raw is None) == (synthetic is None):
        raise ValueError("invalid_config:gen_config:need_exactly_one_of_params_or_synthetic")
    if isinstance(raw, dict):
        return ModelParams.from_dict(raw)
    if isinstance(raw, str):
        path = Path(raw)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        return ModelParams.load_json(path)
    if not isinstance(synthetic, dict):
        raise ValueError("invalid_config:gen_config:synthetic_not_a_mapping")
    reject_unknown_keys(synthetic, {"kind", "I", "K", "N", "Q", "seed"}, where="gen_config.synthetic")
    kind = str(synthetic.get("kind") or "benchmark")
    params_seed = int(synthetic.get("seed", seed))
    I = int(synthetic.get("I", 5))
    if kind == "benchmark":
        return benchmark_synthetic_params(seed=params_seed, I=I)
    if kind == "random":
        return random_params(
            K=int(synthetic.get("K", BENCHMARK_K)),
            N=int(synthetic.get("N", BENCHMARK_N)),
            I=I,
            state_counts=tuple(int(q) for q in synthetic.get("Q", (2, 3))),
            rng=np.random.default_rng(params_seed),
        )
    raise ValueError(f"invalid_config:gen_config:unknown_synthetic_kind:{kind}")


def benchmark_synthetic_params(*, seed: int, I: int = 5, max_draws: int = 100) -> ModelParams:
    """Two groups with 2 and 3 sticky states over a 6 x 8 event grid.

    Dictionaries are redrawn until the stacked [X_1 X_2] and [Y_1 Y_2] reach full k-rank.
    """
    rng = np.random.default_rng(seed)
    total = BENCHMARK_A1.shape[0] + BENCHMARK_A2.shape[0]
    for _ in range(max_draws):
        params = random_params(K=BENCHMARK_K, N=BENCHMARK_N, I=I, state_counts=(2, 3), rng=rng, transitions=(BENCHMARK_A1, BENCHMARK_A2))
        Xbar = np.hstack([d.X for d in params.dictionaries])
        Ybar = np.hstack([d.Y for d in params.dictionaries])
        if k_rank(Xbar) == total and k_rank(Ybar) == total:
            return params
    raise RuntimeError(f"synthetic_params_not_identifiable:draws={max_draws}")


def _advance_states(
    rng: np.random.Generator,
    prev: np.ndarray | None,
    params: ModelParams,
    init: Sequence[np.ndarray],
) -> np.ndarray:
    dims = params.dims
    out = np.zeros((dims.I, dims.J), dtype=np.int64)
    for i in range(dims.I):
        for j, q in enumerate(dims.state_counts):
            probs = init[j][i] if prev is None else params.transitions[j].A[prev[i, j]]
            out[i, j] = rng.choice(q, p=probs)
    return out


def sample_dataset(cfg: GenConfig) -> tuple[ObservationSet, HiddenRecord]:
    params = cfg.params
    dims = params.dims
    rng = np.random.default_rng(cfg.seed)
    init = cfg.initial_distributions()
    counts = np.zeros((cfg.T, dims.I, dims.K, dims.N), dtype=np.int64)
    n = np.zeros((cfg.T, dims.I), dtype=np.int64)
    states = np.zeros((cfg.T, dims.I, dims.J), dtype=np.int64)
    draws = np.zeros((cfg.T, dims.I, dims.J), dtype=np.int64)
    C = params.mixture.C
    prev: np.ndarray | None = None
    for t in range(cfg.T):
        n[t] = cfg.fixed_n if cfg.fixed_n is not None else rng.poisson(cfg.poisson_rate, size=dims.I)
        prev = states[t] = _advance_states(rng, prev, params, init)
        for i in range(dims.I):
            draws[t, i] = rng.multinomial(n[t, i], C[i])
            for j, dic in enumerate(params.dictionaries):
                if draws[t, i, j] == 0:
                    continue
                m = states[t, i, j]
                cells = np.outer(dic.X[:, m], dic.Y[:, m]).ravel()
                counts[t, i] += rng.multinomial(draws[t, i, j], cells / cells.sum()).reshape(dims.K, dims.N)
    Z, _ = normalize_counts(counts, n)
    obs = ObservationSet(Z=Z, counts=counts, n=n)
    return obs, HiddenRecord(states=states, group_draws=draws if cfg.retain_group_draws else None)


def normalize_counts(counts: np.ndarray, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Z = counts / n per slice; returns Z and the (T, I) flags of all-missing (n == 0) slices."""
    counts = np.asarray(counts, dtype=float)
    n = np.asarray(n, dtype=float)
    missing = n <= 0
    denom = np.where(missing, 1.0, n)[..., None, None]
    Z = np.where(missing[..., None, None], 0.0, counts / denom)
    return Z, missing


def apply_missing_mask(obs: ObservationSet, fraction: float, seed: int) -> ObservationSet:
    """Hide each cell independently with probability ``fraction``; cells already masked stay masked."""
    if not 0.0 <= float(fraction) < 1.0:
        raise ValueError(f"invalid_argument:missing_fraction_out_of_range:{fraction}")
    existing = obs.mask if obs.mask is not None else np.zeros(obs.Z.shape, dtype=bool)
    if fraction == 0:
        return ObservationSet(Z=obs.Z, counts=obs.counts, n=obs.n, mask=existing.copy())
    rng = np.random.default_rng(seed)
    return obs.with_mask(existing | (rng.random(obs.Z.shape) < fraction))


@dataclass
class DatasetBundle:
    """What a dataset directory holds; only ``obs`` is required."""

    obs: ObservationSet
    hidden: HiddenRecord | None = None
    truth: ModelParams | None = None
    original: ObservationSet | None = None
    meta: dict[str, Any] = field(default_factory=dict)
