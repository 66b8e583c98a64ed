"""Model-order selection by k-means distortion curves and k-means based initialization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .estimator import FitConfig, fit
from .generator import ObservationSet
from .model import ModelParams, project_columns, project_rows
from .utils import debug, progress

PHAM_THRESHOLD = 0.85
FEATURE_KINDS = ("slices", "degree")
DICTIONARY_METHODS = ("marginals", "rank_one")
INIT_SMOOTHING = 1e-2


@dataclass(frozen=True)
class FeatureSet:
    """Feature vectors (M, d); ``keys`` holds the (t, i) slice each row came from."""

    vectors: np.ndarray
    keys: tuple[tuple[int, int], ...] = ()
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=float)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ValueError(f"invalid_argument:feature_shape:{vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("invalid_argument:non_finite_features")
        object.__setattr__(self, "vectors", vectors)

    @property
    def size(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def subset(self, rows: np.ndarray) -> "FeatureSet":
        rows = np.asarray(rows, dtype=int)
        return FeatureSet(vectors=self.vectors[rows], keys=tuple(self.keys[r] for r in rows) if self.keys else ())


def features_from_observations(obs: ObservationSet, *, kind: str = "slices") -> FeatureSet:
    """One feature vector per observed (t, i) slice.

    ``slices``: the vectorized normalized slice. ``degree``: weighted degree (row sums) of the slice.
    """
    if kind not in FEATURE_KINDS:
        raise ValueError(f"invalid_argument:feature_kind:{kind}")
    keys = [(t, i) for t in range(obs.T) for i in range(obs.I) if obs.n[t, i] > 0]
    if not keys:
        raise ValueError("invalid_argument:no_observed_slices")
    if kind == "slices":
        vectors = np.stack([obs.Z[t, i].ravel(order="F") for t, i in keys])
    else:
        vectors = np.stack([obs.Z[t, i].sum(axis=1) for t, i in keys])
    return FeatureSet(vectors=vectors, keys=tuple(keys))


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    distortion: float


def kmeans(features: FeatureSet, k: int, *, seed: int = 0, n_init: int = 10) -> KMeansResult:
    if int(k) < 1:
        raise ValueError(f"invalid_argument:k_below_one:{k}")
    if k > features.size:
        raise ValueError(f"invalid_argument:k_exceeds_points:{k}>{features.size}")
    with warnings.catch_warnings():
        # k close to the number of distinct points
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = KMeans(n_clusters=int(k), init="k-means++", n_init=n_init, random_state=seed).fit(features.vectors)
    return KMeansResult(labels=model.labels_.astype(np.int64), centroids=model.cluster_centers_, distortion=float(model.inertia_))


def pham_alpha(k: int, d: int) -> float:
    """Weight of the previous distortion in the f(k) ratio (k >= 2)."""
    if k < 2:
        raise ValueError(f"invalid_argument:pham_alpha_k:{k}")
    alpha = 1.0 - 3.0 / (4.0 * d)
    for _ in range(3, k + 1):
        alpha = alpha + (1.0 - alpha) / 6.0
    return alpha


@dataclass(frozen=True)
class OrderSelection:
    k: int
    scores: dict[int, float]
    distortions: dict[int, float]
    labels: dict[int, np.ndarray] = field(default_factory=dict, repr=False)


def select_order(
    features: FeatureSet,
    k_max: int,
    *,
    threshold: float = PHAM_THRESHOLD,
    seed: int = 0,
) -> OrderSelection:
    if int(k_max) < 2:
        raise ValueError(f"invalid_argument:k_max_below_two:{k_max}")
    distinct = int(np.unique(features.vectors, axis=0).shape[0])
    top = min(int(k_max), distinct)
    distortions: dict[int, float] = {}
    labels: dict[int, np.ndarray] = {}
    scores: dict[int, float] = {}
    for k in range(1, top + 1):
        result = kmeans(features, k, seed=seed)
        distortions[k] = result.distortion
        labels[k] = result.labels
        prev = distortions.get(k - 1, 0.0)
        if k == 1 or prev <= 0:
            scores[k] = 1.0
        else:
            scores[k] = result.distortion / (pham_alpha(k, features.dim) * prev)
    chosen = next((k for k in sorted(scores) if scores[k] < threshold), 1)
    debug(f"[select-order] scores={ {k: round(v, 4) for k, v in scores.items()} } chosen={chosen}")
    return OrderSelection(k=chosen, scores=scores, distortions=distortions, labels=labels)


@dataclass(frozen=True)
class OrderPlan:
    J: int
    state_counts: tuple[int, ...]
    group_selection: OrderSelection
    state_selections: tuple[OrderSelection | None, ...]


def select_orders(
    obs: ObservationSet,
    k_max: int,
    *,
    kind: str = "slices",
    threshold: float = PHAM_THRESHOLD,
    seed: int = 0,
) -> OrderPlan:
    """Groups first, then the state count of each group from the slices carrying its label."""
    features = features_from_observations(obs, kind=kind)
    groups = select_order(features, k_max, threshold=threshold, seed=seed)
    labels = groups.labels[groups.k]
    counts: list[int] = []
    per_group: list[OrderSelection | None] = []
    for j in range(groups.k):
        rows = np.flatnonzero(labels == j)
        if rows.size < 2:
            counts.append(1)
            per_group.append(None)
            continue
        sel = select_order(features.subset(rows), min(k_max, rows.size), threshold=threshold, seed=seed)
        counts.append(sel.k)
        per_group.append(sel)
    progress(f"[select-order] J={groups.k} Q={tuple(counts)}")
    return OrderPlan(J=groups.k, state_counts=tuple(counts), group_selection=groups, state_selections=tuple(per_group))


def _smooth_columns(M: np.ndarray) -> np.ndarray:
    M = project_columns(np.clip(M, 0.0, None))
    return (1.0 - INIT_SMOOTHING) * M + INIT_SMOOTHING / M.shape[0]


def _dictionary_from_centroids(
    centroids: np.ndarray, K: int, N: int, symmetric: bool, *, method: str = "marginals"
) -> tuple[np.ndarray, np.ndarray]:
    """X_j, Y_j columns from Q_j centroid slices: row/column marginals or the dominant rank-one factor."""
    slices = centroids.reshape(-1, N, K).transpose(0, 2, 1)
    if method == "marginals":
        X = slices.sum(axis=2).T
        Y = slices.sum(axis=1).T
    elif method == "rank_one":
        u, _, vt = np.linalg.svd(slices)
        X = np.abs(u[:, :, 0]).T
        Y = np.abs(vt[:, 0, :]).T
    else:
        raise ValueError(f"invalid_argument:dictionary_method:{method}")
    if symmetric:
        X = _smooth_columns(_smooth_columns(X) + _smooth_columns(Y))
        return X, X
    return _smooth_columns(X), _smooth_columns(Y)


def _score_candidate(obs: ObservationSet, params: ModelParams, cfg: FitConfig) -> tuple[float, ModelParams]:
    report = fit(obs, params, cfg, verbose=False)
    if not report.mse_trace or report.stop_reason.startswith("aborted:"):
        return float("inf"), params
    return report.mse_trace[-1], report.params


def init_params(
    obs: ObservationSet,
    J: int,
    state_counts: Sequence[int],
    *,
    symmetric: bool = False,
    seed: int = 0,
    candidates: int = 5,
    warmup_iters: int = 3,
    fit_cfg: FitConfig | None = None,
    verbose: bool = True,
) -> ModelParams:
    """k-means initialization.

    Every (dictionary method, C candidate) pair runs ``warmup_iters`` EM iterations; the
    warmed-up parameters with the smallest MSE win. ``warmup_iters=0`` scores the raw
    candidates and returns them unchanged.
    """
    state_counts = tuple(int(q) for q in state_counts)
    if len(state_counts) != J or J < 1 or any(q < 1 for q in state_counts):
        raise ValueError(f"invalid_argument:orders:J={J}:Q={state_counts}")
    if symmetric and obs.K != obs.N:
        raise ValueError("invalid_argument:symmetric_requires_square_slices")
    if int(warmup_iters) < 0:
        raise ValueError(f"invalid_argument:warmup_iters_negative:{warmup_iters}")
    features = features_from_observations(obs, kind="slices")
    if J > features.size:
        raise ValueError(f"invalid_argument:more_groups_than_slices:{J}>{features.size}")
    groups = kmeans(features, J, seed=seed)
    centroids = []
    for j, q in enumerate(state_counts):
        rows = np.flatnonzero(groups.labels == j)
        member = features.subset(rows) if rows.size >= q else features
        if rows.size < q:
            debug(f"[init] group {j} has {rows.size} slices for {q} states; clustering all slices")
        centroids.append(kmeans(member, q, seed=seed + 1 + j).centroids)
    dictionaries = {}
    for method in DICTIONARY_METHODS:
        pairs = [_dictionary_from_centroids(c, obs.K, obs.N, symmetric, method=method) for c in centroids]
        dictionaries[method] = ([x for x, _ in pairs], [y for _, y in pairs])

    tallies = np.ones((obs.I, J))
    for (t, i), label in zip(features.keys, groups.labels):
        tallies[i, label] += 1.0
    base_C = tallies / tallies.sum(axis=1, keepdims=True)
    A = [np.full((q, q), 1.0 / q) for q in state_counts]

    rng = np.random.default_rng(seed)
    options = [base_C]
    for _ in range(max(0, candidates - 1)):
        options.append(project_rows(np.stack([rng.dirichlet(10.0 * row) for row in base_C])))
    cfg = replace(fit_cfg or FitConfig(), max_iters=int(warmup_iters), symmetric=symmetric)
    scored = []
    for method, (X, Y) in dictionaries.items():
        for idx, C in enumerate(options):
            score, params = _score_candidate(obs, ModelParams.from_arrays(X=X, Y=Y, C=C, A=A), cfg)
            debug(f"[init] dictionaries={method} candidate={idx} mse_after_{warmup_iters}_iterations={score:.6e}")
            scored.append((score, len(scored), params))
    best = min(scored, key=lambda row: (row[0], row[1]))
    if verbose:
        progress(f"[init] J={J} Q={state_counts} best_mse={best[0]:.6e} of {len(scored)} candidates")
    return best[2]
