"""Test functions for the critic.

A :class:`CriticSet` holds one homogeneous family of ``K`` test functions, a
probability vector over them and, for Gaussian families, the shared
projection ``V`` that defines the kernel norm ``||x||_W^2 = ||V x||^2``
(i.e. ``W = V^T V``). Gaussian kernel ``f`` with centre ``c`` and bandwidth
``s`` evaluates to ``(2 pi s^2)^(-1/(2d)) * exp(-||x - c||_W^2 / (2 s^2))``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from agmm.data import Dataset, Rng
from agmm.mlp import forward

BANDWIDTH_FLOOR = 1e-6
V_CLIP = 10.0
GRID_CAP = 10**6

KINDS = ("gaussian", "box", "grid", "sieve")


@dataclass(frozen=True)
class GaussianKernelFn:
    center: tuple[float, ...]
    sigma: float


@dataclass(frozen=True)
class UniformGridKernelFn:
    center: tuple[float, ...]
    h_bw: float


@dataclass(frozen=True)
class SievePolyFn:
    degree: int
    scale: float


@dataclass(frozen=True)
class TreeLeafKernelFn:
    lower: tuple[float, ...]
    upper: tuple[float, ...]


@dataclass
class CriticSet:
    """A family of test functions plus the critic's mixed strategy over it.

    Only the fields relevant to ``kind`` are populated:

    * ``gaussian``: ``centers`` (K, d), ``sigmas`` (K,), ``V`` (k, d)
    * ``grid``: ``centers`` (K, d), ``h_bw``; indicator of ``||x - c||_inf <= h_bw``
    * ``box``: ``lower``/``upper`` (K, d); indicator of ``lower < x <= upper``
    * ``sieve``: ``degrees`` (K,), ``scale``; ``(x_1 / scale) ** degree``
    """

    kind: str
    weights: np.ndarray
    d: int
    centers: np.ndarray | None = None
    sigmas: np.ndarray | None = None
    V: np.ndarray | None = None
    trainable_V: bool = False
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    h_bw: float | None = None
    degrees: np.ndarray | None = None
    scale: float | None = None
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown critic kind {self.kind!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("critic weights must lie on the probability simplex")

    def __len__(self) -> int:
        return self.weights.size

    @property
    def W(self) -> np.ndarray | None:
        return None if self.V is None else self.V.T @ self.V

    def copy(self) -> "CriticSet":
        kw = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            kw[name] = val.copy() if isinstance(val, (np.ndarray, dict)) else val
        return CriticSet(**kw)

    def permuted(self, order) -> "CriticSet":
        """Same family with the test functions reordered by ``order``."""
        order = np.asarray(order)
        out = self.copy()
        out.weights = out.weights[order]
        for name in ("centers", "sigmas", "lower", "upper", "degrees"):
            val = getattr(out, name)
            if val is not None:
                setattr(out, name, val[order])
        return out

    def functions(self) -> list:
        if self.kind == "gaussian":
            return [
                GaussianKernelFn(tuple(c), float(s))
                for c, s in zip(self.centers, self.sigmas)
            ]
        if self.kind == "grid":
            return [UniformGridKernelFn(tuple(c), float(self.h_bw)) for c in self.centers]
        if self.kind == "box":
            return [
                TreeLeafKernelFn(tuple(lo), tuple(hi))
                for lo, hi in zip(self.lower, self.upper)
            ]
        return [SievePolyFn(int(k), float(self.scale)) for k in self.degrees]

    def to_json(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "kind": self.kind,
            "source": self.source,
            "d": self.d,
            "weights": arr(self.weights),
            "centers": arr(self.centers),
            "sigmas": arr(self.sigmas),
            "V": arr(self.V),
            "trainable_V": self.trainable_V,
            "lower": arr(self.lower),
            "upper": arr(self.upper),
            "h_bw": self.h_bw,
            "degrees": arr(self.degrees),
            "scale": self.scale,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CriticSet":
        def arr(key, dtype=np.float64):
            val = obj.get(key)
            return None if val is None else np.asarray(val, dtype=dtype)

        return cls(
            kind=obj["kind"],
            weights=arr("weights"),
            d=int(obj["d"]),
            centers=arr("centers"),
            sigmas=arr("sigmas"),
            V=arr("V"),
            trainable_V=bool(obj.get("trainable_V", False)),
            lower=arr("lower"),
            upper=arr("upper"),
            h_bw=obj.get("h_bw"),
            degrees=arr("degrees", np.int64),
            scale=obj.get("scale"),
            source=obj.get("source", ""),
        )


def uniform_weights(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


def init_projection(d: int, rng: Rng, k_proj: int = 2) -> np.ndarray:
    """Initial ``V``: identity when ``d == 1``; otherwise uniform entries
    rescaled so that ``trace(V^T V) == d``."""
    if d == 1:
        return np.ones((1, 1))
    bound = 1.0 / math.sqrt(d)
    V = rng.uniform((k_proj, d), -bound, bound)
    return V * math.sqrt(d / np.sum(V * V))


def _w_sqdist(x: np.ndarray, centers: np.ndarray, V: np.ndarray) -> np.ndarray:
    # direct differences so coincident points give exactly 0
    proj = (x[:, None, :] - centers[None, :, :]) @ V.T
    return np.sum(proj * proj, axis=2)


def gaussian_normalizer(sigmas: np.ndarray, d: int) -> np.ndarray:
    # exponent -1/(2d), not the usual -d/2; kept as the algorithm states it
    return (2.0 * np.pi * sigmas**2) ** (-1.0 / (2.0 * d))


def eval_critics(cs: CriticSet, x) -> np.ndarray:
    """Matrix of ``f_k(x_j)`` with shape ``(len(x), K)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[1] != cs.d:
        raise ValueError(f"x has {x.shape[1]} columns, critic set expects {cs.d}")
    if cs.kind == "gaussian":
        sq = _w_sqdist(x, cs.centers, cs.V)
        return gaussian_normalizer(cs.sigmas, cs.d) * np.exp(-sq / (2.0 * cs.sigmas**2))
    if cs.kind == "grid":
        dist = np.max(np.abs(x[:, None, :] - cs.centers[None, :, :]), axis=2)
        return (dist <= cs.h_bw).astype(np.float64)
    if cs.kind == "box":
        inside = (x[:, None, :] > cs.lower[None]) & (x[:, None, :] <= cs.upper[None])
        return np.all(inside, axis=2).astype(np.float64)
    return (x[:, :1] / cs.scale) ** cs.degrees[None, :].astype(np.float64)


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective_trace: list[float]
    n_iter: int


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = np.sum(a * a, 1)[:, None] - 2.0 * a @ b.T + np.sum(b * b, 1)[None, :]
    return np.maximum(sq, 0.0)


def _kmeanspp(points: np.ndarray, K: int, rng: Rng) -> np.ndarray:
    n = points.shape[0]
    idx = [rng.integers(n)]
    d2 = _sqdist(points, points[idx[0]][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            nxt = rng.integers(n)
        else:
            cdf = np.cumsum(d2) / total
            nxt = int(np.searchsorted(cdf, rng.uniform(), side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        d2 = np.minimum(d2, _sqdist(points, points[nxt][None])[:, 0])
    return points[idx].copy()


def kmeans(points, K: int, rng: Rng, max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    n = points.shape[0]
    if K < 1 or n < K:
        raise ValueError(f"k-means needs 1 <= K <= n, got K={K}, n={n}")
    centroids = _kmeanspp(points, K, rng)
    assign = np.argmin(_sqdist(points, centroids), axis=1)
    trace = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        for k in range(K):
            members = assign == k
            if members.any():
                centroids[k] = points[members].mean(axis=0)
        d2 = _sqdist(points, centroids)
        new_assign = np.argmin(d2, axis=1)
        # empty clusters: move to the worst-served point
        for k in range(K):
            if not np.any(new_assign == k):
                own = d2[np.arange(n), new_assign]
                far = int(np.argmax(own))
                centroids[k] = points[far]
                d2[:, k] = _sqdist(points, centroids[k][None])[:, 0]
                new_assign = np.argmin(d2, axis=1)
        trace.append(float(np.sum(d2[np.arange(n), new_assign])))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    for k in range(K):
        members = assign == k
        if members.any():
            centroids[k] = points[members].mean(axis=0)
    return KMeansResult(centroids, assign, trace, n_iter)


def _bandwidths(
    x: np.ndarray, centers: np.ndarray, V: np.ndarray, r: int, factor: float
) -> np.ndarray:
    dist = np.sqrt(_w_sqdist(x, centers, V))
    sigmas = np.empty(centers.shape[0])
    for k in range(centers.shape[0]):
        nonzero = np.sort(dist[:, k][dist[:, k] > 0.0])
        if nonzero.size == 0:
            sigmas[k] = BANDWIDTH_FLOOR
        else:
            sigmas[k] = max(factor * nonzero[min(r, nonzero.size) - 1], BANDWIDTH_FLOOR)
    return sigmas


def gen_kmeans_gaussian(
    ds: Dataset, K: int, r: int, rng: Rng, k_proj: int = 2, max_iters: int = 100,
    bandwidth_factor: float = 2.0,
) -> CriticSet:
    """Gaussian kernels at k-means centroids of the instruments.

    Bandwidth is ``bandwidth_factor`` times the W-distance from the centroid to
    its ``r``-th closest data point (zero distances skipped).
    """
    if r < 1 or r > ds.n:
        raise ValueError(f"radius r={r} must be in [1, n={ds.n}]")
    if K > ds.n:
        raise ValueError(f"K={K} exceeds sample size n={ds.n}")
    V = init_projection(ds.d, rng.spawn("V"), k_proj)
    km = kmeans(ds.x, K, rng.spawn("kmeans"), max_iters)
    sigmas = _bandwidths(ds.x, km.centroids, V, r, bandwidth_factor)
    return CriticSet(
        kind="gaussian",
        weights=uniform_weights(K),
        d=ds.d,
        centers=km.centroids,
        sigmas=sigmas,
        V=V,
        trainable_V=ds.d > 1,
        source="kmeans",
    )


def gen_random_points(
    ds: Dataset, K: int, r: int, rng: Rng, k_proj: int = 2,
    bandwidth_factor: float = 2.0,
) -> CriticSet:
    """Gaussian kernels centred at ``K`` distinct random data points."""
    if K > ds.n:
        raise ValueError(f"K={K} exceeds sample size n={ds.n}")
    if r < 1 or r > ds.n:
        raise ValueError(f"radius r={r} must be in [1, n={ds.n}]")
    V = init_projection(ds.d, rng.spawn("V"), k_proj)
    idx = rng.spawn("centers").choice_without_replacement(ds.n, K)
    centers = ds.x[np.sort(idx)].copy()
    sigmas = _bandwidths(ds.x, centers, V, r, bandwidth_factor)
    return CriticSet(
        kind="gaussian",
        weights=uniform_weights(K),
        d=ds.d,
        centers=centers,
        sigmas=sigmas,
        V=V,
        trainable_V=ds.d > 1,
        source="random_points",
    )


def _leaf_boxes(tree, d: int) -> list[tuple[np.ndarray, np.ndarray]]:
    t = tree.tree_
    boxes = []
    stack = [(0, np.full(d, -np.inf), np.full(d, np.inf))]
    while stack:
        node, lo, hi = stack.pop()
        left, right = t.children_left[node], t.children_right[node]
        if left == -1:
            boxes.append((lo, hi))
            continue
        feat, thr = t.feature[node], t.threshold[node]
        # sklearn sends x[feat] <= thr to the left child
        hi_left = hi.copy()
        hi_left[feat] = min(hi[feat], thr)
        lo_right = lo.copy()
        lo_right[feat] = max(lo[feat], thr)
        stack.append((right, lo_right, hi.copy()))
        stack.append((left, lo.copy(), hi_left))
    return boxes


def gen_forest_kernels(
    ds: Dataset,
    n_trees: int,
    min_leaf: int,
    rng: Rng,
    variant: str = "uniform",
    max_depth: int | None = None,
    bootstrap: bool = True,
    k_proj: int = 2,
) -> CriticSet:
    """One test function per leaf of a random forest regressing w on x."""
    from sklearn.tree import DecisionTreeRegressor

    if variant not in ("uniform", "gaussian"):
        raise ValueError(f"unknown forest kernel variant {variant!r}")
    if n_trees < 1 or min_leaf < 1:
        raise ValueError("n_trees and min_leaf must be >= 1")
    if ds.n < min_leaf:
        raise ValueError(f"n={ds.n} too small for min_leaf={min_leaf}")
    max_features = math.ceil(math.sqrt(ds.d))
    lower, upper, per_tree = [], [], []
    for t in range(n_trees):
        trng = rng.spawn(("tree", t))
        idx = trng.integers(ds.n, ds.n) if bootstrap else np.arange(ds.n)
        tree = DecisionTreeRegressor(
            min_samples_leaf=min_leaf,
            max_depth=max_depth,
            max_features=max_features,
            random_state=trng.integers(2**31 - 1),
        )
        tree.fit(ds.x[idx], ds.w[idx])
        boxes = _leaf_boxes(tree, ds.d)
        per_tree.append(len(boxes))
        for lo, hi in boxes:
            lower.append(lo)
            upper.append(hi)
    lower, upper = np.array(lower), np.array(upper)
    K = len(lower)
    if variant == "uniform":
        return CriticSet(
            kind="box", weights=uniform_weights(K), d=ds.d, lower=lower,
            upper=upper, source="forest_uniform", meta={"leaves_per_tree": per_tree},
        )
    V = init_projection(ds.d, rng.spawn("V"), k_proj)
    member = np.all(
        (ds.x[:, None, :] > lower[None]) & (ds.x[:, None, :] <= upper[None]), axis=2
    )
    centers = np.empty((K, ds.d))
    sigmas = np.empty(K)
    for k in range(K):
        pts = ds.x[member[:, k]]
        centers[k] = pts.mean(axis=0)
        far = np.sqrt(_w_sqdist(pts, centers[k][None], V)).max()
        sigmas[k] = max(far, BANDWIDTH_FLOOR)
    return CriticSet(
        kind="gaussian", weights=uniform_weights(K), d=ds.d, centers=centers,
        sigmas=sigmas, V=V, trainable_V=ds.d > 1, source="forest_gaussian",
        meta={"lower": lower, "upper": upper, "leaves_per_tree": per_tree},
    )


def gen_poly_sieve(K_sieve: int, scale: float = 1.0, d: int = 1) -> CriticSet:
    """Powers ``(x_1/scale)^k`` for ``k = 0..K_sieve``."""
    if K_sieve < 0:
        raise ValueError("sieve degree must be >= 0")
    if not scale > 0:
        raise ValueError("sieve scale must be positive")
    return CriticSet(
        kind="sieve",
        weights=uniform_weights(K_sieve + 1),
        d=d,
        degrees=np.arange(K_sieve + 1),
        scale=float(scale),
        source="sieve",
    )


def gen_lipschitz_grid(domain, h_bw: float, cap: int = GRID_CAP) -> CriticSet:
    """Uniform kernels of half-width ``h_bw`` on the grid of step ``h_bw``
    covering the box ``domain = [(lo, hi), ...]``."""
    if not h_bw > 0:
        raise ValueError("grid bandwidth must be positive")
    domain = [(float(lo), float(hi)) for lo, hi in domain]
    axes = []
    for lo, hi in domain:
        if not (np.isfinite(lo) and np.isfinite(hi) and hi >= lo):
            raise ValueError(f"invalid domain interval ({lo}, {hi})")
        steps = math.floor((hi - lo) / h_bw + 1e-9)
        axes.append(lo + h_bw * np.arange(steps + 1))
    count = math.prod(len(a) for a in axes)
    if count > cap:
        raise ValueError(f"grid would have {count} test functions, cap is {cap}")
    centers = np.array(list(itertools.product(*axes)), dtype=np.float64)
    return CriticSet(
        kind="grid",
        weights=uniform_weights(count),
        d=len(domain),
        centers=centers,
        h_bw=float(h_bw),
        source="lipschitz_grid",
    )


@dataclass(frozen=True)
class GammaBoundParams:
    lipschitz: float
    density_floor: float
    d: int

    def __post_init__(self):
        if not (self.lipschitz > 0 and self.density_floor > 0 and self.d >= 1):
            raise ValueError("gamma bound parameters must be positive")


def gamma_bound(params: GammaBoundParams, eps: float) -> tuple[float, float]:
    """Balanced grid bandwidth and the resulting conditional-violation bound.

    Returns ``h = (eps/(lambda mu))^(1/(d+1))`` and
    ``gamma = 2 lambda^(d/(d+1)) (eps/mu)^(1/(d+1))``; at this ``h`` the two
    terms of ``h lambda + eps/(mu h^d)`` are equal.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    lam, mu, d = params.lipschitz, params.density_floor, params.d
    h = (eps / (lam * mu)) ** (1.0 / (d + 1))
    gamma = 2.0 * lam ** (d / (d + 1)) * (eps / mu) ** (1.0 / (d + 1))
    return h, gamma


def gamma_two_term(params: GammaBoundParams, eps: float, h: float) -> float:
    return h * params.lipschitz + eps / (params.density_floor * h**params.d)


def jitter_gradient(cs: CriticSet, model, batch1: Dataset, batch2: Dataset) -> np.ndarray:
    """Ascent direction for ``sum_f sigma_f (E[rho f])^2`` with respect to V,
    where ``rho = y - model(w)``. Zeros when V is frozen (``d == 1``)."""
    r1 = batch1.y - forward(model, batch1.w)
    r2 = batch2.y - forward(model, batch2.w)
    return jitter_gradient_from_residuals(cs, r1, batch1.x, r2, batch2.x)


def jitter_gradient_from_residuals(cs: CriticSet, resid1, x1, resid2, x2) -> np.ndarray:
    """Two-batch estimate ``2 sum_f sigma_f E_1[rho f] * E_2[rho grad_V f]``."""
    if cs.kind != "gaussian" or not cs.trainable_V:
        return np.zeros_like(cs.V) if cs.V is not None else np.zeros((0, 0))
    resid1 = np.asarray(resid1, dtype=np.float64)
    resid2 = np.asarray(resid2, dtype=np.float64)
    m1 = resid1 @ eval_critics(cs, x1) / resid1.size
    F2 = eval_critics(cs, x2)
    # d f / d V = -f / s^2 * V (x - c)(x - c)^T
    coef = (resid2[:, None] * F2) * (cs.weights * m1 / cs.sigmas**2)[None, :]
    row = coef.sum(axis=1)
    col = coef.sum(axis=0)
    C = cs.centers
    M = (
        (x2 * row[:, None]).T @ x2
        - x2.T @ coef @ C
        - C.T @ coef.T @ x2
        + (C * col[:, None]).T @ C
    )
    return -(2.0 / resid2.size) * cs.V @ M
