"""Simultaneous no-regret training: Adam for the modeler, Hedge for the critic,
and gradient "jitter" on the shared kernel projection.

The moment function is the IV residual ``rho(z; h) = y - h(w)``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from agmm.critics import (
    V_CLIP,
    CriticSet,
    eval_critics,
    gen_forest_kernels,
    gen_kmeans_gaussian,
    gen_lipschitz_grid,
    gen_poly_sieve,
    gen_random_points,
    jitter_gradient_from_residuals,
)
from agmm.data import Dataset, Rng, sample_batch
from agmm.mlp import (
    AdamState,
    MlpModel,
    ProjectionSpec,
    adam_step,
    adam_update,
    forward,
    forward_vjp,
    init_params,
)

log = logging.getLogger(__name__)

CRITIC_KINDS = ("kmeans", "random_points", "forest_uniform", "forest_gaussian", "sieve", "grid")


def residuals(model, ds: Dataset) -> np.ndarray:
    """IV moment ``y - h(w)`` for every row."""
    return ds.y - predict(model, ds.w)


def predict(model, w) -> np.ndarray:
    if isinstance(model, MlpModel):
        return forward(model, np.asarray(w, dtype=np.float64).reshape(-1))
    return model.predict(w)


def moments(model, cs: CriticSet, ds: Dataset) -> np.ndarray:
    """``E_n[rho f]`` for every critic."""
    return residuals(model, ds) @ eval_critics(cs, ds.x) / ds.n


def empirical_loss(model, cs: CriticSet, ds: Dataset) -> float:
    if ds.n < 1:
        raise ValueError("empirical loss of an empty dataset")
    return float(cs.weights @ moments(model, cs, ds) ** 2)


def critic_utilities(model, cs: CriticSet, batch: Dataset) -> np.ndarray:
    """Squared empirical moment per critic (biased for the population value)."""
    if batch.n < 1:
        raise ValueError("critic utilities need a nonempty batch")
    return moments(model, cs, batch) ** 2


def equilibrium_gap(model, cs: CriticSet, ds: Dataset) -> float:
    """Worst in-sample moment violation ``max_f |E_n[rho f]|``."""
    if ds.n < 1:
        raise ValueError("equilibrium gap of an empty dataset")
    return float(np.max(np.abs(moments(model, cs, ds))))


def _modeler_grad(model: MlpModel, cs: CriticSet, batch1: Dataset, batch2: Dataset):
    r1 = residuals(model, batch1)
    m1 = r1 @ eval_critics(cs, batch1.x) / batch1.n
    F2 = eval_critics(cs, batch2.x)
    # grad_theta rho = -grad_theta h
    cot = -(2.0 / batch2.n) * (F2 @ (cs.weights * m1))
    h2, grad = forward_vjp(model, batch2.w, cot)
    return grad, r1, batch2.y - h2


def modeler_gradient(model: MlpModel, cs: CriticSet, batch1: Dataset, batch2: Dataset) -> np.ndarray:
    """Two-batch estimate ``2 sum_f s_f E_1[rho f] E_2[f grad_theta rho]``."""
    if batch1.n < 1 or batch2.n < 1:
        raise ValueError("modeler gradient needs nonempty batches")
    return _modeler_grad(model, cs, batch1, batch2)[0]


def hedge_step(weights, utilities, eta_c: float) -> np.ndarray:
    """Multiplicative-weights update ``w_f * exp(eta_c * U_f)``, renormalised
    in log space. Zero weights stay zero."""
    weights = np.asarray(weights, dtype=np.float64)
    utilities = np.asarray(utilities, dtype=np.float64)
    if not np.all(np.isfinite(utilities)):
        raise ValueError("hedge utilities must be finite")
    with np.errstate(divide="ignore"):
        logw = np.log(weights) + eta_c * utilities
    alive = np.isfinite(logw)
    out = np.zeros_like(weights)
    if not alive.any():
        raise ValueError("hedge weights have no support")
    shifted = logw[alive] - logw[alive].max()
    p = np.exp(shifted)
    out[alive] = p / p.sum()
    return out


def sigma_entropy(weights) -> float:
    w = np.asarray(weights)
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())


def theoretical_rates(B: float, L: float, H: float, K: float, T: int) -> tuple[float, float, float]:
    """Step sizes and the approximate-equilibrium bound for convex modelers.

    ``K`` is the number of test functions. Returns ``(eta_m, eta_c, eps)``.
    """
    if K < 2:
        raise ValueError("need at least two test functions (log K must be positive)")
    if min(B, L, H, T) <= 0:
        raise ValueError("B, L, H and T must be positive")
    logk = math.log(K)
    eta_m = B / (L * math.sqrt(2 * T))
    eta_c = math.sqrt(logk) / (H**2 * math.sqrt(2 * T))
    eps = (H**2 * math.sqrt(2 * logk) + B * L * math.sqrt(2)) / math.sqrt(T)
    return eta_m, eta_c, eps


@dataclass
class CriticConfig:
    kind: str = "kmeans"
    K: int = 50
    r: int = 50
    k_proj: int = 2
    bandwidth_factor: float = 2.0
    n_trees: int = 5
    min_leaf: int = 50
    max_depth: int | None = None
    sieve_degree: int = 5
    sieve_scale: float | None = None
    grid_h: float = 0.5
    kmeans_iters: int = 100

    def __post_init__(self):
        if self.kind not in CRITIC_KINDS:
            raise ValueError(f"unknown critic generator {self.kind!r}; choose from {CRITIC_KINDS}")

    def build(self, ds: Dataset, rng: Rng) -> CriticSet:
        if self.kind == "kmeans":
            return gen_kmeans_gaussian(
                ds, self.K, self.r, rng, self.k_proj, self.kmeans_iters, self.bandwidth_factor
            )
        if self.kind == "random_points":
            return gen_random_points(ds, self.K, self.r, rng, self.k_proj, self.bandwidth_factor)
        if self.kind.startswith("forest"):
            return gen_forest_kernels(
                ds, self.n_trees, self.min_leaf, rng,
                variant=self.kind.split("_")[1], max_depth=self.max_depth, k_proj=self.k_proj,
            )
        if self.kind == "sieve":
            scale = self.sieve_scale or float(np.max(np.abs(ds.x[:, 0])))
            return gen_poly_sieve(self.sieve_degree, scale, ds.d)
        domain = list(zip(ds.x.min(axis=0), ds.x.max(axis=0)))
        return gen_lipschitz_grid(domain, self.grid_h)


@dataclass
class TrainConfig:
    T: int = 400
    B_m: int = 100
    B_c: int | None = None  # None: critic utilities on the full sample
    eta_m: float = 0.007
    eta_c: float = 0.11
    eta_w: float = 0.007
    M: int = 50
    layer_widths: tuple[int, ...] = (1, 100, 100, 100, 1)
    critic: CriticConfig = field(default_factory=CriticConfig)
    jitter: bool = True
    proj_radius: float | None = None
    averaging: str = "function"
    seed: int = 0
    record_sigma: bool = False

    def __post_init__(self):
        if isinstance(self.critic, dict):
            self.critic = CriticConfig(**self.critic)
        self.layer_widths = tuple(self.layer_widths)
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.B_m < 1 or (self.B_c is not None and self.B_c < 1):
            raise ValueError("batch sizes must be >= 1")
        if min(self.eta_m, self.eta_c, self.eta_w) <= 0:
            raise ValueError("step sizes must be positive")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.averaging not in ("function", "parameter"):
            raise ValueError("averaging must be 'function' or 'parameter'")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layer_widths"] = list(self.layer_widths)
        return out


class AveragedModel:
    """Uniform mixture of snapshot networks: ``h(w) = mean_j h_j(w)``."""

    def __init__(self, widths, thetas):
        self.widths = tuple(widths)
        self.thetas = np.asarray(thetas)
        self._models = [MlpModel(self.widths, t) for t in self.thetas]

    def predict(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        return np.mean([forward(m, w) for m in self._models], axis=0)

    def __call__(self, w):
        return self.predict(w)

    def to_json(self) -> dict:
        return {"widths": list(self.widths), "snapshots": [m.to_json() for m in self._models]}


@dataclass
class TrainResult:
    model_avg: object
    model_final: MlpModel
    model_best: MlpModel
    traces: dict[str, np.ndarray]
    snapshot_steps: np.ndarray
    best_step: int
    critics_initial: CriticSet
    critics_final: CriticSet
    sigma_history: np.ndarray | None = None

    def write_traces(self, path) -> None:
        write_traces_csv(self.traces, path)


TRACE_COLUMNS = ("iter", "loss", "max_violation", "sigma_entropy")


def write_traces_csv(traces: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for i in range(len(traces["loss"])):
            writer.writerow(
                [
                    i + 1,
                    f"{traces['loss'][i]:.17g}",
                    f"{traces['max_violation'][i]:.17g}",
                    f"{traces['sigma_entropy'][i]:.17g}",
                ]
            )


def train(ds: Dataset, cfg: TrainConfig, critics: CriticSet | None = None) -> TrainResult:
    """Run the adversarial GMM dynamics for ``cfg.T`` steps.

    Iterate ``t`` (1-based) is the model after the ``t``-th update. Trace row
    ``t`` reports the full-sample loss, worst violation and critic entropy at
    the state the ``t``-th update starts from.
    """
    rng = Rng(cfg.seed)
    if critics is None:
        critics = cfg.critic.build(ds, rng.spawn("critics"))
    cs = critics.copy()
    initial = critics.copy()
    model = init_params(cfg.layer_widths, rng.spawn("init"))
    proj = ProjectionSpec(cfg.proj_radius)
    opt = AdamState.zeros(model.p)
    jitter_on = cfg.jitter and cs.kind == "gaussian" and cs.trainable_V
    opt_V = AdamState.zeros(cs.V.size) if jitter_on else None

    batch_rng = rng.spawn("batches")
    n_snap = min(cfg.M, cfg.T)  # short runs average every iterate
    snap_steps = np.sort(rng.spawn("snapshots").choice_without_replacement(cfg.T, n_snap) + 1)
    snap_set = set(int(s) for s in snap_steps)
    snapshots = []
    theta_sum = np.zeros(model.p)

    F_full = None if jitter_on else eval_critics(cs, ds.x)
    loss = np.empty(cfg.T)
    gap = np.empty(cfg.T)
    entropy = np.empty(cfg.T)
    sigma_hist = np.empty((cfg.T + 1, len(cs))) if cfg.record_sigma else None
    best_gap, best_theta, best_step = np.inf, model.theta.copy(), 0

    for t in range(1, cfg.T + 1):
        b1 = sample_batch(ds, batch_rng, cfg.B_m)
        b2 = sample_batch(ds, batch_rng, cfg.B_m)
        b3 = None if cfg.B_c is None else sample_batch(ds, batch_rng, cfg.B_c)

        Ff = eval_critics(cs, ds.x) if F_full is None else F_full
        full_m = residuals(model, ds) @ Ff / ds.n
        util = full_m**2 if b3 is None else critic_utilities(model, cs, b3)
        loss[t - 1] = float(cs.weights @ full_m**2)
        gap[t - 1] = float(np.max(np.abs(full_m)))
        entropy[t - 1] = sigma_entropy(cs.weights)
        if not np.isfinite(loss[t - 1]):
            raise FloatingPointError(f"non-finite loss at iteration {t}")
        if sigma_hist is not None:
            sigma_hist[t - 1] = cs.weights
        if t > 1 and gap[t - 1] < best_gap:
            best_gap, best_theta, best_step = gap[t - 1], model.theta.copy(), t - 1

        grad, r1, r2 = _modeler_grad(model, cs, b1, b2)
        jit = (
            jitter_gradient_from_residuals(cs, r1, b1.x, r2, b2.x) if jitter_on else None
        )

        model, opt = adam_step(model, opt, grad, cfg.eta_m, proj)
        cs.weights = hedge_step(cs.weights, util, cfg.eta_c)
        if jit is not None:
            # ascent: Adam descends on the negated gradient
            V = adam_update(cs.V.ravel(), opt_V, -jit.ravel(), cfg.eta_w)
            cs.V = np.clip(V, -V_CLIP, V_CLIP).reshape(cs.V.shape)

        if t in snap_set:
            if cfg.averaging == "function":
                snapshots.append(model.theta.copy())
            else:
                theta_sum += model.theta

    final_gap = equilibrium_gap(model, cs, ds)
    if final_gap < best_gap:
        best_theta, best_step = model.theta.copy(), cfg.T
    if sigma_hist is not None:
        sigma_hist[cfg.T] = cs.weights

    if cfg.averaging == "function":
        model_avg = AveragedModel(model.widths, snapshots)
    else:
        model_avg = MlpModel(model.widths, theta_sum / n_snap)

    return TrainResult(
        model_avg=model_avg,
        model_final=model,
        model_best=MlpModel(model.widths, best_theta),
        traces={"loss": loss, "max_violation": gap, "sigma_entropy": entropy},
        snapshot_steps=snap_steps,
        best_step=best_step,
        critics_initial=initial,
        critics_final=cs,
        sigma_history=sigma_hist,
    )


def with_overrides(cfg: TrainConfig, **kwargs) -> TrainConfig:
    critic = kwargs.pop("critic", None)
    if isinstance(critic, dict):
        critic = replace(cfg.critic, **critic)
    if critic is not None:
        kwargs["critic"] = critic
    return replace(cfg, **kwargs)
