"""Synthetic IV data: two treatment equations and eight structural functions.

Treatment equations (``s(x)`` is ``x_1`` for DGP 1 and
``x_1 1{x_1 > 0} + x_2 1{x_2 < 0}`` for DGP 2)::

    gamma_weights="instrument":  w = gamma s(x) + (1 - gamma) e + zeta
    gamma_weights="confounder":  w = (1 - gamma) s(x) + gamma e + zeta
    y = h0(w) + e + delta

The default ``"instrument"`` makes larger gamma a stronger instrument. The noise constants
``N(0, 2)`` and ``N(0, 0.1)`` are read as standard deviations by default
(``scale_convention="std"``) or as variances (``"variance"``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from agmm.data import Dataset, Rng

FUNCTIONS = ("2dpoly", "3dpoly", "abs", "linear", "sigmoid", "sin", "step", "rand_pw")

E_SCALE = 2.0
X_SCALE = 2.0
NOISE_SCALE = 0.1


@dataclass(frozen=True)
class TrueFn:
    """Structural function h0.

    For ``rand_pw`` the pieces are ``a_i w + b_i`` on ``[tau_{i-1}, tau_i]``;
    the first and last pieces extend linearly beyond ``tau_0`` and ``tau_5``.
    """

    kind: str
    taus: tuple[float, ...] = ()
    slopes: tuple[float, ...] = ()
    intercepts: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in FUNCTIONS:
            raise ValueError(f"unknown true function {self.kind!r}")
        if self.kind == "rand_pw":
            if len(self.taus) != len(self.slopes) + 1 or len(self.slopes) != len(self.intercepts):
                raise ValueError("rand_pw needs len(taus) == len(slopes) + 1 == len(intercepts) + 1")
            if any(b <= a for a, b in zip(self.taus[:-1], self.taus[1:])):
                raise ValueError("rand_pw breakpoints must be strictly increasing")

    def __call__(self, w):
        return eval_true_fn(self, w)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "taus": list(self.taus),
            "slopes": list(self.slopes),
            "intercepts": list(self.intercepts),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrueFn":
        return cls(
            obj["kind"],
            tuple(obj.get("taus", ())),
            tuple(obj.get("slopes", ())),
            tuple(obj.get("intercepts", ())),
        )


def piecewise_linear(taus, slopes, b1: float) -> TrueFn:
    """Continuous piecewise-linear function from knots, slopes and the first
    intercept; later intercepts are solved from continuity at each knot."""
    intercepts = [float(b1)]
    for i in range(1, len(slopes)):
        tau = taus[i]
        intercepts.append((slopes[i - 1] - slopes[i]) * tau + intercepts[-1])
    return TrueFn(
        "rand_pw",
        tuple(float(t) for t in taus),
        tuple(float(a) for a in slopes),
        tuple(intercepts),
    )


def sample_rand_pw(rng: Rng, n_pieces: int = 5) -> TrueFn:
    # interior knots: distinct multiples of 0.1 strictly inside (-2, 2)
    picked: set[int] = set()
    while len(picked) < n_pieces - 1:
        picked.add(int(rng.integers(39)) - 19)
    taus = [-2.0] + [k / 10 for k in sorted(picked)] + [2.0]
    slopes = rng.uniform(n_pieces, -4.0, 4.0)
    b1 = rng.uniform(low=-1.0, high=1.0)
    return piecewise_linear(taus, slopes, b1)


def eval_true_fn(fn: TrueFn, w):
    w = np.asarray(w, dtype=np.float64)
    kind = fn.kind
    if kind == "2dpoly":
        out = -1.5 * w + 0.9 * w**2
    elif kind == "3dpoly":
        out = -1.5 * w + 0.9 * w**2 + w**3
    elif kind == "abs":
        out = np.abs(w)
    elif kind == "linear":
        out = w.copy()
    elif kind == "sigmoid":
        out = 2.0 / (1.0 + np.exp(-2.0 * w))
    elif kind == "sin":
        out = np.sin(w)
    elif kind == "step":
        out = 1.0 + 1.5 * (w >= 0)
    else:
        taus = np.asarray(fn.taus)
        piece = np.clip(np.searchsorted(taus, w, side="right") - 1, 0, len(fn.slopes) - 1)
        out = np.asarray(fn.slopes)[piece] * w + np.asarray(fn.intercepts)[piece]
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DgpConfig:
    which: int = 1
    gamma: float = 0.5
    d: int = 1
    n: int = 1000
    true_fn: str = "linear"
    seed: int = 0
    noise_scale: float = NOISE_SCALE
    scale_convention: str = "std"
    gamma_weights: str = "instrument"

    def __post_init__(self):
        if self.scale_convention not in ("std", "variance"):
            raise ValueError("scale_convention must be 'std' or 'variance'")
        if self.gamma_weights not in ("instrument", "confounder"):
            raise ValueError("gamma_weights must be 'instrument' or 'confounder'")
        if self.which not in (1, 2):
            raise ValueError(f"dgp must be 1 or 2, got {self.which}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"instrument strength must be in [0, 1], got {self.gamma}")
        if self.d < 1:
            raise ValueError("need at least one instrument")
        if self.which == 2 and self.d < 2:
            raise ValueError("DGP 2 needs d >= 2 instruments")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.true_fn not in FUNCTIONS:
            raise ValueError(f"unknown true function {self.true_fn!r}")


@dataclass
class Noise:
    e: np.ndarray
    x: np.ndarray
    zeta: np.ndarray
    delta: np.ndarray


def draw_noise(cfg: DgpConfig, rng: Rng) -> Noise:
    """Every component comes from its own sub-stream; instrument column ``j``
    uses stream ``x{j}`` so columns do not depend on ``d``."""
    n = cfg.n

    def sd(c: float) -> float:
        return c if cfg.scale_convention == "std" else float(np.sqrt(c))

    e = rng.spawn("e").normal(n, 0.0, sd(E_SCALE))
    zeta = rng.spawn("zeta").normal(n, 0.0, sd(cfg.noise_scale))
    delta = rng.spawn("delta").normal(n, 0.0, sd(cfg.noise_scale))
    x = np.column_stack(
        [rng.spawn(f"x{j}").normal(n, 0.0, sd(X_SCALE)) for j in range(cfg.d)]
    )
    return Noise(e, x, zeta, delta)


def compose(
    which: int, gamma: float, h0: TrueFn, noise: Noise, gamma_weights: str = "instrument"
) -> tuple[np.ndarray, np.ndarray]:
    x1 = noise.x[:, 0]
    if which == 1:
        signal = x1
    else:
        x2 = noise.x[:, 1]
        signal = x1 * (x1 > 0) + x2 * (x2 < 0)
    a = gamma if gamma_weights == "instrument" else 1.0 - gamma
    w = a * signal + (1.0 - a) * noise.e + noise.zeta
    y = eval_true_fn(h0, w) + noise.e + noise.delta
    return w, y


def make_true_fn(kind: str, rng: Rng) -> TrueFn:
    return sample_rand_pw(rng) if kind == "rand_pw" else TrueFn(kind)


@dataclass
class Generated:
    data: Dataset
    true_fn: TrueFn
    noise: Noise = field(repr=False)


def generate(cfg: DgpConfig, rng: Rng | None = None, true_fn: TrueFn | None = None) -> Generated:
    """Draw a dataset; ``rng`` defaults to ``Rng(cfg.seed)``."""
    rng = Rng(cfg.seed) if rng is None else rng
    h0 = true_fn if true_fn is not None else make_true_fn(cfg.true_fn, rng.spawn("h0"))
    noise = draw_noise(cfg, rng.spawn("noise"))
    w, y = compose(cfg.which, cfg.gamma, h0, noise, cfg.gamma_weights)
    ds = Dataset(y, w, noise.x, meta={"dgp": cfg.which, "gamma": cfg.gamma})
    return Generated(ds, h0, noise)


def save_true_fn(fn: TrueFn, path) -> None:
    with open(path, "w") as fh:
        json.dump(fn.to_json(), fh)
