"""Feed-forward ReLU network on a scalar input, with exact reverse-mode
gradients and an Adam optimiser.

Parameters live in one flat vector ``theta``. Layer ``l`` (mapping
``widths[l] -> widths[l+1]``) contributes its weight matrix of shape
``(widths[l+1], widths[l])`` in row-major order followed by its bias vector;
layers are laid out in order. ReLU is applied after every layer except the
last, and its derivative at exactly 0 is taken to be 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from agmm.data import Rng


def _layer_slices(widths):
    slices = []
    offset = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w_sl = slice(offset, offset + fan_in * fan_out)
        offset += fan_in * fan_out
        b_sl = slice(offset, offset + fan_out)
        offset += fan_out
        slices.append((w_sl, b_sl, fan_in, fan_out))
    return slices, offset


def n_params(widths) -> int:
    return _layer_slices(tuple(widths))[1]


@dataclass
class MlpModel:
    widths: tuple[int, ...]
    theta: np.ndarray

    def __post_init__(self):
        self.widths = tuple(int(v) for v in self.widths)
        if len(self.widths) < 2 or any(v < 1 for v in self.widths):
            raise ValueError(f"invalid layer widths {self.widths}")
        if self.widths[0] != 1 or self.widths[-1] != 1:
            raise ValueError("network must map a scalar to a scalar")
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        self._slices, p = _layer_slices(self.widths)
        if self.theta.shape != (p,):
            raise ValueError(f"theta has shape {self.theta.shape}, expected ({p},)")

    @property
    def p(self) -> int:
        return self.theta.size

    def layers(self):
        """Yield ``(W, b)`` views into ``theta`` for each layer."""
        for w_sl, b_sl, fan_in, fan_out in self._slices:
            yield self.theta[w_sl].reshape(fan_out, fan_in), self.theta[b_sl]

    def copy(self) -> "MlpModel":
        return MlpModel(self.widths, self.theta.copy())

    def __call__(self, w):
        return forward(self, w)

    def to_json(self) -> dict:
        return {
            "widths": list(self.widths),
            "layers": [
                {"weight": W.tolist(), "bias": b.tolist()} for W, b in self.layers()
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MlpModel":
        parts = []
        for layer in obj["layers"]:
            parts.append(np.asarray(layer["weight"], dtype=np.float64).ravel())
            parts.append(np.asarray(layer["bias"], dtype=np.float64).ravel())
        return cls(tuple(obj["widths"]), np.concatenate(parts))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def init_params(layer_widths, rng: Rng) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    widths = tuple(int(v) for v in layer_widths)
    slices, p = _layer_slices(widths)
    theta = np.zeros(p)
    for w_sl, _, fan_in, fan_out in slices:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        theta[w_sl] = rng.uniform(fan_in * fan_out, -s, s)
    return MlpModel(widths, theta)


def _forward_cache(model: MlpModel, w):
    a = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    acts = [a]
    pre = []
    layers = list(model.layers())
    for i, (W, b) in enumerate(layers):
        z = a @ W.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(a)
    return layers, pre, acts


def forward(model: MlpModel, w):
    """h_theta(w) for a scalar or a batch of treatments."""
    scalar = np.ndim(w) == 0
    out = _forward_cache(model, w)[2][-1][:, 0]
    return float(out[0]) if scalar else out


def forward_vjp(model: MlpModel, w_batch, cotangent) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(h(w_batch), sum_i cotangent_i * grad_theta h(w_i))``.

    This is the workhorse for training: it never materialises the Jacobian.
    """
    layers, pre, acts = _forward_cache(model, w_batch)
    out = acts[-1][:, 0]
    delta = np.asarray(cotangent, dtype=np.float64).reshape(-1, 1)
    grad = np.empty(model.p)
    for i in range(len(layers) - 1, -1, -1):
        w_sl, b_sl, _, _ = model._slices[i]
        grad[w_sl] = (delta.T @ acts[i]).ravel()
        grad[b_sl] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0]) * (pre[i - 1] > 0.0)
    return out, grad


def grad_theta_forward(model: MlpModel, w_batch) -> np.ndarray:
    """Jacobian of ``h(w_i)`` with respect to theta, one row per input."""
    layers, pre, acts = _forward_cache(model, w_batch)
    batch = acts[0].shape[0]
    jac = np.empty((batch, model.p))
    delta = np.ones((batch, 1))
    for i in range(len(layers) - 1, -1, -1):
        w_sl, b_sl, _, _ = model._slices[i]
        jac[:, w_sl] = np.einsum("bo,bi->boi", delta, acts[i]).reshape(batch, -1)
        jac[:, b_sl] = delta
        if i > 0:
            delta = (delta @ layers[i][0]) * (pre[i - 1] > 0.0)
    return jac


@dataclass(frozen=True)
class ProjectionSpec:
    """Euclidean ball ``||theta||_2 <= radius``; ``radius=None`` is unbounded."""

    radius: float | None = None

    def __post_init__(self):
        if self.radius is not None and not self.radius > 0:
            raise ValueError(f"projection radius must be positive, got {self.radius}")

    def project(self, theta: np.ndarray) -> np.ndarray:
        if self.radius is None:
            return theta
        norm = np.linalg.norm(theta)
        if norm <= self.radius:
            return theta
        return theta * (self.radius / norm)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, p: int, **kwargs) -> "AdamState":
        return cls(np.zeros(p), np.zeros(p), **kwargs)


def _check_finite(grad: np.ndarray) -> None:
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise FloatingPointError(f"non-finite gradient at coordinate {bad}: {grad[bad]}")


def adam_update(
    params: np.ndarray, state: AdamState, grad: np.ndarray, lr: float
) -> np.ndarray:
    """One bias-corrected Adam descent step on a bare parameter array.

    ``state`` is updated in place; the new parameters are returned.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient shape {grad.shape} != state shape {state.m.shape}")
    _check_finite(grad.ravel())
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def adam_step(
    model: MlpModel,
    state: AdamState,
    grad,
    lr: float,
    proj: ProjectionSpec = ProjectionSpec(),
) -> tuple[MlpModel, AdamState]:
    theta = adam_update(model.theta, state, grad, lr)
    return MlpModel(model.widths, proj.project(theta)), state
