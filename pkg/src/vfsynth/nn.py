"""Dense-network primitives with exact first- and second-order gradients.

Networks are plain stacks of affine layers and pointwise activations. Besides
the usual forward/backward passes this module provides the second-order path
needed by the WGAN gradient-penalty term: the penalty is a function of the
input gradient of the critic, so its parameter gradient requires
differentiating through the recorded reverse pass (double backprop). Only
dense + pointwise layers are supported, which keeps that path closed-form:
relu/leaky-relu have zero second derivative away from the kink, tanh has
``phi'' = -2 tanh (1 - tanh^2)``.

Matrices are float64 ndarrays with rows as batch samples; layer weights have
shape (in, out) so a layer computes ``h @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

__all__ = [
    "Layer",
    "Mlp",
    "GradSet",
    "Tape",
    "AdamState",
    "init_mlp",
    "forward",
    "backward",
    "gradient_penalty",
    "interpolate",
    "gumbel_softmax",
    "adam_step",
    "stack",
    "split_grads",
]

ACTIVATIONS = ("identity", "relu", "leaky_relu", "tanh")

# guard inside the sqrt of the gradient norm; keeps the penalty differentiable
# at zero-gradient rows and stays far below all test tolerances
_NORM_GUARD = 1e-12


@dataclass(frozen=True)
class Layer:
    w: np.ndarray  # (in, out)
    b: np.ndarray  # (out,)
    activation: str = "identity"
    slope: float = 0.2  # leaky_relu negative slope

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ValueError("layer weight/bias shapes are inconsistent")
        if not (np.isfinite(self.w).all() and np.isfinite(self.b).all()):
            raise ValueError("layer parameters must be finite")


@dataclass(frozen=True)
class Mlp:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.w.shape[1] != nxt.w.shape[0]:
                raise ValueError("consecutive layer widths do not chain")

    @property
    def in_width(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1].w.shape[1]

    def n_params(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)


@dataclass
class GradSet:
    """Per-layer (dW, db) mirror of an Mlp's parameters."""

    dw: list[np.ndarray]
    db: list[np.ndarray]

    @staticmethod
    def zeros_like(mlp: Mlp) -> "GradSet":
        return GradSet(
            [np.zeros_like(l.w) for l in mlp.layers],
            [np.zeros_like(l.b) for l in mlp.layers],
        )

    def add_(self, other: "GradSet", scale: float = 1.0) -> "GradSet":
        for i in range(len(self.dw)):
            self.dw[i] += scale * other.dw[i]
            self.db[i] += scale * other.db[i]
        return self

    def scale_(self, scale: float) -> "GradSet":
        for i in range(len(self.dw)):
            self.dw[i] *= scale
            self.db[i] *= scale
        return self


@dataclass
class Tape:
    """Recorded forward intermediates: layer inputs and pre-activations."""

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    output: np.ndarray


def _act(kind: str, slope: float, a: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return a
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "leaky_relu":
        return np.where(a > 0.0, a, slope * a)
    return np.tanh(a)


def _act_deriv(kind: str, slope: float, a: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(a)
    if kind == "relu":
        return (a > 0.0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(a > 0.0, 1.0, slope)
    t = np.tanh(a)
    return 1.0 - t * t


def _act_second_deriv(kind: str, slope: float, a: np.ndarray) -> np.ndarray | None:
    # zero for the piecewise-linear activations (taken as 0 at the kink)
    if kind in ("identity", "relu", "leaky_relu"):
        return None
    t = np.tanh(a)
    return -2.0 * t * (1.0 - t * t)


def init_mlp(
    widths: list[int],
    rng: RngStream,
    hidden_activation: str = "leaky_relu",
    out_activation: str = "identity",
    slope: float = 0.2,
) -> Mlp:
    """He-scaled random MLP: widths = [in, hidden..., out]."""
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ValueError(f"invalid widths {widths}")
    layers = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        w = rng.normal(fan_in, fan_out) * np.sqrt(2.0 / fan_in)
        b = np.zeros(fan_out)
        act = out_activation if i == len(widths) - 2 else hidden_activation
        layers.append(Layer(w, b, act, slope))
    return Mlp(tuple(layers))


def forward(mlp: Mlp, batch: np.ndarray) -> tuple[np.ndarray, Tape]:
    if batch.ndim != 2 or batch.shape[1] != mlp.in_width:
        raise ValueError(
            f"batch width {batch.shape} does not match network input {mlp.in_width}"
        )
    h = batch
    inputs, pre = [], []
    for layer in mlp.layers:
        inputs.append(h)
        a = h @ layer.w + layer.b
        pre.append(a)
        h = _act(layer.activation, layer.slope, a)
    return h, Tape(inputs, pre, h)


def backward(
    mlp: Mlp, tape: Tape, output_grad: np.ndarray
) -> tuple[GradSet, np.ndarray]:
    """Exact gradients of the scalar whose output-gradient is ``output_grad``.

    Returns (parameter gradients, gradient w.r.t. the forward input).
    """
    if output_grad.shape != tape.output.shape:
        raise ValueError("output_grad shape does not match the taped output")
    if len(tape.pre) != len(mlp.layers) or any(
        t.shape[1] != l.w.shape[1] for t, l in zip(tape.pre, mlp.layers)
    ):
        raise ValueError("stale tape: recorded shapes do not match the network")
    grads = GradSet([None] * len(mlp.layers), [None] * len(mlp.layers))
    delta = output_grad
    for l in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[l]
        g = delta * _act_deriv(layer.activation, layer.slope, tape.pre[l])
        grads.dw[l] = tape.inputs[l].T @ g
        grads.db[l] = g.sum(axis=0)
        delta = g @ layer.w.T
    return grads, delta


def gradient_penalty(
    disc: Mlp, x_hat: np.ndarray, lambda_gp: float
) -> tuple[float, GradSet]:
    """WGAN gradient penalty and its exact parameter gradients.

    penalty = lambda_gp * mean_rows (||d disc / d x_hat||_2 - 1)^2.

    The parameter gradient differentiates through the reverse pass that
    produced the input gradient (double backprop over the taped layers).
    """
    if lambda_gp < 0:
        raise ValueError("lambda_gp must be >= 0")
    if disc.out_width != 1:
        raise ValueError("gradient penalty requires a scalar critic")
    n_layers = len(disc.layers)
    rows = x_hat.shape[0]

    out, tape = forward(disc, x_hat)

    # reverse pass, recording the per-layer cotangents it produces
    deltas = [None] * n_layers  # deltas[l] feeds layer l (cotangent on h_l)
    gs = [None] * n_layers  # cotangent on the pre-activation a_l
    phi1 = [None] * n_layers
    delta = np.ones_like(out)
    for l in range(n_layers - 1, -1, -1):
        layer = disc.layers[l]
        deltas[l] = delta
        phi1[l] = _act_deriv(layer.activation, layer.slope, tape.pre[l])
        gs[l] = delta * phi1[l]
        delta = gs[l] @ layer.w.T
    u = delta  # (rows, in): per-row input gradient of the critic

    norms = np.sqrt(np.sum(u * u, axis=1) + _NORM_GUARD)
    penalty = lambda_gp * float(np.mean((norms - 1.0) ** 2))

    # cotangent on u of the penalty scalar
    v = (2.0 * lambda_gp / rows) * ((norms - 1.0) / norms)[:, None] * u

    grads = GradSet.zeros_like(disc)

    # differentiate the reverse pass (walk it in forward order)
    p = v  # cotangent on delta_{l-1}
    e = [None] * n_layers  # cotangent on a_l arriving through phi'
    for l in range(n_layers):
        layer = disc.layers[l]
        q = p @ layer.w  # cotangent on gs[l]
        grads.dw[l] += p.T @ gs[l]
        phi2 = _act_second_deriv(layer.activation, layer.slope, tape.pre[l])
        if phi2 is not None:
            e[l] = q * deltas[l] * phi2
        p = q * phi1[l]  # cotangent on deltas[l]
    # p is now the cotangent on the constant seed vector: discard

    # propagate the a_l cotangents back through the forward pass
    r = None  # cotangent on h_l
    for l in range(n_layers - 1, -1, -1):
        layer = disc.layers[l]
        t = r * phi1[l] if r is not None else None
        if e[l] is not None:
            t = e[l] if t is None else t + e[l]
        if t is None:
            r = None
            continue
        grads.dw[l] += tape.inputs[l].T @ t
        grads.db[l] += t.sum(axis=0)
        r = t @ layer.w.T
    return penalty, grads


def interpolate(
    x: np.ndarray,
    x_tilde: np.ndarray,
    rng: RngStream | None = None,
    beta: np.ndarray | None = None,
) -> np.ndarray:
    """Per-row convex combination ``beta*x + (1-beta)*x_tilde``, beta ~ U[0,1)."""
    if x.shape != x_tilde.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_tilde.shape}")
    if beta is None:
        if rng is None:
            raise ValueError("need either rng or explicit beta")
        beta = rng.uniform(x.shape[0])
    beta = np.asarray(beta, dtype=np.float64).reshape(-1, 1)
    return beta * x + (1.0 - beta) * x_tilde


def gumbel_softmax(
    logits: np.ndarray, temperature: float, rng: RngStream | None
) -> np.ndarray:
    """Row-wise softmax((logits + Gumbel noise) / temperature).

    Pass ``rng=None`` to disable the noise (plain tempered softmax).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = logits
    if rng is not None:
        u = rng.uniform(*logits.shape)
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        z = logits + (-np.log(-np.log(u)))
    z = z / temperature
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


@dataclass
class AdamState:
    """First/second moment estimates; mutated by :func:`adam_step`."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8

    @staticmethod
    def for_mlp(mlp: Mlp, beta1: float = 0.5, beta2: float = 0.9) -> "AdamState":
        return AdamState(
            [np.zeros_like(l.w) for l in mlp.layers],
            [np.zeros_like(l.w) for l in mlp.layers],
            [np.zeros_like(l.b) for l in mlp.layers],
            [np.zeros_like(l.b) for l in mlp.layers],
            beta1=beta1,
            beta2=beta2,
        )


def adam_step(
    mlp: Mlp, grads: GradSet, state: AdamState, eta: float
) -> tuple[Mlp, AdamState]:
    """One Adam update with bias correction; returns the updated network."""
    if len(grads.dw) != len(mlp.layers):
        raise ValueError("gradient set does not match the network")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new_layers = []
    for i, layer in enumerate(mlp.layers):
        state.m_w[i] = b1 * state.m_w[i] + (1.0 - b1) * grads.dw[i]
        state.v_w[i] = b2 * state.v_w[i] + (1.0 - b2) * grads.dw[i] ** 2
        state.m_b[i] = b1 * state.m_b[i] + (1.0 - b1) * grads.db[i]
        state.v_b[i] = b2 * state.v_b[i] + (1.0 - b2) * grads.db[i] ** 2
        w = layer.w - eta * (state.m_w[i] / c1) / (np.sqrt(state.v_w[i] / c2) + state.eps)
        b = layer.b - eta * (state.m_b[i] / c1) / (np.sqrt(state.v_b[i] / c2) + state.eps)
        new_layers.append(Layer(w, b, layer.activation, layer.slope))
    return Mlp(tuple(new_layers)), state


def stack(*parts: Mlp) -> Mlp:
    """View several networks as one (layers share the same arrays)."""
    layers = []
    for part in parts:
        layers.extend(part.layers)
    return Mlp(tuple(layers))


def split_grads(grads: GradSet, sizes: list[int]) -> list[GradSet]:
    """Split a stacked network's GradSet back into per-part GradSets."""
    if sum(sizes) != len(grads.dw):
        raise ValueError("split sizes do not cover the gradient set")
    out, at = [], 0
    for s in sizes:
        out.append(GradSet(grads.dw[at : at + s], grads.db[at : at + s]))
        at += s
    return out
