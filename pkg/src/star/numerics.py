"""Dense float64 layers with hand-written reverse-mode gradients.

Conventions
-----------
* Weights are ``(out_width, in_width)`` matrices; a "vector" is a 1-d array.
  Every forward/backward also accepts a batch: a 2-d array whose rows are
  independent samples.
* Backward passes take the forward input (the caller keeps it, there is no
  hidden layer state) and *accumulate* into the ``grad_*`` buffers, so the
  gradients of several episodes can be summed in place.
* Everything is float64; the finite-difference gate needs the headroom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, check_dims

PROB_FLOOR = 1e-12  # -log(p) clamp inside cross_entropy


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass
class ParamGroup:
    """A named weight/bias pair with matching gradient accumulators."""

    name: str
    weight: np.ndarray
    bias: np.ndarray
    grad_weight: np.ndarray = field(default=None)  # type: ignore[assignment]
    grad_bias: np.ndarray = field(default=None)    # type: ignore[assignment]

    def __post_init__(self):
        self.weight = _as_f64(self.weight)
        self.bias = _as_f64(self.bias)
        if self.grad_weight is None:
            self.grad_weight = np.zeros_like(self.weight)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)
        if self.grad_weight.shape != self.weight.shape or self.grad_bias.shape != self.bias.shape:
            raise DimensionError(f"param group {self.name}: grad buffers must match parameter shapes")

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def zero_grad(self):
        self.grad_weight.fill(0.0)
        self.grad_bias.fill(0.0)

    def grad_view(self) -> "ParamGroup":
        """Share the weights but own fresh zero gradient buffers.

        Lets worker threads accumulate privately before an ordered reduction.
        """
        return ParamGroup(self.name, self.weight, self.bias,
                          np.zeros_like(self.weight), np.zeros_like(self.bias))

    def add_grads_from(self, other: "ParamGroup"):
        self.grad_weight += other.grad_weight
        self.grad_bias += other.grad_bias


def xavier_param(name: str, out_width: int, in_width: int, rng: np.random.Generator) -> ParamGroup:
    """Uniform [-r, r] with r = sqrt(6 / (fan_in + fan_out)); zero bias."""
    r = math.sqrt(6.0 / (in_width + out_width))
    weight = rng.uniform(-r, r, size=(out_width, in_width))
    return ParamGroup(name, weight, np.zeros(out_width))


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def linear_forward(p: ParamGroup, x: np.ndarray) -> np.ndarray:
    """weight @ x + bias (row-batched when x is 2-d)."""
    x = _as_f64(x)
    check_dims("linear_forward", x.shape[-1] == p.in_width,
               f"param {p.name} expects input width {p.in_width}, got {x.shape}")
    return x @ p.weight.T + p.bias


def linear_backward(p: ParamGroup, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate parameter grads for y = W x + b and return dL/dx.

    Leading dims of `x`/`grad_out` are treated as independent samples.
    """
    x = _as_f64(x)
    grad_out = _as_f64(grad_out)
    check_dims("linear_backward", grad_out.shape[-1] == p.out_width and x.shape[-1] == p.in_width
               and grad_out.shape[:-1] == x.shape[:-1],
               f"param {p.name}: x {x.shape}, grad_out {grad_out.shape}, "
               f"weight {p.weight.shape}")
    if x.ndim == 1:
        p.grad_weight += np.outer(grad_out, x)
        p.grad_bias += grad_out
    else:
        g2 = grad_out.reshape(-1, p.out_width)
        x2 = x.reshape(-1, p.in_width)
        p.grad_weight += g2.T @ x2
        p.grad_bias += g2.sum(axis=0)
    return grad_out @ p.weight


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Mask the upstream gradient where the pre-activation was <= 0."""
    return np.where(_as_f64(x) > 0.0, grad_out, 0.0)


# ---------------------------------------------------------------------------
# softmax and cross-entropy
# ---------------------------------------------------------------------------

def softmax(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis; strictly positive output."""
    x = _as_f64(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of softmax: p * (g - <p, g>)."""
    probs = _as_f64(probs)
    grad_out = _as_f64(grad_out)
    inner = (probs * grad_out).sum(axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def cross_entropy(pred: np.ndarray, label: int) -> float:
    """-ln(pred[label]); pred[label] is floored at 1e-12 to avoid -ln(0)."""
    pred = _as_f64(pred)
    if not 0 <= label < pred.shape[-1]:
        raise IndexError(f"cross_entropy: label {label} out of range for {pred.shape[-1]} classes")
    return -math.log(max(float(pred[label]), PROB_FLOOR))


def cross_entropy_backward(pred: np.ndarray, label: int) -> np.ndarray:
    """Gradient of -ln(pred[label]) w.r.t. pred, with the same floor."""
    pred = _as_f64(pred)
    if not 0 <= label < pred.shape[-1]:
        raise IndexError(f"cross_entropy: label {label} out of range for {pred.shape[-1]} classes")
    grad = np.zeros_like(pred)
    grad[label] = -1.0 / max(float(pred[label]), PROB_FLOOR)
    return grad


def cross_entropy_mean(preds: np.ndarray, labels) -> float:
    """Batch cross-entropy averaged over samples."""
    preds = _as_f64(preds)
    return sum(cross_entropy(p, int(y)) for p, y in zip(preds, labels)) / preds.shape[0]


def cross_entropy_mean_backward(preds: np.ndarray, labels) -> np.ndarray:
    preds = _as_f64(preds)
    grads = np.zeros_like(preds)
    n = preds.shape[0]
    for i, y in enumerate(labels):
        grads[i] = cross_entropy_backward(preds[i], int(y)) / n
    return grads


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, core_width: int, batch: int | None = None) -> "LstmState":
        shape = (core_width,) if batch is None else (batch, core_width)
        return cls(np.zeros(shape), np.zeros(shape))


def lstm_param(name: str, input_width: int, core_width: int, rng: np.random.Generator) -> ParamGroup:
    """Fused gate parameters, rows stacked [input, forget, candidate, output].

    Each gate reads concat(x, h_prev). Forget-gate bias starts at 1.0 so the
    cell initially retains state across the episode.
    """
    p = xavier_param(name, 4 * core_width, input_width + core_width, rng)
    p.bias[core_width:2 * core_width] = 1.0
    return p


def _sigmoid(z):
    # tanh form: stable at both ends, one vectorized ufunc
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_cell_forward(p: ParamGroup, x: np.ndarray, state: LstmState):
    """One LSTM cell update. Returns (new_state, cache) for the backward pass."""
    x = _as_f64(x)
    h_prev, c_prev = _as_f64(state.hidden), _as_f64(state.cell)
    core = h_prev.shape[-1]
    check_dims("lstm_cell_forward", x.shape[-1] + core == p.in_width,
               f"param {p.name} expects input width {p.in_width - core}, got {x.shape}; core {core}")
    check_dims("lstm_cell_forward", 4 * core == p.out_width,
               f"param {p.name} gate rows {p.out_width} do not match core width {core}")
    xi = np.concatenate([x, h_prev], axis=-1)
    gates = linear_forward(p, xi)
    i = _sigmoid(gates[..., :core])
    f = _sigmoid(gates[..., core:2 * core])
    g = np.tanh(gates[..., 2 * core:3 * core])
    o = _sigmoid(gates[..., 3 * core:])
    c = i * g + f * c_prev
    tc = np.tanh(c)
    h = o * tc
    cache = (xi, i, f, g, o, c_prev, tc)
    return LstmState(h, c), cache


def lstm_cell_backward(p: ParamGroup, cache, grad_h: np.ndarray, grad_c: np.ndarray):
    """Backward through one cell update.

    Returns (grad_x, grad_state_prev); parameter grads accumulate into `p`.
    """
    xi, i, f, g, o, c_prev, tc = cache
    core = i.shape[-1]
    grad_h = _as_f64(grad_h)
    grad_c = _as_f64(grad_c) + grad_h * o * (1.0 - tc * tc)
    d_o = grad_h * tc
    d_i = grad_c * g
    d_g = grad_c * i
    d_f = grad_c * c_prev
    d_gates = np.concatenate([
        d_i * i * (1.0 - i),
        d_f * f * (1.0 - f),
        d_g * (1.0 - g * g),
        d_o * o * (1.0 - o),
    ], axis=-1)
    d_xi = linear_backward(p, xi, d_gates)
    in_width = p.in_width - core
    grad_x = d_xi[..., :in_width]
    grad_state = LstmState(d_xi[..., in_width:], grad_c * f)
    return grad_x, grad_state


# ---------------------------------------------------------------------------
# 1 x M convolution (per-row filters spanning the full input width)
# ---------------------------------------------------------------------------

def conv_1xm_forward(p: ParamGroup, inp: np.ndarray) -> np.ndarray:
    """out[..., r, f] = dot(row_r, filter_f) + bias_f.

    `inp` is (rows, width) or batched (batch, rows, width); filters are
    (n_filters, width), so each filter reads one full row per output cell.
    """
    inp = _as_f64(inp)
    check_dims("conv_1xm_forward", inp.shape[-1] == p.in_width,
               f"filters {p.name} span width {p.in_width}, input rows have width {inp.shape[-1]}")
    return inp @ p.weight.T + p.bias


def conv_1xm_backward(p: ParamGroup, inp: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    inp = _as_f64(inp)
    grad_out = _as_f64(grad_out)
    flat_in = inp.reshape(-1, inp.shape[-1])
    flat_g = grad_out.reshape(-1, grad_out.shape[-1])
    p.grad_weight += flat_g.T @ flat_in
    p.grad_bias += flat_g.sum(axis=0)
    return grad_out @ p.weight


# ---------------------------------------------------------------------------
# optimizer step
# ---------------------------------------------------------------------------

def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad_weight * p.grad_weight))
        total += float(np.sum(p.grad_bias * p.grad_bias))
    return math.sqrt(total)


def clip_gradients(params, max_norm: float) -> float:
    """Clip each group's gradient norm to `max_norm` independently.

    Per-group clipping keeps one noisy group (the policy heads' score-function
    spikes, typically) from scaling down everyone else's gradients. Returns
    the pre-clip global norm.
    """
    norm = global_grad_norm(params)
    if max_norm <= 0:
        return norm
    for p in params:
        g = math.sqrt(float(np.sum(p.grad_weight * p.grad_weight))
                      + float(np.sum(p.grad_bias * p.grad_bias)))
        if g > max_norm:
            scale = max_norm / g
            p.grad_weight *= scale
            p.grad_bias *= scale
    return norm


def sgd_step(params, learning_rate: float):
    for p in params:
        p.weight -= learning_rate * p.grad_weight
        p.bias -= learning_rate * p.grad_bias


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(f, params, epsilon: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    `f` is a zero-argument callable returning a scalar loss; calling it must
    run forward+backward and accumulate gradients into `params`. Any sampling
    inside `f` has to be frozen so repeated calls see the same stochastic
    choices. Returns max over coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    f()
    analytic = [(p.grad_weight.copy(), p.grad_bias.copy()) for p in params]

    worst = 0.0
    for p, grads in zip(params, analytic):
        for arr, grad, kind in ((p.weight, grads[0], "weight"), (p.bias, grads[1], "bias")):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for j in range(flat.size):
                saved = flat[j]
                flat[j] = saved + epsilon
                loss_plus = float(f())
                flat[j] = saved - epsilon
                loss_minus = float(f())
                flat[j] = saved
                numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
                analytic_j = float(gflat[j])
                if not (math.isfinite(analytic_j) and math.isfinite(numeric)):
                    raise ArithmeticError(
                        f"grad_check: non-finite gradient at {p.name}.{kind}[{j}] "
                        f"(analytic={analytic_j}, numeric={numeric})")
                rel = abs(analytic_j - numeric) / max(1.0, abs(analytic_j), abs(numeric))
                if rel > worst:
                    worst = rel
    return worst
