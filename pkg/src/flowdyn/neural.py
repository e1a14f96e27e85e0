"""Dense feed-forward networks with exact reverse-mode gradients and Adam.

Float64 throughout: the training problems here are small enough that clean
gradient checks and bit-reproducible runs are worth more than speed.  Hidden
layers are ReLU, the output layer is identity.  Weights are stored as
(fan_in, fan_out) matrices so a batch forward is a chain of x @ W + b.

Networks are treated as immutable during evaluation; only adam_step mutates
parameters, and the training loops in flowmatch are single-threaded.
"""

from dataclasses import dataclass

import numpy as np

from .dataio import (FORMAT_VERSION, _read_array, _read_exact, _read_u32,
                     _write_array, _write_u32, atomic_write, read_header,
                     read_scaler_block, write_header, write_scaler_block)

WEIGHTS_MAGIC = b"FMNN"
WEIGHTS_TAG = b"WNET"


@dataclass
class Mlp:
    layer_dims: tuple
    weights: list
    biases: list

    def n_params(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self):
        return Mlp(self.layer_dims, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])


@dataclass
class GradBundle:
    loss: float
    d_weights: list
    d_biases: list


@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m_weights: list
    v_weights: list
    m_biases: list
    v_biases: list


def mlp_init(layer_dims, seed) -> Mlp:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases, seeded."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    if any(d < 1 for d in dims):
        raise ValueError(f"zero-width layer in {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(dims, weights, biases)


def _check_input(net: Mlp, x):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.layer_dims[0]:
        raise ValueError(
            f"input shape {x.shape} incompatible with input dim {net.layer_dims[0]}")
    return x, squeeze


def forward(net: Mlp, x):
    """Batch or single-vector forward pass; output shape mirrors the input."""
    x, squeeze = _check_input(net, x)
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h[0] if squeeze else h


def forward_cached(net: Mlp, x):
    """Forward pass keeping per-layer activations for backward()."""
    x, _ = _check_input(net, x)
    acts = [x]
    last = len(net.weights) - 1
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def backward(net: Mlp, acts, d_out):
    """Reverse-mode pass from an output cotangent.

    Returns (d_weights, d_biases, d_input); d_input is needed when a frozen
    downstream network backpropagates into this one's output.
    """
    d_out = np.asarray(d_out, dtype=float)
    if d_out.shape != acts[-1].shape:
        raise ValueError(f"cotangent shape {d_out.shape} != output {acts[-1].shape}")
    n_layers = len(net.weights)
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    delta = d_out
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            delta = delta * (acts[i + 1] > 0.0)
        d_weights[i] = acts[i].T @ delta
        d_biases[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
    return d_weights, d_biases, delta


def mse_grads(net: Mlp, inputs, targets) -> GradBundle:
    """Loss = mean over the batch of the summed squared output error."""
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("inputs must be a non-empty batch")
    if targets.shape != (inputs.shape[0], net.layer_dims[-1]):
        raise ValueError(f"target shape {targets.shape} does not match batch")
    out, acts = forward_cached(net, inputs)
    err = out - targets
    loss = float(np.mean(np.sum(err ** 2, axis=1)))
    d_weights, d_biases, _ = backward(net, acts, 2.0 * err / inputs.shape[0])
    return GradBundle(loss, d_weights, d_biases)


def adam_init(net: Mlp, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(lr, beta1, beta2, eps, 0,
                     [np.zeros_like(w) for w in net.weights],
                     [np.zeros_like(w) for w in net.weights],
                     [np.zeros_like(b) for b in net.biases],
                     [np.zeros_like(b) for b in net.biases])


def adam_step(net: Mlp, grads: GradBundle, state: AdamState):
    """Standard bias-corrected Adam; mutates net and state in place."""
    if len(grads.d_weights) != len(net.weights):
        raise ValueError("gradient layer count does not match network")
    state.step += 1
    t = state.step
    scale = state.lr * np.sqrt(1.0 - state.beta2 ** t) / (1.0 - state.beta1 ** t)
    for params, gs, ms, vs in ((net.weights, grads.d_weights,
                                state.m_weights, state.v_weights),
                               (net.biases, grads.d_biases,
                                state.m_biases, state.v_biases)):
        for p, g, m, v in zip(params, gs, ms, vs):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != param {p.shape}")
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p -= scale * m / (np.sqrt(v) + state.eps)
    return net, state


def save_weights(path, net: Mlp, scaler=None):
    """Weight container: magic FMNN, version, dims, row-major float64, scaler."""
    with atomic_write(path) as f:
        write_mlp_block(f, net, scaler)


def load_weights(path):
    """Returns (net, scaler); scaler is None when the file carries none."""
    with open(path, "rb") as f:
        return read_mlp_block(f)


def write_mlp_block(f, net: Mlp, scaler=None):
    write_header(f, WEIGHTS_TAG, magic=WEIGHTS_MAGIC)
    _write_u32(f, len(net.layer_dims))
    for d in net.layer_dims:
        _write_u32(f, d)
    for w, b in zip(net.weights, net.biases):
        _write_array(f, w)
        _write_array(f, b)
    write_scaler_block(f, scaler)


def read_mlp_block(f):
    read_header(f, WEIGHTS_TAG, magic=WEIGHTS_MAGIC)
    n_dims = _read_u32(f)
    if n_dims < 2:
        raise ValueError(f"weight file lists {n_dims} dims, need at least 2")
    dims = tuple(_read_u32(f) for _ in range(n_dims))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(_read_array(f, (fan_in, fan_out)))
        biases.append(_read_array(f, (fan_out,)))
    return Mlp(dims, weights, biases), read_scaler_block(f)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_layer: int
    worst_kind: str
    worst_index: int


def grad_check(net: Mlp, inputs, targets, h=1e-5) -> GradCheckResult:
    """Central-difference check of mse_grads over every parameter.

    Relative error per parameter is |analytic - numeric| / max(|a|+|n|, 1e-8).
    Intended for small nets; cost is two forward passes per parameter.
    """
    if net.n_params() > 10_000:
        raise ValueError("grad_check is for small nets (<= 1e4 params)")
    analytic = mse_grads(net, inputs, targets)

    def loss_at():
        inputs_arr = np.asarray(inputs, dtype=float)
        out = forward(net, inputs_arr)
        return float(np.mean(np.sum((out - targets) ** 2, axis=1)))

    worst = GradCheckResult(0.0, -1, "", -1)
    for kind, params, grads in (("weight", net.weights, analytic.d_weights),
                                ("bias", net.biases, analytic.d_biases)):
        for li, (p, g) in enumerate(zip(params, grads)):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_at()
                flat[k] = orig - h
                down = loss_at()
                flat[k] = orig
                numeric = (up - down) / (2.0 * h)
                rel = abs(gflat[k] - numeric) / max(abs(gflat[k]) + abs(numeric), 1e-8)
                if rel > worst.max_rel_error:
                    worst = GradCheckResult(rel, li, kind, k)
    return worst
