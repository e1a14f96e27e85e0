"""Conditional rectified-flow training and Euler-integrated control sampling.

Four inverse-model variants share one trainer:

  rf            flow over the actuation, conditioned on (x_t, x_next)
  rf_fwd        rf plus a consistency penalty through a frozen forward surrogate
  rf_physical   flow over the residual u - u_phys, conditioned on
                (x_t, x_next, u_phys)
  mlp_baseline  direct regression (x_t, x_next) -> u

Everything learns in normalized coordinates; the quasi-static prior is
computed in physical units and normalized with the actuation statistics
before entering the condition vector.  Training is single-threaded and
deterministic: the minibatch permutation and the per-batch (z, tau) draws
come from one seeded stream, and the consistency term reuses the flow-
matching draws, so rf_fwd with lambda_cons=0 consumes the identical stream
as rf and reproduces it bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from . import neural, rod_sim
from .dataio import (Dataset, FormatError, Scaler, _read_exact, _read_f64,
                     _read_u32, _write_f64, _write_u32, atomic_write,
                     read_table_block, write_table_block)
from .neural import GradBundle, Mlp
from .rod_sim import StaticTable, TaskState

VARIANTS = ("rf", "rf_fwd", "rf_physical", "mlp_baseline")
ESTIMATORS = ("terminal_estimate", "unrolled")
MANIFEST_TAG = b"MNFS"

STATE_DIM = 6
ACT_DIM = 2


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


def normalize_variant(name: str) -> str:
    v = str(name).strip().lower().replace("-", "_")
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}, expected one of {VARIANTS}")
    return v


@dataclass(frozen=True)
class FlowTrainConfig:
    variant: str = "rf_fwd"
    lambda_cons: float = 0.1
    inference_steps: int = 10
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    consistency_estimator: str = "terminal_estimate"
    k_train: int = 4
    hidden: tuple = (256, 256, 256)
    surrogate_hidden: tuple = (128, 128)

    def validate(self):
        normalize_variant(self.variant)
        if self.lambda_cons < 0:
            raise ValueError("lambda_cons must be non-negative")
        if self.inference_steps < 1:
            raise ValueError("inference_steps must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.consistency_estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.k_train < 1:
            raise ValueError("k_train must be at least 1")


@dataclass
class InverseModel:
    """Trained inverse map g: consecutive desired states -> actuation."""

    net: Mlp
    scaler: Scaler
    variant: str
    prior_table: StaticTable | None = None
    surrogate: Mlp | None = None
    tension_limit: float = 2.0

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if self.variant == "rf_physical" and self.prior_table is None:
            raise ValueError("rf_physical model requires a prior table")
        if self.variant == "rf_fwd" and self.surrogate is None:
            raise ValueError("rf_fwd model requires a surrogate")


@dataclass
class ControlSample:
    u: np.ndarray
    clamped: bool


# ---------------------------------------------------------------------------
# normalized views and conditioning

def normalized_arrays(dataset: Dataset) -> dict:
    sc = dataset.scaler
    return {"xs": sc.forward("state", dataset.x_t),
            "xn": sc.forward("state", dataset.x_next),
            "u": sc.forward("act", dataset.u_t),
            "uphys": sc.forward("act", dataset.u_phys),
            "eta": sc.forward("res", dataset.eta_t)}


def _slice(arrays, idx):
    return {k: v[idx] for k, v in arrays.items()}


def condition(batch: dict, variant: str) -> np.ndarray:
    if variant == "rf_physical":
        return np.hstack([batch["xs"], batch["xn"], batch["uphys"]])
    return np.hstack([batch["xs"], batch["xn"]])


def condition_dim(variant: str) -> int:
    return 2 * STATE_DIM + (ACT_DIM if variant == "rf_physical" else 0)


def flow_target(batch: dict, variant: str) -> np.ndarray:
    return batch["eta"] if variant == "rf_physical" else batch["u"]


def vnet_dims(variant: str, hidden) -> tuple:
    return (ACT_DIM + 1 + condition_dim(variant), *hidden, ACT_DIM)


def draw_noise(rng, n: int):
    """The (z, tau) draw for one minibatch; draw order is format-stable."""
    z = rng.standard_normal((n, ACT_DIM))
    tau = rng.uniform(0.0, 1.0, n)
    return z, tau


# ---------------------------------------------------------------------------
# losses

def fm_interpolate(z, xi_t, tau):
    """Straight-path interpolation (1-tau) z + tau xi_t; tau scalar or batch."""
    z = np.asarray(z, dtype=float)
    xi_t = np.asarray(xi_t, dtype=float)
    if z.shape != xi_t.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {xi_t.shape}")
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(tau_arr < 0.0) or np.any(tau_arr > 1.0):
        raise ValueError("tau must lie in [0, 1]")
    if tau_arr.ndim == 1 and z.ndim == 2:
        tau_arr = tau_arr[:, None]
    return (1.0 - tau_arr) * z + tau_arr * xi_t


def _fm_forward(net, batch, variant, z, tau):
    xi_t = flow_target(batch, variant)
    xi_tau = fm_interpolate(z, xi_t, tau)
    inp = np.hstack([xi_tau, tau[:, None], condition(batch, variant)])
    out, acts = neural.forward_cached(net, inp)
    err = out - (xi_t - z)
    loss = float(np.mean(np.sum(err ** 2, axis=1)))
    d_out = 2.0 * err / err.shape[0]
    return loss, d_out, out, acts, xi_tau


def fm_loss(net: Mlp, batch: dict, variant: str, rng,
            draws=None) -> GradBundle:
    """Flow-matching loss: mean ||v(xi_tau, tau, c) - (xi_t - z)||^2.

    ``batch`` holds normalized arrays (see normalized_arrays).  Fresh draws
    come from rng unless a (z, tau) pair is supplied, which the trainer does
    to share draws with the consistency term.
    """
    variant = normalize_variant(variant)
    if variant == "mlp_baseline":
        raise ValueError("fm_loss applies to flow variants only")
    n = batch["u"].shape[0]
    z, tau = draws if draws is not None else draw_noise(rng, n)
    loss, d_out, _, acts, _ = _fm_forward(net, batch, variant, z, tau)
    d_w, d_b, _ = neural.backward(net, acts, d_out)
    return GradBundle(loss, d_w, d_b)


def _surrogate_pull(surrogate, xs, u_hat, xn):
    """Consistency error and its gradient with respect to the control estimate."""
    s_in = np.hstack([xs, u_hat])
    pred, s_acts = neural.forward_cached(surrogate, s_in)
    s_err = pred - xn
    loss = float(np.mean(np.sum(s_err ** 2, axis=1)))
    _, _, d_in = neural.backward(surrogate, s_acts, 2.0 * s_err / s_err.shape[0])
    return loss, d_in[:, STATE_DIM:]


def _unrolled_estimate(net, batch, variant, z, k_train):
    """k_train Euler steps from z with caches kept for backprop through all."""
    cond = condition(batch, variant)
    n = z.shape[0]
    h = 1.0 / k_train
    xi = z
    caches = []
    for j in range(k_train):
        tau_j = np.full(n, j * h)
        inp = np.hstack([xi, tau_j[:, None], cond])
        out, acts = neural.forward_cached(net, inp)
        caches.append(acts)
        xi = xi + h * out
    return xi, caches


def _unrolled_backward(net, caches, d_xi, k_train):
    h = 1.0 / k_train
    g_w = [np.zeros_like(w) for w in net.weights]
    g_b = [np.zeros_like(b) for b in net.biases]
    for acts in reversed(caches):
        d_w, d_b, d_inp = neural.backward(net, acts, h * d_xi)
        for acc, g in zip(g_w, d_w):
            acc += g
        for acc, g in zip(g_b, d_b):
            acc += g
        d_xi = d_xi + d_inp[:, :ACT_DIM]
    return g_w, g_b


def consistency_loss(net: Mlp, surrogate: Mlp, batch: dict, rng,
                     estimator: str = "terminal_estimate", draws=None,
                     k_train: int = 4, variant: str = "rf_fwd") -> GradBundle:
    """One-step consistency through a frozen surrogate; grads reach net only.

    terminal_estimate reads off u_hat = xi_tau + (1-tau) v at the flow-matching
    draw (exact at the optimum, one extra surrogate pass); unrolled integrates
    k_train Euler steps and backpropagates through every one.
    """
    if surrogate is None:
        raise ValueError("consistency loss requires a surrogate")
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    variant = normalize_variant(variant)
    n = batch["u"].shape[0]
    z, tau = draws if draws is not None else draw_noise(rng, n)
    if estimator == "terminal_estimate":
        _, _, out, acts, xi_tau = _fm_forward(net, batch, variant, z, tau)
        u_hat = xi_tau + (1.0 - tau)[:, None] * out
        loss, d_u_hat = _surrogate_pull(surrogate, batch["xs"], u_hat, batch["xn"])
        d_w, d_b, _ = neural.backward(net, acts, d_u_hat * (1.0 - tau)[:, None])
        return GradBundle(loss, d_w, d_b)
    u_hat, caches = _unrolled_estimate(net, batch, variant, z, k_train)
    loss, d_u_hat = _surrogate_pull(surrogate, batch["xs"], u_hat, batch["xn"])
    g_w, g_b = _unrolled_backward(net, caches, d_u_hat, k_train)
    return GradBundle(loss, g_w, g_b)


def _combined_grads(net, surrogate, batch, variant, z, tau, lam, estimator,
                    k_train):
    """FM term plus lam * consistency with shared draws; one backward when fused."""
    loss_fm, d_fm, out, acts, xi_tau = _fm_forward(net, batch, variant, z, tau)
    if lam == 0.0 or surrogate is None:
        d_w, d_b, _ = neural.backward(net, acts, d_fm)
        return loss_fm, 0.0, GradBundle(loss_fm, d_w, d_b)
    if estimator == "terminal_estimate":
        u_hat = xi_tau + (1.0 - tau)[:, None] * out
        loss_c, d_u_hat = _surrogate_pull(surrogate, batch["xs"], u_hat, batch["xn"])
        d_total = d_fm + lam * d_u_hat * (1.0 - tau)[:, None]
        d_w, d_b, _ = neural.backward(net, acts, d_total)
        return loss_fm, loss_c, GradBundle(loss_fm + lam * loss_c, d_w, d_b)
    d_w, d_b, _ = neural.backward(net, acts, d_fm)
    u_hat, caches = _unrolled_estimate(net, batch, variant, z, k_train)
    loss_c, d_u_hat = _surrogate_pull(surrogate, batch["xs"], u_hat, batch["xn"])
    g_w, g_b = _unrolled_backward(net, caches, lam * d_u_hat, k_train)
    for acc, g in zip(d_w, g_w):
        acc += g
    for acc, g in zip(d_b, g_b):
        acc += g
    return loss_fm, loss_c, GradBundle(loss_fm + lam * loss_c, d_w, d_b)


# ---------------------------------------------------------------------------
# training

def train_surrogate(dataset: Dataset, seed: int = 1, epochs: int = 50,
                    batch_size: int = 256, lr: float = 1e-3,
                    hidden: tuple = (128, 128), log: list | None = None) -> Mlp:
    """Forward surrogate (x_t, u_t) -> x_next by MSE in normalized coordinates."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    arrays = normalized_arrays(dataset)
    inputs = np.hstack([arrays["xs"], arrays["u"]])
    targets = arrays["xn"]
    net = neural.mlp_init((STATE_DIM + ACT_DIM, *hidden, STATE_DIM), [seed, 0])
    state = neural.adam_init(net, lr=lr)
    rng = np.random.default_rng([seed, 1])
    n = inputs.shape[0]
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            grads = neural.mse_grads(net, inputs[idx], targets[idx])
            if not np.isfinite(grads.loss):
                raise TrainingDivergedError(
                    f"surrogate loss non-finite at epoch {epoch}")
            neural.adam_step(net, grads, state)
            total += grads.loss * len(idx)
            count += len(idx)
        if log is not None:
            log.append({"epoch": epoch, "loss": total / count})
    return net


def train_inverse(dataset: Dataset, config: FlowTrainConfig,
                  table: StaticTable | None = None,
                  surrogate: Mlp | None = None,
                  tension_limit: float = 2.0):
    """Minibatch Adam on the variant's loss; returns (InverseModel, loss log).

    Log rows are dicts with keys epoch, loss_fm, loss_cons, loss_total; the
    epoch-0 row is a no-update evaluation of the freshly initialized net on
    the full dataset with a dedicated probe stream.
    """
    config.validate()
    variant = normalize_variant(config.variant)
    if len(dataset) < 2:
        raise ValueError("dataset too small to train on")
    if variant == "rf_physical" and table is None:
        raise ValueError("rf_physical needs a static table for inference")
    if variant == "rf_fwd" and surrogate is None:
        surrogate = train_surrogate(dataset, seed=config.seed + 1,
                                    epochs=config.epochs,
                                    batch_size=config.batch_size, lr=config.lr,
                                    hidden=config.surrogate_hidden)

    arrays = normalized_arrays(dataset)
    n = len(dataset)
    rng = np.random.default_rng([config.seed, 2])
    probe_rng = np.random.default_rng([config.seed, 3])
    log = []

    if variant == "mlp_baseline":
        net = neural.mlp_init((condition_dim(variant), *config.hidden, ACT_DIM),
                              [config.seed, 4])
        inputs = condition(arrays, variant)
        targets = arrays["u"]
        g0 = neural.mse_grads(net, inputs, targets)
        log.append({"epoch": 0, "loss_fm": g0.loss, "loss_cons": 0.0,
                    "loss_total": g0.loss})
        state = neural.adam_init(net, lr=config.lr)
        for epoch in range(1, config.epochs + 1):
            perm = rng.permutation(n)
            total, count = 0.0, 0
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                grads = neural.mse_grads(net, inputs[idx], targets[idx])
                if not np.isfinite(grads.loss):
                    raise TrainingDivergedError(
                        f"baseline loss non-finite at epoch {epoch}")
                neural.adam_step(net, grads, state)
                total += grads.loss * len(idx)
                count += len(idx)
            mean = total / count
            log.append({"epoch": epoch, "loss_fm": mean, "loss_cons": 0.0,
                        "loss_total": mean})
        model = InverseModel(net, dataset.scaler, variant,
                             prior_table=table, surrogate=None,
                             tension_limit=tension_limit)
        return model, log

    net = neural.mlp_init(vnet_dims(variant, config.hidden), [config.seed, 4])
    lam = config.lambda_cons if variant == "rf_fwd" else 0.0
    probe_draws = draw_noise(probe_rng, n)
    loss0_fm, loss0_c, _ = _combined_grads(
        net, surrogate if variant == "rf_fwd" else None, arrays, variant,
        probe_draws[0], probe_draws[1], lam, config.consistency_estimator,
        config.k_train)
    log.append({"epoch": 0, "loss_fm": loss0_fm, "loss_cons": loss0_c,
                "loss_total": loss0_fm + lam * loss0_c})

    state = neural.adam_init(net, lr=config.lr)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        sums = np.zeros(2)
        count = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = _slice(arrays, idx)
            z, tau = draw_noise(rng, len(idx))
            loss_fm, loss_c, grads = _combined_grads(
                net, surrogate if variant == "rf_fwd" else None, batch,
                variant, z, tau, lam, config.consistency_estimator,
                config.k_train)
            if not np.isfinite(grads.loss):
                raise TrainingDivergedError(
                    f"{variant} loss non-finite at epoch {epoch}")
            neural.adam_step(net, grads, state)
            sums += np.array([loss_fm, loss_c]) * len(idx)
            count += len(idx)
        mean_fm, mean_c = sums / count
        log.append({"epoch": epoch, "loss_fm": mean_fm, "loss_cons": mean_c,
                    "loss_total": mean_fm + lam * mean_c})

    model = InverseModel(net, dataset.scaler, variant, prior_table=table,
                         surrogate=surrogate if variant == "rf_fwd" else None,
                         tension_limit=tension_limit)
    return model, log


# ---------------------------------------------------------------------------
# inference

def _as_state_vector(x) -> np.ndarray:
    if isinstance(x, TaskState):
        return x.as_vector()
    x = np.asarray(x, dtype=float)
    if x.shape != (STATE_DIM,):
        raise ValueError(f"state must be a TaskState or 6-vector, got {x.shape}")
    return x


def sample_control(model: InverseModel, x_t, x_next, z, K: int = 10) -> ControlSample:
    """Integrate the learned velocity field from z over K uniform Euler steps.

    For rf_physical the integrated residual is added to the quasi-static
    prior at the target position; mlp_baseline ignores z and K.  The result
    is clamped to the tension limit, with the clamp reported.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    sc = model.scaler
    xs = sc.forward("state", _as_state_vector(x_t))
    xn = sc.forward("state", _as_state_vector(x_next))

    if model.variant == "mlp_baseline":
        u = sc.inverse("act", neural.forward(model.net, np.concatenate([xs, xn])))
        return _clamp(u, model.tension_limit)

    z = np.asarray(z, dtype=float)
    if z.shape != (ACT_DIM,):
        raise ValueError(f"z must be a {ACT_DIM}-vector, got {z.shape}")

    if model.variant == "rf_physical":
        x_next_pos = (x_next.position if isinstance(x_next, TaskState)
                      else np.asarray(x_next, dtype=float)[:3])
        u_phys = rod_sim.physics_prior(x_next_pos, model.prior_table).u
        cond = np.concatenate([xs, xn, sc.forward("act", u_phys)])
        eta = sc.inverse("res", _euler(model.net, z, cond, K))
        return _clamp(u_phys + eta, model.tension_limit)

    u = sc.inverse("act", _euler(model.net, z, cond=np.concatenate([xs, xn]), K=K))
    return _clamp(u, model.tension_limit)


def _euler(net, z, cond, K):
    xi = z.copy()
    h = 1.0 / K
    for k in range(K):
        inp = np.concatenate([xi, [k * h], cond])
        xi = xi + h * neural.forward(net, inp)
    return xi


def _clamp(u, limit):
    clamped = bool(np.any(np.abs(u) > limit))
    return ControlSample(np.clip(u, -limit, limit), clamped)


# ---------------------------------------------------------------------------
# persistence: weight container plus a variant/prior manifest record

_ESTIMATOR_CODE = {name: i for i, name in enumerate(ESTIMATORS)}
_VARIANT_CODE = {name: i for i, name in enumerate(VARIANTS)}


def save_model(path, model: InverseModel, lambda_cons: float = 0.1,
               consistency_estimator: str = "terminal_estimate",
               inference_steps: int = 10):
    with atomic_write(path) as f:
        neural.write_mlp_block(f, model.net, model.scaler)
        f.write(MANIFEST_TAG)
        _write_u32(f, _VARIANT_CODE[model.variant])
        _write_f64(f, lambda_cons)
        _write_u32(f, _ESTIMATOR_CODE[consistency_estimator])
        _write_u32(f, inference_steps)
        _write_f64(f, model.tension_limit)
        _write_u32(f, 1 if model.surrogate is not None else 0)
        if model.surrogate is not None:
            neural.write_mlp_block(f, model.surrogate, None)
        _write_u32(f, 1 if model.prior_table is not None else 0)
        if model.prior_table is not None:
            write_table_block(f, model.prior_table, 0)


def load_model(path):
    """Returns (InverseModel, manifest dict with the training settings)."""
    with open(path, "rb") as f:
        net, scaler = neural.read_mlp_block(f)
        tag = _read_exact(f, 4)
        if tag != MANIFEST_TAG:
            raise FormatError(f"{path}: expected manifest tag, got {tag!r}")
        variant = VARIANTS[_read_u32(f)]
        manifest = {"variant": variant,
                    "lambda_cons": _read_f64(f),
                    "consistency_estimator": ESTIMATORS[_read_u32(f)],
                    "inference_steps": _read_u32(f)}
        tension_limit = _read_f64(f)
        surrogate = None
        if _read_u32(f):
            surrogate, _ = neural.read_mlp_block(f)
        table = None
        if _read_u32(f):
            table, _ = read_table_block(f)
    if scaler is None:
        raise FormatError(f"{path}: model file carries no scaler")
    model = InverseModel(net, scaler, variant, prior_table=table,
                         surrogate=surrogate, tension_limit=tension_limit)
    return model, manifest
