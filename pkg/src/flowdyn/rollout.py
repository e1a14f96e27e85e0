"""Reference trajectories, open-loop execution, and tracking metrics.

The controller here is purely feedforward: build_control_sequence consumes
only the reference, and execute_open_loop consumes only the finished control
sequence, so plant output can never leak back into the controller.

Planar shapes (circle, heart, random_smooth) ride on the rod's static bowl:
the z coordinate at planar radius rho is interpolated from the static table,
so every reference point lies on the quasi-statically reachable surface.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import rod_sim
from .dataio import Episode, atomic_write
from .flowmatch import InverseModel, sample_control
from .rod_sim import RodParams, StaticTable, TaskState

REFERENCE_KINDS = ("circle", "heart", "random_smooth", "burst_circle",
                   "from_episode")
METRICS_HEADER = ("model", "variant", "trajectory", "seed", "rmse_mm",
                  "phase_lag_s", "input_energy", "peak_speed")


@dataclass
class ReferenceTrajectory:
    """Desired tip states at dt spacing."""

    states: list
    kind: str
    params: dict
    dt: float
    clamped_geometry: bool = False

    def positions(self):
        return np.stack([s.position for s in self.states])

    def velocities(self):
        return np.stack([s.velocity for s in self.states])


@dataclass
class MetricsReport:
    rmse: float
    phase_lag: float
    lag_degenerate: bool
    input_energy: float
    peak_speed: float
    errors: np.ndarray


def _bowl_height(table: StaticTable, rho):
    """z of the static reachable surface at planar radius rho (interpolated)."""
    tips = table.tips.reshape(-1, 3)
    radii = np.hypot(tips[:, 0], tips[:, 1])
    order = np.argsort(radii)
    return np.interp(rho, radii[order], tips[order, 2])


def _central_diff_velocities(pos, dt):
    vel = np.empty_like(pos)
    vel[1:-1] = (pos[2:] - pos[:-2]) / (2.0 * dt)
    vel[0] = (pos[1] - pos[0]) / dt
    vel[-1] = (pos[-1] - pos[-2]) / dt
    return vel


def _states_from_arrays(pos, vel):
    return [TaskState(p.copy(), v.copy()) for p, v in zip(pos, vel)]


def gen_reference(kind: str, params: dict, dt: float = 0.01,
                  table: StaticTable | None = None,
                  episode: Episode | None = None) -> ReferenceTrajectory:
    """Build a reference of the given kind; see REFERENCE_KINDS.

    params keys by kind (all optional unless noted):
      circle:        radius*, period*, duration, center
      heart:         radius*, period*, duration
      random_smooth: radius*, duration*, seed
      burst_circle:  radius*, period_max, period_min, duration
      from_episode:  none (pass episode=)
    Radii beyond the table's reachable hull are clamped and flagged.  Planar
    shapes need either a table (for the bowl height) or an explicit center.
    """
    if kind not in REFERENCE_KINDS:
        raise ValueError(f"unknown reference kind {kind!r}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    params = dict(params or {})

    if kind == "from_episode":
        if episode is None:
            raise ValueError("from_episode needs an episode")
        return ReferenceTrajectory([TaskState(s.position.copy(),
                                              s.velocity.copy())
                                    for s in episode.states],
                                   kind, params, episode.dt)

    radius = float(params.get("radius", 0.0))
    if not radius > 0:
        raise ValueError(f"{kind} needs a positive radius")
    clamped = False
    if table is not None:
        hull = table.reachable_radius()
        if radius > hull:
            radius, clamped = hull, True
            params["radius"] = radius

    if kind in ("circle", "burst_circle"):
        center = params.get("center")
        if center is None:
            if table is None:
                raise ValueError(f"{kind} needs a static table or explicit center")
            center = np.array([0.0, 0.0, _bowl_height(table, radius)])
        center = np.asarray(center, dtype=float)

        if kind == "circle":
            # default period matches the fastest burst-sweep period: slow
            # circles are quasi-static and hide the feedforward differences
            period = float(params.get("period", 1.2))
            duration = float(params.get("duration", 2.0 * period))
            if not (period > 0 and duration > 0):
                raise ValueError("period and duration must be positive")
            t = np.arange(int(round(duration / dt)) + 1) * dt
            omega = 2.0 * np.pi / period
            pos = center + radius * np.stack(
                [np.cos(omega * t), np.sin(omega * t), np.zeros_like(t)], axis=1)
            vel = radius * omega * np.stack(
                [-np.sin(omega * t), np.cos(omega * t), np.zeros_like(t)], axis=1)
        else:
            p_max = float(params.get("period_max", 5.0))
            p_min = float(params.get("period_min", 1.2))
            duration = float(params.get("duration", 10.0))
            if not (p_max > p_min > 0 and duration > 0):
                raise ValueError("need period_max > period_min > 0")
            t = np.arange(int(round(duration / dt)) + 1) * dt
            # Geometric period sweep P(t) = P_max (P_min/P_max)^(t/T); the
            # angular phase is the exact integral of 2*pi/P(t).
            rate = np.log(p_max / p_min) / duration
            theta = (2.0 * np.pi / (p_max * rate)) * (np.exp(rate * t) - 1.0)
            omega = (2.0 * np.pi / p_max) * np.exp(rate * t)
            pos = center + radius * np.stack(
                [np.cos(theta), np.sin(theta), np.zeros_like(t)], axis=1)
            vel = radius * omega[:, None] * np.stack(
                [-np.sin(theta), np.cos(theta), np.zeros_like(t)], axis=1)
        return ReferenceTrajectory(_states_from_arrays(pos, vel), kind, params,
                                   dt, clamped)

    if kind == "heart":
        period = float(params.get("period", 3.0))
        duration = float(params.get("duration", 2.0 * period))
        if not (period > 0 and duration > 0):
            raise ValueError("period and duration must be positive")
        t = np.arange(int(round(duration / dt)) + 1) * dt
        ang = 2.0 * np.pi * t / period
        raw_x = 16.0 * np.sin(ang) ** 3
        raw_y = (13.0 * np.cos(ang) - 5.0 * np.cos(2 * ang)
                 - 2.0 * np.cos(3 * ang) - np.cos(4 * ang))
        scale = radius / np.max(np.hypot(raw_x, raw_y))
        xy = np.stack([raw_x, raw_y], axis=1) * scale
    else:  # random_smooth
        duration = float(params.get("duration", 6.0))
        if not duration > 0:
            raise ValueError("duration must be positive")
        seed = int(params.get("seed", 0))
        rng = np.random.default_rng([seed, 6])
        t = np.arange(int(round(duration / dt)) + 1) * dt
        xy = np.zeros((t.size, 2))
        for axis in range(2):
            freqs = rng.uniform(0.1, 2.0, 5)     # band-limited below 2 Hz
            amps = rng.uniform(0.2, 1.0, 5)
            phases = rng.uniform(0.0, 2.0 * np.pi, 5)
            xy[:, axis] = np.sum(
                amps[None, :] * np.sin(2.0 * np.pi * freqs[None, :] * t[:, None]
                                       + phases[None, :]), axis=1)
        peak = np.max(np.hypot(xy[:, 0], xy[:, 1]))
        if peak > 0:
            xy *= radius / peak

    if table is None:
        raise ValueError(f"{kind} needs a static table for the bowl height")
    z = _bowl_height(table, np.hypot(xy[:, 0], xy[:, 1]))
    pos = np.column_stack([xy, z])
    vel = _central_diff_velocities(pos, dt)
    return ReferenceTrajectory(_states_from_arrays(pos, vel), kind, params,
                               dt, clamped)


# ---------------------------------------------------------------------------
# control construction and execution

def build_control_sequence(model: InverseModel, ref: ReferenceTrajectory,
                           K: int = 10, seed: int = 0,
                           fixed_noise: bool = False) -> np.ndarray:
    """Feedforward controls from consecutive reference pairs, shape (T, 2).

    Step t's noise comes from a counter-based generator keyed on (seed, t),
    so draws are independent of evaluation order; --fixed-noise reuses the
    t=0 draw everywhere.
    """
    if len(ref.states) < 2:
        raise ValueError("reference needs at least 2 states")
    n_steps = len(ref.states) - 1
    controls = np.empty((n_steps, 2))
    z_fixed = _rollout_noise(seed, 0) if fixed_noise else None
    for t in range(n_steps):
        z = z_fixed if fixed_noise else _rollout_noise(seed, t)
        try:
            controls[t] = sample_control(model, ref.states[t],
                                         ref.states[t + 1], z, K).u
        except (ValueError, FloatingPointError) as exc:
            raise ValueError(f"control construction failed at step {t}: {exc}") \
                from exc
    return controls


def _rollout_noise(seed, t):
    # counter-based: the draw for step t never depends on other steps' draws
    bitgen = np.random.Philox(counter=[0, 0, 0, t],
                              key=[seed & 0xFFFFFFFFFFFFFFFF, 0x9E3779B97F4A7C15])
    return np.random.Generator(bitgen).standard_normal(2)


def execute_open_loop(controls, p: RodParams, s0=None):
    """Run the plant under the finished control sequence.

    Returns (tip states including the initial one, clamp count).  Controls
    outside the tension limit are clamped and counted, never rejected.
    """
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or controls.shape[1] != 2 or controls.shape[0] == 0:
        raise ValueError(f"controls must have shape (T, 2), got {controls.shape}")
    limited = np.clip(controls, -p.tension_limit, p.tension_limit)
    n_clamped = int(np.sum(np.any(limited != controls, axis=1)))
    if s0 is None:
        s0 = rod_sim.rest_state(p)
    states = rod_sim.simulate(s0, limited, p, 0.01)
    return [rod_sim.tip_state(s, p) for s in states], n_clamped


# ---------------------------------------------------------------------------
# metrics

def _positions(seq):
    if isinstance(seq, np.ndarray):
        return seq
    return np.stack([s.position for s in seq])


def rmse(achieved, ref, skip: int | None = None) -> float:
    """RMS 3-D position error after skipping the initial transient window."""
    a = _positions(achieved)
    r = _positions(ref)
    if a.shape != r.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {r.shape}")
    if skip is None:
        skip = a.shape[0] // 10
    if skip >= a.shape[0]:
        raise ValueError("skip window covers the whole trajectory")
    err = a[skip:] - r[skip:]
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))


def input_energy(controls, dt: float) -> float:
    if not dt > 0:
        raise ValueError("dt must be positive")
    controls = np.asarray(controls, dtype=float)
    return float(np.sum(controls ** 2) * dt)


def phase_lag(achieved, ref, dt: float, max_lag: float = 0.5):
    """Lag (s) maximizing the mean cross-correlation of mean-removed positions.

    Only non-negative lags are scanned (the plant trails the reference).
    Returns (lag, degenerate); constant signals report (0.0, True).
    """
    a = _positions(achieved)
    r = _positions(ref)
    if a.shape != r.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {r.shape}")
    n = a.shape[0]
    if not 0 < max_lag < n * dt / 2:
        raise ValueError("max_lag must be positive and below half the duration")
    a = a - a.mean(axis=0)
    r = r - r.mean(axis=0)
    if np.max(np.abs(a)) < 1e-12 or np.max(np.abs(r)) < 1e-12:
        return 0.0, True
    max_shift = int(round(max_lag / dt))
    scores = np.empty(max_shift + 1)
    for s in range(max_shift + 1):
        overlap = n - s
        scores[s] = np.sum(a[s:] * r[:overlap]) / overlap
    return float(np.argmax(scores) * dt), False


def peak_speed(states) -> float:
    vel = np.stack([s.velocity for s in states])
    return float(np.max(np.linalg.norm(vel, axis=1)))


def evaluate_tracking(model: InverseModel, ref: ReferenceTrajectory,
                      p: RodParams, K: int = 10, seed: int = 0,
                      fixed_noise: bool = False):
    """Full feedforward evaluation; returns (MetricsReport, controls, achieved)."""
    controls = build_control_sequence(model, ref, K=K, seed=seed,
                                      fixed_noise=fixed_noise)
    achieved, _ = execute_open_loop(controls, p)
    err = np.linalg.norm(_positions(achieved) - ref.positions(), axis=1)
    lag, degenerate = phase_lag(achieved, ref.states, ref.dt)
    report = MetricsReport(rmse=rmse(achieved, ref.states),
                           phase_lag=lag, lag_degenerate=degenerate,
                           input_energy=input_energy(controls, ref.dt),
                           peak_speed=peak_speed(achieved), errors=err)
    return report, controls, achieved


def reconstruct_inputs(model: InverseModel, episode: Episode, K: int = 10,
                       seed: int = 0, fixed_noise: bool = False):
    """Forward-then-inverse protocol on a recorded episode.

    Feeds consecutive recorded states to the model and compares the generated
    controls to the episode's ground truth.  Returns (controls, per-channel
    MAE, MAE as a fraction of the full actuation range 2*tension_limit).
    """
    ref = gen_reference("from_episode", {}, episode=episode)
    controls = build_control_sequence(model, ref, K=K, seed=seed,
                                      fixed_noise=fixed_noise)
    mae = np.mean(np.abs(controls - episode.controls), axis=0)
    mae_frac = mae / (2.0 * model.tension_limit)
    return controls, mae, mae_frac


# ---------------------------------------------------------------------------
# CSV export

def export_metrics_csv(path, rows):
    """Rows are dicts keyed by METRICS_HEADER; floats serialized at full precision."""
    with atomic_write(path) as f:
        text = [",".join(METRICS_HEADER)]
        for row in rows:
            text.append(",".join(_csv_field(row[k]) for k in METRICS_HEADER))
        f.write(("\n".join(text) + "\n").encode())


def _csv_field(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def read_metrics_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header "
                             f"{reader.fieldnames}")
        rows = []
        for raw in reader:
            row = dict(raw)
            for k in ("rmse_mm", "phase_lag_s", "input_energy", "peak_speed"):
                row[k] = float(row[k])
            row["seed"] = int(row["seed"])
            rows.append(row)
    return rows


def export_trajectory_csv(path, achieved, ref: ReferenceTrajectory):
    """Per-sample achieved vs. reference positions: t,ax,ay,az,rx,ry,rz."""
    a = _positions(achieved)
    r = ref.positions()
    if a.shape != r.shape:
        raise ValueError("achieved and reference lengths differ")
    with atomic_write(path) as f:
        f.write(b"t,ax,ay,az,rx,ry,rz\n")
        for k in range(a.shape[0]):
            fields = [k * ref.dt, *a[k], *r[k]]
            f.write((",".join(format(v, ".17g") for v in fields) + "\n").encode())
