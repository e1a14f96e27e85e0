"""Forward-dynamics plant for a cable-driven elastic rod.

The rod is modelled as a serial chain of ``n_links`` rigid links connected by
2-DOF bending joints (two orthogonal torsional springs per joint).  The base
frame has +z along the undeformed rod axis; gravity defaults to +z so the
straight configuration is a stable equilibrium (rod hanging along gravity).

Per joint, column 0 is the bending angle about the local +x axis (positive
angle moves the tip toward -y) and column 1 the angle about the local +y axis
(positive angle moves the tip toward +x).  Differential cable tension u[0]
applies a bending moment u[0]*cable_offset about the local x axis at every
joint (a taut cable at constant offset loads every cross-section with the
same moment), and u[1] likewise about the local y axis.

All functions are pure: they never mutate their inputs and are safe to call
concurrently.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import hashlib
import math

import numpy as np


class ConvergenceError(RuntimeError):
    """Static solver failed to reach the residual tolerance."""


@dataclass(frozen=True)
class RodParams:
    """Physical rod parameters plus integrator settings.

    Units: meters, newtons, pascals, kilograms, seconds.  ``gravity`` is a
    3-tuple acceleration vector in the base frame.
    """

    length: float = 0.4
    diameter: float = 0.004
    cable_offset: float = 0.055
    youngs_modulus: float = 2e9
    damping: float = 5e7
    density: float = 12000.0
    n_links: int = 10
    gravity: tuple = (0.0, 0.0, 9.81)
    tension_limit: float = 2.0
    substeps: int = 10

    def validate(self):
        if not (self.length > 0 and self.diameter > 0 and self.cable_offset > 0):
            raise ValueError("rod geometry must be positive")
        if not (self.youngs_modulus > 0 and self.density > 0):
            raise ValueError("youngs_modulus and density must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.n_links < 2:
            raise ValueError("n_links must be at least 2")
        if not self.tension_limit > 0:
            raise ValueError("tension_limit must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be at least 1")
        g = np.asarray(self.gravity, dtype=float)
        if g.shape != (3,) or not np.all(np.isfinite(g)):
            raise ValueError("gravity must be a finite 3-vector")

    def stable_hash(self) -> int:
        """64-bit hash of the parameter values, stable across processes."""
        parts = []
        for name in ("length", "diameter", "cable_offset", "youngs_modulus",
                     "damping", "density", "tension_limit"):
            parts.append(float(getattr(self, name)).hex())
        parts.append(str(self.n_links))
        parts.append(str(self.substeps))
        parts.extend(float(g).hex() for g in self.gravity)
        digest = hashlib.sha256("|".join(parts).encode()).digest()
        return int.from_bytes(digest[:8], "big")


@lru_cache(maxsize=8)
def _derived(p: RodParams):
    """Per-joint constants derived from the parameters (cached)."""
    p.validate()
    n = p.n_links
    ell = p.length / n
    area_moment = math.pi * p.diameter ** 4 / 64.0
    stiffness = p.youngs_modulus * area_moment / ell          # N*m/rad per joint
    damping_coeff = p.damping * area_moment / ell             # N*m*s/rad per joint
    link_mass = p.density * (math.pi * p.diameter ** 2 / 4.0) * ell
    # Inertia of the distal rod section about joint i, straight configuration.
    distal = np.arange(n, 0, -1, dtype=float)                 # links beyond joint i
    inertia = distal * link_mass * (distal * ell) ** 2 / 3.0
    gravity = np.asarray(p.gravity, dtype=float)
    return ell, stiffness, damping_coeff, link_mass, inertia, gravity


@dataclass
class RodState:
    """Joint-space state: bending angles and angular rates, shape (n_links, 2)."""

    joint_angles: np.ndarray
    joint_rates: np.ndarray

    def copy(self):
        return RodState(self.joint_angles.copy(), self.joint_rates.copy())


@dataclass
class TaskState:
    """End-effector position and linear velocity in the base frame."""

    position: np.ndarray
    velocity: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @staticmethod
    def from_vector(x) -> "TaskState":
        x = np.asarray(x, dtype=float)
        if x.shape != (6,):
            raise ValueError(f"task state vector must have shape (6,), got {x.shape}")
        return TaskState(x[:3].copy(), x[3:].copy())


@dataclass
class StaticTable:
    """Lattice of static-equilibrium tip positions over the actuation square.

    ``tips[i, j]`` is the equilibrium tip position for actuation
    ``(u1_axis[i], u2_axis[j])``.  ``cell_scale`` is the largest tip distance
    between lattice neighbours, used to flag out-of-range inversion targets.
    Immutable after build.
    """

    u1_axis: np.ndarray
    u2_axis: np.ndarray
    tips: np.ndarray
    cell_scale: float

    @property
    def resolution(self):
        return len(self.u1_axis), len(self.u2_axis)

    def reachable_radius(self) -> float:
        """Largest planar (xy) tip radius over the lattice."""
        return float(np.max(np.hypot(self.tips[..., 0], self.tips[..., 1])))


@dataclass
class PriorResult:
    """Actuation returned by the quasi-static inversion, with a range flag."""

    u: np.ndarray
    out_of_range: bool


def rest_state(p: RodParams) -> RodState:
    """Straight rod at rest."""
    p.validate()
    n = p.n_links
    return RodState(np.zeros((n, 2)), np.zeros((n, 2)))


def check_actuation(u, p: RodParams) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (2,):
        raise ValueError(f"actuation must be a 2-vector, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("actuation must be finite")
    if np.any(np.abs(u) > p.tension_limit + 1e-12):
        raise ValueError(
            f"actuation {u} exceeds tension limit {p.tension_limit}")
    return u


def _check_state(s: RodState, p: RodParams):
    n = p.n_links
    if s.joint_angles.shape != (n, 2) or s.joint_rates.shape != (n, 2):
        raise ValueError(
            f"state shape mismatch: expected ({n}, 2) angles and rates")
    if not (np.all(np.isfinite(s.joint_angles)) and np.all(np.isfinite(s.joint_rates))):
        raise ValueError("state contains non-finite entries")


def _chain_kinematics(q: np.ndarray, ell: float):
    """Joint positions, joint axes, link directions, and tip position.

    Returns (joint_pos (n,3), axis_a (n,3), axis_b (n,3), dirs (n,3), tip (3,)).
    axis_a[i]/axis_b[i] are the world-frame rotation axes of the two bending
    coordinates of joint i.
    """
    n = q.shape[0]
    ca, sa = np.cos(q[:, 0]), np.sin(q[:, 0])
    cb, sb = np.cos(q[:, 1]), np.sin(q[:, 1])

    rot_b = np.zeros((n, 3, 3))
    rot_b[:, 0, 0] = cb
    rot_b[:, 0, 2] = sb
    rot_b[:, 1, 1] = 1.0
    rot_b[:, 2, 0] = -sb
    rot_b[:, 2, 2] = cb

    rot_a = np.zeros((n, 3, 3))
    rot_a[:, 0, 0] = 1.0
    rot_a[:, 1, 1] = ca
    rot_a[:, 1, 2] = -sa
    rot_a[:, 2, 1] = sa
    rot_a[:, 2, 2] = ca

    joint_pos = np.empty((n, 3))
    axis_a = np.empty((n, 3))
    axis_b = np.empty((n, 3))
    dirs = np.empty((n, 3))
    frame = np.eye(3)
    pos = np.zeros(3)
    for i in range(n):
        joint_pos[i] = pos
        axis_b[i] = frame[:, 1]
        half = frame @ rot_b[i]
        axis_a[i] = half[:, 0]
        frame = half @ rot_a[i]
        dirs[i] = frame[:, 2]
        pos = pos + ell * dirs[i]
    return joint_pos, axis_a, axis_b, dirs, pos


def _joint_torques(q: np.ndarray, u: np.ndarray, p: RodParams) -> np.ndarray:
    """Elastic + gravity + actuation torques per joint coordinate, shape (n, 2)."""
    ell, stiffness, _, link_mass, _, gravity = _derived(p)
    n = q.shape[0]
    joint_pos, axis_a, axis_b, dirs, _ = _chain_kinematics(q, ell)

    coms = joint_pos + (0.5 * ell) * dirs
    # Suffix sums: all links at or beyond joint i hang off that joint.
    com_suffix = np.cumsum(coms[::-1], axis=0)[::-1]
    count = np.arange(n, 0, -1, dtype=float)[:, None]
    weight = link_mass * gravity
    moment = np.cross(com_suffix - count * joint_pos, weight)

    tau = np.empty((n, 2))
    tau[:, 0] = np.einsum("ij,ij->i", axis_a, moment)
    tau[:, 1] = np.einsum("ij,ij->i", axis_b, moment)
    tau -= stiffness * q
    tau[:, 0] += u[0] * p.cable_offset
    tau[:, 1] += u[1] * p.cable_offset
    return tau


def step(s: RodState, u, p: RodParams, dt: float) -> RodState:
    """Advance the plant one control interval of length dt.

    Integration is semi-implicit Euler over ``p.substeps`` internal substeps:
    torques are evaluated at the old configuration, the joint-damping term is
    folded in implicitly (stable for stiff, overdamped distal joints), and
    positions are updated with the new rates.
    """
    if not (isinstance(dt, (int, float)) and math.isfinite(dt) and dt > 0):
        raise ValueError(f"dt must be a positive finite number, got {dt!r}")
    u = check_actuation(u, p)
    _check_state(s, p)
    ell, stiffness, damping_coeff, link_mass, inertia, gravity = _derived(p)

    q = s.joint_angles.copy()
    w = s.joint_rates.copy()
    h = dt / p.substeps
    inertia_col = inertia[:, None]
    damp_div = 1.0 + h * damping_coeff / inertia_col
    for _ in range(p.substeps):
        tau = _joint_torques(q, u, p)
        w = (w + h * tau / inertia_col) / damp_div
        q = q + h * w
    return RodState(q, w)


def simulate(s0: RodState, profile, p: RodParams, dt: float):
    """Iterate ``step`` over a control profile; returns len(profile)+1 states."""
    if len(profile) == 0:
        raise ValueError("control profile must be non-empty")
    states = [s0.copy()]
    for k, u in enumerate(profile):
        try:
            states.append(step(states[-1], u, p, dt))
        except (ValueError, FloatingPointError) as exc:
            raise ValueError(f"simulate failed at step {k}: {exc}") from exc
    return states


def tip_state(s: RodState, p: RodParams) -> TaskState:
    """Tip position via forward kinematics; velocity via the chain Jacobian."""
    _check_state(s, p)
    ell = _derived(p)[0]
    joint_pos, axis_a, axis_b, _, tip = _chain_kinematics(s.joint_angles, ell)
    lever = tip - joint_pos
    vel = (np.cross(axis_a, lever) * s.joint_rates[:, 0:1]
           + np.cross(axis_b, lever) * s.joint_rates[:, 1:2]).sum(axis=0)
    return TaskState(tip, vel)


def mechanical_energy(s: RodState, p: RodParams) -> float:
    """Kinetic + elastic + gravitational energy (zero for the straight rod at rest)."""
    _check_state(s, p)
    ell, stiffness, _, link_mass, inertia, gravity = _derived(p)
    kinetic = 0.5 * float(np.sum(inertia[:, None] * s.joint_rates ** 2))
    elastic = 0.5 * stiffness * float(np.sum(s.joint_angles ** 2))
    joint_pos, _, _, dirs, _ = _chain_kinematics(s.joint_angles, ell)
    coms = joint_pos + (0.5 * ell) * dirs
    straight_z = (np.arange(p.n_links) + 0.5) * ell
    potential = -link_mass * float(np.sum(coms @ gravity) - np.sum(straight_z * gravity[2]))
    return kinetic + elastic + potential


def static_equilibrium(u, p: RodParams, tol: float = 1e-8,
                       max_iter: int = 200) -> RodState:
    """Configuration where elastic, gravity, and actuation torques balance.

    Damped Newton with backtracking line search, seeded from the straight
    configuration.  The Newton matrix uses central finite differences of the
    torque residual.  Raises ConvergenceError with the final residual if the
    tolerance (in N*m, max-norm) is not met within ``max_iter`` iterations.
    """
    u = check_actuation(u, p)
    n = p.n_links

    def residual(qv):
        return _joint_torques(qv.reshape(n, 2), u, p).ravel()

    qv = np.zeros(2 * n)
    r = residual(qv)
    r_norm = np.max(np.abs(r))
    fd_step = 1e-6
    for _ in range(max_iter):
        if r_norm < tol:
            return RodState(qv.reshape(n, 2).copy(), np.zeros((n, 2)))
        jac = np.empty((2 * n, 2 * n))
        for k in range(2 * n):
            bump = np.zeros(2 * n)
            bump[k] = fd_step
            jac[:, k] = (residual(qv + bump) - residual(qv - bump)) / (2 * fd_step)
        delta = np.linalg.solve(jac, -r)
        alpha = 1.0
        while alpha > 1e-8:
            trial = qv + alpha * delta
            r_trial = residual(trial)
            trial_norm = np.max(np.abs(r_trial))
            if trial_norm < (1.0 - 1e-4 * alpha) * r_norm:
                qv, r, r_norm = trial, r_trial, trial_norm
                break
            alpha *= 0.5
        else:
            break
    if r_norm < tol:
        return RodState(qv.reshape(n, 2).copy(), np.zeros((n, 2)))
    raise ConvergenceError(
        f"static solve for u={u} stalled at residual {r_norm:.3e} N*m (tol {tol:.1e})")


def build_static_table(p: RodParams, resolution: int = 21) -> StaticTable:
    """Tabulate equilibrium tip positions on a regular actuation lattice."""
    if resolution < 5:
        raise ValueError("table resolution must be at least 5")
    p.validate()
    lim = p.tension_limit
    u1_axis = np.linspace(-lim, lim, resolution)
    u2_axis = np.linspace(-lim, lim, resolution)
    tips = np.empty((resolution, resolution, 3))
    for i, u1 in enumerate(u1_axis):
        for j, u2 in enumerate(u2_axis):
            try:
                eq = static_equilibrium(np.array([u1, u2]), p)
            except ConvergenceError as exc:
                raise ConvergenceError(
                    f"static table build failed at lattice point "
                    f"({i}, {j}) u=({u1:.6g}, {u2:.6g}): {exc}") from exc
            tips[i, j] = tip_state(eq, p).position
    d1 = np.linalg.norm(np.diff(tips, axis=0), axis=-1)
    d2 = np.linalg.norm(np.diff(tips, axis=1), axis=-1)
    cell_scale = float(max(d1.max(), d2.max()))
    return StaticTable(u1_axis, u2_axis, tips, cell_scale)


def _bilinear(table: StaticTable, u: np.ndarray):
    """Interpolated tip position and its 3x2 Jacobian at actuation u."""
    u1_axis, u2_axis, tips = table.u1_axis, table.u2_axis, table.tips
    i = int(np.clip(np.searchsorted(u1_axis, u[0]) - 1, 0, len(u1_axis) - 2))
    j = int(np.clip(np.searchsorted(u2_axis, u[1]) - 1, 0, len(u2_axis) - 2))
    h1 = u1_axis[i + 1] - u1_axis[i]
    h2 = u2_axis[j + 1] - u2_axis[j]
    s = (u[0] - u1_axis[i]) / h1
    t = (u[1] - u2_axis[j]) / h2
    p00, p01 = tips[i, j], tips[i, j + 1]
    p10, p11 = tips[i + 1, j], tips[i + 1, j + 1]
    value = ((1 - s) * (1 - t) * p00 + (1 - s) * t * p01
             + s * (1 - t) * p10 + s * t * p11)
    d_ds = (1 - t) * (p10 - p00) + t * (p11 - p01)
    d_dt = (1 - s) * (p01 - p00) + s * (p11 - p10)
    jac = np.stack([d_ds / h1, d_dt / h2], axis=1)
    return value, jac


def physics_prior(target_pos, table: StaticTable) -> PriorResult:
    """Actuation whose static tip position is nearest the target.

    Nearest-lattice seed refined by 10 Gauss-Newton steps on the bilinear
    interpolation of the table.  Targets outside the reachable surface are
    clamped to the actuation box and flagged, never rejected.
    """
    target = np.asarray(target_pos, dtype=float)
    if target.shape != (3,):
        raise ValueError(f"target position must be a 3-vector, got {target.shape}")
    if table.tips.size == 0:
        raise ValueError("static table is empty")

    dist2 = np.sum((table.tips - target) ** 2, axis=-1)
    i, j = np.unravel_index(np.argmin(dist2), dist2.shape)
    u = np.array([table.u1_axis[i], table.u2_axis[j]])
    lo = np.array([table.u1_axis[0], table.u2_axis[0]])
    hi = np.array([table.u1_axis[-1], table.u2_axis[-1]])
    for _ in range(10):
        value, jac = _bilinear(table, u)
        r = target - value
        gram = jac.T @ jac + 1e-12 * np.eye(2)
        u = np.clip(u + np.linalg.solve(gram, jac.T @ r), lo, hi)
    value, _ = _bilinear(table, u)
    out_of_range = bool(np.linalg.norm(target - value) > table.cell_scale)
    return PriorResult(u, out_of_range)
