"""Excitation generation, episode recording, normalization, and persistence.

Binary container convention shared by every file this package writes: magic
"FDYN", u32 format version, a 4-byte record tag, then little-endian payloads
with explicit counts.  Network weight files use their own magic ("FMNN", see
neural.py) but reuse the primitives here.  All writes are atomic (temp file
in the target directory, then os.replace).
"""

from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
import os
import struct
import tempfile

import numpy as np

from . import rod_sim
from .rod_sim import RodParams, StaticTable, TaskState

MAGIC = b"FDYN"
FORMAT_VERSION = 1
DATASET_TAG = b"DSET"
TABLE_TAG = b"STBL"

CONTROL_DT = 0.01          # control interval, s
SCALER_GROUPS = ("state", "act", "res")
STD_FLOOR = 1e-8


class FormatError(ValueError):
    """Container-level problem in a file this package wrote."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


# ---------------------------------------------------------------------------
# low-level binary helpers

def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise TruncationError(
            f"{getattr(f, 'name', '<stream>')}: expected {n} bytes, got {len(data)}")
    return data


def _write_u32(f, value):
    f.write(struct.pack("<I", value))


def _read_u32(f):
    return struct.unpack("<I", _read_exact(f, 4))[0]


def _write_u64(f, value):
    f.write(struct.pack("<Q", value))


def _read_u64(f):
    return struct.unpack("<Q", _read_exact(f, 8))[0]


def _write_f64(f, value):
    f.write(struct.pack("<d", value))


def _read_f64(f):
    return struct.unpack("<d", _read_exact(f, 8))[0]


def _write_array(f, arr):
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(f, shape):
    count = int(np.prod(shape))
    data = _read_exact(f, 8 * count)
    return np.frombuffer(data, dtype="<f8").reshape(shape).copy()


def write_header(f, tag, magic=MAGIC):
    f.write(magic)
    _write_u32(f, FORMAT_VERSION)
    f.write(tag)


def read_header(f, tag, magic=MAGIC):
    got = _read_exact(f, 4)
    if got != magic:
        raise BadMagicError(
            f"{getattr(f, 'name', '<stream>')}: bad magic {got!r}, expected {magic!r}")
    version = _read_u32(f)
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{getattr(f, 'name', '<stream>')}: format version {version}, "
            f"this build reads version {FORMAT_VERSION}")
    got_tag = _read_exact(f, 4)
    if got_tag != tag:
        raise FormatError(
            f"{getattr(f, 'name', '<stream>')}: record tag {got_tag!r}, expected {tag!r}")


@contextmanager
def atomic_write(path):
    """Open a temp file beside path for writing; on success rename over path."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------------
# excitation and episodes

@dataclass(frozen=True)
class ExcitationSpec:
    """Seeded polynomial tension profile for one recorded episode."""

    seed: int
    degree: int = 5
    duration: float = 2.0
    amplitude_bound: float = 1.5
    smoothing: float | None = 0.05

    def validate(self):
        if self.degree < 0:
            raise ValueError("polynomial degree must be non-negative")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.amplitude_bound < 0:
            raise ValueError("amplitude_bound must be non-negative")
        if self.smoothing is not None and not self.smoothing > 0:
            raise ValueError("smoothing time constant must be positive or None")


@dataclass
class Episode:
    """Recorded open-loop run: tip states at dt spacing plus the applied controls."""

    states: list
    controls: np.ndarray
    dt: float
    spec: ExcitationSpec

    def __post_init__(self):
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("episode needs exactly one more state than controls")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def state_matrix(self):
        return np.stack([s.as_vector() for s in self.states])


@dataclass
class TransitionTuple:
    x_t: TaskState
    x_next: TaskState
    u_t: np.ndarray
    u_phys: np.ndarray
    eta_t: np.ndarray


def gen_excitation(spec: ExcitationSpec, dt: float = CONTROL_DT) -> np.ndarray:
    """Per-channel random polynomial in normalized time, shape (steps, 2).

    Coefficients are uniform on [-1, 1]; each channel is rescaled so its peak
    magnitude equals a seeded fraction in [0.3, 1.0] of amplitude_bound, then
    optionally passed through a first-order low-pass starting from zero so
    profiles ramp in softly.  Draw order (coeffs, fraction, per channel) is
    part of the format: changing it changes every dataset.
    """
    spec.validate()
    steps = int(round(spec.duration / dt))
    if steps < 1:
        raise ValueError("duration shorter than one control interval")
    rng = np.random.default_rng(spec.seed)
    tt = np.arange(steps) * dt / spec.duration
    profile = np.empty((steps, 2))
    for ch in range(2):
        coeffs = rng.uniform(-1.0, 1.0, spec.degree + 1)
        frac = rng.uniform(0.3, 1.0)
        raw = np.polynomial.polynomial.polyval(tt, coeffs)
        peak = np.max(np.abs(raw))
        if peak < 1e-12:
            profile[:, ch] = 0.0
            continue
        profile[:, ch] = raw * (frac * spec.amplitude_bound / peak)
    if spec.smoothing is not None:
        alpha = dt / (spec.smoothing + dt)
        y = np.zeros(2)
        for k in range(steps):
            y = y + alpha * (profile[k] - y)
            profile[k] = y
    return profile


def rollout_episode(spec: ExcitationSpec, p: RodParams,
                    dt: float = CONTROL_DT) -> Episode:
    """Drive the plant from rest under the spec's excitation and record tips."""
    if spec.amplitude_bound > p.tension_limit:
        raise ValueError(
            f"amplitude_bound {spec.amplitude_bound} exceeds tension limit "
            f"{p.tension_limit}")
    controls = gen_excitation(spec, dt)
    try:
        rod_states = rod_sim.simulate(rod_sim.rest_state(p), controls, p, dt)
    except ValueError as exc:
        raise ValueError(f"episode seed {spec.seed}: {exc}") from exc
    states = [rod_sim.tip_state(s, p) for s in rod_states]
    return Episode(states, controls, dt, spec)


def extract_transitions(episode: Episode, table: StaticTable):
    """One TransitionTuple per control step; the prior is evaluated at x_next."""
    out = []
    for k in range(len(episode.controls)):
        x_t = episode.states[k]
        x_next = episode.states[k + 1]
        u_t = np.asarray(episode.controls[k], dtype=float)
        u_phys = rod_sim.physics_prior(x_next.position, table).u
        out.append(TransitionTuple(x_t, x_next, u_t, u_phys, u_t - u_phys))
    return out


# ---------------------------------------------------------------------------
# normalization

@dataclass
class Scaler:
    """Per-channel affine normalization for the state/actuation/residual groups."""

    mean: dict
    std: dict
    floored: dict

    @classmethod
    def identity(cls):
        dims = {"state": 6, "act": 2, "res": 2}
        return cls({g: np.zeros(d) for g, d in dims.items()},
                   {g: np.ones(d) for g, d in dims.items()},
                   {g: np.zeros(d, dtype=bool) for g, d in dims.items()})

    def forward(self, group, x):
        return transform(x, self, group, "forward")

    def inverse(self, group, x):
        return transform(x, self, group, "inverse")

    def allclose(self, other, tol=0.0):
        for g in SCALER_GROUPS:
            if (np.max(np.abs(self.mean[g] - other.mean[g])) > tol
                    or np.max(np.abs(self.std[g] - other.std[g])) > tol):
                return False
        return True


def fit_scaler(tuples) -> Scaler:
    """Population mean/std per channel; constant channels floored and flagged."""
    if len(tuples) < 2:
        raise ValueError("need at least 2 tuples to fit a scaler")
    states = np.concatenate([np.stack([t.x_t.as_vector() for t in tuples]),
                             np.stack([t.x_next.as_vector() for t in tuples])])
    groups = {"state": states,
              "act": np.stack([t.u_t for t in tuples]),
              "res": np.stack([t.eta_t for t in tuples])}
    mean, std, floored = {}, {}, {}
    for g, data in groups.items():
        mean[g] = data.mean(axis=0)
        raw_std = data.std(axis=0)
        floored[g] = raw_std < STD_FLOOR
        std[g] = np.maximum(raw_std, STD_FLOOR)
    return Scaler(mean, std, floored)


def transform(x, scaler: Scaler, group: str, direction: str = "forward"):
    if group not in SCALER_GROUPS:
        raise ValueError(f"unknown scaler group {group!r}")
    x = np.asarray(x, dtype=float)
    mean, std = scaler.mean[group], scaler.std[group]
    if x.shape[-1] != mean.shape[0]:
        raise ValueError(
            f"group {group!r} expects {mean.shape[0]} channels, got {x.shape[-1]}")
    if direction == "forward":
        return (x - mean) / std
    if direction == "inverse":
        return x * std + mean
    raise ValueError(f"direction must be forward or inverse, got {direction!r}")


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    """Flat transition records in struct-of-arrays layout plus their scaler.

    meta keys: n_episodes, dt, params_hash, version.
    """

    x_t: np.ndarray
    x_next: np.ndarray
    u_t: np.ndarray
    u_phys: np.ndarray
    eta_t: np.ndarray
    scaler: Scaler
    meta: dict

    def __len__(self):
        return self.x_t.shape[0]

    def __post_init__(self):
        n = self.x_t.shape[0]
        shapes = {"x_t": (n, 6), "x_next": (n, 6), "u_t": (n, 2),
                  "u_phys": (n, 2), "eta_t": (n, 2)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"dataset field {name} has shape "
                                 f"{getattr(self, name).shape}, expected {shape}")

    def iter_tuples(self):
        for k in range(len(self)):
            yield TransitionTuple(TaskState.from_vector(self.x_t[k]),
                                  TaskState.from_vector(self.x_next[k]),
                                  self.u_t[k].copy(), self.u_phys[k].copy(),
                                  self.eta_t[k].copy())


def dataset_from_tuples(tuples, scaler: Scaler, meta: dict) -> Dataset:
    if tuples:
        x_t = np.stack([t.x_t.as_vector() for t in tuples])
        x_next = np.stack([t.x_next.as_vector() for t in tuples])
        u_t = np.stack([t.u_t for t in tuples])
        u_phys = np.stack([t.u_phys for t in tuples])
        eta_t = np.stack([t.eta_t for t in tuples])
    else:
        x_t = np.zeros((0, 6))
        x_next = np.zeros((0, 6))
        u_t = np.zeros((0, 2))
        u_phys = np.zeros((0, 2))
        eta_t = np.zeros((0, 2))
    return Dataset(x_t, x_next, u_t, u_phys, eta_t, scaler, dict(meta))


def build_dataset(base_spec: ExcitationSpec, n_episodes: int, p: RodParams,
                  table: StaticTable, dt: float = CONTROL_DT,
                  workers: int = 1) -> Dataset:
    """Roll out episodes with per-episode seeds base+i and merge in seed order.

    The merge order is fixed by the seed index, so the result is byte-identical
    for any worker count.
    """
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    specs = [replace(base_spec, seed=base_spec.seed + i) for i in range(n_episodes)]

    def one(spec):
        return extract_transitions(rollout_episode(spec, p, dt), table)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_episode = list(pool.map(one, specs))
    else:
        per_episode = [one(s) for s in specs]
    tuples = [t for ep in per_episode for t in ep]
    scaler = fit_scaler(tuples)
    meta = {"n_episodes": n_episodes, "dt": dt,
            "params_hash": p.stable_hash(), "version": FORMAT_VERSION}
    return dataset_from_tuples(tuples, scaler, meta)


# ---------------------------------------------------------------------------
# persistence

def write_scaler_block(f, scaler: Scaler | None):
    if scaler is None:
        _write_u32(f, 0)
        return
    _write_u32(f, len(SCALER_GROUPS))
    for g in SCALER_GROUPS:
        dim = scaler.mean[g].shape[0]
        _write_u32(f, dim)
        _write_array(f, scaler.mean[g])
        _write_array(f, scaler.std[g])
        f.write(np.asarray(scaler.floored[g], dtype=np.uint8).tobytes())


def read_scaler_block(f) -> Scaler | None:
    n_groups = _read_u32(f)
    if n_groups == 0:
        return None
    if n_groups != len(SCALER_GROUPS):
        raise FormatError(f"scaler block has {n_groups} groups, "
                          f"expected {len(SCALER_GROUPS)}")
    mean, std, floored = {}, {}, {}
    for g in SCALER_GROUPS:
        dim = _read_u32(f)
        mean[g] = _read_array(f, (dim,))
        std[g] = _read_array(f, (dim,))
        floored[g] = np.frombuffer(_read_exact(f, dim), dtype=np.uint8).astype(bool)
    return Scaler(mean, std, floored)


def save_dataset(path, dataset: Dataset):
    with atomic_write(path) as f:
        write_header(f, DATASET_TAG)
        _write_u64(f, len(dataset))
        _write_u32(f, int(dataset.meta.get("n_episodes", 0)))
        _write_f64(f, float(dataset.meta.get("dt", CONTROL_DT)))
        _write_u64(f, int(dataset.meta.get("params_hash", 0)))
        for name in ("x_t", "x_next", "u_t", "u_phys", "eta_t"):
            _write_array(f, getattr(dataset, name))
        write_scaler_block(f, dataset.scaler)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        read_header(f, DATASET_TAG)
        n = _read_u64(f)
        meta = {"n_episodes": _read_u32(f), "dt": _read_f64(f),
                "params_hash": _read_u64(f), "version": FORMAT_VERSION}
        x_t = _read_array(f, (n, 6))
        x_next = _read_array(f, (n, 6))
        u_t = _read_array(f, (n, 2))
        u_phys = _read_array(f, (n, 2))
        eta_t = _read_array(f, (n, 2))
        scaler = read_scaler_block(f)
        if scaler is None:
            scaler = Scaler.identity()
    return Dataset(x_t, x_next, u_t, u_phys, eta_t, scaler, meta)


def write_table_block(f, table: StaticTable, params_hash: int = 0):
    _write_u32(f, len(table.u1_axis))
    _write_u32(f, len(table.u2_axis))
    _write_u64(f, params_hash)
    _write_f64(f, table.cell_scale)
    _write_array(f, table.u1_axis)
    _write_array(f, table.u2_axis)
    _write_array(f, table.tips)


def read_table_block(f):
    r1 = _read_u32(f)
    r2 = _read_u32(f)
    params_hash = _read_u64(f)
    cell_scale = _read_f64(f)
    u1_axis = _read_array(f, (r1,))
    u2_axis = _read_array(f, (r2,))
    tips = _read_array(f, (r1, r2, 3))
    return StaticTable(u1_axis, u2_axis, tips, cell_scale), params_hash


def save_static_table(path, table: StaticTable, params_hash: int = 0):
    with atomic_write(path) as f:
        write_header(f, TABLE_TAG)
        write_table_block(f, table, params_hash)


def load_static_table(path):
    """Returns (table, params_hash); callers decide whether the hash must match."""
    with open(path, "rb") as f:
        read_header(f, TABLE_TAG)
        return read_table_block(f)


def export_transitions_csv(path, dataset: Dataset):
    """Record-per-row CSV for external plotting; t is the flat record index * dt."""
    dt = float(dataset.meta.get("dt", CONTROL_DT))
    header = "t,px,py,pz,vx,vy,vz,u1,u2,uphys1,uphys2"
    with atomic_write(path) as f:
        f.write((header + "\n").encode())
        for k in range(len(dataset)):
            fields = [k * dt, *dataset.x_t[k], *dataset.u_t[k], *dataset.u_phys[k]]
            f.write((",".join(format(v, ".17g") for v in fields) + "\n").encode())
