"""Command-line entry point for reproducible data/train/evaluate runs.

Configuration is plain INI (sectioned key=value, diff-able); command-line
flags override file values, and --dry-run prints the resolved configuration
without touching the filesystem.  Exit codes: 0 success, 1 usage or config
problem, 2 data problem (missing/corrupt/mismatched files), 3 numerical
failure.  FLOWDYN_THREADS caps the episode-generation worker count; results
are identical for any worker count, only wall time changes.
"""

import argparse
import configparser
from dataclasses import dataclass, replace
import os
import sys
import time

import numpy as np

from . import dataio, flowmatch, neural, rod_sim, rollout
from .dataio import ExcitationSpec, FormatError
from .flowmatch import FlowTrainConfig, TrainingDivergedError
from .rod_sim import ConvergenceError, RodParams

LATENCY_HEADER = ("median_ms", "p95_ms", "K", "n")
RECON_HEADER = ("episode_seed", "mae_u1", "mae_u2", "mae_frac_u1", "mae_frac_u2")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    plant: RodParams
    data: dict
    training: FlowTrainConfig
    evaluation: dict
    paths: dict


def default_config() -> RunConfig:
    workers = os.environ.get("FLOWDYN_THREADS", "1")
    try:
        workers = max(1, int(workers))
    except ValueError as exc:
        raise UsageError(f"FLOWDYN_THREADS must be an integer: {exc}") from exc
    return RunConfig(
        plant=RodParams(),
        data={"episodes": 300, "seed": 42, "degree": 5, "duration": 2.0,
              "amplitude_bound": 1.5, "smoothing": 0.05,
              "table_resolution": 21, "workers": workers},
        training=FlowTrainConfig(),
        evaluation={"trajectories": ["circle"], "seeds": 5, "k": 10,
                    "fixed_noise": False, "radius_frac": 0.6, "period": 1.2,
                    "duration": 2.4, "period_max": 5.0, "period_min": 1.2,
                    "burst_duration": 10.0, "recon_episodes": 10,
                    "queries": 1000},
        paths={"dataset": "data.fdyn", "table": "static_table.fdyn",
               "model": "model.fmnn", "reports": "reports"})


_PLANT_FIELDS = {"length": float, "diameter": float, "cable_offset": float,
                 "youngs_modulus": float, "damping": float, "density": float,
                 "n_links": int, "tension_limit": float, "substeps": int,
                 "gravity": "vec3"}
_DATA_FIELDS = {"episodes": int, "seed": int, "degree": int, "duration": float,
                "amplitude_bound": float, "smoothing": "opt_float",
                "table_resolution": int, "workers": int}
_TRAIN_FIELDS = {"variant": str, "lambda_cons": float, "inference_steps": int,
                 "epochs": int, "batch_size": int, "lr": float, "seed": int,
                 "consistency_estimator": str, "k_train": int,
                 "hidden": "ints", "surrogate_hidden": "ints"}
_EVAL_FIELDS = {"trajectories": "strs", "seeds": int, "k": int,
                "fixed_noise": "bool", "radius_frac": float, "period": float,
                "duration": float, "period_max": float, "period_min": float,
                "burst_duration": float, "recon_episodes": int, "queries": int}
_PATH_FIELDS = {"dataset": str, "table": str, "model": str, "reports": str}


def _convert(section, key, raw, kind):
    try:
        if kind is float or kind is int or kind is str:
            return kind(raw)
        if kind == "vec3":
            parts = [float(v) for v in raw.split(",")]
            if len(parts) != 3:
                raise ValueError("need 3 comma-separated numbers")
            return tuple(parts)
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "strs":
            return [v.strip() for v in raw.split(",") if v.strip()]
        if kind == "opt_float":
            return None if raw.strip().lower() in ("none", "off") else float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError("expected a boolean")
    except ValueError as exc:
        raise UsageError(f"config [{section}] {key} = {raw!r}: {exc}") from exc
    raise UsageError(f"config [{section}] {key}: unsupported type")


def load_config_file(path, cfg: RunConfig) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f, source=path)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except configparser.Error as exc:
        raise UsageError(f"config parse error: {exc}") from exc

    tables = {"plant": _PLANT_FIELDS, "data": _DATA_FIELDS,
              "training": _TRAIN_FIELDS, "evaluation": _EVAL_FIELDS,
              "paths": _PATH_FIELDS}
    plant_kw, train_kw = {}, {}
    for section in parser.sections():
        if section not in tables:
            raise UsageError(f"config section [{section}] is not recognized")
        fields = tables[section]
        for key, raw in parser.items(section):
            if key not in fields:
                raise UsageError(f"config key [{section}] {key} is not recognized")
            value = _convert(section, key, raw, fields[key])
            if section == "plant":
                plant_kw[key] = value
            elif section == "training":
                train_kw[key] = value
            else:
                getattr(cfg, section)[key] = value
    if plant_kw:
        cfg = replace(cfg, plant=replace(cfg.plant, **plant_kw))
    if train_kw:
        cfg = replace(cfg, training=replace(cfg.training, **train_kw))
    return cfg


def render_config(cfg: RunConfig) -> str:
    lines = ["[plant]"]
    for key in _PLANT_FIELDS:
        value = getattr(cfg.plant, key)
        if key == "gravity":
            value = ",".join(format(g, "g") for g in value)
        lines.append(f"{key} = {value}")
    for section, fields, source in (("data", _DATA_FIELDS, cfg.data),
                                    ("evaluation", _EVAL_FIELDS, cfg.evaluation),
                                    ("paths", _PATH_FIELDS, cfg.paths)):
        lines.append(f"\n[{section}]")
        for key in fields:
            value = source[key]
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
    lines.append("\n[training]")
    for key in _TRAIN_FIELDS:
        value = getattr(cfg.training, key)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="flowdyn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--dry-run", action="store_true",
                       help="print the resolved config and exit")
        return p

    p = add("gen-data", "generate the excitation dataset and static table")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="dataset path")
    p.add_argument("--table", help="static table path")

    p = add("train", "train an inverse model on a dataset")
    p.add_argument("--data", help="dataset path")
    p.add_argument("--table", help="static table path")
    p.add_argument("--out", help="model path")
    p.add_argument("--variant",
                   choices=["rf", "rf-fwd", "rf-physical", "mlp-baseline"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-cons", type=float)
    p.add_argument("--estimator", choices=list(flowmatch.ESTIMATORS))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = add("evaluate", "run tracking metrics over trajectories and seeds")
    p.add_argument("--model")
    p.add_argument("--table")
    p.add_argument("--traj", help="comma-separated trajectory kinds")
    p.add_argument("--seeds", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--fixed-noise", action="store_true", default=None)
    p.add_argument("--out", help="metrics CSV path")

    p = add("rollout", "run one trajectory and export achieved vs reference")
    p.add_argument("--model")
    p.add_argument("--table")
    p.add_argument("--traj")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--fixed-noise", action="store_true", default=None)
    p.add_argument("--out", help="trajectory CSV path")

    p = add("reconstruct", "forward-then-inverse input reconstruction")
    p.add_argument("--model")
    p.add_argument("--episodes", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--fixed-noise", action="store_true", default=None)
    p.add_argument("--out", help="reconstruction CSV path")

    p = add("bench-latency", "time sample_control; first 100 queries warm up")
    p.add_argument("--model")
    p.add_argument("--queries", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="latency CSV path")

    p = add("export", "re-emit an artifact as CSV")
    p.add_argument("--in", dest="source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="csv")
    return parser


# ---------------------------------------------------------------------------
# helpers shared by commands

def _reports_path(cfg, name):
    os.makedirs(cfg.paths["reports"], exist_ok=True)
    return os.path.join(cfg.paths["reports"], name)


def _load_table(cfg, flag_value):
    path = flag_value or cfg.paths["table"]
    if not os.path.exists(path):
        raise DataError(f"static table not found: {path} (run gen-data first)")
    table, params_hash = dataio.load_static_table(path)
    expect = cfg.plant.stable_hash()
    if params_hash != 0 and params_hash != expect:
        raise DataError(
            f"static table {path} was built for different plant parameters")
    return table


def _load_model(cfg, flag_value):
    path = flag_value or cfg.paths["model"]
    if not os.path.exists(path):
        raise DataError(f"model not found: {path}")
    return flowmatch.load_model(path), path


def _reference(cfg, kind, table):
    ev = cfg.evaluation
    radius = ev["radius_frac"] * table.reachable_radius()
    if kind == "circle":
        params = {"radius": radius, "period": ev["period"],
                  "duration": ev["duration"]}
    elif kind == "heart":
        params = {"radius": radius, "period": ev["period"],
                  "duration": ev["duration"]}
    elif kind == "random_smooth":
        params = {"radius": radius, "duration": ev["duration"], "seed": 0}
    elif kind == "burst_circle":
        params = {"radius": radius, "period_max": ev["period_max"],
                  "period_min": ev["period_min"],
                  "duration": ev["burst_duration"]}
    else:
        raise UsageError(f"trajectory kind {kind!r} is not runnable here")
    return rollout.gen_reference(kind, params, table=table)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, cfg):
    d = cfg.data
    spec = ExcitationSpec(seed=d["seed"], degree=d["degree"],
                          duration=d["duration"],
                          amplitude_bound=d["amplitude_bound"],
                          smoothing=d["smoothing"])
    table = rod_sim.build_static_table(cfg.plant, d["table_resolution"])
    table_path = args.table or cfg.paths["table"]
    dataio.save_static_table(table_path, table, cfg.plant.stable_hash())
    dataset = dataio.build_dataset(spec, d["episodes"], cfg.plant, table,
                                   workers=d["workers"])
    out = args.out or cfg.paths["dataset"]
    dataio.save_dataset(out, dataset)
    print(f"gen-data: {d['episodes']} episodes, {len(dataset)} transitions, "
          f"table {table_path} -> {out}")
    return 0


def cmd_train(args, cfg):
    data_path = args.data or cfg.paths["dataset"]
    if not os.path.exists(data_path):
        raise DataError(f"dataset not found: {data_path}")
    dataset = dataio.load_dataset(data_path)
    if len(dataset) < 2:
        raise DataError(f"dataset {data_path} is too small to train on")
    if dataset.meta["params_hash"] not in (0, cfg.plant.stable_hash()):
        raise DataError(
            f"dataset {data_path} was generated with different plant parameters")

    table = None
    table_path = args.table or cfg.paths["table"]
    if os.path.exists(table_path):
        table = _load_table(cfg, table_path)
    tc = cfg.training
    if flowmatch.normalize_variant(tc.variant) == "rf_physical" and table is None:
        raise DataError("rf_physical training needs the static table; "
                        f"missing {table_path}")

    model, log = flowmatch.train_inverse(dataset, tc, table=table,
                                         tension_limit=cfg.plant.tension_limit)
    out = args.out or cfg.paths["model"]
    flowmatch.save_model(out, model, lambda_cons=tc.lambda_cons,
                         consistency_estimator=tc.consistency_estimator,
                         inference_steps=tc.inference_steps)
    loss_path = os.path.splitext(out)[0] + "_loss.csv"
    with dataio.atomic_write(loss_path) as f:
        f.write(b"epoch,loss_fm,loss_cons,loss_total\n")
        for row in log:
            f.write((f"{row['epoch']},{row['loss_fm']:.17g},"
                     f"{row['loss_cons']:.17g},{row['loss_total']:.17g}\n")
                    .encode())
    print(f"train: {model.variant} seed {tc.seed}, final loss "
          f"{log[-1]['loss_total']:.5f} -> {out} (losses: {loss_path})")
    return 0


def cmd_evaluate(args, cfg):
    (model, manifest), model_path = _load_model(cfg, args.model)
    table = model.prior_table or _load_table(cfg, args.table)
    ev = cfg.evaluation
    kinds = ([v.strip() for v in args.traj.split(",") if v.strip()]
             if args.traj else ev["trajectories"])
    n_seeds = args.seeds if args.seeds is not None else ev["seeds"]
    k = args.k if args.k is not None else ev["k"]
    fixed = args.fixed_noise if args.fixed_noise is not None else ev["fixed_noise"]
    model_name = os.path.splitext(os.path.basename(model_path))[0]

    rows = []
    for kind in kinds:
        ref = _reference(cfg, kind, table)
        for seed in range(n_seeds):
            rep, _, _ = rollout.evaluate_tracking(model, ref, cfg.plant, K=k,
                                                  seed=seed, fixed_noise=fixed)
            rows.append({"model": model_name, "variant": model.variant,
                         "trajectory": kind, "seed": seed,
                         "rmse_mm": rep.rmse * 1000.0,
                         "phase_lag_s": rep.phase_lag,
                         "input_energy": rep.input_energy,
                         "peak_speed": rep.peak_speed})
    out = args.out or _reports_path(cfg, "metrics.csv")
    rollout.export_metrics_csv(out, rows)
    mean_rmse = np.mean([r["rmse_mm"] for r in rows])
    print(f"evaluate: {len(rows)} runs, mean rmse {mean_rmse:.2f} mm -> {out}")
    return 0


def cmd_rollout(args, cfg):
    (model, _), _ = _load_model(cfg, args.model)
    table = model.prior_table or _load_table(cfg, args.table)
    kind = args.traj or cfg.evaluation["trajectories"][0]
    seed = args.seed if args.seed is not None else 0
    k = args.k if args.k is not None else cfg.evaluation["k"]
    fixed = (args.fixed_noise if args.fixed_noise is not None
             else cfg.evaluation["fixed_noise"])
    ref = _reference(cfg, kind, table)
    rep, _, achieved = rollout.evaluate_tracking(model, ref, cfg.plant, K=k,
                                                 seed=seed, fixed_noise=fixed)
    out = args.out or _reports_path(cfg, f"trajectory_{kind}.csv")
    rollout.export_trajectory_csv(out, achieved, ref)
    print(f"rollout: {kind} rmse {rep.rmse*1000:.2f} mm, lag {rep.phase_lag:.3f} s, "
          f"energy {rep.input_energy:.3f} -> {out}")
    return 0


def cmd_reconstruct(args, cfg):
    (model, _), _ = _load_model(cfg, args.model)
    d, ev = cfg.data, cfg.evaluation
    n_episodes = (args.episodes if args.episodes is not None
                  else ev["recon_episodes"])
    k = args.k if args.k is not None else ev["k"]
    fixed = (args.fixed_noise if args.fixed_noise is not None
             else ev["fixed_noise"])
    base = ExcitationSpec(seed=0, degree=d["degree"], duration=d["duration"],
                          amplitude_bound=d["amplitude_bound"],
                          smoothing=d["smoothing"])
    # held-out seeds start right after the training block
    first = d["seed"] + d["episodes"]
    rows = []
    for i in range(n_episodes):
        spec = replace(base, seed=first + i)
        episode = dataio.rollout_episode(spec, cfg.plant)
        _, mae, frac = rollout.reconstruct_inputs(model, episode, K=k, seed=i,
                                                  fixed_noise=fixed)
        rows.append((spec.seed, mae[0], mae[1], frac[0], frac[1]))
    out = args.out or _reports_path(cfg, "reconstruction.csv")
    with dataio.atomic_write(out) as f:
        f.write((",".join(RECON_HEADER) + "\n").encode())
        for row in rows:
            f.write((",".join(format(v, ".17g") if isinstance(v, float)
                              else str(v) for v in row) + "\n").encode())
    mean_frac = float(np.mean([[r[3], r[4]] for r in rows]))
    print(f"reconstruct: {n_episodes} held-out episodes, mean MAE "
          f"{100*mean_frac:.3f}% of range -> {out}")
    return 0


def cmd_bench_latency(args, cfg):
    (model, manifest), _ = _load_model(cfg, args.model)
    n = args.queries if args.queries is not None else cfg.evaluation["queries"]
    k = args.k if args.k is not None else manifest["inference_steps"]
    seed = args.seed if args.seed is not None else 0
    if n < 1:
        raise UsageError("--queries must be positive")
    rng = np.random.default_rng(seed)
    sc = model.scaler
    warmup = 100
    times = np.empty(n)
    for i in range(warmup + n):
        x_t = sc.inverse("state", rng.standard_normal(6))
        x_next = sc.inverse("state", rng.standard_normal(6))
        z = rng.standard_normal(2)
        start = time.perf_counter()
        flowmatch.sample_control(model, x_t, x_next, z, k)
        elapsed = time.perf_counter() - start
        if i >= warmup:
            times[i - warmup] = elapsed
    median_ms = float(np.median(times) * 1e3)
    p95_ms = float(np.quantile(times, 0.95) * 1e3)
    out = args.out or _reports_path(cfg, "latency.csv")
    with dataio.atomic_write(out) as f:
        f.write((",".join(LATENCY_HEADER) + "\n").encode())
        f.write(f"{median_ms:.6f},{p95_ms:.6f},{k},{n}\n".encode())
    dims = "x".join(str(d) for d in model.net.layer_dims)
    print(f"bench-latency: median {median_ms:.3f} ms, p95 {p95_ms:.3f} ms "
          f"(K={k}, net {dims}, n={n}) -> {out}")
    return 0


def cmd_export(args, cfg):
    if args.format != "csv":
        raise UsageError(f"unknown export format {args.format!r}")
    src = args.source
    if not os.path.exists(src):
        raise DataError(f"export source not found: {src}")
    with open(src, "rb") as f:
        head = f.read(8)
    if head[:4] == dataio.MAGIC:
        tag = head[4:8]
        with open(src, "rb") as f:
            f.seek(4)
            version_and_tag = f.read(8)
        kind_tag = version_and_tag[4:]
        if kind_tag == dataio.DATASET_TAG:
            dataio.export_transitions_csv(args.out, dataio.load_dataset(src))
            print(f"export: dataset {src} -> {args.out}")
            return 0
        if kind_tag == dataio.TABLE_TAG:
            table, _ = dataio.load_static_table(src)
            with dataio.atomic_write(args.out) as f:
                f.write(b"u1,u2,tipx,tipy,tipz\n")
                for i, u1 in enumerate(table.u1_axis):
                    for j, u2 in enumerate(table.u2_axis):
                        row = [u1, u2, *table.tips[i, j]]
                        f.write((",".join(format(v, ".17g") for v in row)
                                 + "\n").encode())
            print(f"export: static table {src} -> {args.out}")
            return 0
        raise DataError(f"export source {src} has unsupported tag {kind_tag!r}")
    with open(src, newline="") as f:
        first = f.readline().strip()
    if first == ",".join(rollout.METRICS_HEADER):
        rollout.export_metrics_csv(args.out, rollout.read_metrics_csv(src))
        print(f"export: metrics {src} -> {args.out}")
        return 0
    if first == "t,ax,ay,az,rx,ry,rz":
        with open(src, "rb") as f:
            payload = f.read()
        with dataio.atomic_write(args.out) as f:
            f.write(payload)
        print(f"export: trajectory {src} -> {args.out}")
        return 0
    raise DataError(f"export source {src} is not a recognized artifact")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train,
            "evaluate": cmd_evaluate, "rollout": cmd_rollout,
            "reconstruct": cmd_reconstruct, "bench-latency": cmd_bench_latency,
            "export": cmd_export}

_FLAG_OVERRIDES = {
    "gen-data": {"episodes": ("data", "episodes"), "seed": ("data", "seed"),
                 "duration": ("data", "duration"), "workers": ("data", "workers")},
    "train": {"variant": ("training", "variant"), "epochs": ("training", "epochs"),
              "seed": ("training", "seed"),
              "lambda_cons": ("training", "lambda_cons"),
              "estimator": ("training", "consistency_estimator"),
              "batch_size": ("training", "batch_size"), "lr": ("training", "lr")},
}


def _apply_flag_overrides(args, cfg: RunConfig) -> RunConfig:
    for attr, (section, key) in _FLAG_OVERRIDES.get(args.command, {}).items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if section == "training":
            cfg = replace(cfg, training=replace(cfg.training, **{key: value}))
        else:
            getattr(cfg, section)[key] = value
    return cfg


def run(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing command")
    cfg = default_config()
    if args.config:
        cfg = load_config_file(args.config, cfg)
    cfg = _apply_flag_overrides(args, cfg)
    try:
        cfg.plant.validate()
        cfg.training.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.dry_run:
        print(render_config(cfg))
        return 0
    return COMMANDS[args.command](args, cfg)


def main(argv=None) -> int:
    try:
        return run(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print(_build_parser().format_usage(), file=sys.stderr, end="")
        return 1
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, ConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
