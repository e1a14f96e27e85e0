"""Session fixtures: the desk-scale pipeline shared by the acceptance suite.

Everything runs through the command line at default configs, so the measured
numbers come from exactly the artifacts a user would build.  The pipeline is
expensive (roughly 15 minutes single-threaded) and runs once per session;
modules that do not request it never pay for it.
"""

import time

import pytest

from flowdyn import cli, dataio, flowmatch, rod_sim, rollout

VARIANTS = ("mlp_baseline", "rf", "rf_fwd")
N_SEEDS = 5


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Default-scale dataset, static table, and 3 variants x 5 training seeds."""
    root = tmp_path_factory.mktemp("desk")
    data, table = str(root / "data.fdyn"), str(root / "table.fdyn")
    timings = {}
    t0 = time.perf_counter()
    assert cli.main(["gen-data", "--out", data, "--table", table]) == 0
    timings["gen-data"] = time.perf_counter() - t0
    models = {}
    for variant in VARIANTS:
        for seed in range(N_SEEDS):
            out = str(root / f"{variant}_s{seed}.fmnn")
            t0 = time.perf_counter()
            assert cli.main(["train", "--data", data, "--table", table,
                             "--variant", variant.replace("_", "-"),
                             "--seed", str(seed), "--out", out]) == 0
            timings[(variant, seed)] = time.perf_counter() - t0
            models[(variant, seed)] = out
    return {"root": root, "dataset": data, "table": table, "models": models,
            "timings": timings}


@pytest.fixture(scope="session")
def desk_scores(desk):
    """Circle-tracking RMSE (m) per variant/seed; rollout noise seed = train seed."""
    params = rod_sim.RodParams()
    table, _ = dataio.load_static_table(desk["table"])
    ref = rollout.gen_reference(
        "circle", {"radius": 0.6 * table.reachable_radius()}, table=table)
    rmse = {v: [] for v in VARIANTS}
    timings = {}
    for (variant, seed), path in desk["models"].items():
        model, _ = flowmatch.load_model(path)
        t0 = time.perf_counter()
        rep, _, _ = rollout.evaluate_tracking(model, ref, params, K=10, seed=seed)
        timings[(variant, seed)] = time.perf_counter() - t0
        rmse[variant].append(rep.rmse)
    return {"rmse": rmse, "timings": timings, "table": table, "ref": ref}
