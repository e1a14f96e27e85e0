"""End-to-end command-line tests at toy scale.

Each command runs in-process through cli.main on a tiny config (3 episodes,
5x5 table, 2 epochs), so the full artifact flow is covered in seconds.  Byte
comparisons pin reproducibility; exit codes pin the error contract.
"""

import os

import numpy as np
import pytest

from flowdyn import cli, dataio, flowmatch, rollout


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny config plus generated dataset/table/model, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(f"""
[data]
episodes = 3
seed = 5
duration = 0.3
table_resolution = 5

[training]
epochs = 2
hidden = 16,16
surrogate_hidden = 8,8
batch_size = 64

[evaluation]
seeds = 2
period = 1.0
duration = 1.2
queries = 5
recon_episodes = 2

[paths]
dataset = {root}/data.fdyn
table = {root}/table.fdyn
model = {root}/model.fmnn
reports = {root}/reports
""")
    assert cli.main(["gen-data", "--config", str(ini)]) == 0
    assert cli.main(["train", "--config", str(ini)]) == 0
    return {"root": root, "ini": str(ini), "dataset": root / "data.fdyn",
            "table": root / "table.fdyn", "model": root / "model.fmnn",
            "reports": root / "reports"}


def test_gen_data_is_reproducible_across_runs_and_workers(workspace):
    root = workspace["root"]
    out2, table2 = root / "data2.fdyn", root / "table2.fdyn"
    assert cli.main(["gen-data", "--config", workspace["ini"], "--workers", "3",
                     "--out", str(out2), "--table", str(table2)]) == 0
    assert out2.read_bytes() == workspace["dataset"].read_bytes()
    assert table2.read_bytes() == workspace["table"].read_bytes()


def test_train_writes_model_and_loss_history(workspace):
    model, manifest = flowmatch.load_model(workspace["model"])
    assert model.variant == "rf_fwd"
    assert manifest["inference_steps"] == 10
    assert model.surrogate is not None
    loss_csv = workspace["root"] / "model_loss.csv"
    lines = loss_csv.read_text().splitlines()
    assert lines[0] == "epoch,loss_fm,loss_cons,loss_total"
    assert len(lines) == 2 + 2  # header + epoch 0 + 2 training epochs
    first = [float(v) for v in lines[1].split(",")]
    assert first[0] == 0.0


def test_train_is_deterministic(workspace):
    out2 = workspace["root"] / "model_b.fmnn"
    assert cli.main(["train", "--config", workspace["ini"],
                     "--out", str(out2)]) == 0
    a, _ = flowmatch.load_model(workspace["model"])
    b, _ = flowmatch.load_model(out2)
    for wa, wb in zip(a.net.weights + a.net.biases,
                      b.net.weights + b.net.biases):
        assert np.array_equal(wa, wb)


def test_evaluate_writes_one_row_per_kind_and_seed(workspace, capfd):
    out = workspace["root"] / "metrics.csv"
    assert cli.main(["evaluate", "--config", workspace["ini"],
                     "--traj", "circle", "--seeds", "2",
                     "--out", str(out)]) == 0
    rows = rollout.read_metrics_csv(out)
    assert len(rows) == 2
    assert [r["seed"] for r in rows] == [0, 1]
    assert all(r["model"] == "model" for r in rows)
    assert all(r["variant"] == "rf_fwd" for r in rows)
    assert all(r["trajectory"] == "circle" for r in rows)
    assert all(np.isfinite(r["rmse_mm"]) for r in rows)
    assert "mean rmse" in capfd.readouterr().out


def test_rollout_exports_achieved_vs_reference(workspace):
    out = workspace["root"] / "traj.csv"
    assert cli.main(["rollout", "--config", workspace["ini"],
                     "--traj", "circle", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,ax,ay,az,rx,ry,rz"
    assert len(lines) == 121 + 1  # 1.2 s at dt=0.01, inclusive, plus header


def test_reconstruct_uses_held_out_episode_seeds(workspace):
    out = workspace["root"] / "recon.csv"
    assert cli.main(["reconstruct", "--config", workspace["ini"],
                     "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(cli.RECON_HEADER)
    assert len(lines) == 3
    seeds = [int(line.split(",")[0]) for line in lines[1:]]
    assert seeds == [8, 9]  # data.seed 5 + 3 training episodes, then +1
    fracs = [float(line.split(",")[3]) for line in lines[1:]]
    assert all(0.0 <= f <= 1.0 for f in fracs)


def test_bench_latency_reports_median_and_p95(workspace):
    out = workspace["root"] / "latency.csv"
    assert cli.main(["bench-latency", "--config", workspace["ini"],
                     "--queries", "5", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(cli.LATENCY_HEADER)
    median_ms, p95_ms, k, n = lines[1].split(",")
    assert float(median_ms) > 0.0
    assert float(p95_ms) >= float(median_ms)
    assert (int(k), int(n)) == (10, 5)


def test_dry_run_prints_config_without_side_effects(tmp_path, capfd):
    dataset = tmp_path / "data.fdyn"
    assert cli.main(["gen-data", "--dry-run", "--episodes", "7",
                     "--out", str(dataset)]) == 0
    text = capfd.readouterr().out
    assert "[data]" in text and "episodes = 7" in text
    assert "[plant]" in text and "[training]" in text
    assert not dataset.exists()
    assert list(tmp_path.iterdir()) == []


def test_flags_override_config_file(workspace, capfd):
    assert cli.main(["train", "--config", workspace["ini"], "--dry-run",
                     "--epochs", "9", "--variant", "mlp-baseline"]) == 0
    text = capfd.readouterr().out
    assert "epochs = 9" in text
    assert "variant = mlp-baseline" in text
    capfd.readouterr()
    assert cli.main(["train", "--config", workspace["ini"], "--dry-run"]) == 0
    assert "epochs = 2" in capfd.readouterr().out


def test_config_file_errors_exit_1(tmp_path, capfd):
    bad = tmp_path / "bad.ini"

    bad.write_text("[rocket]\nthrust = 9000\n")
    assert cli.main(["train", "--config", str(bad), "--dry-run"]) == 1
    assert "rocket" in capfd.readouterr().err

    bad.write_text("[data]\nepisods = 3\n")
    assert cli.main(["train", "--config", str(bad), "--dry-run"]) == 1
    assert "episods" in capfd.readouterr().err

    bad.write_text("[data]\nepisodes = many\n")
    assert cli.main(["train", "--config", str(bad), "--dry-run"]) == 1
    assert "episodes" in capfd.readouterr().err

    bad.write_text("episodes = 3\n")  # key before any section header
    assert cli.main(["train", "--config", str(bad), "--dry-run"]) == 1
    assert "parse error" in capfd.readouterr().err

    assert cli.main(["train", "--config", str(tmp_path / "missing.ini"),
                     "--dry-run"]) == 1
    assert "not found" in capfd.readouterr().err


def test_usage_errors_exit_1(capfd):
    assert cli.main([]) == 1
    assert "usage" in capfd.readouterr().err.lower()
    assert cli.main(["fly"]) == 1
    capfd.readouterr()
    assert cli.main(["train", "--warp-speed", "9"]) == 1
    capfd.readouterr()
    assert cli.main(["train", "--dry-run", "--epochs", "0"]) == 1
    assert "epochs" in capfd.readouterr().err


def test_missing_artifacts_exit_2(tmp_path, capfd):
    assert cli.main(["train", "--data", str(tmp_path / "none.fdyn")]) == 2
    assert "not found" in capfd.readouterr().err
    assert cli.main(["evaluate", "--model", str(tmp_path / "none.fmnn")]) == 2
    capfd.readouterr()
    junk = tmp_path / "junk.fdyn"
    junk.write_bytes(b"this is not a dataset, honestly")
    assert cli.main(["train", "--data", str(junk)]) == 2
    assert "magic" in capfd.readouterr().err


def test_plant_mismatch_exits_2(workspace, tmp_path, capfd):
    other = tmp_path / "other.ini"
    other.write_text(f"""
[plant]
length = 0.41

[paths]
dataset = {workspace['dataset']}
table = {workspace['table']}
model = {tmp_path}/m.fmnn
reports = {tmp_path}
""")
    assert cli.main(["train", "--config", str(other)]) == 2
    assert "different plant parameters" in capfd.readouterr().err


def test_rf_physical_without_table_exits_2(workspace, tmp_path, capfd):
    assert cli.main(["train", "--config", workspace["ini"],
                     "--variant", "rf-physical",
                     "--table", str(tmp_path / "none.fdyn"),
                     "--out", str(tmp_path / "m.fmnn")]) == 2
    assert "static table" in capfd.readouterr().err


def test_training_divergence_exits_3(workspace, tmp_path, capfd):
    # Adam steps are lr-bounded, so the loss overflows only for huge lr
    with np.errstate(over="ignore", invalid="ignore"):
        code = cli.main(["train", "--config", workspace["ini"], "--lr", "1e154",
                         "--variant", "rf", "--out", str(tmp_path / "m.fmnn")])
    assert code == 3
    assert "numerical failure" in capfd.readouterr().err


def test_export_dataset_table_and_csv_round_trips(workspace, tmp_path):
    out = tmp_path / "transitions.csv"
    assert cli.main(["export", "--in", str(workspace["dataset"]),
                     "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,px,py,pz,vx,vy,vz,u1,u2,uphys1,uphys2"
    assert len(lines) == len(dataio.load_dataset(workspace["dataset"])) + 1

    table_csv = tmp_path / "table.csv"
    assert cli.main(["export", "--in", str(workspace["table"]),
                     "--out", str(table_csv)]) == 0
    lines = table_csv.read_text().splitlines()
    assert lines[0] == "u1,u2,tipx,tipy,tipz"
    assert len(lines) == 5 * 5 + 1

    metrics = tmp_path / "metrics.csv"
    assert cli.main(["evaluate", "--config", workspace["ini"], "--seeds", "1",
                     "--out", str(metrics)]) == 0
    twice = tmp_path / "metrics2.csv"
    assert cli.main(["export", "--in", str(metrics), "--out", str(twice)]) == 0
    assert twice.read_bytes() == metrics.read_bytes()


def test_export_rejects_unknown_sources_and_formats(workspace, tmp_path, capfd):
    mystery = tmp_path / "mystery.bin"
    mystery.write_bytes(b"????????")
    assert cli.main(["export", "--in", str(mystery),
                     "--out", str(tmp_path / "x.csv")]) == 2
    capfd.readouterr()
    assert cli.main(["export", "--in", str(workspace["dataset"]),
                     "--out", str(tmp_path / "x.json"), "--format", "json"]) == 1
    capfd.readouterr()
    assert cli.main(["export", "--in", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path / "x.csv")]) == 2


def test_flowdyn_threads_env(monkeypatch):
    monkeypatch.setenv("FLOWDYN_THREADS", "4")
    assert cli.default_config().data["workers"] == 4
    monkeypatch.setenv("FLOWDYN_THREADS", "zero")
    assert cli.main(["gen-data", "--dry-run"]) == 1
