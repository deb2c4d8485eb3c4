import json

import pandas as pd
import pytest

import cli
import sae
from errors import PayloadError
from conftest import svg_point_count

TINY = """
[data.synthetic]
dims = 6
n = 600
anomaly_rate = 0.1

[sae]
widths = [6, 4, 3]
epochs = 3
batch_size = 32

[ga]
population = 4
generations = 1
workers = 1

[exits]
rret_policies = 5

[binpack]
sweep = [2, 256]
bound_instances = 20

[run]
timing_reps = 3
log_level = "WARNING"
"""


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    p.write_text(TINY, encoding="utf-8")
    return p


@pytest.fixture(scope="module")
def checkpoint(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert cli.main(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out / "model.mosm"


def _run(command, tiny_config, out, *extra):
    return cli.main([command, "--config", str(tiny_config), "--out", str(out), *extra])


def test_train_writes_checkpoint_and_report(checkpoint) -> None:
    model = sae.load_checkpoint(checkpoint)
    assert model.widths == (6, 4, 3) and model.input_dim == 6
    report = json.loads((checkpoint.parent / "train_report.json").read_text())
    assert len(report["epoch_losses"]) == 3
    assert report["parameters"] == model.parameter_count()


def test_train_is_byte_deterministic(tiny_config, checkpoint, tmp_path) -> None:
    assert _run("train", tiny_config, tmp_path) == 0
    assert (tmp_path / "model.mosm").read_bytes() == checkpoint.read_bytes()


def test_missing_data_file_is_a_pipeline_failure(tiny_config, tmp_path) -> None:
    assert _run("train", tiny_config, tmp_path, "--data", str(tmp_path / "absent.csv")) == 1
    assert not (tmp_path / "model.mosm").exists()


def test_usage_errors(tiny_config, tmp_path) -> None:
    assert cli.main(["train", "--no-such-flag"]) == 2
    assert cli.main(["fly"]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "absent.toml")]) == 2
    assert _run("train", tiny_config, tmp_path, "--population", "5") == 2


def test_cliptest(tiny_config, checkpoint, tmp_path) -> None:
    assert _run("cliptest", tiny_config, tmp_path, "--checkpoint", str(checkpoint)) == 0
    df = pd.read_csv(tmp_path / "cliptest_schedule.csv")
    assert df["step"].tolist() == list(range(len(df)))
    assert len(df) >= 3
    fracs = df["retained_fraction"].tolist()
    assert fracs[0] == 1.0
    assert all(a > b for a, b in zip(fracs, fracs[1:]))
    summary = json.loads((tmp_path / "cliptest_summary.json").read_text())
    assert summary["steps"] == len(df)
    assert "storage_ratio~power_ratio" in summary["correlations"]
    svgs = sorted(tmp_path.glob("cliptest_*.svg"))
    assert len(svgs) == 3
    assert all(svg_point_count(p) == len(df) for p in svgs)


def test_optimize(tiny_config, checkpoint, tmp_path) -> None:
    assert _run("optimize", tiny_config, tmp_path, "--checkpoint", str(checkpoint)) == 0
    archive = pd.read_csv(tmp_path / "archive.csv")
    front = pd.read_csv(tmp_path / "front.csv")
    chosen = json.loads((tmp_path / "chosen.json").read_text())
    assert set(front["genome_hex"]) <= set(archive["genome_hex"])
    assert (front["front_rank"] == 1).all()
    assert chosen["candidate"]["genome_hex"] in set(front["genome_hex"])
    assert chosen["archive_size"] == len(archive)


def test_rret(tiny_config, checkpoint, tmp_path) -> None:
    assert _run("rret", tiny_config, tmp_path, "--checkpoint", str(checkpoint)) == 0
    df = pd.read_csv(tmp_path / "rret.csv")
    assert len(df) == 5
    assert (df["storage_ratio"] == 1.0).all()
    assert len(set(df["seed"])) == 5
    assert json.loads((tmp_path / "rret_summary.json").read_text())["policies"] == 5


def test_evaluate(tiny_config, checkpoint, tmp_path) -> None:
    assert _run("evaluate", tiny_config, tmp_path, "--checkpoint", str(checkpoint), "--keep-frac", "0.5") == 0
    doc = json.loads((tmp_path / "evaluate.json").read_text())
    assert doc["baseline"]["storage_ratio"] == 1.0
    assert doc["objectives"]["storage_ratio"] < 1.0
    assert len(doc["exit_histogram"]) == 3


def test_pack_then_unpack(tiny_config, checkpoint, tmp_path) -> None:
    assert _run("pack", tiny_config, tmp_path, "--checkpoint", str(checkpoint), "--density", "64") == 0
    report = json.loads((tmp_path / "pack_report.json").read_text())
    assert report["density"] == 64 and report["bits_per_index"] == 6
    assert report["wire_bytes"] == (tmp_path / "update.mosu").stat().st_size
    assert report["max_abs_error"] <= report["max_step"] / 2 * (1 + 1e-9)

    assert _run("unpack", tiny_config, tmp_path) == 0
    original, back = sae.load_checkpoint(checkpoint), sae.load_checkpoint(tmp_path / "unpacked.mosm")
    assert back.widths == original.widths


def test_unpack_without_payload_fails(tiny_config, tmp_path) -> None:
    assert _run("unpack", tiny_config, tmp_path) == 1


def test_sweep_bins(tiny_config, checkpoint, tmp_path) -> None:
    assert _run("sweep-bins", tiny_config, tmp_path, "--checkpoint", str(checkpoint)) == 0
    df = pd.read_csv(tmp_path / "sweep_bins.csv")
    assert df["density"].tolist() == [2, 256]
    assert df["wire_bytes"].iloc[0] < df["wire_bytes"].iloc[1]
    assert df["max_abs_error"].iloc[0] > df["max_abs_error"].iloc[1]


def test_verify_bound(tiny_config, tmp_path) -> None:
    assert _run("verify-bound", tiny_config, tmp_path) == 0
    doc = json.loads((tmp_path / "bound_report.json").read_text())
    assert doc["instances"] == 20
    assert doc["holds_rate"] == 1.0


def test_correlate(tiny_config, tmp_path) -> None:
    csv = tmp_path / "r.csv"
    pd.DataFrame({"a": [1, 2, 3, 4, 5], "b": [2, 1, 4, 3, 5]}).to_csv(csv, index=False)
    assert _run("correlate", tiny_config, tmp_path, "--csv", str(csv), "--x", "a", "--y", "b") == 0
    doc = json.loads((tmp_path / "correlate_a_b.json").read_text())
    assert doc["spearman"] == pytest.approx(0.8)
    assert doc["n"] == 5
    assert _run("correlate", tiny_config, tmp_path, "--csv", str(csv), "--x", "a", "--y", "zz") == 1


def test_cliptest_is_reproducible(tiny_config, checkpoint, tmp_path) -> None:
    cols = ["step", "retained_fraction", "f1", "storage_ratio", "power_ratio", "mean_exit"]
    frames = []
    for run in ("a", "b"):
        assert _run("cliptest", tiny_config, tmp_path / run, "--checkpoint", str(checkpoint)) == 0
        frames.append(pd.read_csv(tmp_path / run / "cliptest_schedule.csv")[cols])
    pd.testing.assert_frame_equal(frames[0], frames[1])


def test_invalid_utf8_data_is_a_pipeline_failure(tiny_config, tmp_path) -> None:
    bad = tmp_path / "bad.csv"
    bad.write_bytes(b"a,b,Class\n1,2,0\n\xff\xfe,3,1\n")
    assert _run("train", tiny_config, tmp_path / "out", "--data", str(bad)) == 1
    assert not (tmp_path / "out" / "model.mosm").exists()


def test_final_quantile_outside_open_interval_is_a_usage_error(tmp_path) -> None:
    for q in ("0.0", "1.0"):
        cfg = tmp_path / f"q{q}.toml"
        cfg.write_text(TINY.replace("[exits]\n", f"[exits]\nfinal_quantile = {q}\n"), encoding="utf-8")
        assert cli.main(["sweep-bins", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2


def test_failed_unpack_restores_existing_output(tiny_config, checkpoint, tmp_path, monkeypatch) -> None:
    assert _run("pack", tiny_config, tmp_path, "--checkpoint", str(checkpoint)) == 0
    target = tmp_path / "elsewhere.mosm"
    target.write_bytes(b"previous")

    def broken_save(model, path):
        path.write_bytes(b"partial")
        raise PayloadError("disk went away")

    monkeypatch.setattr(cli.sae, "save_checkpoint", broken_save)
    assert _run("unpack", tiny_config, tmp_path, "--output", str(target)) == 1
    assert target.read_bytes() == b"previous"


# ---------- desk-scale acceptance ----------
DESK = """
[data.synthetic]
dims = 20
n = 50000
anomaly_rate = 0.02

[run]
log_level = "WARNING"
"""


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = root / "desk.toml"
    cfg.write_text(DESK, encoding="utf-8")
    assert cli.main(["train", "--config", str(cfg), "--out", str(root)]) == 0
    return cfg, root / "model.mosm"


@pytest.mark.slow
def test_joint_optimization_meets_desk_targets(desk, tmp_path) -> None:
    cfg, ckpt = desk
    assert _run("optimize", cfg, tmp_path, "--checkpoint", str(ckpt)) == 0
    chosen = json.loads((tmp_path / "chosen.json").read_text())
    cand = chosen["candidate"]
    assert chosen["f1_drop"] <= 0.05
    assert cand["storage_ratio"] <= 0.6
    assert cand["power_ratio"] <= 0.6


@pytest.mark.slow
def test_bin_sweep_plateaus_without_runtime_cost(desk, tmp_path) -> None:
    cfg, ckpt = desk
    assert _run("sweep-bins", cfg, tmp_path, "--checkpoint", str(ckpt)) == 0
    df = pd.read_csv(tmp_path / "sweep_bins.csv").set_index("density")
    summary = json.loads((tmp_path / "sweep_summary.json").read_text())
    assert df.loc[1024, "f1"] >= df.loc[2, "f1"]
    assert (df.loc[df.index >= 256, "f1"] - summary["uncompressed_f1"]).abs().max() <= 0.02
    assert summary["runtime_spread"] < 0.2
