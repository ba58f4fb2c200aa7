"""Search, training, ablation arms, run configs and the CLI on a tiny corner-cue task."""

import json

import numpy as np
import pytest

from dasrf.ablation import frame_order, genotype_augmenter, run_ablation, run_arm
from dasrf.backbones import BackboneSpec, build
from dasrf.cell import Genotype, build_cell, identity_genotype
from dasrf.cli import main
from dasrf.config import RunConfig
from dasrf.data import Dataset, DatasetSpec, generate
from dasrf.errors import ConfigurationError, NumericError
from dasrf.search import ARMS, Pipeline, SearchConfig, lr_schedule, search, train, train_final

TINY = {"dataset": {"size": {"train": 32, "test": 16}},
        "search": {"epochs": 1, "batch_size": 8, "frames": 2},
        "train": {"epochs": 1, "batch_size": 8, "frames": 2}}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY))
    return path


def test_lr_schedules():
    assert lr_schedule("poly", 1.0, 0, 10) == 1.0
    assert lr_schedule("step", 1.0, 9, 10) == pytest.approx(0.01)
    with pytest.raises(ConfigurationError):
        SearchConfig(lr_schedule="cosine")


def test_search_records_trajectory_and_rows():
    run = RunConfig.from_dict(TINY)
    splits = generate(run.dataset)
    cell = build_cell(run.topology)
    genotype, report = search(cell, build(run.backbone, 0), splits["train"], run.search)
    assert len(report.trajectory) == report.w_steps == report.tau_steps == 2
    assert len(genotype.edges) == len(cell.edges)
    assert genotype.meta["selection"] == "perturbation"
    header = report.csv().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,val_metric,seconds"
    assert report.csv().splitlines()[1].endswith(",")


def test_search_budget_stops_early():
    run = RunConfig.from_dict(TINY)
    cfg = SearchConfig(epochs=5, batch_size=8, frames=2, budget_wall_clock=0.0)
    _, report = search(build_cell(run.topology), build(run.backbone, 0), generate(run.dataset)["train"], cfg)
    assert len(report.rows) == 1 and report.w_steps == 1


def test_nan_loss_aborts_with_checkpoint(tmp_path):
    run = RunConfig.from_dict(TINY)
    data = generate(run.dataset)["train"]
    bad = Dataset(np.full_like(data.images, np.nan), data.labels, 2)
    cfg = SearchConfig(epochs=1, batch_size=8, frames=2, checkpoint_dir=str(tmp_path))
    with pytest.raises(NumericError) as info:
        search(build_cell(run.topology), build(run.backbone, 0), bad, cfg)
    assert (tmp_path / "last_good" / "manifest.json").exists()
    assert info.value.checkpoint


def test_train_rejects_mismatched_head():
    run = RunConfig.from_dict(TINY)
    splits = generate(run.dataset)
    dense = build(BackboneSpec(head="dense_predictor", num_classes=2), 0)
    with pytest.raises(ConfigurationError):
        train(Pipeline(None), dense, splits["train"], splits["test"], run.train)
    g = identity_genotype(build_cell("full13"))
    with pytest.raises(ConfigurationError):
        train_final(g, build(run.backbone, 0), splits["train"], splits["test"], run.train, "affine5")


def test_segmentation_training_runs():
    spec = DatasetSpec(kind="synthetic_segmentation", size={"train": 8, "test": 4})
    splits = generate(spec)
    model = build(BackboneSpec(head="dense_predictor", num_classes=2, depth=2), 0)
    g = identity_genotype(build_cell("affine5-small"))
    report = train(Pipeline(g, 2), model, splits["train"], splits["test"], SearchConfig(epochs=1, batch_size=4))
    assert 0.0 <= report.final_metric <= 1.0


def test_frame_order_never_identity():
    for seed in range(20):
        order = frame_order(seed, 3)
        assert sorted(order) == [0, 1, 2] and order != (0, 1, 2)


def test_augmenter_returns_same_shape():
    img = np.random.default_rng(0).random((4, 3, 8, 8))
    out = genotype_augmenter(identity_genotype(build_cell("affine5-small")), 2)(img, np.random.default_rng(0))
    np.testing.assert_allclose(out, img, atol=1e-6)


def test_every_arm_shares_report_schema():
    run = RunConfig.from_dict(TINY)
    genotype = identity_genotype(build_cell(run.topology))
    keys = None
    for arm in ARMS:
        summary = run_arm(arm, run, genotype).summary()
        assert summary["arm"] == arm
        keys = keys or set(summary)
        assert set(summary) == keys
    with pytest.raises(ConfigurationError):
        run_arm("mystery", run)


def test_run_ablation_shape():
    results = run_ablation(RunConfig.from_dict(TINY), ("baseline", "replica"), (0, 1))
    assert set(results) == {"baseline", "replica"} and all(len(v) == 2 for v in results.values())


def test_run_config_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig(topology="full13")                    # builds the full13 space, not affine5
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"arms": "das"})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"dataset": {"kind": "synthetic_segmentation"}})
    (tmp_path / "ds.json").write_text(json.dumps({"seed": 9}))
    (tmp_path / "run.json").write_text(json.dumps({"dataset": "ds.json", "shift": {"mode": "gated_shift"}}))
    run = RunConfig.load(tmp_path / "run.json")
    assert run.dataset.seed == 9 and run.backbone.shift.mode == "gated_shift"
    assert run.with_seed(4).search.seed == 4


# -- CLI --------------------------------------------------------------------------

def test_cli_rf(capsys, tmp_path):
    assert main(["rf", "--layers", "k3s1,k3s1,k3s1"]) == 0
    assert capsys.readouterr().out.strip() == "7"
    assert main(["rf", "--fused", "translate:1,1", "--r", "3", "--frames", "3"]) == 0
    assert capsys.readouterr().out.strip() == "19.0"
    assert main(["rf", "--erf", "--size", "8", "--batch", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "erf.pgm").exists() and (tmp_path / "rf_report.json").exists()
    assert main(["rf"]) == 2


def test_cli_missing_config_exit_code(capsys, tmp_path):
    missing = tmp_path / "absent.json"
    assert main(["search", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_cli_search_train_export(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    assert main(["search", "--config", str(tiny_config), "--out", str(out), "--log-wall-clock"]) == 0
    for name in ("genotype.json", "cell.dot", "metrics.csv", "trajectory.json"):
        assert (out / name).exists()
    assert not (out / "metrics.csv").read_text().splitlines()[1].endswith(",")
    Genotype.from_json((out / "genotype.json").read_text())
    assert main(["train", "--config", str(tiny_config), "--genotype", str(out / "genotype.json"),
                 "--out", str(out / "train")]) == 0
    assert json.loads((out / "train" / "report.json").read_text())["epochs"] == 1
    capsys.readouterr()
    assert main(["export-genotype", "--genotype", str(out / "genotype.json")]) == 0
    assert capsys.readouterr().out.startswith("digraph")
    assert main(["export-genotype", "--genotype", str(tmp_path / "nope.json")]) == 2


def test_cli_ablate_and_gen_data(tmp_path, tiny_config):
    assert main(["ablate", "--config", str(tiny_config), "--arm", "baseline", "--seeds", "0",
                 "--out", str(tmp_path)]) == 0
    assert "baseline" in json.loads((tmp_path / "ablation.json").read_text())
    assert main(["ablate", "--config", str(tiny_config), "--arm", "bogus", "--out", str(tmp_path)]) == 2
    assert main(["gen-data", "--config", str(tiny_config), "--previews", "1", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "train.npz").exists() and (tmp_path / "d" / "train_000.ppm").exists()
