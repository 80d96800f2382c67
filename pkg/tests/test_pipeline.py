import json
import math

import numpy as np
import pytest
import torch

from stereoprior import cli, losses
from stereoprior.config import RunConfig, desk_config
from stereoprior.evaluate import evaluate_scene, non_increasing, run_eval
from stereoprior.model import PriorResult
from stereoprior.refiner import RefinerConfig
from stereoprior.scale_align import AlignmentResult
from stereoprior.synthdata import DataConfig, generate_dataset
from stereoprior.train import load_model, run_train, split_indices


def tiny_config(**kw) -> RunConfig:
    base = dict(
        stage1_epochs=1,
        stage2_epochs=1,
        batch_size=2,
        learning_rate=1e-3,
        refiner=RefinerConfig(gru_layers=2, hidden_dim=16, iterations=2),
        data=DataConfig(width=64, height=32, train_count=5),
        val_count=1,
        seed=3,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(root, 6, 3, tiny_config().data)
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "model.json"
    result = run_train(tiny_config(), data_dir=dataset, out=out)
    return out, result


def test_config_round_trip(tmp_path):
    cfg = desk_config(seed=5)
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg and back.to_json() == cfg.to_json()
    assert back.refiner.gru_layers == 3 and back.refiner.hidden_dim == 128 and back.refiner.iterations == 8


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"epochs": 3})
    with pytest.raises(ValueError):
        RunConfig(stage1_epochs=0)
    with pytest.raises(ValueError):
        RunConfig(learning_rate=0.0)


def test_defaults():
    cfg = RunConfig()
    assert (cfg.stage1_epochs, cfg.stage2_epochs, cfg.batch_size, cfg.learning_rate) == (20, 40, 8, 1e-4)
    assert cfg.refiner.iterations == 32 and cfg.lora.rank == 16


def test_split_is_seeded_and_disjoint():
    tr, va = split_indices(20, 0)
    assert len(va) == 4 and not set(tr) & set(va) and sorted(tr + va) == list(range(20))
    assert split_indices(20, 0) == (tr, va)
    assert split_indices(20, 1) != (tr, va)


def test_training_is_byte_deterministic(dataset, trained, tmp_path):
    path, first = trained
    second = run_train(tiny_config(), data_dir=dataset, out=tmp_path / "again.json")
    assert first.checkpoint_bytes == second.checkpoint_bytes
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()


def test_checkpoint_reload_reproduces_outputs(trained):
    path, result = trained
    model, config, meta = load_model(path)
    assert config == tiny_config() and meta["history"] == result.history
    for (k, a), b in zip(result.model.state_dict().items(), model.state_dict().values()):
        assert torch.equal(a, b), k


def test_history_records_both_stages(trained):
    _, result = trained
    stages = [h["stage"] for h in result.history]
    assert stages == ["mono", "stereo"]
    assert all(math.isfinite(h["l_train"]) for h in result.history)


def test_eval_report_deterministic(dataset, trained, tmp_path):
    path, _ = trained
    a = run_eval(path, dataset, report=tmp_path / "a.json", dump_depth=tmp_path / "depth")
    run_eval(path, dataset, report=tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert a["num_scenes"] == 6 and len(list((tmp_path / "depth").glob("*.pfm"))) == 6
    val = run_eval(path, dataset, split="val")
    assert val["num_scenes"] == 1


def test_eval_empty_dataset_raises(trained, tmp_path):
    path, _ = trained
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        run_eval(path, tmp_path / "empty")


def test_eval_ground_truth_as_prediction_is_perfect(trained, dataset, monkeypatch):
    from stereoprior import evaluate
    from stereoprior.synthdata import list_samples, read_sample
    from stereoprior.train import scene_from_sample

    model, _, _ = load_model(trained[0])
    p = list_samples(dataset)[0]
    scene = scene_from_sample(p.name, read_sample(p))
    gt = scene.gt_disparity
    monkeypatch.setattr(evaluate, "refine_scene", lambda *a, **k: [gt, gt])
    align = AlignmentResult(1.0, True, 1.0, 0.0, scene.gt_depth, scene.gt_depth)
    res = evaluate_scene(model, scene, PriorResult(gt, scene.gt_depth, align))
    assert res["epe_refined"] == 0.0 and res["refined"]["rel"] == pytest.approx(0.0, abs=1e-6)
    assert res["refined"]["a1"] == 1.0 and res["epe_non_increasing"]


def test_non_increasing():
    assert non_increasing([3.0, 2.0, 2.0, 1.0])
    assert not non_increasing([3.0, 2.0, 2.5])


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tiny_config()
    cfg.save(tmp_path / "cfg.json")
    data, ckpt = tmp_path / "d", tmp_path / "m.json"
    assert cli.main(["gen", "--config", str(tmp_path / "cfg.json"), "--out", str(data), "--count", "4", "--seed", "1"]) == 0
    assert len(list(data.iterdir())) == 4
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(data), "--out", str(ckpt),
                     "--history", str(tmp_path / "h.json")]) == 0
    assert json.loads((tmp_path / "h.json").read_text())[0]["stage"] == "mono"
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(tmp_path / "r.json")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["num_scenes"] == 4
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "missing")]) == 1


def test_cli_nonfinite_loss_exits_2(tmp_path, monkeypatch):
    tiny_config().save(tmp_path / "cfg.json")
    generate_dataset(tmp_path / "d", 3, 0, tiny_config().data)
    monkeypatch.setattr(losses, "photometric", lambda rec, *a, **k: rec.sum() * float("nan"))
    code = cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "m.json")])
    assert code == 2 and not (tmp_path / "m.json").exists()


def test_cli_selftest():
    assert cli.main(["selftest", "-q"]) == 0
