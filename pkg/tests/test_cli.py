import json

import numpy as np
import pytest

from sci_reid.checkpoint import (
    MAGIC,
    Checkpoint,
    file_sha256,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from sci_reid.cli import main, read_metrics
from sci_reid.errors import CheckpointError, ContractError, VersionMismatchError
from sci_reid.evalkit import Meta, evaluate
from sci_reid.pipeline import RunConfig, load_dataset, model_from_checkpoint, to_checkpoint, train
from sci_reid.sim import extract_embedding

QUICK = {"stage1": {"epochs": 2}, "stage2": {"epochs": 2, "schedule": "step", "milestones": [1]}}


@pytest.fixture
def quick_config(tmp_path):
    path = tmp_path / "quick.json"
    path.write_text(json.dumps(QUICK))
    return str(path)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", "--out", str(out), "--force"]) == 0
    return out


# -- checkpoint container ---------------------------------------------------------------------------

def _sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        {"encoders": {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.zeros(0, np.float32)},
         "optimizer": {}},
        {"config": {"seed": 1}, "note": "x"},
    )


def test_checkpoint_round_trip(tmp_path):
    ck = _sample_ckpt()
    save_checkpoint(ck, tmp_path / "a.sci")
    back = load_checkpoint(tmp_path / "a.sci")
    assert back == ck
    assert to_bytes(back) == to_bytes(ck)


def test_checkpoint_errors():
    raw = to_bytes(_sample_ckpt())
    with pytest.raises(CheckpointError):
        from_bytes(b"XXXXXXXX" + raw[8:])
    bumped = bytearray(raw)
    bumped[len(MAGIC)] = 2
    with pytest.raises(VersionMismatchError):
        from_bytes(bytes(bumped))
    with pytest.raises(CheckpointError):
        from_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        from_bytes(raw[:5])


def test_trained_checkpoint_restores_model():
    cfg = RunConfig.from_dict(dict(QUICK, seed=3))
    ds = load_dataset(cfg)
    run = train(cfg, ds)
    ck = from_bytes(to_bytes(to_checkpoint(run)))
    _, model = model_from_checkpoint(ck)
    q = ds.subset("query").images[:5]
    assert extract_embedding(model, q).tobytes() == extract_embedding(run.model, q).tobytes()
    assert set(ck.sections) == {"encoders", "prompt_bank", "sim", "heads", "text_features", "optimizer"}
    assert ck.meta["optimizer"]["main"]["step"] == 2 * 144 // 16


# -- config ---------------------------------------------------------------------------------------

def test_config_rejects_unknown_fields():
    with pytest.raises(ContractError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ContractError, match="num_pids"):
        RunConfig.from_dict({"data": {"num_pids": 0}})
    with pytest.raises(ContractError):
        RunConfig.from_dict({"seed": -1})


def test_dataset_encoder_mismatch_is_caught_before_training():
    cfg = RunConfig.from_dict({"data": {"H": 36}})
    with pytest.raises(ContractError, match="encoder expects"):
        train(cfg, load_dataset(cfg))


# -- commands -------------------------------------------------------------------------------------

def test_gen_counts_and_determinism(tmp_path, dataset_dir, capsys):
    out = tmp_path / "again"
    assert main(["gen", "--out", str(out)]) == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["counts"]["images"] == 288
    for name in ("manifest.json", "images.f32le"):
        assert file_sha256(out / name) == file_sha256(dataset_dir / name)


def test_gen_refuses_existing_output(dataset_dir, capsys):
    assert main(["gen", "--out", str(dataset_dir)]) == 2
    assert "--force" in capsys.readouterr().err


def test_gen_invalid_config_names_field(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"data": {"noise_sigma": -1}}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "noise_sigma" in capsys.readouterr().err


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["eval", "--out", str(tmp_path), "--checkpoint", "c", "--protocol", "market"]) == 1
    err = capsys.readouterr().err
    assert "general, same_clothes, cloth_changing" in err
    assert main(["train", "--out", str(tmp_path), "--kmax", "0"]) == 1


def test_train_zero_epochs(tmp_path, dataset_dir):
    cfg = tmp_path / "zero.json"
    cfg.write_text(json.dumps({"stage1": {"epochs": 0}, "stage2": {"epochs": 0}}))
    assert main(["train", "--config", str(cfg), "--data", str(dataset_dir), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["type"] == "config"
    ck = load_checkpoint(tmp_path / "checkpoint.sci")
    assert ck.section("optimizer") == {}


def test_train_is_deterministic_and_echoes_config(tmp_path, dataset_dir, quick_config):
    digests = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", quick_config, "--data", str(dataset_dir),
                     "--out", str(out), "--seed", "5"]) == 0
        digests.append(file_sha256(out / "checkpoint.sci"))
    assert digests[0] == digests[1]
    first = json.loads((tmp_path / "a" / "train_log.jsonl").read_text().splitlines()[0])
    assert first["seed"] == 5 and first["config"]["stage1"]["epochs"] == 2
    assert load_checkpoint(tmp_path / "a" / "checkpoint.sci").meta["config"]["seed"] == 5


def test_eval_metrics_round_trip(tmp_path, dataset_dir, quick_config):
    assert main(["train", "--config", quick_config, "--data", str(dataset_dir), "--out", str(tmp_path / "t")]) == 0
    ckpt = str(tmp_path / "t" / "checkpoint.sci")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(dataset_dir), "--out", str(tmp_path / "e"),
                 "--protocol", "general,cloth_changing", "--kmax", "5"]) == 0
    metrics = read_metrics(tmp_path / "e" / "metrics.jsonl")
    assert set(metrics) == {"general", "cloth_changing"}
    _, model = model_from_checkpoint(load_checkpoint(ckpt))
    ds = load_dataset(RunConfig(), str(dataset_dir))
    q, g = ds.subset("query"), ds.subset("gallery")
    direct = evaluate(extract_embedding(model, q.images), extract_embedding(model, g.images),
                      Meta.of(q.pids, q.camera_ids, q.clothes_ids), Meta.of(g.pids, g.camera_ids, g.clothes_ids),
                      "cloth_changing", 5)
    got = metrics["cloth_changing"]
    assert np.array_equal(got.cmc, direct.cmc) and got.map == direct.map
    assert got.num_valid_queries == direct.num_valid_queries
    header = json.loads((tmp_path / "e" / "metrics.jsonl").read_text().splitlines()[0])
    assert header["type"] == "config" and "seed" in header


def test_untrained_model_matches_baseline_metrics(tmp_path, dataset_dir):
    cfg = tmp_path / "zero.json"
    cfg.write_text(json.dumps({"stage1": {"epochs": 0}, "stage2": {"epochs": 0}}))
    results = {}
    for flags in ([], ["--no-sim"]):
        out = tmp_path / ("base" if flags else "full")
        assert main(["train", "--config", str(cfg), "--data", str(dataset_dir), "--out", str(out)] + flags) == 0
        assert main(["eval", "--checkpoint", str(out / "checkpoint.sci"), "--data", str(dataset_dir),
                     "--out", str(out)]) == 0
        results[out.name] = (out / "metrics.jsonl").read_text().splitlines()[1:]
    assert results["base"] == results["full"]


def test_eval_rejects_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.sci"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "e")]) == 2


@pytest.mark.slow
def test_ablate_structure_and_baseline_consistency(tmp_path, dataset_dir, quick_config):
    assert main(["ablate", "--config", quick_config, "--data", str(dataset_dir), "--out", str(tmp_path / "a"),
                 "--protocol", "general,cloth_changing"]) == 0
    lines = [json.loads(x) for x in (tmp_path / "a" / "ablation.jsonl").read_text().splitlines()]
    rows = [r for r in lines if r["type"] == "ablation"]
    assert len(rows) == 4 * 2
    assert {r["variant"] for r in rows} == {"baseline", "+SSE", "+SIM", "+SSE+SIM"}
    assert main(["train", "--config", quick_config, "--data", str(dataset_dir), "--out", str(tmp_path / "b"),
                 "--no-sse", "--no-sim"]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "b" / "checkpoint.sci"), "--data", str(dataset_dir),
                 "--out", str(tmp_path / "b"), "--protocol", "general,cloth_changing"]) == 0
    metrics = read_metrics(tmp_path / "b" / "metrics.jsonl")
    for r in rows:
        if r["variant"] == "baseline":
            assert r["rank1"] == metrics[r["protocol"]].rank(1) and r["map"] == metrics[r["protocol"]].map
