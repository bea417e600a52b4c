import csv
import json
import math

import numpy as np
import pytest

from recrft.cli import main
from recrft.config import RunConfig
from recrft.graph_store import load_catalog, load_interactions
from recrft.grpo import save_checkpoint
from recrft.policy import Featurizer, LogLinearPolicy, oracle_weights
from recrft.synth import generate_queries, generate_world, load_queries

SMALL = {
    "n_items": 60,
    "n_genres": 4,
    "n_actors": 10,
    "n_directors": 6,
    "n_users": 60,
    "interactions_per_user": 8,
    "n_candidates": 8,
    "n_queries": 150,
    "embedding_provider": "baseline",
    "batch_size": 16,
    "max_epochs": 2,
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture
def world_dir(tmp_path, cfg_path):
    out = tmp_path / "world"
    assert main(["gen", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_roundtrip_and_reproducible(tmp_path, cfg_path, world_dir):
    cfg = RunConfig.load(cfg_path)
    world = generate_world(cfg.synth_config())
    catalog = load_catalog(world_dir / "catalog.jsonl")
    assert catalog == world.catalog
    assert load_interactions(world_dir / "interactions.csv", catalog) == world.interactions
    assert load_queries(world_dir / "queries.jsonl") == generate_queries(cfg.synth_config(), world.catalog)
    manifest = json.loads((world_dir / "manifest.json").read_text())
    assert manifest["seed"] == 0
    again = tmp_path / "again"
    assert main(["gen", "--config", str(cfg_path), "--out", str(again)]) == 0
    for name in ("catalog.jsonl", "interactions.csv", "queries.jsonl", "synth_config.json"):
        assert (again / name).read_bytes() == (world_dir / name).read_bytes()
    other = tmp_path / "other"
    assert main(["gen", "--config", str(cfg_path), "--seed", "5", "--out", str(other)]) == 0
    assert (other / "queries.jsonl").read_bytes() != (world_dir / "queries.jsonl").read_bytes()


def test_gen_exact_category_counts(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(dict(SMALL, n_queries=1000, n_items=120, category_mix=[0.5, 0.3, 0.2])))
    assert main(["gen", "--config", str(p), "--out", str(tmp_path / "w")]) == 0
    cats = [q.category for q in load_queries(tmp_path / "w" / "queries.jsonl")]
    assert (cats.count("explicit"), cats.count("implicit"), cats.count("misinformed")) == (500, 300, 200)


def test_embed_writes_table(world_dir, cfg_path):
    assert main(["embed", "--config", str(cfg_path), "--out", str(world_dir), "--provider", "trained"]) == 0
    table = json.loads((world_dir / "embeddings.json").read_text())
    assert table["provenance"] == "trained" and len(table["ids"]) == 60


def test_train_zero_epochs(tmp_path, cfg_path, world_dir):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--world", str(world_dir), "--out", str(run), "--max-epochs", "0"]) == 0
    assert (run / "config.json").exists()
    assert (run / "metrics.csv").read_text() == "epoch,step,loss,kl,clip_frac,mean_reward,accuracy\n"
    ckpt = json.loads((run / "checkpoints" / "epoch_0000.json").read_text())
    assert np.all(np.array(ckpt["weights"]) == 0.0)
    assert RunConfig.load(run / "config.json").max_epochs == 0


def test_train_resume_monotone_steps(tmp_path, cfg_path, world_dir):
    run = tmp_path / "run"
    common = ["--config", str(cfg_path), "--world", str(world_dir), "--out", str(run)]
    cfg = dict(SMALL, patience=5)
    cfg_path.write_text(json.dumps(cfg))
    assert main(["train", *common, "--max-epochs", "1"]) == 0
    n1 = len(_read_csv(run / "metrics.csv"))
    assert main(["train", *common, "--max-epochs", "2", "--resume"]) == 0
    rows = _read_csv(run / "metrics.csv")
    assert len(rows) > n1
    steps = [int(r["step"]) for r in rows]
    assert steps == list(range(1, len(steps) + 1))
    assert [int(r["epoch"]) for r in rows] == sorted(int(r["epoch"]) for r in rows)


def test_train_is_byte_reproducible(tmp_path, cfg_path, world_dir):
    outs = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert main(["train", "--config", str(cfg_path), "--world", str(world_dir), "--out", str(run)]) == 0
        outs.append(run)
    for name in ("metrics.csv", "schedule.csv", "config.json", "checkpoints/best.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_invalid_config_key_writes_nothing(tmp_path, world_dir):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"learning_rat": 0.1}))
    run = tmp_path / "run"
    assert main(["train", "--config", str(p), "--world", str(world_dir), "--out", str(run)]) == 1
    assert not run.exists()


def test_sweep(tmp_path, cfg_path, world_dir):
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(cfg_path), "--world", str(world_dir), "--out", str(out), "--values", "0,0.1,0.3,0.5"])
    assert code == 0
    rows = _read_csv(out / "sweep.csv")
    assert [float(r["w_penalty"]) for r in rows] == [0, 0.1, 0.3, 0.5]
    assert all(0.0 <= float(r["final_accuracy"]) <= 1.0 for r in rows)
    hashes = {json.loads((out / f"w_penalty={v}" / "manifest.json").read_text())["world_hash"] for v in ("0", "0.1", "0.3", "0.5")}
    assert len(hashes) == 1
    assert main(["sweep", "--config", str(cfg_path), "--world", str(world_dir), "--out", str(out), "--values", "0.1,0.1"]) == 1
    assert main(["sweep", "--config", str(cfg_path), "--world", str(world_dir), "--out", str(out), "--values", "1.0"]) == 1


def _checkpoint(path, world_dir, weights):
    catalog = load_catalog(world_dir / "catalog.jsonl")
    fz = Featurizer(catalog, SMALL["n_candidates"])
    save_checkpoint(path, LogLinearPolicy(fz, weights), {"test": True})


def test_eval_oracle_and_uniform(tmp_path, cfg_path, world_dir, capsys):
    _checkpoint(tmp_path / "oracle.json", world_dir, oracle_weights())
    args = ["eval", "--config", str(cfg_path), "--world", str(world_dir)]
    assert main([*args, "--checkpoint", str(tmp_path / "oracle.json"), "--out", str(tmp_path / "e1")]) == 0
    rows = _read_csv(tmp_path / "e1" / "eval.csv")
    assert rows[0]["category"] == "all" and float(rows[0]["accuracy"]) == 1.0
    assert "accuracy 1.0000" in capsys.readouterr().out

    _checkpoint(tmp_path / "zero.json", world_dir, np.zeros_like(oracle_weights()))
    assert main([*args, "--checkpoint", str(tmp_path / "zero.json"), "--out", str(tmp_path / "e2")]) == 0
    row = _read_csv(tmp_path / "e2" / "eval.csv")[0]
    n, acc, p = int(row["n"]), float(row["accuracy"]), 1 / SMALL["n_candidates"]
    assert abs(acc - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_eval_missing_checkpoint_exits_2(tmp_path, cfg_path, world_dir):
    code = main(["eval", "--config", str(cfg_path), "--world", str(world_dir), "--checkpoint", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "e")])
    assert code == 2


def test_score_command(tmp_path, cfg_path, world_dir):
    q = load_queries(world_dir / "queries.jsonl")[0]
    catalog = load_catalog(world_dir / "catalog.jsonl")
    good = {
        "query_id": q.query_id,
        "ground_truth": q.ground_truth,
        "candidates": list(q.candidates),
        "responses": [
            {"text": f"Answer: \\boxed{{{catalog.title(q.ground_truth)}}}"},
            {"text": f"Consider {catalog.title(q.candidates[0])}.\n\nno answer"},
        ],
    }
    rollouts = tmp_path / "r.jsonl"
    rollouts.write_text(json.dumps(good) + "\n")
    base = ["score", "--config", str(cfg_path), "--world", str(world_dir), "--rollouts", str(rollouts)]
    assert main([*base, "--output", str(tmp_path / "s.jsonl")]) == 0
    recs = [json.loads(x) for x in (tmp_path / "s.jsonl").read_text().splitlines()]
    assert recs[0]["shaped_reward"]["total"] == pytest.approx(1.02, abs=1e-12)
    rollouts.write_text(json.dumps(good) + "\n{broken\n")
    assert main([*base, "--output", str(tmp_path / "s2.jsonl")]) == 1
    assert json.loads((tmp_path / "s2.jsonl").read_text().splitlines()[-1])["line"] == 2
