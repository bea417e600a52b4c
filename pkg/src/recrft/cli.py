"""Command-line entry point: ``recrft {gen,embed,score,train,eval,sweep}``.

Exit codes: 0 success, 1 validation error, 2 runtime / I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from .config import RunConfig
from .errors import CheckpointError, ConfigError, RecRFTError, ValidationError
from .graph_store import (
    EmbeddingTable,
    baseline_embeddings,
    load_catalog,
    load_interactions,
    train_mf_embeddings,
    write_catalog,
    write_interactions,
)
from .grpo import Featurizer, LogLinearPolicy, evaluate, load_checkpoint, train
from .scoring import score_file
from .seeding import derive_seed
from .synth import CATEGORIES, generate_queries, generate_world, load_queries, write_queries

log = logging.getLogger("recrft")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def world_hash(catalog_path: Path, interactions_path: Path) -> str:
    h = hashlib.sha256()
    for p in (catalog_path, interactions_path):
        h.update(Path(p).read_bytes())
        h.update(b"\x00")
    return h.hexdigest()


def write_manifest(out: Path, cfg: RunConfig, files: dict[str, Path], extra: dict | None = None) -> dict:
    manifest = {
        "seed": cfg.seed,
        "config_hash": cfg.hash,
        "files": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(files.items()) if p.exists()},
        "world_hash": world_hash(files["catalog"], files["interactions"]),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest


def cmd_gen(cfg: RunConfig, out: Path) -> dict:
    synth = cfg.synth_config()
    world = generate_world(synth)
    queries = generate_queries(synth, world.catalog)
    out.mkdir(parents=True, exist_ok=True)
    files = {"catalog": out / "catalog.jsonl", "interactions": out / "interactions.csv", "queries": out / "queries.jsonl"}
    write_catalog(world.catalog, files["catalog"])
    write_interactions(world.interactions, files["interactions"])
    write_queries(queries, files["queries"])
    (out / "synth_config.json").write_text(json.dumps(synth.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    log.info("wrote %d items, %d interactions, %d queries to %s", len(world.catalog), world.interactions.n_edges, len(queries), out)
    return write_manifest(out, cfg, files, {"synth_config": synth.to_json()})


def load_world(cfg: RunConfig, default_dir: Path | None = None):
    paths = cfg.world_paths(default_dir)
    catalog = load_catalog(paths["catalog"])
    interactions = load_interactions(paths["interactions"], catalog, header=cfg.interactions_header)
    return paths, catalog, interactions


def make_embeddings(cfg: RunConfig, interactions) -> EmbeddingTable:
    if cfg.embeddings:
        return EmbeddingTable.load(cfg.embeddings)
    if cfg.embedding_provider == "baseline":
        return baseline_embeddings(interactions)
    return train_mf_embeddings(
        interactions,
        dims=cfg.embedding_dims,
        epochs=cfg.embedding_epochs,
        learning_rate=cfg.embedding_lr,
        seed=derive_seed(cfg.seed, "embeddings"),
    )


def cmd_embed(cfg: RunConfig, out: Path) -> Path:
    _, _, interactions = load_world(cfg, out)
    table = make_embeddings(cfg, interactions)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "embeddings.json"
    table.save(path)
    log.info("wrote %s embeddings (%d items, dim %d) to %s", table.provenance, len(table.ids), table.dim, path)
    return path


def cmd_score(cfg: RunConfig, rollouts: Path, output: Path):
    _, catalog, interactions = load_world(cfg)
    table = make_embeddings(cfg, interactions)
    tc = cfg.trainer_config()
    output.parent.mkdir(parents=True, exist_ok=True)
    summary = score_file(rollouts, output, catalog, table, tc.reward_weights, tc.w_penalty)
    log.info("scored %d responses from %d records, %d errors -> %s", summary.n_responses, summary.n_records, summary.n_errors, output)
    return summary


def cmd_train(cfg: RunConfig, out: Path, resume: bool = False):
    paths, catalog, interactions = load_world(cfg)
    queries = load_queries(paths["queries"])
    table = make_embeddings(cfg, interactions)
    out.mkdir(parents=True, exist_ok=True)
    result = train(
        cfg.trainer_config(),
        catalog,
        table,
        queries,
        run_dir=out,
        run_config=cfg.to_dict(),
        resume=resume,
    )
    extra = {"stop_reason": result.stop_reason, "val_history": result.val_history}
    if result.test_report is not None:
        extra["test_accuracy"] = result.test_report.accuracy
        extra["test_per_category"] = result.test_report.per_category
    write_manifest(out, cfg, paths, extra)
    return result


def write_eval_csv(path: Path, report) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "n", "accuracy"])
        w.writerow(["all", report.n, repr(report.accuracy)])
        for c in CATEGORIES:
            if report.per_category_n[c]:
                w.writerow([c, report.per_category_n[c], repr(report.per_category[c])])


def cmd_eval(cfg: RunConfig, checkpoint: Path, out: Path, queries_path: Path | None = None):
    paths, catalog, _ = load_world(cfg)
    weights, payload = load_checkpoint(checkpoint)
    spec = payload["feature_spec"]
    queries = load_queries(queries_path or paths["queries"])
    if not queries:
        raise ValidationError("no queries to evaluate")
    featurizer = Featurizer(catalog, spec["n_candidates"], spec["max_len"])
    load_checkpoint(checkpoint, featurizer)
    bad = [q.query_id for q in queries if len(q.candidates) != featurizer.n_candidates]
    if bad:
        raise CheckpointError(f"checkpoint expects {featurizer.n_candidates} candidates; {len(bad)} queries differ")
    report = evaluate(LogLinearPolicy(featurizer, weights), queries, catalog, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_csv(out / "eval.csv", report)
    print(f"accuracy {report.accuracy:.4f} over {report.n} queries")
    for c in CATEGORIES:
        if report.per_category_n[c]:
            print(f"  {c:<12} {report.per_category[c]:.4f} (n={report.per_category_n[c]})")
    return report


def parse_sweep_values(values) -> list[float]:
    vals = [float(v) for v in values]
    if len(set(vals)) != len(vals):
        raise ConfigError(f"duplicate sweep values: {vals}")
    for v in vals:
        if not (v == 0.0 or 0.0 < v < 1.0):
            raise ConfigError(f"w_penalty sweep value {v} outside {{0}} U (0, 1)")
    return vals


def cmd_sweep(cfg: RunConfig, out: Path, values=None) -> list[tuple[float, float]]:
    vals = parse_sweep_values(cfg.sweep_values if values is None else values)
    out.mkdir(parents=True, exist_ok=True)
    paths = cfg.world_paths()
    if not cfg.world_dir and not cfg.catalog and not paths["catalog"].exists():
        cmd_gen(cfg, out / "world")
        cfg = cfg.replace(world_dir=str(out / "world"))
    rows = []
    for v in vals:
        run_cfg = cfg.replace(w_penalty=v)
        result = cmd_train(run_cfg, out / f"w_penalty={v:g}")
        acc = result.test_report.accuracy if result.test_report else result.val_history[-1]
        rows.append((v, acc))
        log.info("w_penalty=%g -> final accuracy %.4f", v, acc)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["w_penalty", "final_accuracy"])
        for v, acc in rows:
            w.writerow([repr(v), repr(acc)])
    return rows


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps the
    # subparser from clobbering values given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="flat JSON run config")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", type=Path, help="output directory (default: out)")
    common.add_argument("--world", type=Path, help="directory holding catalog/interactions/queries")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="recrft", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic world and queries")
    e = sub.add_parser("embed", parents=[common], help="compute item embeddings")
    e.add_argument("--provider", choices=["baseline", "trained"])
    s = sub.add_parser("score", parents=[common], help="score rollouts offline")
    s.add_argument("--rollouts", type=Path, required=True)
    s.add_argument("--output", type=Path, help="default: <out>/scored.jsonl")
    t = sub.add_parser("train", parents=[common], help="train the toy policy")
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--resume", action="store_true", help="continue the run in --out from its latest checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--queries", type=Path)
    sw = sub.add_parser("sweep", parents=[common], help="w_penalty sweep")
    sw.add_argument("--values", help="comma-separated w_penalty values")
    return p


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": Path("out"), "world": None, "verbose": False}


def _config_from_args(args) -> RunConfig:
    if args.config is not None:
        cfg = RunConfig.load(args.config)
    elif args.command == "train" and args.resume and (args.out / "config.json").exists():
        cfg = RunConfig.load(args.out / "config.json")
    else:
        cfg = RunConfig()
    changes = {"seed": args.seed}
    if args.world is not None:
        changes["world_dir"] = str(args.world)
    if getattr(args, "provider", None):
        changes["embedding_provider"] = args.provider
    if getattr(args, "max_epochs", None) is not None:
        changes["max_epochs"] = args.max_epochs
    return cfg.replace(**changes)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    try:
        cfg = _config_from_args(args)
        if args.command == "gen":
            cmd_gen(cfg, args.out)
        elif args.command == "embed":
            cmd_embed(cfg, args.out)
        elif args.command == "score":
            summary = cmd_score(cfg, args.rollouts, args.output or args.out / "scored.jsonl")
            if not summary.ok:
                return 1
        elif args.command == "train":
            cmd_train(cfg, args.out, resume=args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.out, args.queries)
        elif args.command == "sweep":
            values = args.values.split(",") if args.values else None
            cmd_sweep(cfg, args.out, values)
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except (RecRFTError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
