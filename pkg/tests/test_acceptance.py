"""Acceptance criteria, one test each, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are written
even without ``-s``.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from recrft.cli import cmd_gen, cmd_sweep, cmd_train, main
from recrft.config import RunConfig
from recrft.curriculum import CurriculumState, difficulty, update
from recrft.graph_store import EmbeddingTable, build_catalog
from recrft.grpo import clipped_objective, loss_and_grad
from recrft.policy import N_FEATURES, N_KINDS, logprobs_from_features
from recrft.raae import group_advantages, score_group, segment_and_tokenize, standard_group_advantages
from recrft.rewards import RewardWeights, ndcg_at_k, pas, qas, shape_reward


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, detail

    return emit


def test_criterion_01_out_of_scope(capsys):
    with capsys.disabled():
        print("\n[N/A ] criterion 1: large-model benchmark numbers are out of scope; criteria 2-11 are the substitutes")


# --- 2: reward arithmetic against brute-force oracles -------------------------

RELS = ("genre", "actor", "director", "year")


def _tiny_world(rng):
    n = int(rng.integers(2, 6))
    records = []
    for k in range(n):
        attrs = {(r, f"v{int(rng.integers(0, 3))}") for r in RELS for _ in range(int(rng.integers(0, 3)))}
        records.append({"id": f"x{k}", "title": f"T{k}", "attributes": [{"relation": r, "value": v} for r, v in attrs]})
    dim = int(rng.integers(1, 5))
    vecs = rng.normal(size=(n, dim)) * (rng.random((n, 1)) < 0.9)
    cold = frozenset(f"x{k}" for k in range(n) if rng.random() < 0.15)
    return records, EmbeddingTable(tuple(r["id"] for r in records), vecs, "baseline", cold)


def _oracle_qas(records, p, gt):
    attrs = {r["id"]: [(a["relation"], a["value"]) for a in r["attributes"]] for r in records}
    target = attrs[gt]
    if not target:
        return 1.0 if p == gt else 0.0
    shared = 0
    for a in set(target):
        for b in set(attrs[p]):
            if a == b:
                shared += 1
    return shared / len(set(target))


def _oracle_pas(emb, p, gt):
    if p in emb.cold or gt in emb.cold:
        return 0.0
    a, b = list(emb.vector(p)), list(emb.vector(gt))
    dot = sum(x * y for x, y in zip(a, b))
    na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        return 0.0
    if p == gt:
        return 1.0
    return max(0.0, dot / (na * nb))


def _oracle_ndcg(ranked, gt, K):
    def dcg(seq):
        return sum(1.0 / math.log2(j + 2) for j, it in enumerate(seq[:K]) if it == gt)

    # one relevant item: the best permutation puts it first; without it the ideal list is [gt]
    ideal = max(dcg(list(perm)) for perm in itertools.permutations(ranked)) if gt in ranked else 1.0
    return dcg(list(ranked)) / ideal


def test_criterion_02_reward_arithmetic(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for _ in range(1000):
        records, emb = _tiny_world(rng)
        cat = build_catalog(records)
        ids = [r["id"] for r in records]
        p, gt = str(rng.choice(ids)), str(rng.choice(ids))
        w = RewardWeights(float(rng.random()), float(rng.random()), int(rng.integers(1, 6)))
        ranked = [ids[i] for i in rng.permutation(len(ids))[: int(rng.integers(1, min(5, len(ids)) + 1))]]
        q, s = _oracle_qas(records, p, gt), _oracle_pas(emb, p, gt)
        nd = _oracle_ndcg(ranked, gt, w.K)
        total = _oracle_ndcg([p], gt, w.K) + w.w1 * q + w.w2 * s
        errs = [
            abs(qas(p, gt, cat.graph) - q),
            abs(pas(p, gt, emb) - s),
            abs(ndcg_at_k(ranked, gt, w.K) - nd),
            abs(shape_reward(p, gt, cat.graph, emb, w).total - total),
        ]
        worst = max(worst, *errs)
        n += 1
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-12 and dt < 10.0, f"{n} instances, max |err| {worst:.2e} (tol 1e-12), {dt:.2f}s (< 10s)")


# --- 3: advantage normalisation -------------------------------------------------


def test_criterion_03_advantage_normalisation(report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst_mean = worst_std = 0.0
    const_ok = True
    for k in range(1100):
        lengths = rng.integers(1, 30, size=5)
        if k % 11 == 0:
            vecs = [np.full(n, 0.37) for n in lengths]
            adv = group_advantages(vecs)
            const_ok &= all(np.all(a == 0.0) for a in adv.advantages)
            continue
        vecs = [rng.random(n) * rng.choice([1e-3, 1.0, 50.0]) for n in lengths]
        a = np.concatenate(group_advantages(vecs).advantages)
        worst_mean = max(worst_mean, abs(a.mean()))
        worst_std = max(worst_std, abs(a.std() - 1.0))
    dt = time.perf_counter() - t0
    ok = worst_mean < 1e-9 and worst_std < 1e-6 and const_ok and dt < 5.0
    report(3, ok, f"1000 non-constant groups, max |mean| {worst_mean:.1e} (< 1e-9), max |std-1| {worst_std:.1e} (< 1e-6), "
                  f"constant groups zero: {const_ok}, {dt:.2f}s (< 5s)")


# --- 4 & 5: segment penalty ------------------------------------------------------

TITLES = {"go": "Go (1999)", "kk": "King Kong (1933)", "heat": "Heat (1995)", "blank": "Untitled Project"}
CATALOG = build_catalog([{"id": k, "title": t, "attributes": []} for k, t in TITLES.items()])
ITEMS = [CATALOG.get(k) for k in TITLES]


def _random_response(rng, answer):
    paras = []
    for _ in range(int(rng.integers(1, 5))):
        words = ["hmm", "maybe", "Consider", TITLES[str(rng.choice(list(TITLES)))], "because."]
        paras.append(" ".join(str(w) for w in rng.choice(words, size=int(rng.integers(1, 6)))))
    paras.append(f"Answer: \\boxed{{{TITLES[answer]}}}")
    return "\n\n".join(paras)


def _random_group(rng, G=5):
    texts, preds = [], []
    for _ in range(G):
        p = str(rng.choice(list(TITLES)))
        texts.append(_random_response(rng, p))
        preds.append(p)
    segs = [segment_and_tokenize(t, ITEMS) for t in texts]
    rewards = [float(x) for x in rng.random(G) * 1.02]
    return segs, preds, rewards


def test_criterion_04_penalty_direction(report):
    rng = np.random.default_rng(4)
    cases = violations = 0
    for _ in range(3000):
        segs, preds, rewards = _random_group(rng)
        gt = "kk"
        w = float(rng.uniform(0.05, 0.95))
        scored, adv = score_group(segs, preds, rewards, gt, w)
        for sc, a in zip(scored, adv.advantages):
            p = sc.predicted
            if p is None or p == gt or sc.reward <= 0:
                continue
            pen = [s for s in sc.segmented.segments if p in s.mentioned_items]
            unpen = [s for s in sc.segmented.segments if p not in s.mentioned_items]
            if not pen or not unpen:
                continue
            cases += 1
            hi = max(a[s.token_span[0] : s.token_span[1]].max() for s in pen)
            lo = min(a[s.token_span[0] : s.token_span[1]].min() for s in unpen)
            violations += int(not hi < lo)
    report(4, cases >= 100 and violations == 0, f"{cases} qualifying responses, {violations} violations (need 0)")


def test_criterion_05_zero_penalty_equivalence(report):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(100):
        segs, preds, rewards = _random_group(rng)
        _, adv = score_group(segs, preds, rewards, "kk", 0.0)
        std = standard_group_advantages(rewards, [s.token_count for s in segs])
        mismatches += int(any(a.tobytes() != b.tobytes() for a, b in zip(adv.advantages, std.advantages)))
    report(5, mismatches == 0, f"100 groups, {mismatches} not bit-identical to whole-response advantages")


# --- 6: curriculum -----------------------------------------------------------------


def _simulate_curriculum(seed, epochs=6, n=200, tau=0.1):
    rng = np.random.default_rng(seed)
    skill = rng.random(n)
    state = CurriculumState.start([f"q{k:03d}" for k in range(n)], seed, tau)
    history = [state]
    for e in range(epochs):
        log = {}
        for q in state.retained:
            p = min(1.0, skill[int(q[1:])] + 0.15 * e)
            log[q] = [float(x) for x in (rng.random(5) < p)]
        state = update(state, log)
        history.append(state)
    return history


def test_criterion_06_curriculum(report):
    exact = difficulty([1, 1, 0, 0, 0.5]) == 0.5
    a, b = _simulate_curriculum(6), _simulate_curriculum(6)
    deterministic = [s.retained for s in a] == [s.retained for s in b]
    ordered = filtered = True
    for s in a[1:]:
        keys = [(r.difficulty, r.query_id) for r in s.current.entries]
        ordered &= keys == sorted(keys)
        filtered &= all(r.difficulty >= s.tau for r in s.current.entries)
    nonincreasing = all(set(y.retained) <= set(x.retained) for x, y in zip(a, a[1:]))
    sizes = [len(s.retained) for s in a]
    ok = exact and deterministic and ordered and filtered and nonincreasing and len(a) - 1 >= 5
    report(6, ok, f"d([1,1,0,0,0.5]) == 0.5: {exact}; sorted {ordered}; tau-filtered {filtered}; "
                  f"deterministic {deterministic}; retained sizes {sizes}")


# --- 7 & 8: objective --------------------------------------------------------------


def test_criterion_07_gradient_check(report):
    eps, beta, step = 0.2, 0.01, 1e-5
    t0 = time.perf_counter()
    worst, points, seed = 0.0, 0, 0
    while points < 20:
        rng = np.random.default_rng(seed)
        seed += 1
        n, C = 40, 5
        phis = rng.normal(size=(n, C, N_FEATURES))
        W = rng.normal(scale=0.3, size=(N_FEATURES, N_KINDS))
        tokens = rng.integers(0, C * N_KINDS, size=n)
        logp = logprobs_from_features(phis, tokens, W)
        old = logp + rng.normal(scale=0.15, size=n)
        ref = logp + rng.normal(scale=0.15, size=n)
        adv = rng.normal(size=n)
        parts = loss_and_grad(W, phis, tokens, old, adv, eps, beta, ref_logp=ref)
        if np.min(np.abs(np.abs(parts.ratios - 1.0) - eps)) < 1e-3:
            continue
        fd = np.zeros_like(W)
        for idx in np.ndindex(*W.shape):
            d = np.zeros_like(W)
            d[idx] = step
            fd[idx] = (
                loss_and_grad(W + d, phis, tokens, old, adv, eps, beta, ref_logp=ref).loss
                - loss_and_grad(W - d, phis, tokens, old, adv, eps, beta, ref_logp=ref).loss
            ) / (2 * step)
        worst = max(worst, np.linalg.norm(fd - parts.grad) / np.linalg.norm(fd))
        points += 1
    dt = time.perf_counter() - t0
    report(7, worst < 1e-4 and dt < 30.0 and W.size <= 50,
           f"{W.size} params, 20 points, max relative error {worst:.1e} (< 1e-4), {dt:.2f}s (< 30s)")


def test_criterion_08_clip_examples(report):
    ok, seen = True, []
    for A in (1.0, 2.5, 0.3):
        obj, _, _ = clipped_objective(np.array([1.5]), np.array([A]), 0.2)
        ok &= obj == 1.2 * A
        obj_neg, _, _ = clipped_objective(np.array([1.5]), np.array([-A]), 0.2)
        ok &= obj_neg == 1.5 * -A  # the unclipped branch is the minimum
        seen.append(obj)
    for A in (-1.0, -2.5, -0.3):
        obj, _, _ = clipped_objective(np.array([0.5]), np.array([A]), 0.2)
        ok &= obj == 0.8 * A
        obj_pos, _, _ = clipped_objective(np.array([0.5]), np.array([-A]), 0.2)
        ok &= obj_pos == 0.5 * -A
        seen.append(obj)
    report(8, bool(ok), f"h=1.5,A=1 -> {seen[0]!r} (1.2); h=0.5,A=-1 -> {seen[3]!r} (-0.8); exact equality for 12 cases")


# --- 9: end-to-end learning ------------------------------------------------------------


def test_criterion_09_end_to_end_learning(report, tmp_path):
    cfg = RunConfig(seed=0)
    assert (cfg.n_items, cfg.n_queries, cfg.n_candidates, cfg.category_mix) == (200, 2000, 20, (0.5, 0.3, 0.2))
    t0 = time.perf_counter()
    cmd_gen(cfg, tmp_path / "world")
    result = cmd_train(cfg.replace(world_dir=str(tmp_path / "world")), tmp_path / "run")
    dt = time.perf_counter() - t0
    init, final = result.initial_test_report, result.test_report
    p = 1.0 / cfg.n_candidates
    band = 3 * math.sqrt(p * (1 - p) / init.n)
    ok = abs(init.accuracy - p) <= band and final.accuracy >= 0.60 and result.epochs_run <= 15 and dt < 600
    report(9, ok, f"held-out n={final.n}: {init.accuracy:.3f} (0.05 +- {band:.3f}) -> {final.accuracy:.3f} (>= 0.60) "
                  f"in {result.epochs_run} epochs (<= 15), {dt:.1f}s (< 600s)")


# --- 10: sweep harness -------------------------------------------------------------------

SMALL_SWEEP = {
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


def test_criterion_10_sweep(report, tmp_path):
    cfg = RunConfig.from_dict(SMALL_SWEEP)
    rows = cmd_sweep(cfg, tmp_path)
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    hashes = {
        json.loads((tmp_path / f"w_penalty={v:g}" / "manifest.json").read_text())["world_hash"] for v, _ in rows
    }
    values = [v for v, _ in rows]
    ok = lines[0] == "w_penalty,final_accuracy" and len(lines) == 7 and values == [0, 0.1, 0.2, 0.3, 0.4, 0.5]
    ok &= len(hashes) == 1
    report(10, ok, f"{len(lines) - 1} rows for {values}, {len(hashes)} distinct world hash")


# --- 11: offline scorer -------------------------------------------------------------------


def test_criterion_11_offline_scorer(report, tmp_path):
    records = [
        {"id": "go", "title": "Go (1999)", "attributes": [{"relation": "genre", "value": "scifi"}]},
        {"id": "kk", "title": "King Kong (1933)", "attributes": [{"relation": "genre", "value": "scifi"}]},
        {"id": "heat", "title": "Heat (1995)", "attributes": [{"relation": "genre", "value": "crime"}]},
    ]
    (tmp_path / "catalog.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))
    (tmp_path / "interactions.csv").write_text("u1,go\nu1,kk\nu2,kk\nu2,heat\n")
    right = "King Kong has the right genre.\n\nAnswer: \\boxed{King Kong (1933)}"
    wrong = "Heat (1995) looks fine.\n\nGo (1999) too.\n\nAnswer: \\boxed{Heat (1995)}"
    spans = [[0, 4], [4, 9], [9, 30], [30, 32], [32, len(right)]]
    rollout = {
        "query_id": "hand",
        "ground_truth": "kk",
        "candidates": ["go", "kk", "heat"],
        "responses": [{"text": right, "token_spans": spans}, {"text": wrong}, {"text": "no idea"}],
    }
    (tmp_path / "r.jsonl").write_text(json.dumps(rollout) + "\n")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"embedding_provider": "baseline"}))
    code = main(["score", "--config", str(cfg), "--world", str(tmp_path), "--rollouts", str(tmp_path / "r.jsonl"),
                 "--output", str(tmp_path / "s.jsonl")])
    out = [json.loads(x) for x in (tmp_path / "s.jsonl").read_text().splitlines()]
    total = out[0]["shaped_reward"]["total"]
    expected_counts = [len(spans), len(wrong.split()), 2]
    counts = [len(o["token_advantages"]) for o in out]
    ok = code == 0 and abs(total - 1.02) <= 1e-12 and counts == expected_counts
    report(11, ok, f"correct answer total {total!r} (1.02), token counts {counts} == {expected_counts}, exit {code}")
