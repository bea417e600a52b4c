"""Offline rollout scoring for external trainers.

Input JSONL, one query group per line::

    {"query_id": "...", "ground_truth": "...", "candidates": [...],
     "responses": [{"text": "...", "token_spans": [[start, end], ...]}]}

``token_spans`` are optional character offsets; without them whitespace tokens
are used. Output JSONL has one record per response, or one error record per
failed input line.
"""

from __future__ import annotations

import json
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError, RecRFTError
from .graph_store import Catalog, EmbeddingTable
from .raae import score_group, segment_and_tokenize
from .rewards import RewardWeights, extract_answer, shape_reward


@dataclass
class ScoreSummary:
    n_records: int = 0
    n_responses: int = 0
    n_errors: int = 0

    @property
    def ok(self) -> bool:
        return self.n_errors == 0


def score_record(
    rec: Mapping,
    catalog: Catalog,
    embeddings: EmbeddingTable,
    weights: RewardWeights = RewardWeights(),
    w_penalty: float = 0.3,
) -> list[dict]:
    if not isinstance(rec, Mapping):
        raise ParseError("record is not a JSON object")
    try:
        qid = str(rec["query_id"])
        gt = str(rec["ground_truth"])
        cands = [str(c) for c in rec["candidates"]]
        responses = rec["responses"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"missing field {exc}") from None
    if not isinstance(responses, list) or not all(isinstance(r, Mapping) and isinstance(r.get("text"), str) for r in responses):
        raise ParseError("'responses' must be a list of objects with a string 'text'")
    catalog.get(gt)
    items = [catalog.get(c) for c in cands]
    rewards, segmented, predicted = [], [], []
    for resp in responses:
        ans = extract_answer(resp["text"], items)
        rewards.append(shape_reward(ans.item, gt, catalog.graph, embeddings, weights))
        segmented.append(segment_and_tokenize(resp["text"], items, resp.get("token_spans")))
        predicted.append(ans.item)
    scored, adv = score_group(segmented, predicted, [r.total for r in rewards], gt, w_penalty)
    out = []
    for k, (rw, sc, a) in enumerate(zip(rewards, scored, adv.advantages)):
        out.append(
            {
                "query_id": qid,
                "response_index": k,
                "predicted": sc.predicted,
                "shaped_reward": rw.to_dict(),
                "segment_rewards": list(sc.segment_rewards),
                "token_advantages": [float(x) for x in a],
            }
        )
    return out


def iter_scored(
    lines: Iterator[str],
    catalog: Catalog,
    embeddings: EmbeddingTable,
    weights: RewardWeights = RewardWeights(),
    w_penalty: float = 0.3,
) -> Iterator[dict]:
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        qid = None
        try:
            rec = json.loads(line)
            if isinstance(rec, Mapping):
                qid = rec.get("query_id")
            yield from score_record(rec, catalog, embeddings, weights, w_penalty)
        except json.JSONDecodeError as exc:
            yield {"line": lineno, "query_id": qid, "error": f"invalid JSON ({exc.msg})"}
        except (RecRFTError, KeyError) as exc:
            yield {"line": lineno, "query_id": qid, "error": f"{type(exc).__name__}: {exc}"}


def score_file(
    rollouts_path: str | Path,
    out_path: str | Path,
    catalog: Catalog,
    embeddings: EmbeddingTable,
    weights: RewardWeights = RewardWeights(),
    w_penalty: float = 0.3,
) -> ScoreSummary:
    summary = ScoreSummary()
    with open(rollouts_path, encoding="utf-8") as fin:
        lines = fin.readlines()
    summary.n_records = sum(1 for ln in lines if ln.strip())
    with open(out_path, "w", encoding="utf-8") as fout:
        for rec in iter_scored(iter(lines), catalog, embeddings, weights, w_penalty):
            if "error" in rec:
                summary.n_errors += 1
            else:
                summary.n_responses += 1
            fout.write(json.dumps(rec, sort_keys=True) + "\n")
    return summary
