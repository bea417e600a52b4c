"""Clipped group-relative policy optimisation for the log-linear policy."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import curriculum as cur
from .errors import CheckpointError, ConfigError, TrainingError, ValidationError
from .graph_store import Catalog, EmbeddingTable
from .policy import (
    N_FEATURES,
    N_KINDS,
    Featurizer,
    LogLinearPolicy,
    Response,
    feature_spec,
    logprobs_from_features,
    sample_responses,
    step_log_probs,
    token_features,
)
from .raae import GroupAdvantages, ScoredResponse, check_w_penalty, score_group, segment_and_tokenize
from .rewards import RewardWeights, ShapedReward, extract_answer, shape_reward
from .seeding import derive_seed, make_rng
from .synth import CATEGORIES, QueryInstance, render_query_tokens

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "step", "loss", "kl", "clip_frac", "mean_reward", "accuracy")


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.05
    group_size: int = 5
    clip_eps: float = 0.2
    kl_coef: float = 0.01
    temperature: float = 1.0
    batch_size: int = 32
    max_response_len: int = 8
    inner_updates: int = 2
    w_penalty: float = 0.3
    w1: float = 0.01
    w2: float = 0.01
    tau: float = 0.1
    seed: int = 0
    max_epochs: int = 15
    patience: int = 1
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.batch_size < 1 or self.max_response_len < 1 or self.inner_updates < 1:
            raise ConfigError("batch_size, max_response_len and inner_updates must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")
        if self.learning_rate <= 0 or self.kl_coef < 0:
            raise ConfigError("learning_rate must be > 0 and kl_coef >= 0")
        if not (0 <= self.val_fraction < 1 and 0 <= self.test_fraction < 1 and self.val_fraction + self.test_fraction < 1):
            raise ConfigError("val_fraction + test_fraction must lie in [0, 1)")
        check_w_penalty(self.w_penalty)
        RewardWeights(self.w1, self.w2)
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")

    @property
    def reward_weights(self) -> RewardWeights:
        return RewardWeights(self.w1, self.w2, 1)


# --- rollouts -----------------------------------------------------------------


@dataclass
class Rollout:
    query: QueryInstance
    responses: list[Response]
    rewards: list[ShapedReward]
    scored: list[ScoredResponse]
    advantages: GroupAdvantages
    features: list[np.ndarray]  # per response, (T, C, F)


@dataclass
class RolloutBatch:
    rollouts: list[Rollout]

    def flat(self):
        """Concatenate every token: features (N, C, F), actions, old log-probs, advantages."""
        phis, toks, old, adv = [], [], [], []
        for ro in self.rollouts:
            for resp, feats, a in zip(ro.responses, ro.features, ro.advantages.advantages):
                if len(resp.tokens) != len(a):
                    raise ValidationError("advantages not aligned with tokens")
                phis.append(feats)
                toks.extend(resp.tokens)
                old.extend(resp.log_probs)
                adv.append(a)
        if not toks:
            raise ValidationError("batch has no tokens")
        return np.concatenate(phis), np.array(toks), np.array(old), np.concatenate(adv)


def score_responses(
    query: QueryInstance,
    responses: Sequence[Response],
    catalog: Catalog,
    embeddings: EmbeddingTable,
    config: TrainerConfig,
) -> tuple[list[ShapedReward], list[ScoredResponse], GroupAdvantages]:
    items = [catalog.get(c) for c in query.candidates]
    rewards, segmented, predicted = [], [], []
    for resp in responses:
        ans = extract_answer(resp.text, items)
        rewards.append(shape_reward(ans.item, query.ground_truth, catalog.graph, embeddings, config.reward_weights))
        segmented.append(segment_and_tokenize(resp.text, items, resp.token_spans))
        predicted.append(ans.item)
    scored, adv = score_group(segmented, predicted, [r.total for r in rewards], query.ground_truth, config.w_penalty)
    return rewards, scored, adv


def collect_rollout(
    policy: LogLinearPolicy,
    query: QueryInstance,
    catalog: Catalog,
    embeddings: EmbeddingTable,
    config: TrainerConfig,
    seed: int,
) -> Rollout:
    qt = render_query_tokens(query)
    snap = policy.snapshot()
    responses = sample_responses(
        snap, qt, config.group_size, config.temperature, config.max_response_len, seed=np.random.default_rng(seed)
    )
    rewards, scored, adv = score_responses(query, responses, catalog, embeddings, config)
    feats = [token_features(snap, qt, r.tokens) for r in responses]
    return Rollout(query, responses, rewards, scored, adv, feats)


# --- objective ----------------------------------------------------------------


def clipped_objective(h: np.ndarray, A: np.ndarray, eps: float):
    """Clipped surrogate averaged over tokens.

    Returns ``(objective, d objective / d log pi per token, clip-active mask)``.
    A token's gradient vanishes exactly when the clipped branch is selected.
    """
    h = np.asarray(h, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if h.shape != A.shape or h.size == 0:
        raise ValidationError("ratios and advantages must be aligned and non-empty")
    N = h.size
    unclipped = h * A
    clipped = np.clip(h, 1.0 - eps, 1.0 + eps) * A
    obj = float(np.minimum(unclipped, clipped).sum() / N)
    active = ((A > 0) & (h > 1.0 + eps)) | ((A < 0) & (h < 1.0 - eps))
    d_logp = np.where(active, 0.0, unclipped) / N
    return obj, d_logp, active


def kl_penalty(logp: np.ndarray, ref_logp: np.ndarray):
    """Mean of ``exp(d) - d - 1`` with ``d = log pi_ref - log pi``; returns (value, d/d log pi)."""
    logp = np.asarray(logp, dtype=np.float64)
    d = np.asarray(ref_logp, dtype=np.float64) - logp
    N = logp.size
    ed = np.exp(d)
    return float((ed - d - 1.0).sum() / N), (1.0 - ed) / N


def logp_jacobian(phis: np.ndarray, tokens: np.ndarray, weights: np.ndarray, temperature: float = 1.0):
    """Per-token log-probs and their gradient w.r.t. ``weights`` (N, F, K)."""
    N, C, F = phis.shape
    logp = logprobs_from_features(phis, tokens, weights, temperature)
    z = np.einsum("ncf,fk->nck", phis, weights) / temperature
    z -= z.max(axis=(1, 2), keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=(1, 2), keepdims=True)
    expected = np.einsum("ncf,nck->nfk", phis, probs)
    chosen = np.zeros((N, F, N_KINDS))
    kind, slot = tokens // C, tokens % C
    chosen[np.arange(N), :, kind] = phis[np.arange(N), slot, :]
    return logp, (chosen - expected) / temperature


@dataclass
class LossParts:
    loss: float
    objective: float
    kl: float
    clip_frac: float
    grad: np.ndarray
    ratios: np.ndarray


def loss_and_grad(
    weights: np.ndarray,
    phis: np.ndarray,
    tokens: np.ndarray,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    eps: float,
    kl_coef: float,
    temperature: float = 1.0,
    ref_logp: np.ndarray | None = None,
) -> LossParts:
    """``loss = -(clipped objective) + kl_coef * KL`` and its analytic gradient."""
    ref_logp = old_logp if ref_logp is None else ref_logp
    logp, jac = logp_jacobian(phis, tokens, weights, temperature)
    h = np.exp(logp - old_logp)
    obj, d_obj, active = clipped_objective(h, advantages, eps)
    kl, d_kl = kl_penalty(logp, ref_logp)
    coef = -d_obj + kl_coef * d_kl
    grad = np.einsum("n,nfk->fk", coef, jac)
    return LossParts(-obj + kl_coef * kl, obj, kl, float(active.mean()), grad, h)


def train_step(policy: LogLinearPolicy, batch: RolloutBatch, config: TrainerConfig) -> tuple[LogLinearPolicy, dict]:
    """Run ``inner_updates`` gradient steps against the rollout snapshot."""
    phis, tokens, old, adv = batch.flat()
    w = policy.weights.copy()
    inner = []
    for k in range(config.inner_updates):
        parts = loss_and_grad(w, phis, tokens, old, adv, config.clip_eps, config.kl_coef, config.temperature)
        if not (np.isfinite(parts.grad).all() and np.isfinite(parts.loss)):
            raise TrainingError(
                f"non-finite gradient at inner step {k}: loss={parts.loss}, "
                f"max|w|={np.abs(w).max():.3g}, max ratio={parts.ratios.max():.3g}"
            )
        inner.append({"loss": parts.loss, "kl": parts.kl, "clip_frac": parts.clip_frac, "objective": parts.objective})
        w = w - config.learning_rate * parts.grad
    rewards = [r.total for ro in batch.rollouts for r in ro.rewards]
    metrics = dict(inner[-1])
    metrics.update(
        mean_abs_advantage=float(np.abs(adv).mean()),
        mean_reward=float(np.mean(rewards)),
        inner=inner,
    )
    return LogLinearPolicy(policy.featurizer, w), metrics


# --- evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    n: int
    per_category: dict[str, float]
    per_category_n: dict[str, int]


def evaluate(policy, queries: Sequence[QueryInstance], catalog: Catalog, seed: int = 0) -> EvalReport:
    """Greedy decoding accuracy; ``policy`` needs ``greedy_response(query_tokens, rng)``."""
    if not queries:
        raise ValidationError("evaluate needs at least one query")
    hits: dict[str, list[int]] = {c: [] for c in CATEGORIES}
    for q in queries:
        rng = make_rng(seed, "eval", q.query_id)
        resp = policy.greedy_response(render_query_tokens(q), rng)
        ans = extract_answer(resp.text, [catalog.get(c) for c in q.candidates])
        hits[q.category].append(int(ans.item == q.ground_truth))
    total = sum(sum(v) for v in hits.values())
    return EvalReport(
        accuracy=total / len(queries),
        n=len(queries),
        per_category={c: (sum(v) / len(v) if v else float("nan")) for c, v in hits.items()},
        per_category_n={c: len(v) for c, v in hits.items()},
    )


# --- data split & persistence ---------------------------------------------------


def split_queries(queries: Sequence[QueryInstance], seed: int, val_fraction: float, test_fraction: float):
    """Seeded (train, val, test) split."""
    order = make_rng(seed, "split").permutation(len(queries))
    n_val = int(round(len(queries) * val_fraction))
    n_test = int(round(len(queries) * test_fraction))
    test = [queries[i] for i in order[:n_test]]
    val = [queries[i] for i in order[n_test : n_test + n_val]]
    train = [queries[i] for i in order[n_test + n_val :]]
    return train, val, test


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(payload: Mapping) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path: str | Path, policy: LogLinearPolicy, config: Mapping, extra: Mapping | None = None) -> None:
    payload = {
        "weights": policy.weights.tolist(),
        "feature_spec": policy.featurizer.spec,
        "config": dict(config),
        "config_hash": config_hash(config),
    }
    if extra:
        payload["state"] = dict(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")


def load_checkpoint(path: str | Path, featurizer: Featurizer | None = None) -> tuple[np.ndarray, dict]:
    """Returns (weights, payload). Verifies integrity and, if given, featurizer compatibility."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        weights = np.array(payload["weights"], dtype=np.float64)
        cfg, h = payload["config"], payload["config_hash"]
        spec = payload["feature_spec"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if config_hash(cfg) != h:
        raise CheckpointError(f"config hash mismatch in {path}")
    if weights.shape != (N_FEATURES, N_KINDS):
        raise CheckpointError(f"weight shape {weights.shape} incompatible with this build")
    if spec["features"] != feature_spec(2, 1)["features"]:
        raise CheckpointError("checkpoint featurization differs from this build")
    if featurizer is not None and (spec["n_candidates"], spec["max_len"]) != (
        featurizer.n_candidates,
        featurizer.max_len,
    ):
        raise CheckpointError("checkpoint candidate count / max length differ from the environment")
    return weights, payload


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


# --- training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    policy: LogLinearPolicy
    best_policy: LogLinearPolicy
    metrics: list[dict]
    epochs_run: int
    stop_reason: str
    val_history: list[float] = field(default_factory=list)
    test_report: EvalReport | None = None
    initial_test_report: EvalReport | None = None


def train(
    config: TrainerConfig,
    catalog: Catalog,
    embeddings: EmbeddingTable,
    queries: Sequence[QueryInstance],
    run_dir: str | Path | None = None,
    run_config: Mapping | None = None,
    resume: bool = False,
    progress: Callable[[str], None] | None = None,
) -> TrainResult:
    """Curriculum-scheduled clipped group-relative training.

    Per epoch: schedule -> rollouts -> shaped rewards -> token advantages ->
    ``train_step`` per batch -> curriculum update -> validation accuracy.
    Stops after ``patience`` epochs without validation improvement, when the
    curriculum filters every query, or at ``max_epochs``. The returned
    ``best_policy`` is the one with the best validation accuracy.
    """
    if not queries:
        raise ValidationError("training needs a non-empty query set")
    say = progress or log.info
    n_cand = len(queries[0].candidates)
    featurizer = Featurizer(catalog, n_cand, config.max_response_len)
    train_q, val_q, test_q = split_queries(queries, config.seed, config.val_fraction, config.test_fraction)
    if not train_q:
        raise ValidationError("training split is empty")
    by_id = {q.query_id: q for q in train_q}
    run_config = dict(run_config) if run_config is not None else {"trainer": asdict(config)}

    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_dir = run_dir / "checkpoints" if run_dir else None
    policy = LogLinearPolicy(featurizer)
    state = cur.CurriculumState.start([q.query_id for q in train_q], config.seed, config.tau)
    step = 0
    best_val, best_weights, bad_epochs = -1.0, policy.weights.copy(), 0
    val_history: list[float] = []
    start_epoch = 1

    if resume:
        if run_dir is None:
            raise ConfigError("resume requires a run directory")
        latest = ckpt_dir / "latest.json"
        weights, payload = load_checkpoint(latest, featurizer)
        st = payload.get("state", {})
        policy = LogLinearPolicy(featurizer, weights)
        state = cur.CurriculumState.from_json(st["curriculum"])
        step = st["step"]
        best_val = st["best_val"]
        best_weights = np.array(st["best_weights"])
        bad_epochs = st["bad_epochs"]
        val_history = list(st["val_history"])
        start_epoch = st["epoch"] + 1
        if st.get("stopped"):
            say(f"run already finished ({st['stopped']})")
    elif run_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(run_config, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        with open(run_dir / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_FIELDS)
        if (run_dir / "schedule.csv").exists():
            (run_dir / "schedule.csv").unlink()
        cur.append_schedule_csv(run_dir / "schedule.csv", state)

    def checkpoint(epoch: int, stopped: str | None = None) -> None:
        if ckpt_dir is None:
            return
        extra = {
            "epoch": epoch,
            "step": step,
            "curriculum": state.to_json(),
            "best_val": best_val,
            "best_weights": best_weights.tolist(),
            "bad_epochs": bad_epochs,
            "val_history": val_history,
            "stopped": stopped,
        }
        save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.json", policy, run_config, extra)
        save_checkpoint(ckpt_dir / "latest.json", policy, run_config, extra)
        save_checkpoint(ckpt_dir / "best.json", LogLinearPolicy(featurizer, best_weights), run_config)

    initial_test = evaluate(policy, test_q, catalog, config.seed) if test_q and not resume else None
    if not resume:
        checkpoint(0)

    all_metrics: list[dict] = []
    stop_reason = "max_epochs"
    epoch = start_epoch - 1
    stopped_already = resume and st.get("stopped")
    for epoch in range(start_epoch, config.max_epochs + 1):
        if stopped_already:
            stop_reason = st["stopped"]
            epoch -= 1
            break
        if state.current is None or state.current.converged:
            stop_reason = "curriculum_converged"
            epoch -= 1
            break
        schedule = state.retained
        epoch_log: dict[str, list[float]] = {}
        rows = []
        for b in range(0, len(schedule), config.batch_size):
            ids = schedule[b : b + config.batch_size]
            rollouts = [
                collect_rollout(
                    policy, by_id[qid], catalog, embeddings, config, derive_seed(config.seed, "rollout", epoch, qid)
                )
                for qid in ids
            ]
            for ro in rollouts:
                epoch_log[ro.query.query_id] = [r.total for r in ro.rewards]
            policy, m = train_step(policy, RolloutBatch(rollouts), config)
            step += 1
            rows.append(
                {"epoch": epoch, "step": step, "loss": m["loss"], "kl": m["kl"], "clip_frac": m["clip_frac"],
                 "mean_reward": m["mean_reward"], "accuracy": ""}
            )
        state = cur.update(state, epoch_log)
        if val_q:
            acc = evaluate(policy, val_q, catalog, config.seed).accuracy
        else:
            acc = float(np.mean([np.mean(v) >= 1.0 for v in epoch_log.values()]))
        val_history.append(acc)
        if rows:
            rows[-1]["accuracy"] = acc
        all_metrics.extend(rows)
        if run_dir is not None:
            with open(run_dir / "metrics.csv", "a", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for r in rows:
                    w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])
            cur.append_schedule_csv(run_dir / "schedule.csv", state)
        if acc > best_val:
            best_val, best_weights, bad_epochs = acc, policy.weights.copy(), 0
        else:
            bad_epochs += 1
        say(
            f"epoch {epoch}: {len(schedule)} queries, mean reward "
            f"{np.mean([r['mean_reward'] for r in rows]):.3f}, val acc {acc:.3f}, "
            f"next schedule {state.current.n_retained} ({state.current.n_filtered} filtered)"
        )
        stopped = None
        if bad_epochs >= config.patience:
            stopped = "early_stop"
        elif state.current.converged:
            stopped = "curriculum_converged"
        checkpoint(epoch, stopped)
        if stopped:
            stop_reason = stopped
            break

    best_policy = LogLinearPolicy(featurizer, best_weights)
    test_report = evaluate(best_policy, test_q, catalog, config.seed) if test_q else None
    return TrainResult(
        policy=policy,
        best_policy=best_policy,
        metrics=all_metrics,
        epochs_run=max(epoch, 0) if config.max_epochs else 0,
        stop_reason=stop_reason,
        val_history=val_history,
        test_report=test_report,
        initial_test_report=initial_test,
    )
