"""Log-linear autoregressive policy over a symbolic response vocabulary.

A response is a short sequence of actions over the query's candidate slots:
``DISCUSS_j`` writes a reasoning paragraph about candidate ``j`` and
``ANSWER_j`` writes the boxed final answer and ends the response. Token id
``kind * C + j`` with kind 0 = discuss, 1 = answer.

The logit of token ``(kind, j)`` is ``phi(context, j) @ W[:, kind]``: one
weight column per token kind, shared over slots, applied to slot-specific
context features.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .graph_store import Attribute, Catalog
from .synth import CATEGORIES, HIDDEN, parse_query_tokens, relation_values

DISCUSS, ANSWER = 0, 1
N_KINDS = 2

FEATURES: tuple[str, ...] = (
    ("bias",)
    + tuple(f"category={c}" for c in CATEGORIES)
    + tuple(f"stated_frac|{c}" for c in CATEGORIES)
    + tuple(f"stated_all|{c}" for c in CATEGORIES)
    + tuple(f"evidence_match|{c}" for c in CATEGORIES)
    + ("discussed", "prev1_discuss_same", "prev1_discuss_other", "prev2_discuss_same", "at_start", "discussed_frac")
)
N_FEATURES = len(FEATURES)
_F = {name: n for n, name in enumerate(FEATURES)}
_STATIC = 3  # stated_frac, stated_all, evidence_match


def feature_spec(n_candidates: int, max_len: int) -> dict:
    return {
        "features": list(FEATURES),
        "kinds": ["discuss", "answer"],
        "n_candidates": n_candidates,
        "max_len": max_len,
        "window": 2,
    }


@dataclass(frozen=True)
class QueryContext:
    category: int
    candidates: tuple[str, ...]
    titles: tuple[str, ...]
    static: np.ndarray  # (C, 3)


class Featurizer:
    """Turns query tokens plus the attribute graph into per-slot features."""

    def __init__(self, catalog: Catalog, n_candidates: int, max_len: int = 8):
        if n_candidates < 2 or max_len < 1:
            raise ValidationError("need n_candidates >= 2 and max_len >= 1")
        self.catalog = catalog
        self.n_candidates = n_candidates
        self.max_len = max_len
        self._cache: dict[tuple[str, ...], QueryContext] = {}

    @property
    def vocab_size(self) -> int:
        return N_KINDS * self.n_candidates

    @property
    def spec(self) -> dict:
        return feature_spec(self.n_candidates, self.max_len)

    def context(self, query_tokens: Sequence[str]) -> QueryContext:
        key = tuple(query_tokens)
        ctx = self._cache.get(key)
        if ctx is None:
            ctx = self._build(key)
            self._cache[key] = ctx
        return ctx

    def _build(self, tokens: tuple[str, ...]) -> QueryContext:
        category, constraints, evidence, candidates = parse_query_tokens(tokens)
        if len(candidates) != self.n_candidates:
            raise ValidationError(f"policy expects {self.n_candidates} candidates, query has {len(candidates)}")
        graph = self.catalog.graph
        stated = [Attribute(c.relation, c.value) for c in constraints if c.value != HIDDEN]
        pinned = []
        if evidence:
            for c in constraints:
                shared = set.intersection(*(relation_values(e, c.relation, graph) for e in evidence))
                if len(shared) == 1:
                    pinned.append(Attribute(c.relation, next(iter(shared))))
        static = np.zeros((len(candidates), _STATIC))
        for j, cand in enumerate(candidates):
            attrs = graph.forward[cand]
            if stated:
                hit = sum(a in attrs for a in stated)
                static[j, 0] = hit / len(stated)
                static[j, 1] = float(hit == len(stated))
            if pinned:
                static[j, 2] = sum(a in attrs for a in pinned) / len(pinned)
        static.setflags(write=False)
        titles = tuple(self.catalog.title(c) for c in candidates)
        return QueryContext(CATEGORIES.index(category), candidates, titles, static)

    def features(self, ctx: QueryContext, history: Sequence[int]) -> np.ndarray:
        """(C, F) feature matrix for the next token given the response so far."""
        C = self.n_candidates
        phi = np.zeros((C, N_FEATURES))
        phi[:, _F["bias"]] = 1.0
        cat = CATEGORIES[ctx.category]
        phi[:, _F[f"category={cat}"]] = 1.0
        phi[:, _F[f"stated_frac|{cat}"]] = ctx.static[:, 0]
        phi[:, _F[f"stated_all|{cat}"]] = ctx.static[:, 1]
        phi[:, _F[f"evidence_match|{cat}"]] = ctx.static[:, 2]
        discussed = [t % C for t in history if t // C == DISCUSS]
        if discussed:
            phi[discussed, _F["discussed"]] = 1.0
        phi[:, _F["discussed_frac"]] = len(discussed) / self.max_len
        if not history:
            phi[:, _F["at_start"]] = 1.0
        else:
            last = history[-1]
            if last // C == DISCUSS:
                phi[:, _F["prev1_discuss_other"]] = 1.0
                phi[last % C, _F["prev1_discuss_other"]] = 0.0
                phi[last % C, _F["prev1_discuss_same"]] = 1.0
            if len(history) >= 2 and history[-2] // C == DISCUSS:
                phi[history[-2] % C, _F["prev2_discuss_same"]] = 1.0
        return phi


def step_log_probs(phi: np.ndarray, weights: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Log-softmax over the flattened ``(kind, slot)`` vocabulary.

    The single code path for both sampling and re-scoring, so that ratios
    against the sampling snapshot are exactly 1 before any update.
    """
    z = (phi @ weights).T.reshape(-1) / temperature
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


@dataclass(frozen=True)
class Response:
    tokens: tuple[int, ...]
    text: str
    token_spans: tuple[tuple[int, int], ...]
    log_probs: tuple[float, ...]
    terminated: bool  # ended with an answer token rather than max_len


def render_response(tokens: Sequence[int], ctx: QueryContext) -> tuple[str, list[tuple[int, int]]]:
    """Text plus one character span per token; paragraphs are blank-line separated."""
    C = len(ctx.candidates)
    parts, spans = [], []
    pos = 0
    for t in tokens:
        title = ctx.titles[t % C]
        para = f"Consider {title}." if t // C == DISCUSS else f"Answer: \\boxed{{{title}}}"
        if parts:
            pos += 2
        spans.append((pos, pos + len(para)))
        parts.append(para)
        pos += len(para)
    return "\n\n".join(parts), spans


class LogLinearPolicy:
    def __init__(self, featurizer: Featurizer, weights: np.ndarray | None = None):
        self.featurizer = featurizer
        if weights is None:
            weights = np.zeros((N_FEATURES, N_KINDS))
        weights = np.array(weights, dtype=np.float64)
        if weights.shape != (N_FEATURES, N_KINDS):
            raise ValidationError(f"weights must have shape {(N_FEATURES, N_KINDS)}, got {weights.shape}")
        if not np.isfinite(weights).all():
            raise ValidationError("weights must be finite")
        self.weights = weights

    @property
    def n_params(self) -> int:
        return self.weights.size

    def snapshot(self) -> LogLinearPolicy:
        w = self.weights.copy()
        w.setflags(write=False)
        return LogLinearPolicy(self.featurizer, w)

    def copy(self) -> LogLinearPolicy:
        return LogLinearPolicy(self.featurizer, self.weights.copy())

    def _finish(self, tokens: list[int], logps: list[float], ctx: QueryContext) -> Response:
        text, spans = render_response(tokens, ctx)
        done = bool(tokens) and tokens[-1] // len(ctx.candidates) == ANSWER
        return Response(tuple(tokens), text, tuple(spans), tuple(logps), done)

    def sample(
        self,
        query_tokens: Sequence[str],
        rng: np.random.Generator,
        temperature: float = 1.0,
        max_len: int | None = None,
        greedy: bool = False,
    ) -> Response:
        """One response. ``greedy`` takes the argmax, breaking exact ties with ``rng``."""
        if temperature <= 0 and not greedy:
            raise ValidationError("temperature must be > 0 (use greedy=True for argmax decoding)")
        fz = self.featurizer
        ctx = fz.context(query_tokens)
        max_len = fz.max_len if max_len is None else max_len
        C = fz.n_candidates
        tokens: list[int] = []
        logps: list[float] = []
        for _ in range(max_len):
            phi = fz.features(ctx, tokens)
            if greedy:
                lp = step_log_probs(phi, self.weights, 1.0)
                best = np.flatnonzero(lp == lp.max())
                tok = int(best[rng.integers(len(best))]) if len(best) > 1 else int(best[0])
            else:
                lp = step_log_probs(phi, self.weights, temperature)
                tok = int(rng.choice(lp.size, p=np.exp(lp)))
            tokens.append(tok)
            logps.append(float(lp[tok]))
            if tok // C == ANSWER:
                break
        return self._finish(tokens, logps, ctx)

    def greedy_response(self, query_tokens: Sequence[str], rng: np.random.Generator) -> Response:
        return self.sample(query_tokens, rng, greedy=True)


def sample_responses(
    policy: LogLinearPolicy,
    query_tokens: Sequence[str],
    G: int,
    temperature: float = 1.0,
    max_len: int | None = None,
    seed: int | np.random.Generator = 0,
    greedy: bool = False,
) -> list[Response]:
    if G < 2:
        raise ValidationError("group size G must be >= 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [policy.sample(query_tokens, rng, temperature, max_len, greedy) for _ in range(G)]


def token_features(policy: LogLinearPolicy, query_tokens: Sequence[str], response_tokens: Sequence[int]) -> np.ndarray:
    """(T, C, F) stack of the features seen at every response position."""
    fz = policy.featurizer
    ctx = fz.context(query_tokens)
    V = fz.vocab_size
    for t in response_tokens:
        if not 0 <= int(t) < V:
            raise ValidationError(f"token {t} outside vocabulary of size {V}")
    if not response_tokens:
        return np.zeros((0, fz.n_candidates, N_FEATURES))
    return np.stack([fz.features(ctx, list(response_tokens[:t])) for t in range(len(response_tokens))])


def log_prob(
    policy: LogLinearPolicy,
    query_tokens: Sequence[str],
    response_tokens: Sequence[int],
    temperature: float = 1.0,
) -> np.ndarray:
    phis = token_features(policy, query_tokens, response_tokens)
    return logprobs_from_features(phis, response_tokens, policy.weights, temperature)


def logprobs_from_features(phis: np.ndarray, tokens: Sequence[int], weights: np.ndarray, temperature: float = 1.0):
    return np.array([step_log_probs(phi, weights, temperature)[t] for phi, t in zip(phis, tokens)])


def oracle_weights() -> np.ndarray:
    """Hand-set weights that answer every well-formed synthetic query correctly.

    Answer immediately; explicit -> all stated constraints, implicit -> stated
    plus evidence, misinformed -> evidence outranks the (partly wrong) stated set.
    """
    w = np.zeros((N_FEATURES, N_KINDS))
    w[_F["bias"], DISCUSS] = -20.0
    w[_F["stated_all|explicit"], ANSWER] = 10.0
    w[_F["stated_all|implicit"], ANSWER] = 10.0
    w[_F["evidence_match|implicit"], ANSWER] = 10.0
    w[_F["evidence_match|misinformed"], ANSWER] = 10.0
    w[_F["stated_frac|misinformed"], ANSWER] = 4.0
    return w
