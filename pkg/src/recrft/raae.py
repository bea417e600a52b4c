"""Reasoning-aware token advantages.

A response is cut into paragraph segments; segments that mention a wrongly
recommended item have their reward scaled by ``1 - w_penalty``; segment rewards
are broadcast to tokens and normalised over every token of the group.
"""

from __future__ import annotations

import re
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ValidationError
from .graph_store import Item
from .text import normalize_title

_BLANK_RUN = re.compile(r"\n[ \t\r\f\v]*\n(?:[ \t\r\f\v]*\n)*")
_WS = re.compile(r"\s+")
_TOKEN = re.compile(r"\S+")


class TextSegment(NamedTuple):
    text: str
    start: int
    end: int


class Token(NamedTuple):
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class Segment:
    text: str
    token_span: tuple[int, int]  # half-open
    mentioned_items: frozenset[str]

    @property
    def n_tokens(self) -> int:
        return self.token_span[1] - self.token_span[0]


@dataclass(frozen=True)
class SegmentedResponse:
    segments: tuple[Segment, ...]
    token_count: int
    degenerate: bool = False

    def __post_init__(self):
        if not self.segments:
            raise ValidationError("a response has at least one segment")
        pos = 0
        for seg in self.segments:
            a, b = seg.token_span
            if a != pos or b < a:
                raise ValidationError("segment token spans must be ordered, disjoint and contiguous")
            pos = b
        if pos != self.token_count:
            raise ValidationError(f"segments cover {pos} tokens, response has {self.token_count}")


@dataclass(frozen=True)
class GroupAdvantages:
    token_rewards: tuple[np.ndarray, ...]
    advantages: tuple[np.ndarray, ...]
    group_mean: float
    group_std: float


def segment_response(text: str) -> list[TextSegment]:
    """Split on blank-line runs; each run stays with the segment before it."""
    if not text:
        return [TextSegment("", 0, 0)]
    out = []
    start = 0
    for m in _BLANK_RUN.finditer(text):
        end = m.end()
        if not text[end:].strip():
            break
        if not text[start : m.start()].strip():
            # leading blank lines belong to the first real paragraph
            continue
        out.append(TextSegment(text[start:end], start, end))
        start = end
    out.append(TextSegment(text[start:], start, len(text)))
    return out


def tokenize(text: str) -> list[Token]:
    """Whitespace tokens with character offsets."""
    return [Token(m.group(), m.start(), m.end()) for m in _TOKEN.finditer(text)]


def _normalize_body(s: str) -> str:
    return _WS.sub(" ", s.casefold())


def detect_mentions(segment_text: str, candidates: Sequence[Item]) -> frozenset[str]:
    body = _normalize_body(segment_text)
    found = set()
    for c in candidates:
        key = normalize_title(c.title)
        if key and key in body:
            found.add(c.id)
    return frozenset(found)


def check_token_spans(spans: Sequence[Sequence[int]], text_len: int) -> list[tuple[int, int]]:
    out = []
    prev = 0
    for n, sp in enumerate(spans):
        if len(sp) != 2:
            raise ValidationError(f"token span {n} must be [start, end]")
        a, b = int(sp[0]), int(sp[1])
        if not 0 <= a <= b <= text_len:
            raise ValidationError(f"token span {n} {[a, b]} outside text of length {text_len}")
        if a < prev:
            raise ValidationError(f"token span {n} starts before the previous token")
        prev = a
        out.append((a, b))
    return out


def segment_and_tokenize(
    text: str,
    candidates: Sequence[Item],
    token_spans: Sequence[Sequence[int]] | None = None,
) -> SegmentedResponse:
    """Build a ``SegmentedResponse``.

    ``token_spans`` (character offsets, sorted by start) override the
    whitespace tokenizer; a token belongs to the segment holding its start.
    """
    if token_spans is None:
        starts = [t.start for t in tokenize(text)]
    else:
        starts = [a for a, _ in check_token_spans(token_spans, len(text))]
    pieces = segment_response(text)
    segments = []
    t = 0
    for k, piece in enumerate(pieces):
        last = k == len(pieces) - 1
        first_tok = t
        while t < len(starts) and (last or starts[t] < piece.end):
            t += 1
        segments.append(Segment(piece.text, (first_tok, t), detect_mentions(piece.text, candidates)))
    return SegmentedResponse(tuple(segments), len(starts), degenerate=not text)


def check_w_penalty(w_penalty: float) -> None:
    # 0 is accepted as the ablation point (plain group-relative advantages)
    if not 0.0 <= w_penalty < 1.0:
        raise ConfigError(f"w_penalty must lie in [0, 1), got {w_penalty}")


def segment_rewards(
    segmented: SegmentedResponse,
    p: str | None,
    gt: str,
    r_i: float,
    w_penalty: float,
) -> list[float]:
    check_w_penalty(w_penalty)
    wrong = p is not None and p != gt
    penalized = (1.0 - w_penalty) * r_i
    return [penalized if wrong and p in seg.mentioned_items else r_i for seg in segmented.segments]


def map_token_rewards(segments: Sequence[Segment], seg_rewards: Sequence[float]) -> np.ndarray:
    if len(segments) != len(seg_rewards):
        raise ValidationError("one reward per segment required")
    n_tokens = segments[-1].token_span[1] if segments else 0
    out = np.full(n_tokens, np.nan)
    for seg, r in zip(segments, seg_rewards):
        a, b = seg.token_span
        out[a:b] = r
    if np.isnan(out).any():
        raise AssertionError("token not covered by any segment")
    return out


def group_advantages(token_reward_vectors: Sequence[Sequence[float]]) -> GroupAdvantages:
    """Normalise token rewards by the mean and population std of the whole group."""
    if len(token_reward_vectors) < 2:
        raise ConfigError("group-relative advantages need at least 2 responses")
    vecs = tuple(np.asarray(v, dtype=np.float64) for v in token_reward_vectors)
    r = np.concatenate(vecs)
    if r.size == 0:
        raise ValidationError("group has no tokens")
    mean = float(np.mean(r))
    std = float(np.std(r)) if np.ptp(r) > 0.0 else 0.0
    if std == 0.0:
        return GroupAdvantages(vecs, tuple(np.zeros_like(v) for v in vecs), mean, 0.0)
    advs = tuple((v - mean) / std for v in vecs)
    return GroupAdvantages(vecs, advs, mean, std)


def standard_group_advantages(rewards: Sequence[float], lengths: Sequence[int]) -> GroupAdvantages:
    """Whole-response rewards broadcast to tokens, then group-normalised."""
    return group_advantages([np.full(int(n), float(r)) for r, n in zip(rewards, lengths)])


@dataclass(frozen=True)
class ScoredResponse:
    segmented: SegmentedResponse
    predicted: str | None
    reward: float
    segment_rewards: tuple[float, ...]


def score_group(
    segmented: Sequence[SegmentedResponse],
    predicted: Sequence[str | None],
    rewards: Sequence[float],
    gt: str,
    w_penalty: float,
) -> tuple[list[ScoredResponse], GroupAdvantages]:
    """Segment rewards and token advantages for one query's group of responses."""
    scored = []
    vectors = []
    for seg, p, r in zip(segmented, predicted, rewards, strict=True):
        sr = segment_rewards(seg, p, gt, r, w_penalty)
        scored.append(ScoredResponse(seg, p, r, tuple(sr)))
        vectors.append(map_token_rewards(seg.segments, sr))
    return scored, group_advantages(vectors)
