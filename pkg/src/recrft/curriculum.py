"""Online curriculum: per-query difficulty from last epoch's rollouts."""

from __future__ import annotations

import csv
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ValidationError
from .seeding import make_rng


@dataclass(frozen=True)
class DifficultyRecord:
    query_id: str
    difficulty: float | None  # None before any rollout
    epoch: int


@dataclass(frozen=True)
class EpochDataset:
    epoch: int
    entries: tuple[DifficultyRecord, ...]
    n_filtered: int = 0

    @property
    def query_ids(self) -> list[str]:
        return [r.query_id for r in self.entries]

    @property
    def n_retained(self) -> int:
        return len(self.entries)

    @property
    def converged(self) -> bool:
        return not self.entries

    def __len__(self) -> int:
        return len(self.entries)


def difficulty(rewards: Sequence[float]) -> float:
    """Mean of ``1 - r`` with each reward clamped to [0, 1]."""
    if len(rewards) == 0:
        raise ValidationError("difficulty needs at least one rollout reward")
    return sum(1.0 - min(max(float(r), 0.0), 1.0) for r in rewards) / len(rewards)


def build_epoch_dataset(records: Iterable[DifficultyRecord], tau: float, epoch: int | None = None) -> EpochDataset:
    """Drop records below ``tau`` and sort the rest by (difficulty, query_id)."""
    records = list(records)
    epochs = {r.epoch for r in records}
    if len(epochs) > 1:
        raise ValidationError(f"records span several epochs: {sorted(epochs)}")
    if any(r.difficulty is None for r in records):
        raise ValidationError("every record needs a difficulty")
    kept = sorted((r for r in records if r.difficulty >= tau), key=lambda r: (r.difficulty, r.query_id))
    if epoch is None:
        epoch = (epochs.pop() + 1) if epochs else 0
    return EpochDataset(epoch, tuple(kept), len(records) - len(kept))


def bootstrap_first_epoch(queries: Sequence[str], seed: int) -> EpochDataset:
    """Seeded shuffle; there is no difficulty signal before the first rollouts."""
    if not queries:
        raise ConfigError("cannot build a curriculum over zero queries")
    order = make_rng(seed, "curriculum-bootstrap").permutation(len(queries))
    return EpochDataset(1, tuple(DifficultyRecord(queries[i], None, 0) for i in order))


@dataclass
class CurriculumState:
    tau: float = 0.1
    epoch: int = 1
    current: EpochDataset | None = None
    records: dict[str, DifficultyRecord] = field(default_factory=dict)
    filtered: set[str] = field(default_factory=set)

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")

    @classmethod
    def start(cls, queries: Sequence[str], seed: int, tau: float = 0.1) -> CurriculumState:
        return cls(tau=tau, epoch=1, current=bootstrap_first_epoch(queries, seed))

    @property
    def retained(self) -> list[str]:
        return self.current.query_ids if self.current is not None else []

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "epoch": self.epoch,
            "current": [[r.query_id, r.difficulty, r.epoch] for r in self.current.entries] if self.current else None,
            "current_filtered": self.current.n_filtered if self.current else 0,
            "records": {k: [r.difficulty, r.epoch] for k, r in sorted(self.records.items())},
            "filtered": sorted(self.filtered),
        }

    @classmethod
    def from_json(cls, payload: Mapping) -> CurriculumState:
        current = None
        if payload["current"] is not None:
            entries = tuple(DifficultyRecord(q, d, e) for q, d, e in payload["current"])
            current = EpochDataset(payload["epoch"], entries, payload.get("current_filtered", 0))
        return cls(
            tau=payload["tau"],
            epoch=payload["epoch"],
            current=current,
            records={k: DifficultyRecord(k, d, e) for k, (d, e) in payload["records"].items()},
            filtered=set(payload["filtered"]),
        )


def update(state: CurriculumState, epoch_log: Mapping[str, Sequence[float]]) -> CurriculumState:
    """Score this epoch's queries from their own rollouts and emit the next schedule.

    Only queries trained this epoch are scored; filtered queries never come back.
    """
    trained = set(state.retained)
    unknown = set(epoch_log) - trained
    if unknown:
        raise ValidationError(f"rollout log for queries not scheduled this epoch: {sorted(unknown)[:5]}")
    missing = trained - set(epoch_log)
    if missing:
        raise ValidationError(f"no rollouts logged for scheduled queries: {sorted(missing)[:5]}")
    recs = [DifficultyRecord(q, difficulty(epoch_log[q]), state.epoch) for q in sorted(epoch_log)]
    nxt = build_epoch_dataset(recs, state.tau, epoch=state.epoch + 1)
    kept = set(nxt.query_ids)
    records = dict(state.records)
    records.update({r.query_id: r for r in recs})
    return CurriculumState(
        tau=state.tau,
        epoch=state.epoch + 1,
        current=nxt,
        records=records,
        filtered=state.filtered | {r.query_id for r in recs if r.query_id not in kept},
    )


def schedule_rows(state: CurriculumState) -> list[tuple[int, str, str, int]]:
    """``(epoch, query_id, difficulty, retained)`` rows for the current schedule and its drops."""
    rows = []
    if state.current is None:
        return rows
    for r in state.current.entries:
        d = "" if r.difficulty is None else repr(r.difficulty)
        rows.append((state.current.epoch, r.query_id, d, 1))
    dropped = sorted(
        q for q in state.filtered if q in state.records and state.records[q].epoch == state.epoch - 1
    )
    for q in dropped:
        rows.append((state.current.epoch, q, repr(state.records[q].difficulty), 0))
    return rows


def append_schedule_csv(path: str | Path, state: CurriculumState) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["epoch", "query_id", "difficulty", "retained"])
        w.writerows(schedule_rows(state))
