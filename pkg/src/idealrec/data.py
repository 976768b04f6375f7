"""Interaction logs, click-sequence windows, negative sampling and synthetic drift streams."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kernel import Rng
from .models import Interaction


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    user: int
    item: int
    timestamp: int


def load_interactions(path: str | Path) -> list[InteractionEvent]:
    """Read ``user<TAB>item<TAB>timestamp`` rows after one header line."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: no such file")
    events: list[InteractionEvent] = []
    errors: list[str] = []
    with p.open() as fh:
        next(fh, None)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                errors.append(f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
                continue
            try:
                u, i, ts = (int(f) for f in fields)
            except ValueError:
                errors.append(f"line {lineno}: non-integer field in {line!r}")
                continue
            if u < 0 or i < 0:
                errors.append(f"line {lineno}: negative id")
                continue
            events.append(InteractionEvent(u, i, ts))
    if errors:
        raise DataError(f"{p}: malformed input\n" + "\n".join(errors))
    return events


def save_interactions(events: Iterable[InteractionEvent], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        fh.write("user\titem\ttimestamp\n")
        for e in events:
            fh.write(f"{e.user}\t{e.item}\t{e.timestamp}\n")


def kcore_filter(events: list[InteractionEvent], k: int = 5) -> list[InteractionEvent]:
    """Drop duplicate (user, item) pairs, then users and items with < k events until stable."""
    seen = set()
    out = []
    for e in sorted(events, key=lambda e: (e.user, e.timestamp, e.item)):
        if (e.user, e.item) not in seen:
            seen.add((e.user, e.item))
            out.append(e)
    while True:
        uc, ic = defaultdict(int), defaultdict(int)
        for e in out:
            uc[e.user] += 1
            ic[e.item] += 1
        kept = [e for e in out if uc[e.user] >= k and ic[e.item] >= k]
        if len(kept) == len(out):
            return kept
        out = kept


def user_histories(events: Iterable[InteractionEvent]) -> dict[int, list[int]]:
    """Per-user item lists ordered by (timestamp, item id)."""
    by_user: dict[int, list[InteractionEvent]] = defaultdict(list)
    for e in events:
        by_user[e.user].append(e)
    return {u: [e.item for e in sorted(evs, key=lambda e: (e.timestamp, e.item))]
            for u, evs in sorted(by_user.items())}


def build_sequences(events: Iterable[InteractionEvent], max_len: int = 30) -> dict[int, list[tuple[tuple[int, ...], int]]]:
    """Per-user (prefix, next item) pairs; prefixes hold the last ``max_len`` clicks."""
    out = {}
    for u, items in user_histories(events).items():
        if len(items) < 2:
            continue
        out[u] = [(tuple(items[max(0, t - max_len):t]), items[t]) for t in range(1, len(items))]
    return out


def negative_sample(pairs: Mapping[int, Sequence[tuple[tuple[int, ...], int]]], ratio: int,
                    pool: Sequence[int], rng: Rng,
                    exclude: Mapping[int, set[int]] | None = None) -> list[Interaction]:
    """Attach ``ratio`` uniformly drawn unseen items to every positive pair.

    ``exclude`` defaults to each user's positives in ``pairs``; negatives are
    drawn without replacement per positive.
    """
    pool_arr = np.asarray(sorted(set(pool)), dtype=np.int64)
    out: list[Interaction] = []
    for u in sorted(pairs):
        rows = pairs[u]
        seen = set(exclude[u]) if exclude is not None else (
            {i for prefix, nxt in rows for i in prefix} | {nxt for _, nxt in rows})
        allowed = pool_arr[~np.isin(pool_arr, list(seen))]
        if ratio > 0 and len(allowed) < ratio:
            raise DataError(f"user {u}: only {len(allowed)} unseen items in pool, need {ratio}")
        for prefix, nxt in rows:
            out.append(Interaction(u, nxt, prefix, 1))
            if ratio:
                for neg in rng.choice(allowed, size=ratio, replace=False):
                    out.append(Interaction(u, int(neg), prefix, 0))
    return out


def leave_one_out(pairs: Mapping[int, Sequence], ) -> tuple[dict, dict]:
    """Split per-user pairs into (train: all but last, test: last)."""
    train = {u: list(rows[:-1]) for u, rows in pairs.items() if len(rows) > 1}
    test = {u: [rows[-1]] for u, rows in pairs.items() if rows}
    return train, test


# ---------------------------------------------------------------- synthetic drift

@dataclass(frozen=True)
class DriftConfig:
    users: int = 200
    items: int = 400
    domains: int = 4
    switch_prob: float = 0.05
    length: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError("switch_prob must lie in [0, 1]")
        if self.domains < 2:
            raise ValueError("need at least 2 domains")
        if self.items < self.domains:
            raise ValueError("need at least one item per domain")
        if self.users < 1 or self.length < 2:
            raise ValueError("need >= 1 user and stream length >= 2")


@dataclass
class DriftStream:
    user: int
    items: list[int]
    domains: list[int]
    switches: list[int] = field(default_factory=list)  # steps whose domain differs from the previous step


@dataclass
class DriftData:
    cfg: DriftConfig
    streams: list[DriftStream]

    def other_domains(self, domain: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_pools", {})
        if domain not in cache:
            cache[domain] = np.concatenate(
                [domain_block(d, self.cfg) for d in range(self.cfg.domains) if d != domain])
        return cache[domain]

    def domain_of(self, item: int) -> int:
        return item_domain(item, self.cfg)

    def events(self) -> list[InteractionEvent]:
        return [InteractionEvent(s.user, it, t) for s in self.streams for t, it in enumerate(s.items)]

    def save(self, path: str | Path, switches_path: str | Path) -> None:
        save_interactions(self.events(), path)
        with Path(switches_path).open("w") as fh:
            fh.write("user\tstep\tfrom_domain\tto_domain\n")
            for s in self.streams:
                for t in s.switches:
                    fh.write(f"{s.user}\t{t}\t{s.domains[t - 1]}\t{s.domains[t]}\n")


def domain_block(domain: int, cfg: DriftConfig) -> np.ndarray:
    edges = np.linspace(0, cfg.items, cfg.domains + 1).astype(int)
    return np.arange(edges[domain], edges[domain + 1])


def item_domain(item: int, cfg: DriftConfig) -> int:
    edges = np.linspace(0, cfg.items, cfg.domains + 1).astype(int)
    return int(np.searchsorted(edges, item, side="right") - 1)


def synth_drift_stream(cfg: DriftConfig) -> DriftData:
    """Users hop between item-domain blocks; each step clicks a uniform item of the current block.

    With probability ``switch_prob`` the domain is redrawn uniformly (it may
    land on the same domain). ``switches`` lists steps where it changed.
    """
    rng = Rng([cfg.seed, 101])
    blocks = [domain_block(d, cfg) for d in range(cfg.domains)]
    streams = []
    for u in range(cfg.users):
        d = int(rng.integers(cfg.domains))
        items, doms, switches = [], [], []
        for t in range(cfg.length):
            if t > 0 and rng.random() < cfg.switch_prob:
                nd = int(rng.integers(cfg.domains))
                if nd != d:
                    switches.append(t)
                d = nd
            doms.append(d)
            items.append(int(rng.choice(blocks[d])))
        streams.append(DriftStream(u, items, doms, switches))
    return DriftData(cfg, streams)


def drift_negatives(data: DriftData, user_items: set[int], domain: int, ratio: int, rng: Rng) -> np.ndarray:
    """``ratio`` items from other domains that the user never clicked."""
    pool = data.other_domains(domain)
    allowed = pool[~np.isin(pool, list(user_items), assume_unique=True)]
    if len(allowed) < ratio:
        raise DataError(f"only {len(allowed)} cross-domain items available, need {ratio}")
    return rng.choice(allowed, size=ratio, replace=False)


@dataclass
class StepSet:
    """Per-step candidate sets for one user's stream segment.

    ``prefixes[k]`` is the click sequence before step ``steps[k]``;
    ``candidates[k, 0]`` is the clicked item, the rest are negatives.
    """
    user: int
    steps: list[int]
    prefixes: list[tuple[int, ...]]
    candidates: np.ndarray
    labels: np.ndarray


def drift_steps(data: DriftData, start: int, stop: int, ratio: int, max_len: int, seed: int) -> list[StepSet]:
    """Labeled candidate sets for steps ``start..stop-1`` (clamped to >= 1) of every stream."""
    out = []
    for s in data.streams:
        rng = Rng([seed, 7, s.user, start])
        seen = set(s.items)
        steps = list(range(max(1, start), min(stop, len(s.items))))
        cands = np.zeros((len(steps), ratio + 1), dtype=np.int64)
        for k, t in enumerate(steps):
            cands[k, 0] = s.items[t]
            if ratio:
                cands[k, 1:] = drift_negatives(data, seen, s.domains[t], ratio, rng)
        labels = np.zeros_like(cands, dtype=np.float64)
        labels[:, 0] = 1.0
        prefixes = [tuple(s.items[max(0, t - max_len):t]) for t in steps]
        out.append(StepSet(s.user, steps, prefixes, cands, labels))
    return out


def steps_from_events(events: list[InteractionEvent], ratio: int, max_len: int, seed: int,
                      pool: Sequence[int] | None = None) -> list[StepSet]:
    """Candidate sets for ingested logs: every position t >= 1 with uniform unseen negatives."""
    hist = user_histories(events)
    pool_arr = np.asarray(sorted(set(pool) if pool is not None else {e.item for e in events}), dtype=np.int64)
    out = []
    for u, items in hist.items():
        if len(items) < 2:
            continue
        rng = Rng([seed, 9, u])
        allowed = pool_arr[~np.isin(pool_arr, items)]
        if ratio and len(allowed) < ratio:
            raise DataError(f"user {u}: only {len(allowed)} unseen items in pool, need {ratio}")
        steps = list(range(1, len(items)))
        cands = np.zeros((len(steps), ratio + 1), dtype=np.int64)
        for k, t in enumerate(steps):
            cands[k, 0] = items[t]
            if ratio:
                cands[k, 1:] = rng.choice(allowed, size=ratio, replace=False)
        labels = np.zeros_like(cands, dtype=np.float64)
        labels[:, 0] = 1.0
        out.append(StepSet(u, steps, [tuple(items[max(0, t - max_len):t]) for t in steps], cands, labels))
    return out


def slice_steps(sets: list[StepSet], start: int, stop: int) -> list[StepSet]:
    """Restrict each StepSet to steps in [start, stop)."""
    out = []
    for s in sets:
        keep = [k for k, t in enumerate(s.steps) if start <= t < stop]
        if keep:
            out.append(StepSet(s.user, [s.steps[k] for k in keep], [s.prefixes[k] for k in keep],
                               s.candidates[keep], s.labels[keep]))
    return out


def steps_to_interactions(sets: list[StepSet]) -> list[Interaction]:
    return [
        Interaction(s.user, int(c), s.prefixes[k], int(y))
        for s in sets for k in range(len(s.steps))
        for c, y in zip(s.candidates[k], s.labels[k])
    ]


def write_tsv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
