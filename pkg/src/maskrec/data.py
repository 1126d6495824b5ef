"""Dataset ingestion, preprocessing, and the synthetic corpus generator.

Pipeline: raw interaction CSV -> 5-core filter -> sliding windows of length
11 (10 history + 1 target) -> chronological 8:1:1 split keyed on the target
interaction's timestamp.
"""

from __future__ import annotations

import csv
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .segmentation import (
    InteractionSequence,
    TokenizedPrompt,
    build_catalog,
    default_template,
    load_catalog_csv,
    save_catalog_csv,
    tokenize_prompt,
)

WINDOW_LEN = 11
HISTORY_LEN = WINDOW_LEN - 1


@dataclass(frozen=True)
class Window:
    history: tuple[int, ...]
    target: int
    timestamp: int

    def __post_init__(self):
        if len(self.history) != HISTORY_LEN:
            raise ValueError(f"window history must have {HISTORY_LEN} items")


@dataclass
class Dataset:
    title_texts: list[str]
    windows: list[Window]
    splits: list[str]  # "train" | "valid" | "test", aligned with windows

    def __post_init__(self):
        if len(self.windows) != len(self.splits):
            raise ValueError("windows and splits must align")

    _vocab_cache: Optional[tuple] = field(default=None, init=False, repr=False, compare=False)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def build_vocab_objects(self):
        """(catalog, vocab, template) derived deterministically from titles."""
        if self._vocab_cache is None:
            catalog, vocab = build_catalog(self.title_texts)
            self._vocab_cache = (catalog, vocab, default_template(vocab))
        return self._vocab_cache


def load_interactions(path: str) -> list[InteractionSequence]:
    """Read ``user_id,item_id,timestamp`` rows, grouped per user, time-sorted."""
    by_user: dict[int, list[tuple[int, int]]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is not None and [h.strip() for h in header[:3]] != ["user_id", "item_id", "timestamp"]:
            raise ValueError(f"{path}: expected header user_id,item_id,timestamp")
        for lineno, row in enumerate(reader, start=2):
            if len(row) < 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 columns")
            try:
                user, item, ts = int(row[0]), int(row[1]), int(row[2])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            by_user.setdefault(user, []).append((item, ts))
    out = []
    for user in sorted(by_user):
        events = sorted(by_user[user], key=lambda e: e[1])  # stable on ties
        out.append(InteractionSequence(user_id=user, events=tuple(events)))
    return out


def five_core_filter(sequences: list[InteractionSequence], min_count: int = 5) -> list[InteractionSequence]:
    """Drop users and items with < min_count interactions until a fixed point."""
    seqs = {s.user_id: list(s.events) for s in sequences}
    while True:
        item_counts: Counter = Counter()
        for events in seqs.values():
            item_counts.update(item for item, _ in events)
        bad_items = {i for i, c in item_counts.items() if c < min_count}
        changed = False
        if bad_items:
            for user, events in seqs.items():
                kept = [(i, t) for i, t in events if i not in bad_items]
                if len(kept) != len(events):
                    seqs[user] = kept
                    changed = True
        bad_users = [u for u, events in seqs.items() if len(events) < min_count]
        for u in bad_users:
            del seqs[u]
            changed = True
        if not changed:
            break
    return [
        InteractionSequence(user_id=u, events=tuple(events))
        for u, events in sorted(seqs.items())
    ]


def sliding_windows(sequence: InteractionSequence, window_len: int = WINDOW_LEN, stride: int = 1) -> list[Window]:
    """Contiguous stride-1 windows; the last event is the prediction target."""
    if window_len < 2:
        raise ValueError("window length must be >= 2")
    events = sequence.events
    out = []
    for start in range(0, len(events) - window_len + 1, stride):
        chunk = events[start : start + window_len]
        out.append(
            Window(
                history=tuple(i for i, _ in chunk[:-1]),
                target=chunk[-1][0],
                timestamp=chunk[-1][1],
            )
        )
    return out


def chronological_split(
    windows: list[Window], title_texts: list[str], ratios: tuple[int, int, int] = (8, 1, 1)
) -> Dataset:
    """Stable timestamp sort, then prefix/middle/suffix cut at the ratio points."""
    if not windows:
        raise ValueError("no windows to split")
    total = sum(ratios)
    order = sorted(range(len(windows)), key=lambda i: windows[i].timestamp)
    n = len(windows)
    cut1 = n * ratios[0] // total
    cut2 = n * (ratios[0] + ratios[1]) // total
    sorted_windows = [windows[i] for i in order]
    splits = ["train"] * cut1 + ["valid"] * (cut2 - cut1) + ["test"] * (n - cut2)
    return Dataset(title_texts=title_texts, windows=sorted_windows, splits=splits)


@dataclass
class SyntheticSpec:
    """Planted item-level transition structure with content-free titles."""

    n_items: int
    n_users: int
    seq_len: int
    transition: np.ndarray  # (n_items, n_items) row-stochastic
    title_noise: bool = True
    seed: int = 0
    title_word_pool: int = 200

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=np.float64)
        if t.shape != (self.n_items, self.n_items):
            raise ValueError("transition matrix shape must be (n_items, n_items)")
        if np.any(t < 0) or np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be non-negative and sum to 1")
        self.transition = t


def markov_transition(n_items: int, branching: int = 3, concentration: float = 4.0, seed: int = 0) -> np.ndarray:
    """Sparse row-stochastic matrix: each item has ``branching`` likely successors."""
    rng = np.random.default_rng(seed)
    t = np.zeros((n_items, n_items))
    for i in range(n_items):
        succ = rng.choice(n_items, size=min(branching, n_items), replace=False)
        w = rng.dirichlet(np.full(len(succ), concentration))
        t[i, succ] = w
        t[i] /= t[i].sum()
    return t


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[InteractionSequence], list[str]]:
    """Markov-chain user sequences plus per-item pseudo-titles.

    Titles are 2-8 words; with ``title_noise`` they are random draws from a
    shared pool, carrying no information about the transition structure.
    """
    rng = np.random.default_rng(spec.seed)
    titles: list[str] = []
    for item in range(spec.n_items):
        length = int(rng.integers(2, 9))
        if spec.title_noise:
            words = [f"w{int(w)}" for w in rng.integers(0, spec.title_word_pool, size=length)]
        else:
            words = [f"item{item}"] + [f"part{j}" for j in range(length - 1)]
        titles.append(" ".join(words))
    sequences = []
    for user in range(spec.n_users):
        item = int(rng.integers(0, spec.n_items))
        events = []
        for step in range(spec.seq_len):
            events.append((item, step))
            item = int(rng.choice(spec.n_items, p=spec.transition[item]))
        sequences.append(InteractionSequence(user_id=user, events=tuple(events)))
    return sequences, titles


def preprocess(sequences: list[InteractionSequence], title_texts: list[str]) -> Dataset:
    """The full pipeline: 5-core -> windows -> chronological 8:1:1 split."""
    filtered = five_core_filter(sequences)
    windows: list[Window] = []
    for seq in filtered:
        windows.extend(sliding_windows(seq))
    return chronological_split(windows, title_texts)


def tokenize_windows(dataset: Dataset, indices: list[int]) -> tuple[list[TokenizedPrompt], np.ndarray]:
    """Prompts plus target item ids for the given window indices."""
    catalog, _, template = dataset.build_vocab_objects()
    prompts = [tokenize_prompt(list(dataset.windows[i].history), catalog, template) for i in indices]
    targets = np.asarray([dataset.windows[i].target for i in indices], dtype=np.int64)
    return prompts, targets


def cooccurrence_stats(dataset: Dataset, indices: Optional[list[int]] = None) -> dict:
    """Co-occurrence means over the tokenized train windows (or ``indices``)."""
    if indices is None:
        indices = dataset.indices("train")
    prompts, _ = tokenize_windows(dataset, indices)
    return cooccurrence_from_prompts(prompts)


def cooccurrence_from_prompts(prompts: list[TokenizedPrompt]) -> dict:
    """Mean corpus co-occurrence count per observed token pair, by pair class.

    A pair is one unordered (token-id, token-id) combination occurring between
    two item-token positions of one prompt; intra vs cross follows whether the
    positions share a history slot.
    """
    intra: Counter = Counter()
    cross: Counter = Counter()
    for p in prompts:
        f = p.item_flags()
        slot = p.slot_ids()
        toks = np.asarray(p.tokens)
        item_pos = np.flatnonzero(f)
        for a_i, j in enumerate(item_pos):
            for k in item_pos[:a_i]:
                key = (min(toks[j], toks[k]), max(toks[j], toks[k]))
                if slot[j] == slot[k]:
                    intra[key] += 1
                else:
                    cross[key] += 1
    return {
        "intra_pair_mean_frequency": (sum(intra.values()) / len(intra)) if intra else None,
        "cross_pair_mean_frequency": (sum(cross.values()) / len(cross)) if cross else None,
        "n_intra_pairs": len(intra),
        "n_cross_pairs": len(cross),
    }


def save_dataset(dataset: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_catalog_csv(os.path.join(out_dir, "catalog.csv"), dataset.title_texts)
    with open(os.path.join(out_dir, "windows.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["history", "target", "timestamp"])
        for w in dataset.windows:
            writer.writerow(["|".join(map(str, w.history)), w.target, w.timestamp])
    with open(os.path.join(out_dir, "split.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "split"])
        for i, s in enumerate(dataset.splits):
            writer.writerow([i, s])


def load_dataset(path: str) -> Dataset:
    title_texts = load_catalog_csv(os.path.join(path, "catalog.csv"))
    windows = []
    with open(os.path.join(path, "windows.csv"), newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            windows.append(
                Window(
                    history=tuple(int(x) for x in row[0].split("|")),
                    target=int(row[1]),
                    timestamp=int(row[2]),
                )
            )
    splits = [None] * len(windows)
    with open(os.path.join(path, "split.csv"), newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            splits[int(row[0])] = row[1]
    return Dataset(title_texts=title_texts, windows=windows, splits=splits)


def save_interactions_csv(path: str, sequences: list[InteractionSequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["user_id", "item_id", "timestamp"])
        for seq in sequences:
            for item, ts in seq.events:
                writer.writerow([seq.user_id, item, ts])


def summary_stats(sequences: list[InteractionSequence]) -> dict:
    """User/item/interaction counts and density."""
    users = len(sequences)
    items = len({i for s in sequences for i, _ in s.events})
    interactions = sum(len(s.events) for s in sequences)
    density = interactions / (users * items) if users and items else 0.0
    return {"users": users, "items": items, "interactions": interactions, "density": density}
