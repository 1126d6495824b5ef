"""Full-catalog ranking metrics: HR@K and NDCG@K with deterministic ties."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, tokenize_windows
from .model import ModelConfig, ModelParams, forward_batch


@dataclass(frozen=True)
class EvalReport:
    entries: tuple[dict, ...]  # {"k": int, "hr": float, "ndcg": float}
    n_examples: int
    split: str

    def metric(self, name: str, k: int) -> float:
        for e in self.entries:
            if e["k"] == k:
                return e[name]
        raise KeyError(f"no entry for k={k}")

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_examples": self.n_examples,
            "metrics": {f"{name}@{e['k']}": e[name] for e in self.entries for name in ("hr", "ndcg")},
        }


def rank_of_target(scores: np.ndarray, target: int) -> int:
    """1-based rank; ties resolved by ascending item id."""
    scores = np.asarray(scores)
    if not 0 <= target < scores.shape[0]:
        raise IndexError(f"target {target} out of range")
    t = scores[target]
    greater = int(np.sum(scores > t))
    tied_before = int(np.sum(scores[:target] == t))
    return 1 + greater + tied_before


def hr_at_k(ranks, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= k))


def ndcg_at_k(ranks, k: int) -> float:
    """Single-relevant-item form: 1/log2(rank+1) inside the cut, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = np.asarray(ranks, dtype=np.float64)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gains))


def ranks_for_split(
    params: ModelParams,
    config: ModelConfig,
    dataset: Dataset,
    split: str,
    batch_size: int = 64,
) -> np.ndarray:
    indices = dataset.indices(split)
    if not indices:
        raise ValueError(f"split {split!r} is empty")
    prompts, targets = tokenize_windows(dataset, indices)
    ranks = np.empty(len(prompts), dtype=np.int64)
    for start in range(0, len(prompts), batch_size):
        chunk = prompts[start : start + batch_size]
        scores, _, _ = forward_batch(chunk, params, config)
        for i, row in enumerate(scores.data):
            ranks[start + i] = rank_of_target(row, int(targets[start + i]))
    return ranks


def report_from_ranks(ranks: np.ndarray, split: str, ks=(5, 10)) -> EvalReport:
    entries = tuple({"k": k, "hr": hr_at_k(ranks, k), "ndcg": ndcg_at_k(ranks, k)} for k in ks)
    return EvalReport(entries=entries, n_examples=len(ranks), split=split)


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    dataset: Dataset,
    split: str = "test",
    ks=(5, 10),
    batch_size: int = 64,
) -> tuple[EvalReport, np.ndarray]:
    """Rank every window's target against the full catalog and aggregate."""
    ranks = ranks_for_split(params, config, dataset, split, batch_size)
    return report_from_ranks(ranks, split, ks), ranks
