"""Attention diagnostics: intra- vs cross-item aggregates, positional
distances, heatmap export, and trained-model skew comparison.

Only causally-allowed, strictly-lower-triangle item-token pairs are counted;
upper-triangle weights are identically zero and would dilute the means.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, tokenize_windows
from .masks import Scheme
from .model import ForwardTrace, ModelConfig, ModelParams, forward
from .segmentation import TokenizedPrompt


@dataclass(frozen=True)
class AttentionStats:
    intra_total_proportion: Optional[float]
    cross_total_proportion: Optional[float]
    intra_mean_per_pair: Optional[float]
    cross_mean_per_pair: Optional[float]
    n_intra_pairs: int
    n_cross_pairs: int
    scope: dict

    def to_dict(self) -> dict:
        return {
            "intra_total_proportion": self.intra_total_proportion,
            "cross_total_proportion": self.cross_total_proportion,
            "intra_mean_per_pair": self.intra_mean_per_pair,
            "cross_mean_per_pair": self.cross_mean_per_pair,
            "n_intra_pairs": self.n_intra_pairs,
            "n_cross_pairs": self.n_cross_pairs,
            "scope": self.scope,
        }


@dataclass(frozen=True)
class DistanceStats:
    intra_mean_distance: Optional[float]
    cross_mean_distance: Optional[float]

    def to_dict(self) -> dict:
        return {
            "intra_mean_distance": self.intra_mean_distance,
            "cross_mean_distance": self.cross_mean_distance,
        }


def _pair_classes(prompt: TokenizedPrompt) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (n, n) matrices over strictly-lower-triangle item-token pairs."""
    f = prompt.item_flags()
    slot = prompt.slot_ids()
    lower = np.tril(np.ones((prompt.n, prompt.n), dtype=bool), k=-1)
    both = f[:, None] & f[None, :] & lower
    intra = both & (slot[:, None] == slot[None, :])
    cross = both & (slot[:, None] != slot[None, :])
    return intra, cross


def attention_aggregate(
    traces: Sequence[ForwardTrace],
    prompts: Sequence[TokenizedPrompt],
    layers: Optional[Sequence[int]] = None,
) -> AttentionStats:
    """Sum and count attention over item-token pairs, split intra vs cross.

    ``layers`` defaults to the schedule's OR layers; IN/CR layers would force
    the split mechanically.
    """
    if len(traces) != len(prompts):
        raise ValueError("traces and prompts must align")
    intra_sum = cross_sum = 0.0
    n_intra = n_cross = 0
    for trace, prompt in zip(traces, prompts):
        if trace.attention is None:
            raise ValueError("trace does not retain attention weights")
        scope = layers
        if scope is None:
            scope = [i for i, s in enumerate(trace.schedule.schemes) if s is Scheme.OR]
        intra, cross = _pair_classes(prompt)
        for layer in scope:
            w = trace.attention[layer]  # (h, n, n)
            for head in range(w.shape[0]):
                intra_sum += float(w[head][intra].sum())
                cross_sum += float(w[head][cross].sum())
                n_intra += int(intra.sum())
                n_cross += int(cross.sum())
    total = intra_sum + cross_sum
    return AttentionStats(
        intra_total_proportion=(intra_sum / total) if total > 0 else None,
        cross_total_proportion=(cross_sum / total) if total > 0 else None,
        intra_mean_per_pair=(intra_sum / n_intra) if n_intra else None,
        cross_mean_per_pair=(cross_sum / n_cross) if n_cross else None,
        n_intra_pairs=n_intra,
        n_cross_pairs=n_cross,
        scope={"layers": list(layers) if layers is not None else "OR", "examples": len(traces)},
    )


def distance_stats(prompts: Sequence[TokenizedPrompt]) -> DistanceStats:
    """Mean |j - k| over item-token pairs, split by same-item membership."""
    if not prompts:
        raise ValueError("no prompts")
    intra_d = []
    cross_d = []
    for prompt in prompts:
        intra, cross = _pair_classes(prompt)
        jj, kk = np.nonzero(intra)
        intra_d.extend((jj - kk).tolist())
        jj, kk = np.nonzero(cross)
        cross_d.extend((jj - kk).tolist())
    return DistanceStats(
        intra_mean_distance=float(np.mean(intra_d)) if intra_d else None,
        cross_mean_distance=float(np.mean(cross_d)) if cross_d else None,
    )


def export_heatmap(trace: ForwardTrace, layer: int, head: int, path: str) -> None:
    """Write one head's weight matrix as CSV plus a sidecar annotation CSV."""
    if trace.attention is None:
        raise ValueError("trace does not retain attention weights")
    if not 0 <= layer < len(trace.attention):
        raise IndexError(f"layer {layer} out of range")
    w = trace.attention[layer]
    if not 0 <= head < w.shape[0]:
        raise IndexError(f"head {head} out of range")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        for row in w[head]:
            writer.writerow([repr(float(x)) for x in row])
    sidecar = path + ".annotations.csv"
    p = trace.prompt
    with open(sidecar, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["position", "token", "is_item", "is_last", "item_index"])
        for j in range(p.n):
            writer.writerow(
                [j, p.tokens[j], int(p.is_item[j]), int(p.is_last[j]),
                 "" if p.item_index[j] is None else p.item_index[j]]
            )


def load_heatmap(path: str) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as f:
        return np.asarray([[float(x) for x in row] for row in csv.reader(f)])


def stats_for_model(
    params: ModelParams,
    config: ModelConfig,
    dataset: Dataset,
    split: str = "valid",
    max_examples: int = 100,
    layers: Optional[Sequence[int]] = None,
) -> AttentionStats:
    indices = dataset.indices(split)[:max_examples]
    prompts, _ = tokenize_windows(dataset, indices)
    traces = [forward(p, params, config, retain_attention=True) for p in prompts]
    return attention_aggregate(traces, prompts, layers=layers)


def skew_report(
    baseline: tuple[ModelParams, ModelConfig],
    scheduled: tuple[ModelParams, ModelConfig],
    dataset: Dataset,
    split: str = "valid",
    max_examples: int = 100,
    path: Optional[str] = None,
) -> dict:
    """Compare attention aggregates of an all-OR model and a scheduled model.

    The scheduled model's stats are reported separately for its OR layers and
    its CR layers.
    """
    base_stats = stats_for_model(*baseline, dataset, split, max_examples)
    sched_params, sched_config = scheduled
    or_layers = [i for i, s in enumerate(sched_config.schedule.schemes) if s is Scheme.OR]
    cr_layers = [
        i for i, s in enumerate(sched_config.schedule.schemes) if s in (Scheme.CR, Scheme.CR_PRE)
    ]
    report = {
        "baseline": base_stats.to_dict(),
        "scheduled_or_layers": stats_for_model(
            sched_params, sched_config, dataset, split, max_examples, layers=or_layers
        ).to_dict() if or_layers else None,
        "scheduled_cr_layers": stats_for_model(
            sched_params, sched_config, dataset, split, max_examples, layers=cr_layers
        ).to_dict() if cr_layers else None,
    }
    base = base_stats
    if base.intra_mean_per_pair is not None and base.cross_mean_per_pair is not None:
        report["baseline_intra_minus_cross_mean"] = base.intra_mean_per_pair - base.cross_mean_per_pair
    if path is not None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    return report
