"""Minibatch training with periodic validation and patience-based early stop.

The protocol: cross-entropy over the item catalog at the read-out position,
validation every ``eval_every`` steps, best checkpoint kept by valid NDCG@10,
stop after ``patience`` consecutive evaluations without strict improvement or
at ``max_steps``.  Fully deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset, tokenize_windows
from .evaluation import evaluate
from .model import ModelConfig, ModelParams, clone_params, forward_batch, zero_grads

LEARNING_RATE_GRID = (1e-3, 5e-4, 1e-4, 5e-5)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_steps: int = 1600
    eval_every: int = 100
    patience: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < self.eval_every:
            raise ValueError("max_steps must be >= eval_every")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_steps": self.max_steps,
            "eval_every": self.eval_every,
            "patience": self.patience,
            "seed": self.seed,
        }


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    hr5: float
    ndcg5: float
    hr10: float
    ndcg10: float


@dataclass
class TrainHistory:
    records: list[EvalRecord] = field(default_factory=list)
    best_step: int = 0
    stop_reason: str = ""


class AdamState:
    """Adaptive-moment optimizer state over a named parameter dict."""

    def __init__(self, params: ModelParams, betas=(0.9, 0.999), eps=1e-8):
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def update(self, params: ModelParams, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data -= lr * (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + self.eps)


def step(
    params: ModelParams,
    config: ModelConfig,
    prompts,
    targets: np.ndarray,
    state: AdamState,
    lr: float,
) -> float:
    """One gradient update on a batch; returns the batch loss."""
    if len(prompts) == 0:
        raise ValueError("empty batch")
    zero_grads(params)
    scores, _, _ = forward_batch(prompts, params, config)
    loss = ad.cross_entropy_mean(scores, targets)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss at optimizer step {state.t + 1}")
    ad.backward(loss)
    state.update(params, lr)
    return value


def train(
    params: ModelParams,
    config: ModelConfig,
    dataset: Dataset,
    train_cfg: TrainConfig,
) -> tuple[ModelParams, TrainHistory]:
    """Run the loop; returns (params at best valid NDCG@10, history)."""
    train_idx = dataset.indices("train")
    valid_idx = dataset.indices("valid")
    if not train_idx or not valid_idx:
        raise ValueError("train and valid splits must be non-empty")
    prompts, targets = tokenize_windows(dataset, train_idx)

    rng = np.random.default_rng(train_cfg.seed)
    state = AdamState(params)
    history = TrainHistory()
    best_ndcg = -np.inf
    best_params = clone_params(params)
    bad_evals = 0
    losses: list[float] = []

    order = rng.permutation(len(prompts))
    cursor = 0
    for s in range(1, train_cfg.max_steps + 1):
        if cursor + train_cfg.batch_size > len(order):
            order = rng.permutation(len(prompts))
            cursor = 0
        batch_idx = order[cursor : cursor + train_cfg.batch_size]
        cursor += train_cfg.batch_size
        batch_prompts = [prompts[i] for i in batch_idx]
        batch_targets = targets[batch_idx]
        losses.append(step(params, config, batch_prompts, batch_targets, state, train_cfg.learning_rate))

        if s % train_cfg.eval_every == 0:
            report, _ = evaluate(params, config, dataset, split="valid")
            rec = EvalRecord(
                step=s,
                train_loss=float(np.mean(losses)),
                hr5=report.metric("hr", 5),
                ndcg5=report.metric("ndcg", 5),
                hr10=report.metric("hr", 10),
                ndcg10=report.metric("ndcg", 10),
            )
            history.records.append(rec)
            losses = []
            if rec.ndcg10 > best_ndcg:
                best_ndcg = rec.ndcg10
                best_params = clone_params(params)
                history.best_step = s
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= train_cfg.patience:
                    history.stop_reason = "early_stop"
                    return best_params, history

    history.stop_reason = "max_steps"
    return best_params, history


def history_csv_rows(history: TrainHistory) -> list[list]:
    rows = [["step", "train_loss", "hr5", "ndcg5", "hr10", "ndcg10"]]
    for r in history.records:
        rows.append([r.step, repr(r.train_loss), repr(r.hr5), repr(r.ndcg5), repr(r.hr10), repr(r.ndcg10)])
    return rows
