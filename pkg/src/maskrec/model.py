"""The hierarchical-attention transformer and its next-item projection head.

Pre-norm residual blocks; each layer's attention runs under the causal mask
composed with the scheme mask its schedule slot assigns.  The read-out hidden
state is scored against a learned item-embedding table by dot product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masks import (
    AttentionMask,
    LayerSchedule,
    Scheme,
    build_schedule,
    causal_mask,
    compose,
    mask_for_scheme,
)
from .segmentation import TokenizedPrompt


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    n_layers: int
    ffn_dim: int
    max_seq_len: int
    vocab_size: int
    n_items: int
    schedule: LayerSchedule
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.schedule.n_layers != self.n_layers:
            raise ValueError("schedule length must equal n_layers")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "ffn_dim": self.ffn_dim,
            "max_seq_len": self.max_seq_len,
            "vocab_size": self.vocab_size,
            "n_items": self.n_items,
            "seed": self.seed,
            "schedule": {
                "schemes": [s.value for s in self.schedule.schemes],
                "n_shallow": self.schedule.n_shallow,
                "n_middle": self.schedule.n_middle,
                "n_deep": self.schedule.n_deep,
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        sched = LayerSchedule(
            schemes=tuple(Scheme(s) for s in d["schedule"]["schemes"]),
            n_shallow=d["schedule"]["n_shallow"],
            n_middle=d["schedule"]["n_middle"],
            n_deep=d["schedule"]["n_deep"],
        )
        return ModelConfig(
            d_model=d["d_model"],
            n_heads=d["n_heads"],
            n_layers=d["n_layers"],
            ffn_dim=d["ffn_dim"],
            max_seq_len=d["max_seq_len"],
            vocab_size=d["vocab_size"],
            n_items=d["n_items"],
            schedule=sched,
            seed=d.get("seed", 0),
        )


# ModelParams is a flat name -> Tensor dict; names are stable and double as
# the checkpoint schema.
ModelParams = dict[str, Tensor]


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded gaussian init scaled by 1/sqrt(d_model); norm affines at identity."""
    rng = np.random.default_rng(config.seed)
    s = 1.0 / np.sqrt(config.d_model)
    d, f = config.d_model, config.ffn_dim

    def gauss(*shape):
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

    params: ModelParams = {
        "tok_emb": gauss(config.vocab_size, d),
        "pos_emb": gauss(config.max_seq_len, d),
        "item_emb": gauss(config.n_items, d),
        "final_ln_g": Tensor(np.ones(d), requires_grad=True),
        "final_ln_b": Tensor(np.zeros(d), requires_grad=True),
    }
    for i in range(config.n_layers):
        params[f"layer{i}.wq"] = gauss(d, d)
        params[f"layer{i}.wk"] = gauss(d, d)
        params[f"layer{i}.wv"] = gauss(d, d)
        params[f"layer{i}.wo"] = gauss(d, d)
        params[f"layer{i}.w1"] = gauss(d, f)
        params[f"layer{i}.b1"] = Tensor(np.zeros(f), requires_grad=True)
        params[f"layer{i}.w2"] = gauss(f, d)
        params[f"layer{i}.b2"] = Tensor(np.zeros(d), requires_grad=True)
        params[f"layer{i}.ln1_g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"layer{i}.ln1_b"] = Tensor(np.zeros(d), requires_grad=True)
        params[f"layer{i}.ln2_g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"layer{i}.ln2_b"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def clone_params(params: ModelParams) -> ModelParams:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}


def zero_grads(params: ModelParams) -> None:
    for p in params.values():
        p.zero_grad()


@dataclass
class ForwardTrace:
    """What a forward pass exposes for inspection and scoring."""

    hidden: list[np.ndarray]          # per-layer (n, d) states (post-block), single prompt
    attention: Optional[list[np.ndarray]]  # per-layer (h, n, n) weights, if retained
    scores: np.ndarray                # (n_items,) read-out item scores
    prompt: TokenizedPrompt
    schedule: LayerSchedule


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, n_heads, d // n_heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, 1, 2), (b, n, h * dh))


def attention_layer(
    x: Tensor,
    allowed: np.ndarray,
    params: ModelParams,
    layer: int,
    n_heads: int,
    retain_attention: bool = False,
) -> tuple[Tensor, Optional[np.ndarray]]:
    """One pre-norm block: masked multi-head attention then ReLU FFN.

    ``x`` is (b, n, d); ``allowed`` is boolean, broadcastable to (b, h, n, n).
    """
    p = params
    h = ad.layer_norm(x, p[f"layer{layer}.ln1_g"], p[f"layer{layer}.ln1_b"])
    q = _split_heads(h @ p[f"layer{layer}.wq"], n_heads)
    k = _split_heads(h @ p[f"layer{layer}.wk"], n_heads)
    v = _split_heads(h @ p[f"layer{layer}.wv"], n_heads)
    dh = q.shape[-1]
    scores = ad.scale(q @ ad.transpose(k), 1.0 / np.sqrt(dh))
    weights = ad.masked_softmax(scores, allowed)
    attended = _merge_heads(weights @ v) @ p[f"layer{layer}.wo"]
    x = x + attended
    g = ad.layer_norm(x, p[f"layer{layer}.ln2_g"], p[f"layer{layer}.ln2_b"])
    ffn = ad.relu(g @ p[f"layer{layer}.w1"] + p[f"layer{layer}.b1"]) @ p[f"layer{layer}.w2"] + p[f"layer{layer}.b2"]
    x = x + ffn
    return x, (weights.data if retain_attention else None)


def _padded_batch(prompts: list[TokenizedPrompt]) -> tuple[np.ndarray, np.ndarray, int]:
    """Right-pad token ids with 0; pads are causally invisible to real rows."""
    n = max(p.n for p in prompts)
    ids = np.zeros((len(prompts), n), dtype=np.int64)
    readout = np.zeros(len(prompts), dtype=np.int64)
    for i, p in enumerate(prompts):
        ids[i, : p.n] = p.tokens
        readout[i] = p.readout_position
    return ids, readout, n


def _padded_scheme_masks(
    prompts: list[TokenizedPrompt], schedule: LayerSchedule, n: int
) -> dict[Scheme, np.ndarray]:
    """(b, 1, n, n) causal-composed mask per scheme used by the schedule.

    Pad positions carry F=0 annotations, so scheme masks never restrict them;
    the causal mask keeps them out of every real row's view.
    """
    causal = causal_mask(n)
    out: dict[Scheme, np.ndarray] = {}
    for scheme in set(schedule.schemes):
        stack = np.empty((len(prompts), 1, n, n), dtype=bool)
        for i, p in enumerate(prompts):
            m = mask_for_scheme(scheme, p).allowed
            padded = np.ones((n, n), dtype=bool)
            padded[: p.n, : p.n] = m
            stack[i, 0] = compose(causal, AttentionMask(padded)).allowed
        out[scheme] = stack
    return out


def forward_batch(
    prompts: list[TokenizedPrompt],
    params: ModelParams,
    config: ModelConfig,
    retain_attention: bool = False,
) -> tuple[Tensor, list[Optional[np.ndarray]], Tensor]:
    """Scheduled forward over a padded batch.

    Returns (scores (b, n_items), per-layer retained attention, final hidden
    (b, n, d)).  Scores are read from each prompt's read-out position.
    """
    for p in prompts:
        if p.n > config.max_seq_len:
            raise ValueError(f"prompt length {p.n} exceeds max_seq_len {config.max_seq_len}")
    ids, readout, n = _padded_batch(prompts)
    masks = _padded_scheme_masks(prompts, config.schedule, n)
    x = ad.embedding(params["tok_emb"], ids) + ad.embedding(
        params["pos_emb"], np.arange(n, dtype=np.int64)
    )
    attn: list[Optional[np.ndarray]] = []
    for layer, scheme in enumerate(config.schedule.schemes):
        x, w = attention_layer(x, masks[scheme], params, layer, config.n_heads, retain_attention)
        attn.append(w)
    x = ad.layer_norm(x, params["final_ln_g"], params["final_ln_b"])
    h = ad.take_positions(x, readout)
    scores = h @ ad.transpose(params["item_emb"])
    return scores, attn, x


def forward_batch_causal_reference(
    prompts: list[TokenizedPrompt], params: ModelParams, config: ModelConfig
) -> Tensor:
    """Schedule-free reference path: plain causal masking at every layer.

    Used as the golden twin of an all-OR schedule; it must agree bit-for-bit.
    """
    ids, readout, n = _padded_batch(prompts)
    allowed = causal_mask(n).allowed[None, None]
    x = ad.embedding(params["tok_emb"], ids) + ad.embedding(
        params["pos_emb"], np.arange(n, dtype=np.int64)
    )
    for layer in range(config.n_layers):
        x, _ = attention_layer(x, allowed, params, layer, config.n_heads)
    x = ad.layer_norm(x, params["final_ln_g"], params["final_ln_b"])
    h = ad.take_positions(x, readout)
    return h @ ad.transpose(params["item_emb"])


def forward(
    prompt: TokenizedPrompt,
    params: ModelParams,
    config: ModelConfig,
    retain_attention: bool = False,
) -> ForwardTrace:
    """Single-prompt forward returning per-layer states and optional weights."""
    ids = np.asarray([prompt.tokens], dtype=np.int64)
    n = prompt.n
    causal = causal_mask(n)
    x = ad.embedding(params["tok_emb"], ids) + ad.embedding(
        params["pos_emb"], np.arange(n, dtype=np.int64)
    )
    hidden: list[np.ndarray] = []
    attn: list[np.ndarray] = []
    for layer, scheme in enumerate(config.schedule.schemes):
        allowed = compose(causal, mask_for_scheme(scheme, prompt)).allowed[None, None]
        x, w = attention_layer(x, allowed, params, layer, config.n_heads, retain_attention=True)
        hidden.append(x.data[0].copy())
        attn.append(w[0])
    x = ad.layer_norm(x, params["final_ln_g"], params["final_ln_b"])
    h = ad.take_positions(x, np.asarray([prompt.readout_position]))
    scores = (h @ ad.transpose(params["item_emb"])).data[0]
    return ForwardTrace(
        hidden=hidden,
        attention=attn if retain_attention else None,
        scores=scores,
        prompt=prompt,
        schedule=config.schedule,
    )


def predict_next_item(trace: ForwardTrace, k: int) -> list[int]:
    """Top-k item ids by score; ties broken by ascending item id."""
    scores = trace.scores
    if k > scores.shape[0]:
        raise ValueError(f"k={k} exceeds catalog size {scores.shape[0]}")
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return [int(i) for i in order[:k]]


def grad_check(
    params: ModelParams,
    prompts: list[TokenizedPrompt],
    targets: np.ndarray,
    config: ModelConfig,
    eps: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``n_coords`` parameter coordinates across all tensors.
    """
    def loss_value() -> float:
        scores, _, _ = forward_batch(prompts, params, config)
        return float(ad.cross_entropy_mean(scores, targets).data)

    zero_grads(params)
    scores, _, _ = forward_batch(prompts, params, config)
    loss = ad.cross_entropy_mean(scores, targets)
    ad.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    names = sorted(params)
    sizes = np.array([params[k].data.size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    max_rel = 0.0
    for flat in picks:
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[t]
        idx = np.unravel_index(int(flat - offsets[t]), params[name].data.shape)
        orig = params[name].data[idx]
        params[name].data[idx] = orig + eps
        up = loss_value()
        params[name].data[idx] = orig - eps
        down = loss_value()
        params[name].data[idx] = orig
        numeric = (up - down) / (2 * eps)
        a = analytic[name][idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        max_rel = max(max_rel, rel)
    return max_rel


def save_checkpoint(path: str, params: ModelParams, config: ModelConfig) -> None:
    arrays = {k: v.data for k, v in params.items()}
    header = json.dumps({"format": "maskrec-ckpt", "version": 1, "config": config.to_dict()})
    np.savez(path, __meta__=np.frombuffer(header.encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        if meta.get("format") != "maskrec-ckpt":
            raise ValueError(f"{path}: not a maskrec checkpoint")
        config = ModelConfig.from_dict(meta["config"])
        params = {
            k: Tensor(z[k].copy(), requires_grad=True) for k in z.files if k != "__meta__"
        }
    return params, config


def default_config(vocab_size: int, n_items: int, max_seq_len: int = 96, seed: int = 0) -> ModelConfig:
    """Toy default: 6 layers with a 2-shallow / 3-middle / 1-deep schedule."""
    return ModelConfig(
        d_model=64,
        n_heads=4,
        n_layers=6,
        ffn_dim=128,
        max_seq_len=max_seq_len,
        vocab_size=vocab_size,
        n_items=n_items,
        schedule=build_schedule(6, 2, 1),
        seed=seed,
    )
