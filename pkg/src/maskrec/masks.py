"""Attention mask construction and layer scheduling.

Masks are boolean allowed-matrices (True = attention permitted).  They stay
boolean everywhere; the conversion to additive -inf terms happens only inside
the masked softmax kernel, which normalizes over allowed entries.

Schemes:
  IN       item tokens attend only within their own item span
  OR       plain (unrestricted) attention, the scheme mask is all-true
  CR       among item tokens, only last-token-to-last-token pairs survive
  CR_PRE   the naive variant that merely removes same-item off-diagonal pairs
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .segmentation import TokenizedPrompt


class Scheme(enum.Enum):
    IN = "IN"
    OR = "OR"
    CR = "CR"
    CR_PRE = "CR_PRE"


class InvalidScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray  # (n, n) bool

    def __post_init__(self):
        a = self.allowed
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.dtype != np.bool_:
            raise ValueError(f"allowed must be a square bool matrix, got {a.shape} {a.dtype}")
        a.setflags(write=False)

    @property
    def n(self) -> int:
        return self.allowed.shape[0]


def full_mask(n: int) -> AttentionMask:
    if n < 1:
        raise ValueError("mask size must be >= 1")
    return AttentionMask(np.ones((n, n), dtype=bool))


def causal_mask(n: int) -> AttentionMask:
    """allowed[j][k] iff j >= k: each position sees itself and earlier ones."""
    if n < 1:
        raise ValueError("mask size must be >= 1")
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))


def intra_item_mask(prompt: TokenizedPrompt) -> AttentionMask:
    """Block (j, k) exactly when both are item tokens of different items."""
    f = prompt.item_flags()
    slot = prompt.slot_ids()
    blocked = f[:, None] & f[None, :] & (slot[:, None] != slot[None, :])
    return AttentionMask(~blocked)


def cross_item_pre_mask(prompt: TokenizedPrompt) -> AttentionMask:
    """Block off-diagonal same-item pairs, keeping everything else."""
    n = prompt.n
    f = prompt.item_flags()
    slot = prompt.slot_ids()
    offdiag = ~np.eye(n, dtype=bool)
    blocked = offdiag & f[:, None] & f[None, :] & (slot[:, None] == slot[None, :])
    return AttentionMask(~blocked)


def cross_item_mask(prompt: TokenizedPrompt) -> AttentionMask:
    """Among item tokens, keep only last-token-to-last-token pairs (and the diagonal)."""
    n = prompt.n
    f = prompt.item_flags()
    last = prompt.last_flags()
    offdiag = ~np.eye(n, dtype=bool)
    blocked = offdiag & f[:, None] & f[None, :] & ~(last[:, None] & last[None, :])
    return AttentionMask(~blocked)


def compose(base: AttentionMask, scheme: AttentionMask) -> AttentionMask:
    """Elementwise AND; the closed form of stacking additive -inf mask terms."""
    if base.n != scheme.n:
        raise ValueError(f"mask size mismatch: {base.n} vs {scheme.n}")
    return AttentionMask(base.allowed & scheme.allowed)


def mask_for_scheme(scheme: Scheme, prompt: TokenizedPrompt) -> AttentionMask:
    """The scheme mask alone; the caller composes it with the causal mask."""
    if scheme is Scheme.OR:
        return full_mask(prompt.n)
    if scheme is Scheme.IN:
        return intra_item_mask(prompt)
    if scheme is Scheme.CR:
        return cross_item_mask(prompt)
    if scheme is Scheme.CR_PRE:
        return cross_item_pre_mask(prompt)
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass(frozen=True)
class LayerSchedule:
    """Per-layer mask-scheme assignment plus the block counts that built it."""

    schemes: tuple[Scheme, ...]
    n_shallow: int
    n_middle: int
    n_deep: int

    def __post_init__(self):
        if self.n_shallow + self.n_middle + self.n_deep != len(self.schemes):
            raise InvalidScheduleError("block counts must sum to the layer count")

    @property
    def n_layers(self) -> int:
        return len(self.schemes)


CANONICAL_ORDER = (Scheme.IN, Scheme.OR, Scheme.CR)

# The five non-canonical block orders exercised by the order ablation.
ORDER_PERMUTATIONS = (
    (Scheme.IN, Scheme.CR, Scheme.OR),
    (Scheme.OR, Scheme.IN, Scheme.CR),
    (Scheme.OR, Scheme.CR, Scheme.IN),
    (Scheme.CR, Scheme.IN, Scheme.OR),
    (Scheme.CR, Scheme.OR, Scheme.IN),
)


def build_schedule(
    total_layers: int,
    n_shallow: int,
    n_deep: int,
    order: tuple[Scheme, Scheme, Scheme] = CANONICAL_ORDER,
    deep_variant: Scheme = Scheme.CR,
) -> LayerSchedule:
    """Contiguous scheme blocks in the given order.

    Block sizes travel with their schemes: the IN block always has
    ``n_shallow`` layers and the CR block ``n_deep``, wherever the order
    places them; the OR block takes the remainder.  ``deep_variant``
    substitutes CR_PRE for CR when requested.
    """
    if total_layers < 1:
        raise InvalidScheduleError("need at least one layer")
    if n_shallow < 0 or n_deep < 0 or n_shallow + n_deep > total_layers:
        raise InvalidScheduleError(
            f"block counts ({n_shallow}, {n_deep}) exceed {total_layers} layers"
        )
    if sorted(s.value for s in order) != ["CR", "IN", "OR"]:
        raise InvalidScheduleError(f"order must be a permutation of IN/OR/CR, got {order}")
    if deep_variant not in (Scheme.CR, Scheme.CR_PRE):
        raise InvalidScheduleError(f"deep variant must be CR or CR_PRE, got {deep_variant}")
    n_middle = total_layers - n_shallow - n_deep
    sizes = {Scheme.IN: n_shallow, Scheme.OR: n_middle, Scheme.CR: n_deep}
    schemes: list[Scheme] = []
    for block in order:
        actual = deep_variant if block is Scheme.CR else block
        schemes.extend([actual] * sizes[block])
    return LayerSchedule(
        schemes=tuple(schemes), n_shallow=n_shallow, n_middle=n_middle, n_deep=n_deep
    )


def all_or_schedule(total_layers: int) -> LayerSchedule:
    """The unmodified-causal baseline: every layer uses plain attention."""
    return build_schedule(total_layers, 0, 0)
