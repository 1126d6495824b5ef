"""Prompt construction and item-span bookkeeping.

Turns an item history into a flat token sequence while remembering, for every
position, whether it belongs to an item title, which history slot it came
from, and whether it closes that title.  Every attention-mask formula in
:mod:`maskrec.masks` consumes exactly these three annotations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np


class CatalogMissError(KeyError):
    """An item id that is not present in the catalog."""


class InvalidPromptError(ValueError):
    """A prompt request that violates a precondition (e.g. empty history)."""


# Words used to surround and delimit item titles in a prompt.  They are part
# of the vocabulary but never carry item annotations.
TEMPLATE_PREFIX_WORDS = ("given", "the", "watched", "items", ":")
TEMPLATE_DELIMITER_WORDS = (",",)
TEMPLATE_READOUT_WORDS = ("next",)
TEMPLATE_WORDS = TEMPLATE_PREFIX_WORDS + TEMPLATE_DELIMITER_WORDS + TEMPLATE_READOUT_WORDS


@dataclass(frozen=True)
class ItemCatalog:
    """Dense item-id -> title (list of token ids) mapping."""

    titles: tuple[tuple[int, ...], ...]
    vocab_size: int

    def __post_init__(self):
        for item_id, title in enumerate(self.titles):
            if len(title) < 1:
                raise ValueError(f"item {item_id}: empty title")
            if any(t < 0 or t >= self.vocab_size for t in title):
                raise ValueError(f"item {item_id}: token id out of range")

    @property
    def n_items(self) -> int:
        return len(self.titles)

    def title(self, item_id: int) -> tuple[int, ...]:
        if not 0 <= item_id < len(self.titles):
            raise CatalogMissError(item_id)
        return self.titles[item_id]


@dataclass(frozen=True)
class InteractionSequence:
    """One user's chronologically ordered interactions."""

    user_id: int
    events: tuple[tuple[int, int], ...]  # (item_id, timestamp seconds)

    def __post_init__(self):
        ts = [t for _, t in self.events]
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise ValueError(f"user {self.user_id}: events not sorted by timestamp")


@dataclass(frozen=True)
class PromptTemplate:
    """Token ids for the prompt surround.

    ``readout`` is the single trailing token whose position the model reads
    the next-item embedding from; it is never an item token.
    """

    prefix: tuple[int, ...]
    delimiter: tuple[int, ...]
    readout: int


@dataclass(frozen=True)
class TokenizedPrompt:
    """A token sequence plus per-position item annotations.

    ``item_index[j]`` is the 0-based history slot the token belongs to (None
    for template/delimiter/readout tokens), ``is_item[j]`` the item-token
    indicator, ``is_last[j]`` whether position j closes its title span.
    """

    tokens: tuple[int, ...]
    item_index: tuple[Optional[int], ...]
    is_item: tuple[bool, ...]
    is_last: tuple[bool, ...]
    readout_position: int

    def __post_init__(self):
        n = len(self.tokens)
        if not (len(self.item_index) == len(self.is_item) == len(self.is_last) == n):
            raise InvalidPromptError("annotation arrays must align with tokens")
        if self.readout_position != n - 1 or self.is_item[self.readout_position]:
            raise InvalidPromptError("readout must be the final, non-item position")
        for j in range(n):
            if self.is_last[j] and not self.is_item[j]:
                raise InvalidPromptError(f"position {j}: is_last on a non-item token")
            if self.is_item[j] != (self.item_index[j] is not None):
                raise InvalidPromptError(f"position {j}: item flag/slot mismatch")

    @property
    def n(self) -> int:
        return len(self.tokens)

    def item_flags(self) -> np.ndarray:
        return np.asarray(self.is_item, dtype=bool)

    def last_flags(self) -> np.ndarray:
        return np.asarray(self.is_last, dtype=bool)

    def slot_ids(self) -> np.ndarray:
        """Slot index per position, -1 where the position is not an item token."""
        return np.asarray([-1 if s is None else s for s in self.item_index], dtype=np.int64)


def tokenize_prompt(history: list[int], catalog: ItemCatalog, template: PromptTemplate) -> TokenizedPrompt:
    """Lay out ``prefix, title_0, delim, title_1, ..., title_k, readout``."""
    if len(history) == 0:
        raise InvalidPromptError("empty history")
    tokens: list[int] = list(template.prefix)
    slots: list[Optional[int]] = [None] * len(template.prefix)
    is_item: list[bool] = [False] * len(template.prefix)
    is_last: list[bool] = [False] * len(template.prefix)
    for slot, item_id in enumerate(history):
        title = catalog.title(item_id)
        if slot > 0:
            tokens.extend(template.delimiter)
            slots.extend([None] * len(template.delimiter))
            is_item.extend([False] * len(template.delimiter))
            is_last.extend([False] * len(template.delimiter))
        tokens.extend(title)
        slots.extend([slot] * len(title))
        is_item.extend([True] * len(title))
        is_last.extend([False] * (len(title) - 1) + [True])
    tokens.append(template.readout)
    slots.append(None)
    is_item.append(False)
    is_last.append(False)
    return TokenizedPrompt(
        tokens=tuple(tokens),
        item_index=tuple(slots),
        is_item=tuple(is_item),
        is_last=tuple(is_last),
        readout_position=len(tokens) - 1,
    )


def _check_index(prompt: TokenizedPrompt, j: int) -> None:
    if not 0 <= j < prompt.n:
        raise IndexError(f"position {j} out of range for prompt of length {prompt.n}")


def is_item_token(prompt: TokenizedPrompt, j: int) -> bool:
    _check_index(prompt, j)
    return prompt.is_item[j]


def is_last_token(prompt: TokenizedPrompt, j: int) -> bool:
    _check_index(prompt, j)
    return prompt.is_last[j]


def same_item(prompt: TokenizedPrompt, j: int, k: int) -> bool:
    """True iff positions j and k are item tokens of the same history slot."""
    _check_index(prompt, j)
    _check_index(prompt, k)
    if not (prompt.is_item[j] and prompt.is_item[k]):
        return False
    return prompt.item_index[j] == prompt.item_index[k]


def build_vocab(title_texts: list[str]) -> dict[str, int]:
    """Deterministic dataset-local vocabulary over whitespace tokens.

    Template words come first so prompts can always be rendered; title words
    follow in sorted order.
    """
    words = list(TEMPLATE_WORDS)
    seen = set(words)
    title_words = sorted({w for text in title_texts for w in text.split()})
    for w in title_words:
        if w not in seen:
            words.append(w)
            seen.add(w)
    return {w: i for i, w in enumerate(words)}


def build_catalog(title_texts: list[str], vocab: Optional[dict[str, int]] = None) -> tuple[ItemCatalog, dict[str, int]]:
    """Tokenize titles by whitespace into a dataset-local vocabulary."""
    if vocab is None:
        vocab = build_vocab(title_texts)
    titles = []
    for text in title_texts:
        words = text.split()
        if not words:
            raise ValueError("empty title text")
        titles.append(tuple(vocab[w] for w in words))
    return ItemCatalog(titles=tuple(titles), vocab_size=len(vocab)), vocab


def default_template(vocab: dict[str, int]) -> PromptTemplate:
    return PromptTemplate(
        prefix=tuple(vocab[w] for w in TEMPLATE_PREFIX_WORDS),
        delimiter=tuple(vocab[w] for w in TEMPLATE_DELIMITER_WORDS),
        readout=vocab[TEMPLATE_READOUT_WORDS[0]],
    )


def load_catalog_csv(path: str) -> list[str]:
    """Read ``item_id,title`` rows; item ids must be dense 0..n-1."""
    rows: list[tuple[int, str]] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["item_id", "title"]:
            raise ValueError(f"{path}: expected header item_id,title")
        for lineno, row in enumerate(reader, start=2):
            if len(row) < 2:
                raise ValueError(f"{path}: line {lineno}: expected 2 columns")
            try:
                rows.append((int(row[0]), row[1]))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    rows.sort(key=lambda r: r[0])
    if [i for i, _ in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: item ids must be dense 0..{len(rows) - 1}")
    return [t for _, t in rows]


def save_catalog_csv(path: str, title_texts: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["item_id", "title"])
        for item_id, text in enumerate(title_texts):
            writer.writerow([item_id, text])
