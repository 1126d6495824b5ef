import numpy as np
import pytest

from maskrec import segmentation as seg


def make_catalog(title_lengths, vocab_size=64):
    """Catalog whose item i has title_lengths[i] distinct token ids."""
    titles = []
    t = len(seg.TEMPLATE_WORDS)
    for length in title_lengths:
        titles.append(tuple(range(t, t + length)))
        t += length
    return seg.ItemCatalog(titles=tuple(titles), vocab_size=max(vocab_size, t))


def simple_template(prefix_len=1, delim_len=0, vocab_size=64):
    """Template with controllable surround sizes for hand enumeration."""
    return seg.PromptTemplate(
        prefix=tuple(range(prefix_len)),
        delimiter=tuple(range(prefix_len, prefix_len + delim_len)),
        readout=vocab_size - 1,
    )


def random_prompt(rng, max_items=10, max_title=8, max_len=64):
    """Seeded random prompt; retries until it fits within max_len."""
    while True:
        n_items = int(rng.integers(1, max_items + 1))
        lengths = [int(rng.integers(1, max_title + 1)) for _ in range(n_items)]
        prefix_len = int(rng.integers(0, 3))
        delim_len = int(rng.integers(0, 2))
        total = prefix_len + sum(lengths) + delim_len * (n_items - 1) + 1
        if total > max_len:
            continue
        catalog = make_catalog(lengths, vocab_size=max(64, total + 16))
        template = seg.PromptTemplate(
            prefix=tuple(range(prefix_len)),
            delimiter=tuple(range(prefix_len, prefix_len + delim_len)),
            readout=0,
        )
        history = list(range(n_items))
        return seg.tokenize_prompt(history, catalog, template)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
