import numpy as np
import pytest

from maskrec import masks, segmentation as seg
from maskrec.masks import Scheme

from conftest import make_catalog, random_prompt, simple_template


def five_token_prompt():
    """[p0, a0, a1, b0, b1] plus a trailing readout position."""
    catalog = make_catalog([2, 2])
    return seg.tokenize_prompt([0, 1], catalog, simple_template(prefix_len=1))


# independent per-entry predicate oracles, written against the annotation API

def oracle_intra(p):
    n = p.n
    allowed = np.ones((n, n), dtype=bool)
    for j in range(n):
        for k in range(n):
            if seg.is_item_token(p, j) and seg.is_item_token(p, k) and not seg.same_item(p, j, k):
                allowed[j, k] = False
    return allowed


def oracle_cross_pre(p):
    n = p.n
    allowed = np.ones((n, n), dtype=bool)
    for j in range(n):
        for k in range(n):
            if j != k and seg.is_item_token(p, j) and seg.is_item_token(p, k) and seg.same_item(p, j, k):
                allowed[j, k] = False
    return allowed


def oracle_cross(p):
    n = p.n
    allowed = np.ones((n, n), dtype=bool)
    for j in range(n):
        for k in range(n):
            if (
                j != k
                and seg.is_item_token(p, j)
                and seg.is_item_token(p, k)
                and (not seg.is_last_token(p, j) or not seg.is_last_token(p, k))
            ):
                allowed[j, k] = False
    return allowed


def test_causal_basics():
    assert masks.causal_mask(1).allowed.tolist() == [[True]]
    m = masks.causal_mask(3)
    assert m.allowed[2, 1] and not m.allowed[1, 2]
    assert m.allowed.sum() == 6  # lower triangle incl. diagonal
    with pytest.raises(ValueError):
        masks.causal_mask(0)


def test_intra_item_blocked_pairs():
    p = five_token_prompt()
    m = masks.intra_item_mask(p)
    blocked = {(3, 1), (3, 2), (4, 1), (4, 2), (1, 3), (2, 3), (1, 4), (2, 4)}
    for j in range(p.n):
        for k in range(p.n):
            assert m.allowed[j, k] == ((j, k) not in blocked)


def test_intra_item_degenerate_cases():
    single = seg.tokenize_prompt([0], make_catalog([3]), simple_template(prefix_len=1))
    assert masks.intra_item_mask(single).allowed.all()


def test_cross_pre_blocked_pairs():
    p = five_token_prompt()
    m = masks.cross_item_pre_mask(p)
    blocked = {(1, 2), (2, 1), (3, 4), (4, 3)}
    for j in range(p.n):
        for k in range(p.n):
            assert m.allowed[j, k] == ((j, k) not in blocked)
    assert np.diag(m.allowed).all()


def test_cross_pre_unit_titles():
    p = seg.tokenize_prompt([0, 1, 2], make_catalog([1, 1, 1]), simple_template(prefix_len=1))
    assert masks.cross_item_pre_mask(p).allowed.all()


def test_cross_item_blocked_pairs():
    p = five_token_prompt()
    m = masks.cross_item_mask(p)
    # last tokens are positions 2 and 4; only (2,4)/(4,2) survive off-diagonal
    # among item tokens
    item_pos = [1, 2, 3, 4]
    for j in item_pos:
        for k in item_pos:
            if j == k:
                assert m.allowed[j, k]
            else:
                assert m.allowed[j, k] == ({j, k} == {2, 4})
    assert m.allowed[0].all() and m.allowed[:, 0].all()
    assert m.allowed[5].all() and m.allowed[:, 5].all()


def test_cross_item_unit_titles_unblocked():
    p = seg.tokenize_prompt([0, 1, 2], make_catalog([1, 1, 1]), simple_template(prefix_len=1))
    assert masks.cross_item_mask(p).allowed.all()


def test_cross_item_single_multitoken_item():
    p = seg.tokenize_prompt([0], make_catalog([4]), simple_template(prefix_len=1))
    m = masks.cross_item_mask(p)
    item_pos = [j for j in range(p.n) if p.is_item[j]]
    for j in item_pos:
        for k in item_pos:
            assert m.allowed[j, k] == (j == k)


def test_compose():
    causal = masks.causal_mask(6)
    p = five_token_prompt()
    assert np.array_equal(masks.compose(causal, masks.full_mask(6)).allowed, causal.allowed)
    cr = masks.cross_item_mask(p)
    assert np.array_equal(masks.compose(cr, cr).allowed, cr.allowed)
    combined = masks.compose(causal, cr)
    assert np.array_equal(combined.allowed, causal.allowed & oracle_cross(p))
    with pytest.raises(ValueError):
        masks.compose(causal, masks.full_mask(5))


def test_mask_for_scheme_dispatch():
    p = five_token_prompt()
    assert masks.mask_for_scheme(Scheme.OR, p).allowed.all()
    single = seg.tokenize_prompt([0], make_catalog([3]), simple_template())
    assert masks.mask_for_scheme(Scheme.IN, single).allowed.all()
    assert np.array_equal(masks.mask_for_scheme(Scheme.CR, p).allowed, oracle_cross(p))
    assert np.array_equal(masks.mask_for_scheme(Scheme.CR_PRE, p).allowed, oracle_cross_pre(p))


def test_build_schedule_blocks():
    s = masks.build_schedule(6, 2, 1)
    assert [x.value for x in s.schemes] == ["IN", "IN", "OR", "OR", "OR", "CR"]
    assert (s.n_shallow, s.n_middle, s.n_deep) == (2, 3, 1)

    baseline = masks.build_schedule(6, 0, 0)
    assert all(x is Scheme.OR for x in baseline.schemes)

    for order in masks.ORDER_PERMUTATIONS:
        s = masks.build_schedule(6, 2, 1, order=order)
        assert len(s.schemes) == 6
        counts = {sch: sum(1 for x in s.schemes if x is sch) for sch in Scheme}
        assert counts[Scheme.IN] == 2 and counts[Scheme.CR] == 1 and counts[Scheme.OR] == 3

    pre = masks.build_schedule(6, 2, 1, deep_variant=Scheme.CR_PRE)
    assert pre.schemes[-1] is Scheme.CR_PRE

    with pytest.raises(masks.InvalidScheduleError):
        masks.build_schedule(4, 3, 2)
    with pytest.raises(masks.InvalidScheduleError):
        masks.build_schedule(6, 1, 1, order=(Scheme.IN, Scheme.IN, Scheme.CR))


def test_builders_match_oracles_on_random_prompts(rng):
    for _ in range(100):
        p = random_prompt(rng)
        assert np.array_equal(masks.intra_item_mask(p).allowed, oracle_intra(p))
        assert np.array_equal(masks.cross_item_pre_mask(p).allowed, oracle_cross_pre(p))
        assert np.array_equal(masks.cross_item_mask(p).allowed, oracle_cross(p))


def test_row_viability_and_containment(rng):
    causal_cache = {}
    for _ in range(100):
        p = random_prompt(rng)
        causal = causal_cache.setdefault(p.n, masks.causal_mask(p.n))
        for scheme in Scheme:
            m = masks.compose(causal, masks.mask_for_scheme(scheme, p))
            assert np.diag(m.allowed).all()
        pre = masks.cross_item_pre_mask(p).allowed
        cr = masks.cross_item_mask(p).allowed
        assert not np.any(~pre & cr)  # every pair blocked by CR_PRE is blocked by CR


def test_non_item_rows_never_blocked(rng):
    for _ in range(50):
        p = random_prompt(rng)
        non_item = ~p.item_flags()
        for scheme in (Scheme.IN, Scheme.CR, Scheme.CR_PRE):
            m = masks.mask_for_scheme(scheme, p).allowed
            assert m[non_item].all()
            assert m[:, non_item].all()


def test_masks_ignore_token_values():
    catalog = make_catalog([2, 3])
    template = simple_template(prefix_len=1)
    p1 = seg.tokenize_prompt([0, 1], catalog, template)
    shifted = seg.ItemCatalog(
        titles=tuple(tuple(t + 1 for t in title) for title in catalog.titles),
        vocab_size=catalog.vocab_size + 1,
    )
    p2 = seg.tokenize_prompt([0, 1], shifted, template)
    for scheme in Scheme:
        assert np.array_equal(
            masks.mask_for_scheme(scheme, p1).allowed,
            masks.mask_for_scheme(scheme, p2).allowed,
        )


def test_mask_immutability():
    m = masks.causal_mask(3)
    with pytest.raises(ValueError):
        m.allowed[0, 0] = False
