"""End-to-end acceptance gates.

Each test covers one numbered criterion and prints a single pass/fail line.
The slow criteria (9 and 10) share one synthetic dataset and one set of five
trained baseline runs through module-scoped fixtures.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from maskrec import autodiff as ad, data as dm, model as mdl
from maskrec.analysis import stats_for_model
from maskrec.cli import main as cli_main
from maskrec.evaluation import evaluate, hr_at_k, ndcg_at_k, rank_of_target
from maskrec.masks import (
    Scheme,
    all_or_schedule,
    build_schedule,
    causal_mask,
    compose,
    cross_item_mask,
    cross_item_pre_mask,
    intra_item_mask,
    mask_for_scheme,
)
from maskrec.model import ModelConfig
from maskrec.training import TrainConfig, train

from conftest import random_prompt


@contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"\n[criterion {number:02d}] {name}: FAIL")
        raise
    print(f"\n[criterion {number:02d}] {name}: PASS")


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def prompt_corpus():
    rng = np.random.default_rng(11)
    return [random_prompt(rng, max_items=10, max_title=8, max_len=64) for _ in range(1000)]


@pytest.fixture(scope="module")
def synth_dataset():
    transition = dm.markov_transition(50, branching=3, seed=7)
    spec = dm.SyntheticSpec(
        n_items=50, n_users=1000, seq_len=15, transition=transition, seed=7
    )
    sequences, titles = dm.generate_synthetic(spec)
    return dm.preprocess(sequences, titles)


def experiment_config(dataset, schedule, seed):
    _, vocab, _ = dataset.build_vocab_objects()
    return ModelConfig(
        d_model=32,
        n_heads=4,
        n_layers=4,
        ffn_dim=64,
        max_seq_len=96,
        vocab_size=len(vocab),
        n_items=len(dataset.title_texts),
        schedule=schedule,
        seed=seed,
    )


def run_experiment(dataset, schedule, seed):
    config = experiment_config(dataset, schedule, seed)
    train_cfg = TrainConfig(
        learning_rate=1e-3, batch_size=32, max_steps=600, eval_every=100,
        patience=2, seed=seed,
    )
    params = mdl.init_params(config)
    best, history = train(params, config, dataset, train_cfg)
    return best, config, history


SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def baseline_runs(synth_dataset):
    """Five plain-causal training runs, shared by the slow criteria."""
    start = time.monotonic()
    runs = [run_experiment(synth_dataset, all_or_schedule(4), seed) for seed in SEEDS]
    return runs, time.monotonic() - start


# ----------------------------------------------- per-entry mask predicates

def oracle_entry(scheme, prompt, j, k):
    f = prompt.is_item
    last = prompt.is_last
    slot = prompt.item_index
    both = f[j] and f[k]
    same = both and slot[j] == slot[k]
    if scheme is Scheme.IN:
        return not (both and not same)
    if scheme is Scheme.CR_PRE:
        return not (j != k and both and same)
    if scheme is Scheme.CR:
        return not (j != k and both and (not last[j] or not last[k]))
    return True


def test_criterion_01_mask_oracle_equivalence(prompt_corpus):
    with criterion(1, "mask oracle equivalence"):
        start = time.monotonic()
        builders = {
            Scheme.IN: intra_item_mask,
            Scheme.CR_PRE: cross_item_pre_mask,
            Scheme.CR: cross_item_mask,
        }
        mismatches = 0
        for p in prompt_corpus:
            for scheme, build in builders.items():
                allowed = build(p).allowed
                for j in range(p.n):
                    for k in range(p.n):
                        if allowed[j, k] != oracle_entry(scheme, p, j, k):
                            mismatches += 1
        elapsed = time.monotonic() - start
        assert mismatches == 0
        assert elapsed < 10.0, f"took {elapsed:.1f}s"


def test_criterion_02_row_viability(prompt_corpus):
    with criterion(2, "row viability under causal composition"):
        violations = 0
        for p in prompt_corpus:
            causal = causal_mask(p.n)
            for scheme in Scheme:
                composed = compose(causal, mask_for_scheme(scheme, p))
                violations += int(np.sum(~np.diag(composed.allowed)))
        assert violations == 0


def test_criterion_03_restrictive_contains_naive_blocking(prompt_corpus):
    with criterion(3, "naive-variant blocked pairs stay blocked"):
        violations = 0
        for p in prompt_corpus:
            pre = cross_item_pre_mask(p).allowed
            cr = cross_item_mask(p).allowed
            violations += int(np.sum(~pre & cr))
        assert violations == 0


def test_criterion_04_masked_softmax_rows_sum_to_one(prompt_corpus):
    with criterion(4, "masked softmax row normalization"):
        rng = np.random.default_rng(4)
        worst = 0.0
        for p in prompt_corpus[:125]:  # 125 prompts x 4 schemes = 500 matrices
            causal = causal_mask(p.n)
            scores = rng.normal(size=(p.n, p.n)) * 10
            for scheme in Scheme:
                allowed = compose(causal, mask_for_scheme(scheme, p)).allowed
                out = ad.masked_softmax(ad.Tensor(scores), allowed)
                worst = max(worst, float(np.abs(out.data.sum(axis=-1) - 1.0).max()))
                assert np.all(out.data[~allowed] == 0.0)
        assert worst < 1e-12


def test_criterion_05_gradient_check():
    with criterion(5, "analytic gradients vs finite differences"):
        start = time.monotonic()
        rng = np.random.default_rng(5)
        for variant in (Scheme.CR, Scheme.CR_PRE):
            schedule = build_schedule(3, 1, 1, deep_variant=variant)
            config = ModelConfig(
                d_model=8, n_heads=2, n_layers=3, ffn_dim=16, max_seq_len=16,
                vocab_size=64, n_items=6, schedule=schedule, seed=0,
            )
            params = mdl.init_params(config)
            prompts = [random_prompt(rng, max_items=3, max_title=3, max_len=16) for _ in range(2)]
            targets = rng.integers(0, config.n_items, size=len(prompts))
            err = mdl.grad_check(params, prompts, targets, config, eps=1e-5, n_coords=200, seed=0)
            assert err < 1e-4, f"{variant}: {err:.3e}"
        assert time.monotonic() - start < 120.0


def test_criterion_06_permissive_schedule_matches_causal_reference():
    with criterion(6, "all-permissive schedule bit-identical to causal path"):
        rng = np.random.default_rng(6)
        config = ModelConfig(
            d_model=8, n_heads=2, n_layers=3, ffn_dim=16, max_seq_len=64,
            vocab_size=64, n_items=6, schedule=all_or_schedule(3), seed=0,
        )
        params = mdl.init_params(config)
        for _ in range(50):
            p = random_prompt(rng, max_items=6, max_title=5, max_len=48)
            scores, _, _ = mdl.forward_batch([p], params, config)
            ref = mdl.forward_batch_causal_reference([p], params, config)
            assert np.array_equal(scores.data, ref.data)


def test_criterion_07_metric_oracle():
    with criterion(7, "ranking metrics vs brute-force oracle"):
        assert ndcg_at_k([1], 10) == 1.0
        assert ndcg_at_k([3], 10) == 0.5
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(5, 60))
            scores = rng.choice([0.0, 0.25, 1.0, 3.0], size=n)
            target = int(rng.integers(0, n))
            order = sorted(range(n), key=lambda i: (-scores[i], i))
            rank = order.index(target) + 1
            assert rank_of_target(scores, target) == rank
            for k in (5, 10):
                assert abs(hr_at_k([rank], k) - float(rank <= k)) < 1e-12
                expected = 1.0 / np.log2(rank + 1) if rank <= k else 0.0
                assert abs(ndcg_at_k([rank], k) - expected) < 1e-12


def test_criterion_08_preprocessing_arithmetic():
    with criterion(8, "preprocessing arithmetic"):
        events15 = tuple((i, i) for i in range(15))
        seq = dm.InteractionSequence(user_id=0, events=events15)
        assert len(dm.sliding_windows(seq)) == 5

        windows = [dm.Window(history=tuple(range(10)), target=0, timestamp=t) for t in range(100)]
        ds = dm.chronological_split(windows, ["t"])
        assert [len(ds.indices(s)) for s in ("train", "valid", "test")] == [80, 10, 10]

        cascade = [
            dm.InteractionSequence(user_id=u, events=tuple((i, k) for k, i in enumerate(items)))
            for u, items in enumerate([
                [1, 2, 3, 7, 1], [1, 2, 3, 1, 2], [1, 2, 3, 2, 3],
                [1, 2, 3, 3, 1], [7, 7, 7], [7, 1, 2, 3, 2],
            ])
        ]
        out = dm.five_core_filter(cascade)
        survivors = {s.user_id for s in out}
        assert 4 not in survivors  # too few interactions
        items_left = {i for s in out for i, _ in s.events}
        assert 7 not in items_left  # starved by the cascade
        again = dm.five_core_filter(out)
        assert [(s.user_id, s.events) for s in again] == [(s.user_id, s.events) for s in out]


def test_criterion_09_attention_skew_direction(synth_dataset, baseline_runs):
    with criterion(9, "trained baseline attends intra-item more than cross-item"):
        runs, fixture_time = baseline_runs
        start = time.monotonic()
        wins = 0
        for params, config, _ in runs:
            stats = stats_for_model(params, config, synth_dataset, split="valid", max_examples=100)
            if stats.intra_mean_per_pair > stats.cross_mean_per_pair:
                wins += 1
        elapsed = fixture_time + (time.monotonic() - start)
        assert wins >= 4, f"skew direction held in only {wins}/5 seeds"
        assert elapsed < 15 * 60, f"took {elapsed:.0f}s"


def test_criterion_10_planted_signal_advantage(synth_dataset, baseline_runs, tmp_path):
    with criterion(10, "layer schedule beats plain baseline on planted signal"):
        runs, fixture_time = baseline_runs
        start = time.monotonic()
        schedule = build_schedule(4, 1, 1)
        scheduled_hr, baseline_hr = [], []
        for seed, (base_params, base_config, _) in zip(SEEDS, runs):
            best, config, _ = run_experiment(synth_dataset, schedule, seed)
            report, _ = evaluate(best, config, synth_dataset, split="valid")
            scheduled_hr.append(report.metric("hr", 10))
            report, _ = evaluate(base_params, base_config, synth_dataset, split="valid")
            baseline_hr.append(report.metric("hr", 10))

        # small-budget run of the full comparison table
        ds_dir = tmp_path / "ds"
        abl_dir = tmp_path / "ablation"
        dm.save_dataset(synth_dataset, str(ds_dir))
        code = cli_main([
            "ablate", "--dataset", str(ds_dir), "--out", str(abl_dir),
            "--d-model", "32", "--n-heads", "4", "--n-layers", "4",
            "--ffn-dim", "64", "--max-seq-len", "96",
            "--n-shallow", "1", "--n-deep", "1",
            "--max-steps", "100", "--eval-every", "100", "--patience", "5",
        ])
        assert code == 0
        rows = json.loads((abl_dir / "ablation.json").read_text())
        arms = {r["arm"] for r in rows}
        assert arms == {
            "full", "wo_in", "wo_or", "wo_cr", "cr_pre",
            "in_cr_or", "or_in_cr", "or_cr_in", "cr_in_or", "cr_or_in", "all_or",
        }
        assert all(r["status"] == "ok" for r in rows)

        elapsed = fixture_time + (time.monotonic() - start)
        assert np.mean(scheduled_hr) >= np.mean(baseline_hr), (
            f"scheduled {scheduled_hr} vs baseline {baseline_hr}"
        )
        assert elapsed < 30 * 60, f"took {elapsed:.0f}s"


def test_criterion_11_run_determinism(tmp_path):
    with criterion(11, "train and evaluate are byte-deterministic"):
        raw = tmp_path / "raw"
        ds = tmp_path / "ds"
        assert cli_main([
            "synth", "--out", str(raw),
            "--n-items", "8", "--n-users", "25", "--seq-len", "13", "--seed", "3",
        ]) == 0
        assert cli_main([
            "preprocess", "--interactions", str(raw / "interactions.csv"),
            "--catalog", str(raw / "catalog.csv"), "--out", str(ds),
        ]) == 0
        artifacts = []
        for tag in ("a", "b"):
            run = tmp_path / f"run_{tag}"
            out = tmp_path / f"eval_{tag}"
            assert cli_main([
                "train", "--dataset", str(ds), "--out", str(run),
                "--d-model", "8", "--n-heads", "2", "--n-layers", "3",
                "--ffn-dim", "16", "--max-seq-len", "96",
                "--n-shallow", "1", "--n-deep", "1",
                "--batch-size", "8", "--max-steps", "30", "--eval-every", "10",
                "--patience", "5", "--seed", "0",
            ]) == 0
            assert cli_main([
                "evaluate", "--dataset", str(ds),
                "--checkpoint", str(run / "best.ckpt.npz"), "--out", str(out),
            ]) == 0
            artifacts.append(
                ((run / "history.csv").read_bytes(), (out / "metrics.json").read_bytes())
            )
        assert artifacts[0][0] == artifacts[1][0]
        assert artifacts[0][1] == artifacts[1][1]
