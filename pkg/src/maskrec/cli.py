"""Command-line entry point.

Subcommands: preprocess, synth, train, evaluate, analyze
{attn-stats|distances|cooccurrence|heatmap|dump-mask}, ablate, gradcheck.
Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, data as data_mod
from .analysis import (
    distance_stats,
    export_heatmap,
    stats_for_model,
)
from .data import (
    Dataset,
    SyntheticSpec,
    cooccurrence_stats,
    generate_synthetic,
    load_dataset,
    load_interactions,
    markov_transition,
    preprocess,
    save_dataset,
    save_interactions_csv,
    summary_stats,
    tokenize_windows,
)
from .evaluation import evaluate
from .masks import (
    ORDER_PERMUTATIONS,
    Scheme,
    all_or_schedule,
    build_schedule,
    causal_mask,
    compose,
    mask_for_scheme,
)
from .model import (
    ModelConfig,
    forward,
    grad_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .segmentation import tokenize_prompt
from .training import TrainConfig, history_csv_rows, train


class UsageError(Exception):
    pass


def _require_path(path: str, kind: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"{kind} not found: {path}")
    return path


def _dataset_hash(dataset_dir: str) -> str:
    h = hashlib.sha256()
    for name in ("catalog.csv", "windows.csv", "split.csv"):
        p = os.path.join(dataset_dir, name)
        if os.path.exists(p):
            with open(p, "rb") as f:
                h.update(f.read())
    return h.hexdigest()


def _prepare_run_dir(out_dir: str, force: bool) -> None:
    if os.path.exists(out_dir) and os.listdir(out_dir) and not force:
        raise UsageError(f"run directory {out_dir} is not empty (use --force to overwrite)")
    os.makedirs(out_dir, exist_ok=True)


def _parse_order(text: str) -> tuple[Scheme, Scheme, Scheme]:
    parts = tuple(Scheme(p) for p in text.upper().split("-"))
    if len(parts) != 3:
        raise UsageError(f"order must look like IN-OR-CR, got {text}")
    return parts  # validated further by build_schedule


def _model_config_from_args(args, dataset: Dataset) -> ModelConfig:
    catalog, vocab, _ = dataset.build_vocab_objects()
    overrides = {}
    if args.config:
        with open(_require_path(args.config, "config file"), encoding="utf-8") as f:
            overrides = json.load(f)
    d_model = args.d_model or overrides.get("d_model", 64)
    n_heads = args.n_heads or overrides.get("n_heads", 4)
    n_layers = args.n_layers or overrides.get("n_layers", 6)
    ffn_dim = args.ffn_dim or overrides.get("ffn_dim", 2 * d_model)
    max_len = overrides.get("max_seq_len", args.max_seq_len)
    if args.schedule == "all-or":
        schedule = all_or_schedule(n_layers)
    else:
        order = _parse_order(args.order)
        deep_variant = Scheme(args.deep_variant.upper())
        schedule = build_schedule(n_layers, args.n_shallow, args.n_deep, order, deep_variant)
    return ModelConfig(
        d_model=d_model,
        n_heads=n_heads,
        n_layers=n_layers,
        ffn_dim=ffn_dim,
        max_seq_len=max_len,
        vocab_size=len(vocab),
        n_items=catalog.n_items,
        schedule=schedule,
        seed=args.seed,
    )


def _train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_steps=args.max_steps,
        eval_every=args.eval_every,
        patience=args.patience,
        seed=args.seed,
    )


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_synth(args) -> int:
    transition = markov_transition(args.n_items, branching=args.branching, seed=args.seed)
    spec = SyntheticSpec(
        n_items=args.n_items,
        n_users=args.n_users,
        seq_len=args.seq_len,
        transition=transition,
        title_noise=not args.plain_titles,
        seed=args.seed,
    )
    sequences, titles = generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    save_interactions_csv(os.path.join(args.out, "interactions.csv"), sequences)
    data_mod.save_catalog_csv(os.path.join(args.out, "catalog.csv"), titles)
    stats = summary_stats(sequences)
    print(f"users={stats['users']} items={stats['items']} interactions={stats['interactions']}")
    return 0


def cmd_preprocess(args) -> int:
    interactions_path = _require_path(args.interactions, "interactions file")
    catalog_path = _require_path(args.catalog, "catalog file")
    sequences = load_interactions(interactions_path)
    titles = data_mod.load_catalog_csv(catalog_path)
    dataset = preprocess(sequences, titles)
    save_dataset(dataset, args.out)
    filtered = data_mod.five_core_filter(sequences)
    stats = summary_stats(filtered)
    counts = {s: len(dataset.indices(s)) for s in ("train", "valid", "test")}
    print(
        f"users={stats['users']} items={stats['items']} "
        f"interactions={stats['interactions']} density={stats['density']:.4%}"
    )
    print(f"windows: train={counts['train']} valid={counts['valid']} test={counts['test']}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(_require_path(args.dataset, "dataset directory"))
    _prepare_run_dir(args.out, args.force)
    model_cfg = _model_config_from_args(args, dataset)
    train_cfg = _train_config_from_args(args)
    params = init_params(model_cfg)
    best_params, history = train(params, model_cfg, dataset, train_cfg)
    save_checkpoint(os.path.join(args.out, "best.ckpt.npz"), best_params, model_cfg)
    save_checkpoint(os.path.join(args.out, "final.ckpt.npz"), params, model_cfg)
    with open(os.path.join(args.out, "history.csv"), "w", newline="", encoding="utf-8") as f:
        csv.writer(f).writerows(history_csv_rows(history))
    _write_json(
        os.path.join(args.out, "config.json"),
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
    )
    _write_json(
        os.path.join(args.out, "manifest.json"),
        {
            "seed": args.seed,
            "data_hash": _dataset_hash(args.dataset),
            "code_version": __version__,
            "best_step": history.best_step,
            "stop_reason": history.stop_reason,
        },
    )
    last = history.records[-1] if history.records else None
    if last:
        print(f"stopped: {history.stop_reason} at step {last.step}; best step {history.best_step}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = load_dataset(_require_path(args.dataset, "dataset directory"))
    params, config = load_checkpoint(_require_path(args.checkpoint, "checkpoint"))
    ks = tuple(int(k) for k in args.ks.split(","))
    report, ranks = evaluate(params, config, dataset, split=args.split, ks=ks)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "metrics.json"), report.to_dict())
    with open(os.path.join(args.out, "ranks.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["example", "rank"])
        for i, r in enumerate(ranks):
            writer.writerow([i, int(r)])
    for e in report.entries:
        print(f"H@{e['k']}={e['hr']:.4f} N@{e['k']}={e['ndcg']:.4f}")
    return 0


def cmd_analyze(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.analysis == "dump-mask":
        dataset = load_dataset(_require_path(args.dataset, "dataset directory"))
        catalog, _, template = dataset.build_vocab_objects()
        idx = dataset.indices(args.split)[args.example]
        prompt = tokenize_prompt(list(dataset.windows[idx].history), catalog, template)
        scheme = Scheme(args.scheme.upper())
        mask = mask_for_scheme(scheme, prompt)
        if args.with_causal:
            mask = compose(causal_mask(prompt.n), mask)
        path = os.path.join(args.out, f"mask_{scheme.value}.csv")
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            for row in mask.allowed:
                writer.writerow([int(x) for x in row])
        print(path)
        return 0

    if args.analysis == "cooccurrence":
        dataset = load_dataset(_require_path(args.dataset, "dataset directory"))
        stats = cooccurrence_stats(dataset)
        _write_json(os.path.join(args.out, "cooccurrence.json"), stats)
        print(json.dumps(stats))
        return 0

    if args.analysis == "distances":
        dataset = load_dataset(_require_path(args.dataset, "dataset directory"))
        indices = dataset.indices(args.split)[: args.max_examples]
        prompts, _ = tokenize_windows(dataset, indices)
        stats = distance_stats(prompts).to_dict()
        _write_json(os.path.join(args.out, "distances.json"), stats)
        print(json.dumps(stats))
        return 0

    dataset = load_dataset(_require_path(args.dataset, "dataset directory"))
    params, config = load_checkpoint(_require_path(args.checkpoint, "checkpoint"))
    if args.analysis == "attn-stats":
        layers = None
        if args.layers:
            layers = [int(x) for x in args.layers.split(",")]
        stats = stats_for_model(
            params, config, dataset, split=args.split, max_examples=args.max_examples, layers=layers
        ).to_dict()
        _write_json(os.path.join(args.out, "attn_stats.json"), stats)
        print(json.dumps(stats))
        return 0
    if args.analysis == "heatmap":
        catalog, _, template = dataset.build_vocab_objects()
        idx = dataset.indices(args.split)[args.example]
        prompt = tokenize_prompt(list(dataset.windows[idx].history), catalog, template)
        trace = forward(prompt, params, config, retain_attention=True)
        path = os.path.join(args.out, f"heatmap_l{args.layer}_h{args.head}.csv")
        export_heatmap(trace, args.layer, args.head, path)
        print(path)
        return 0
    raise UsageError(f"unknown analysis {args.analysis}")


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    titles = [" ".join(f"w{rng.integers(0, 30)}" for _ in range(rng.integers(1, 4))) for _ in range(8)]
    catalog, vocab = data_mod.build_catalog(titles)
    template = data_mod.default_template(vocab)
    histories = [list(rng.integers(0, len(titles), size=3)) for _ in range(2)]
    prompts = [tokenize_prompt(h, catalog, template) for h in histories]
    targets = rng.integers(0, len(titles), size=len(prompts))
    config = ModelConfig(
        d_model=8,
        n_heads=2,
        n_layers=3,
        ffn_dim=16,
        max_seq_len=32,
        vocab_size=len(vocab),
        n_items=catalog.n_items,
        schedule=build_schedule(3, 1, 1, deep_variant=Scheme(args.deep_variant.upper())),
        seed=args.seed,
    )
    params = init_params(config)
    err = grad_check(params, prompts, targets, config, n_coords=args.coords, seed=args.seed)
    print(f"max relative error: {err:.3e}")
    return 0 if err < 1e-4 else 1


ABLATION_ARMS = (
    "full",
    "wo_in",
    "wo_or",
    "wo_cr",
    "cr_pre",
    "in_cr_or",
    "or_in_cr",
    "or_cr_in",
    "cr_in_or",
    "cr_or_in",
    "all_or",
)

ORDER_BY_ARM = {
    "in_cr_or": ORDER_PERMUTATIONS[0],
    "or_in_cr": ORDER_PERMUTATIONS[1],
    "or_cr_in": ORDER_PERMUTATIONS[2],
    "cr_in_or": ORDER_PERMUTATIONS[3],
    "cr_or_in": ORDER_PERMUTATIONS[4],
}


def schedule_for_arm(arm: str, n_layers: int, n_shallow: int, n_deep: int):
    """Arm semantics: removed blocks are replaced by OR, keeping depth fixed."""
    if arm == "full":
        return build_schedule(n_layers, n_shallow, n_deep)
    if arm == "wo_in":
        return build_schedule(n_layers, 0, n_deep)
    if arm == "wo_or":
        # Plain attention removed: CR absorbs the middle block, IN keeps its count.
        return build_schedule(n_layers, n_shallow, n_layers - n_shallow)
    if arm == "wo_cr":
        return build_schedule(n_layers, n_shallow, 0)
    if arm == "cr_pre":
        return build_schedule(n_layers, n_shallow, n_deep, deep_variant=Scheme.CR_PRE)
    if arm == "all_or":
        return all_or_schedule(n_layers)
    if arm in ORDER_BY_ARM:
        return build_schedule(n_layers, n_shallow, n_deep, order=ORDER_BY_ARM[arm])
    raise UsageError(f"unknown ablation arm {arm}")


def cmd_ablate(args) -> int:
    dataset = load_dataset(_require_path(args.dataset, "dataset directory"))
    _prepare_run_dir(args.out, args.force)
    catalog, vocab, _ = dataset.build_vocab_objects()
    if args.suite == "orders":
        arms = ("full",) + tuple(ORDER_BY_ARM)
    else:
        arms = ABLATION_ARMS
    train_cfg = _train_config_from_args(args)
    rows = []
    for arm in arms:
        schedule = schedule_for_arm(arm, args.n_layers, args.n_shallow, args.n_deep)
        config = ModelConfig(
            d_model=args.d_model,
            n_heads=args.n_heads,
            n_layers=args.n_layers,
            ffn_dim=args.ffn_dim or 2 * args.d_model,
            max_seq_len=args.max_seq_len,
            vocab_size=len(vocab),
            n_items=catalog.n_items,
            schedule=schedule,
            seed=args.seed,
        )
        row = {"arm": arm, "schedule": "-".join(s.value for s in schedule.schemes)}
        try:
            params = init_params(config)
            best, history = train(params, config, dataset, train_cfg)
            valid, _ = evaluate(best, config, dataset, split="valid")
            test, _ = evaluate(best, config, dataset, split="test")
            row.update(
                status="ok",
                best_step=history.best_step,
                valid_hr10=valid.metric("hr", 10),
                valid_ndcg10=valid.metric("ndcg", 10),
                test_hr10=test.metric("hr", 10),
                test_ndcg10=test.metric("ndcg", 10),
            )
        except Exception as exc:  # record the failure, keep the suite going
            row.update(status=f"failed: {exc}")
        rows.append(row)
        print(f"{arm}: {row.get('status')}")
    fields = ["arm", "schedule", "status", "best_step", "valid_hr10", "valid_ndcg10", "test_hr10", "test_ndcg10"]
    with open(os.path.join(args.out, "ablation.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    _write_json(os.path.join(args.out, "ablation.json"), rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskrec")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic interaction corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-items", type=int, default=50)
    p.add_argument("--n-users", type=int, default=1000)
    p.add_argument("--seq-len", type=int, default=15)
    p.add_argument("--branching", type=int, default=3)
    p.add_argument("--plain-titles", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="5-core filter, windows, chronological split")
    p.add_argument("--interactions", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    def add_train_flags(p):
        p.add_argument("--config", default=None, help="JSON config; flags win over it")
        p.add_argument("--d-model", type=int, default=None)
        p.add_argument("--n-heads", type=int, default=None)
        p.add_argument("--n-layers", type=int, default=None)
        p.add_argument("--ffn-dim", type=int, default=None)
        p.add_argument("--max-seq-len", type=int, default=128)
        p.add_argument("--schedule", choices=["canonical", "all-or"], default="canonical")
        p.add_argument("--order", default="IN-OR-CR")
        p.add_argument("--deep-variant", default="CR", choices=["CR", "CR_PRE", "cr", "cr_pre"])
        p.add_argument("--n-shallow", type=int, default=2)
        p.add_argument("--n-deep", type=int, default=1)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--max-steps", type=int, default=1600)
        p.add_argument("--eval-every", type=int, default=100)
        p.add_argument("--patience", type=int, default=2)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on a preprocessed dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank targets against the full catalog")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ks", default="5,10")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="attention and data diagnostics")
    p.add_argument("analysis", choices=["attn-stats", "distances", "cooccurrence", "heatmap", "dump-mask"])
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="valid")
    p.add_argument("--max-examples", type=int, default=100)
    p.add_argument("--layers", default=None)
    p.add_argument("--example", type=int, default=0)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--scheme", default="CR")
    p.add_argument("--with-causal", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="run the schedule ablation suite")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--suite", choices=["full", "orders"], default="full")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-layers", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=None)
    p.add_argument("--max-seq-len", type=int, default=128)
    p.add_argument("--n-shallow", type=int, default=1)
    p.add_argument("--n-deep", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--deep-variant", default="CR", choices=["CR", "CR_PRE", "cr", "cr_pre"])
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
