"""Command-line entry point.

Every subcommand prints a short human-readable summary, or one JSON document
with ``--json``.  Exit codes: 0 success, 1 a verification or assertion
failed, 2 bad usage, configuration or input file.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from . import __version__
from .accounting import Views, assert_zero_extra, count_flops, count_params
from .adaptation import AdapterSpec, TrainableMask, build_adapted_model
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import load_dataset_dir, save_dataset_dir, train_test_split
from .errors import (CheckpointError, ConfigError, NonMergeableError, ShapeError,
                     TrainingDivergedError, ZeroCostError)
from .reparam import merge_model, verify_equivalence
from .stdha import HeadOffsetPlan, stacked_receptive_field, temporal_receptive_field
from .training import STRATEGIES, compare_strategies, evaluate, format_table, train, warm_start
from .vit import PRESETS, ViTConfig, WeightStore, init_backbone

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(ZeroCostError):
    pass


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def _store_config(store: WeightStore) -> ViTConfig:
    if "model" not in store.meta:
        raise CheckpointError("checkpoint carries no model configuration")
    return ViTConfig.from_dict(json.loads(store.meta["model"]))


def _store_plan(store: WeightStore):
    plan = store.meta.get("plan")
    return None if plan in (None, "null") else HeadOffsetPlan.parse(plan)


def _with_plan(store: WeightStore, plan) -> None:
    if plan is None:
        store.meta.pop("plan", None)
    else:
        store.meta["plan"] = plan.to_json()


# ----------------------------------------------------------------------------
# subcommands


def cmd_init(args) -> int:
    run = load_config(args.config)
    cfg = run.model
    store = init_backbone(cfg, run.train.seed, run.dtype)
    store = warm_start(store, cfg, run.train.warm_start_steps, run.train.seed,
                       run.data.spec if run.data else None)
    store.meta["model"] = json.dumps(cfg.to_dict(), sort_keys=True)
    if run.adapter is not None:
        store, _ = build_adapted_model(store, cfg, run.adapter, run.train.seed)
    _with_plan(store, run.plan)
    save_checkpoint(store, args.out)
    cost = count_params(store)
    _emit(args, {"out": str(args.out), **cost.to_dict()},
          f"wrote {args.out}: {cost.params_backbone} backbone + "
          f"{cost.params_new_at_inference} adapter parameters, "
          f"{cost.params_trainable} trainable")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    run = load_config(args.config)
    data = run.data_config()
    train_set, test_set = train_test_split(data.spec, data.test_size, workers=args.workers)
    save_dataset_dir(train_set, test_set, args.out)
    _emit(args, {"out": str(args.out), "train": len(train_set), "test": len(test_set),
                 "spec": data.spec.to_dict()},
          f"wrote {len(train_set)} train and {len(test_set)} test videos "
          f"({data.spec.task}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_config(args.config)
    store = load_checkpoint(args.ckpt)
    cfg = _store_config(store)
    if cfg != run.model:
        raise ConfigError("checkpoint model does not match the config's model section")
    plan = run.plan if run.plan is not None else _store_plan(store)
    train_set, test_set = load_dataset_dir(args.data)
    records = []

    def log(record):
        records.append(record)
        if args.json:
            print(json.dumps({"event": "epoch", **record}, sort_keys=True))
        else:
            print(f"epoch {record['epoch']}: loss {record['loss']:.4f}")

    trained, metrics = train(store.astype(run.dtype), cfg, train_set, run.train,
                             TrainableMask.from_store(store), plan, log=log)
    _with_plan(trained, plan)
    save_checkpoint(trained, args.out)
    test = evaluate(trained, cfg, test_set, plan)
    if args.metrics:
        with open(args.metrics, "w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    _emit(args, {"event": "done", "out": str(args.out), "steps": metrics.steps,
                 "train_loss": metrics.loss, "test_top1": test.top1},
          f"wrote {args.out}; test top-1 {100 * test.top1:.1f}%")
    return EXIT_OK


def cmd_eval(args) -> int:
    store = load_checkpoint(args.ckpt)
    cfg = _store_config(store)
    train_set, test_set = load_dataset_dir(args.data)
    data = test_set if args.split == "test" else train_set
    m = evaluate(store, cfg, data, _store_plan(store))
    _emit(args, {"split": args.split, "n": len(data), **m.to_dict()},
          f"{args.split}: top-1 {100 * m.top1:.1f}% on {len(data)} videos, loss {m.loss:.4f}")
    return EXIT_OK


def cmd_merge(args) -> int:
    store = load_checkpoint(args.ckpt)
    merged = merge_model(store)
    save_checkpoint(merged, args.out)
    removed = len(store) - len(merged)
    _emit(args, {"out": str(args.out), "removed_tensors": removed,
                 "params": merged.num_params()},
          f"wrote {args.out}: folded {removed} adapter tensors, {merged.num_params()} parameters")
    return EXIT_OK


def cmd_verify(args) -> int:
    adapted, merged = load_checkpoint(args.adapted), load_checkpoint(args.merged)
    cfg = _store_config(adapted)
    if _store_config(merged) != cfg:
        raise ConfigError("adapted and merged checkpoints describe different models")
    report = verify_equivalence(adapted, merged, cfg, _store_plan(adapted), args.samples,
                                args.tol, args.seed, path=args.report)
    verdict = "PASS" if report.passed else "FAIL"
    _emit(args, report.to_dict(),
          f"{verdict}: max abs diff {report.max_abs_diff:.3e} over {report.n_samples} videos "
          f"(tolerance {report.tolerance:g})")
    return EXIT_OK if report.passed else EXIT_FAIL


def _gflops_text(g: float) -> str:
    # integers like the published tables for real models, significant digits for toys
    return str(round(g)) if g >= 10 else f"{g:.4g}"


def cmd_flops(args) -> int:
    if args.preset:
        cfg, plan = PRESETS[args.preset], None
        if args.num_classes is not None:
            cfg = cfg.replace(num_classes=args.num_classes)
    elif args.config:
        run = load_config(args.config)
        cfg, plan = run.model, run.plan
    else:
        raise UsageError("flops needs --config or --preset")
    if args.plan:
        plan = HeadOffsetPlan.parse(args.plan, cfg.heads)
    views = Views.parse(args.views) if args.views else Views(cfg.frames)
    cost = count_flops(cfg, plan, views)
    _emit(args, cost.to_dict(),
          f"{_gflops_text(cost.gflops)} GFLOPs ({cost.flops_total} FLOPs at 2 per multiply-add, "
          f"views {views}); extra {cost.extra_flops_vs_backbone}")
    return EXIT_OK


def cmd_params(args) -> int:
    store = load_checkpoint(args.ckpt)
    cfg = _store_config(store)
    cost = count_params(store)
    zero = assert_zero_extra(store, cfg, _store_plan(store))
    payload = {**cost.to_dict(), "zero_extra": zero.to_dict()}
    text = (f"backbone {cost.params_backbone}, new at inference {cost.params_new_at_inference}, "
            f"trainable {cost.params_trainable}; zero extra cost: "
            f"{'yes' if zero.passed else 'no (+%d params, +%d FLOPs)' % (zero.params_delta, zero.flops_delta)}")
    _emit(args, payload, text)
    if args.assert_zero_extra and not zero.passed:
        return EXIT_FAIL
    return EXIT_OK


def cmd_rf(args) -> int:
    plan = HeadOffsetPlan.parse(args.plan)
    rf = temporal_receptive_field(plan)
    payload = {"plan": list(plan.offsets), "multiset": plan.to_multiset(), "rf": rf}
    text = str(rf)
    if args.layers:
        payload["layers"] = args.layers
        payload["stacked_rf"] = stacked_receptive_field(plan, args.layers)
        text += f" (stacked over {args.layers} layers: {payload['stacked_rf']})"
    _emit(args, payload, text)
    return EXIT_OK


def cmd_compare(args) -> int:
    run = load_config(args.config)
    cfg = run.model
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise UsageError(f"unknown strategies {sorted(unknown)}; choose from {STRATEGIES}")
    if args.data:
        train_set, test_set = load_dataset_dir(args.data)
    else:
        data = run.data_config()
        train_set, test_set = train_test_split(data.spec, data.test_size)
    store = init_backbone(cfg, run.train.seed, run.dtype)
    store = warm_start(store, cfg, run.train.warm_start_steps, run.train.seed,
                       run.data.spec if run.data else None)
    rows = compare_strategies(store, cfg, run.plan, train_set, test_set, strategies, run.train,
                              run.adapter or AdapterSpec())
    _emit(args, {"rows": rows}, format_table(rows))
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zerocost-i2v",
                                     description="Zero-inference-cost video adaptation of a ViT")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="emit machine-readable JSON")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="build a backbone (+ adapters)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("gen-data", parents=[common], help="generate synthetic train/test videos")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the trainable tensors")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="write per-epoch JSON lines here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="top-1 accuracy on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("merge", parents=[common], help="fold adapters into the backbone")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("verify", parents=[common], help="compare adapted and merged logits")
    p.add_argument("--adapted", required=True)
    p.add_argument("--merged", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("flops", parents=[common], help="analytic FLOP count")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--num-classes", type=int)
    p.add_argument("--plan")
    p.add_argument("--views", help="FxCxK, e.g. 8x3x1")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("params", parents=[common], help="parameter ledger of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--assert-zero-extra", action="store_true",
                   help="exit 1 unless the model costs exactly what its backbone costs")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("rf", parents=[common], help="temporal receptive field of a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--layers", type=int)
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("compare", parents=[common], help="compare adaptation strategies")
    p.add_argument("--config", required=True)
    p.add_argument("--strategies", default=",".join(STRATEGIES))
    p.add_argument("--data")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (NonMergeableError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigError, CheckpointError, ShapeError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ZeroCostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
