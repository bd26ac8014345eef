"""Command line entry point: generate, train, adapt, eval, bench.

Exit codes: 0 ok, 2 bad config or arguments, 3 numerical failure,
4 file problems.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .adapt import AdaptConfig, adapt, final_predict
from .bench.config import VARIANTS, load_config, parse_config
from .bench.evaluation import classification_metrics
from .bench.runner import benchmark
from .bench.storage import dump_json, load_model, save_model
from .bench.training import erm_probs, run_erm, train_source
from .errors import BagError, ConfigError
from .model import BagModel, stage1_probs
from .scm import SOURCE, TARGET, generate, read_dataset, write_dataset

log = logging.getLogger("bagdg")


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")
    return seeds


def _print(obj) -> None:
    sys.stdout.write(dump_json(obj) + "\n")


def cmd_generate(args) -> int:
    run = load_config(args.config)
    n = args.n or (run.train.n_source if args.set == SOURCE else run.train.n_target)
    data = generate(run.scm_for_seed(args.seed), n, args.set, args.seed)
    write_dataset(args.out, data)
    _print({"rows": data.n, "set": args.set, "seed": args.seed, "out": str(args.out)})
    return 0


def cmd_train(args) -> int:
    run = load_config(args.config)
    data = read_dataset(args.data)
    cfg = run.train
    if cfg.variant == "ERM":
        res = run_erm(cfg, data)
    else:
        res = train_source(cfg.for_variant(cfg.variant), data)
    save_model(args.out, res.model, config=run.to_json())
    _print({"variant": cfg.variant, "source_val_acc": res.source_val_acc, "final_loss": res.loss_trace[-1] if res.loss_trace else None})
    return 0


def _adapt_config(meta_config: dict) -> tuple[AdaptConfig, str]:
    cfg = parse_config(meta_config).train
    cfg = cfg.for_variant(cfg.variant) if cfg.variant != "ERM" else cfg
    acfg = AdaptConfig(epochs=cfg.tta_epochs, step_size=cfg.tta_step_size, correction_mode=cfg.correction_mode, seed=cfg.seed)
    return acfg, cfg.variant


def cmd_adapt(args) -> int:
    model, meta = load_model(args.ckpt)
    if not isinstance(model, BagModel):
        raise ConfigError("only decomposed models can be adapted; this checkpoint holds a plain network")
    if meta["adapted"]:
        raise ConfigError("checkpoint is already adapted")
    acfg, _ = _adapt_config(meta["config"])
    data = read_dataset(args.target)
    adapted, report = adapt(model, data.X, acfg, data.y)
    save_model(args.out, adapted, config=meta["config"], adapted=True)
    _print(report.to_json())
    return 0


def cmd_eval(args) -> int:
    model, meta = load_model(args.ckpt)
    data = read_dataset(args.data)
    if not isinstance(model, BagModel):
        probs, stage = erm_probs(model, data.X), "pre_tta"
    elif meta["adapted"]:
        acfg, _ = _adapt_config(meta["config"])
        probs, stage = final_predict(model, model.calib, data.X, acfg.correction_mode), "post_tta"
    else:
        probs, stage = stage1_probs(model, data.X), "pre_tta"
    out = classification_metrics(probs.argmax(axis=1), data.y, probs.shape[1])
    out["stage"] = stage
    _print(out)
    return 0


def cmd_bench(args) -> int:
    variants = tuple(args.variants.split(",")) if args.variants else VARIANTS
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}")
    report = benchmark(args.config, args.seeds, args.out, variants)
    _print(report.summary)
    return 1 if report.failures and not report.records else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bagdg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a dataset from the generator")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--set", choices=(SOURCE, TARGET), default=SOURCE)
    g.add_argument("--n", type=int, default=None, help="row count (default from config)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="source training plus calibration")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="test-time adaptation on a target dataset")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="all variants over a list of seeds")
    b.add_argument("--config", required=True)
    b.add_argument("--seeds", type=parse_seeds, default=[0, 1, 2, 3, 4], help="e.g. 0,1,2 or 0-4")
    b.add_argument("--out", required=True)
    b.add_argument("--variants", default=None, help="comma separated subset of " + ",".join(VARIANTS))
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BagError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
