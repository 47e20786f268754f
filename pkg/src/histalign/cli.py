"""Command line entry point: ``histalign {gen-data,train,eval,heatmap,ablate}``.

Any ``--dotted.key value`` argument overrides the JSON config key of the same
name, e.g. ``--optim.lr 0.05 --flags.subject false``. ``HIST_SEED`` replaces
all seeds. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as C
from .captions import ParseError
from .evaluation import evaluate
from .localization import export_heatmap, localize
from .model import ConfigMismatch, HistModel
from .scenes import DatasetError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _overrides(extra: list[str]) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or arg == "--":
            raise C.ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise C.ConfigError(f"missing value for {arg}")
            raw = extra[i + 1]
            i += 2
        if raw.lower() in ("true", "false"):
            raw = raw.lower()
        out[key] = C.parse_value(raw)
    return out


def resolve_config(args, extra) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig().validate()
    cfg = C.apply_overrides(cfg, _overrides(extra))
    return C.apply_env(cfg)


def _load_model(path):
    if not Path(path).exists():
        raise DatasetError(f"checkpoint not found: {path}")
    return HistModel.load(path)


def cmd_gen_data(cfg, args):
    from .train import generate_data
    generate_data(cfg)


def cmd_train(cfg, args):
    from .train import load_data, train
    vocab, scenes, pairs = load_data(cfg.data.dir)
    res = train(cfg, vocab, scenes, pairs, cfg.out_dir)
    last = res.records[-1]
    print(json.dumps({"steps": len(res.records), "final_total": last["total"],
                      "checkpoint": str(res.checkpoint)}))


def cmd_eval(cfg, args):
    from .train import load_data, load_test
    vocab, _, _ = load_data(cfg.data.dir, need_pairs=False)
    model = _load_model(args.ckpt)
    test = load_test(cfg.data.dir)
    seed = cfg.seeds.eval if args.seed is None else args.seed
    report = evaluate(model, vocab, test, args.mode, seed, cfg.loss)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / f"eval_{args.mode}.json", out / f"eval_{args.mode}_records.jsonl")
    print(json.dumps(report.summary()))


def cmd_heatmap(cfg, args):
    from .train import load_data, load_test
    vocab, _, _ = load_data(cfg.data.dir, need_pairs=False)
    model = _load_model(args.ckpt)
    scenes = {s.scene_id: s for s in load_test(cfg.data.dir)}
    if args.scene not in scenes:
        raise DatasetError(f"scene {args.scene!r} not in test set")
    layer = cfg.loss.layer if args.layer is None else args.layer
    head = cfg.loss.head if args.head is None else C.parse_value(args.head)
    if not 0 <= layer < model.config.n_cross_layers:
        raise C.ConfigError(f"--layer {layer} outside 0..{model.config.n_cross_layers - 1}")
    if head != "mean" and not (isinstance(head, int) and 0 <= head < model.config.n_heads):
        raise C.ConfigError(f"--head must be 'mean' or 0..{model.config.n_heads - 1}, got {args.head!r}")
    lmap = localize(model, vocab, scenes[args.scene], args.phrase, layer, head,
                    cfg.loss.include_cls, cfg.loss.literal_gradient)
    export_heatmap(lmap, args.out)
    print(json.dumps({"out": args.out, "peak": [int(v) for v in divmod(int(lmap.grid.argmax()), lmap.P)]}))


def cmd_ablate(cfg, args):
    from .train import ablate, format_table, monotonic_violations
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seeds.train]
    result = ablate(cfg, seeds, args.out or cfg.out_dir)
    print(format_table(result["median"]))
    for v in monotonic_violations(result["median"]):
        print(f"ordering violated: {v}")


def build_parser():
    p = argparse.ArgumentParser(prog="histalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON run config")
        s.set_defaults(fn=fn)
        return s

    add("gen-data", cmd_gen_data, "generate train/test scenes and training pairs")
    add("train", cmd_train, "train a model; writes metrics.jsonl and checkpoints")
    s = add("eval", cmd_eval, "evaluate a checkpoint on the test scenes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", choices=("single_phrase", "composite"), default="single_phrase")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s = add("heatmap", cmd_heatmap, "export one phrase's localization map as PGM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--phrase", required=True)
    s.add_argument("--layer", type=int)
    s.add_argument("--head", help="'mean' or a head index")
    s.add_argument("--out", required=True)
    s = add("ablate", cmd_ablate, "train the four loss variants and tabulate metrics")
    s.add_argument("--seeds", help="comma separated, e.g. 0,1,2,3,4")
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    from .train import NumericError
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = resolve_config(args, extra)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.fn(cfg, args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (C.ConfigError, ConfigMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
