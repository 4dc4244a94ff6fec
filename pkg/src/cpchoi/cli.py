"""Command-line entry point: gen-data, train, eval, ablate, gradcheck.

Every command writes ``resolved_config.json`` into its output directory;
passing that file back with ``--config`` replays the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as D
from . import engine as E

RESOLVED = "resolved_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def parse_paths(text):
    try:
        paths = tuple(sorted({int(p) for p in str(text).split(",") if p.strip()}))
    except ValueError:
        raise argparse.ArgumentTypeError(f"paths must be comma-separated integers, got {text!r}") from None
    if 1 not in paths or not set(paths) <= {1, 2, 3, 4}:
        raise argparse.ArgumentTypeError("paths must be a subset of 1,2,3,4 containing 1")
    return paths


def _flag(p, name, default, help):
    p.add_argument(name, type=parse_bool, nargs="?", const=True, default=default, help=help)


def build_parser():
    parser = _Parser(prog="cpchoi", description="Cross-path consistency training on synthetic HOI scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--scenes", type=int, default=512)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default="scenes.jsonl", help="dataset file name inside --out")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--paths", type=parse_paths, default=(1, 2, 3, 4))
    _flag(t, "--share-decoder", True, "all paths run one decoder")
    _flag(t, "--cpc", True, "cross-path consistency term")
    _flag(t, "--freeze-encoder", False, "keep patch embedding and encoder fixed")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr-model", type=float, default=1e-4)
    t.add_argument("--lr-embed", type=float, default=1e-5)
    t.add_argument("--grad-clip", type=float, default=0.0, help="global gradient-norm limit (0 = off)")
    t.add_argument("--eval-data", default=None)
    t.add_argument("--eval-every", type=int, default=0)

    e = sub.add_parser("eval", help="triplet mAP of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--score-threshold", type=float, default=0.0)

    a = sub.add_parser("ablate", help="decoder-sharing x CPC grid and path sweep")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--eval-data", default=None, help="defaults to a 20%% split of --data")
    a.add_argument("--steps", type=int, default=2000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--batch-size", type=int, default=16)
    a.add_argument("--lr-model", type=float, default=1e-4)
    a.add_argument("--lr-embed", type=float, default=1e-5)
    a.add_argument("--grad-clip", type=float, default=0.0, help="global gradient-norm limit (0 = off)")
    a.add_argument("--workers", type=int, default=1)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=None)

    for p in (g, t, e, a, c):
        p.add_argument("--config", default=None, help="replay a resolved_config.json")
    return parser


def _write_resolved(out, args):
    if out is None:
        return
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())
           if k not in ("config", "verbose")}
    Path(out, RESOLVED).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_gen_data(args):
    out = _out_dir(args.out)
    scenes = D.generate_dataset(args.scenes, args.seed)
    D.write_dataset(scenes, out / args.name)
    _write_resolved(out, args)
    print(f"wrote {len(scenes)} scenes to {out / args.name}")


def _train_config(args, **extra):
    return E.TrainConfig(steps=args.steps, batch_size=args.batch_size, lr_model=args.lr_model,
                         lr_embed=args.lr_embed, grad_clip=args.grad_clip, seed=args.seed, **extra)


def _cmd_train(args):
    out = _out_dir(args.out)
    train_set = D.read_dataset(args.data)
    eval_set = D.read_dataset(args.eval_data) if args.eval_data else None
    config = _train_config(args, active_paths=args.paths, share_decoder=args.share_decoder,
                           cpc_enabled=args.cpc, freeze_encoder=args.freeze_encoder,
                           eval_every=args.eval_every)
    _write_resolved(out, args)
    with (out / "metrics.jsonl").open("w", encoding="utf-8") as events:
        def emit(record):
            events.write(json.dumps(record, sort_keys=True) + "\n")
            events.flush()

        result = E.train(config, train_set, eval_set=eval_set, events=emit)
    with (out / "losses.jsonl").open("w", encoding="utf-8") as fh:
        for rec in result.losses:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    E.save_checkpoint(result.checkpoint, out / "checkpoint.json")
    last = result.losses[-1]["total"] if result.losses else float("nan")
    print(f"trained {config.steps} steps, final loss {last:.6f}; checkpoint at {out / 'checkpoint.json'}")


def _cmd_eval(args):
    ckpt = E.load_checkpoint(args.checkpoint)
    scenes = D.read_dataset(args.data)
    metrics = E.evaluate_map(ckpt, scenes, score_threshold=args.score_threshold)
    record = {"map": metrics["map"], "ap": {D.ACTIONS[k]: v for k, v in metrics["ap"].items()}}
    text = json.dumps(record, sort_keys=True)
    if args.out:
        out = _out_dir(args.out)
        (out / "metrics.json").write_text(text + "\n", encoding="utf-8")
        _write_resolved(out, args)
    print(text)


def _cmd_ablate(args):
    out = _out_dir(args.out)
    scenes = D.read_dataset(args.data)
    if args.eval_data:
        train_set, eval_set = scenes, D.read_dataset(args.eval_data)
    else:
        train_set, eval_set = D.split(scenes, 0.8, args.seed)
    _write_resolved(out, args)
    rows = E.ablate(_train_config(args), train_set, eval_set, workers=args.workers)
    E.write_table(rows, out / "ablation.csv")
    for row in rows:
        print(f"{row['run']:<22} params {row['n_params']:>7}  P1 mAP {row['p1_map']:.4f}")


def _cmd_gradcheck(args):
    from . import gradsuite

    result = gradsuite.run_suite(args.seed)
    for name, err in sorted(result["ops"].items()):
        print(f"{name:<14} {err:.3e}")
    print(f"max op relative error   {result['ops_max']:.3e} (limit {gradsuite.OP_TOLERANCE:g})")
    print(f"end-to-end relative error {result['end_to_end']:.3e} (limit {gradsuite.END_TO_END_TOLERANCE:g})")
    if args.out:
        out = _out_dir(args.out)
        (out / "gradcheck.json").write_text(json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")
        _write_resolved(out, args)
    ok = result["ops_max"] < gradsuite.OP_TOLERANCE and result["end_to_end"] < gradsuite.END_TO_END_TOLERANCE
    return 0 if ok else 2


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def _parse(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            saved = json.loads(Path(known.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {known.config}: {exc}")
        subs = parser._subparsers._group_actions[0].choices
        if saved.get("command") not in subs:
            parser.error(f"--config {known.config} names no known command")
        sub = subs[saved["command"]]
        defaults = {}
        for action in sub._actions:
            if action.dest in saved and action.dest != "config":
                value = saved[action.dest]
                defaults[action.dest] = tuple(value) if isinstance(value, list) else value
                action.required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    if known.config and args.command != saved["command"]:
        parser.error(f"--config was written by {saved['command']!r}, not {args.command!r}")
    return args


def dispatch(argv=None):
    """Run one command; returns 0 on success, 1 on usage error, 2 on failure."""
    try:
        args = _parse(sys.argv[1:] if argv is None else list(argv))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        code = COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"cpchoi {args.command}: {exc}", file=sys.stderr)
        return 2
    return code or 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
