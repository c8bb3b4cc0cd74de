"""Command-line entry points: train, eval, export-schedules, gen-data.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import fields
from pathlib import Path

from .config import RunConfig, coerce
from .data import Dataset, generate_synthetic, load_tsv, read_tsv, Vocab, dataset_from_rows, write_tsv
from .errors import LayerPartiError, UsageError
from .train import evaluate, evaluate_checkpoint, export_schedules, train

log = logging.getLogger("layerparti")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _synthetic_spec(text: str) -> tuple[int, int, int]:
    try:
        a, b, c = (int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--synthetic expects n_labeled,n_unlabeled,n_test, got {text!r}") from None
    return a, b, c


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    hints = typing.get_type_hints(RunConfig)
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kw = {"dest": f"cfg_{f.name}", "default": None, "metavar": f.name.upper()}
        if f.name == "ssl":
            kw["choices"] = ("none", "pi", "te")
        p.add_argument(flag, type=str, help=f"config override ({hints[f.name]})", **kw)


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for f in fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            overrides[f.name] = coerce(f.name, v)
    return cfg.with_overrides(overrides)


def _load_training_data(args, cfg: RunConfig) -> tuple[Dataset, Dataset | None]:
    if args.synthetic:
        n_lab, n_unl, n_test = _synthetic_spec(args.synthetic)
        return generate_synthetic(n_lab, n_unl, n_test, seed=cfg.seed,
                                  seq_len=min(16, cfg.max_len))
    if not args.labeled:
        raise UsageError("train needs --labeled PATH or --synthetic a,b,c")
    rows = read_tsv(args.labeled)
    unl_rows = read_tsv(args.unlabeled) if args.unlabeled else []
    unl_rows = [(None, text) for _, text in unl_rows]
    vocab = Vocab.build(text for _, text in rows + unl_rows)
    ds = dataset_from_rows(rows + unl_rows, vocab, cfg.max_len)
    test = load_tsv(args.test, vocab, cfg.max_len, n_classes=ds.n_classes) if args.test else None
    return ds, test


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    train_ds, test_ds = _load_training_data(args, cfg)
    out = Path(args.out)
    res = train(cfg, train_ds, out, resume=args.resume)
    summary = {"checkpoint": str(res.checkpoint_path), "metrics": str(res.metrics_path),
               "max_iterations": res.plan.max_iterations}
    if test_ds is not None:
        rep = evaluate(res.params, test_ds)
        (out / "eval.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
        summary["test_accuracy"] = rep.accuracy
        summary["test_macro_f1"] = rep.macro_f1
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval(args) -> int:
    if args.synthetic:
        n_lab, n_unl, n_test = _synthetic_spec(args.synthetic)
        _, test = generate_synthetic(n_lab, n_unl, n_test, seed=args.seed or 0)
    elif args.test:
        test = args.test
    else:
        raise UsageError("eval needs --test PATH or --synthetic a,b,c")
    rep = evaluate_checkpoint(args.checkpoint, test)
    text = json.dumps(rep.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_export(args) -> int:
    cfg = _resolve_config(args)
    if args.iterations < 1:
        raise UsageError("--iterations must be positive")
    path = export_schedules(cfg, args.iterations, args.out)
    print(path)
    return 0


def cmd_gen_data(args) -> int:
    n_lab, n_unl, n_test = _synthetic_spec(args.synthetic)
    train_ds, test_ds = generate_synthetic(n_lab, n_unl, n_test, args.vocab_size, args.seq_len, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labeled = Dataset([e for e in train_ds.examples if e.label is not None], train_ds.vocab)
    unlabeled = Dataset([e for e in train_ds.examples if e.label is None], train_ds.vocab)
    write_tsv(out / "labeled.tsv", labeled)
    write_tsv(out / "unlabeled.tsv", unlabeled)
    write_tsv(out / "test.tsv", test_ds)
    (out / "unlabeled_hidden_labels.txt").write_text(
        "".join(f"{e.hidden_label}\n" for e in unlabeled.examples))
    manifest = dict(train_ds.meta, files=["labeled.tsv", "unlabeled.tsv", "test.tsv",
                                          "unlabeled_hidden_labels.txt"])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layerparti", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the training loop")
    _add_config_flags(t)
    t.add_argument("--labeled", type=Path)
    t.add_argument("--unlabeled", type=Path)
    t.add_argument("--test", type=Path, help="evaluate on this TSV after training")
    t.add_argument("--synthetic", metavar="NL,NU,NT")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", type=Path)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--test", type=Path)
    e.add_argument("--synthetic", metavar="NL,NU,NT")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-schedules", help="write the lr and w(t) curves as a table")
    _add_config_flags(s)
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_export)

    g = sub.add_parser("gen-data", help="write the synthetic task as TSV files")
    g.add_argument("--synthetic", required=True, metavar="NL,NU,NT")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vocab-size", type=int, default=100)
    g.add_argument("--seq-len", type=int, default=16)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LayerPartiError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
