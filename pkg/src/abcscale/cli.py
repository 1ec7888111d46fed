"""Command-line entry point: ``abcscale <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from abcscale import compute_optimal as co
from abcscale import corpus_metrics as cm
from abcscale import fitting
from abcscale import smt
from abcscale import tokenizer as tk
from abcscale.abc_parser import ParseError, join_tunebook, parse_tune, serialize_tune, split_tunebook
from abcscale.laws import DomainError, Law, LawParams, predict

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

DATA_ERRORS = (
    ParseError, smt.SyncError, smt.InverseError, tk.ConfigError, tk.UnknownChar, tk.BadId,
    cm.EmptyCorpus, fitting.FitError, DomainError, OSError, UnicodeDecodeError,
    json.JSONDecodeError, KeyError, TypeError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- output ----------------------------------------------------------------

def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with every float written to 17 significant digits (NaN/inf as null)."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return format(obj, ".17g") if math.isfinite(obj) else "null"
    if isinstance(obj, int) or isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if hasattr(obj, "item"):  # numpy scalar
        return dumps(obj.item(), indent, _level)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (dict, list)):
        return json.dumps(v)
    return "" if v is None else str(v)


def _flatten(obj: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in obj.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def to_csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def render(obj: dict, fmt: str) -> str:
    if fmt == "csv":
        flat = _flatten(obj)
        return to_csv([list(flat), list(flat.values())])
    return dumps(obj) + "\n"


def emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def note(args, msg: str) -> None:
    if not args.quiet:
        print(msg, file=sys.stderr)


# --- subcommands -----------------------------------------------------------

def cmd_convert(args) -> int:
    text = Path(args.input).read_text(encoding="utf-8")
    chunks = split_tunebook(text)
    if args.invert:
        out = [serialize_tune(smt.desynchronize(c, args.tracks)) for c in chunks]
        Path(args.output).write_text(join_tunebook(out), encoding="utf-8")
        note(args, f"inverted {len(out)} tunes")
        return EXIT_OK
    report = smt.SkipReport()
    out = []
    for chunk in chunks:
        try:
            sync = smt.synchronize(parse_tune(chunk))
        except ParseError as exc:
            report.record_skip(f"parse_{exc.reason}")
        except smt.SyncError as exc:
            report.record_skip(exc.reason)
        else:
            report.record_ok()
            out.append(smt.render_smt(sync))
    Path(args.output).write_text(join_tunebook(out), encoding="utf-8")
    rendered = render(report.to_dict(), args.output_format)
    if args.report:
        Path(args.report).write_text(rendered, encoding="utf-8")
    else:
        sys.stdout.write(rendered)
    return EXIT_OK


def _read_lines(path: Optional[str]) -> list[str]:
    text = Path(path).read_text(encoding="utf-8") if path else sys.stdin.read()
    return text.splitlines()


def cmd_tokenize(args) -> int:
    if args.action == "train":
        vocab = tk.train_bpe(_read_lines(args.input), args.vocab_size)
        vocab.save(args.vocab)
        note(args, f"{len(vocab)} tokens, {len(vocab.merges)} merges -> {args.vocab}")
        return EXIT_OK
    vocab = tk.Vocab.load(args.vocab)
    lines = _read_lines(args.input)
    if args.action == "encode":
        out = [" ".join(str(i) for i in tk.encode(vocab, line)) for line in lines]
    else:
        out = []
        for line in lines:
            try:
                ids = [int(x) for x in line.split()]
            except ValueError as exc:
                raise tk.BadId(str(exc)) from None
            out.append(tk.decode(vocab, ids))
    emit("".join(line + "\n" for line in out), args.output)
    return EXIT_OK


def cmd_stats(args) -> int:
    pieces = split_tunebook(Path(args.input).read_text(encoding="utf-8"))
    if args.vocab:
        vocab = tk.Vocab.load(args.vocab)
        lengths = [len(tk.encode(vocab, p)) for p in pieces]
        unit = "tokens"
    else:
        lengths = [len(p) for p in pieces]
        unit = "characters"
    report = cm.length_coverage(lengths, args.context_length).to_dict()
    report["length_unit"] = unit
    report["repetition_rate"] = cm.repetition_rate(pieces)
    if args.histogram:
        rows = [("lo", "hi", "count")] + cm.length_histogram(lengths, args.bin_width)
        Path(args.histogram).write_text(to_csv(rows), encoding="utf-8")
    sys.stdout.write(render(report, args.output_format))
    return EXIT_OK


def cmd_fit(args) -> int:
    obs = fitting.load_observations(args.input)
    report = fitting.fit_law(args.law, obs, split=args.test_split)
    emit(render(report.to_json(), args.output_format), args.out)
    return EXIT_OK


def _load_params(path: str) -> LawParams:
    return LawParams.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_predict(args) -> int:
    p = _load_params(args.params)
    if p.variant is not Law.CHINCHILLA and args.u_d is None:
        raise DomainError(f"the {p.variant.value} law needs --u-d")
    loss = float(predict(p, args.n, args.d, args.u_d))
    result = {"variant": p.variant.value, "n": args.n, "d": args.d, "u_d": args.u_d, "loss": loss}
    sys.stdout.write(render(result, args.output_format))
    return EXIT_OK


def cmd_optimal(args) -> int:
    p = _load_params(args.params)
    if args.sweep:
        rows = [("n", "d", "loss")] + co.sweep(p, args.flops, args.u_d)
        sys.stdout.write(to_csv(rows))
        return EXIT_OK
    if p.variant is Law.CHINCHILLA:
        res = co.closed_form_allocation(p, args.flops, args.u_d)
    else:
        res = co.constrained_search(p, args.flops, args.u_d)
    if res.at_bound:
        note(args, "warning: optimum at the search bound")
    sys.stdout.write(render(res.to_json(), args.output_format))
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Subcommands repeat the flags with suppressed defaults so a value given
    # before the subcommand is not reset.
    def dflt(v):
        return argparse.SUPPRESS if suppress else v
    parser.add_argument("--seed", type=int, default=dflt(0), help="seed for randomised fixtures")
    parser.add_argument("--quiet", action="store_true", default=dflt(False), help="suppress diagnostics")
    parser.add_argument("--output-format", choices=("json", "csv"), default=dflt("json"))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)

    p = _Parser(prog="abcscale", description="ABC corpus tools and loss-law fitting.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("convert", parents=[common], help="ABC <-> synchronized multi-track ABC")
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--invert", action="store_true", help="convert SMT-ABC back to ABC")
    c.add_argument("--tracks", type=_positive_int, help="track count for SMT input without V: lines")
    c.add_argument("--report", help="write the skip report here instead of stdout")
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("tokenize", parents=[common], help="train or apply a BPE vocabulary")
    t.add_argument("action", choices=("train", "encode", "decode"))
    t.add_argument("--vocab", required=True)
    t.add_argument("--vocab-size", type=_positive_int, default=tk.DEFAULT_VOCAB_SIZE)
    t.add_argument("--input", help="one item per line (default: stdin)")
    t.add_argument("--output", help="default: stdout")
    t.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("stats", parents=[common], help="length coverage and repeat-sign rate")
    s.add_argument("--input", required=True, help="ABC tunebook")
    s.add_argument("--vocab", help="count BPE tokens instead of characters")
    s.add_argument("--context-length", type=_positive_int, default=8192)
    s.add_argument("--histogram", help="CSV path for the length histogram")
    s.add_argument("--bin-width", type=_positive_int, default=256)
    s.set_defaults(func=cmd_stats)

    f = sub.add_parser("fit", parents=[common], help="fit a loss law to a JSONL loss log")
    f.add_argument("--law", required=True, choices=[v.value for v in Law])
    f.add_argument("--input", required=True)
    f.add_argument("--test-split", choices=("largest-n", "none"), default="largest-n")
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", parents=[common], help="evaluate fitted parameters")
    pr.add_argument("--params", required=True)
    pr.add_argument("--n", type=float, required=True)
    pr.add_argument("--d", type=float, required=True)
    pr.add_argument("--u-d", type=float)
    pr.set_defaults(func=cmd_predict)

    o = sub.add_parser("optimal", parents=[common], help="compute-optimal allocation")
    o.add_argument("--params", required=True)
    o.add_argument("--flops", type=float, required=True)
    o.add_argument("--u-d", type=float)
    o.add_argument("--sweep", action="store_true", help="emit (n, d, loss) CSV along the budget")
    o.set_defaults(func=cmd_optimal)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"abcscale {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
