"""Command-line entry point: ``pconvlab {bench,flops,build,analyze,approx}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from pathlib import Path

from . import arch as arch_mod
from .analysis import ApproxConfig, network_histogram
from .bench import (CANONICAL_DIMS, MeasurementWarning, bench_suite, check_operator, emit_csv,
                    operator_label, operator_spec, ordering_report, stack_flops, write_csv)
from .cost import CostReport, mem_access_model, model_cost, table_megaflops
from .errors import ConfigError, PConvLabError
from .threads import set_thread_mode

EX_OK, EX_ERROR, EX_WARN, EX_USAGE, EX_CONFIG = 0, 1, 2, 64, 65


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dims(text: str):
    if text == "preset":
        return list(CANONICAL_DIMS)
    dims = []
    for part in text.split(","):
        try:
            c, h, w = (int(v) for v in part.lower().split("x"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad dims {part!r}; expected CxHxW") from None
        dims.append((c, h, w))
    return dims


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true", help="emit JSON")
    fmt.add_argument("--csv", nargs="?", const="-", metavar="PATH",
                     help="emit CSV to PATH (or stdout)")
    p.add_argument("--quiet", action="store_true", help="suppress informational output")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="pconvlab", description="Partial-convolution operator laboratory.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    b = sub.add_parser("bench", parents=[common], help="time stacked operators, derive FLOPS")
    b.add_argument("--op", action="append", required=True,
                   help="conv | dwconv | gconv:G | pconv:R | pwconv (repeatable)")
    b.add_argument("--dims", type=_dims, default=list(CANONICAL_DIMS), help="'preset' or CxHxW[,CxHxW...]")
    b.add_argument("--layers", type=int, default=10)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--threads", choices=("single", "auto"), default="single")
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--iters", type=int, default=50)

    f = sub.add_parser("flops", parents=[common], help="analytical FLOPs / memory access / params")
    src = f.add_mutually_exclusive_group(required=True)
    src.add_argument("--variant", help="FasterNet variant: T0 T1 T2 S M L")
    src.add_argument("--arch", type=Path, help="architecture JSON file")
    src.add_argument("--op", action="append", help="operator (see bench); repeatable")
    f.add_argument("--dims", type=_dims, default=list(CANONICAL_DIMS))
    f.add_argument("--layers", type=int, default=10)
    f.add_argument("--size", type=int, default=224, help="input resolution for networks")
    f.add_argument("--num-classes", type=int, default=1000)
    f.add_argument("--asymptotic", action="store_true", help="drop filter terms from memory access")
    f.add_argument("--per-layer", action="store_true")

    bu = sub.add_parser("build", parents=[common], help="build a network, emit manifest and cost")
    src = bu.add_mutually_exclusive_group(required=True)
    src.add_argument("--variant")
    src.add_argument("--arch", type=Path)
    bu.add_argument("--num-classes", type=int, default=1000)
    bu.add_argument("--size", type=int, default=224)
    bu.add_argument("--out", type=Path, help="directory for manifest.json and weight files")
    bu.add_argument("--fold-bn", action="store_true", help="merge BN layers before saving")

    a = sub.add_parser("analyze", parents=[common], help="salient-position histogram of saved weights")
    a.add_argument("--weights", type=Path, required=True, help="manifest.json or its directory")
    a.add_argument("--kernel", type=int, default=3)

    ap = sub.add_parser("approx", parents=[common], help="operator approximation experiment")
    ap.add_argument("--config", type=Path, required=True)
    ap.add_argument("--out", type=Path, help="loss-curve CSV path (default stdout)")
    return parser


def _emit(args, payload: dict, rows: list, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2))
    elif args.csv:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        if args.csv == "-":
            sys.stdout.write(buf.getvalue())
        else:
            Path(args.csv).write_text(buf.getvalue())
    else:
        print(text)


def _load_arch(args):
    if args.variant:
        return arch_mod.variant_config(args.variant, args.num_classes)
    try:
        obj = json.loads(args.arch.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read architecture {args.arch}: {exc}") from exc
    return arch_mod.config_from_json(obj)


def _summary(cfg, report: CostReport) -> str:
    return f"{report.flops / 1e9:.2f} GFLOPs, {report.params / 1e6:.1f}M params"


def cmd_flops(args) -> int:
    if args.op:
        for op in args.op:
            check_operator(op)
        rows = [["operator", "c", "h", "w", "layers", "flops", "flops_m", "table_m", "mem_access"]]
        items = []
        for op in args.op:
            for dim in args.dims:
                total = stack_flops(op, dim, args.layers)
                spec = operator_spec(op, dim[0])
                mem = mem_access_model(spec, dim[1], dim[2], args.asymptotic) * args.layers
                items.append({"operator": op, "c": dim[0], "h": dim[1], "w": dim[2], "layers": args.layers,
                              "flops": total, "flops_m": total / 1e6, "table_m": table_megaflops(total),
                              "mem_access": mem})
                rows.append([op, *dim, args.layers, total, repr(total / 1e6), table_megaflops(total), mem])
        width = max(len(operator_label(op)) for op in args.op)
        lines = [f"{'operator':<{width}}  {'dims':>12}  {'FLOPs (M)':>10}  {'mem access':>12}"]
        for it in items:
            dims = f"{it['c']}x{it['h']}x{it['w']}"
            lines.append(f"{operator_label(it['operator']):<{width}}  {dims:>12}  "
                         f"{it['table_m']:>10}  {it['mem_access']:>12}")
        _emit(args, {"operators": items, "asymptotic": args.asymptotic}, rows, "\n".join(lines))
        return EX_OK
    cfg = _load_arch(args)
    report = model_cost(cfg, args.size, args.size, asymptotic=args.asymptotic)
    payload = dict(report.to_dict(per_layer=args.per_layer), arch=cfg.to_dict(), size=args.size)
    rows = [["name", "layer", "flops", "mem_access", "params"]]
    rows += [[e.name, e.layer, e.flops, e.mem_access, e.params] for e in report.layers]
    rows.append(["total", cfg.name, report.flops, report.mem_access, report.params])
    text = _summary(cfg, report)
    if args.per_layer:
        text = "\n".join([f"{e.name:>8}  {e.layer:<20} {e.flops:>14} {e.params:>10}" for e in report.layers]
                         + [text])
    _emit(args, payload, rows, text)
    return EX_OK


def cmd_build(args) -> int:
    cfg = _load_arch(args)
    net = arch_mod.build_config(cfg, args.seed)
    if args.fold_bn:
        net = arch_mod.fold_all_bn(net)
    report = model_cost(net, args.size, args.size)
    manifest = arch_mod.describe(net)
    if args.out:
        arch_mod.save_weights(net, args.out)
        (args.out / "cost.json").write_text(json.dumps(report.to_dict(), indent=1))
    payload = {"arch": cfg.to_dict(), "manifest": manifest, "cost": report.to_dict(per_layer=False),
               "params_stored": arch_mod.param_count(net)}
    rows = [["name", "layer", "flops", "params"]] + [[e.name, e.layer, e.flops, e.params] for e in report.layers]
    text = json.dumps(payload, indent=1) if not args.quiet else _summary(cfg, report)
    _emit(args, payload, rows, text)
    return EX_OK


def cmd_analyze(args) -> int:
    net = arch_mod.load_weights(args.weights)
    hist = network_histogram(net, args.kernel)
    text = "\n".join(f"position {i + 1}: {int(v)}" for i, v in enumerate(hist.counts))
    _emit(args, hist.to_dict(), hist.csv_rows(), text)
    return EX_OK


def cmd_approx(args) -> int:
    try:
        obj = json.loads(args.config.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read approx config {args.config}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("approx config must be a JSON object")
    obj.setdefault("seed", args.seed)
    run = ApproxConfig.from_json(obj).run()
    if args.out:
        run.write_csv(args.out)
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train", "val", "test"])
        writer.writerows([[e, repr(a), repr(b), repr(c)] for e, a, b, c in run.curve_rows()])
        sys.stdout.write(buf.getvalue())
    if not args.quiet:
        print(f"final test MSE ({run.student_kind}+pointwise): {run.final_test_mse:.6g}", file=sys.stderr)
    return EX_OK


def cmd_bench(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MeasurementWarning)
        table = bench_suite(args.op, args.dims, layers=args.layers, batch=args.batch, warmup=args.warmup,
                            iters=args.iters, threads=args.threads, seed=args.seed)
    for op, dim, msg in table.errors:
        print(f"error: {op} at {'x'.join(map(str, dim))}: {msg}", file=sys.stderr)
    if args.csv and args.csv != "-":
        emit_csv(table.records, args.csv)
    elif args.csv:
        write_csv(table.records, sys.stdout)
    elif args.json:
        print(json.dumps({
            "records": [dict(vars(r), flops_m=r.flops_m, flops_gs=r.flops_gs) for r in table.records],
            "averages_gs": {op: v / 1e9 for op, v in table.averages.items()},
            "report": ordering_report(table),
        }, indent=2))
    if not args.quiet and not (args.json or args.csv == "-"):
        print(f"{'operator':<22} {'dims':>10} {'FLOPs(M)':>9} {'latency ms':>11} {'fps':>9} {'GFLOPS':>8}")
        for r in table.records:
            print(f"{operator_label(r.operator):<22} {f'{r.c}x{r.h}x{r.w}':>10} {table_megaflops(r.flops):>9} "
                  f"{r.latency_median * 1e3:>11.3f} {r.throughput_fps:>9.1f} {r.flops_gs:>8.2f}")
        for op, avg in table.averages.items():
            print(f"{operator_label(op):<22} {'average':>10} {'':>9} {'':>11} {'':>9} {avg / 1e9:>8.2f}")
        for key, val in ordering_report(table).items():
            if key != "averages_gs":
                print(f"info: {key} = {val}")
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if table.errors and not table.records:
        return EX_ERROR
    if caught:
        return EX_WARN
    return EX_ERROR if table.errors else EX_OK


COMMANDS = {"bench": cmd_bench, "flops": cmd_flops, "build": cmd_build,
            "analyze": cmd_analyze, "approx": cmd_approx}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EX_USAGE
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EX_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EX_USAGE
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EX_CONFIG
    except PConvLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_ERROR
    finally:
        set_thread_mode("auto")


def main() -> None:
    sys.exit(dispatch())
