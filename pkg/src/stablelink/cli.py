"""Command-line interface.

Exit status: 0 on success, 1 on domain errors, 2 on usage errors.
The registry root comes from ``--registry`` or ``$STABLELINK_REGISTRY``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from pathlib import Path

from . import bench, inspector
from .errors import StableLinkError
from .executor import assign_bases, dynamic_load, normalize, replay
from .registry import Mode, Registry
from .resolver import LookupCost, Strategy, compute_load_order, materialize
from .sof import format_uuid, load_sof
from .table import serialize_table

ENV_REGISTRY = "STABLELINK_REGISTRY"


def _registry(args) -> Registry:
    root = args.registry or os.environ.get(ENV_REGISTRY)
    if not root:
        args.parser.error(f"no registry given; pass --registry or set {ENV_REGISTRY}")
    return Registry(root)


def cmd_init(args):
    Registry.init(args.dir)
    print(f"initialized registry at {args.dir}")


def cmd_begin_mgmt(args):
    reg = _registry(args).begin_mgmt()
    print(f"management time open (epoch {reg.epoch_id})")


def cmd_add(args):
    reg = _registry(args)
    for path in args.files:
        obj = load_sof(path)
        reg.update_obj(obj)
        print(f"updated {obj.name} {format_uuid(obj.uuid)}")


def cmd_end_mgmt(args):
    reg = _registry(args).end_mgmt(args.strategy)
    st = reg.status()
    print(f"epoch {st['epoch_id']} started; {st['tables']} relocation table(s)")
    for exe, info in st["executables"].items():
        how = "materialized" if info["materialized_epoch"] == st["epoch_id"] else "reused"
        print(f"  {exe}: {how}")


def cmd_status(args):
    st = _registry(args).status()
    if args.json:
        print(json.dumps(st, indent=2, sort_keys=True))
        return
    print(f"mode: {st['mode']}")
    print(f"epoch_id: {st['epoch_id']}")
    print(f"objects: {st['objects']}" + (f" (dirty: {', '.join(st['dirty'])})" if st["dirty"] else ""))
    print(f"tables: {st['tables']}")
    for exe, info in st["executables"].items():
        flags = ["stale"] if info["stale"] else []
        if info["patches"]:
            flags.append(f"{info['patches']} patch(es)")
        extra = f" [{', '.join(flags)}]" if flags else ""
        print(f"  {exe}: epoch {info['epoch_id']}, materialized in epoch {info['materialized_epoch']}{extra}")


def cmd_run(args):
    reg = _registry(args)
    seed = args.seed if args.seed is not None else random.SystemRandom().getrandbits(64)
    trace: list[str] | None = [] if args.trace else None
    if reg.mode is Mode.EPOCH:
        table = reg.table(args.exe)
        space = replay(table, assign_bases(table.load_set, seed), trace)
        how = "replay"
    else:
        objects = reg.objects()
        order = compute_load_order(objects, args.exe)
        cost = LookupCost()
        space = dynamic_load(objects, args.exe, assign_bases(order.load_set(), seed), args.strategy, cost, trace)
        how = f"online ({cost.lookups} lookups, {cost.probes} probes)"
    print(f"loaded {args.exe} via {how}, seed {seed}")
    for p in sorted(space.placements.values(), key=lambda p: p.base):
        print(f"  {p.base:#014x} {p.name}")
    print(f"  {len(space.writes)} word(s) written")
    if trace is not None:
        for line in trace:
            print(line)
    if args.normalized:
        for entry in normalize(space):
            print(f"{entry.object}+{entry.offset:#x} = {entry.value}")


def cmd_materialize_dump(args):
    reg = _registry(args)
    if reg.mode is Mode.EPOCH:
        data = reg.table_bytes(args.exe)
    else:
        data = serialize_table(materialize(reg.objects(), args.exe, reg.epoch_id, args.strategy))
    sys.stdout.write(data.decode("utf-8"))


def cmd_export(args):
    reg = _registry(args)
    if reg.mode is not Mode.EPOCH:
        print("warning: management time is open; exporting a stale table", file=sys.stderr)
    inspector.export_table(reg.table(args.exe), args.format, args.out)
    print(f"wrote {args.out}")


def _objects_if_registry(args):
    root = args.registry or os.environ.get(ENV_REGISTRY)
    return Registry(root).objects() if root else None


def cmd_abi(args):
    abi = inspector.abi_table(_objects_if_registry(args), args.lib)
    print(f"# {abi.library} {format_uuid(abi.uuid)}")
    for row in abi.rows:
        print(f"{row.symbol_name}\t{row.st_value:#x}\t{row.st_size:#x}")


def cmd_check_abi(args):
    reg = _registry(args)
    new_abi = inspector.abi_table(None, args.new)
    broken = inspector.query_abi_compat(reg.table(args.exe), args.old, new_abi)
    if not broken:
        print(f"{args.exe}: compatible with new {args.old}")
        return
    print(f"{args.exe}: {len(broken)} binding(s) would break")
    for symbol, requirer in broken:
        print(f"{symbol}\t{requirer}")


def cmd_audit_cve(args):
    for exe in inspector.query_cve(_registry(args), args.lib, args.symbol):
        print(exe)


def cmd_patch(args):
    reg = _registry(args)
    if args.clear:
        reg.clear_patches(args.exe)
        print(f"cleared patches of {args.exe}; it will be rematerialized at end-mgmt")
        return
    if not args.symbol or not args.provider:
        args.parser.error("patch needs --symbol and --provider (or --clear)")
    reg.apply_patch(args.exe, inspector.Patch(args.symbol, args.provider, args.requires))
    print(f"{args.exe}: {args.symbol} now bound to {args.provider}")


def cmd_gen_bench(args):
    if (args.f is None) == (args.total_functions is None):
        args.parser.error("give exactly one of --f and --total-functions")
    if args.f is not None:
        cfg = bench.BenchConfig(n=args.n, f_per_object=args.f, seed=args.seed)
    else:
        cfg = bench.BenchConfig.from_total(args.n, args.total_functions, seed=args.seed)
    reg = Registry.init(args.out)
    for obj in bench.generate_synthetic(cfg).values():
        reg.update_obj(obj)
    reg.end_mgmt()
    print(f"generated {cfg.n} libraries x {cfg.f_per_object} functions into {args.out}")


def cmd_bench(args):
    cfg = bench.BenchConfig(trials=args.trials, warmups=args.warmups, seed=args.seed, strategy=Strategy(args.strategy))
    grid = bench.parse_grid(args.grid)

    def progress(row):
        mean = "-" if row.mean_s is None else f"{row.mean_s * 1e3:.3f} ms"
        print(f"{row.mode:6} n={row.n:<5} f={row.f_per_object:<5} mean={mean:>12} probes={row.probes}", file=sys.stderr)

    result = bench.run_bench(cfg, grid, timing=not args.no_timing, progress=progress)
    Path(args.out).write_text(result.to_csv())
    for (n, f), s in sorted(result.speedups().items()):
        print(f"n={n} f={f}: replay speedup {s:.2f}x")
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stablelink", description="Stable linking toolkit")
    parser.add_argument("-r", "--registry", help=f"registry root (default: ${ENV_REGISTRY})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func, parser=p)
        return p

    strategies = [s.value for s in Strategy]

    p = add("init", cmd_init, "create an empty registry")
    p.add_argument("dir")
    add("begin-mgmt", cmd_begin_mgmt, "open management time")
    p = add("add", cmd_add, "add or replace objects (management time only)")
    p.add_argument("files", nargs="+", metavar="file.sof")
    p = add("end-mgmt", cmd_end_mgmt, "close management time and materialize tables")
    p.add_argument("--strategy", choices=strategies, default="HASHED")
    p = add("status", cmd_status, "show mode, epoch and tables")
    p.add_argument("--json", action="store_true")

    p = add("run", cmd_run, "load an executable into a simulated address space")
    p.add_argument("exe")
    p.add_argument("--seed", type=int)
    p.add_argument("--trace", action="store_true", help="print one line per applied relocation")
    p.add_argument("--normalized", action="store_true", help="print the base-independent image")
    p.add_argument("--strategy", choices=strategies, default="HASHED")

    p = add("materialize-dump", cmd_materialize_dump, "print an executable's relocation table")
    p.add_argument("exe")
    p.add_argument("--strategy", choices=strategies, default="HASHED")

    p = add("export", cmd_export, "export a relocation table")
    p.add_argument("exe")
    p.add_argument("--format", choices=[f.value for f in inspector.ExportFormat], required=True)
    p.add_argument("--out", required=True)

    p = add("abi", cmd_abi, "print a library's ABI table (registry name or .sof path)")
    p.add_argument("lib")

    p = add("check-abi", cmd_check_abi, "list bindings a new library version would break")
    p.add_argument("exe")
    p.add_argument("--old", required=True, help="library name as bound in the table")
    p.add_argument("--new", required=True, help="path to the new version's .sof")

    p = add("audit-cve", cmd_audit_cve, "list executables binding a symbol to a library")
    p.add_argument("--lib", required=True)
    p.add_argument("--symbol", required=True)

    p = add("patch", cmd_patch, "rebind selected relocations to another provider")
    p.add_argument("exe")
    p.add_argument("--symbol")
    p.add_argument("--requires", help="only items required by this object")
    p.add_argument("--provider")
    p.add_argument("--clear", action="store_true", help="drop all recorded patches")

    p = add("gen-bench", cmd_gen_bench, "write a synthetic benchmark registry")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--f", type=int, help="functions per library")
    p.add_argument("--total-functions", type=int, help="functions across all libraries")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "time online resolution against table replay")
    p.add_argument("--grid", required=True, help="N1,N2xF1,F2 or N:F;N:F")
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--warmups", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", choices=strategies, default="HASHED")
    p.add_argument("--no-timing", action="store_true", help="probe counts only")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StableLinkError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
