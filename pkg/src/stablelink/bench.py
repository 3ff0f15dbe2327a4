"""Synthetic startup microbenchmark: n libraries times f functions each.

The executable needs every library and carries one DIRECT relocation per
generated function, so a grid point performs r = n * f symbol relocations.
ONLINE times resolving them by search; REPLAY times deserializing the
materialized table and applying it.  Probe counts come from the resolver's
instrumentation and are machine independent.
"""

from __future__ import annotations

import csv
import io
import math
import random
import statistics
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable

from .executor import assign_bases, dynamic_load, normalize, replay
from .resolver import Strategy, compute_load_order, count_lookup_cost, materialize, relocation_workload
from .sof import PAGE_SIZE, WORD_SIZE, Kind, RelocInstruction, RelocType, SharedObject, SymbolDef
from .table import parse_table, serialize_table

EXECUTABLE = "bench"
CSV_COLUMNS = ("mode", "n", "f_per_object", "mean_s", "p95_lo", "p95_hi", "probes")


@dataclass(frozen=True)
class BenchConfig:
    n: int = 1
    f_per_object: int = 1
    trials: int = 10
    warmups: int = 5
    seed: int = 0
    strategy: Strategy = Strategy.HASHED

    def __post_init__(self):
        if self.n < 1 or self.f_per_object < 1 or self.trials < 1 or self.warmups < 0:
            raise ValueError(f"invalid benchmark configuration {self}")

    @classmethod
    def from_total(cls, n: int, total_functions: int, **kw) -> "BenchConfig":
        """Spread ``total_functions`` evenly over ``n`` objects (floor division)."""
        if total_functions < n:
            raise ValueError("total_functions must be at least n")
        return cls(n=n, f_per_object=total_functions // n, **kw)


def _page_round(size: int) -> int:
    return max(PAGE_SIZE, -(-size // PAGE_SIZE) * PAGE_SIZE)


def generate_synthetic(cfg: BenchConfig) -> dict[str, SharedObject]:
    """Executable first, then ``lib0`` .. ``lib{n-1}``; deterministic in ``cfg.seed``."""
    rng = random.Random(cfg.seed)
    libs = []
    for i in range(cfg.n):
        exports = []
        cursor = 0
        for j in range(cfg.f_per_object):
            size = rng.randrange(16, 129, 16)
            cursor += rng.randrange(0, 3) * 16
            exports.append(SymbolDef(f"fn_{i}_{j}", cursor, size))
            cursor += size
        libs.append(SharedObject(f"lib{i}", Kind.LIBRARY, _page_round(cursor), exports=tuple(exports)))

    got = PAGE_SIZE
    relocs = [
        RelocInstruction(RelocType.DIRECT, got + WORD_SIZE * k, 0, f"fn_{i}_{j}")
        for k, (i, j) in enumerate((i, j) for i in range(cfg.n) for j in range(cfg.f_per_object))
    ]
    exe = SharedObject(
        EXECUTABLE, Kind.EXECUTABLE, _page_round(got + WORD_SIZE * len(relocs)),
        needed=tuple(lib.name for lib in libs),
        exports=(SymbolDef("main", 0, 64),),
        relocs=tuple(relocs),
    )
    objects = {exe.name: exe}
    objects.update((lib.name, lib) for lib in libs)
    return objects


def p95_interval(samples: list[float]) -> tuple[float, float]:
    """Two-sided 95% Student-t confidence interval for the mean."""
    mean = statistics.fmean(samples)
    if len(samples) < 2:
        return mean, mean
    from scipy.stats import t

    half = t.ppf(0.975, len(samples) - 1) * statistics.stdev(samples) / math.sqrt(len(samples))
    return mean - half, mean + half


def time_trials(fn: Callable[[], object], warmups: int, trials: int) -> list[float]:
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(trials):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return samples


@dataclass
class BenchRow:
    mode: str
    n: int
    f_per_object: int
    mean_s: float | None
    p95_lo: float | None
    p95_hi: float | None
    probes: int


@dataclass
class BenchResult:
    rows: list[BenchRow]

    def row(self, mode: str, n: int, f: int) -> BenchRow:
        for r in self.rows:
            if (r.mode, r.n, r.f_per_object) == (mode, n, f):
                return r
        raise KeyError((mode, n, f))

    def speedups(self) -> dict[tuple[int, int], float]:
        out = {}
        for r in self.rows:
            if r.mode == "ONLINE" and r.mean_s:
                rep = self.row("REPLAY", r.n, r.f_per_object)
                if rep.mean_s:
                    out[(r.n, r.f_per_object)] = r.mean_s / rep.mean_s
        return out

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        fmt = lambda v: "" if v is None else f"{v:.9g}"
        for r in self.rows:
            writer.writerow([r.mode, r.n, r.f_per_object, fmt(r.mean_s), fmt(r.p95_lo), fmt(r.p95_hi), r.probes])
        return out.getvalue()


def run_point(cfg: BenchConfig, timing: bool = True) -> list[BenchRow]:
    objects = generate_synthetic(cfg)
    table = materialize(objects, EXECUTABLE, 1, cfg.strategy)
    rtab = serialize_table(table)
    order = compute_load_order(objects, EXECUTABLE)
    probes = count_lookup_cost(order, cfg.strategy, relocation_workload(order)).probes

    # correctness under load: both paths must produce the same image
    space = assign_bases(table.load_set, cfg.seed)
    if normalize(replay(parse_table(rtab), space)) != normalize(dynamic_load(objects, EXECUTABLE, space, cfg.strategy)):
        raise AssertionError(f"replay and online images diverge at n={cfg.n}, f={cfg.f_per_object}")

    def online():
        dynamic_load(objects, EXECUTABLE, assign_bases(table.load_set, cfg.seed), cfg.strategy)

    def replayed():
        loaded = parse_table(rtab)
        replay(loaded, assign_bases(loaded.load_set, cfg.seed))

    rows = []
    for mode, fn, mode_probes in (("ONLINE", online, probes), ("REPLAY", replayed, 0)):
        if timing:
            samples = time_trials(fn, cfg.warmups, cfg.trials)
            lo, hi = p95_interval(samples)
            rows.append(BenchRow(mode, cfg.n, cfg.f_per_object, statistics.fmean(samples), lo, hi, mode_probes))
        else:
            rows.append(BenchRow(mode, cfg.n, cfg.f_per_object, None, None, None, mode_probes))
    return rows


def run_bench(cfg: BenchConfig, grid: Iterable[tuple[int, int]], timing: bool = True,
              progress: Callable[[BenchRow], None] | None = None) -> BenchResult:
    grid = list(grid)
    if not grid:
        raise ValueError("grid must be non-empty")
    rows = []
    for n, f in grid:
        for row in run_point(replace(cfg, n=n, f_per_object=f), timing):
            rows.append(row)
            if progress is not None:
                progress(row)
    return BenchResult(rows)


def parse_grid(spec: str) -> list[tuple[int, int]]:
    """``"1,10x1,100"`` (cartesian n x f) or ``"10:10;10:1000"`` (explicit points)."""
    spec = spec.strip()
    try:
        if ":" in spec:
            points = []
            for part in spec.split(";"):
                n, f = part.split(":")
                points.append((int(n), int(f)))
            return points
        ns, fs = spec.split("x")
        return [(int(n), int(f)) for n in ns.split(",") for f in fs.split(",")]
    except ValueError:
        raise ValueError(f"bad grid spec {spec!r}; use N1,N2xF1,F2 or N:F;N:F") from None
