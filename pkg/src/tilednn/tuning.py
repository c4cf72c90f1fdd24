"""Runtime selection of GEMM blocking parameters, plus measured autotuning.

The static defaults (mc=560, nc=3072, kc=368 at 8x8 register blocking) are
tuned offline for large squarish products on the reference hierarchy
(64 KiB L1, 2 MiB L2, no L3).  Lowered convolutions rarely look like that:
m and k are the channel/filter dims and stay small while n grows with
batch * output pixels, so a fixed blocking leaves most of L2 idle.
select_cache_params rescales and clamps the blocking per problem shape and
decides which loop order to run, keeping whichever packed block can
actually fill the L2 budget resident there.

autotune measures a candidate grid on the host and emits per-shape records
that select_cache_params accepts as overrides.  The record table is plain
whitespace-delimited text, one record per shape:

    m n k mc nc kc mr nr variant

with '#' comment lines ignored.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .gemm import (DEFAULT_HIERARCHY, DEFAULT_PARAMS, EP_NONE, CacheHierarchy,
                   GemmCacheParams, LoopVariant, gemm)

# Tall-skinny regime where parking the packed B block in L2 pays off:
# small m (the whole A side fits a few panels) and n far wider than m.
B2A1_MAX_M = 256
B2A1_N_FACTOR = 64

# Budget model is sized in FP32 elements, matching the operand data.
_FP32_SIZE = 4
_L2_FILL_TARGET = 0.25
_L2_FILL_CAP = 0.5


def _floor_mult(x: int, step: int) -> int:
    return max(step, (x // step) * step)


def _round_up(x: int, step: int) -> int:
    return -(-x // step) * step


def select_cache_params(m: int, n: int, k: int,
                        hw: CacheHierarchy = DEFAULT_HIERARCHY,
                        table: dict | None = None
                        ) -> tuple[GemmCacheParams, LoopVariant]:
    """Pick (blocking, loop variant) for one GEMM shape.  Pure function.

    The blocking never dead-blocks: kc <= k and mc <= the mr-rounded m.
    When the shape permits, the L2-resident packed block is grown to cover
    at least a quarter of L2.  An autotuned `table` (from load_param_table)
    short-circuits the heuristic for exact shape matches.
    """
    if m < 1 or n < 1 or k < 1:
        raise ValueError(f"GEMM dims must be positive, got {(m, n, k)}")
    if table is not None:
        hit = table.get((m, n, k))
        if hit is not None:
            return hit

    base = DEFAULT_PARAMS
    mr, nr = base.mr, base.nr
    l1_scale = hw.l1_bytes / DEFAULT_HIERARCHY.l1_bytes
    l2_scale = hw.l2_bytes / DEFAULT_HIERARCHY.l2_bytes

    kc = _floor_mult(int(base.kc * l1_scale), 8)
    kc = min(kc, k)
    m_round = _round_up(m, mr)

    variant = (LoopVariant.B2A1
               if m <= B2A1_MAX_M and n >= B2A1_N_FACTOR * m
               else LoopVariant.A2B1)

    if variant is LoopVariant.A2B1:
        mc = min(_floor_mult(int(base.mc * l2_scale), mr), m_round)
        # Grow the L2-resident A block when a clamped kc left it too small.
        if mc * kc * _FP32_SIZE < _L2_FILL_TARGET * hw.l2_bytes:
            want = int(_L2_FILL_CAP * hw.l2_bytes / (_FP32_SIZE * kc))
            mc = min(_floor_mult(want, mr), m_round)
        nc = _floor_mult(int(base.nc * l2_scale), nr)
    else:
        mc = min(_floor_mult(int(base.mc * l2_scale), mr), m_round)
        want = int(_L2_FILL_CAP * hw.l2_bytes / (_FP32_SIZE * kc))
        nc = _floor_mult(want, nr)
    return GemmCacheParams(mc=mc, nc=nc, kc=kc, mr=mr, nr=nr), variant


# ---------------------------------------------------------------------------
# Measured autotuning
# ---------------------------------------------------------------------------

def default_candidate_grid(m: int, n: int, k: int,
                           hw: CacheHierarchy = DEFAULT_HIERARCHY
                           ) -> list[tuple[GemmCacheParams, LoopVariant]]:
    """A small grid around the heuristic pick plus both loop orders."""
    picked, _ = select_cache_params(m, n, k, hw)
    grid = []
    seen = set()
    kc_opts = sorted({picked.kc, min(k, max(8, picked.kc // 2)),
                      min(k, picked.kc * 2)})
    mc_opts = sorted({picked.mc, max(picked.mr, picked.mc // 2)})
    for kc in kc_opts:
        kc = _floor_mult(kc, 8) if kc >= 8 else kc
        for mc in mc_opts:
            for variant in (LoopVariant.A2B1, LoopVariant.B2A1):
                key = (mc, picked.nc, kc, variant)
                if key in seen:
                    continue
                seen.add(key)
                grid.append((GemmCacheParams(mc, picked.nc, kc,
                                             picked.mr, picked.nr), variant))
    return grid


def autotune(m: int, n: int, k: int,
             hw: CacheHierarchy = DEFAULT_HIERARCHY,
             grid: list[tuple[GemmCacheParams, LoopVariant]] | None = None,
             threads: int = 1, reps: int = 3, warmup: int = 1,
             seed: int = 0):
    """Benchmark each candidate and return the winner by median throughput.

    Returns (params, variant, rate) with rate in flop/s; also returns the
    full measurement list as the fourth element so callers can persist a
    record table.
    """
    if grid is None:
        grid = default_candidate_grid(m, n, k, hw)
    if not grid:
        raise ValueError("candidate grid is empty")
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, size=(m, k)).astype(np.float32)
    b = rng.uniform(-1, 1, size=(k, n)).astype(np.float32)
    c = np.zeros((m, n), dtype=np.float32)
    flops = 2.0 * m * n * k
    results = []
    for params, variant in grid:
        for _ in range(warmup):
            c[:] = 0
            gemm(a, b, c, params, variant, EP_NONE, threads, hw=hw)
        times = []
        for _ in range(max(1, reps)):
            c[:] = 0
            t0 = time.perf_counter()
            gemm(a, b, c, params, variant, EP_NONE, threads, hw=hw)
            times.append(time.perf_counter() - t0)
        rate = flops / float(np.median(times))
        results.append((params, variant, rate))
    best = max(results, key=lambda r: r[2])
    return best[0], best[1], best[2], results


# ---------------------------------------------------------------------------
# Per-shape parameter table (whitespace-delimited text)
# ---------------------------------------------------------------------------

def save_param_table(records: dict, path):
    """Write {(m,n,k): (params, variant)} records; field order as documented."""
    lines = ["# m n k mc nc kc mr nr variant"]
    for (m, n, k) in sorted(records):
        params, variant = records[(m, n, k)]
        lines.append(f"{m} {n} {k} {params.mc} {params.nc} {params.kc} "
                     f"{params.mr} {params.nr} {variant.value}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_param_table(path) -> dict:
    """Parse a parameter table back into {(m,n,k): (params, variant)}."""
    table = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 9:
            raise ValueError(f"{path}:{lineno}: expected 9 fields, got {len(fields)}")
        m, n, k, mc, nc, kc, mr, nr = (int(x) for x in fields[:8])
        variant = LoopVariant(fields[8])
        table[(m, n, k)] = (GemmCacheParams(mc, nc, kc, mr, nr), variant)
    return table


# ---------------------------------------------------------------------------
# Host cache discovery (best effort)
# ---------------------------------------------------------------------------

def detect_cache_hierarchy() -> CacheHierarchy:
    """Read the host cache sizes from sysfs; fall back to the reference."""
    base = Path("/sys/devices/system/cpu/cpu0/cache")
    sizes = {}
    try:
        for index in sorted(base.glob("index*")):
            level = int((index / "level").read_text())
            ctype = (index / "type").read_text().strip()
            if ctype == "Instruction":
                continue
            text = (index / "size").read_text().strip()
            mult = 1024 if text.endswith("K") else (1024 * 1024 if text.endswith("M") else 1)
            sizes[level] = int(text.rstrip("KM")) * mult
    except (OSError, ValueError):
        return DEFAULT_HIERARCHY
    if 1 not in sizes or 2 not in sizes:
        return DEFAULT_HIERARCHY
    try:
        return CacheHierarchy(l1_bytes=sizes[1], l2_bytes=sizes[2],
                              l3_bytes=sizes.get(3, 0))
    except ValueError:
        return DEFAULT_HIERARCHY
