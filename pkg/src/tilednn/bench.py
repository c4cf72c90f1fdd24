"""Benchmark harness: variant ladder, batch sweeps, multi-instance runs.

The ladder reruns one model under four engine configurations that differ
only in what the engine is allowed to exploit:

    baseline   full im2col everywhere, static blocking, no fusion
    conv-opt   per-layer algorithm choice
    cache-opt  + per-shape blocking and loop-variant selection
    fuse       + batchnorm/ReLU fused into the conv epilogue

All steps compute the same numbers (checked as a soft warning here, and as
a hard equivalence in the test suite); only the time changes.

Multi-instance mode trades time-to-response for aggregate throughput: K
independent engine contexts run concurrently on disjoint batches, each
internally using its own thread count, optionally pinned to disjoint core
subsets when the platform exposes an affinity interface.  Performance
expectations are reported as warnings, never as failures: absolute rates
depend on the host.

Exit codes: 0 on success (soft-check warnings included), nonzero on
configuration or model errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .gemm import GemmCacheParams, LoopVariant
from .model import (Engine, EngineConfig, LayerTimingReport, ModelParseError,
                    ModelSpec, load_model)
from .tensor import make_tensor

LADDER_STEPS = ("baseline", "conv-opt", "cache-opt", "fuse")

_BUILTIN_MODELS = {"resnet-mini": "resnet_mini.txt",
                   "resnet50-v15": "resnet50_v15.txt"}

#: Instance throughputs further apart than this trigger a balance warning.
_BALANCE_TOLERANCE = 0.15


def builtin_model_path(name: str) -> Path | None:
    fname = _BUILTIN_MODELS.get(name)
    if fname is None:
        return None
    return Path(str(resources.files("tilednn") / "models" / fname))


def step_config(step: str, threads: int = 1, instrument: bool = True,
                overrides: dict | None = None,
                forced_params: GemmCacheParams | None = None,
                forced_variant: LoopVariant | None = None) -> EngineConfig:
    """Engine configuration for one ladder step."""
    if step not in LADDER_STEPS:
        raise ValueError(f"unknown ladder step {step!r}")
    return EngineConfig(
        threads=threads,
        fusion=(step == "fuse"),
        algorithm="im2col" if step == "baseline" else "auto",
        cache_params="default" if step in ("baseline", "conv-opt") else "dynamic",
        overrides=overrides or {},
        forced_params=forced_params,
        forced_variant=forced_variant,
        instrument=instrument,
    )


@dataclass
class RunConfig:
    """Everything one harness invocation needs."""

    model: str
    batch: int | None = None
    threads: int = 1
    instances: int = 1
    step: str = "fuse"
    reps: int = 3
    warmup: int = 1
    overrides: dict = field(default_factory=dict)
    params: GemmCacheParams | None = None
    variant: LoopVariant | None = None
    sweep: list[int] | None = None
    seed: int = 99
    pin: bool = True
    out: str | None = None
    fmt: str = "table"

    def __post_init__(self):
        if self.instances < 1:
            raise ValueError("instances must be >= 1")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        cores = os.cpu_count() or 1
        if self.instances * self.threads > cores:
            warn(f"{self.instances} instance(s) x {self.threads} thread(s) "
                 f"oversubscribe the {cores} available core(s)")


@dataclass
class BenchReport:
    """Latency/throughput summary of one measured configuration."""

    label: str
    step: str
    batch: int
    threads: int
    instances: int
    reps: int
    latency_median_s: float
    latency_min_s: float
    latency_max_s: float
    per_instance_images_per_s: list[float]
    max_latency_s: float
    timing: LayerTimingReport | None = None
    pinned: bool | None = None
    notes: dict = field(default_factory=dict)

    @property
    def images_per_s(self) -> float:
        """Aggregate throughput: the sum over instances."""
        return sum(self.per_instance_images_per_s)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "step": self.step,
            "batch": self.batch,
            "threads": self.threads,
            "instances": self.instances,
            "reps": self.reps,
            "latency_median_s": self.latency_median_s,
            "latency_min_s": self.latency_min_s,
            "latency_max_s": self.latency_max_s,
            "per_instance_images_per_s": self.per_instance_images_per_s,
            "max_latency_s": self.max_latency_s,
            "images_per_s": self.images_per_s,
            "pinned": self.pinned,
            "notes": self.notes,
            "timing": None if self.timing is None else {
                "kind_seconds": self.timing.kind_seconds,
                "total_seconds": self.timing.total_seconds,
                "batch": self.timing.batch,
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "BenchReport":
        timing = None
        if d.get("timing") is not None:
            t = d["timing"]
            timing = LayerTimingReport(dict(t["kind_seconds"]),
                                       t["total_seconds"], t["batch"])
        return BenchReport(
            label=d["label"], step=d["step"], batch=d["batch"],
            threads=d["threads"], instances=d["instances"], reps=d["reps"],
            latency_median_s=d["latency_median_s"],
            latency_min_s=d["latency_min_s"],
            latency_max_s=d["latency_max_s"],
            per_instance_images_per_s=list(d["per_instance_images_per_s"]),
            max_latency_s=d["max_latency_s"], timing=timing,
            pinned=d.get("pinned"), notes=dict(d.get("notes", {})))


def warn(message: str):
    print(f"warning: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------

def _input_for(spec: ModelSpec, batch: int, seed: int):
    h, w, c = spec.by_id[spec.input_id].out_hwc
    return make_tensor((batch, h, w, c), fill="random", seed=seed)


def _measure(engine: Engine, x, reps: int, warmup: int):
    """Warm up, then time `reps` forward passes.  Returns (latencies,
    median-rep timing report, final output tensor)."""
    for _ in range(warmup):
        engine.forward(x)
    runs = []
    out = None
    for _ in range(reps):
        t0 = time.perf_counter()
        out, report = engine.forward(x)
        runs.append((time.perf_counter() - t0, report))
    runs_sorted = sorted(runs, key=lambda r: r[0])
    median = runs_sorted[len(runs_sorted) // 2]
    return [r[0] for r in runs], median[1], out


def run_single(spec: ModelSpec, cfg: RunConfig, step: str | None = None,
               label: str | None = None, instrument: bool = True,
               collect_output: bool = False):
    """One engine, one configuration, reps timed batches."""
    step = step or cfg.step
    batch = cfg.batch or spec.default_batch
    config = step_config(step, cfg.threads, instrument, cfg.overrides,
                         cfg.params, cfg.variant)
    engine = Engine(spec, batch=batch, config=config)
    x = _input_for(spec, batch, cfg.seed)
    latencies, timing, out = _measure(engine, x, cfg.reps, cfg.warmup)
    med = float(np.median(latencies))
    report = BenchReport(
        label=label or step, step=step, batch=batch, threads=cfg.threads,
        instances=1, reps=cfg.reps,
        latency_median_s=med, latency_min_s=min(latencies),
        latency_max_s=max(latencies),
        per_instance_images_per_s=[batch / med],
        max_latency_s=med, timing=timing if instrument else None)
    if collect_output:
        return report, out
    return report


def run_ladder(spec: ModelSpec, cfg: RunConfig,
               steps: tuple = LADDER_STEPS) -> list[BenchReport]:
    """One report per ladder step, identical inputs throughout.

    The final tensors of all steps are compared; any pair further apart
    than 1e-4 relative Frobenius is reported as a warning (they should be
    numerically equivalent; only timing may differ)."""
    reports = []
    outputs = []
    for step in steps:
        report, out = run_single(spec, cfg, step=step, collect_output=True)
        reports.append(report)
        outputs.append(np.asarray(out.buffer, dtype=np.float64))
    ref = outputs[0]
    scale = np.linalg.norm(ref) or 1.0
    worst = 0.0
    for other in outputs[1:]:
        worst = max(worst, float(np.linalg.norm(other - ref) / scale))
    for report in reports:
        report.notes["ladder_max_rel_diff"] = worst
    if worst > 1e-4:
        warn(f"ladder steps disagree by {worst:.3e} relative (> 1e-4)")
    return reports


def run_batch_sweep(spec: ModelSpec, cfg: RunConfig,
                    batches: list[int]) -> list[BenchReport]:
    """Latency/throughput at each batch size; warns when total latency is
    not monotonically non-decreasing in t (a soft expectation)."""
    reports = []
    for t in batches:
        sub = RunConfig(model=cfg.model, batch=t, threads=cfg.threads,
                        step=cfg.step, reps=cfg.reps, warmup=cfg.warmup,
                        overrides=cfg.overrides, params=cfg.params,
                        variant=cfg.variant, seed=cfg.seed, pin=cfg.pin)
        reports.append(run_single(spec, sub, label=f"t={t}",
                                  instrument=False))
    lat = [r.latency_median_s for r in reports]
    if any(b < a * 0.95 for a, b in zip(lat, lat[1:])):
        warn("batch latency is not monotone in t on this host")
    return reports


def _pin_current_thread(cores) -> bool:
    try:
        os.sched_setaffinity(0, cores)
        return True
    except (AttributeError, OSError):
        return False


def _core_subsets(instances: int, threads: int):
    """Disjoint core groups when they fit, modulo wrap otherwise."""
    try:
        cores = sorted(os.sched_getaffinity(0))
    except AttributeError:
        return [None] * instances
    take = max(1, threads)
    subsets = []
    for i in range(instances):
        lo = (i * take) % len(cores)
        subset = [cores[(lo + j) % len(cores)] for j in range(take)]
        subsets.append(sorted(set(subset)))
    return subsets


def _instance_worker(idx: int, spec: ModelSpec, cfg: RunConfig, batch: int,
                     cores, barrier, queue):
    """One engine context in its own process: construct, warm up, wait for
    the whole team at the barrier, then time the measured batches."""
    try:
        pinned = _pin_current_thread(cores) if cores else False
        config = step_config(cfg.step, cfg.threads, instrument=False,
                             overrides=cfg.overrides,
                             forced_params=cfg.params,
                             forced_variant=cfg.variant)
        engine = Engine(spec, batch=batch, config=config)
        x = _input_for(spec, batch, cfg.seed + idx)
        for _ in range(cfg.warmup):
            engine.forward(x)
        barrier.wait(timeout=600)
        lats = []
        for _ in range(cfg.reps):
            t0 = time.perf_counter()
            engine.forward(x)
            lats.append(time.perf_counter() - t0)
        med = float(np.median(lats))
        queue.put((idx, {"median": med, "min": min(lats), "max": max(lats),
                         "throughput": batch / med, "pinned": pinned}))
    except BaseException as exc:  # surfaced to the parent, never swallowed
        try:
            barrier.abort()
        except Exception:
            pass
        queue.put((idx, {"error": f"{type(exc).__name__}: {exc}"}))


def run_multi_instance(spec: ModelSpec, cfg: RunConfig) -> BenchReport:
    """K concurrent engine contexts on disjoint batches.

    Each instance is a separate OS process with its own model replica
    (thread-hosted instances serialize on the interpreter lock and defeat
    the scheme).  Reports per-instance throughput, their sum as the
    aggregate, and the maximum per-instance batch latency.  Instances
    drifting more than 15% apart in throughput produce a warning (they are
    expected to be uniform).  Any instance failure aborts the whole run.
    """
    import multiprocessing as mp

    n = cfg.instances
    batch = cfg.batch or spec.default_batch
    subsets = _core_subsets(n, cfg.threads) if cfg.pin else [None] * n
    ctx = mp.get_context()
    queue = ctx.Queue()
    barrier = ctx.Barrier(n)
    procs = [ctx.Process(target=_instance_worker,
                         args=(i, spec, cfg, batch, subsets[i], barrier,
                               queue), daemon=True)
             for i in range(n)]
    for p in procs:
        p.start()
    results: list[dict | None] = [None] * n
    try:
        for _ in range(n):
            idx, payload = queue.get(timeout=600)
            results[idx] = payload
    finally:
        for p in procs:
            p.join(timeout=60)
            if p.is_alive():
                p.terminate()
    failures = [r["error"] for r in results if r and "error" in r]
    if failures or any(r is None for r in results):
        raise RuntimeError("instance run failed: "
                           + "; ".join(failures or ["missing result"]))

    rates = [r["throughput"] for r in results]
    if max(rates) > min(rates) * (1 + _BALANCE_TOLERANCE):
        warn(f"instance throughputs spread beyond {_BALANCE_TOLERANCE:.0%}: "
             + ", ".join(f"{r:.2f}" for r in rates))
    return BenchReport(
        label=f"{n}x{cfg.threads}t", step=cfg.step, batch=batch,
        threads=cfg.threads, instances=n, reps=cfg.reps,
        latency_median_s=float(np.median([r["median"] for r in results])),
        latency_min_s=min(r["min"] for r in results),
        latency_max_s=max(r["max"] for r in results),
        per_instance_images_per_s=rates,
        max_latency_s=max(r["median"] for r in results),
        pinned=all(r["pinned"] for r in results))


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

_CSV_HEADER = ("label,step,batch,threads,instances,reps,kind,seconds,percent,"
               "total_seconds,images_per_s,latency_median_s,max_latency_s,"
               "pinned")


def _csv_lines(reports: list[BenchReport]) -> list[str]:
    lines = [_CSV_HEADER]
    for r in reports:
        meta = (f"{r.label},{r.step},{r.batch},{r.threads},{r.instances},"
                f"{r.reps}")
        tail = (f"{r.latency_median_s:.6f},{r.max_latency_s:.6f},"
                f"{'' if r.pinned is None else str(r.pinned).lower()}")
        rows = r.timing.rows() if r.timing is not None else []
        if rows:
            total = r.timing.total_seconds
            for kind, sec, pct in rows:
                lines.append(f"{meta},{kind},{sec:.6f},{pct:.2f},"
                             f"{total:.6f},{r.images_per_s:.4f},{tail}")
        else:
            lines.append(f"{meta},total,{r.latency_median_s:.6f},100.00,"
                         f"{r.latency_median_s:.6f},{r.images_per_s:.4f},{tail}")
    return lines


def _table_lines(reports: list[BenchReport]) -> list[str]:
    lines = []
    header = (f"{'label':<14}{'step':<11}{'batch':>6}{'thr':>5}{'inst':>5}"
              f"{'img/s':>10}{'latency(s)':>12}{'max-lat(s)':>12}")
    lines.append(header)
    lines.append("-" * len(header))
    for r in reports:
        lines.append(f"{r.label:<14}{r.step:<11}{r.batch:>6}{r.threads:>5}"
                     f"{r.instances:>5}{r.images_per_s:>10.2f}"
                     f"{r.latency_median_s:>12.4f}{r.max_latency_s:>12.4f}")
        if r.timing is not None:
            for kind, sec, pct in r.timing.rows():
                lines.append(f"    {kind:<12}{sec:>10.4f} s {pct:>7.2f}%")
        if r.instances > 1:
            rates = ", ".join(f"{x:.2f}" for x in r.per_instance_images_per_s)
            lines.append(f"    per-instance img/s: {rates}")
    return lines


def emit_report(reports: list[BenchReport], fmt: str = "table",
                out: str | None = None) -> str:
    """Serialize reports; stable column order, percents to 2 decimals."""
    if fmt == "csv":
        text = "\n".join(_csv_lines(reports)) + "\n"
    elif fmt == "json":
        text = json.dumps({"reports": [r.to_dict() for r in reports]},
                          indent=1, sort_keys=True) + "\n"
    elif fmt == "table":
        text = "\n".join(_table_lines(reports)) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    return text


def reports_from_json(text: str) -> list[BenchReport]:
    doc = json.loads(text)
    return [BenchReport.from_dict(d) for d in doc["reports"]]


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _parse_args(argv):
    ap = argparse.ArgumentParser(
        prog="tilednn-bench",
        description="Benchmark the inference engine: ladder, sweeps, instances.")
    ap.add_argument("--model", required=True,
                    help="model file path, or builtin: "
                         + ", ".join(sorted(_BUILTIN_MODELS)))
    ap.add_argument("--batch", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--instances", type=int, default=1)
    ap.add_argument("--step", choices=LADDER_STEPS, default="fuse")
    ap.add_argument("--ladder", action="store_true",
                    help="run every step of the variant ladder")
    ap.add_argument("--sweep", default=None,
                    help="comma-separated batch sizes, e.g. 1,2,4,8")
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--warmup", type=int, default=1)
    ap.add_argument("--override", action="append", default=[],
                    metavar="LAYER=ALGO",
                    help="force a layer's algorithm (im2col|convgemm)")
    ap.add_argument("--params", default=None, metavar="mc,nc,kc,mr,nr",
                    help="pin the GEMM blocking for every conv")
    ap.add_argument("--variant", choices=[v.value for v in LoopVariant],
                    default=None)
    ap.add_argument("--seed", type=int, default=99)
    ap.add_argument("--no-pin", action="store_true",
                    help="skip core affinity in multi-instance mode")
    ap.add_argument("--out", default=None)
    ap.add_argument("--format", dest="fmt", choices=["csv", "json", "table"],
                    default="table")
    return ap.parse_args(argv)


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.override:
        if "=" not in item:
            raise ValueError(f"--override expects LAYER=ALGO, got {item!r}")
        layer, algo = item.split("=", 1)
        overrides[layer] = {"algo": algo}
    params = None
    if args.params:
        vals = [int(x) for x in args.params.split(",")]
        if len(vals) != 5:
            raise ValueError("--params expects mc,nc,kc,mr,nr")
        params = GemmCacheParams(*vals)
    sweep = None
    if args.sweep:
        sweep = [int(x) for x in args.sweep.split(",")]
    return RunConfig(
        model=args.model, batch=args.batch, threads=args.threads,
        instances=args.instances, step=args.step, reps=args.reps,
        warmup=args.warmup, overrides=overrides, params=params,
        variant=LoopVariant(args.variant) if args.variant else None,
        sweep=sweep, seed=args.seed, pin=not args.no_pin, out=args.out,
        fmt=args.fmt)


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        cfg = _run_config(args)
        path = builtin_model_path(cfg.model) or Path(cfg.model)
        if not path.exists():
            print(f"error: model {cfg.model!r} not found", file=sys.stderr)
            return 2
        spec = load_model(path)
        if cfg.sweep:
            reports = run_batch_sweep(spec, cfg, cfg.sweep)
        elif args.ladder:
            reports = run_ladder(spec, cfg)
        elif cfg.instances > 1:
            reports = [run_multi_instance(spec, cfg)]
        else:
            reports = [run_single(spec, cfg)]
        emit_report(reports, cfg.fmt, cfg.out)
    except (ModelParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
