"""Layer-graph model: text format, fusion planning, weights, forward pass.

Model files are line-oriented: one `<id> <kind> key=value ...` record per
layer, '#' starts a comment.  Kinds and their keys:

    in  input     shape=HxWxC [batch=N] [seed=S] [weights=PATH]
    c1  conv      in=ID filters=N kernel=K|KHxKW [stride=S] [pad=P]
                  [algo=auto|im2col|convgemm] [params=mc,nc,kc,mr,nr]
                  [variant=a2b1|b2a1]
    b1  batchnorm in=ID [eps=E]
    r1  relu      in=ID
    p1  pool      in=ID mode=max|avg kernel=K [stride=S] [pad=P]
    a1  add       in=ID1,ID2
    fc  dense     in=ID units=N

Records must reference only earlier ids (the file order is the topological
order), the graph has a single input and a single output, and shapes are
propagated and checked at parse time.  Cycles are unrepresentable by
construction; a forward reference is reported as a dangling id.

Weights live in a raw little-endian float32 blob plus a JSON sidecar
manifest mapping `layer.tensor` names to (offset, count, shape); absent a
weight file they are drawn per layer from a seeded uniform [-0.1, 0.1].

The executor folds every batchnorm at load, resolves the fusion plan and
the per-conv algorithm/blocking choices once, preallocates every
intermediate tensor for a fixed batch, and attributes wall time per layer
kind.  Work absorbed into a conv epilogue is accounted to Conv2D.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .conv import ConvAlgorithm, choose_algorithm, conv_gemm, conv_im2col_gemm
from .gemm import (DEFAULT_HIERARCHY, DEFAULT_PARAMS, EP_NONE, CacheHierarchy,
                   Epilogue, GemmCacheParams, LoopVariant)
from .layers import (BatchNormParams, FoldedBatchNorm, PoolDescriptor,
                     batchnorm_inference, dense, fold_batchnorm, pool, relu,
                     residual_add)
from .tensor import (ConvDescriptor, Layout, Tensor, conv_output_geometry,
                     convert_layout, make_tensor)
from .tuning import select_cache_params

KINDS = ("input", "conv", "batchnorm", "relu", "pool", "add", "dense")

#: Report row order; fused batchnorm/ReLU work lands in the Conv2D row.
KIND_LABELS = {"conv": "Conv2D", "batchnorm": "BatchNorm", "relu": "ReLU",
               "pool": "Pooling", "add": "Add", "dense": "Dense"}
LABEL_ORDER = ("Conv2D", "BatchNorm", "ReLU", "Pooling", "Add", "Dense")


class ModelParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line else ""
        super().__init__(prefix + message)
        self.line = line


@dataclass
class LayerSpec:
    id: str
    kind: str
    inputs: list[str]
    attrs: dict
    line: int = 0
    out_hwc: tuple[int, int, int] | None = None
    # Fusion annotations resolved by plan_fusion.
    fused_bn: str | None = None
    fused_relu: str | None = None
    fused_into: str | None = None


@dataclass
class ModelSpec:
    layers: list[LayerSpec]
    input_id: str
    output_id: str
    default_batch: int = 1
    weight_seed: int = 1234
    weight_file: str | None = None

    @property
    def by_id(self) -> dict[str, LayerSpec]:
        return {l.id: l for l in self.layers}

    def consumers(self) -> dict[str, list[str]]:
        uses: dict[str, list[str]] = {l.id: [] for l in self.layers}
        for l in self.layers:
            for src in l.inputs:
                uses[src].append(l.id)
        return uses


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _parse_pair(text: str, line: int, what: str) -> tuple[int, int]:
    try:
        if "x" in text:
            a, b = text.split("x", 1)
            return int(a), int(b)
        v = int(text)
        return v, v
    except ValueError:
        raise ModelParseError(f"bad {what} value {text!r}", line) from None


def _parse_record(raw: str, line: int) -> LayerSpec | None:
    body = raw.split("#", 1)[0].strip()
    if not body:
        return None
    fields = body.split()
    if len(fields) < 2:
        raise ModelParseError(f"expected '<id> <kind> key=value...', got {raw!r}",
                              line)
    lid, kind = fields[0], fields[1]
    if kind not in KINDS:
        raise ModelParseError(f"unknown layer kind {kind!r}", line)
    attrs = {}
    for item in fields[2:]:
        if "=" not in item:
            raise ModelParseError(f"expected key=value, got {item!r}", line)
        key, value = item.split("=", 1)
        attrs[key] = value
    inputs = attrs.pop("in", "")
    inputs = [s for s in inputs.split(",") if s] if inputs else []
    return LayerSpec(lid, kind, inputs, attrs, line)


def _conv_descriptor(layer: LayerSpec, cin: int) -> ConvDescriptor:
    a = layer.attrs
    if "filters" not in a:
        raise ModelParseError("conv requires filters=", layer.line)
    kernel = _parse_pair(a.get("kernel", "1"), layer.line, "kernel")
    stride = _parse_pair(a.get("stride", "1"), layer.line, "stride")
    pad = _parse_pair(a.get("pad", "0"), layer.line, "pad")
    return ConvDescriptor(kernel, stride, pad, cin, int(a["filters"]))


def _pool_descriptor(layer: LayerSpec) -> PoolDescriptor:
    a = layer.attrs
    if "mode" not in a or "kernel" not in a:
        raise ModelParseError("pool requires mode= and kernel=", layer.line)
    kernel = _parse_pair(a["kernel"], layer.line, "kernel")
    stride = _parse_pair(a.get("stride", a["kernel"]), layer.line, "stride")
    pad = _parse_pair(a.get("pad", "0"), layer.line, "pad")
    return PoolDescriptor(a["mode"], kernel, stride, pad)


def parse_model(text: str) -> ModelSpec:
    """Parse and validate a model file; raises ModelParseError with the
    offending line number on the first problem found."""
    layers: list[LayerSpec] = []
    seen: dict[str, LayerSpec] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        rec = _parse_record(raw, lineno)
        if rec is None:
            continue
        if rec.id in seen:
            raise ModelParseError(f"duplicate layer id {rec.id!r}", lineno)
        for src in rec.inputs:
            if src not in seen:
                raise ModelParseError(
                    f"layer {rec.id!r} references undefined id {src!r}", lineno)
        layers.append(rec)
        seen[rec.id] = rec
    if not layers:
        raise ModelParseError("empty model")

    inputs = [l for l in layers if l.kind == "input"]
    if len(inputs) != 1 or layers[0].kind != "input":
        raise ModelParseError("model must start with exactly one input layer",
                              layers[0].line)
    inp = inputs[0]
    if "shape" not in inp.attrs:
        raise ModelParseError("input requires shape=HxWxC", inp.line)
    try:
        h, w, c = (int(x) for x in inp.attrs["shape"].split("x"))
    except ValueError:
        raise ModelParseError(f"bad shape {inp.attrs['shape']!r}",
                              inp.line) from None
    inp.out_hwc = (h, w, c)

    # Shape propagation, kind-specific validation.
    for layer in layers[1:]:
        want = 2 if layer.kind == "add" else 1
        if len(layer.inputs) != want:
            raise ModelParseError(
                f"{layer.kind} takes {want} input(s), got {len(layer.inputs)}",
                layer.line)
        src_hwc = [seen[s].out_hwc for s in layer.inputs]
        h, w, c = src_hwc[0]
        if layer.kind == "conv":
            d = _conv_descriptor(layer, c)
            try:
                ho, wo = d.output_spatial(h, w)
            except ValueError as exc:
                raise ModelParseError(str(exc), layer.line) from None
            layer.out_hwc = (ho, wo, d.cout)
        elif layer.kind == "pool":
            d = _pool_descriptor(layer)
            try:
                ho, wo = d.output_spatial(h, w)
            except ValueError as exc:
                raise ModelParseError(str(exc), layer.line) from None
            layer.out_hwc = (ho, wo, c)
        elif layer.kind == "add":
            if src_hwc[0] != src_hwc[1]:
                raise ModelParseError(
                    f"add operands disagree: {src_hwc[0]} vs {src_hwc[1]}",
                    layer.line)
            layer.out_hwc = src_hwc[0]
        elif layer.kind == "dense":
            if "units" not in layer.attrs:
                raise ModelParseError("dense requires units=", layer.line)
            layer.out_hwc = (1, 1, int(layer.attrs["units"]))
        else:  # batchnorm / relu
            layer.out_hwc = src_hwc[0]

    used = {s for l in layers for s in l.inputs}
    sinks = [l.id for l in layers if l.id not in used]
    if len(sinks) != 1:
        raise ModelParseError(f"model must have one output, found {sinks}")

    return ModelSpec(
        layers=layers,
        input_id=inp.id,
        output_id=sinks[0],
        default_batch=int(inp.attrs.get("batch", 1)),
        weight_seed=int(inp.attrs.get("seed", 1234)),
        weight_file=inp.attrs.get("weights"),
    )


def load_model(path) -> ModelSpec:
    return parse_model(Path(path).read_text())


# ---------------------------------------------------------------------------
# Fusion planning
# ---------------------------------------------------------------------------

def plan_fusion(spec: ModelSpec) -> ModelSpec:
    """Annotate conv->bn[->relu] and conv->relu chains for epilogue fusion.

    A batchnorm fuses into the preceding conv when it is the sole consumer
    of the conv output; a ReLU extends the fusion only when it is in turn
    the sole consumer of the intermediate.  ReLU after an add never fuses
    (the add needs the standalone tensor).  Re-running replans from
    scratch, so the operation is idempotent.
    """
    layers = [replace(l, fused_bn=None, fused_relu=None, fused_into=None)
              for l in spec.layers]
    by_id = {l.id: l for l in layers}
    uses: dict[str, list[str]] = {l.id: [] for l in layers}
    for l in layers:
        for src in l.inputs:
            uses[src].append(l.id)

    for conv in layers:
        if conv.kind != "conv":
            continue
        head = conv
        consumers = uses[head.id]
        if len(consumers) != 1:
            continue
        nxt = by_id[consumers[0]]
        if nxt.kind == "batchnorm":
            conv.fused_bn = nxt.id
            nxt.fused_into = conv.id
            head = nxt
            consumers = uses[head.id]
            if len(consumers) != 1:
                continue
            nxt = by_id[consumers[0]]
        if nxt.kind == "relu":
            conv.fused_relu = nxt.id
            nxt.fused_into = conv.id

    return replace(spec, layers=layers)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

def init_random_weights(spec: ModelSpec, seed: int | None = None) -> dict:
    """Seeded random parameters: weights uniform [-0.1, 0.1], batchnorm
    statistics near identity (positive variance)."""
    seed = spec.weight_seed if seed is None else seed
    weights: dict[str, np.ndarray] = {}
    for idx, layer in enumerate(spec.layers):
        rng = np.random.default_rng([seed, idx])
        if layer.kind == "conv":
            h, w, cin = spec.by_id[layer.inputs[0]].out_hwc
            d = _conv_descriptor(layer, cin)
            kh, kw = d.kernel
            weights[f"{layer.id}.w"] = rng.uniform(
                -0.1, 0.1, size=(d.cout, kh, kw, cin)).astype(np.float32)
        elif layer.kind == "batchnorm":
            c = layer.out_hwc[2]
            weights[f"{layer.id}.gamma"] = rng.uniform(0.9, 1.1, c).astype(np.float32)
            weights[f"{layer.id}.beta"] = rng.uniform(-0.1, 0.1, c).astype(np.float32)
            weights[f"{layer.id}.mean"] = rng.uniform(-0.1, 0.1, c).astype(np.float32)
            weights[f"{layer.id}.var"] = rng.uniform(0.8, 1.2, c).astype(np.float32)
        elif layer.kind == "dense":
            h, w, c = spec.by_id[layer.inputs[0]].out_hwc
            units = int(layer.attrs["units"])
            weights[f"{layer.id}.w"] = rng.uniform(
                -0.1, 0.1, size=(units, h * w * c)).astype(np.float32)
            weights[f"{layer.id}.b"] = rng.uniform(-0.1, 0.1, units).astype(np.float32)
    return weights


def save_weights(weights: dict, blob_path, manifest_path=None):
    """Raw little-endian float32 blob plus JSON sidecar manifest."""
    blob_path = Path(blob_path)
    manifest_path = Path(manifest_path) if manifest_path else blob_path.with_suffix(".json")
    entries = {}
    offset = 0
    with open(blob_path, "wb") as fh:
        for name in sorted(weights):
            arr = np.ascontiguousarray(weights[name], dtype="<f4")
            fh.write(arr.tobytes())
            entries[name] = {"offset": offset, "count": int(arr.size),
                             "shape": list(arr.shape)}
            offset += arr.nbytes
    manifest_path.write_text(json.dumps(
        {"dtype": "float32", "byteorder": "little", "entries": entries},
        indent=1, sort_keys=True))


def load_weights(blob_path, manifest_path=None) -> dict:
    blob_path = Path(blob_path)
    manifest_path = Path(manifest_path) if manifest_path else blob_path.with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    raw = blob_path.read_bytes()
    weights = {}
    for name, ent in manifest["entries"].items():
        arr = np.frombuffer(raw, dtype="<f4", count=ent["count"],
                            offset=ent["offset"])
        weights[name] = arr.reshape(ent["shape"]).astype(np.float32)
    return weights


# ---------------------------------------------------------------------------
# Timing report
# ---------------------------------------------------------------------------

@dataclass
class LayerTimingReport:
    """Per-layer-kind accumulated wall time for one forward pass."""

    kind_seconds: dict = field(default_factory=dict)
    total_seconds: float = 0.0
    batch: int = 0

    @property
    def attributed_seconds(self) -> float:
        return sum(self.kind_seconds.values())

    @property
    def images_per_s(self) -> float:
        return self.batch / self.total_seconds if self.total_seconds else 0.0

    def percentages(self) -> dict:
        denom = self.attributed_seconds
        if denom <= 0:
            return {k: 0.0 for k in self.kind_seconds}
        return {k: 100.0 * v / denom for k, v in self.kind_seconds.items()}

    def rows(self):
        """(kind, seconds, percent) in stable label order."""
        pct = self.percentages()
        return [(k, self.kind_seconds.get(k, 0.0), pct.get(k, 0.0))
                for k in LABEL_ORDER if k in self.kind_seconds]

    def to_csv(self) -> str:
        lines = ["kind,seconds,percent"]
        for kind, sec, pct in self.rows():
            lines.append(f"{kind},{sec:.6f},{pct:.2f}")
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "kinds": {k: {"seconds": s, "percent": round(p, 2)}
                      for k, s, p in self.rows()},
            "total_seconds": self.total_seconds,
            "batch": self.batch,
            "images_per_s": self.images_per_s,
        }


# ---------------------------------------------------------------------------
# Executor
# ---------------------------------------------------------------------------

@dataclass
class EngineConfig:
    threads: int = 1
    fusion: bool = True
    #: "auto" picks per layer, "im2col"/"convgemm" force one algorithm.
    algorithm: str = "auto"
    #: "dynamic" selects blocking per GEMM shape, "default" pins the static
    #: quintuple.
    cache_params: str = "dynamic"
    #: layer id -> {"algo": ..., "params": GemmCacheParams, "variant": ...}
    overrides: dict = field(default_factory=dict)
    forced_params: GemmCacheParams | None = None
    forced_variant: LoopVariant | None = None
    instrument: bool = True


class Engine:
    """Single-model inference context with preallocated intermediates.

    A context is single-flight: one forward() at a time.  Independent
    contexts share nothing mutable and may run concurrently.
    """

    def __init__(self, spec: ModelSpec, batch: int | None = None,
                 config: EngineConfig | None = None,
                 weights: dict | None = None,
                 hw: CacheHierarchy = DEFAULT_HIERARCHY):
        self.config = config or EngineConfig()
        self.batch = spec.default_batch if batch is None else batch
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        self.hw = hw
        self.spec = plan_fusion(spec) if self.config.fusion else replace(
            spec, layers=[replace(l, fused_bn=None, fused_relu=None,
                                  fused_into=None) for l in spec.layers])
        if weights is None:
            if spec.weight_file:
                weights = load_weights(spec.weight_file)
            else:
                weights = init_random_weights(spec)
        self.weights = weights
        self._build_plan()

    # -- plan -------------------------------------------------------------

    def _conv_plan(self, layer: LayerSpec, cin: int):
        cfg = self.config
        d = _conv_descriptor(layer, cin)
        h, w, _ = self.spec.by_id[layer.inputs[0]].out_hwc
        in_shape = (self.batch, h, w, cin)
        _, _, m, n, k = conv_output_geometry(d, in_shape)

        override = dict(cfg.overrides.get(layer.id, {}))
        algo_name = override.get("algo", layer.attrs.get("algo", "auto"))
        if cfg.algorithm != "auto" and "algo" not in override:
            algo_name = cfg.algorithm
        if algo_name in ("auto", None):
            algo = choose_algorithm(d, in_shape)
        else:
            algo = ConvAlgorithm(algo_name)

        params = override.get("params") or cfg.forced_params
        variant = override.get("variant") or cfg.forced_variant
        if params is None and "params" in layer.attrs:
            vals = [int(x) for x in layer.attrs["params"].split(",")]
            params = GemmCacheParams(*vals)
        if variant is None and "variant" in layer.attrs:
            variant = LoopVariant(layer.attrs["variant"])
        if params is None:
            if cfg.cache_params == "dynamic":
                params, sel_variant = select_cache_params(m, n, k, self.hw)
                variant = variant or sel_variant
            else:
                params = DEFAULT_PARAMS
                variant = variant or LoopVariant.A2B1
        variant = variant or LoopVariant.A2B1

        ep = EP_NONE
        if layer.fused_bn:
            fold = self._folded[layer.fused_bn]
            ep = Epilogue.batchnorm(fold.scale, fold.shift,
                                    relu=bool(layer.fused_relu))
        elif layer.fused_relu:
            ep = Epilogue.relu()
        return d, algo, params, variant, ep

    def _build_plan(self):
        spec = self.spec
        known = {l.id for l in spec.layers}
        for layer_id in self.config.overrides:
            if layer_id not in known:
                raise ValueError(f"override references unknown layer "
                                 f"{layer_id!r}")
        self._folded: dict[str, FoldedBatchNorm] = {}
        for layer in spec.layers:
            if layer.kind == "batchnorm":
                p = BatchNormParams(
                    self.weights[f"{layer.id}.gamma"],
                    self.weights[f"{layer.id}.beta"],
                    self.weights[f"{layer.id}.mean"],
                    self.weights[f"{layer.id}.var"],
                    eps=float(layer.attrs.get("eps", 1e-5)))
                self._folded[layer.id] = fold_batchnorm(p)

        self._steps = []
        self._buffers: dict[str, Tensor] = {}
        for layer in spec.layers:
            if layer.kind == "input" or layer.fused_into:
                continue
            h, w, c = layer.out_hwc
            self._buffers[layer.id] = make_tensor((self.batch, h, w, c))
            if layer.kind == "conv":
                cin = spec.by_id[layer.inputs[0]].out_hwc[2]
                self._steps.append((layer, self._conv_plan(layer, cin)))
            elif layer.kind == "pool":
                self._steps.append((layer, _pool_descriptor(layer)))
            else:
                self._steps.append((layer, None))

    # -- execution ----------------------------------------------------------

    def forward(self, x: Tensor) -> tuple[Tensor, LayerTimingReport]:
        spec = self.spec
        inp = spec.by_id[spec.input_id]
        if x.layout is not Layout.NHWC:
            x = convert_layout(x, Layout.NHWC)
        expect = (self.batch, *inp.out_hwc)
        if x.shape != expect:
            raise ValueError(f"input shape {x.shape}, model expects {expect}")
        cfg = self.config
        threads = cfg.threads
        values: dict[str, Tensor] = {spec.input_id: x}
        kind_seconds: dict[str, float] = {}
        wall0 = time.perf_counter()
        for layer, plan in self._steps:
            out = self._buffers[layer.id]
            src = values[layer.inputs[0]]
            t0 = time.perf_counter() if cfg.instrument else 0.0
            if layer.kind == "conv":
                d, algo, params, variant, ep = plan
                run = (conv_im2col_gemm if algo is ConvAlgorithm.IM2COL_GEMM
                       else conv_gemm)
                run(src, self.weights[f"{layer.id}.w"], d, params=params,
                    variant=variant, ep=ep, threads=threads, out=out,
                    hw=self.hw)
                # Layers that were absorbed into this epilogue still get
                # referenced by id downstream; alias them to the conv output.
                if layer.fused_bn:
                    values[layer.fused_bn] = out
                if layer.fused_relu:
                    values[layer.fused_relu] = out
            elif layer.kind == "batchnorm":
                batchnorm_inference(src, self._folded[layer.id],
                                    threads=threads, out=out)
            elif layer.kind == "relu":
                relu(src, threads=threads, out=out)
            elif layer.kind == "pool":
                pool(src, plan, threads=threads, out=out)
            elif layer.kind == "add":
                residual_add(src, values[layer.inputs[1]], threads=threads,
                             out=out)
            elif layer.kind == "dense":
                dense(src, self.weights[f"{layer.id}.w"],
                      self.weights[f"{layer.id}.b"], threads=threads, out=out)
            if cfg.instrument:
                label = KIND_LABELS[layer.kind]
                kind_seconds[label] = (kind_seconds.get(label, 0.0)
                                       + time.perf_counter() - t0)
            values[layer.id] = out
        total = time.perf_counter() - wall0
        report = LayerTimingReport(kind_seconds, total, self.batch)
        return values[spec.output_id], report


def forward(spec: ModelSpec, x: Tensor, config: EngineConfig | None = None,
            weights: dict | None = None) -> tuple[Tensor, LayerTimingReport]:
    """One-shot forward pass (builds a throwaway engine context)."""
    return Engine(spec, batch=x.shape[0], config=config,
                  weights=weights).forward(x)
