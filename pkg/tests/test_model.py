import numpy as np
import pytest

from tilednn import (Engine, EngineConfig, Layout, ModelParseError, Tensor,
                     builtin_model_path, convert_layout, forward,
                     init_random_weights, load_model, load_weights,
                     make_tensor, parse_model, plan_fusion, save_weights)
from tilednn.model import LayerTimingReport
from oracles import ulp_distance

SINGLE_CONV = """
in input shape=4x4x3
c1 conv in=in filters=2 kernel=3 stride=1 pad=1
"""

CHAIN = """
in input shape=4x4x2
c1 conv in=in filters=2 kernel=1
b1 batchnorm in=c1
r1 relu in=b1
"""

BLOCKED = """
in input shape=4x4x2
c1 conv in=in filters=2 kernel=3 pad=1
b1 batchnorm in=c1
r1 relu in=b1
a1 add in=b1,r1
"""


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def test_parse_single_conv():
    spec = parse_model(SINGLE_CONV)
    assert [l.kind for l in spec.layers] == ["input", "conv"]
    assert spec.output_id == "c1"
    assert spec.layers[1].out_hwc == (4, 4, 2)


def test_parse_undefined_reference_names_id():
    with pytest.raises(ModelParseError, match="nosuch"):
        parse_model("in input shape=2x2x1\nc1 conv in=nosuch filters=1 kernel=1\n")


def test_parse_error_carries_line_number():
    try:
        parse_model("in input shape=2x2x1\n\nc1 conv in=in filters=1 kernel=9\n")
    except ModelParseError as exc:
        assert exc.line == 3
    else:
        pytest.fail("expected ModelParseError")


def test_parse_duplicate_id():
    with pytest.raises(ModelParseError, match="duplicate"):
        parse_model("in input shape=2x2x1\nin relu in=in\n")


def test_parse_unknown_kind():
    with pytest.raises(ModelParseError, match="unknown layer kind"):
        parse_model("in input shape=2x2x1\nx lstm in=in\n")


def test_parse_add_arity():
    with pytest.raises(ModelParseError, match="2 input"):
        parse_model("in input shape=2x2x1\na add in=in\n")


def test_parse_add_shape_mismatch():
    text = ("in input shape=4x4x2\n"
            "p pool in=in mode=max kernel=2 stride=2\n"
            "a add in=in,p\n")
    with pytest.raises(ModelParseError, match="disagree"):
        parse_model(text)


def test_parse_requires_single_sink():
    text = ("in input shape=2x2x1\n"
            "r1 relu in=in\n"
            "r2 relu in=in\n")
    with pytest.raises(ModelParseError, match="one output"):
        parse_model(text)


def test_parse_resnet_mini_shapes():
    spec = load_model(builtin_model_path("resnet-mini"))
    assert len(spec.layers) == 32
    by = spec.by_id
    # hand-propagated spot checks
    assert by["p0"].out_hwc == (32, 32, 16)
    assert by["r1"].out_hwc == (32, 32, 16)
    assert by["c2s"].out_hwc == (16, 16, 32)
    assert by["r2"].out_hwc == (16, 16, 32)
    assert by["r3"].out_hwc == (8, 8, 64)
    assert by["gap"].out_hwc == (1, 1, 64)
    assert by["fc"].out_hwc == (1, 1, 10)
    assert spec.default_batch == 8 and spec.weight_seed == 1234


def test_parse_resnet50_topology():
    spec = load_model(builtin_model_path("resnet50-v15"))
    kinds = {}
    for l in spec.layers:
        kinds[l.kind] = kinds.get(l.kind, 0) + 1
    assert kinds["conv"] == 53
    assert kinds["batchnorm"] == 53
    assert kinds["relu"] == 49
    assert kinds["pool"] == 2
    assert kinds["add"] == 16
    assert spec.by_id["gap"].out_hwc == (1, 1, 2048)
    assert spec.by_id["fc"].out_hwc == (1, 1, 1000)


# ---------------------------------------------------------------------------
# Fusion planning
# ---------------------------------------------------------------------------

def test_plan_fusion_chain():
    spec = plan_fusion(parse_model(CHAIN))
    conv = spec.by_id["c1"]
    assert conv.fused_bn == "b1" and conv.fused_relu == "r1"
    assert spec.by_id["b1"].fused_into == "c1"
    assert spec.by_id["r1"].fused_into == "c1"


def test_plan_fusion_multi_consumer_guard():
    # bn output feeds both the relu and an add: the relu must not fuse
    spec = plan_fusion(parse_model(BLOCKED))
    conv = spec.by_id["c1"]
    assert conv.fused_bn == "b1"
    assert conv.fused_relu is None
    assert spec.by_id["r1"].fused_into is None


def test_plan_fusion_idempotent():
    spec = plan_fusion(parse_model(CHAIN))
    again = plan_fusion(spec)
    assert [(l.fused_bn, l.fused_relu, l.fused_into) for l in spec.layers] == \
        [(l.fused_bn, l.fused_relu, l.fused_into) for l in again.layers]


def test_plan_fusion_resnet_mini_hand_count():
    spec = plan_fusion(load_model(builtin_model_path("resnet-mini")))
    fused_bn = [l.id for l in spec.layers if l.fused_bn]
    fused_relu = [l.id for l in spec.layers if l.fused_relu]
    # every conv absorbs its batchnorm; only pre-add chains keep the relu
    assert len(fused_bn) == 9
    assert sorted(fused_relu) == ["c0", "c1a", "c2a", "c3a"]


def test_plan_fusion_resnet50_counts():
    spec = plan_fusion(load_model(builtin_model_path("resnet50-v15")))
    assert sum(1 for l in spec.layers if l.fused_bn) == 53
    # the two inner relus per block plus the stem; post-add relus stay
    assert sum(1 for l in spec.layers if l.fused_relu) == 33


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

def test_weights_deterministic():
    spec = parse_model(CHAIN)
    w1 = init_random_weights(spec)
    w2 = init_random_weights(spec)
    assert w1.keys() == w2.keys()
    assert all(np.array_equal(w1[k], w2[k]) for k in w1)
    assert w1["c1.w"].shape == (2, 1, 1, 2)
    assert np.abs(w1["c1.w"]).max() <= 0.1


def test_weights_blob_round_trip(tmp_path):
    spec = parse_model(CHAIN)
    weights = init_random_weights(spec)
    blob = tmp_path / "weights.bin"
    save_weights(weights, blob)
    loaded = load_weights(blob)
    assert loaded.keys() == weights.keys()
    for k in weights:
        assert np.array_equal(loaded[k], weights[k])
        assert loaded[k].shape == weights[k].shape


def test_weight_manifest_is_sidecar_json(tmp_path):
    spec = parse_model(SINGLE_CONV)
    save_weights(init_random_weights(spec), tmp_path / "w.bin")
    assert (tmp_path / "w.json").exists()
    import json
    manifest = json.loads((tmp_path / "w.json").read_text())
    assert manifest["dtype"] == "float32"
    assert "c1.w" in manifest["entries"]


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def test_forward_identity_conv():
    text = "in input shape=3x3x2\nc1 conv in=in filters=2 kernel=1\n"
    spec = parse_model(text)
    x = make_tensor((2, 3, 3, 2), fill="random", seed=4)
    eye = {"c1.w": np.eye(2, dtype=np.float32).reshape(2, 1, 1, 2)}
    y, report = forward(spec, x, weights=eye)
    assert np.array_equal(y.array, x.array)
    assert report.batch == 2


def test_forward_fusion_on_off_ulp():
    spec = load_model(builtin_model_path("resnet-mini"))
    x = make_tensor((2, 64, 64, 3), fill="random", seed=77)
    weights = init_random_weights(spec)
    y_on, _ = forward(spec, x, EngineConfig(fusion=True), weights)
    y_off, _ = forward(spec, x, EngineConfig(fusion=False), weights)
    assert ulp_distance(y_on.array, y_off.array).max() <= 2


def test_forward_deterministic_rerun():
    spec = load_model(builtin_model_path("resnet-mini"))
    eng = Engine(spec, batch=2)
    x = make_tensor((2, 64, 64, 3), fill="random", seed=5)
    y1, _ = eng.forward(x)
    y1 = Tensor(y1.shape, y1.layout, y1.array.copy())
    y2, _ = eng.forward(x)
    assert np.array_equal(y1.array, y2.array)


def test_forward_config_independence():
    spec = load_model(builtin_model_path("resnet-mini"))
    weights = init_random_weights(spec)
    x = make_tensor((2, 64, 64, 3), fill="random", seed=6)
    ref = None
    for threads in (1, 2):
        for fusion in (True, False):
            for algorithm in ("auto", "im2col", "convgemm"):
                cfg = EngineConfig(threads=threads, fusion=fusion,
                                   algorithm=algorithm)
                y, _ = forward(spec, x, cfg, weights)
                arr = np.asarray(y.array, dtype=np.float64)
                if ref is None:
                    ref = arr
                else:
                    rel = np.linalg.norm(arr - ref) / np.linalg.norm(ref)
                    assert rel <= 1e-4


def test_forward_accepts_nchw_input():
    text = "in input shape=3x3x2\nc1 conv in=in filters=2 kernel=1\n"
    spec = parse_model(text)
    weights = init_random_weights(spec)
    x = make_tensor((2, 3, 3, 2), fill="random", seed=4)
    y1, _ = forward(spec, x, weights=weights)
    y2, _ = forward(spec, convert_layout(x, Layout.NCHW), weights=weights)
    assert np.array_equal(y1.array, y2.array)


def test_forward_shape_mismatch():
    spec = parse_model(SINGLE_CONV)
    eng = Engine(spec, batch=2)
    with pytest.raises(ValueError, match="expects"):
        eng.forward(make_tensor((2, 5, 5, 3), fill="zeros"))


def test_forward_timing_report_invariants():
    spec = load_model(builtin_model_path("resnet-mini"))
    eng = Engine(spec, batch=2)
    x = make_tensor((2, 64, 64, 3), fill="random", seed=8)
    eng.forward(x)  # warm
    _, report = eng.forward(x)
    pct = sum(report.percentages().values())
    assert abs(pct - 100.0) <= 0.1
    attributed = report.attributed_seconds
    assert attributed <= report.total_seconds
    assert report.total_seconds <= attributed * 1.05 + 0.002
    assert report.images_per_s == pytest.approx(2 / report.total_seconds)
    # fused run reports no standalone BatchNorm row
    assert "BatchNorm" not in report.kind_seconds
    assert report.kind_seconds["Conv2D"] > 0


def test_timing_report_serialization():
    report = LayerTimingReport(
        {"Conv2D": 0.75, "ReLU": 0.15, "Pooling": 0.1}, 1.01, 16)
    csv = report.to_csv()
    assert csv.splitlines()[0] == "kind,seconds,percent"
    assert "Conv2D,0.750000,75.00" in csv
    doc = report.to_json_dict()
    assert doc["batch"] == 16
    assert doc["kinds"]["ReLU"]["percent"] == 15.0
    assert doc["images_per_s"] == pytest.approx(16 / 1.01)


def test_engine_rejects_bad_batch():
    with pytest.raises(ValueError):
        Engine(parse_model(SINGLE_CONV), batch=0)
