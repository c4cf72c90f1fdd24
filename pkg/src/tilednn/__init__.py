"""tilednn: CPU CNN inference on a cache-blocked GEMM.

A from-scratch blocked GEMM (packing, 8x8 micro-kernel, two loop orders,
runtime blocking selection), convolution lowered through full or blockwise
im2col, batchnorm/ReLU fused into the micro-kernel epilogue, a small model
executor with per-layer-kind timing, and a benchmark CLI.
"""

from .tensor import (FP32, ConvDescriptor, GeometryError, Layout, MatrixView,
                     Tensor, conv_output_geometry, convert_layout,
                     make_tensor, tensor_from_array)
from .gemm import (DEFAULT_HIERARCHY, DEFAULT_PARAMS, EP_NONE, CacheHierarchy,
                   Epilogue, EpilogueKind, GemmCacheParams, GemmConfigError,
                   GemmDimensionError, LoopVariant, PackedBuffer, gemm,
                   microkernel, pack_a, pack_b, track_allocations)
from .tuning import (autotune, default_candidate_grid, detect_cache_hierarchy,
                     load_param_table, save_param_table, select_cache_params)
from .conv import (ConvAlgorithm, Im2colGather, Im2colMatrix, choose_algorithm,
                   conv2d, conv_gemm, conv_im2col_gemm, im2col)
from .layers import (BatchNormParams, FoldedBatchNorm, PoolDescriptor,
                     batchnorm_inference, dense, fold_batchnorm, pool, relu,
                     residual_add, softmax)
from .model import (Engine, EngineConfig, LayerSpec, LayerTimingReport,
                    ModelParseError, ModelSpec, forward, init_random_weights,
                    load_model, load_weights, parse_model, plan_fusion,
                    save_weights)
from .bench import (BenchReport, RunConfig, builtin_model_path, emit_report,
                    reports_from_json, run_batch_sweep, run_ladder,
                    run_multi_instance, run_single, step_config)

__version__ = "0.1.0"
