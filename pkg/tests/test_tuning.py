import pytest

from tilednn import (CacheHierarchy, GemmCacheParams, LoopVariant, autotune,
                     default_candidate_grid, detect_cache_hierarchy,
                     load_param_table, save_param_table, select_cache_params)

REFERENCE = CacheHierarchy(l1_bytes=64 * 1024, l2_bytes=2 * 1024 * 1024,
                           l3_bytes=0)


def test_select_large_squarish_hits_tuned_defaults():
    params, variant = select_cache_params(2048, 2048, 2048, REFERENCE)
    assert (params.mc, params.nc, params.kc) == (560, 3072, 368)
    assert (params.mr, params.nr) == (8, 8)
    assert variant is LoopVariant.A2B1


def test_select_tall_skinny_swaps_cache_targets():
    params, variant = select_cache_params(64, 140000, 64, REFERENCE)
    assert variant is LoopVariant.B2A1
    assert params.mc == 64          # clamped to the rounded m
    assert params.kc == 64          # no dead blocking
    # the L2-resident packed B block covers at least a quarter of L2
    assert params.kc * params.nc * 4 >= 0.25 * REFERENCE.l2_bytes


def test_select_degenerate_row():
    params, _ = select_cache_params(1, 10, 500, REFERENCE)
    assert params.mc == params.mr
    assert params.kc == min(500, 368)


def test_select_is_pure():
    a = select_cache_params(33, 4444, 129, REFERENCE)
    b = select_cache_params(33, 4444, 129, REFERENCE)
    assert a == b


def test_select_never_dead_blocks(rng):
    for _ in range(100):
        m, n, k = (int(x) for x in rng.integers(1, 3000, 3))
        params, variant = select_cache_params(m, n, k, REFERENCE)
        assert params.kc <= max(k, 8) and params.kc <= max(k, params.kc)
        assert params.kc <= k or k < 8
        assert params.mc <= -(-m // params.mr) * params.mr
        assert params.mc % params.mr == 0
        assert params.nc % params.nr == 0
        params.validate(REFERENCE)


def test_select_grows_a_block_when_k_small():
    # kc clamps to k; mc should grow to keep the L2-resident block useful
    params, variant = select_cache_params(4096, 4096, 64, REFERENCE)
    assert variant is LoopVariant.A2B1
    assert params.mc * params.kc * 4 >= 0.25 * REFERENCE.l2_bytes


def test_select_scales_with_hierarchy():
    small = CacheHierarchy(l1_bytes=32 * 1024, l2_bytes=1024 * 1024)
    params, _ = select_cache_params(2048, 2048, 2048, small)
    assert params.kc < 368
    fill = params.mc * params.kc * 4 / small.l2_bytes
    assert 0.25 <= fill <= 0.6


def test_select_table_override():
    override = (GemmCacheParams(16, 16, 16), LoopVariant.B2A1)
    table = {(10, 20, 30): override}
    assert select_cache_params(10, 20, 30, REFERENCE, table) == override
    assert select_cache_params(10, 20, 31, REFERENCE, table) != override


def test_autotune_single_candidate():
    grid = [(GemmCacheParams(16, 16, 16), LoopVariant.A2B1)]
    params, variant, rate, results = autotune(24, 24, 24, grid=grid,
                                              reps=1, warmup=0)
    assert (params, variant) == grid[0]
    assert rate > 0 and len(results) == 1


def test_autotune_winner_is_argmax():
    grid = [(GemmCacheParams(16, 16, 16), LoopVariant.A2B1),
            (GemmCacheParams(32, 32, 32), LoopVariant.A2B1),
            (GemmCacheParams(16, 16, 16), LoopVariant.B2A1)]
    params, variant, rate, results = autotune(40, 40, 40, grid=grid,
                                              reps=2, warmup=1)
    assert rate == max(r[2] for r in results)
    assert any(r[0] == params and r[1] == variant for r in results)


def test_autotune_empty_grid_rejected():
    with pytest.raises(ValueError):
        autotune(8, 8, 8, grid=[])


def test_default_candidate_grid_nonempty():
    grid = default_candidate_grid(64, 4096, 576, REFERENCE)
    assert grid
    variants = {variant for _, variant in grid}
    assert variants == set(LoopVariant)


def test_param_table_round_trip(tmp_path):
    records = {
        (64, 100352, 576): (GemmCacheParams(64, 4096, 368), LoopVariant.B2A1),
        (256, 3136, 64): (GemmCacheParams(256, 3072, 64), LoopVariant.A2B1),
    }
    path = tmp_path / "params.txt"
    save_param_table(records, path)
    text = path.read_text()
    assert text.splitlines()[0].startswith("# m n k mc nc kc mr nr variant")
    assert "64 100352 576 64 4096 368 8 8 b2a1" in text
    assert load_param_table(path) == records


def test_param_table_rejects_malformed(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2 3 4\n")
    with pytest.raises(ValueError):
        load_param_table(path)


def test_detect_cache_hierarchy_best_effort():
    hw = detect_cache_hierarchy()
    assert isinstance(hw, CacheHierarchy)
    assert hw.l1_bytes > 0 and hw.l2_bytes > hw.l1_bytes
