import time

import numpy as np
import pytest

from ledetr.backbone import (
    SCALE_BLOCKS,
    build_backbone,
    list_patterns,
    resolve_spec,
    valid_names,
)
from ledetr.errors import ConfigError, ShapeError
from ledetr.tensor import Tensor4


class TestSpecResolution:
    def test_scale_x(self):
        assert resolve_spec("X").blocks == (2, 7, 15, 2)

    def test_scale_l(self):
        assert resolve_spec("L").blocks == (1, 1, 4, 4)

    def test_scale_m(self):
        assert resolve_spec("M").blocks == (1, 1, 2, 2)

    def test_pattern_pb1_x(self):
        assert resolve_spec("P_B-1@X").blocks == (2, 2, 8, 10)

    def test_unknown_name_lists_valid(self):
        with pytest.raises(ConfigError) as err:
            resolve_spec("Q")
        for name in ("M", "L", "X", "P_C-2@X"):
            assert name in str(err.value)

    def test_na_stage_config(self):
        cfg = resolve_spec("M").na_stage
        assert cfg.kernel == 7 and cfg.heads == 16 and cfg.head_dim == 32


class TestCatalog:
    def test_size_is_thirteen(self):
        assert len(list_patterns()) == 13

    def test_contains_cited_rows(self):
        table = {(p.scale, p.name): p.blocks for p in list_patterns()}
        assert table[("L", "P_A-2")] == (1, 1, 6, 6)
        assert table[("X", "P_B-3")] == (2, 2, 2, 15)
        assert table[("X", "P_C-2")] == (2, 7, 15, 2)

    def test_roles(self):
        roles = {p.role for p in list_patterns()}
        assert roles == {"balanced", "late-heavy", "early-heavy"}
        for p in list_patterns():
            if p.role == "balanced":
                assert p.blocks[2] == p.blocks[3]
            elif p.role == "late-heavy":
                assert p.blocks[3] > p.blocks[2]
            else:
                assert p.blocks[2] > p.blocks[3]

    def test_scale_names_also_buildable(self):
        assert set(SCALE_BLOCKS) <= set(valid_names())


class TestForward:
    def test_64_input_shapes(self):
        bb = build_backbone("M", seed=3)
        x = Tensor4(np.random.default_rng(0).standard_normal((1, 3, 64, 64)).astype(np.float32))
        pyr = bb.forward(x)
        assert pyr.s3.shape == (1, 128, 8, 8)
        assert pyr.s4.shape == (1, 256, 4, 4)
        assert pyr.s5.shape == (1, 512, 2, 2)
        assert pyr.channels == (128, 256, 512)

    def test_indivisible_input_rejected(self):
        bb = build_backbone("M", seed=3)
        with pytest.raises(ShapeError):
            bb.forward(Tensor4(np.zeros((1, 3, 60, 64), dtype=np.float32)))

    def test_wrong_channels_rejected(self):
        bb = build_backbone("M", seed=3)
        with pytest.raises(ShapeError):
            bb.forward(Tensor4(np.zeros((1, 4, 64, 64), dtype=np.float32)))

    def test_zeroed_residuals_reduce_to_downsampling_path(self):
        bb = build_backbone("L", seed=5)
        for stage in bb.stages:
            for block in stage[1:]:
                if hasattr(block, "project") and block.project is not None:
                    block.project.weight[:] = 0.0
                if hasattr(block, "out_proj"):
                    block.out_proj.weight[:] = 0.0
                    block.ffn.project.weight[:] = 0.0
        trimmed = build_backbone("L", seed=5)
        trimmed.stem = bb.stem
        trimmed.stages = [stage[:1] for stage in bb.stages]
        x = Tensor4(np.random.default_rng(1).standard_normal((1, 3, 64, 64)).astype(np.float32))
        full = bb.forward(x)
        down = trimmed.forward(x)
        for a, b in ((full.s3, down.s3), (full.s4, down.s4), (full.s5, down.s5)):
            assert np.array_equal(a.data, b.data)

    def test_same_seed_bit_identical_weights(self):
        a = dict(build_backbone("M", seed=7).named_params())
        b = dict(build_backbone("M", seed=7).named_params())
        assert a.keys() == b.keys()
        for key in a:
            assert np.array_equal(a[key], b[key]), key

    def test_all_patterns_build_and_forward_64(self):
        x = Tensor4(np.random.default_rng(2).standard_normal((1, 3, 64, 64)).astype(np.float32))
        for p in list_patterns():
            bb = build_backbone(p.key, seed=1)
            pyr = bb.forward(x)
            assert pyr.s5.shape == (1, 512, 2, 2), p.key


class TestScalingTradeoff:
    def test_nested_patterns_strictly_more_params(self):
        by_key = {p.key: p for p in list_patterns()}
        nested = [
            ("P_A-1@L", "P_A-2@L"),
            ("P_A-1@X", "P_B-1@X"),
            ("P_C-1@X", "P_C-2@X"),
            ("P_C-2@X", "P_C-3@X"),
        ]
        for small, big in nested:
            bs, bb_ = by_key[small].blocks, by_key[big].blocks
            assert all(a <= b for a, b in zip(bs, bb_)) and sum(bs) < sum(bb_)
            assert (
                build_backbone(small, seed=0).param_count()
                < build_backbone(big, seed=0).param_count()
            )

    def test_deeper_nested_config_not_faster(self):
        x = Tensor4(np.random.default_rng(3).standard_normal((1, 3, 64, 64)).astype(np.float32))
        small = build_backbone("P_A-1@L", seed=0)
        big = build_backbone("P_A-2@L", seed=0)

        def median_time(bb):
            times = []
            for _ in range(3):
                t0 = time.perf_counter()
                bb.forward(x)
                times.append(time.perf_counter() - t0)
            return sorted(times)[1]

        median_time(small)  # warm caches
        assert median_time(big) >= 0.9 * median_time(small)
