"""Analytic multiplication counts and the attention memory formula."""

import numpy as np
import pytest

from reppool.complexity import ArchSpec, OpCountReport, attn_mults, compare, pyramid_memory

DEEP_SCHEDULE = (8192, 8192, 2048, 512, 512, 512)


def deep_specs():
    blockwise = ArchSpec("blockwise", 6, 8192, 768, 512, block_size=512)
    pyramidion = ArchSpec(
        "pyramidion", 6, 8192, 768, 512, block_size=512, bottleneck=512, schedule=DEEP_SCHEDULE
    )
    return blockwise, pyramidion


class TestAttnMults:
    def test_vanilla_follows_product_formula(self):
        report = attn_mults(ArchSpec("vanilla", 2, 512, 512, 512))
        assert report.encoder_self == 2 * 512 * 512 * 512 == 268_435_456

    def test_deep_self_attention_ratio(self):
        blockwise, pyramidion = deep_specs()
        b = attn_mults(blockwise)
        p = attn_mults(pyramidion)
        # per-layer lengths: 6*8192 vs 8192+8192+2048+512*3, both at block width 512
        assert b.encoder_self == 49152 * 512 * 768
        assert p.encoder_self == 19968 * 512 * 768
        ratio = b.encoder_self / p.encoder_self
        assert abs(ratio - 49152 / 19968) < 1e-12
        assert 2.40 <= ratio <= 2.50

    def test_cross_attention_ratio_is_exactly_sixteen(self):
        blockwise, pyramidion = deep_specs()
        ratios = compare(attn_mults(blockwise), attn_mults(pyramidion))
        assert ratios["decoder_cross"] == 16.0

    def test_transpooler_encoder_matches_blockwise(self):
        block = attn_mults(ArchSpec("blockwise", 4, 2048, 512, 512, block_size=512))
        trans = attn_mults(
            ArchSpec("transpooler", 4, 2048, 512, 512, block_size=512, bottleneck=512)
        )
        assert block.encoder_self == trans.encoder_self
        assert trans.decoder_cross == 4 * 512 * 512 * 512

    def test_totals_are_sums_of_items(self):
        report = attn_mults(ArchSpec("blockwise", 3, 1024, 256, 128, block_size=128))
        assert report.total == sum(report.as_dict()[item] for item in OpCountReport.ITEMS)

    def test_pyramidion_needs_schedule(self):
        with pytest.raises(ValueError):
            ArchSpec("pyramidion", 6, 8192, 768, 512, block_size=512, bottleneck=512)

    def test_schedule_length_checked(self):
        with pytest.raises(ValueError):
            ArchSpec(
                "pyramidion", 3, 8192, 768, 512,
                block_size=512, bottleneck=512, schedule=(8192, 512),
            )

    def test_unknown_architecture(self):
        with pytest.raises(ValueError):
            ArchSpec("linformer", 2, 512, 512, 512)

    def test_pyramidion_self_at_most_twice_first_layer(self):
        # halving every layer keeps the total under 2x the full first layer
        schedule = (4096, 2048, 1024, 512, 256, 128)
        spec = ArchSpec(
            "pyramidion", 6, 4096, 64, 128, block_size=128, bottleneck=128, schedule=schedule
        )
        report = attn_mults(spec)
        first_layer = 4096 * 128 * 64
        assert report.encoder_self <= 2 * first_layer


class TestPyramidMemory:
    def test_example_multiplier(self):
        m, d = 4, 8
        total = pyramid_memory(8, 2, m, d)
        assert total == pytest.approx(1.75 * m * 8 * d, abs=0.0)

    def test_full_bottleneck_is_single_layer(self):
        assert pyramid_memory(16, 16, 4, 8) == 4 * 16 * 8

    def test_always_below_twice_first_layer(self):
        for n_exp in range(0, 12):
            n = 2**n_exp
            assert pyramid_memory(n, 1, 3, 5) < 2 * 3 * n * 5

    def test_closed_form_matches_geometric_sum_everywhere(self):
        # the function itself asserts agreement; sweep all power-of-two pairs
        for n_exp in range(0, 21):
            for k_exp in range(0, n_exp + 1):
                pyramid_memory(2**n_exp, 2**k_exp, 7, 3)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValueError):
            pyramid_memory(24, 8, 4, 4)
        with pytest.raises(ValueError):
            pyramid_memory(32, 6, 4, 4)
        with pytest.raises(ValueError):
            pyramid_memory(8, 16, 4, 4)


class TestCompare:
    def test_identical_reports_give_unit_ratios(self):
        report = attn_mults(ArchSpec("vanilla", 2, 64, 32, 16))
        ratios = compare(report, report)
        assert all(r == 1.0 for r in ratios.values())

    def test_doubled_baseline_gives_two(self):
        spec = ArchSpec("vanilla", 2, 64, 32, 16)
        single = attn_mults(spec)
        double = attn_mults(ArchSpec("vanilla", 4, 64, 32, 16))
        ratios = compare(double, single)
        assert ratios["encoder_self"] == 2.0
        assert ratios["total"] == 2.0

    def test_deep_configuration_headline_numbers(self):
        blockwise, pyramidion = deep_specs()
        ratios = compare(attn_mults(blockwise), attn_mults(pyramidion))
        assert ratios["decoder_cross"] == 16.0
        assert 2.40 <= ratios["encoder_self"] <= 2.50
