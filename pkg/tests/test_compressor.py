import numpy as np
import pytest

from oracles import relevance_reference

from clipmem.attention import MaskVariant
from clipmem.compressor import (
    CompressorConfig,
    analytic_weights,
    assemble_input,
    compute_relevance,
    encode,
    extract_context,
    init_weights,
    seed_gradient_from_input_grad,
)
from clipmem.errors import ConfigError, ContractViolation
from clipmem.layout import LayoutSpec, TokenLayout
from clipmem.numerics import seeded_rng


def small_config(**overrides):
    base = dict(
        layers=1, heads=1, model_dim=8, ff_dim=8, context_per_frame=1,
        relevance_top_heads=1, relevance_layers=(1, 1), seed=0,
    )
    base.update(overrides)
    return CompressorConfig(**base)


class TestAssembleInput:
    def test_sentinel_row_order(self):
        dim = 4
        visual = np.zeros((2, 1, dim))
        visual[0, 0, 0] = 1.0  # frame 1
        visual[1, 0, 0] = 2.0  # frame 2
        text = np.full((1, dim), 3.0)
        seed = np.full((1, dim), 9.0)
        e_in, layout = assemble_input(visual, text, seed)
        assert layout.total_len == 5
        assert e_in[0, 0] == 1.0 and e_in[1, 0] == 2.0
        assert np.all(e_in[2] == 3.0)
        assert np.all(e_in[3] == 9.0) and np.all(e_in[4] == 9.0)

    def test_single_frame_context_block_is_seed(self):
        rng = seeded_rng(1)
        seed = rng.standard_normal((3, 4))
        e_in, layout = assemble_input(rng.standard_normal((1, 2, 4)), rng.standard_normal((1, 4)), seed)
        assert np.array_equal(e_in[list(layout.context_indices(1))], seed)

    def test_slices_reproduce_input_bit_exactly(self):
        rng = seeded_rng(2)
        visual = rng.standard_normal((3, 2, 5))
        text = rng.standard_normal((2, 5))
        seed = rng.standard_normal((2, 5))
        e_in, layout = assemble_input(visual, text, seed)
        rebuilt = np.concatenate(
            [visual.reshape(6, 5), text, np.tile(seed, (3, 1))]
        )
        assert e_in.tobytes() == rebuilt.tobytes()


class TestEncode:
    def test_zero_layers_is_identity(self):
        config = small_config(layers=0)
        weights = init_weights(config, patches=2, max_frames=2)
        rng = seeded_rng(3)
        e_in, layout = assemble_input(
            rng.standard_normal((2, 2, 8)), rng.standard_normal((1, 8)), weights.context_seed
        )
        out = encode(e_in, layout, config, weights)
        assert np.array_equal(out.flat, e_in)
        assert out.traces.shape[0] == 0

    def test_deterministic(self):
        config = small_config(layers=2, heads=2)
        weights = init_weights(config, patches=2, max_frames=3)
        rng = seeded_rng(4)
        e_in, layout = assemble_input(
            rng.standard_normal((3, 2, 8)), rng.standard_normal((2, 8)), weights.context_seed
        )
        a = encode(e_in, layout, config, weights)
        b = encode(e_in, layout, config, weights)
        assert np.array_equal(a.flat, b.flat)
        assert np.array_equal(a.traces, b.traces)

    def test_single_frame_variant_isolates_frames(self):
        # Context rows under the isolated variant depend only on their own
        # frame: joint encode equals the per-frame independent run.
        config = small_config(layers=1, variant=MaskVariant.SINGLE_FRAME, guide_on=False)
        weights = init_weights(config, patches=2, max_frames=3)
        rng = seeded_rng(5)
        visual = rng.standard_normal((3, 2, 8))
        text = rng.standard_normal((1, 8))
        e_in, layout = assemble_input(visual, text, weights.context_seed)
        joint = encode(e_in, layout, config, weights)
        for k in range(1, 4):
            rows = (
                list(layout.visual_indices(k))
                + list(layout.text_indices)
                + list(layout.context_indices(k))
            )
            sub_layout = TokenLayout(LayoutSpec(1, 2, 1, 1))
            solo = encode(e_in[rows], sub_layout, config, weights, frame_ids=[k])
            assert np.max(np.abs(solo.flat[:2] - joint.visual[k - 1])) < 1e-10
            assert np.max(np.abs(solo.flat[3:] - joint.context[k - 1])) < 1e-10

    def test_output_blocks_match_flat(self):
        config = small_config(layers=1, context_per_frame=2)
        weights = init_weights(config, patches=3, max_frames=2)
        rng = seeded_rng(6)
        e_in, layout = assemble_input(
            rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 8)), weights.context_seed
        )
        out = encode(e_in, layout, config, weights)
        assert np.array_equal(out.visual.reshape(6, 8), out.flat[:6])
        assert np.array_equal(out.text, out.flat[6:8])
        assert np.array_equal(out.context.reshape(4, 8), out.flat[8:])


class TestExtractContext:
    def test_groups_by_frame(self):
        layout = TokenLayout(LayoutSpec(2, 2, 1, 1))
        flat = np.arange(7 * 3, dtype=float).reshape(7, 3)
        ctx = extract_context(flat, layout)
        assert np.array_equal(ctx[0], flat[[5]])
        assert np.array_equal(ctx[1], flat[[6]])

    def test_concatenation_partitions_context_block(self):
        layout = TokenLayout(LayoutSpec(3, 1, 2, 2))
        flat = seeded_rng(7).standard_normal((layout.total_len, 4))
        ctx = extract_context(flat, layout)
        assert np.array_equal(ctx.reshape(6, 4), flat[5:])

    def test_frame_labels_match_groups(self):
        layout = TokenLayout(LayoutSpec(2, 2, 2, 1))
        for k in (1, 2):
            for idx in layout.context_indices(k):
                assert layout.frame_of(idx) == k


class TestRelevance:
    def test_uniform_attention_hand_value(self):
        # Zero input makes every row uniform over its allowed set; the text
        # row allows positions {0..4}, so each visual cell holds exactly 1/5
        # and each frame's two-cell mean is 1/5.
        config = small_config(model_dim=4)
        weights = analytic_weights(config, patches=2, max_frames=2)
        layout = TokenLayout(LayoutSpec(2, 2, 1, 1))
        out = encode(np.zeros((7, 4)), layout, config, weights)
        rel = compute_relevance(out.traces, layout, config)
        assert rel == pytest.approx([0.2, 0.2], abs=1e-15)

    def test_concentrated_attention(self):
        layout = TokenLayout(LayoutSpec(2, 2, 1, 1))
        traces = np.zeros((1, 1, 7, 7))
        traces[0, 0, 4, 2] = 0.5
        traces[0, 0, 4, 3] = 0.5
        config = small_config(model_dim=4)
        rel = compute_relevance(traces, layout, config)
        assert rel[0] == 0.0 and rel[1] == 0.5

    def test_matches_quadruple_loop_oracle(self):
        rng = seeded_rng(8)
        for _ in range(12):
            frames = int(rng.integers(1, 5))
            patches = int(rng.integers(1, 4))
            text = int(rng.integers(1, 4))
            layers = int(rng.integers(1, 5))
            heads = int(rng.integers(1, 5))
            k_h = int(rng.integers(1, heads + 1))
            lo = int(rng.integers(1, layers + 1))
            hi = int(rng.integers(lo, layers + 1))
            layout = TokenLayout(LayoutSpec(frames, patches, 1, text))
            traces = rng.random((layers, heads, layout.total_len, layout.total_len))
            config = CompressorConfig(
                layers=layers, heads=heads, model_dim=heads * 2, ff_dim=4,
                context_per_frame=1, relevance_top_heads=k_h, relevance_layers=(lo, hi),
            )
            rel = compute_relevance(traces, layout, config)
            ref = relevance_reference(
                traces, frames, patches, list(layout.text_indices), lo, hi, k_h
            )
            assert np.max(np.abs(rel - ref)) < 1e-12

    def test_production_scale_hyperparameters(self):
        # 28-head, 20-layer stack scored with top-5 heads over layers 17..20.
        layout = TokenLayout(LayoutSpec(2, 2, 1, 2))
        rng = seeded_rng(9)
        traces = rng.random((20, 28, layout.total_len, layout.total_len))
        config = CompressorConfig(
            layers=20, heads=28, model_dim=56, ff_dim=8, context_per_frame=1,
            relevance_top_heads=5, relevance_layers=(17, 20),
        )
        rel = compute_relevance(traces, layout, config)
        ref = relevance_reference(traces, 2, 2, list(layout.text_indices), 17, 20, 5)
        assert np.max(np.abs(rel - ref)) < 1e-12

    def test_scores_in_unit_interval_and_mass_bounded(self):
        config = small_config(layers=2, heads=2, relevance_layers=(1, 2), model_dim=8)
        weights = init_weights(config, patches=2, max_frames=3)
        rng = seeded_rng(10)
        e_in, layout = assemble_input(
            rng.standard_normal((3, 2, 8)), rng.standard_normal((2, 8)), weights.context_seed
        )
        out = encode(e_in, layout, config, weights)
        rel = compute_relevance(out.traces, layout, config)
        assert np.all(rel >= 0.0) and np.all(rel <= 1.0)
        # Per text row, the text-to-visual mass summed over frames is <= 1.
        text = list(layout.text_indices)
        vis_cols = list(range(3 * 2))
        mass = out.traces[:, :, text, :][:, :, :, vis_cols].sum(axis=3)
        assert np.all(mass <= 1.0 + 1e-12)

    def test_top_heads_exceeding_heads_rejected(self):
        with pytest.raises(ConfigError):
            small_config(heads=2, model_dim=8, relevance_top_heads=3)

    def test_needs_text(self):
        layout = TokenLayout(LayoutSpec(1, 1, 1, 0))
        with pytest.raises(ContractViolation):
            compute_relevance(np.zeros((1, 1, 2, 2)), layout, small_config(model_dim=4))


class TestQuestionAdaptivity:
    def test_guided_variant_reacts_to_question(self):
        config = small_config(layers=1, heads=1, model_dim=8, variant=MaskVariant.GUIDED)
        weights = init_weights(config, patches=2, max_frames=2)
        rng = seeded_rng(11)
        visual = rng.standard_normal((2, 2, 8))
        text_a = rng.standard_normal((1, 8))
        text_b = text_a + 0.5
        rel = []
        for text in (text_a, text_b):
            e_in, layout = assemble_input(visual, text, weights.context_seed)
            out = encode(e_in, layout, config, weights)
            rel.append(compute_relevance(out.traces, layout, config))
        assert not np.allclose(rel[0], rel[1])

    def test_single_frame_variant_ignores_question(self):
        # Text is unreachable from visual and context rows, so the
        # text-to-visual mass is identically zero whatever the question.
        config = small_config(layers=1, variant=MaskVariant.SINGLE_FRAME, guide_on=False)
        weights = init_weights(config, patches=2, max_frames=2)
        rng = seeded_rng(12)
        visual = rng.standard_normal((2, 2, 8))
        rel = []
        for seed in (13, 14):
            text = seeded_rng(seed).standard_normal((1, 8))
            e_in, layout = assemble_input(visual, text, weights.context_seed)
            out = encode(e_in, layout, config, weights)
            rel.append(compute_relevance(out.traces, layout, config))
        assert np.array_equal(rel[0], rel[1])
        assert np.all(rel[0] == 0.0)


def test_seed_gradient_folds_context_rows():
    layout = TokenLayout(LayoutSpec(2, 1, 2, 1))
    d_e_in = seeded_rng(15).standard_normal((layout.total_len, 3))
    folded = seed_gradient_from_input_grad(d_e_in, layout)
    assert folded.shape == (2, 3)
    assert np.allclose(folded, d_e_in[3:5] + d_e_in[5:7])
