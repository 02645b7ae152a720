import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segmeans import linalg
from segmeans.errors import ConfigError, PartitionError, ShapeError, TransportError
from segmeans.model import (
    CountingCollective,
    ExchangeMode,
    ExecutionPlan,
    ModelConfig,
    PartitionSpec,
    augment,
    encoder_block,
    forward_distributed,
    forward_local,
    init_weights,
    load_weights,
    multiplicity_bias_vector,
    output_deviation,
    partition_input,
    save_weights,
    segment_means,
    segment_sizes,
)

TOY = ModelConfig(embed_dim=32, num_heads=4, num_layers=2, mlp_ratio=2.0,
                  seq_len=16, num_classes=5)


def toy_input(cfg, seed=0):
    return linalg.seeded_matrix(cfg.seq_len, cfg.embed_dim, 1.0, linalg.make_rng(seed))


class TestPartitionSpec:
    def test_paper_grid_geometry(self):
        for means, cr in ((30, 3.3), (20, 4.95), (10, 9.9)):
            spec = PartitionSpec(seq_len=197, devices=2, means=means)
            assert spec.effective_len == 198
            assert spec.per_device == 99
            assert spec.compression_rate == pytest.approx(cr, abs=1e-12)

    def test_rejects_zero_devices(self):
        with pytest.raises(ConfigError):
            PartitionSpec(seq_len=8, devices=0, means=1)

    def test_rejects_too_many_means(self):
        with pytest.raises(PartitionError):
            PartitionSpec(seq_len=8, devices=2, means=5)

    def test_full_tensor_requires_all_rows(self):
        with pytest.raises(ConfigError):
            ExecutionPlan(partition=PartitionSpec(16, 2, 4),
                          exchange=ExchangeMode.FULL_TENSOR)


class TestPartitionInput:
    def test_two_devices_with_padding(self):
        spec = PartitionSpec(seq_len=197, devices=2, means=10)
        x = linalg.seeded_matrix(197, 8, 1.0, linalg.make_rng(1))
        parts = partition_input(x, spec)
        assert [p.shape for p in parts] == [(99, 8), (99, 8)]
        assert np.array_equal(parts[1][-1], x[-1])  # repeated last row

    def test_single_device_identity(self):
        spec = PartitionSpec(seq_len=4, devices=1, means=4)
        x = linalg.seeded_matrix(4, 3, 1.0, linalg.make_rng(2))
        [part] = partition_input(x, spec)
        assert np.array_equal(part, x)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 5), st.integers(0, 2**16))
    def test_round_trip(self, seq_len, devices, seed):
        spec = PartitionSpec(seq_len=seq_len, devices=devices, means=1)
        x = linalg.seeded_matrix(seq_len, 4, 1.0, linalg.make_rng(seed))
        parts = partition_input(x, spec)
        rebuilt = np.vstack(parts)[:seq_len]
        assert np.array_equal(rebuilt, x)

    def test_wrong_row_count(self):
        spec = PartitionSpec(seq_len=6, devices=3, means=2)
        with pytest.raises(ShapeError):
            partition_input(np.zeros((5, 2), np.float32), spec)


class TestSegmentMeans:
    def test_identity_when_one_per_segment(self):
        x = linalg.seeded_matrix(7, 4, 1.0, linalg.make_rng(5))
        assert np.array_equal(segment_means(x, 7), x)

    def test_constant_matrix(self):
        x = np.full((8, 3), 2.5, dtype=np.float32)
        out = segment_means(x, 4)
        assert np.array_equal(out, np.full((4, 3), 2.5, dtype=np.float32))

    def test_hand_example(self):
        x = np.array([[1, 1], [3, 3], [5, 0], [7, 0]], dtype=np.float32)
        out = segment_means(x, 2)
        assert np.array_equal(out, np.array([[2, 2], [6, 0]], dtype=np.float32))

    def test_balanced_sizes_when_not_divisible(self):
        assert segment_sizes(99, 10) == [10] * 9 + [9]
        assert segment_sizes(99, 30) == [4] * 9 + [3] * 21

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 500), st.data())
    def test_segment_sizes_invariants(self, tokens, data):
        segments = data.draw(st.integers(1, tokens))
        sizes = segment_sizes(tokens, segments)
        assert len(sizes) == segments
        assert sum(sizes) == tokens
        assert max(sizes) - min(sizes) <= 1

    def test_rejects_too_many_segments(self):
        with pytest.raises(PartitionError):
            segment_means(np.zeros((3, 2), np.float32), 4)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**16))
    def test_grand_mean_preserved_divisible(self, segments, size, seed):
        rows = segments * size
        x = linalg.seeded_matrix(rows, 5, 1.0, linalg.make_rng(seed))
        out = segment_means(x, segments)
        np.testing.assert_allclose(out.mean(axis=0), x.mean(axis=0), atol=1e-6)


class TestAugment:
    def test_empty_others_identity(self):
        x = linalg.seeded_matrix(4, 3, 1.0, linalg.make_rng(0))
        assert augment(x, []) is x

    def test_block_order(self):
        x = np.zeros((4, 2), np.float32)
        z1 = np.ones((2, 2), np.float32)
        z2 = np.full((2, 2), 2.0, np.float32)
        out = augment(x, [z1, z2])
        assert out.shape == (8, 2)
        assert np.array_equal(out[4:6], z1)
        assert np.array_equal(out[6:8], z2)

    def test_column_mismatch(self):
        with pytest.raises(ShapeError):
            augment(np.zeros((2, 3), np.float32), [np.zeros((1, 2), np.float32)])

    def test_bias_vector_values(self):
        bias = multiplicity_bias_vector(2, [[2, 1], [3, 3]])
        np.testing.assert_allclose(
            bias, [0.0, 0.0, np.log(2), 0.0, np.log(3), np.log(3)])


class TestForwardLocal:
    def test_deterministic(self):
        w = init_weights(TOY, seed=3)
        x = toy_input(TOY, 3)
        f1, l1 = forward_local(x, w, TOY)
        f2, l2 = forward_local(x, w, TOY)
        assert np.array_equal(f1, f2) and np.array_equal(l1, l2)

    def test_logit_length(self):
        w = init_weights(TOY, seed=1)
        _, logits = forward_local(toy_input(TOY, 1), w, TOY)
        assert logits.shape == (TOY.num_classes,)

    def test_against_straight_line_reference(self):
        # independent flat reimplementation in float64, no shared helpers
        cfg = ModelConfig(embed_dim=8, num_heads=2, num_layers=1, mlp_ratio=2.0,
                          seq_len=4, num_classes=3)
        w = init_weights(cfg, seed=7)
        x = toy_input(cfg, 7)

        def ref_ln(m, g, b):
            m = m.astype(np.float64)
            mu = m.mean(axis=1, keepdims=True)
            var = m.var(axis=1, keepdims=True)
            return (m - mu) / np.sqrt(var + 1e-5) * g + b

        lw = w.layers[0]
        h = ref_ln(x, lw.ln1_gamma, lw.ln1_beta)
        q = h @ lw.wq.astype(np.float64)
        k = h @ lw.wk.astype(np.float64)
        v = h @ lw.wv.astype(np.float64)
        dh = cfg.head_dim
        heads = []
        for i in range(cfg.num_heads):
            qs, ks, vs = q[:, i*dh:(i+1)*dh], k[:, i*dh:(i+1)*dh], v[:, i*dh:(i+1)*dh]
            logits = qs @ ks.T / np.sqrt(dh)
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            heads.append(p @ vs)
        attn = np.hstack(heads) @ lw.wo.astype(np.float64)
        state = x.astype(np.float64) + attn
        m = ref_ln(state, lw.ln2_gamma, lw.ln2_beta)
        inner = m @ lw.mlp_in.astype(np.float64)
        act = 0.5 * inner * (1 + np.tanh(np.sqrt(2/np.pi) * (inner + 0.044715*inner**3)))
        state = state + act @ lw.mlp_out.astype(np.float64)
        feats = ref_ln(state, w.final_gamma, w.final_beta)
        ref_logits = feats[0] @ w.head.astype(np.float64)

        features, logits = forward_local(x, w, cfg)
        np.testing.assert_allclose(features, feats, atol=2e-4)
        np.testing.assert_allclose(logits, ref_logits, atol=2e-4)


class TestForwardDistributed:
    def test_comm_log_counts(self):
        plan = ExecutionPlan.segment_means(TOY.seq_len, 2, 4)
        w = init_weights(TOY, seed=2)
        res = forward_distributed(toy_input(TOY, 2), plan, w, TOY)
        assert len(res.comm_log) == TOY.num_layers
        expected = (2 - 1) * 4 * TOY.embed_dim
        for block in res.comm_log:
            assert block == [expected, expected]

    def test_full_tensor_matches_local(self):
        plan = ExecutionPlan.full_tensor(TOY.seq_len, 2)
        w = init_weights(TOY, seed=4)
        x = toy_input(TOY, 4)
        dist = forward_distributed(x, plan, w, TOY)
        local_feats, local_logits = forward_local(x, w, TOY)
        assert output_deviation(dist.features, local_feats) < 1e-4
        assert np.argmax(dist.logits) == np.argmax(local_logits)

    def test_segment_means_at_full_count_is_bitwise_full_tensor(self):
        per_device = ExecutionPlan.full_tensor(TOY.seq_len, 2).partition.per_device
        sm = ExecutionPlan.segment_means(TOY.seq_len, 2, per_device)
        ft = ExecutionPlan.full_tensor(TOY.seq_len, 2)
        w = init_weights(TOY, seed=6)
        x = toy_input(TOY, 6)
        r1 = forward_distributed(x, sm, w, TOY)
        r2 = forward_distributed(x, ft, w, TOY)
        assert np.array_equal(r1.features, r2.features)
        assert np.array_equal(r1.logits, r2.logits)

    def test_bias_off_equals_bias_on_at_unit_segments(self):
        per_device = ExecutionPlan.full_tensor(TOY.seq_len, 2).partition.per_device
        on = ExecutionPlan.segment_means(TOY.seq_len, 2, per_device, multiplicity_bias=True)
        off = ExecutionPlan.segment_means(TOY.seq_len, 2, per_device, multiplicity_bias=False)
        w = init_weights(TOY, seed=8)
        x = toy_input(TOY, 8)
        assert np.array_equal(forward_distributed(x, on, w, TOY).features,
                              forward_distributed(x, off, w, TOY).features)

    def test_local_plan_rejected(self):
        w = init_weights(TOY, seed=0)
        with pytest.raises(ConfigError):
            forward_distributed(toy_input(TOY), ExecutionPlan.local(), w, TOY)

    def test_transport_error_propagates(self):
        class Broken:
            log = []

            def exchange(self, blocks):
                raise TransportError("link down")

        plan = ExecutionPlan.segment_means(TOY.seq_len, 2, 2)
        w = init_weights(TOY, seed=0)
        with pytest.raises(TransportError):
            forward_distributed(toy_input(TOY), plan, w, TOY, comm=Broken())

    def test_three_devices_round(self):
        cfg = ModelConfig(embed_dim=16, num_heads=2, num_layers=1, mlp_ratio=2.0,
                          seq_len=12, num_classes=4)
        plan = ExecutionPlan.segment_means(cfg.seq_len, 3, 2)
        w = init_weights(cfg, seed=5)
        res = forward_distributed(toy_input(cfg, 5), plan, w, cfg)
        assert res.features.shape == (12, 16)
        expected = (3 - 1) * 2 * 16
        assert res.comm_log[0] == [expected] * 3

    @pytest.mark.parametrize("devices", [3, 4])
    def test_full_tensor_matches_local_beyond_two_devices(self, devices):
        cfg = ModelConfig(embed_dim=16, num_heads=2, num_layers=2, mlp_ratio=2.0,
                          seq_len=12, num_classes=4)
        w = init_weights(cfg, seed=9)
        x = toy_input(cfg, 9)
        dist = forward_distributed(x, ExecutionPlan.full_tensor(cfg.seq_len, devices), w, cfg)
        local_feats, local_logits = forward_local(x, w, cfg)
        assert output_deviation(dist.features, local_feats) < 1e-4
        assert np.argmax(dist.logits) == np.argmax(local_logits)


class TestCollectiveCounting:
    def test_unequal_payloads_rejected(self):
        comm = CountingCollective()
        with pytest.raises(TransportError):
            comm.exchange([np.zeros((2, 3), np.float32), np.zeros((1, 3), np.float32)])


class TestOutputDeviation:
    def test_zero_when_equal(self):
        m = linalg.seeded_matrix(5, 4, 1.0, linalg.make_rng(1))
        assert output_deviation(m, m) == 0.0

    def test_doubling_gives_one(self):
        m = linalg.seeded_matrix(5, 4, 1.0, linalg.make_rng(2))
        assert output_deviation(2 * m, m) == pytest.approx(1.0, rel=1e-6)

    def test_matches_naive_double_loop(self):
        a = linalg.seeded_matrix(6, 3, 1.0, linalg.make_rng(3))
        b = linalg.seeded_matrix(6, 3, 1.0, linalg.make_rng(4))
        num = sum((float(a[i, j]) - float(b[i, j])) ** 2
                  for i in range(6) for j in range(3)) ** 0.5
        den = sum(float(b[i, j]) ** 2 for i in range(6) for j in range(3)) ** 0.5
        assert output_deviation(a, b) == pytest.approx(num / den, rel=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            output_deviation(np.zeros((2, 2), np.float32), np.zeros((3, 2), np.float32))


class TestWeightSerialisation:
    def test_round_trip(self, tmp_path):
        w = init_weights(TOY, seed=12)
        path = tmp_path / "weights.bin"
        save_weights(w, path)
        loaded = load_weights(path)
        assert loaded.config == TOY
        assert loaded.seed == 12
        for orig, back in zip(w.layers, loaded.layers):
            for name in type(w)._LAYER_FIELDS:
                assert np.array_equal(getattr(orig, name), getattr(back, name))
        assert np.array_equal(w.head, loaded.head)

    def test_loaded_weights_reproduce_forward(self, tmp_path):
        w = init_weights(TOY, seed=13)
        path = tmp_path / "weights.bin"
        save_weights(w, path)
        x = toy_input(TOY, 13)
        f1, l1 = forward_local(x, w, TOY)
        f2, l2 = forward_local(x, load_weights(path), TOY)
        assert np.array_equal(f1, f2) and np.array_equal(l1, l2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "weights.bin"
        path.write_bytes(b"garbage!")
        with pytest.raises(ShapeError):
            load_weights(path)


class TestEncoderBlockShapes:
    def test_output_rows_match_queries(self):
        w = init_weights(TOY, seed=1)
        x_p = toy_input(TOY)[:8]
        x_hat = toy_input(TOY)
        out = encoder_block(x_p, x_hat, w.layers[0], TOY)
        assert out.shape == (8, TOY.embed_dim)

    def test_width_mismatch(self):
        w = init_weights(TOY, seed=1)
        with pytest.raises(ShapeError):
            encoder_block(np.zeros((4, TOY.embed_dim), np.float32),
                          np.zeros((4, TOY.embed_dim + 1), np.float32),
                          w.layers[0], TOY)
