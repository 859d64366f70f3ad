import numpy as np
import pytest

from spectrast.core import ClassKind, ClassRegistry, WavenumberAxis
from spectrast.errors import CheckpointError, ConfigError, ShapeError
from spectrast.model import (
    STConfig,
    check_compat,
    forward,
    init,
    load_checkpoint,
    parameter_count,
    predict,
    predict_proba,
    save_checkpoint,
)

TINY = STConfig(depth_i=1, heads_j=2, mlp_ratio_k=2, d_model=8,
                n_classes=4, seq_len=32, dropout_p=0.1)


class TestConfig:
    def test_defaults(self):
        cfg = STConfig()
        assert (cfg.depth_i, cfg.heads_j, cfg.mlp_ratio_k) == (1, 10, 3)
        assert cfg.d_model == 40 and cfg.seq_len == 480 and cfg.n_classes == 15

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            STConfig(d_model=40, heads_j=7)

    def test_invalid_ranges(self):
        with pytest.raises(ConfigError):
            STConfig(depth_i=0)
        with pytest.raises(ConfigError):
            STConfig(n_classes=1)
        with pytest.raises(ConfigError):
            STConfig(dropout_p=1.0)

    def test_dict_round_trip(self):
        cfg = STConfig(depth_i=2, heads_j=4, d_model=16, n_classes=5,
                       seq_len=64, use_positional_embedding=False)
        assert STConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_deterministic(self):
        a, b = init(TINY, seed=3), init(TINY, seed=3)
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_seed_changes_weights(self):
        a, b = init(TINY, seed=0), init(TINY, seed=1)
        assert not np.array_equal(a.embed_w.data, b.embed_w.data)

    def test_parameter_count_closed_form(self):
        for cfg in (TINY, STConfig(), STConfig(depth_i=2, heads_j=4, d_model=16,
                                               n_classes=5, seq_len=64)):
            assert init(cfg, 0).n_parameters() == parameter_count(cfg)

    def test_no_positional_table_when_disabled(self):
        cfg = STConfig(depth_i=1, heads_j=2, d_model=8, n_classes=3, seq_len=16,
                       use_positional_embedding=False)
        params = init(cfg, 0)
        assert params.pos is None
        assert init(cfg, 0).n_parameters() == parameter_count(cfg)

    def test_truncated_init_bounded(self):
        params = init(TINY, seed=5)
        w = params.blocks[0].mha.wq.data
        assert np.abs(w).max() <= 2 * 0.02 + 1e-12

    def test_copy_is_deep(self):
        params = init(TINY, seed=0)
        dup = params.copy()
        dup.embed_w.data[...] = 0.0
        assert not np.array_equal(dup.embed_w.data, params.embed_w.data)


class TestForward:
    def test_logit_shape(self):
        params = init(TINY, seed=0)
        x = np.random.default_rng(0).random((5, TINY.seq_len))
        out = forward(x, params, TINY, training=False)
        assert out.shape == (5, TINY.n_classes)

    def test_wrong_length_rejected(self):
        params = init(TINY, seed=0)
        with pytest.raises(ShapeError):
            forward(np.zeros((2, TINY.seq_len + 1)), params, TINY)

    def test_inference_deterministic(self):
        params = init(TINY, seed=0)
        x = np.random.default_rng(1).random((3, TINY.seq_len))
        a = forward(x, params, TINY, training=False).data
        b = forward(x, params, TINY, training=False).data
        assert np.array_equal(a, b)

    def test_training_needs_rng_for_dropout(self):
        params = init(TINY, seed=0)
        x = np.zeros((1, TINY.seq_len))
        with pytest.raises(ConfigError):
            forward(x, params, TINY, training=True)

    def test_dropout_changes_training_output(self):
        params = init(TINY, seed=0)
        x = np.random.default_rng(2).random((2, TINY.seq_len))
        a = forward(x, params, TINY, training=True, rng=np.random.default_rng(0)).data
        b = forward(x, params, TINY, training=True, rng=np.random.default_rng(1)).data
        assert not np.array_equal(a, b)

    def test_pool_weights_are_distribution(self):
        params = init(TINY, seed=0)
        x = np.random.default_rng(3).random((4, TINY.seq_len))
        sink = []
        forward(x, params, TINY, training=False, pool_weights_out=sink)
        assert sink[0].shape == (4, TINY.seq_len)
        assert np.allclose(sink[0].sum(axis=1), 1.0, atol=1e-9)

    def test_attention_weights_shape(self):
        params = init(TINY, seed=0)
        x = np.random.default_rng(4).random((2, TINY.seq_len))
        sink = []
        forward(x, params, TINY, training=False, attn_weights_out=sink)
        assert len(sink) == TINY.depth_i
        assert sink[0].shape == (2, TINY.heads_j, TINY.seq_len, TINY.seq_len)

    def test_depth_stacks_blocks(self):
        cfg2 = STConfig(depth_i=2, heads_j=2, mlp_ratio_k=2, d_model=8,
                        n_classes=4, seq_len=32)
        params = init(cfg2, seed=0)
        assert len(params.blocks) == 2
        x = np.random.default_rng(5).random((2, 32))
        assert forward(x, params, cfg2).shape == (2, 4)

    def test_residual_toggle_changes_output(self):
        base = STConfig(depth_i=1, heads_j=2, mlp_ratio_k=2, d_model=8,
                        n_classes=4, seq_len=32, dropout_p=0.0)
        nores = STConfig(depth_i=1, heads_j=2, mlp_ratio_k=2, d_model=8,
                         n_classes=4, seq_len=32, dropout_p=0.0, residual=False)
        params = init(base, seed=0)
        x = np.random.default_rng(6).random((2, 32))
        a = forward(x, params, base).data
        b = forward(x, params, nores).data
        assert not np.allclose(a, b)


class TestPredict:
    def test_proba_rows_sum_to_one(self):
        params = init(TINY, seed=0)
        x = np.random.default_rng(7).random((9, TINY.seq_len))
        probs = predict_proba(x, params, TINY, chunk=4)
        assert probs.shape == (9, TINY.n_classes)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_chunking_invariant(self):
        params = init(TINY, seed=0)
        x = np.random.default_rng(8).random((7, TINY.seq_len))
        a = predict_proba(x, params, TINY, chunk=2)
        b = predict_proba(x, params, TINY, chunk=7)
        assert np.allclose(a, b, atol=1e-12)

    def test_predict_is_argmax(self):
        params = init(TINY, seed=0)
        x = np.random.default_rng(9).random((5, TINY.seq_len))
        assert np.array_equal(
            predict(x, params, TINY),
            predict_proba(x, params, TINY).argmax(axis=1),
        )


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init(TINY, seed=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, TINY, path)
        loaded, cfg = load_checkpoint(path)
        assert cfg == TINY
        for (_, a), (_, b) in zip(params.named_parameters(), loaded.named_parameters()):
            assert np.array_equal(a.data, b.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        params = init(TINY, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, TINY, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        params = init(TINY, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, TINY, path)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestCompat:
    def make_registry(self, n):
        return ClassRegistry(tuple(
            (f"c{i}", ClassKind.BACTERIAL if i else ClassKind.BACKGROUND)
            for i in range(n)
        ))

    def test_class_count_mismatch(self):
        with pytest.raises(CheckpointError):
            check_compat(TINY, self.make_registry(TINY.n_classes + 1))

    def test_axis_mismatch(self):
        with pytest.raises(CheckpointError):
            check_compat(TINY, self.make_registry(TINY.n_classes),
                         WavenumberAxis(700, 1600, TINY.seq_len + 1))

    def test_compatible_passes(self):
        check_compat(TINY, self.make_registry(TINY.n_classes),
                     WavenumberAxis(700, 1600, TINY.seq_len))
