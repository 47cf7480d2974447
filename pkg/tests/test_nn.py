import numpy as np
import pytest

from agro_pinn.errors import ConfigError, DataError
from agro_pinn.nn import layers as L
from agro_pinn.nn.baselines import (
    flatten_sequences,
    init_transformer,
    linear_regression_fit,
    linear_regression_predict,
    transformer_encoder_forward,
)
from agro_pinn.nn.model import (
    CONSTANT_KY,
    ModelConfig,
    PGLSTM,
    attention,
    load_checkpoint,
    lstm_forward,
    pg_forward,
    save_checkpoint,
)

# frozen from tests/oracles.py
ATT_Q = [[1, .5], [-.5, 2]]
ATT_K = [[.3, -1], [1.5, .7]]
ATT_V = [[2, -1], [.5, 3]]
ATT_CTX = [[0.78510188205518371357, 2.2397283145195100972], [0.68199440947011134348, 2.5146815747463697507]]
ATT_W = [[0.19006792137012247571, 0.80993207862987752429], [0.12132960631340756232, 0.87867039368659243768]]

LSTM_W = [[-0.48, -0.4, 0.63, -0.82, 0.2, 0.46, -0.62, -0.89], [-0.45, 0.31, 0.12, -0.7, -0.13, 0.34, -0.15, 0.27]]
LSTM_U = [[0.93, 0.37, -0.22, -0.63, -0.31, 0.02, 0.78, 0.55], [-0.36, 0.85, -0.06, 0.39, -0.79, -0.79, -0.6, 0.77]]
LSTM_B = [0.36, 0.7, 0.29, -0.19, 0.03, 0.19, 0.72, -0.12]
LSTM_X = [[0.5, -1.0], [1.5, 0.25]]
LSTM_H = [[0.10248217819700818103, 0.013213343857101774008], [0.10199400397204836830, 0.083670345505171935270]]

TRANSFORMER_X = [[0.4, -1.2], [1.5, 0.3]]
TRANSFORMER_Y = -0.15510218299791006524

TINY = dict(input_dim=5, hidden_dim=4, trunk_dim=4, head_init="uniform", seed=1)


def tiny_model(**kw):
    cfg = ModelConfig(**{**TINY, **kw})
    return PGLSTM(cfg)


def tiny_inputs(b=3, t=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, t, 5)), rng.uniform(1, 4, (b, t))


class TestGoldens:
    def test_attention(self):
        ctx, w = attention(ATT_Q, ATT_K, ATT_V)
        np.testing.assert_allclose(ctx, ATT_CTX, rtol=1e-10)
        np.testing.assert_allclose(w, ATT_W, rtol=1e-10)

    def test_lstm(self):
        h = lstm_forward([(np.array(LSTM_W), np.array(LSTM_U), np.array(LSTM_B))], np.array(LSTM_X))
        np.testing.assert_allclose(h, LSTM_H, rtol=1e-10)

    def test_transformer(self):
        p = init_transformer(2, width=4, kernel=3, ffn_dim=8, mlp_dim=3, seed=11)
        assert transformer_encoder_forward(p, np.array(TRANSFORMER_X)) == pytest.approx(TRANSFORMER_Y, rel=1e-10)

    def test_regression_three_points(self):
        w, b = linear_regression_fit([0.0, 1.0, 2.0], [0.0, 1.0, 3.0])
        assert w[0] == pytest.approx(1.5, rel=1e-10) and b == pytest.approx(-1 / 6, rel=1e-10)


class TestAttention:
    def test_single_step(self):
        ctx, w = attention([[0.3, 0.1]], [[2.0, 1.0]], [[4.0, -1.0]])
        assert w[0, 0] == 1.0
        np.testing.assert_array_equal(ctx, [[4.0, -1.0]])

    def test_rows_sum_to_one_and_masking(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(2, 5, 3))
        mask = np.ones((2, 5), bool)
        mask[1, 3:] = False
        _, w, _ = L.attention_forward(q, q, q, key_mask=mask)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(w[1, :, 3:] == 0.0)

    def test_shape_errors(self):
        with pytest.raises(DataError):
            attention([[1.0, 2.0]], [[1.0]], [[1.0]])


class TestModel:
    def test_shapes_and_determinism(self):
        m = tiny_model()
        x, etx = tiny_inputs()
        a = m.predict(x, etx=etx)
        b = m.predict(x, etx=etx)
        assert a.eta_hat.shape == a.ky_hat.shape == (3, 4)
        np.testing.assert_array_equal(a.eta_hat, b.eta_hat)

    def test_constant_ky(self):
        m = tiny_model(head_mode="constant_ky")
        x, etx = tiny_inputs()
        assert np.all(m.predict(x, etx=etx).ky_hat == CONSTANT_KY)

    def test_deficit_head_respects_upper_bound(self):
        m = tiny_model(output_activation="deficit", head_init="uniform", eta_bias_init=0.9)
        x, etx = tiny_inputs(seed=4)
        assert np.all(m.predict(x * 50, etx=etx).eta_hat <= etx)

    def test_zero_head_init_starts_at_bias(self):
        m = tiny_model(output_activation="none", head_init="zero", eta_bias_init=0.9)
        x, etx = tiny_inputs()
        out = m.predict(x, etx=etx)
        np.testing.assert_allclose(out.eta_hat, 0.9 * etx)
        np.testing.assert_allclose(out.ky_hat, CONSTANT_KY)

    def test_attention_path_is_isolated(self):
        plain = tiny_model(use_attention=False)
        attn = tiny_model(use_attention=True)
        assert set(plain.params) == set(attn.params)
        for k in plain.params:
            np.testing.assert_array_equal(plain.params[k], attn.params[k])
        x, etx = tiny_inputs()
        assert not np.allclose(plain.predict(x, etx=etx).eta_hat, attn.predict(x, etx=etx).eta_hat)

    def test_inference_independent_of_batch(self):
        m = tiny_model()
        x, etx = tiny_inputs(b=4)
        m.forward(x, training=True, rng=np.random.default_rng(0), etx=etx)
        full = m.predict(x, etx=etx).eta_hat
        single = m.predict(x[2:3], etx=etx[2:3]).eta_hat
        np.testing.assert_allclose(single[0], full[2], rtol=1e-12)

    def test_padding_does_not_change_valid_steps(self):
        m = tiny_model(use_attention=True)
        x, etx = tiny_inputs(b=1, t=3)
        padded_x = np.concatenate([x, np.full((1, 2, 5), 7.0)], axis=1)
        padded_etx = np.concatenate([etx, np.zeros((1, 2))], axis=1)
        mask = np.array([[True] * 3 + [False] * 2])
        a = m.predict(x, etx=etx).eta_hat
        b = m.predict(padded_x, mask, padded_etx).eta_hat
        np.testing.assert_allclose(b[:, :3], a, rtol=1e-12)

    def test_finite_for_large_inputs(self):
        m = tiny_model(use_attention=True)
        x, etx = tiny_inputs()
        out = m.predict(np.clip(x * 1e3, -1e3, 1e3), etx=etx)
        assert np.all(np.isfinite(out.eta_hat)) and np.all(np.isfinite(out.ky_hat))

    def test_pg_forward_single_sample(self):
        m = tiny_model()
        x, etx = tiny_inputs(b=1)
        out = pg_forward(m, x[0], etx[0])
        assert out.eta_hat.shape == (4,)
        with pytest.raises(DataError):
            pg_forward(m, x, etx)

    def test_training_needs_rng_and_shapes_checked(self):
        m = tiny_model()
        x, etx = tiny_inputs()
        with pytest.raises(ConfigError):
            m.forward(x, training=True, etx=etx)
        with pytest.raises(DataError):
            m.predict(x[..., :3], etx=etx)
        with pytest.raises(DataError):
            m.predict(x)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(head_mode="fixed")
        with pytest.raises(ConfigError):
            ModelConfig(output_activation="deficit", eta_bias_init=1.0)
        assert ModelConfig(seed=1).compatible_with(ModelConfig(seed=2))
        assert not ModelConfig().compatible_with(ModelConfig(hidden_dim=8))

    def test_checkpoint_round_trip(self, tmp_path):
        m = tiny_model(use_attention=True)
        x, etx = tiny_inputs()
        m.fit_normalization(x, np.ones((3, 4), bool), etx)
        save_checkpoint(m, tmp_path / "m.json", {"y_x": 9.5})
        back, meta = load_checkpoint(tmp_path / "m.json")
        assert meta == {"y_x": 9.5} and back.cfg == m.cfg
        np.testing.assert_array_equal(back.predict(x, etx=etx).eta_hat, m.predict(x, etx=etx).eta_hat)
        (tmp_path / "bad.json").write_text('{"format": "other"}')
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "bad.json")


class TestBatchNorm:
    def test_running_stats(self):
        x = np.arange(6.0).reshape(1, 3, 2)
        mask = np.array([[True, True, False]])
        running = {"mean": np.zeros(2), "var": np.ones(2)}
        L.batchnorm_forward(x, np.ones(2), np.zeros(2), mask, running, training=True)
        np.testing.assert_allclose(running["mean"], 0.1 * np.array([1.0, 2.0]))
        np.testing.assert_allclose(running["var"], 0.9 + 0.1 * np.array([2.0, 2.0]))


class TestBaselines:
    def test_transformer_feature_permutation(self):
        p = init_transformer(3, width=8, seed=2)
        x = np.random.default_rng(1).normal(size=(5, 3))
        perm = [2, 0, 1]
        q = dict(p, **{"conv.w": p["conv.w"][:, perm, :]})
        assert transformer_encoder_forward(q, x[:, perm]) == pytest.approx(transformer_encoder_forward(p, x), rel=1e-12)

    def test_transformer_scalar_and_errors(self):
        p = init_transformer(3, width=8, seed=2)
        assert isinstance(transformer_encoder_forward(p, np.ones((4, 3))), float)
        with pytest.raises(DataError):
            transformer_encoder_forward(p, np.ones((4, 2)))

    def test_realizable_regression(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 3))
        w_true = np.array([0.5, -2.0, 1.25])
        y = x @ w_true + 0.75
        w, b = linear_regression_fit(x, y)
        np.testing.assert_allclose(w, w_true, atol=1e-8)
        assert b == pytest.approx(0.75, abs=1e-8)
        np.testing.assert_allclose(linear_regression_predict(x, w, b), y, atol=1e-8)

    def test_constant_target(self):
        x = np.random.default_rng(1).normal(size=(20, 2))
        w, b = linear_regression_fit(x, np.full(20, 4.2))
        np.testing.assert_allclose(w, 0.0, atol=1e-10)
        assert b == pytest.approx(4.2)

    def test_duplicate_column_rescued_by_jitter(self):
        x = np.random.default_rng(2).normal(size=(30, 1))
        w, b = linear_regression_fit(np.hstack([x, x]), 3 * x[:, 0] + 1)
        assert w.sum() == pytest.approx(3.0, rel=1e-6) and b == pytest.approx(1.0, abs=1e-6)

    def test_regression_errors(self):
        with pytest.raises(DataError):
            linear_regression_fit(np.ones((2, 3)), np.ones(2))

    def test_flatten_mean_imputes(self):
        x = np.array([[[1.0], [2.0]], [[3.0], [0.0]]])
        mask = np.array([[True, True], [True, False]])
        flat, fill = flatten_sequences(x, mask)
        np.testing.assert_array_equal(flat, [[1.0, 2.0], [3.0, 2.0]])
