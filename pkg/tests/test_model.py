import numpy as np
import pytest

from wisteria.errors import ConfigError
from wisteria.model import (
    ModelConfig,
    ModelParams,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    encode,
    forward_all,
    head_forward,
    init_params,
    load_checkpoint,
    params_to_vector,
    save_checkpoint,
    stable_softmax,
    vector_to_params,
)


def small_config(**overrides):
    base = dict(
        feature_dim=5, hidden_dim=4, num_nodes=7, num_heads=3,
        activation="tanh", init_scale=1.0, seed=42,
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestInit:
    def test_biases_exactly_zero(self):
        params = init_params(small_config())
        np.testing.assert_array_equal(params.enc_b, 0.0)
        np.testing.assert_array_equal(params.head_b, 0.0)

    def test_weight_bounds(self):
        cfg = small_config(init_scale=0.7)
        params = init_params(cfg)
        assert np.abs(params.enc_w).max() <= 0.7 / np.sqrt(cfg.feature_dim)
        assert np.abs(params.head_w).max() <= 0.7 / np.sqrt(cfg.hidden_dim)

    def test_same_seed_identical(self):
        a = init_params(small_config())
        b = init_params(small_config())
        np.testing.assert_array_equal(a.enc_w, b.enc_w)
        np.testing.assert_array_equal(a.head_w, b.head_w)

    def test_heads_differ_across_indices(self):
        params = init_params(small_config())
        assert not np.array_equal(params.head_w[0], params.head_w[1])

    @pytest.mark.parametrize(
        "overrides",
        [dict(num_heads=0), dict(activation="relu"), dict(init_scale=0.0), dict(hidden_dim=0)],
    )
    def test_config_validation(self, overrides):
        with pytest.raises(ConfigError):
            small_config(**overrides)


class TestEncode:
    def test_identity_encoder_passthrough(self):
        params = ModelParams(
            enc_w=np.eye(4), enc_b=np.zeros(4),
            head_w=np.zeros((1, 7, 4)), head_b=np.zeros((1, 7)),
            activation="identity",
        )
        x = np.array([0.5, -1.0, 2.0, 0.0])
        np.testing.assert_array_equal(encode(params, x), x)

    def test_tanh_bounded(self):
        params = init_params(small_config())
        h = encode(params, np.full(5, 100.0))
        assert np.all(np.abs(h) < 1.0)

    def test_jacobian_matches_finite_differences(self):
        params = init_params(small_config(seed=3))
        x = np.array([0.3, -0.2, 0.9, 0.1, -0.5])
        # analytic: diag(1 - h^2) @ enc_w
        h = encode(params, x)
        analytic = (1.0 - h * h)[:, None] * params.enc_w
        step = 1e-6
        fd = np.zeros_like(analytic)
        for i in range(x.size):
            up, down = x.copy(), x.copy()
            up[i] += step
            down[i] -= step
            fd[:, i] = (encode(params, up) - encode(params, down)) / (2 * step)
        assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) <= 1e-5

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            encode(init_params(small_config()), np.zeros(9))


class TestHeadForward:
    def test_zero_logits_uniform(self):
        params = ModelParams(
            enc_w=np.zeros((4, 5)), enc_b=np.zeros(4),
            head_w=np.zeros((2, 7, 4)), head_b=np.zeros((2, 7)),
            activation="identity",
        )
        out = head_forward(params, 0, np.zeros(4))
        np.testing.assert_allclose(out, 1.0 / 7.0, atol=1e-15)

    def test_extreme_logits_stable(self):
        logits = np.zeros(7)
        logits[0] = 1000.0
        out = stable_softmax(logits)
        assert np.all(np.isfinite(out))
        assert int(np.argmax(out)) == 0
        assert out[0] > 1.0 - 1e-9

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=7)
        np.testing.assert_allclose(
            stable_softmax(logits), stable_softmax(logits + 123.456), atol=1e-12
        )

    def test_sums_to_one_within_tolerance(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            out = stable_softmax(rng.normal(scale=50.0, size=9))
            assert abs(out.sum() - 1.0) <= 1e-12

    def test_head_index_out_of_range(self):
        params = init_params(small_config())
        with pytest.raises(ConfigError):
            head_forward(params, 3, np.zeros(4))


class TestForwardAll:
    def test_single_head_composition(self):
        params = init_params(small_config(num_heads=1))
        x = np.array([0.1, 0.2, -0.3, 0.4, 0.0])
        np.testing.assert_array_equal(
            forward_all(params, x)[0], head_forward(params, 0, encode(params, x))
        )

    def test_identical_heads_identical_outputs(self):
        base = init_params(small_config())
        tied = ModelParams(
            enc_w=base.enc_w, enc_b=base.enc_b,
            head_w=np.stack([base.head_w[0]] * 3),
            head_b=np.stack([base.head_b[0]] * 3),
            activation=base.activation,
        )
        out = forward_all(tied, np.array([0.5, 0.1, -0.2, 0.3, 0.9]))
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[0], out[2])

    def test_outputs_sum_to_one(self):
        params = init_params(small_config())
        out = forward_all(params, np.array([1.0, -2.0, 0.5, 0.0, 3.0]))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_forward_jacobian_against_finite_differences():
    """Parameter-to-output Jacobian assembled from layer rules vs central FD."""
    params = init_params(small_config(seed=11))
    x = np.array([0.4, -0.7, 0.2, 0.0, 1.1])
    k_heads, v_nodes, d_h = params.head_w.shape
    d_x = params.feature_dim

    h = encode(params, x)
    act_grad = 1.0 - h * h
    probs = forward_all(params, x)

    def softmax_jac(p):
        return np.diag(p) - np.outer(p, p)

    num_params = params_to_vector(params).size
    analytic = np.zeros((k_heads * v_nodes, num_params))
    offset_enc_w = 0
    offset_enc_b = d_h * d_x
    offset_head_w = offset_enc_b + d_h
    offset_head_b = offset_head_w + k_heads * v_nodes * d_h
    for k in range(k_heads):
        js = softmax_jac(probs[k])  # dP/dS
        ds_dh = params.head_w[k]  # dS/dh
        dp_dh = js @ ds_dh
        dp_da = dp_dh * act_grad  # chain through tanh
        for v in range(v_nodes):
            row = k * v_nodes + v
            # encoder weights: dA[a,b] = delta(row a) x_b
            analytic[row, offset_enc_w : offset_enc_w + d_h * d_x] = np.outer(
                dp_da[v], x
            ).ravel()
            analytic[row, offset_enc_b : offset_enc_b + d_h] = dp_da[v]
            # head weights: dS_j/dW_{ab} = delta(j, a) h_b
            hw = np.zeros((v_nodes, d_h))
            hw += js[v][:, None] * h[None, :]
            start = offset_head_w + k * v_nodes * d_h
            analytic[row, start : start + v_nodes * d_h] = hw.ravel()
            start_b = offset_head_b + k * v_nodes
            analytic[row, start_b : start_b + v_nodes] = js[v]

    step = 1e-6
    vec = params_to_vector(params)
    fd = np.zeros_like(analytic)
    for i in range(vec.size):
        up, down = vec.copy(), vec.copy()
        up[i] += step
        down[i] -= step
        out_up = forward_all(vector_to_params(up, params), x).ravel()
        out_down = forward_all(vector_to_params(down, params), x).ravel()
        fd[:, i] = (out_up - out_down) / (2 * step)
    assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) <= 1e-5


class TestVectorRoundtrip:
    def test_roundtrip(self):
        params = init_params(small_config())
        back = vector_to_params(params_to_vector(params), params)
        np.testing.assert_array_equal(back.enc_w, params.enc_w)
        np.testing.assert_array_equal(back.head_w, params.head_w)

    def test_rejects_wrong_length(self):
        params = init_params(small_config())
        with pytest.raises(ConfigError):
            vector_to_params(np.zeros(3), params)


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        params = init_params(small_config(seed=19))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.enc_w, params.enc_w)
        np.testing.assert_array_equal(loaded.enc_b, params.enc_b)
        np.testing.assert_array_equal(loaded.head_w, params.head_w)
        np.testing.assert_array_equal(loaded.head_b, params.head_b)
        assert loaded.activation == params.activation

    def test_bytes_deterministic(self):
        params = init_params(small_config())
        assert checkpoint_to_bytes(params) == checkpoint_to_bytes(params)

    def test_layout_order(self):
        # declared order: enc_w, enc_b, then all head weights, then all head biases
        params = init_params(small_config(num_heads=2))
        blob = checkpoint_to_bytes(params)
        header, body = blob.split(b"\n", 1)
        assert b'"format": "ckpt-v1"' in header
        floats = np.frombuffer(body, dtype="<f8")
        d_h, d_x = params.enc_w.shape
        np.testing.assert_array_equal(floats[: d_h * d_x], params.enc_w.ravel())
        offset = d_h * d_x + d_h
        head_w_flat = floats[offset : offset + params.head_w.size]
        np.testing.assert_array_equal(head_w_flat, params.head_w.ravel())

    def test_rejects_wrong_format(self):
        params = init_params(small_config())
        blob = checkpoint_to_bytes(params).replace(b"ckpt-v1", b"ckpt-v9")
        with pytest.raises(ConfigError):
            checkpoint_from_bytes(blob)

    def test_rejects_truncated(self):
        params = init_params(small_config())
        with pytest.raises(ConfigError):
            checkpoint_from_bytes(checkpoint_to_bytes(params)[:-16])
