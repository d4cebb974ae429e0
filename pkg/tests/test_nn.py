import numpy as np
import pytest

from enftamper.errors import CorruptWeights, ShapeMismatch, VersionMismatch
from enftamper.nn import (LSTM, AttentionFuse, BiLSTM, LstmState, Parameter, Tensor, adam_step,
                          bce_from_probs, conv2d, dense, dropout, grad_check, layer_norm,
                          load_weights, lstm_cell, maxpool2d, save_weights, softmax,
                          softmax_head)
from enftamper.nn import weights as wfile
from enftamper.nn.tensor import mean, mul

TOL = 1e-4


def checked(build, params, seed=0):
    """grad_check on a random projection of ``build()`` so every output entry matters."""
    r_rng = np.random.default_rng(seed)
    r = None

    def loss():
        nonlocal r
        out = build()
        if r is None:
            r = r_rng.normal(size=out.shape)
        return mean(mul(out, Tensor(r, requires_grad=False)))
    return grad_check(loss, params)


def param(rng, *shape, scale=1.0, name="p"):
    return Parameter(rng.normal(0, scale, shape), name)


# ---------------------------------------------------------------- conv / pool

def test_conv_identity_1x1():
    x = np.array([[[[2.5]]]])
    out = conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.data, x)


def test_conv_same_padding_sums():
    out = conv2d(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1)).data[0, :, :, 0]
    assert out[1, 1] == 9 and out[0, 0] == 4 and out[0, 1] == 6
    assert out.shape == (3, 3)


def test_conv_is_cross_correlation():
    x = np.zeros((1, 3, 3, 1))
    x[0, 1, 1, 0] = 1.0
    k = np.arange(9.0).reshape(3, 3, 1, 1)
    out = conv2d(x, k, np.zeros(1)).data[0, :, :, 0]
    # an impulse reads the kernel back flipped under correlation
    np.testing.assert_array_equal(out, k[::-1, ::-1, 0, 0])


def test_conv_gradient(rng):
    x, k, b = param(rng, 2, 5, 5, 2), param(rng, 3, 3, 2, 3, scale=0.5), param(rng, 3)
    assert checked(lambda: conv2d(x, k, b), [x, k, b]) < TOL


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        conv2d(np.ones((1, 4, 4, 2)), np.ones((3, 3, 1, 1)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        conv2d(np.ones((1, 4, 4, 1)), np.ones((2, 2, 1, 1)), np.zeros(1))


def test_maxpool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert maxpool2d(x).data.item() == 4
    const = np.full((1, 6, 4, 3), 0.7)
    np.testing.assert_array_equal(maxpool2d(const).data, np.full((1, 3, 2, 3), 0.7))


def test_maxpool_odd_sizes():
    x = np.arange(25.0).reshape(1, 5, 5, 1)
    assert maxpool2d(x).shape == (1, 2, 2, 1)
    out = maxpool2d(x, ceil_mode=True)
    assert out.shape == (1, 3, 3, 1)
    assert out.data[0, 2, 2, 0] == 24
    # 45 -> 23 -> 12 -> 6 and 46 -> 23 -> 12 -> 6
    for n in (45, 46):
        y = np.zeros((1, n, n, 1))
        for _ in range(3):
            y = maxpool2d(y, ceil_mode=True).data
        assert y.shape == (1, 6, 6, 1)


def test_maxpool_tie_goes_to_first():
    x = Parameter(np.ones((1, 2, 2, 1)))
    maxpool2d(x).backward(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1, 0], [0, 0]])


def test_maxpool_gradient(rng):
    # a shuffled grid keeps every window's maximum clear of the FD step
    x = Parameter(rng.permutation(16).reshape(1, 4, 4, 1) * 0.1)
    assert checked(lambda: maxpool2d(x), [x]) < TOL
    y = Parameter(rng.permutation(25).reshape(1, 5, 5, 1) * 0.1)
    assert checked(lambda: maxpool2d(y, ceil_mode=True), [y]) < TOL


def test_maxpool_too_small():
    with pytest.raises(ShapeMismatch):
        maxpool2d(np.ones((1, 1, 4, 1)))


# ---------------------------------------------------------------- dense

def test_dense_examples():
    x = np.array([[0.3, -1.2, 4.0]])
    np.testing.assert_array_equal(dense(x, np.eye(3), np.zeros(3)).data, x)
    np.testing.assert_array_equal(dense(x, np.zeros((3, 2)), np.zeros(2), "sigmoid").data, [[0.5, 0.5]])
    np.testing.assert_allclose(dense(np.array([[-2.0, 3.0]]), np.eye(2), np.zeros(2), "leaky_relu").data,
                               [[-0.02, 3.0]])


def test_dense_gradient(rng):
    x, w, b = param(rng, 3, 8), param(rng, 8, 4), param(rng, 4)
    assert checked(lambda: dense(x, w, b, "leaky_relu"), [x, w, b]) < TOL
    for act in ("relu", "sigmoid", "tanh"):
        assert checked(lambda: dense(x, w, b, act), [x, w, b]) < TOL


def test_linear_gradient_is_nearly_exact(rng):
    x, w, b = param(rng, 2, 5), param(rng, 5, 3), param(rng, 3)
    assert checked(lambda: dense(x, w, b), [x, w, b]) < 1e-7


def test_dense_shape_error():
    with pytest.raises(ShapeMismatch):
        dense(np.ones((1, 3)), np.ones((4, 2)), np.zeros(2))


# ---------------------------------------------------------------- LSTM

def zero_cell(units, d_in):
    return Parameter(np.zeros((units + d_in, 4 * units))), Parameter(np.zeros(4 * units))


def test_lstm_zero_params_halves_cell(rng):
    c0 = rng.normal(size=(1, 4))
    w, b = zero_cell(4, 3)
    st = lstm_cell(rng.normal(size=(1, 3)), LstmState(Tensor(rng.normal(size=(1, 4))), Tensor(c0)), w, b)
    np.testing.assert_allclose(st.c.data, 0.5 * c0)
    np.testing.assert_allclose(st.y.data, 0.5 * np.tanh(0.5 * c0))


def test_lstm_zero_params_contracts(rng):
    w, b = zero_cell(5, 2)
    state = LstmState(Tensor(np.zeros((1, 5))), Tensor(rng.normal(size=(1, 5))))
    for _ in range(6):
        nxt = lstm_cell(rng.normal(size=(1, 2)), state, w, b)
        assert np.all(np.abs(nxt.c.data) <= 0.5 * np.abs(state.c.data) + 1e-15)
        state = nxt


def test_lstm_zero_input_uses_biases_only(rng):
    units = 3
    w = Parameter(rng.normal(size=(units + 2, 4 * units)))
    b = Parameter(rng.normal(size=4 * units))
    zero = Tensor(np.zeros((1, units)))
    st = lstm_cell(np.zeros((1, 2)), LstmState(zero, zero), w, b)
    bi, _, bg, _ = np.split(b.data, 4)
    sig = lambda v: 1 / (1 + np.exp(-v))
    np.testing.assert_allclose(st.c.data[0], sig(bi) * np.tanh(bg))


def test_lstm_gradient_three_steps(rng):
    lstm = LSTM(2, 4, rng, "l")
    seq = param(rng, 2, 3, 2)

    def build():
        _, state = lstm.run(seq)
        return state.y
    assert checked(build, lstm.parameters() + [seq]) < TOL


def test_lstm_shape_error(rng):
    with pytest.raises(ShapeMismatch):
        LSTM(3, 4, rng, "l").run(np.ones((1, 5, 2)))


def test_bilstm_single_step(rng):
    bi = BiLSTM(3, 2, rng, "b")
    x = rng.normal(size=(1, 1, 3))
    seq, final = bi(x)
    f = bi.fwd.run(x)[1].y.data
    bk = bi.bwd.run(x)[1].y.data
    np.testing.assert_allclose(seq.data[:, 0], np.concatenate([f, bk], axis=-1))
    np.testing.assert_allclose(final.data, seq.data[:, 0])


def test_bilstm_backward_half_is_reversed_forward(rng):
    bi = BiLSTM(3, 4, rng, "b")
    x = rng.normal(size=(2, 5, 3))
    seq, final = bi(x)
    outs, _ = bi.bwd.run(x[:, ::-1].copy())
    rev = np.stack([o.data for o in outs], axis=1)[:, ::-1]
    np.testing.assert_allclose(seq.data[..., 4:], rev, atol=1e-15)
    # final states are the last forward step and the first backward step
    np.testing.assert_allclose(final.data, np.concatenate([seq.data[:, -1, :4], seq.data[:, 0, 4:]], -1))


def test_bilstm_gradient(rng):
    bi = BiLSTM(2, 3, rng, "b")
    seq = param(rng, 1, 4, 2)
    assert checked(lambda: bi(seq)[0], bi.parameters() + [seq]) < TOL


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_is_zero():
    out = layer_norm(np.full((1, 6), 3.3), np.ones(6), np.zeros(6)).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_layer_norm_moments(rng):
    out = layer_norm(rng.normal(2.0, 3.0, (4, 50)), np.ones(50), np.zeros(50)).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-6)
    assert np.all(np.abs(out.std(axis=1) - 1) < 1e-3)


def test_layer_norm_gradient(rng):
    x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
    assert checked(lambda: layer_norm(x, g, b), [x, g, b]) < TOL


# ---------------------------------------------------------------- attention

def test_attention_zero_gate_halves(rng):
    att = AttentionFuse(16, rng, "a")
    att.gate.W.data[:] = 0.0
    s, t = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    out = att(s, t).data
    np.testing.assert_array_equal(out, 0.5 * np.concatenate([s, t], axis=1))


def test_attention_weights_strictly_inside(rng):
    att = AttentionFuse(16, rng, "a")
    for scale in (1.0, 1e2, 1e4):
        att(rng.normal(0, scale, (3, 8)), rng.normal(0, scale, (3, 8)))
        w = att.last_weights
        assert np.all(w > 0) and np.all(w < 1)


def test_attention_gradient(rng):
    att = AttentionFuse(16, rng, "a")
    # kink-avoidance: nonzero biases keep no ReLU pre-activation at exactly 0
    for p in att.parameters():
        if p.data.ndim == 1:
            p.data[:] = rng.normal(0, 0.1, p.shape)
    s, t = param(rng, 2, 8), param(rng, 2, 8)
    assert checked(lambda: att(s, t), att.parameters() + [s, t]) < TOL


def test_attention_shape_error(rng):
    with pytest.raises(ShapeMismatch):
        AttentionFuse(16, rng, "a")(np.ones((1, 8)), np.ones((1, 9)))


# ---------------------------------------------------------------- head and loss

def test_softmax_cases():
    np.testing.assert_array_equal(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    p = softmax(np.array([1000.0, 0.0]))
    assert p[0] == 1.0 and 0 <= p[1] < 1e-300 and np.all(np.isfinite(p))
    np.testing.assert_allclose(softmax(np.array([np.log(3), 0.0])), [0.75, 0.25], atol=1e-15)


def test_softmax_sums_to_one(rng):
    p = softmax_head(rng.normal(0, 30, (50, 7)), rng.normal(size=(7, 2)), np.zeros(2)).data
    assert np.all(p > 0) and np.all(np.abs(p.sum(axis=1) - 1) < 1e-9)


def test_bce_cases():
    assert bce_from_probs(np.array([[1.0, 0.0]]), [0]).data < 1e-11
    for label in (0, 1):
        assert abs(bce_from_probs(np.array([[0.5, 0.5]]), [label]).data - np.log(2)) < 1e-12
    # clamping keeps an impossible label finite
    assert abs(bce_from_probs(np.array([[1.0, 0.0]]), [1]).data - -np.log(1e-12)) < 1e-9


def test_head_and_bce_gradient(rng):
    x, w, b = param(rng, 4, 6), param(rng, 6, 2), param(rng, 2)
    labels = np.array([0, 1, 1, 0])
    err = grad_check(lambda: bce_from_probs(softmax_head(x, w, b), labels), [x, w, b])
    assert err < TOL


# ---------------------------------------------------------------- adam

def test_adam_first_step_is_lr_sign():
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    p.grad = np.array([0.3, -4.0, 1e-3])
    adam_step([p], 0.001, 1)
    np.testing.assert_allclose(p.data, [1.0 - 0.001, -2.0 + 0.001, 0.5 - 0.001], rtol=0, atol=1e-8)


def test_adam_zero_grad_no_move():
    p = Parameter(np.array([1.0, 2.0]))
    adam_step([p], 0.01, 1)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_monotone_with_constant_grad():
    p = Parameter(np.array([0.0]))
    seen = [0.0]
    for t in (1, 2, 3):
        p.grad = np.array([2.0])
        adam_step([p], 0.01, t)
        seen.append(float(p.data[0]))
    assert seen[0] > seen[1] > seen[2] > seen[3]


# ---------------------------------------------------------------- dropout

def test_dropout_eval_and_zero_rate(rng):
    x = rng.normal(size=(4, 5))
    assert np.array_equal(dropout(x, 0.2, False, rng).data, x)
    assert np.array_equal(dropout(x, 0.0, True, rng).data, x)


def test_dropout_rate_monte_carlo():
    out = dropout(np.ones(100_000), 0.2, True, np.random.default_rng(7)).data
    assert abs(np.mean(out == 0) - 0.2) <= 0.01
    assert np.allclose(out[out != 0], 1.25)


def test_dropout_deterministic_given_seed():
    a = dropout(np.ones(50), 0.2, True, np.random.default_rng(3)).data
    b = dropout(np.ones(50), 0.2, True, np.random.default_rng(3)).data
    assert np.array_equal(a, b)


def test_dropout_rate_bounds():
    with pytest.raises(ValueError):
        dropout(np.ones(3), 1.0, True, np.random.default_rng(0))


# ---------------------------------------------------------------- autodiff plumbing

def test_shared_parameter_accumulates(rng):
    w = param(rng, 3, 3)
    x = np.ones((1, 3))
    # w is used twice, so its gradient is the sum of two paths
    assert checked(lambda: dense(dense(x, w, np.zeros(3)), w, np.zeros(3)), [w]) < TOL


def test_backward_needs_scalar():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones(3), requires_grad=True).backward()


# ---------------------------------------------------------------- weight files

def named(rng):
    return [("a.w", rng.normal(size=(3, 2))), ("a.b", rng.normal(size=2)), ("s", np.array(1.5))]


def test_weights_round_trip(tmp_path, rng):
    src = named(rng)
    save_weights(src, tmp_path / "m.enfw", {"note": "x"})
    back = load_weights(tmp_path / "m.enfw")
    assert [n for n, _ in back] == [n for n, _ in src]
    for (_, a), (_, b) in zip(src, back):
        assert a.shape == b.shape and np.array_equal(a, b)
    side = wfile.read_sidecar(tmp_path / "m.enfw")
    assert side["parameters"][0] == {"name": "a.w", "shape": [3, 2]}
    assert side["meta"] == {"note": "x"}


def test_weights_layout(rng):
    blob = wfile.encode([("w", np.array([[1.0, 2.0]]))])
    assert blob[:4] == b"ENFW"
    assert blob[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert blob[12:16] == (1).to_bytes(4, "little") and blob[16:17] == b"w"
    assert np.frombuffer(blob[29:45], "<f8").tolist() == [1.0, 2.0]


def test_weights_truncated(tmp_path, rng):
    blob = wfile.encode(named(rng))
    for cut in (10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptWeights):
            wfile.decode(blob[:cut])


def test_weights_bit_flip(rng):
    blob = bytearray(wfile.encode(named(rng)))
    blob[40] ^= 0x01
    with pytest.raises(CorruptWeights):
        wfile.decode(bytes(blob))


def test_weights_future_version(rng):
    blob = bytearray(wfile.encode(named(rng)))
    blob[4:8] = (2).to_bytes(4, "little")
    with pytest.raises(VersionMismatch):
        wfile.decode(bytes(blob))
