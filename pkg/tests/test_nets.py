import numpy as np
import pytest
from scipy.special import expit

from facemetric.gradcheck import finite_diff_check
from facemetric.nets.builders import (
    EmbeddingNet,
    build,
    build_c3d_lite,
    build_inception_lite,
    build_lstm2d_lite,
    count_conv_params,
    embed,
)
from facemetric.nets.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from facemetric.nets.convlstm import ConvLSTMState, convlstm2d, convlstm2d_step
from facemetric.nets.layers import BuildError, Conv, ConvLSTM2D, Dense, Flatten, InceptionBlock
from facemetric.tensor import ShapeError, Tensor, backward, mul, tsum, zero_grad

from oracles import naive_conv2d


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=float), requires_grad=True)


def lstm_params(rng, c, f, k=3, scale=0.4):
    return {"wx": leaf(rng.normal(0, scale, (4 * f, c, k, k))), "wh": leaf(rng.normal(0, scale, (4 * f, f, k, k))),
            "b": leaf(rng.normal(0, scale, 4 * f))}


# -- ConvLSTM ------------------------------------------------------------------

def test_convlstm_zero_fixed_point():
    params = {"wx": Tensor(np.ones((8, 3, 3, 3))), "wh": Tensor(np.ones((8, 2, 3, 3))), "b": Tensor(np.zeros(8))}
    state = convlstm2d_step(Tensor(np.zeros((3, 5, 5))), ConvLSTMState.zeros(2, (5, 5)), params)
    np.testing.assert_array_equal(state.h.data, 0.0)
    np.testing.assert_array_equal(state.c.data, 0.0)


def test_convlstm_saturated_forget_gate_keeps_cell():
    rng = np.random.default_rng(0)
    p = lstm_params(rng, 2, 3)
    p["b"].data[3:6] = 1e3
    c0 = rng.normal(size=(3, 4, 4))
    h0 = rng.normal(size=(3, 4, 4))
    x = rng.normal(size=(2, 4, 4))
    out = convlstm2d_step(Tensor(x), ConvLSTMState(Tensor(h0), Tensor(c0)), p)
    z = naive_gates(x, h0, p)
    i, g = expit(z[0:3]), np.tanh(z[6:9])
    np.testing.assert_allclose(out.c.data, c0 + i * g, atol=1e-12)


def naive_gates(x, h, p):
    wx, wh, b = p["wx"].data, p["wh"].data, p["b"].data
    return naive_conv2d(x, wx, b, padding="same") + naive_conv2d(h, wh, None, padding="same")


def test_convlstm_step_matches_gate_formula():
    rng = np.random.default_rng(1)
    p = lstm_params(rng, 3, 2)
    x, h0, c0 = rng.normal(size=(3, 5, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))
    out = convlstm2d_step(Tensor(x), ConvLSTMState(Tensor(h0), Tensor(c0)), p)
    z = naive_gates(x, h0, p)
    i, f, g, o = expit(z[0:2]), expit(z[2:4]), np.tanh(z[4:6]), expit(z[6:8])
    c1 = f * c0 + i * g
    np.testing.assert_allclose(out.c.data, c1, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.h.data, o * np.tanh(c1), rtol=0, atol=1e-12)


def test_fused_sequence_equals_stepwise():
    rng = np.random.default_rng(2)
    p = lstm_params(rng, 3, 4)
    x = rng.normal(size=(2, 3, 5, 6, 6))
    state = ConvLSTMState.zeros(4, (6, 6), batch=2)
    hs = []
    for t in range(5):
        state = convlstm2d_step(Tensor(x[:, :, t]), state, p)
        hs.append(state.h.data)
    seq = convlstm2d(Tensor(x), p["wx"], p["wh"], p["b"], return_sequences=True).data
    np.testing.assert_allclose(seq, np.stack(hs, axis=2), rtol=0, atol=1e-12)
    last = convlstm2d(Tensor(x), p["wx"], p["wh"], p["b"], return_sequences=False).data
    np.testing.assert_allclose(last, hs[-1], rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_fused_convlstm_gradients(seed):
    rng = np.random.default_rng(seed)
    p = lstm_params(rng, 2, 2)
    x = leaf(rng.normal(size=(2, 2, 3, 4, 4)))
    seqs = bool(seed % 2)
    w = Tensor(rng.normal(size=convlstm2d(x, p["wx"], p["wh"], p["b"], seqs).shape))
    f = lambda ts: tsum(mul(convlstm2d(ts[0], ts[1], ts[2], ts[3], seqs), w))
    assert finite_diff_check(f, [x, p["wx"], p["wh"], p["b"]], max_coords=30, seed=seed) < 1e-6


def test_convlstm_shape_errors():
    rng = np.random.default_rng(3)
    p = lstm_params(rng, 3, 2)
    with pytest.raises(ShapeError):
        convlstm2d(Tensor(np.zeros((1, 4, 2, 5, 5))), p["wx"], p["wh"], p["b"])
    with pytest.raises(ShapeError):
        convlstm2d_step(Tensor(np.zeros((3, 5, 5))), ConvLSTMState.zeros(2, (4, 4)), p)


# -- builders ------------------------------------------------------------------

def test_inception_embedding_shape_and_block_channels():
    net = build_inception_lite()
    assert embed(net, np.zeros((2, 3, 32, 32))).shape == (2, 128)
    blocks = [layer for layer in net.layers if isinstance(layer, InceptionBlock)]
    assert len(blocks) == 2
    for block in blocks:
        p = block.spec.params
        assert block.out_channels == p["b1"] + p["b3"] + p["b5"] + p["pool_proj"]


def test_inception_parameter_count_from_layer_algebra():
    def block(c, b1=8, r3=8, b3=16, r5=4, b5=4, pp=4):
        return (count_conv_params(c, b1, (1, 1)) + count_conv_params(c, r3, (1, 1))
                + count_conv_params(r3, b3, (3, 3)) + count_conv_params(c, r5, (1, 1))
                + count_conv_params(r5, b5, (5, 5)) + count_conv_params(c, pp, (1, 1)))

    stem = count_conv_params(3, 16, (3, 3))
    flat = 32 * 4 * 4  # 32x32 -> three 2x2 pools -> 4x4 with 8+16+4+4 channels
    expected = stem + block(16) + block(32) + (flat * 128 + 128) + (128 * 128 + 128)
    assert build_inception_lite().num_parameters() == expected


def test_inception_rejects_small_input():
    with pytest.raises(BuildError):
        build_inception_lite((3, 8, 8))


def test_c3d_shapes_and_kernels():
    net = build_c3d_lite()
    assert embed(net, np.zeros((1, 3, 8, 32, 32))).shape == (1, 128)
    convs = [layer for layer in net.layers if isinstance(layer, Conv)]
    assert all(layer.spec.params["kernel"] == (3, 3, 3) for layer in convs)
    flatten_at = next(i for i, layer in enumerate(net.layers) if isinstance(layer, Flatten))
    assert net.shapes[flatten_at][1] == 1  # temporal axis collapsed
    with pytest.raises(BuildError):
        build_c3d_lite((3, 6, 32, 32))


def test_same_seed_same_parameters():
    a, b = build_c3d_lite(seed=5), build_c3d_lite(seed=5)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


def test_lstm_has_five_stages_and_is_order_sensitive():
    net = build_lstm2d_lite((3, 8, 16, 16))
    assert sum(isinstance(layer, ConvLSTM2D) for layer in net.layers) == 5
    x = np.random.default_rng(0).uniform(size=(1, 3, 8, 16, 16))
    e1 = embed(net, x)
    e2 = embed(net, x[:, :, ::-1].copy())
    assert e1.shape == (1, 128)
    assert not np.allclose(e1, e2)


def test_lstm_default_input():
    net = build_lstm2d_lite()
    assert net.forward(Tensor(np.zeros((1, 3, 8, 32, 32)))).shape == (1, 128)


def test_final_layer_must_be_linear_embedding():
    with pytest.raises(BuildError):
        EmbeddingNet("bad", [Flatten(), Dense(128, "relu")], (4, 2, 2))
    with pytest.raises(BuildError):
        build("resnet", (3, 32, 32))


def test_embed_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        embed(build_inception_lite(), np.zeros((1, 3, 16, 16)))


def test_eval_embeddings_are_pure():
    net = build_inception_lite((3, 16, 16))
    x = np.random.default_rng(0).normal(size=(3, 3, 16, 16))
    x[1] = x[0]
    e1, e2 = embed(net, x), embed(net, x)
    np.testing.assert_array_equal(e1, e2)
    np.testing.assert_array_equal(e1[0], e1[1])
    batch32 = embed(net, np.repeat(x, 11, axis=0)[:32])
    assert batch32.shape == (32, 128)


SMALL = {
    "inception_lite": (3, 16, 16),
    "c3d_lite": (3, 8, 16, 16),
    "lstm2d_lite": (3, 8, 16, 16),
}


@pytest.mark.parametrize("arch", sorted(SMALL))
def test_gradient_reaches_every_parameter(arch):
    net = build(arch, SMALL[arch], seed=1)
    x = np.random.default_rng(1).uniform(size=(4,) + SMALL[arch])
    out = net.forward(Tensor(x), training=True)
    w = Tensor(np.random.default_rng(2).normal(size=out.shape))
    backward(tsum(mul(out, w)))
    for name, p in net.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name
    zero_grad(net.parameters())


@pytest.mark.parametrize("arch", sorted(SMALL))
def test_end_to_end_gradcheck(arch):
    net = build(arch, SMALL[arch], seed=3)
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(3,) + SMALL[arch])
    w = Tensor(rng.normal(size=(3, 128)))
    f = lambda params: tsum(mul(net.forward(Tensor(x), training=True), w))
    # eps below the default keeps perturbations from straddling relu and max-pool kinks
    assert finite_diff_check(f, net.parameters(), eps=1e-6, max_coords=3, seed=3) < 1e-6


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    net = build_lstm2d_lite((3, 8, 16, 16), seed=4)
    net.forward(Tensor(np.random.default_rng(0).uniform(size=(2, 3, 8, 16, 16))), training=True)
    path = save_checkpoint(net, tmp_path / "net.fmck", {"margin": 2.0})
    loaded, extra = load_checkpoint(path)
    assert extra == {"margin": 2.0}
    for (name, a), (_, b) in zip(sorted(net.state_dict().items()), sorted(loaded.state_dict().items())):
        np.testing.assert_array_equal(a, b, err_msg=name)
    x = np.random.default_rng(1).uniform(size=(2, 3, 8, 16, 16))
    np.testing.assert_array_equal(embed(net, x), embed(loaded, x))


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.fmck"
    bad.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    net = build_inception_lite((3, 16, 16))
    path = save_checkpoint(net, tmp_path / "ok.fmck")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
