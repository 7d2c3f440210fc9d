import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurossm.model import (
    LARGE,
    SMALL,
    NetworkConfig,
    StreamingContext,
    classify,
    count_parameters,
    enumerate_parameters,
    forward_conv,
    forward_stream,
    init_network,
    load_network,
    pool_logits,
    predict,
    relu_sparsity,
    save_network,
)


def hand_count(I, H, N, blocks=4, C=10):
    encoder = I * H + H
    ssm = 2 * H * N * 3 + H  # complex a, b, c and real dt
    block = ssm + H + H * H + H  # + ssm bias, mixing layer
    decoder = H * C + C
    return encoder + blocks * block + decoder


@pytest.mark.parametrize("cfg,expected", [(SMALL, 67_082), (LARGE, 265_482)])
def test_parameter_counts(cfg, expected):
    assert count_parameters(cfg) == expected == hand_count(cfg.input_dim, cfg.model_dim, cfg.state_dim)


def test_enumerated_parameters_agree_with_formula(tiny_config):
    assert enumerate_parameters(init_network(tiny_config, 0)) == count_parameters(tiny_config)
    assert enumerate_parameters(init_network(SMALL, 0)) == 67_082


def test_s4d_lin_initialisation():
    net = init_network(NetworkConfig(model_dim=8, state_dim=5, num_blocks=1), seed=0)
    ssm = net.blocks[0].ssm
    assert np.allclose(ssm.a, -0.5 + 1j * np.pi * np.arange(5))
    assert np.all(ssm.b == 1)
    assert np.all((ssm.dt >= 1e-3) & (ssm.dt <= 1e-1))
    assert np.all(np.abs(net.encoder_w) <= 1.0)
    assert np.all(np.abs(net.blocks[0].mix_w) <= 1 / np.sqrt(8))


def test_init_is_deterministic(tiny_config):
    a, b = init_network(tiny_config, 7), init_network(tiny_config, 7)
    for k, v in a.named_arrays().items():
        assert np.array_equal(v, b.named_arrays()[k])
    assert not np.array_equal(a.encoder_w, init_network(tiny_config, 8).encoder_w)


def stream_logits(net, u):
    ctx = StreamingContext.reset(net)
    out = []
    for t in range(u.shape[-1]):
        ctx, lg = forward_stream(net, ctx, u[:, t])
        out.append(lg)
    return ctx, np.stack(out, -1)


def test_streaming_matches_conv_per_token(tiny_net):
    u = np.random.default_rng(0).normal(size=(1, 24))
    ctx, rec = stream_logits(tiny_net, u)
    assert np.max(np.abs(rec - forward_conv(tiny_net, u))) < 1e-10
    assert classify(ctx) == int(np.argmax(pool_logits(rec)))


def test_streaming_is_pure(tiny_net):
    ctx = StreamingContext.reset(tiny_net)
    c1, l1 = forward_stream(tiny_net, ctx, np.array([0.5]))
    c2, l2 = forward_stream(tiny_net, ctx, np.array([0.5]))
    assert np.array_equal(l1, l2) and ctx.tokens_seen == 0 and c1.tokens_seen == 1


def test_streaming_errors(tiny_net):
    ctx = StreamingContext.reset(tiny_net)
    with pytest.raises(ValueError):
        forward_stream(tiny_net, ctx, np.zeros(2))
    with pytest.raises(ValueError):
        classify(ctx)
    other = init_network(NetworkConfig(input_dim=1, model_dim=6, state_dim=4, num_blocks=3, num_classes=3), 0)
    with pytest.raises(ValueError):
        forward_stream(other, ctx, np.zeros(1))


def test_classify_breaks_ties_to_lowest_index(tiny_net):
    ctx = StreamingContext.reset(tiny_net)
    ctx = StreamingContext(ctx.states, np.array([1.0, 3.0, 3.0]), np.array([2.0, 2.0, 0.0]), 2, "mean")
    assert classify(ctx) == 1
    ctx = StreamingContext(ctx.states, ctx.logit_accumulator, ctx.last_logits, 2, "last")
    assert classify(ctx) == 0


def test_forward_conv_shape_check(tiny_net):
    with pytest.raises(ValueError):
        forward_conv(tiny_net, np.zeros((2, 3, 24)))


def test_predict_batches_consistently(tiny_net):
    u = np.random.default_rng(1).normal(size=(7, 1, 24))
    assert np.array_equal(predict(tiny_net, u, batch_size=3), predict(tiny_net, u))


def test_checkpoint_roundtrip(tmp_path, tiny_net):
    save_network(tiny_net, tmp_path / "n.ckpt")
    back = load_network(tmp_path / "n.ckpt")
    u = np.random.default_rng(2).normal(size=(2, 1, 24))
    assert back.config == tiny_net.config
    # stored in float32
    assert np.max(np.abs(forward_conv(back, u) - forward_conv(tiny_net, u))) < 1e-4


def test_relu_sparsity_in_unit_interval(tiny_net):
    s = relu_sparsity(tiny_net, np.random.default_rng(0).normal(size=(3, 1, 24)))
    assert s and all(0 <= v <= 1 for v in s.values())


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 5), st.integers(1, 3))
def test_parameter_count_property(I, H, N, blocks):
    cfg = NetworkConfig(input_dim=I, model_dim=H, state_dim=N, num_blocks=blocks)
    assert count_parameters(cfg) == enumerate_parameters(init_network(cfg, 0)) == hand_count(I, H, N, blocks)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(model_dim=0)
    with pytest.raises(ValueError):
        NetworkConfig(readout="max")
    assert NetworkConfig.from_dict({**SMALL.to_dict(), "extra": 1}) == SMALL
