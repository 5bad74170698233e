import numpy as np
import pytest

from ssar.autograd import Tensor, no_grad, reshape
from ssar.errors import ConfigError, ShapeError
from ssar.gradcheck import finite_diff_check
from ssar.model import (
    PARAM_GROUPS,
    ModelConfig,
    build_model,
    classify_sequence,
    decoder_forward,
    embed,
    encoder_forward,
    frame_logits,
    normalize_images,
    plan_shapes,
    recognize,
)
from ssar.nn import functional as F


def conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def hidden_oracle(h, w):
    """Spatial size after stem, pool, stage-2 stride and the two extra convs."""
    for k, p in ((7, 3), (3, 1), (3, 1), (3, 1), (3, 1)):
        h, w = conv_out(h, k, 2, p), conv_out(w, k, 2, p)
    return h, w


@pytest.fixture(scope="module")
def paper():
    return build_model(ModelConfig.from_preset("paper"), seed=0)


@pytest.fixture(scope="module")
def tiny():
    return build_model(ModelConfig.from_preset("tiny"), seed=0)


def tiny_images(b, seed=0):
    cfg = ModelConfig.from_preset("tiny")
    rng = np.random.default_rng(seed)
    return Tensor(normalize_images(rng.integers(0, 256, (b, cfg.input_h, cfg.input_w, 3), dtype=np.uint8), cfg))


def as_float64(model):
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
    for k in model.buffers:
        model.buffers[k] = model.buffers[k].astype(np.float64)
    return model


# -- shapes -----------------------------------------------------------------------


def test_paper_shape_chain(paper):
    plan = paper.plan
    layers = dict(plan.layers)
    assert layers["encoder.conv1"] == (64, 63, 112)
    assert layers["encoder.maxpool"] == (64, 32, 56)
    assert layers["encoder.layer2"] == (128, 16, 28)
    assert layers["encoder.conv3"] == (128, 8, 14)
    assert plan.hidden == (256, 4, 7) and plan.flatten_size == 7168
    ups = [layers[f"decoder.deconv{i}"][1:] for i in range(1, 6)]
    assert ups == [(8, 14), (16, 28), (32, 56), (64, 112), (126, 224)]
    assert plan.final_padding == (2, 1)
    assert paper.params["embed.fc1.weight"].shape == (2048, 7168)


def test_paper_parameter_count(paper):
    assert paper.num_parameters() == 16_516_041


def test_paper_forward_shapes(paper):
    cfg = paper.config
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 126, 224)).astype(np.float32))
    with no_grad():
        hidden = encoder_forward(paper, x)
        assert hidden.shape == (2, 256, 4, 7)
        masks = decoder_forward(paper, hidden[:1])
        assert masks.shape == (1, 2, 126, 224)
        probs = F.softmax(masks.data.astype(np.float64), axis=1)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        emb = embed(paper, hidden)
        assert emb.shape == (2, cfg.embedding_dim) == (2, 83)


@pytest.mark.parametrize("t", [5, 17, 40, 73])
def test_paper_classifier_any_length(paper, t):
    emb = Tensor(np.random.default_rng(t).standard_normal((t, 2, 83)).astype(np.float32))
    with no_grad():
        assert classify_sequence(paper, emb, [t, max(1, t - 3)]).shape == (2, 83)


@pytest.mark.parametrize("hw", [(64, 112), (126, 224), (96, 160), (50, 90)])
def test_hidden_matches_oracle(hw):
    plan = plan_shapes(ModelConfig.from_preset("tiny", input_h=hw[0], input_w=hw[1]))
    assert plan.hidden[1:] == hidden_oracle(*hw)
    assert plan.flatten_size == 64 * np.prod(hidden_oracle(*hw))


def test_tiny_flatten(tiny):
    assert tiny.plan.hidden == (64, 2, 4)
    assert tiny.plan.flatten_size == 512


def test_too_small_input_names_layer():
    with pytest.raises(ConfigError, match="encoder.conv4"):
        plan_shapes(ModelConfig.from_preset("tiny", input_h=10, input_w=10))


def test_bad_configs():
    with pytest.raises(ConfigError):
        ModelConfig.from_preset("huge")
    with pytest.raises(ConfigError):
        plan_shapes(ModelConfig.from_preset("tiny", embedding_dim=3))
    with pytest.raises(ConfigError):
        plan_shapes(ModelConfig.from_preset("tiny", decoder_widths=(16, 8, 4, 2, 3)))


def test_encoder_rejects_wrong_dims(tiny):
    with pytest.raises(ShapeError):
        encoder_forward(tiny, Tensor(np.zeros((1, 3, 32, 32), np.float32)))
    with pytest.raises(ShapeError):
        decoder_forward(tiny, Tensor(np.zeros((1, 64, 3, 3), np.float32)))


def test_param_paths_grouped(tiny):
    assert all(k.split(".")[0] in PARAM_GROUPS for k in tiny.params)
    assert all(tiny.group(g) for g in PARAM_GROUPS)


def test_embedding_feeds_lstm(paper, tiny):
    for m in (paper, tiny):
        assert m.params["lstm.l0.w_ih"].shape[1] == m.config.embedding_dim


# -- behaviour -----------------------------------------------------------------------------


def test_forward_bitwise_deterministic(tiny):
    x = tiny_images(3)
    tiny.train()
    a = encoder_forward(tiny, x).data
    b = encoder_forward(tiny, x).data
    assert a.tobytes() == b.tobytes()


def test_build_is_seeded():
    cfg = ModelConfig.from_preset("tiny")
    a, b, c = build_model(cfg, 3), build_model(cfg, 3), build_model(cfg, 4)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert a.params["encoder.conv1.weight"].data.tobytes() != c.params["encoder.conv1.weight"].data.tobytes()


def test_recurrent_blocks_orthogonal(tiny):
    hs = tiny.config.lstm_hidden
    for layer in range(tiny.config.lstm_layers):
        w = tiny.params[f"lstm.l{layer}.w_hh"].data.astype(np.float64)
        for g in range(4):
            blk = w[g * hs : (g + 1) * hs]
            np.testing.assert_allclose(blk @ blk.T, np.eye(hs), atol=1e-5)


def test_frame_logits_leading_dims(tiny):
    emb = Tensor(np.arange(40, dtype=np.float32).reshape(2, 20))
    np.testing.assert_array_equal(frame_logits(tiny, emb).data, emb.data[:, :5])


def test_gradient_reaches_all_groups():
    model = build_model(ModelConfig.from_preset("tiny"), seed=1)
    model.train()
    rng = np.random.default_rng(0)
    frames = rng.integers(0, 256, (4, 64, 112, 3), dtype=np.uint8)
    mask = rng.integers(0, 2, (4, 64, 112))
    hidden = encoder_forward(model, Tensor(normalize_images(frames, model.config)))
    seg = F.pixelwise_cross_entropy(decoder_forward(model, hidden), mask)
    emb = embed(model, hidden)
    logits = classify_sequence(model, reshape(emb, (4, 1, 20)), [4])
    loss = F.softmax_cross_entropy(logits, [2]) + seg
    loss.backward()
    for path, g in model.grads().items():
        assert g is not None and np.linalg.norm(g) > 0, path


def test_padded_matches_solo(tiny):
    rng = np.random.default_rng(5)
    lengths = [3, 7, 1, 5]
    seqs = [rng.standard_normal((n, 20)).astype(np.float32) for n in lengths]
    padded = np.zeros((7, 4, 20), np.float32)
    for i, s in enumerate(seqs):
        padded[: len(s), i] = s
    with no_grad():
        batch = classify_sequence(tiny, Tensor(padded), lengths).data
        for i, s in enumerate(seqs):
            solo = classify_sequence(tiny, Tensor(s[:, None, :]), [len(s)]).data[0]
            np.testing.assert_allclose(batch[i], solo, atol=1e-6)
            assert batch[i].argmax() == solo.argmax()


def test_batch_permutation_permutes_logits(tiny):
    rng = np.random.default_rng(6)
    emb = rng.standard_normal((6, 3, 20)).astype(np.float32)
    perm = [2, 0, 1]
    lengths = np.array([6, 2, 4])
    with no_grad():
        a = classify_sequence(tiny, Tensor(emb), lengths).data
        b = classify_sequence(tiny, Tensor(emb[:, perm]), lengths[perm]).data
    np.testing.assert_allclose(b, a[perm], atol=1e-6)


def test_single_step_is_one_cell(tiny):
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((1, 2, 20)).astype(np.float32))
    with no_grad():
        logits = classify_sequence(tiny, x, [1, 1]).data
        h = x[0]
        for layer in range(tiny.config.lstm_layers):
            p = tiny.params
            zeros = Tensor(np.zeros((2, 20), np.float32))
            h, _ = F.lstm_step(h, zeros, zeros, p[f"lstm.l{layer}.w_ih"], p[f"lstm.l{layer}.w_hh"], p[f"lstm.l{layer}.b_ih"], p[f"lstm.l{layer}.b_hh"])
        ref = F.linear(h, tiny.params["lstm.fc.weight"], tiny.params["lstm.fc.bias"]).data
    np.testing.assert_allclose(logits, ref, atol=1e-6)


def test_zero_length_rejected(tiny):
    with pytest.raises((ShapeError, ValueError)):
        classify_sequence(tiny, Tensor(np.zeros((2, 1, 20), np.float32)), [0])
    with pytest.raises(ShapeError):
        recognize(tiny, np.zeros((0, 64, 112, 3), np.uint8))


@pytest.mark.parametrize("t", [5, 17, 40, 73])
def test_recognize_any_length(tiny, t):
    frames = np.random.default_rng(t).integers(0, 256, (t, 64, 112, 3), dtype=np.uint8)
    label, probs = recognize(tiny, frames)
    assert 0 <= label < 5 and probs.shape == (5,)
    assert abs(probs.sum() - 1) < 1e-6
    assert label == int(np.argmax(probs))


def test_recognize_ignores_decoder():
    model = build_model(ModelConfig.from_preset("tiny"), seed=2)
    frames = np.random.default_rng(0).integers(0, 256, (6, 64, 112, 3), dtype=np.uint8)
    before = recognize(model, frames)
    for p in model.group("decoder").values():
        p.data[...] = 0
    after = recognize(model, frames)
    assert before[0] == after[0]
    assert before[1].tobytes() == after[1].tobytes()


def test_recognize_restores_mode(tiny):
    tiny.train()
    recognize(tiny, np.zeros((2, 64, 112, 3), np.uint8))
    assert tiny.training


# -- gradient check through the network ----------------------------------------------------------
# Whole-network checks use a smaller step: with thousands of ReLU and max-pool
# units, eps=1e-4 pushes a few pre-activations across their kink. Every
# individual operation is checked at eps=1e-4 in the layer tests.
NET_EPS = 1e-6


def test_gradcheck_encoder_to_embed_tiny():
    model = as_float64(build_model(ModelConfig.from_preset("tiny"), seed=3)).train()
    x = Tensor(tiny_images(3, seed=1).data.astype(np.float64))
    w = np.random.default_rng(2).standard_normal((3, 20))
    probes = [model.params[k] for k in ("encoder.bn4.weight", "encoder.layer2.1.bn2.bias", "embed.fc2.bias")]

    def f():
        return (embed(model, encoder_forward(model, x)) * Tensor(w)).sum()

    report = finite_diff_check(f, probes, eps=NET_EPS)
    assert report.passed, report.failures[:5]


def test_gradcheck_small_network_all_conv_weights():
    cfg = ModelConfig.from_preset(
        "tiny", input_h=32, input_w=32, encoder_widths=(2, 2, 3, 3, 4), decoder_widths=(2, 2, 2, 2, 2), fc_hidden=6, embedding_dim=5, lstm_hidden=4, lstm_layers=2
    )
    model = as_float64(build_model(cfg, seed=4)).train()
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((3, 3, 32, 32)))
    mask = rng.integers(0, 2, (3, 32, 32))
    names = ["encoder.conv1.weight", "encoder.layer2.0.downsample.conv.weight", "encoder.conv4.weight", "decoder.deconv5.weight", "embed.fc1.weight", "lstm.l1.w_hh"]

    def f():
        h = encoder_forward(model, x)
        seg = F.pixelwise_cross_entropy(decoder_forward(model, h), mask)
        emb = embed(model, h)
        logits = classify_sequence(model, reshape(emb, (3, 1, 5)), [3])
        return seg + F.softmax_cross_entropy(logits, [1])

    report = finite_diff_check(f, [model.params[n] for n in names], eps=NET_EPS)
    assert report.passed, report.failures[:5]
