import numpy as np
import pytest

from chartgen.audio import AudioCodes
from chartgen.errors import BadMagic, MissingCodes, SequenceTooLong, ShapeMismatch
from chartgen.model import (
    AdamState,
    ChartTransformer,
    ModelConfig,
    adamw_step,
    attention,
    clip_grad_norm,
    combine_losses,
    load_checkpoint,
    rms_norm,
    save_checkpoint,
    swiglu_ffn,
    token_loss,
    token_loss_grad,
)
from chartgen.model.checkpoint import checkpoint_bytes, model_from_bytes
from chartgen.model.layers import (
    attention_backward,
    attention_forward,
    causal_mask,
    conv1d_backward,
    conv1d_forward,
    rms_norm_backward,
    rms_norm_forward,
    swiglu_backward,
    swiglu_forward,
)

from gradcheck import model_gradient_errors, numeric_grad, rel_error, tiny_model_case


def small(conditioned=False, **kw):
    base = dict(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=32, dropout_p=0.0,
                conditioned=conditioned, n_q=2, codebook_size=16, max_audio_len=32)
    base.update(kw)
    return ChartTransformer(ModelConfig(**base))


# -- layer oracles -------------------------------------------------------------


def test_rms_norm_examples():
    assert rms_norm(np.ones(4), np.ones(4)) == pytest.approx(np.ones(4), abs=1e-5)
    assert rms_norm(np.array([3.0, 4.0]), np.ones(2)) == pytest.approx([0.8485, 1.1314], abs=1e-3)
    assert not rms_norm(np.zeros(3), np.ones(3)).any()


def test_swiglu_examples():
    one = np.ones((1, 1))
    assert swiglu_ffn(np.zeros((1, 1)), one, one, one)[0, 0] == 0
    assert swiglu_ffn(np.ones((1, 1)), one, one, one)[0, 0] == pytest.approx(0.7311, abs=1e-4)
    assert swiglu_ffn(np.full((1, 1), -20.0), one, one, one)[0, 0] == pytest.approx(0, abs=1e-6)


def test_attention_examples(rng):
    q, k, v = rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    assert attention(q, k, v) == pytest.approx(v)
    k2 = np.vstack([k, k])
    v2 = rng.normal(size=(2, 3))
    assert attention(rng.normal(size=(4, 3)), k2, v2) == pytest.approx(np.tile(v2.mean(0), (4, 1)))


def test_causal_attention_ignores_future(rng):
    q, k, v = (rng.normal(size=(1, 1, 5, 4)) for _ in range(3))
    out = attention(q, k, v, causal_mask(5, np.float64))
    k[..., 3:, :] += 1.0
    v[..., 3:, :] -= 2.0
    again = attention(q, k, v, causal_mask(5, np.float64))
    assert np.array_equal(out[..., :3, :], again[..., :3, :])


def test_rms_norm_gradient():
    x, gain = np.array([[3.0, 4.0]]), np.array([1.0, 1.0])
    r = np.array([[0.3, -1.1]])
    y, cache = rms_norm_forward(x, gain)
    dx, dgain = rms_norm_backward(r, cache)
    f = lambda: float(np.sum(rms_norm_forward(x, gain)[0] * r))
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert rel_error(dgain, numeric_grad(f, gain)) < 1e-4


def test_swiglu_gradient(rng):
    x = rng.normal(size=(2, 3, 5))
    wg, wu, wd = rng.normal(size=(5, 7)), rng.normal(size=(5, 7)), rng.normal(size=(7, 5))
    r = rng.normal(size=(2, 3, 5))
    _, cache = swiglu_forward(x, wg, wu, wd)
    grads = swiglu_backward(r, cache)
    f = lambda: float(np.sum(swiglu_forward(x, wg, wu, wd)[0] * r))
    for analytic, wrt in zip(grads, (x, wg, wu, wd)):
        assert rel_error(analytic, numeric_grad(f, wrt)) < 1e-4


@pytest.mark.parametrize("masked", [False, True])
def test_attention_gradient(rng, masked):
    q, k, v = rng.normal(size=(2, 2, 4, 3)), rng.normal(size=(2, 2, 4, 3)), rng.normal(size=(2, 2, 4, 3))
    mask = causal_mask(4, np.float64) if masked else None
    r = rng.normal(size=(2, 2, 4, 3))
    _, cache = attention_forward(q, k, v, mask)
    grads = attention_backward(r, cache)
    f = lambda: float(np.sum(attention_forward(q, k, v, mask)[0] * r))
    for analytic, wrt in zip(grads, (q, k, v)):
        assert rel_error(analytic, numeric_grad(f, wrt)) < 1e-4


@pytest.mark.parametrize("frames, stride", [(7, 2), (6, 2), (5, 1)])
def test_conv_gradient(rng, frames, stride):
    x, w, b = rng.normal(size=(2, frames, 3)), rng.normal(size=(3, 3, 4)), rng.normal(size=4)
    out, cache = conv1d_forward(x, w, b, stride)
    assert out.shape == (2, -(-frames // stride), 4)
    r = rng.normal(size=out.shape)
    grads = conv1d_backward(r, cache)
    f = lambda: float(np.sum(conv1d_forward(x, w, b, stride)[0] * r))
    for analytic, wrt in zip(grads, (x, w, b)):
        assert rel_error(analytic, numeric_grad(f, wrt)) < 1e-4


def test_unconditional_model_gradient():
    model, tokens, targets, codes, lengths, mask = tiny_model_case(3)
    cfg = ModelConfig(**{**model.config.to_dict(), "conditioned": False})
    plain = ChartTransformer(cfg)
    errors = model_gradient_errors(plain, tokens, targets, None, None, mask, pad_weight=1.0)
    assert max(errors.values()) < 1e-4


# -- loss and optimizer -----------------------------------------------------------


def test_token_loss_examples():
    logits = np.full((1, 66), -1e4)
    logits[0, 5] = 1e4
    assert token_loss(logits, np.array([5]))[0] == pytest.approx(0, abs=1e-9)
    # per-position losses 2 and 1: build logits whose softmax gives those
    two = np.zeros((2, 66))
    two[0, 0] = np.log(np.exp(-2) * 65 / (1 - np.exp(-2)))
    two[1, 3] = np.log(np.exp(-1) * 65 / (1 - np.exp(-1)))
    loss, per = token_loss(two, np.array([0, 3]), pad_weight=0.2)
    assert per == pytest.approx([2, 1])
    assert loss == pytest.approx((0.4 + 1) / 1.2, abs=1e-6)
    assert token_loss(two, np.array([0, 3]), pad_weight=1.0)[0] == pytest.approx(1.5)


def test_token_loss_rejects_bad_weight():
    with pytest.raises(ValueError):
        token_loss(np.zeros((1, 66)), np.array([0]), pad_weight=0)


def test_token_loss_grad_matches_fd(rng):
    logits, targets = rng.normal(size=(3, 66)), np.array([0, 4, 0])
    _, g = token_loss_grad(logits, targets, 0.2)
    f = lambda: token_loss(logits, targets, 0.2)[0]
    assert rel_error(g, numeric_grad(f, logits)) < 1e-6


def test_combine_losses():
    assert combine_losses(1.7) == 1.7
    assert combine_losses(2.0, [(0.5, 1.0)]) == 2.5
    assert combine_losses(1.0, [(0.5, 1.0), (2.0, 0.25)]) == 2.0
    with pytest.raises(ValueError):
        combine_losses(1.0, [(-1, 1.0)])


def test_adamw_examples():
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([1.0])}, AdamState(), lr=1e-3)
    assert p["w"][0] == pytest.approx(1 - 1e-3 * (1 / (1 + 1e-8) + 0.01), abs=1e-12)

    p = {"w": np.array([0.7, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=1e-2, weight_decay=0.0)
    assert p["w"].tolist() == [0.7, -2.0]

    adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=1e-2, weight_decay=0.01)
    assert p["w"] == pytest.approx(np.array([0.7, -2.0]) * (1 - 1e-4))


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert np.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


# -- composed model ------------------------------------------------------------


def test_uniform_output_gives_perplexity_66():
    model = small()
    for arr in model.params.values():
        arr[...] = 0
    logits = model.forward(np.zeros((1, 5), dtype=int))
    loss, _ = token_loss(logits, np.arange(5)[None])
    assert np.exp(loss) == pytest.approx(66, abs=1e-4)


def test_causality_exact(rng):
    model = small(conditioned=True)
    codes = rng.integers(0, 16, size=(1, 10, 2))
    tokens = rng.integers(0, 66, size=(1, 12))
    base = model.forward(tokens, codes)
    for t in (3, 7, 11):
        changed = tokens.copy()
        changed[0, t:] = (changed[0, t:] + 17) % 66
        again = model.forward(changed, codes)
        assert np.array_equal(base[0, :t], again[0, :t])


def test_softmax_rows_and_finiteness(rng):
    model = small()
    logits = model.forward(rng.integers(0, 66, size=(2, 9)))
    p = np.exp(logits.astype(np.float64) - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    assert np.abs(p.sum(-1) - 1).max() < 1e-9
    assert np.isfinite(logits).all()


def test_condition_audio_shapes_and_commutativity(rng):
    model = small(conditioned=True, max_audio_len=800)
    codes = AudioCodes(50, 2, 16, rng.integers(0, 16, size=(1500, 2)))
    assert model.condition_audio(codes).shape == (1, 750, 16)

    codes = rng.integers(0, 16, size=(1, 9, 2))
    swapped = model.params["code_emb"][::-1].copy()
    a = model.condition_audio(codes)
    model.params["code_emb"] = swapped
    b = model.condition_audio(codes[..., ::-1])
    assert np.allclose(a, b, atol=1e-6)

    model.params["code_emb"][...] = 0
    c = model.condition_audio(codes)
    expected = model.params["adapter.b"] + model.params["audio_pos"][:5]
    assert np.allclose(c[0], expected)


def test_conditioning_requirements(rng):
    cond, plain = small(conditioned=True), small()
    tokens = rng.integers(0, 66, size=(1, 6))
    with pytest.raises(MissingCodes):
        cond.forward(tokens)
    codes = rng.integers(0, 16, size=(1, 6, 2))
    assert np.array_equal(plain.forward(tokens), plain.forward(tokens, codes))
    with pytest.raises(ShapeMismatch):
        cond.forward(tokens, rng.integers(0, 16, size=(1, 6, 3)))
    with pytest.raises(SequenceTooLong):
        plain.forward(np.zeros((1, 33), dtype=int))


def test_zero_init_cross_attention_ignores_audio(rng):
    model = small(conditioned=True)
    tokens = rng.integers(0, 66, size=(2, 6))
    a = model.forward(tokens, rng.integers(0, 16, size=(2, 6, 2)))
    b = model.forward(tokens, rng.integers(0, 16, size=(2, 6, 2)))
    assert np.array_equal(a, b)
    for i in range(2):
        model.params[f"layers.{i}.cross.wo"] += rng.normal(0, 0.1, size=(16, 16)).astype(np.float32)
    c = model.forward(tokens, rng.integers(0, 16, size=(2, 6, 2)))
    assert not np.allclose(a, c)


def test_dropout_only_in_train_mode(rng):
    model = small(dropout_p=0.5)
    tokens = rng.integers(0, 66, size=(1, 6))
    assert np.array_equal(model.forward(tokens), model.forward(tokens))
    trained = model.forward(tokens, train=True, rng=np.random.default_rng(0))
    assert not np.allclose(trained, model.forward(tokens))


def test_init_determinism():
    a, b = small(seed=5), small(seed=5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert all(v.dtype == np.float32 for v in a.params.values())
    assert not np.array_equal(a.params["head.w"], small(seed=6).params["head.w"])


def test_zero_loss_gives_tiny_gradients():
    model = small()
    model.params["head.b"][:] = -30
    model.params["head.b"][7] = 30
    model.params["head.w"][:] = 0
    logits = model.forward(np.zeros((1, 4), dtype=int))
    loss, d = token_loss_grad(logits, np.full((1, 4), 7))
    grads = model.backward(d)
    assert loss < 1e-9
    assert max(float(np.abs(g).max()) for g in grads.values()) < 1e-9


def test_incremental_decode_matches_forward(rng):
    model = small(conditioned=True)
    for i in range(2):
        model.params[f"layers.{i}.cross.wo"] += rng.normal(0, 0.1, size=(16, 16)).astype(np.float32)
    codes = rng.integers(0, 16, size=(1, 9, 2))
    tokens = rng.integers(0, 66, size=8)
    full = model.forward(tokens[None], codes)[0]
    state = model.start_decoding(codes, max_len=8)
    steps = np.stack([model.decode_step(state, int(t)) for t in tokens])
    assert np.allclose(steps, full, atol=1e-4)


def test_checkpoint_round_trip(tmp_path, rng):
    model = small(conditioned=True)
    save_checkpoint(model, tmp_path / "m.a2ck", extra={"step": 12})
    back = load_checkpoint(tmp_path / "m.a2ck")
    assert back.config == model.config
    assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)
    data = checkpoint_bytes(model, {"step": 12})
    again, meta = model_from_bytes(data)
    assert meta == {"step": "12"}
    assert checkpoint_bytes(again, meta) == data
    with pytest.raises(BadMagic):
        model_from_bytes(b"NOPE" + data[4:])
    with pytest.raises(ShapeMismatch):
        model_from_bytes(data + b"\0")


def test_checkpoint_fuzzed_configs(rng):
    for seed in range(5):
        heads = int(rng.choice([1, 2, 4]))
        model = small(
            conditioned=bool(seed % 2), d_model=8 * heads, n_heads=heads, n_layers=int(rng.integers(1, 3)),
            d_ff=int(rng.integers(4, 20)), seed=seed, pos_init=["normal", "sinusoidal"][seed % 2],
        )
        data = checkpoint_bytes(model, {"note": f"run{seed}"})
        assert checkpoint_bytes(*model_from_bytes(data)) == data


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(KeyError):
        ModelConfig.from_dict({"nope": 1})
    assert ModelConfig.from_dict({"d_model": "32", "conditioned": "True"}).d_model == 32
