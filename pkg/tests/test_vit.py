import numpy as np
import pytest

from adma import tensor as T
from adma.objective import reconstruction_loss
from adma.tensor import ShapeError, Tensor
from adma.vit import VisionTransformer, VitConfig, patchify, predict

from oracles import central_difference, relative_error


@pytest.fixture(scope="module")
def model():
    return VisionTransformer(VitConfig(), seed=3)


def images(b=2, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(b, 3, 32, 32))


def test_config_derived_sizes():
    cfg = VitConfig()
    assert cfg.num_tokens == 16
    assert cfg.patch_dim == 192
    assert cfg.hog_dim_per_token == 27
    assert VitConfig(patch_size=16).hog_dim_per_token == 108


@pytest.mark.parametrize("kw", [dict(patch_size=7), dict(heads=5), dict(mc_dropout_p=1.0), dict(depth=0)])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        VitConfig(**kw)


def test_patchify_order():
    x = np.arange(3 * 4 * 4, dtype=float).reshape(1, 3, 4, 4)
    p = patchify(x, 2)
    assert p.shape == (1, 4, 12)
    # token 1 is the top-right 2x2 block; channel-major, then row, then col
    np.testing.assert_array_equal(p[0, 1, :4], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[0, 1, 4:8], [18, 19, 22, 23])


def test_embed_token_count(model):
    assert model.embed(images()).embeddings.shape == (2, 16, 64)


def test_embed_zero_image_gives_bias(model):
    emb = model.embed(np.zeros((1, 3, 32, 32))).embeddings.data
    np.testing.assert_array_equal(emb[0], np.broadcast_to(model.params["patch.b"].data, (16, 64)))


def test_embed_locality(model):
    a = images(1)
    b = a.copy()
    b[0, :, :8, :8] += 0.25
    ea, eb = model.embed(a).embeddings.data[0], model.embed(b).embeddings.data[0]
    differs = [i for i in range(16) if not np.array_equal(ea[i], eb[i])]
    assert differs == [0]


def test_embed_wrong_size(model):
    with pytest.raises(ShapeError):
        model.embed(np.zeros((1, 3, 16, 16)))


def test_forward_deterministic_and_shapes(model):
    x = np.random.default_rng(1).uniform(size=(4, 3, 32, 32))
    a, b = model(x), model(x)
    assert a.logits.shape == (4, 4)
    assert a.token_features.shape == (4, 16, 64)
    assert a.block1_features.shape == (4, 16, 64)
    assert np.array_equal(a.logits.data, b.logits.data)


def test_dropout_seeds_change_block1(model):
    tok = model.embed(images(1))
    a = model.block1(tok, dropout=True, seed=1).data
    b = model.block1(tok, dropout=True, seed=2).data
    assert not np.array_equal(a, b)


def test_dropout_p0_matches_deterministic():
    m = VisionTransformer(VitConfig(mc_dropout_p=0.0), seed=0)
    tok = m.embed(images(1))
    assert np.array_equal(m.forward(tok, dropout=True, seed=5).logits.data, m.forward(tok).logits.data)


def test_dropout_only_in_block1(model):
    # blocks after the first are deterministic: feeding the same block-1 output gives equal logits
    tok = model.embed(images(1))
    out = model.forward(tok, dropout=True, seed=9)
    again = model.forward(tok, dropout=True, seed=9)
    assert np.array_equal(out.logits.data, again.logits.data)
    assert not np.array_equal(out.block1_features.data, model.forward(tok).block1_features.data)


def test_apply_mask_contracts(model):
    tok = model.embed(images(1))
    before = tok.embeddings.data.copy()
    same = model.apply_mask(tok, [])
    assert np.array_equal(same.embeddings.data, before)
    full = model.apply_mask(tok, np.arange(16))
    np.testing.assert_array_equal(full.embeddings.data[0], np.broadcast_to(model.params["mask_token"].data, (16, 64)))
    half = model.apply_mask(tok, np.arange(0, 16, 2))
    assert half.mask_flags.sum() == 8
    assert np.array_equal(tok.embeddings.data, before)
    assert not tok.mask_flags.any()


def test_apply_mask_rejects_bad_plans(model):
    tok = model.embed(images(1))
    with pytest.raises(ValueError):
        model.apply_mask(tok, [1, 1])
    with pytest.raises(ValueError):
        model.apply_mask(tok, [16])


def test_masked_block1_input_is_positional_alone(model):
    tok = model.apply_mask(model.embed(images(1)), [2, 5])
    x = (tok.embeddings + tok.positional).data[0]
    np.testing.assert_array_equal(x[[2, 5]], model.params["pos"].data[[2, 5]])


def test_permutation_invariance_without_positions(model):
    m = model.copy()
    m.params["pos"].data = np.zeros_like(m.params["pos"].data)
    tok = m.embed(images(1))
    perm = np.random.default_rng(0).permutation(16)
    shuffled = type(tok)(T.Tensor(tok.embeddings.data[:, perm]), m.params["pos"], tok.mask_flags)
    a, b = m.forward(tok), m.forward(shuffled)
    np.testing.assert_allclose(a.logits.data, b.logits.data, atol=1e-12)
    np.testing.assert_allclose(a.token_features.data[:, perm], b.token_features.data, atol=1e-12)


def test_decode_shape_and_zero_weights(model):
    m = model.copy()
    feats = Tensor(np.random.default_rng(0).normal(size=(8, 64)))
    assert m.decode(feats).shape == (8, 27)
    m.params["decoder.w"].data[:] = 0
    m.params["decoder.b"].data[:] = 0
    target = np.random.default_rng(1).uniform(size=(8, 27))
    assert reconstruction_loss(m.decode(feats), target).item() == pytest.approx(float(np.mean(target**2)), abs=1e-15)


def test_decode_needs_rows(model):
    with pytest.raises(ShapeError):
        model.decode(Tensor(np.zeros((0, 64))))


def test_decoder_gradient_finite_differences(model):
    m = model.copy()
    feats = np.random.default_rng(2).normal(size=(3, 64))
    target = np.random.default_rng(3).uniform(size=(3, 27))
    w = m.params["decoder.w"]
    with T.Graph() as g:
        g.backward(reconstruction_loss(m.decode(Tensor(feats)), target), [w])
    w0 = w.data.copy()

    def f(x):
        w.data = x
        val = reconstruction_loss(m.decode(Tensor(feats)), target).item()
        w.data = w0
        return val

    sub = np.s_[:4, :5]
    full = central_difference(f, w0)
    assert relative_error(w.grad[sub], full[sub]) < 1e-4
    assert relative_error(w.grad, full) < 1e-4


def test_full_model_gradient_finite_differences():
    cfg = VitConfig(image_size=16, patch_size=8, embed_dim=8, depth=2, heads=2, ffn_multiplier=2)
    m = VisionTransformer(cfg, seed=1)
    x = np.random.default_rng(0).uniform(size=(2, 3, 16, 16))
    for name in ("patch.w", "blocks.0.attn.q.w", "blocks.1.fc2.w", "mask_token", "norm.g"):
        p = m.params[name]

        def loss():
            tok = m.apply_mask(m.embed(x), [[1], [0, 3]])
            out = m.forward(tok)
            return T.sum(T.mul(out.logits, Tensor(np.arange(8.0).reshape(2, 4) / 8)))

        with T.Graph() as g:
            g.backward(loss(), m.parameters())
        p0 = p.data.copy()

        def f(v):
            p.data = v
            val = loss().item()
            p.data = p0
            return val

        assert relative_error(p.grad, central_difference(f, p0)) < 1e-4, name


def test_state_roundtrip_bit_identical(model, tmp_path):
    path = tmp_path / "m.ckpt"
    model.save(path)
    loaded = VisionTransformer.load(path)
    x = images(3)
    assert np.array_equal(model(x).logits.data, loaded(x).logits.data)
    assert list(loaded.params) == list(model.params)


def test_load_state_rejects_config_mismatch(model):
    other = VisionTransformer(VitConfig(embed_dim=32, heads=4), seed=0)
    with pytest.raises(ValueError):
        other.load_state_dict(model.state_dict())


def test_copy_is_independent(model):
    c = model.copy()
    c.params["head.b"].data += 1.0
    assert not np.array_equal(c.params["head.b"].data, model.params["head.b"].data)


def test_predict_in_inference_mode(model):
    with T.Graph() as g:
        p = predict(model, images(2))
    assert len(g) == 0
    assert p.shape == (2,)
