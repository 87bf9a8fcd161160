import numpy as np
import pytest

from couplformer import autograd as ag
from couplformer.model import (
    CheckpointError,
    CouplformerModel,
    ModelConfig,
    StemStage,
    conv_stem_forward,
    encoder_block_forward,
    sequence_pool,
)
from couplformer.tensor import ShapeError, Tensor


def tiny_config(**overrides):
    base = dict(
        img_size=(28, 28),
        in_channels=1,
        conv_stem=(StemStage(8), StemStage(16)),
        embed_dim=16,
        depth=2,
        heads=2,
        num_classes=10,
    )
    base.update(overrides)
    return ModelConfig(**base)


# -- config / geometry -----------------------------------------------------


def test_token_grid_arithmetic():
    # 28 -> conv(same) 28 -> pool 14 -> conv 14 -> pool 7
    assert tiny_config().token_grid() == (7, 7)
    # stride-2 conv halves before the pool
    cfg = tiny_config(conv_stem=(StemStage(8, stride=2), StemStage(16)))
    assert cfg.token_grid() == (4, 4)
    # non-square images give non-square grids
    cfg = tiny_config(img_size=(28, 56))
    assert cfg.token_grid() == (7, 14)
    # no pooling keeps the full resolution
    cfg = tiny_config(conv_stem=(StemStage(16, pool=False),), img_size=(8, 8))
    assert cfg.token_grid() == (8, 8)


def test_config_validation_errors():
    with pytest.raises(ShapeError):
        tiny_config(conv_stem=(StemStage(8), StemStage(12)))  # last != embed_dim
    with pytest.raises(ShapeError):
        tiny_config(embed_dim=15, conv_stem=(StemStage(8), StemStage(15)), heads=2)
    with pytest.raises(ValueError):
        tiny_config(pos_embedding="fourier")
    with pytest.raises(ValueError):
        tiny_config(attention_kind="linear")
    # Same-padding keeps every extent >= 1: a tiny image degenerates to one token.
    assert tiny_config(img_size=(2, 2)).token_grid() == (1, 1)


def test_geometry_reflects_config():
    g = tiny_config().geometry()
    assert (g.h, g.w, g.d, g.heads) == (7, 7, 16, 2)


# -- parameters ------------------------------------------------------------


def test_param_count_closed_form():
    cfg = tiny_config()
    model = CouplformerModel(cfg, seed=0)
    d, L = 16, 49
    stem = (8 * 1 * 9 + 8) + (16 * 8 * 9 + 16)
    block = 2 * d + 4 * d * d + 2 * d + (d * 2 * d + 2 * d) + (2 * d * d + d)
    expected = stem + L * d + cfg.depth * block + 2 * d + d + (d * 10 + 10)
    assert model.param_count() == expected
    assert model.param_count() == sum(v.value.size for v in model.parameters().values())


def test_parameter_names_are_stable_and_ordered():
    model = CouplformerModel(tiny_config(), seed=0)
    names = list(model.parameters())
    assert names[0] == "stem.0.weight"
    assert "pos_embedding" in names
    assert names[-1] == "head.bias"
    assert names.index("blocks.0.ln1.gamma") < names.index("blocks.1.ln1.gamma")


def test_init_is_deterministic_per_seed():
    a = CouplformerModel(tiny_config(), seed=5)
    b = CouplformerModel(tiny_config(), seed=5)
    c = CouplformerModel(tiny_config(), seed=6)
    for (name, va), vb in zip(a.parameters().items(), b.parameters().values()):
        np.testing.assert_array_equal(va.value.data, vb.value.data, err_msg=name)
    assert np.any(a.parameters()["head.weight"].value.data != c.parameters()["head.weight"].value.data)


def test_pos_embedding_none_drops_table():
    model = CouplformerModel(tiny_config(pos_embedding="none"), seed=0)
    assert model.pos_embedding is None
    assert "pos_embedding" not in model.parameters()


def test_pos_modes_agree_at_initialization():
    """The table is zero-initialized, so both modes start as the same function."""
    x = Tensor(np.random.default_rng(0).standard_normal((1, 28, 28)))
    with ag.no_grad():
        with_pos = CouplformerModel(tiny_config(), seed=3).forward(x).value.data
        without = CouplformerModel(tiny_config(pos_embedding="none"), seed=3).forward(x).value.data
    np.testing.assert_allclose(with_pos, without, atol=1e-12)


# -- forward pieces --------------------------------------------------------


def test_stem_output_is_raster_ordered():
    """Token i of the stem output is feature column (y, x) with i = x + y*w."""
    cfg = tiny_config(img_size=(8, 8), conv_stem=(StemStage(16, pool=False),))
    model = CouplformerModel(cfg, seed=1)
    x = ag.constant(Tensor(np.random.default_rng(2).standard_normal((1, 8, 8))))
    with ag.no_grad():
        tokens = conv_stem_forward(x, model.stem).value.data
        conv = ag.relu(
            ag.conv2d(x, model.stem[0][1], model.stem[0][2], stride=1, padding=1)
        ).value.data
    assert tokens.shape == (64, 16)
    for y in range(8):
        for xx in range(8):
            np.testing.assert_array_equal(tokens[xx + y * 8], conv[:, y, xx])


def test_sequence_pool_weights_sum_to_one():
    """Pooled output lies in the convex hull of token embeddings."""
    rng = np.random.default_rng(3)
    x = rng.standard_normal((10, 6))
    g = rng.standard_normal((6, 1))
    with ag.no_grad():
        pooled = sequence_pool(ag.constant(Tensor(x)), ag.constant(Tensor(g))).value.data
    scores = (x @ g).reshape(-1)
    alpha = np.exp(scores - scores.max())
    alpha /= alpha.sum()
    np.testing.assert_allclose(pooled, alpha @ x, atol=1e-12)


def test_encoder_block_residual_keeps_input_term():
    """Zeroing the block's output projections reduces it to the identity."""
    model = CouplformerModel(tiny_config(depth=1), seed=4)
    block = model.blocks[0]
    block.attn.w_o.assign(Tensor(np.zeros((16, 16))))
    block.ffn_w2.assign(Tensor(np.zeros((32, 16))))
    x = np.random.default_rng(5).standard_normal((49, 16))
    with ag.no_grad():
        out = encoder_block_forward(ag.constant(Tensor(x)), block, "coupled_fast").value.data
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_forward_shapes_and_determinism():
    model = CouplformerModel(tiny_config(), seed=0)
    x = Tensor(np.random.default_rng(6).standard_normal((1, 28, 28)))
    with ag.no_grad():
        l1 = model.forward(x).value.data
        l2 = model.forward(x).value.data
    assert l1.shape == (10,)
    np.testing.assert_array_equal(l1, l2)


def test_forward_rejects_wrong_image_shape():
    model = CouplformerModel(tiny_config(), seed=0)
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((1, 27, 28))))
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((3, 28, 28))))


def test_attention_kinds_give_matching_outputs():
    """standard != coupled, but coupled fast == coupled explicit."""
    x = Tensor(np.random.default_rng(7).standard_normal((1, 28, 28)))
    with ag.no_grad():
        fast = CouplformerModel(tiny_config(attention_kind="coupled_fast"), seed=8).forward(x)
        explicit = CouplformerModel(
            tiny_config(attention_kind="coupled_explicit"), seed=8
        ).forward(x)
        standard = CouplformerModel(tiny_config(attention_kind="standard"), seed=8).forward(x)
    np.testing.assert_allclose(fast.value.data, explicit.value.data, atol=1e-10)
    assert np.max(np.abs(fast.value.data - standard.value.data)) > 1e-8


def test_model_gradients_flow_to_every_parameter():
    model = CouplformerModel(tiny_config(depth=1), seed=9)
    x = Tensor(np.random.default_rng(10).standard_normal((1, 28, 28)))
    loss = ag.cross_entropy(model.forward(x), 3)
    ag.backward(loss)
    for name, var in model.parameters().items():
        assert var.grad is not None, name
        assert np.all(np.isfinite(var.grad.data)), name


def test_fd_whole_model_gradient():
    """End-to-end cross-entropy gradient against central differences."""
    cfg = ModelConfig(
        img_size=(8, 8),
        in_channels=1,
        conv_stem=(StemStage(8),),
        embed_dim=8,
        depth=1,
        heads=2,
        num_classes=3,
    )
    model = CouplformerModel(cfg, seed=11)
    x = Tensor(np.random.default_rng(12).standard_normal((1, 8, 8)))
    assert ag.fd_check(lambda v: ag.cross_entropy(model.forward(v), 1), x) <= 1e-4


# -- checkpointing ---------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = CouplformerModel(tiny_config(), seed=13)
    model.save(tmp_path / "ckpt")
    clone = CouplformerModel.load(tmp_path / "ckpt", tiny_config())
    for (name, a), b in zip(model.parameters().items(), clone.parameters().values()):
        np.testing.assert_array_equal(a.value.data, b.value.data, err_msg=name)
    x = Tensor(np.random.default_rng(14).standard_normal((1, 28, 28)))
    with ag.no_grad():
        np.testing.assert_array_equal(
            model.forward(x).value.data, clone.forward(x).value.data
        )


def test_checkpoint_manifest_lists_every_parameter(tmp_path):
    model = CouplformerModel(tiny_config(), seed=15)
    model.save(tmp_path / "ckpt")
    manifest = (tmp_path / "ckpt" / "manifest.txt").read_text().splitlines()
    names = [line.split()[0] for line in manifest if line.strip()]
    assert names == list(model.parameters())
    entry = dict(zip(names, manifest))
    assert entry["head.weight"].split()[1:] == ["16", "10"]


def test_checkpoint_geometry_mismatch_is_detected(tmp_path):
    CouplformerModel(tiny_config(), seed=16).save(tmp_path / "ckpt")
    with pytest.raises(CheckpointError):
        CouplformerModel.load(tmp_path / "ckpt", tiny_config(embed_dim=32, conv_stem=(StemStage(8), StemStage(32))))
    with pytest.raises(CheckpointError):
        CouplformerModel.load(tmp_path / "ckpt", tiny_config(pos_embedding="none"))


def test_checkpoint_corrupt_payload_is_detected(tmp_path):
    model = CouplformerModel(tiny_config(), seed=17)
    model.save(tmp_path / "ckpt")
    blob = (tmp_path / "ckpt" / "tensors.bin").read_bytes()
    (tmp_path / "ckpt" / "tensors.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ValueError):
        CouplformerModel.load(tmp_path / "ckpt", tiny_config())
