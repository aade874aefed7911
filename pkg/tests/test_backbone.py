import numpy as np
import pytest

from morvit.backbone import (
    block_param_count,
    classify,
    embed,
    encoder_block,
    init_block_params,
    init_embed_params,
    init_head_params,
    patchify,
)
from morvit.config import PRESETS
from morvit.errors import ShapeError
from morvit.model import forward_sample, init_params
from morvit.tensor import Tensor, gather_rows, tsum
from oracles import attention_block_reference, grad_check, patchify_reference


def gen(seed=0):
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------- patchify

def test_patchify_vit_geometry():
    img = np.zeros((224, 224, 3))
    out = patchify(img, 16)
    assert out.shape == (196, 768)


def test_patchify_cifar_geometry():
    out = patchify(np.zeros((32, 32, 3)), 16)
    assert out.shape == (4, 768)


def test_patchify_matches_hand_enumeration():
    img = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    out = patchify(img, 2)
    assert np.array_equal(out.data, patchify_reference(img, 2))
    # explicit: patch (0,0) holds pixels (0,0) (0,1) (1,0) (1,1)
    assert np.array_equal(out.data[0], [0.0, 1.0, 4.0, 5.0])
    assert np.array_equal(out.data[1], [2.0, 3.0, 6.0, 7.0])


def test_patchify_indivisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((10, 10, 3)), 4)


# ---------------------------------------------------------------- embed

def tiny_cfg():
    return PRESETS["tiny-desk"].validate()


def test_embed_zero_image_gives_positional_table():
    cfg = tiny_cfg()
    ep = init_embed_params(cfg, gen(1))
    ep.b_e.data[:] = 0.0
    ep.x_cls.data[:] = 0.0
    patches = patchify(np.zeros((cfg.image_h, cfg.image_w, cfg.channels)), cfg.patch_size)
    out = embed(patches, ep)
    assert np.array_equal(out.data, ep.e_pos.data)


def test_embed_identity_projection_single_patch():
    cfg = PRESETS["tiny-desk"].replace(
        image_h=2, image_w=2, patch_size=2, channels=1, hidden=4, mlp_size=8,
        heads=2,
    ).validate()
    ep = init_embed_params(cfg, gen(2))
    ep.w_e.data = np.eye(4)
    ep.b_e.data[:] = 0.0
    ep.e_pos.data[:] = 0.0
    img = np.array([[[0.1], [0.2]], [[0.3], [0.4]]])
    out = embed(patchify(img, 2), ep)
    assert np.allclose(out.data[1], [0.1, 0.2, 0.3, 0.4], atol=1e-15)


def test_embed_matches_independent_matrix_product():
    cfg = tiny_cfg()
    ep = init_embed_params(cfg, gen(3))
    g = gen(4)
    img = g.random((cfg.image_h, cfg.image_w, cfg.channels))
    patches = patchify(img, cfg.patch_size)
    out = embed(patches, ep)
    expected = np.vstack([ep.x_cls.data, patches.data @ ep.w_e.data + ep.b_e.data])
    expected += ep.e_pos.data
    assert np.abs(out.data - expected).max() < 1e-12


def test_embed_shape_errors():
    cfg = tiny_cfg()
    ep = init_embed_params(cfg, gen(5))
    with pytest.raises(ShapeError):
        embed(Tensor(np.zeros((4, 7))), ep)
    with pytest.raises(ShapeError):
        embed(Tensor(np.zeros((9, cfg.patch_dim))), ep)


# ---------------------------------------------------------------- encoder block

def test_block_single_token_attention():
    cfg = tiny_cfg()
    blk = init_block_params(cfg, gen(6))
    h = Tensor(gen(7).normal(size=(1, cfg.hidden)))
    out = encoder_block(h, blk)
    ref = attention_block_reference(h.data, blk)
    assert np.abs(out.data - ref).max() < 1e-12


def test_block_zero_weights_is_identity():
    cfg = tiny_cfg()
    blk = init_block_params(cfg, gen(8))
    for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                 "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
        getattr(blk, name).data[:] = 0.0
    h = Tensor(gen(9).normal(size=(4, cfg.hidden)))
    out = encoder_block(h, blk)
    assert np.array_equal(out.data, h.data)


def test_block_matches_brute_force_attention():
    cfg = PRESETS["tiny-desk"].replace(hidden=4, mlp_size=8, heads=2).validate()
    blk = init_block_params(cfg, gen(10))
    h = Tensor(gen(11).normal(size=(3, 4)))
    out = encoder_block(h, blk)
    ref = attention_block_reference(h.data, blk)
    assert np.abs(out.data - ref).max() < 1e-12


def test_block_param_count_closed_form():
    for name in ("tiny-desk", "desk-synth", "vit-b16"):
        cfg = PRESETS[name]
        blk = init_block_params(cfg, gen(12))
        walked = sum(
            getattr(blk, f).size
            for f in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                      "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")
        )
        assert walked == block_param_count(cfg.hidden, cfg.mlp_size)


# ---------------------------------------------------------------- classify

def test_classify_zero_weights_gives_bias():
    cfg = tiny_cfg()
    head = init_head_params(cfg, gen(13))
    head.w.data[:] = 0.0
    head.b.data[:] = [1.0, 2.0, 3.0]
    out = classify(Tensor(gen(14).normal(size=(1, cfg.hidden))), head)
    assert np.array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_classify_one_hot_rows_copy_coordinates():
    cfg = tiny_cfg()
    head = init_head_params(cfg, gen(15))
    head.w.data[:] = 0.0
    head.b.data[:] = 0.0
    head.w.data[2, 0] = 1.0
    head.w.data[5, 1] = 1.0
    h = Tensor(gen(16).normal(size=(1, cfg.hidden)))
    out = classify(h, head)
    assert out.data[0, 0] == h.data[0, 2]
    assert out.data[0, 1] == h.data[0, 5]


def test_gradcheck_through_classify_and_block():
    cfg = tiny_cfg()
    blk = init_block_params(cfg, gen(17))
    head = init_head_params(cfg, gen(18))
    h = Tensor(gen(19).normal(size=(3, cfg.hidden)), requires_grad=True)
    params = [h, blk.wq, blk.w1, blk.ln1_g, head.w, head.b]

    def loss():
        out = encoder_block(h, blk)
        return tsum(classify(gather_rows(out, [0]), head))

    # composition-level tolerance (single-op checks hold the tighter 1e-6)
    assert grad_check(loss, params) < 1e-4


# ---------------------------------------------------------------- invariants

def test_permutation_equivariance_of_logits():
    cfg = tiny_cfg()
    params = init_params(cfg)
    g = gen(20)
    img = g.random((cfg.image_h, cfg.image_w, cfg.channels))
    logits, _ = forward_sample(img, params, cfg)

    perm = g.permutation(cfg.num_patches)
    patches = patchify(img, cfg.patch_size)
    permuted_patches = Tensor(patches.data[perm])
    params.embed.e_pos.data[1:] = params.embed.e_pos.data[1:][perm]
    z0 = embed(permuted_patches, params.embed)
    from morvit.routing import run_recursion

    hidden, _ = run_recursion(z0, params.blocks, params.router, cfg)
    permuted_logits = classify(gather_rows(hidden, [0]), params.head)
    assert np.abs(logits.data - permuted_logits.data).max() < 1e-10
