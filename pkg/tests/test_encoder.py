import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import grad_check, param_grad_check
from qsemcom.encoder import (
    FiLMParams,
    ProjectionHead,
    ProjectionHeads,
    align,
    build_backbone,
    encode,
    extract_image_features,
)
from qsemcom.errors import CapabilityError, QsemcomError
from qsemcom.netutil import parameter_checksum


@pytest.fixture
def backbone(tiny_cfg):
    return build_backbone(tiny_cfg)


@pytest.fixture
def heads(tiny_cfg):
    return ProjectionHeads(
        tiny_cfg.model.embed_dim, tiny_cfg.model.layer_selection, seed=0
    )


def test_backbone_shapes(tiny_cfg, backbone):
    images = torch.rand(2, 3, 32, 32)
    outs = backbone.image_encode(images)
    assert len(outs) == tiny_cfg.model.backbone_depth
    for o in outs:
        assert o.shape == (2, tiny_cfg.n_image_tokens, tiny_cfg.model.embed_dim)
    text = backbone.text_encode(["what color is the square", "is there a circle"])
    assert text.shape == (2, tiny_cfg.model.num_text_embeddings, tiny_cfg.model.embed_dim)


def test_backbone_frozen(backbone):
    assert backbone.frozen
    assert all(not p.requires_grad for p in backbone.parameters())


def test_pretrained_backbone_requires_path(tiny_cfg):
    tiny_cfg.model.backbone = "pretrained-dual-encoder"
    with pytest.raises(CapabilityError, match="pretrained_path"):
        build_backbone(tiny_cfg)


def test_extract_selection(tiny_cfg, backbone):
    images = torch.rand(1, 3, 32, 32)
    feats = extract_image_features(images, backbone, (2, 4))
    assert len(feats) == 2
    all_layers = backbone.image_encode(images)
    assert torch.equal(feats[0], all_layers[1])
    assert torch.equal(feats[1], all_layers[3])


def test_extract_singleton_final_layer(tiny_cfg, backbone):
    images = torch.rand(1, 3, 32, 32)
    feats = extract_image_features(images, backbone, (tiny_cfg.model.backbone_depth,))
    assert len(feats) == 1
    assert torch.equal(feats[0], backbone.image_encode(images)[-1])


def test_extract_rejects_overdeep_selection(backbone):
    with pytest.raises(QsemcomError, match="exceeds"):
        extract_image_features(torch.rand(1, 3, 32, 32), backbone, (1, 99))


# -- projections --------------------------------------------------------------


def test_projection_identity_init():
    head = ProjectionHead(8, use_norm=False)
    with torch.no_grad():
        head.linear.weight.copy_(torch.eye(8))
        head.linear.bias.zero_()
    x = torch.randn(5, 8)
    assert torch.allclose(head(x), x)


def test_projection_zero_input_gives_bias(heads, tiny_cfg):
    d = tiny_cfg.model.embed_dim
    zero = torch.zeros(3, d)
    out = heads.project(zero, tiny_cfg.model.layer_selection[0])
    bias = heads.image_proj[str(tiny_cfg.model.layer_selection[0])].linear.bias
    assert torch.allclose(out, bias.expand(3, d))


def test_projection_unknown_source(heads):
    with pytest.raises(QsemcomError, match="projection head"):
        heads.project(torch.randn(2, 32), 99)


def test_projection_gradient_matches_finite_differences(tiny_cfg):
    torch.manual_seed(1)
    head = ProjectionHead(8).double()
    x0 = torch.randn(4, 8, dtype=torch.float64)
    grad_check(lambda x: head(x).square().sum(), x0)
    param_grad_check(head, lambda: head(x0).square().sum())


# -- FiLM ----------------------------------------------------------------------


def test_film_zero_init_is_neutral(heads, tiny_cfg):
    m = tiny_cfg.model.layer_selection[0]
    text = torch.randn(2, 4, tiny_cfg.model.embed_dim)
    film = heads.film_params(text, m, n_rows=6)
    assert torch.all(film.scale == 1.0)
    assert torch.all(film.shift == 0.0)


def test_film_rows_identical_broadcast(heads, tiny_cfg):
    m = tiny_cfg.model.layer_selection[0]
    with torch.no_grad():  # break the zero init so outputs are non-trivial
        for gen in (heads.film_scale[str(m)], heads.film_shift[str(m)]):
            gen[-1].weight.normal_()
            gen[-1].bias.normal_()
    text = torch.randn(2, 4, tiny_cfg.model.embed_dim)
    film = heads.film_params(text, m, n_rows=5)
    for mat in (film.scale, film.shift):
        assert torch.equal(mat[:, 0], mat[:, 3])


def test_film_differs_across_queries(tiny_cfg, backbone, heads):
    m = tiny_cfg.model.layer_selection[0]
    with torch.no_grad():
        for gen in (heads.film_scale[str(m)], heads.film_shift[str(m)]):
            gen[-1].weight.normal_()
    t1 = heads.project(backbone.text_encode(["what color is the square"]), "text")
    t2 = heads.project(backbone.text_encode(["where is the circle"]), "text")
    f1 = heads.film_params(t1, m, 4)
    f2 = heads.film_params(t2, m, 4)
    assert not torch.allclose(f1.scale, f2.scale)


def test_film_unknown_layer(heads):
    with pytest.raises(QsemcomError, match="selection"):
        heads.film_params(torch.randn(1, 4, 32), 17, 4)


def test_film_generators_gradient(tiny_cfg):
    torch.manual_seed(2)
    heads = ProjectionHeads(8, (1,), seed=3).double()
    m = "1"
    with torch.no_grad():
        heads.film_scale[m][-1].weight.normal_(0, 0.3)
        heads.film_scale[m][-1].bias.normal_(0, 0.3)
        heads.film_shift[m][-1].weight.normal_(0, 0.3)
    text = torch.randn(2, 3, 8, dtype=torch.float64)
    image = torch.randn(2, 4, 8, dtype=torch.float64)

    def loss_fn():
        film = heads.film_params(text, 1, n_rows=4)
        return align(image, film).square().sum()

    param_grad_check(heads, loss_fn)


# -- align -----------------------------------------------------------------------


def test_align_identity():
    x = torch.randn(3, 5, 4)
    film = FiLMParams(scale=torch.ones_like(x), shift=torch.zeros_like(x))
    assert torch.equal(align(x, film), x)


def test_align_worked_example():
    x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    scale = torch.tensor([[[2.0, 0.5], [1.0, 1.0]]])
    shift = torch.tensor([[[0.0, 1.0], [-1.0, 2.0]]])
    out = align(x, FiLMParams(scale=scale, shift=shift))
    assert torch.equal(out, torch.tensor([[[2.0, 2.0], [2.0, 6.0]]]))


def test_align_zero_scale_gives_shift():
    x = torch.randn(2, 4, 3)
    shift = torch.randn_like(x)
    out = align(x, FiLMParams(scale=torch.zeros_like(x), shift=shift))
    assert torch.equal(out, shift)


def test_align_shift_linearity():
    x = torch.randn(2, 4, 3)
    scale = torch.rand_like(x)
    s1, s2 = torch.randn_like(x), torch.randn_like(x)
    lhs = align(x, FiLMParams(scale=scale, shift=s1 + s2))
    rhs = align(x, FiLMParams(scale=scale, shift=s1)) + s2
    assert torch.allclose(lhs, rhs, atol=1e-6)


def test_align_shape_mismatch():
    x = torch.randn(2, 4, 3)
    film = FiLMParams(scale=torch.ones(2, 5, 3), shift=torch.zeros(2, 5, 3))
    with pytest.raises(QsemcomError, match="shape"):
        align(x, film)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_align_identity_property(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 4, generator=g)
    film = FiLMParams(scale=torch.ones_like(x), shift=torch.zeros_like(x))
    assert torch.equal(align(x, film), x)


# -- encode ----------------------------------------------------------------------


def test_encode_shapes_and_determinism(tiny_cfg, backbone, heads):
    images = torch.rand(2, 3, 32, 32)
    queries = ["what color is the square", "is there a circle"]
    a1 = encode(images, queries, backbone, heads, tiny_cfg.model.layer_selection)
    a2 = encode(images, queries, backbone, heads, tiny_cfg.model.layer_selection)
    assert len(a1) == len(tiny_cfg.model.layer_selection)
    for x, y in zip(a1, a2):
        assert x.shape == (2, tiny_cfg.n_image_tokens, tiny_cfg.model.embed_dim)
        assert torch.equal(x, y)


def test_encode_query_sensitivity(tiny_cfg, backbone, heads):
    m = tiny_cfg.model.layer_selection[0]
    with torch.no_grad():
        heads.film_scale[str(m)][-1].weight.normal_()
    images = torch.rand(1, 3, 32, 32)
    a = encode(images, ["what color is the square"], backbone, heads, tiny_cfg.model.layer_selection)
    b = encode(images, ["where is the circle"], backbone, heads, tiny_cfg.model.layer_selection)
    assert any(not torch.allclose(x, y) for x, y in zip(a, b))


def test_encode_alignment_bypass_is_query_invariant(tiny_cfg, backbone, heads):
    images = torch.rand(1, 3, 32, 32)
    a = encode(images, ["q one"], backbone, heads, tiny_cfg.model.layer_selection, text_alignment=False)
    b = encode(images, ["entirely different"], backbone, heads, tiny_cfg.model.layer_selection, text_alignment=False)
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_encode_paper_geometry_shapes():
    # Pretrained-scale geometry behind the same port: 224px, patch 16,
    # 12 layers, D=512, selection of four layers -> four 196x512 matrices.
    from qsemcom.config import SystemConfig

    cfg = SystemConfig()
    cfg.model.image_size = 224
    cfg.model.patch_size = 16
    cfg.model.embed_dim = 512
    cfg.model.backbone_depth = 12
    cfg.model.backbone_heads = 8
    cfg.model.layer_selection = (3, 6, 9, 11)
    cfg.validate()
    backbone = build_backbone(cfg)
    heads = ProjectionHeads(512, cfg.model.layer_selection, seed=1)
    out = encode(
        torch.rand(1, 3, 224, 224), ["is there a cat"], backbone, heads,
        cfg.model.layer_selection,
    )
    assert len(out) == 4
    for mat in out:
        assert mat.shape == (1, 196, 512)
        assert torch.isfinite(mat).all()


def test_frozen_backbone_checksum_stable_under_head_training(tiny_cfg, backbone, heads):
    before = parameter_checksum(backbone)
    images = torch.rand(2, 3, 32, 32)
    opt = torch.optim.Adam(heads.parameters(), lr=1e-2)
    for _ in range(3):
        out = encode(images, ["a", "b"], backbone, heads, tiny_cfg.model.layer_selection)
        loss = sum(o.square().sum() for o in out)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert parameter_checksum(backbone) == before
