import pytest
import torch

from helpers import grad_check
from qsemcom.decoder import DecoderNet, Discriminator, discriminate, flatten_spatial, reshape_spatial
from qsemcom.errors import QsemcomError


def test_reshape_spatial_row_major():
    rows = torch.arange(4 * 3, dtype=torch.float32).reshape(4, 3)
    grid = reshape_spatial(rows)
    assert grid.shape == (2, 2, 3)
    assert torch.equal(grid[0, 0], rows[0])
    assert torch.equal(grid[0, 1], rows[1])
    assert torch.equal(grid[1, 0], rows[2])
    assert torch.equal(grid[1, 1], rows[3])


def test_reshape_spatial_inverse():
    y = torch.randn(2, 16, 5)
    assert torch.equal(flatten_spatial(reshape_spatial(y)), y)


def test_reshape_spatial_non_square_token_count():
    with pytest.raises(QsemcomError, match="perfect square"):
        reshape_spatial(torch.randn(5, 3))


def test_reshape_paper_config_shape():
    grid = reshape_spatial(torch.randn(196, 512))
    assert grid.shape == (14, 14, 512)


def test_decoder_shape_chain():
    # 3 stages from a 4x4 grid -> 32x32 output; spatial dims double per stage.
    dec = DecoderNet(dim=16, n_stages=3, seed=0)
    received = [torch.randn(2, 16, 16) for _ in range(3)]
    out = dec(received)
    assert out.shape == (2, 3, 32, 32)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_decoder_stage_outputs_double():
    dec = DecoderNet(dim=8, n_stages=2, seed=0)
    spatial = [torch.randn(1, 9, 8) for _ in range(2)]
    captured = []

    def hook(module, inputs, output):
        captured.append(tuple(output.shape))

    for block in dec.blocks:
        block.register_forward_hook(hook)
    dec(spatial)
    assert captured == [(1, 8, 6, 6), (1, 8, 12, 12)]


def test_decoder_wrong_input_count():
    dec = DecoderNet(dim=8, n_stages=3, seed=0)
    with pytest.raises(QsemcomError, match="expects 3"):
        dec([torch.randn(1, 16, 8)])


def test_decoder_skip_order_uses_reverse_layers():
    # The first stage consumes the deepest layer; stage n>1 fuses the next
    # shallower skip.  Zeroing a shallow skip must not affect stage 1.
    dec = DecoderNet(dim=8, n_stages=2, seed=1)
    deep = torch.randn(1, 16, 8)
    shallow = torch.randn(1, 16, 8)
    out_a = dec([shallow, deep])
    out_b = dec([torch.zeros_like(shallow), deep])
    assert not torch.equal(out_a, out_b)  # the shallow skip matters overall
    # but stage-1 input depends only on the deepest layer
    x = reshape_spatial(deep).permute(0, 3, 1, 2).contiguous()
    ref_stage1 = dec.blocks[0](x)
    assert torch.equal(dec.blocks[0](x), ref_stage1)
    out_c = dec([shallow, deep * 2])
    assert not torch.equal(out_a, out_c)  # the deep layer matters too


def test_decoder_output_in_unit_range_random_inputs():
    dec = DecoderNet(dim=8, n_stages=2, seed=2)
    out = dec([torch.randn(3, 16, 8) * 10 for _ in range(2)])
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_decoder_gradients_finite_and_nonzero():
    dec = DecoderNet(dim=8, n_stages=2, seed=3)
    target = torch.rand(1, 3, 16, 16)
    received = [torch.randn(1, 16, 8, requires_grad=True) for _ in range(2)]
    loss = (dec(received) - target).abs().sum()
    loss.backward()
    for p in dec.parameters():
        assert p.grad is not None
        assert torch.isfinite(p.grad).all()
    grads = torch.cat([p.grad.reshape(-1) for p in dec.parameters()])
    assert float(grads.abs().sum()) > 0


def test_decoder_gradient_matches_finite_differences():
    torch.manual_seed(0)
    dec = DecoderNet(dim=4, n_stages=2, seed=4).double()
    other = torch.randn(1, 4, 4, dtype=torch.float64)
    x0 = torch.randn(1, 4, 4, dtype=torch.float64)
    grad_check(lambda x: dec([other, x]).square().sum(), x0, tol=1e-3)


def test_decoder_inference_deterministic():
    dec = DecoderNet(dim=8, n_stages=2, seed=5).eval()
    received = [torch.randn(2, 16, 8) for _ in range(2)]
    assert torch.equal(dec(received), dec(received))


# -- discriminator -------------------------------------------------------------


def test_discriminator_output_open_interval():
    disc = Discriminator(seed=0)
    for scale in (0.0, 1.0, 100.0):
        out = disc(torch.rand(4, 3, 32, 32) * scale)
        assert out.shape == (4,)
        assert float(out.min()) > 0.0 and float(out.max()) < 1.0


def test_discriminate_single_image():
    disc = Discriminator(seed=0)
    p = discriminate(torch.rand(3, 16, 16), disc)
    assert p.ndim == 0 and 0.0 < float(p) < 1.0


def test_discriminator_gradient_matches_finite_differences():
    torch.manual_seed(0)
    disc = Discriminator(widths=(4, 8, 16, 16), seed=6).double()
    x0 = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    grad_check(lambda x: disc(x).sum(), x0, tol=1e-3)
