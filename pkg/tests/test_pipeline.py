import numpy as np
import pytest
import torch

from qsemcom.data import build_datasets
from qsemcom.phy.channel import ChannelState
from qsemcom.pipeline import CodingPipeline
from qsemcom.quantizer import assign_indices, lookup
from qsemcom.trainer import _collate, init_train_state, train_step_phase1


@pytest.fixture
def pipeline(tiny_cfg):
    return CodingPipeline(tiny_cfg)


@pytest.fixture
def batch(tiny_cfg):
    train_ds, _, _ = build_datasets(tiny_cfg)
    return _collate(train_ds, np.arange(4))


def test_surrogate_forward_shapes(tiny_cfg, pipeline, batch, rng):
    images, queries, _ = batch
    fwd = pipeline.forward_surrogate(images, queries, p_e=0.2, rng=rng)
    assert fwd.reconstruction.shape == images.shape
    assert len(fwd.aligned) == len(tiny_cfg.model.layer_selection)
    for idx in fwd.indices:
        assert idx.shape == (4, tiny_cfg.n_image_tokens, tiny_cfg.n_segments)
        assert idx.min() >= 1 and idx.max() <= tiny_cfg.quantizer.codeword_count


def test_surrogate_zero_error_equals_clean(tiny_cfg, pipeline, batch, rng):
    images, queries, _ = batch
    fwd = pipeline.forward_surrogate(images, queries, p_e=0.0, rng=rng)
    clean = pipeline.reconstruct_clean(images, queries)
    assert torch.equal(fwd.reconstruction.detach(), clean)


def test_surrogate_gradients_reach_all_trainables(tiny_cfg, pipeline, batch, rng):
    images, queries, _ = batch
    fwd = pipeline.forward_surrogate(images, queries, p_e=0.3, rng=rng)
    loss = (images - fwd.reconstruction).abs().sum()
    loss.backward()
    grads = [
        p.grad for p in pipeline.heads.parameters() if p.requires_grad
    ] + [p.grad for p in pipeline.decoder.parameters()]
    assert all(g is not None and torch.isfinite(g).all() for g in grads)
    # Straight-through: encoder heads receive signal despite quantization.
    head_norm = sum(float(g.abs().sum()) for g in
                    [p.grad for p in pipeline.heads.parameters() if p.requires_grad])
    assert head_norm > 0
    # The decoder path must not push gradients into the codebook.
    assert pipeline.codeword_param.grad is None or torch.all(
        pipeline.codeword_param.grad == 0
    )


def test_channel_forward_noiseless_identity(tiny_cfg, pipeline, batch, rng):
    images, queries, _ = batch
    state = ChannelState(snr_db=float("inf"), fading=True)
    recon, ier = pipeline.forward_channel(images, queries, state, rng)
    assert ier == 0.0
    clean = pipeline.reconstruct_clean(images, queries)
    assert torch.equal(recon, clean)


def test_channel_forward_reports_errors_at_low_snr(tiny_cfg, pipeline, batch, rng):
    images, queries, _ = batch
    state = ChannelState(snr_db=-5.0, fading=False)
    recon, ier = pipeline.forward_channel(images, queries, state, rng, scheme="none")
    assert ier > 0.3
    assert recon.shape == images.shape


def test_received_values_are_codebook_rows(tiny_cfg, pipeline, batch, rng):
    images, queries, _ = batch
    cb = pipeline._codebook()
    with torch.no_grad():
        aligned = pipeline.aligned_features(images, queries)
        received = lookup(assign_indices(aligned[0], cb), cb)
    segs = received.reshape(-1, cb.n_segments, cb.segment_length)
    table = cb.codewords.detach()
    for l in range(cb.n_segments):
        uniq = segs[:, l, :].unique(dim=0)
        for row in uniq:
            assert any(torch.equal(row, c) for c in table[l])


def test_scorer_without_gradients_falls_back(tiny_cfg, caplog):
    train_ds, _, _ = build_datasets(tiny_cfg)
    state = init_train_state(tiny_cfg, warmup_ds=train_ds)

    class NoGradScorer:
        provides_gradients = False
        frozen = True

        def checksum(self):
            return "static"

    state.scorer = NoGradScorer()
    images, queries, _ = _collate(train_ds, np.arange(tiny_cfg.train.batch_size))
    import logging

    with caplog.at_level(logging.WARNING):
        bundle = train_step_phase1(state, tiny_cfg, images, queries, p_e=0.1)
    assert bundle.user == 0.0
    assert any("gradients" in rec.message for rec in caplog.records)
