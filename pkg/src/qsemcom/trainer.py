"""Two-phase training: reconstruction+relevance+quantization first, then
alternating adversarial fine-tuning.

Phase I updates the projection heads, decoder, and codewords with the
composite reconstruction loss; the backbone and scorer stay frozen.  Phase II
adds the generator term, then updates the discriminator on its own loss with
the model held fixed, alternating every step.  Each step samples an SNR from
the training grid and corrupts indices through the calibrated surrogate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import SystemConfig, config_from_dict, config_hash, config_to_dict
from .data import Dataset, build_datasets
from .decoder import Discriminator
from .errors import QsemcomError, TrainingDiverged
from .losses import LossBundle, LossLog, dis_loss, gen_loss, l1_loss, phase1_loss, phase2_loss
from .pipeline import CodingPipeline
from .quantizer import (
    Codebook,
    codebook_maintenance,
    init_codebook,
    quantization_loss,
)
from .phy.channel import CalibrationTable
from .relevance import build_scorer, user_intent_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    pipeline: CodingPipeline
    disc: Discriminator
    scorer: object
    opt_gen: torch.optim.Optimizer
    opt_dis: torch.optim.Optimizer
    data_rng: np.random.Generator
    channel_rng: np.random.Generator
    epochs_phase1: int = 0
    epochs_phase2: int = 0
    step: int = 0
    phase: str = "phase1"
    usage: np.ndarray | None = None
    val_history: list[dict] = field(default_factory=list)
    collapse_run: int = 0

    @property
    def epoch(self) -> int:
        return self.epochs_phase1 + self.epochs_phase2


def _collate(ds: Dataset, idx: np.ndarray) -> tuple[torch.Tensor, list[str], list[str]]:
    samples = [ds.samples[int(i)] for i in idx]
    images = torch.stack([s.image for s in samples])
    return images, [s.query for s in samples], [s.answer for s in samples]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def init_train_state(cfg: SystemConfig, warmup_ds: Dataset | None = None) -> TrainState:
    pipeline = CodingPipeline(cfg)
    scorer = build_scorer(cfg)
    if warmup_ds is not None:
        n_warm = min(len(warmup_ds), 4 * cfg.train.batch_size)
        images, queries, _ = _collate(warmup_ds, np.arange(n_warm))
        with torch.no_grad():
            aligned = pipeline.aligned_features(images, queries)
        warm = [a.reshape(-1, cfg.model.embed_dim) for a in aligned]
    else:
        warm = None
    pipeline.set_codebook(
        init_codebook(
            warm,
            cfg.n_segments,
            cfg.quantizer.codeword_count,
            cfg.quantizer.segment_length,
            seed=cfg.seed,
            kmeans_iters=cfg.quantizer.kmeans_iters,
        )
    )
    disc = Discriminator(seed=cfg.seed)
    gen_params = [p for p in pipeline.parameters() if p.requires_grad]
    opt_gen = torch.optim.Adam(gen_params, lr=cfg.train.lr_gen)
    opt_dis = torch.optim.Adam(disc.parameters(), lr=cfg.train.lr_dis)
    return TrainState(
        pipeline=pipeline,
        disc=disc,
        scorer=scorer,
        opt_gen=opt_gen,
        opt_dis=opt_dis,
        data_rng=np.random.default_rng((cfg.seed, 11)),
        channel_rng=np.random.default_rng((cfg.seed, 13)),
        usage=np.zeros((cfg.n_segments, cfg.quantizer.codeword_count), dtype=np.int64),
    )


def _accumulate_usage(state: TrainState, indices: list[torch.Tensor], n_cw: int) -> None:
    for idx in indices:
        flat = idx.detach().cpu().numpy().reshape(-1, state.usage.shape[0])
        for l in range(state.usage.shape[0]):
            state.usage[l] += np.bincount(flat[:, l] - 1, minlength=n_cw)


def _loss_components(
    state: TrainState,
    cfg: SystemConfig,
    images: torch.Tensor,
    queries: list[str],
    p_e: float,
    out_dir: Path | None = None,
):
    try:
        fwd = state.pipeline.forward_surrogate(images, queries, p_e, state.channel_rng)
    except QsemcomError as exc:
        if "non-finite" not in str(exc):
            raise
        snapshot = None
        if out_dir is not None:
            snapshot = out_dir / f"diverged_step{state.step}.pt"
            save_checkpoint(state, cfg, snapshot)
        raise TrainingDiverged(
            f"non-finite features at step {state.step}"
            + (f"; snapshot at {snapshot}" if snapshot else "")
        ) from exc
    batch = images.shape[0]
    l1 = l1_loss(images, fwd.reconstruction) / batch
    scorer_grads = getattr(state.scorer, "provides_gradients", False)
    if cfg.train.lambda_user > 0 and not scorer_grads:
        # L_user stays evaluation-only for gradient-free scorer backends.
        if not getattr(state, "_warned_no_scorer_grads", False):
            log.warning(
                "scorer does not expose gradients; phase losses fall back to "
                "L1 + quantization"
            )
            state._warned_no_scorer_grads = True
    if cfg.train.lambda_user > 0 and scorer_grads:
        report = user_intent_loss(
            images, fwd.reconstruction, queries, state.scorer, cfg.scorer.token_scope
        )
        user = report.loss
    else:
        user = torch.zeros(())
    quant = (
        quantization_loss(
            fwd.aligned, state.pipeline._codebook(), cfg.train.beta, indices=fwd.indices
        )
        / batch
    )
    return fwd, l1, user, quant


def _check_finite(state: TrainState, cfg: SystemConfig, total: torch.Tensor, out_dir: Path | None):
    if torch.isfinite(total):
        return
    snapshot = None
    if out_dir is not None:
        snapshot = out_dir / f"diverged_step{state.step}.pt"
        save_checkpoint(state, cfg, snapshot)
    raise TrainingDiverged(
        f"non-finite loss at step {state.step}"
        + (f"; snapshot at {snapshot}" if snapshot else "")
    )


def train_step_phase1(
    state: TrainState,
    cfg: SystemConfig,
    images: torch.Tensor,
    queries: list[str],
    p_e: float,
    out_dir: Path | None = None,
) -> LossBundle:
    fwd, l1, user, quant = _loss_components(state, cfg, images, queries, p_e, out_dir)
    total = phase1_loss(l1, user, quant, cfg.train.lambda_user, cfg.train.lambda_quant)
    _check_finite(state, cfg, total, out_dir)
    state.opt_gen.zero_grad()
    total.backward()
    state.opt_gen.step()
    _accumulate_usage(state, fwd.indices, cfg.quantizer.codeword_count)
    state.step += 1
    return LossBundle(
        l1=float(l1.detach()),
        user=float(user.detach()),
        quant=float(quant.detach()),
        lambda_user=cfg.train.lambda_user,
        lambda_quant=cfg.train.lambda_quant,
        lambda_gen=cfg.train.lambda_gen,
        beta=cfg.train.beta,
    )


def train_step_phase2(
    state: TrainState,
    cfg: SystemConfig,
    images: torch.Tensor,
    queries: list[str],
    p_e: float,
    out_dir: Path | None = None,
) -> LossBundle:
    # Model update, discriminator fixed.
    fwd, l1, user, quant = _loss_components(state, cfg, images, queries, p_e, out_dir)
    d_fake = state.disc(fwd.reconstruction)
    gen = gen_loss(d_fake)
    total = phase2_loss(
        l1, user, quant, gen,
        cfg.train.lambda_user, cfg.train.lambda_quant, cfg.train.lambda_gen,
    )
    _check_finite(state, cfg, total, out_dir)
    state.opt_gen.zero_grad()
    total.backward()
    state.opt_gen.step()
    _accumulate_usage(state, fwd.indices, cfg.quantizer.codeword_count)

    # Discriminator update, model fixed.
    state.opt_dis.zero_grad()
    d_real = state.disc(images)
    d_fake_detached = state.disc(fwd.reconstruction.detach())
    dl = dis_loss(d_real, d_fake_detached)
    dl.backward()
    state.opt_dis.step()

    r = float(d_real.detach().mean())
    f = float(d_fake_detached.detach().mean())
    if (r < 0.02 and f < 0.02) or (r > 0.98 and f > 0.98):
        state.collapse_run += 1
        if state.collapse_run >= 100:
            for group in state.opt_dis.param_groups:
                group["lr"] *= 0.5
            log.warning(
                "discriminator collapse at step %d; halving eta_dis to %g",
                state.step, state.opt_dis.param_groups[0]["lr"],
            )
            state.collapse_run = 0
    else:
        state.collapse_run = 0

    state.step += 1
    return LossBundle(
        l1=float(l1.detach()),
        user=float(user.detach()),
        quant=float(quant.detach()),
        gen=float(gen.detach()),
        dis=float(dl.detach()),
        lambda_user=cfg.train.lambda_user,
        lambda_quant=cfg.train.lambda_quant,
        lambda_gen=cfg.train.lambda_gen,
        beta=cfg.train.beta,
    )


@torch.no_grad()
def validate(state: TrainState, cfg: SystemConfig, val_ds: Dataset) -> dict:
    """Channel-free reconstruction metrics (per-sample mean L1 sum, L_user)."""
    batch = min(cfg.train.batch_size, len(val_ds))
    l1_vals: list[float] = []
    user_vals: list[float] = []
    for start in range(0, len(val_ds), batch):
        idx = np.arange(start, min(start + batch, len(val_ds)))
        images, queries, _ = _collate(val_ds, idx)
        recon = state.pipeline.reconstruct_clean(images, queries)
        l1_vals += [float((x - y).abs().sum()) for x, y in zip(images, recon)]
        report = user_intent_loss(
            images, recon, queries, state.scorer, cfg.scorer.token_scope
        )
        user_vals.append(float(report.loss))
    return {
        "val_l1": float(np.mean(l1_vals)),
        "val_user": float(np.mean(user_vals)),
    }


def _step_error_rate(state: TrainState, cfg: SystemConfig, calib: CalibrationTable) -> float:
    """Per-step surrogate error rate: draw the nominal SNR from the training
    grid and a fading gain, then look up the fixed-gain calibration at the
    instantaneous SNR."""
    snr = float(state.channel_rng.choice(np.asarray(cfg.train.snr_grid_db)))
    if cfg.phy.fading:
        re, im = state.channel_rng.standard_normal(2)
        gain2 = (re * re + im * im) / 2.0
        snr = snr + 10.0 * np.log10(max(gain2, 1e-12))
    return calib.interp(cfg.phy.scheme, snr)


def _epoch(
    state: TrainState,
    cfg: SystemConfig,
    train_ds: Dataset,
    calib: CalibrationTable,
    loss_log: LossLog,
    phase: str,
    out_dir: Path | None,
) -> None:
    step_fn = train_step_phase1 if phase == "phase1" else train_step_phase2
    for idx in _batches(len(train_ds), cfg.train.batch_size, state.data_rng):
        p_e = _step_error_rate(state, cfg, calib)
        images, queries, _ = _collate(train_ds, idx)
        bundle = step_fn(state, cfg, images, queries, p_e, out_dir)
        loss_log.append(state.step, phase, bundle)


def _maintenance(state: TrainState, cfg: SystemConfig) -> None:
    cb, revived = codebook_maintenance(
        state.usage,
        Codebook(state.pipeline.codeword_param.detach().clone()),
        threshold_frac=cfg.quantizer.revive_threshold,
        seed=cfg.seed + state.epoch,
    )
    if revived:
        log.info("revived %d dead codewords after epoch %d", revived, state.epoch)
        state.pipeline.set_codebook(cb)
    state.usage[:] = 0


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, cfg: SystemConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": config_to_dict(cfg),
            "config_hash": config_hash(cfg),
            "backbone": state.pipeline.backbone.state_dict(),
            "heads": state.pipeline.heads.state_dict(),
            "decoder": state.pipeline.decoder.state_dict(),
            "codebook": state.pipeline.codeword_param.detach().clone(),
            "disc": state.disc.state_dict(),
            "opt_gen": state.opt_gen.state_dict(),
            "opt_dis": state.opt_dis.state_dict(),
            "epochs_phase1": state.epochs_phase1,
            "epochs_phase2": state.epochs_phase2,
            "step": state.step,
            "phase": state.phase,
            "usage": torch.from_numpy(state.usage.copy()),
            "val_history": state.val_history,
            "collapse_run": state.collapse_run,
            "data_rng": state.data_rng.bit_generator.state,
            "channel_rng": state.channel_rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> tuple[TrainState, SystemConfig]:
    blob = torch.load(Path(path), weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise QsemcomError(f"unsupported checkpoint version in {path}")
    cfg = config_from_dict(blob["config"])
    state = init_train_state(cfg, warmup_ds=None)
    state.pipeline.backbone.load_state_dict(blob["backbone"])
    state.pipeline.heads.load_state_dict(blob["heads"])
    state.pipeline.decoder.load_state_dict(blob["decoder"])
    with torch.no_grad():
        state.pipeline.codeword_param.copy_(blob["codebook"])
    state.disc.load_state_dict(blob["disc"])
    state.opt_gen.load_state_dict(blob["opt_gen"])
    state.opt_dis.load_state_dict(blob["opt_dis"])
    state.epochs_phase1 = blob["epochs_phase1"]
    state.epochs_phase2 = blob["epochs_phase2"]
    state.step = blob["step"]
    state.phase = blob["phase"]
    state.usage = blob["usage"].numpy().copy()
    state.val_history = list(blob["val_history"])
    state.collapse_run = blob["collapse_run"]
    state.data_rng.bit_generator.state = blob["data_rng"]
    state.channel_rng.bit_generator.state = blob["channel_rng"]
    torch.set_rng_state(blob["torch_rng"])
    return state, cfg


def _retain_checkpoints(out_dir: Path, keep: int, best_epoch: int | None) -> None:
    epochal = sorted(out_dir.glob("ckpt_epoch_*.pt"))
    protected = set(epochal[-keep:]) if keep > 0 else set()
    if best_epoch is not None:
        protected.add(out_dir / f"ckpt_epoch_{best_epoch:03d}.pt")
    for ck in epochal:
        if ck not in protected:
            ck.unlink()


# ---------------------------------------------------------------------------
# Top-level training
# ---------------------------------------------------------------------------


def train(
    cfg: SystemConfig,
    out_dir: str | Path,
    train_ds: Dataset | None = None,
    val_ds: Dataset | None = None,
    resume: str | Path | None = None,
) -> Path:
    """Run the two-phase algorithm end to end; returns the final checkpoint."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if train_ds is None or val_ds is None:
        train_ds, val_ds, _ = build_datasets(cfg)
    if len(train_ds) < cfg.train.batch_size:
        raise QsemcomError(
            f"training set ({len(train_ds)}) smaller than one batch "
            f"({cfg.train.batch_size})"
        )

    calib_path = out / "calibration.tsv"
    calib = CalibrationTable.load(calib_path) if calib_path.exists() else CalibrationTable()
    # Fixed-gain curve over a fine grid; per-step fading shifts into it.
    from .phy.channel import CALIBRATION_GRID_DB

    calib.ensure(
        cfg.phy.scheme,
        CALIBRATION_GRID_DB,
        cfg.quantizer.codeword_count,
        seed=cfg.seed,
        n_indices=cfg.phy.calibration_trials,
        fading=False,
        ldpc_block_length=cfg.phy.ldpc_block_length,
    )
    calib.save(calib_path)

    if resume is not None:
        state, stored_cfg = load_checkpoint(resume)
        stored, current = config_to_dict(stored_cfg), config_to_dict(cfg)
        for section in ("model", "quantizer"):
            if stored[section] != current[section]:
                raise QsemcomError(
                    f"checkpoint {section} config does not match the current "
                    f"config; cannot resume"
                )
        # The caller's schedule (epochs, rates) governs the resumed run.
    else:
        state = init_train_state(cfg, warmup_ds=train_ds)

    loss_log = LossLog(out / "loss_log.tsv")

    best_epoch: int | None = None
    best_val = float("inf")
    for row in state.val_history:
        if row["val_l1"] < best_val:
            best_val, best_epoch = row["val_l1"], row["epoch"]

    def end_epoch(phase: str) -> None:
        nonlocal best_epoch, best_val
        _maintenance(state, cfg)
        metrics = validate(state, cfg, val_ds)
        metrics["epoch"] = state.epoch
        metrics["phase"] = phase
        state.val_history.append(metrics)
        save_checkpoint(state, cfg, out / f"ckpt_epoch_{state.epoch:03d}.pt")
        if metrics["val_l1"] < best_val:
            best_val, best_epoch = metrics["val_l1"], state.epoch
        _retain_checkpoints(out, cfg.train.checkpoint_keep, best_epoch)
        log.info(
            "epoch %d (%s): val_l1=%.3f val_user=%.4f",
            state.epoch, phase, metrics["val_l1"], metrics["val_user"],
        )

    while state.epochs_phase1 < cfg.train.epochs_phase1:
        state.phase = "phase1"
        _epoch(state, cfg, train_ds, calib, loss_log, "phase1", out)
        state.epochs_phase1 += 1
        end_epoch("phase1")

    while state.epochs_phase2 < cfg.train.epochs_phase2:
        state.phase = "phase2"
        _epoch(state, cfg, train_ds, calib, loss_log, "phase2", out)
        state.epochs_phase2 += 1
        end_epoch("phase2")

    state.phase = "done"
    return save_checkpoint(state, cfg, out / "ckpt_final.pt")
