"""End-to-end evaluation: SNR sweeps over the real physical layer, the
segment-length study, the no-text-alignment ablation, a conventional codec
baseline, and report emission (tables, machine summary, plots)."""

from __future__ import annotations

import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
import torch

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .config import SystemConfig, config_hash
from .data import Dataset
from .errors import PartialResult, QsemcomError
from .losses import l1_loss
from .phy.channel import ChannelState
from .phy.modem import BITS_PER_PSK_SYMBOL
from .phy.symbols import SymbolBudget, symbol_count_for_config
from .relevance import normalize_answer, user_intent_loss
from .trainer import TrainState, _collate, load_checkpoint

SCHEMA_VERSION = 1


@dataclass
class EvalRow:
    snr_db: float
    match_rate: float
    user_loss: float
    l1: float
    index_error_rate: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    symbols: SymbolBudget
    metadata: dict = field(default_factory=dict)

    def sorted_rows(self) -> list[EvalRow]:
        return sorted(self.rows, key=lambda r: r.snr_db)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "metadata": self.metadata,
            "symbols": asdict(self.symbols),
            "rows": [asdict(r) for r in self.sorted_rows()],
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "EvalReport":
        return cls(
            rows=[EvalRow(**r) for r in blob["rows"]],
            symbols=SymbolBudget(**blob["symbols"]),
            metadata=dict(blob["metadata"]),
        )


def _answers_for(state: TrainState, images: torch.Tensor, queries: list[str]) -> list[str]:
    return state.scorer.answer(images, queries)


@torch.no_grad()
def snr_sweep(
    checkpoint: str | Path | TrainState,
    ds: Dataset,
    snr_grid: tuple[float, ...],
    seed: int = 0,
    scheme: str | None = None,
    variant: str = "full",
) -> EvalReport:
    """Full-pipeline metrics (real phy) for every SNR in the grid."""
    if not snr_grid:
        raise QsemcomError("SNR grid must be non-empty")
    if isinstance(checkpoint, TrainState):
        state, cfg = checkpoint, checkpoint.pipeline.cfg
        ckpt_id = "in-memory"
    else:
        state, cfg = load_checkpoint(checkpoint)
        ckpt_id = Path(checkpoint).name
    if ds.image_size != cfg.model.image_size:
        raise QsemcomError(
            f"dataset image size {ds.image_size} does not match checkpoint "
            f"config {cfg.model.image_size}"
        )
    scheme = scheme or cfg.phy.scheme
    batch = min(cfg.train.batch_size, len(ds))

    # Reference answers from the originals, computed once.
    ref_answers: list[str] = []
    for start in range(0, len(ds), batch):
        idx = np.arange(start, min(start + batch, len(ds)))
        images, queries, _ = _collate(ds, idx)
        ref_answers += _answers_for(state, images, queries)

    rows = []
    for snr in sorted(snr_grid):
        rng = np.random.default_rng((seed, 10**6 + int(round(min(snr, 1e6) * 100))))
        chan = ChannelState(snr_db=float(snr), fading=cfg.phy.fading)
        l1_vals: list[float] = []
        user_vals: list[float] = []
        err_rates: list[float] = []
        matches = 0
        for start in range(0, len(ds), batch):
            idx = np.arange(start, min(start + batch, len(ds)))
            images, queries, _ = _collate(ds, idx)
            recon, ier = state.pipeline.forward_channel(
                images, queries, chan, rng, scheme=scheme
            )
            err_rates.append(ier)
            l1_vals += [float((x - y).abs().sum()) for x, y in zip(images, recon)]
            user_vals.append(
                float(
                    user_intent_loss(
                        images, recon, queries, state.scorer, cfg.scorer.token_scope
                    ).loss
                )
            )
            hyp = _answers_for(state, recon, queries)
            for i, h in zip(idx, hyp):
                if normalize_answer(h) == normalize_answer(ref_answers[int(i)]):
                    matches += 1
        rows.append(
            EvalRow(
                snr_db=float(snr),
                match_rate=matches / len(ds),
                user_loss=float(np.mean(user_vals)),
                l1=float(np.mean(l1_vals)),
                index_error_rate=float(np.mean(err_rates)),
            )
        )
    return EvalReport(
        rows=rows,
        symbols=symbol_count_for_config(cfg),
        metadata={
            "config_hash": config_hash(cfg),
            "checkpoint": ckpt_id,
            "seed": seed,
            "n_samples": len(ds),
            "scheme": scheme,
            "split_tag": ds.split_tag,
            "variant": variant,
        },
    )


def segment_length_study(
    checkpoints: dict[int, str | Path | TrainState],
    ds: Dataset,
    snr_grid: tuple[float, ...],
    seed: int = 0,
) -> dict[int, EvalReport]:
    """Per-segment-length sweeps; halving N_L must exactly double the index
    count, which is asserted across the provided models."""
    reports = {
        int(nl): snr_sweep(ck, ds, snr_grid, seed=seed, variant=f"segment-{nl}")
        for nl, ck in checkpoints.items()
    }
    for nl, rep in reports.items():
        half = nl // 2
        if half in reports:
            if reports[half].symbols.indices != 2 * rep.symbols.indices:
                raise QsemcomError(
                    f"index accounting broken: N_L={half} should double N_L={nl}"
                )
    return reports


def query_invariance_check(
    state: TrainState, images: torch.Tensor, query_a: str, query_b: str
) -> bool:
    """True when transmitted indices are identical under a query swap."""
    with torch.no_grad():
        idx_a = state.pipeline.encoder_indices(
            state.pipeline.aligned_features(images, [query_a] * images.shape[0])
        )
        idx_b = state.pipeline.encoder_indices(
            state.pipeline.aligned_features(images, [query_b] * images.shape[0])
        )
    return all(torch.equal(a, b) for a, b in zip(idx_a, idx_b))


def ablation_no_text(
    checkpoint_full: str | Path | TrainState,
    checkpoint_ablated: str | Path | TrainState,
    ds: Dataset,
    snr_grid: tuple[float, ...],
    seed: int = 0,
) -> tuple[EvalReport, EvalReport]:
    """Paired sweeps of the full model and the FiLM-bypassed ablation on the
    same dataset and seed."""
    if isinstance(checkpoint_ablated, TrainState):
        abl_cfg = checkpoint_ablated.pipeline.cfg
    else:
        _, abl_cfg = load_checkpoint(checkpoint_ablated)
    if abl_cfg.model.text_alignment or abl_cfg.train.lambda_user != 0:
        raise QsemcomError(
            "ablated checkpoint must have model.text_alignment=false and "
            "train.lambda_user=0"
        )
    full = snr_sweep(checkpoint_full, ds, snr_grid, seed=seed, variant="full")
    ablated = snr_sweep(
        checkpoint_ablated, ds, snr_grid, seed=seed, variant="no-text-alignment"
    )
    return full, ablated


# ---------------------------------------------------------------------------
# Conventional codec baseline
# ---------------------------------------------------------------------------


class Jpeg2000Codec:
    """Lossy wavelet codec behind a minimal port (8-bit RGB in/out).

    quality is a compression-rate factor; quality 0 selects the reversible
    (lossless) mode.
    """

    name = "jpeg2000"

    @staticmethod
    def available() -> bool:
        try:
            from PIL import features

            return bool(features.check("jpg_2000"))
        except Exception:
            return False

    @staticmethod
    def encode(image: torch.Tensor, quality: int) -> bytes:
        from PIL import Image

        arr = (
            (image.clamp(0, 1).numpy().transpose(1, 2, 0) * 255.0)
            .round()
            .astype(np.uint8)
        )
        buf = io.BytesIO()
        if quality <= 0:
            Image.fromarray(arr).save(
                buf, format="JPEG2000", irreversible=False,
                quality_mode="rates", quality_layers=[0],
            )
        else:
            Image.fromarray(arr).save(
                buf, format="JPEG2000", irreversible=True,
                quality_mode="rates", quality_layers=[quality],
            )
        return buf.getvalue()

    @staticmethod
    def decode(blob: bytes, image_size: int) -> torch.Tensor:
        from PIL import Image

        arr = np.asarray(
            Image.open(io.BytesIO(blob)).convert("RGB"), dtype=np.float32
        )
        if arr.shape[0] != image_size or arr.shape[1] != image_size:
            raise QsemcomError("decoded size mismatch")
        return torch.from_numpy(arr.transpose(2, 0, 1) / 255.0)


@dataclass
class CodecRow:
    quality: int
    snr_db: float
    mean_bytes: float
    mean_channel_symbols: float
    l1: float
    decode_failure_rate: float


@dataclass
class CodecReport:
    rows: list[CodecRow]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "metadata": self.metadata,
            "rows": [asdict(r) for r in self.rows],
        }


def conventional_codec_baseline(
    ds: Dataset,
    quality_levels: tuple[int, ...],
    snr_grid: tuple[float, ...],
    cfg: SystemConfig,
    seed: int = 0,
    codec: type[Jpeg2000Codec] = Jpeg2000Codec,
) -> CodecReport:
    """Transmit codec bitstreams over the same channel/coding stack and record
    symbol budgets and pixel fidelity.  Raises PartialResult when the codec
    backend is unavailable."""
    if not codec.available():
        raise PartialResult(f"codec backend {codec.name!r} unavailable")
    rows = []
    gray_fallback = torch.full(
        (3, cfg.model.image_size, cfg.model.image_size), 0.5
    )
    for quality in quality_levels:
        blobs = [codec.encode(s.image, quality) for s in ds.samples]
        sizes = [len(b) for b in blobs]
        symbol_counts = []
        for b in sizes:
            bits = 8 * b
            if cfg.phy.scheme == "repetition-3":
                bits *= 3
            elif cfg.phy.scheme == "ldpc-3-6":
                from .phy import ldpc as ldpc_mod

                code = ldpc_mod.make_ldpc_code(cfg.phy.ldpc_block_length)
                bits = math.ceil(8 * b / code.k) * code.n
            symbol_counts.append(math.ceil(bits / BITS_PER_PSK_SYMBOL))
        for snr in sorted(snr_grid):
            rng = np.random.default_rng((seed, int(round(min(snr, 1e6) * 100)) + 10**6, quality + 10**3))
            chan = ChannelState(snr_db=float(snr), fading=cfg.phy.fading)
            l1_vals = []
            failures = 0
            for sample, blob in zip(ds.samples, blobs):
                sent_bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8))
                recv_bits = _transmit_bits(sent_bits, chan, cfg, rng)
                recv_blob = np.packbits(recv_bits).tobytes()
                try:
                    recon = codec.decode(recv_blob, cfg.model.image_size)
                except Exception:
                    failures += 1
                    recon = gray_fallback
                l1_vals.append(float(l1_loss(sample.image, recon)))
            rows.append(
                CodecRow(
                    quality=int(quality),
                    snr_db=float(snr),
                    mean_bytes=float(np.mean(sizes)),
                    mean_channel_symbols=float(np.mean(symbol_counts)),
                    l1=float(np.mean(l1_vals)),
                    decode_failure_rate=failures / len(ds),
                )
            )
    return CodecReport(
        rows=rows,
        metadata={
            "codec": codec.name,
            "scheme": cfg.phy.scheme,
            "seed": seed,
            "n_samples": len(ds),
            "config_hash": config_hash(cfg),
        },
    )


def _transmit_bits(
    bits: np.ndarray, chan: ChannelState, cfg: SystemConfig, rng: np.random.Generator
) -> np.ndarray:
    from .phy import ldpc as ldpc_mod
    from .phy.channel import _decode_llr, _encode_bits, apply_channel
    from .phy.modem import modulate, soft_demodulate

    code = (
        ldpc_mod.make_ldpc_code(cfg.phy.ldpc_block_length)
        if cfg.phy.scheme == "ldpc-3-6"
        else None
    )
    coded, n_info = _encode_bits(bits.astype(np.uint8), cfg.phy.scheme, code)
    frame = modulate(coded)
    received, h = apply_channel(frame, chan, rng)
    if h == 0:
        return rng.integers(0, 2, n_info).astype(np.uint8)
    llr = soft_demodulate(received.samples, h, chan.noise_var, received.n_bits)
    return _decode_llr(llr, cfg.phy.scheme, n_info, code)


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

_METRICS = ("match_rate", "user_loss", "l1", "index_error_rate")
_TABLE_HEADER = ("snr_db", "match_rate", "user_loss", "l1", "index_error_rate")


def emit_report(
    reports: EvalReport | dict[str, EvalReport],
    out_dir: str | Path,
    stem: str = "eval",
) -> dict[str, Path]:
    """Write the TSV table(s), a machine-readable summary, and metric plots.

    Re-emission from the same report is byte-identical except the summary's
    timestamp field.
    """
    if isinstance(reports, EvalReport):
        reports = {"full": reports}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    for label, report in reports.items():
        table = out / f"{stem}_{label}.tsv"
        lines = ["\t".join(_TABLE_HEADER)]
        for row in report.sorted_rows():
            lines.append(
                f"{row.snr_db:g}\t{row.match_rate:.6f}\t{row.user_loss:.6f}"
                f"\t{row.l1:.6f}\t{row.index_error_rate:.6f}"
            )
        table.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written[f"table:{label}"] = table

    summary = out / f"{stem}_summary.json"
    payload = {
        "schema_version": SCHEMA_VERSION,
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "reports": {label: rep.to_dict() for label, rep in reports.items()},
    }
    summary.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    written["summary"] = summary

    for metric in _METRICS:
        fig, ax = plt.subplots(figsize=(5, 3.4))
        for label, report in reports.items():
            rows = report.sorted_rows()
            ax.plot(
                [r.snr_db for r in rows],
                [getattr(r, metric) for r in rows],
                marker="o",
                label=label,
            )
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(metric)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / f"{stem}_{metric}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written[f"plot:{metric}"] = path
    return written


def reemit_from_summary(summary_path: str | Path, out_dir: str | Path) -> dict:
    blob = json.loads(Path(summary_path).read_text(encoding="utf-8"))
    if blob.get("schema_version") != SCHEMA_VERSION:
        raise QsemcomError("unsupported summary schema version")
    reports = {
        label: EvalReport.from_dict(rep) for label, rep in blob["reports"].items()
    }
    return emit_report(reports, out_dir)
