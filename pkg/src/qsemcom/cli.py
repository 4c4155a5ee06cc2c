"""Command-line entry point.

Verbs: synth-data, train, eval-sweep, segment-study, ablate, baseline-codec,
calibrate-channel, report.  Global flags: --config, --seed, --out.
Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 partial result.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import SystemConfig, load_config, set_path
from .data import build_datasets, synth_shapes_dataset, write_vqa_dataset
from .errors import PartialResult, QsemcomError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="qsemcom", description=__doc__)
    parser.add_argument("--config", type=Path, help="YAML config file")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--out", type=Path, default=Path("runs/out"), help="output directory")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic shapes dataset on disk")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--split", default="train")

    p = sub.add_parser("train", help="run two-phase training")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")

    p = sub.add_parser("eval-sweep", help="SNR sweep with the real physical layer")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", choices=("zeroshot", "val", "train"), default="zeroshot")
    p.add_argument("--snr-grid", help="comma-separated dB values (default: config)")

    p = sub.add_parser("segment-study", help="compare models trained at different N_L")
    p.add_argument(
        "--checkpoint",
        dest="checkpoints",
        action="append",
        required=True,
        metavar="NL=PATH",
        help="repeatable, e.g. --checkpoint 32=runs/nl32/ckpt_final.pt",
    )
    p.add_argument("--dataset", choices=("zeroshot", "val", "train"), default="zeroshot")
    p.add_argument("--snr-grid")

    p = sub.add_parser("ablate", help="paired eval of full vs no-text-alignment models")
    p.add_argument("--checkpoint-full", type=Path, required=True)
    p.add_argument("--checkpoint-ablated", type=Path, required=True)
    p.add_argument("--dataset", choices=("zeroshot", "val", "train"), default="zeroshot")
    p.add_argument("--snr-grid")

    p = sub.add_parser("baseline-codec", help="conventional codec baseline")
    p.add_argument("--quality", default="0,20,80", help="comma-separated rate factors (0 = lossless)")
    p.add_argument("--dataset", choices=("zeroshot", "val", "train"), default="zeroshot")
    p.add_argument("--snr-grid")
    p.add_argument("--max-samples", type=int, default=16)

    p = sub.add_parser("calibrate-channel", help="measure the index error rate table")
    p.add_argument("--scheme", choices=("none", "repetition-3", "ldpc-3-6"))
    p.add_argument("--snr-grid")
    p.add_argument("--trials", type=int)

    p = sub.add_parser("report", help="re-emit tables and plots from a summary file")
    p.add_argument("--summary", type=Path, required=True)

    return parser


def _load_cfg(args) -> SystemConfig:
    cfg = load_config(args.config) if args.config else SystemConfig().validate()
    if args.seed is not None:
        set_path(cfg, "seed", args.seed)
    return cfg


def _grid(args, cfg) -> tuple[float, ...]:
    if getattr(args, "snr_grid", None):
        return tuple(float(v) for v in args.snr_grid.split(","))
    return tuple(cfg.phy.eval_snr_grid_db)


def _pick_dataset(args, cfg):
    train_ds, val_ds, zeroshot_ds = build_datasets(cfg)
    return {"train": train_ds, "val": val_ds, "zeroshot": zeroshot_ds}[args.dataset]


def _run(args) -> int:
    from . import evalsuite, trainer
    from .phy.channel import CalibrationTable

    cfg = _load_cfg(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)

    if args.verb == "synth-data":
        ds = synth_shapes_dataset(args.n, cfg.model.image_size, cfg.seed, args.split)
        manifest = write_vqa_dataset(ds, out, split=args.split)
        print(f"wrote {len(ds)} samples; manifest at {manifest}")
        return 0

    if args.verb == "train":
        final = trainer.train(cfg, out, resume=args.resume)
        print(f"final checkpoint: {final}")
        return 0

    if args.verb == "eval-sweep":
        ds = _pick_dataset(args, cfg)
        report = evalsuite.snr_sweep(args.checkpoint, ds, _grid(args, cfg), seed=cfg.seed)
        files = evalsuite.emit_report(report, out, stem="sweep")
        print(f"report files: {sorted(str(p) for p in files.values())}")
        return 0

    if args.verb == "segment-study":
        ds = _pick_dataset(args, cfg)
        checkpoints = {}
        for spec_str in args.checkpoints:
            nl, _, path = spec_str.partition("=")
            if not path:
                raise QsemcomError(f"--checkpoint wants NL=PATH, got {spec_str!r}")
            checkpoints[int(nl)] = Path(path)
        reports = evalsuite.segment_length_study(checkpoints, ds, _grid(args, cfg), seed=cfg.seed)
        files = evalsuite.emit_report(
            {f"segment-{nl}": rep for nl, rep in reports.items()}, out, stem="segments"
        )
        print(f"report files: {sorted(str(p) for p in files.values())}")
        return 0

    if args.verb == "ablate":
        ds = _pick_dataset(args, cfg)
        full, ablated = evalsuite.ablation_no_text(
            args.checkpoint_full, args.checkpoint_ablated, ds, _grid(args, cfg), seed=cfg.seed
        )
        files = evalsuite.emit_report(
            {"full": full, "no-text-alignment": ablated}, out, stem="ablation"
        )
        print(f"report files: {sorted(str(p) for p in files.values())}")
        return 0

    if args.verb == "baseline-codec":
        ds = _pick_dataset(args, cfg)
        if len(ds) > args.max_samples:
            from .data import Dataset

            ds = Dataset(samples=ds.samples[: args.max_samples], split_tag=ds.split_tag)
        quality = tuple(int(q) for q in args.quality.split(","))
        report = evalsuite.conventional_codec_baseline(
            ds, quality, _grid(args, cfg), cfg, seed=cfg.seed
        )
        path = out / "codec_baseline.json"
        import json

        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        print(f"codec baseline: {path}")
        return 0

    if args.verb == "calibrate-channel":
        scheme = args.scheme or cfg.phy.scheme
        grid = _grid(args, cfg)
        table_path = out / "calibration.tsv"
        table = CalibrationTable.load(table_path) if table_path.exists() else CalibrationTable()
        table.ensure(
            scheme,
            grid,
            cfg.quantizer.codeword_count,
            seed=cfg.seed,
            n_indices=args.trials or cfg.phy.calibration_trials,
            fading=cfg.phy.fading,
            ldpc_block_length=cfg.phy.ldpc_block_length,
        )
        table.save(table_path)
        print(f"calibration table: {table_path}")
        return 0

    if args.verb == "report":
        files = evalsuite.reemit_from_summary(args.summary, out)
        print(f"report files: {sorted(str(p) for p in files.values())}")
        return 0

    raise QsemcomError(f"unhandled verb {args.verb}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _run(args)
    except PartialResult as exc:
        print(f"partial: {exc}", file=sys.stderr)
        return 3
    except QsemcomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
