#!/usr/bin/env python3
"""
Command-line entry point.

    build-manifest   enumerate a corpus, warm the mel cache, write stats
    train            train (or resume) a model
    convert          one-shot conversion of a source utterance
    eval-mcd         mel-cepstral distortion between two WAV files
    export-embeddings  speaker embeddings of a manifest as TSV
    info             parameter / timing report and embedding diagnostics

Exit codes: 0 success, 2 input error, 3 checkpoint/config mismatch,
4 training diverged.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from config import Config, mel_config_hash
from models.audio import LayoutSpec
from models.conversion import ConversionRequest
from models.errors import (AudioFormatError, CheckpointFormatError, ConfigMismatchError, InputError,
                           NoEligibleSpeakerError, ShapeError, TrainingDivergedError)
from services.audio_frontend import (build_manifest, compute_normalization, load_waveform, read_manifest,
                                     read_normalization, split_manifest, write_manifest,
                                     write_normalization)
from services.checkpoint_manager import load_checkpoint
from services.conversion_service import convert
from services.evaluation_service import embedding_report, export_embeddings, lightweight_report, mcd
from services.feature_cache import MelCache
from services.pair_fetcher import PairBatchFetcher
from services.telemetry_service import TelemetryService
from services.trainer import Trainer

logger = logging.getLogger("mainvc")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CHECKPOINT = 3
EXIT_DIVERGED = 4


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_build_manifest(args) -> int:
    mel = Config.load_run_config(args.config)['mel']
    manifest = build_manifest(args.root, LayoutSpec(pattern=args.pattern), mel)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.hold_out:
        seen, unseen = split_manifest(manifest, args.hold_out, args.seed)
        write_manifest(unseen, out.with_name(out.stem + ".unseen.jsonl"))
        manifest = seen
    write_manifest(manifest, out)

    cache = MelCache(args.cache_dir, mel)
    cache.warm(manifest, workers=args.workers)
    write_normalization(compute_normalization(manifest, cache), out)
    print(f"✅ Manifest with {len(manifest)} utterances / {len(manifest.speakers)} speakers written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    telemetry = TelemetryService(out_dir / "train_log.jsonl")
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, telemetry=telemetry, ablation=args.ablation)
    else:
        run = Config.load_run_config(args.config)
        train_config = run['train']
        if args.ablation:
            train_config = replace(train_config, ablation=args.ablation)
        trainer = Trainer(run['mel'], run['model'], train_config, telemetry=telemetry)

    manifest = read_manifest(args.data)
    cache = MelCache(args.cache_dir, trainer.mel_config)
    if not args.resume:
        normalization = read_normalization(args.data)
        trainer.normalization = normalization or compute_normalization(manifest, cache)

    total_steps = args.steps if args.steps is not None else trainer.train_config.total_steps
    fetcher = PairBatchFetcher(manifest, cache, trainer.train_config.batch_size, trainer.train_config.seed,
                               normalization=trainer.normalization,
                               prefetch_workers=trainer.train_config.prefetch_workers)
    trainer.fit(fetcher.batches(trainer.step, total_steps), total_steps, out_dir)
    _print_json(telemetry.summary())
    return EXIT_OK


def cmd_convert(args) -> int:
    mel = Config.load_run_config(args.config)['mel'] if args.config else None
    request = ConversionRequest(source_path=args.source, target_path=args.target,
                                checkpoint_path=args.ckpt, output_path=args.out,
                                emit_audio=args.audio, griffin_lim_iters=args.gl_iters)
    result = convert(request, mel)
    print(f"✅ Converted mel ({result.mel.n_frames} frames) written to {result.mel_path}")
    if result.audio_path:
        print(f"   Griffin-Lim audio (lower fidelity than a neural vocoder): {result.audio_path}")
    return EXIT_OK


def cmd_eval_mcd(args) -> int:
    result = mcd(load_waveform(args.ref), load_waveform(args.hyp), use_dtw=not args.no_dtw)
    _print_json(result.to_dict())
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cache = MelCache(args.cache_dir, ckpt.mel_config)
    report = embedding_report(ckpt, read_manifest(args.data), cache)
    path = export_embeddings(report, args.out)
    _print_json({**report.summary(), 'path': str(path)})
    return EXIT_OK


def cmd_info(args) -> int:
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        payload = {'step': ckpt.step, 'config_hash': ckpt.config_hash,
                   'mel_config_hash': mel_config_hash(ckpt.mel_config),
                   'ablation': ckpt.train_config.ablation,
                   'lightweight': lightweight_report(ckpt).to_dict()}
        cache = MelCache(args.cache_dir, ckpt.mel_config)
        for label, manifest_path in (('seen', args.data), ('unseen', args.unseen_data)):
            if manifest_path:
                payload[label] = embedding_report(ckpt, read_manifest(manifest_path), cache).summary()
    else:
        model_config = Config.get_model_config()
        payload = {'reference_config': model_config.to_dict(),
                   'lightweight': lightweight_report(model_config).to_dict()}
    _print_json(payload)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mainvc", description="One-shot voice conversion toolkit")
    parser.add_argument('--log-level', default=Config.LOG_LEVEL)
    parser.add_argument('--cache-dir', default=Config.CACHE_DIR)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('build-manifest', help="enumerate a speaker-per-directory corpus")
    p.add_argument('--root', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--config')
    p.add_argument('--pattern', default="*.wav")
    p.add_argument('--hold-out', type=int, default=0, help="speakers held out as unseen")
    p.add_argument('--seed', type=int, default=Config.SEED)
    p.add_argument('--workers', type=int, default=0)
    p.set_defaults(func=cmd_build_manifest)

    p = sub.add_parser('train', help="train or resume a model")
    p.add_argument('--config')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--resume')
    p.add_argument('--ablation', choices=['full', 'm1', 'm2', 'm3'])
    p.add_argument('--steps', type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('convert', help="one-shot conversion")
    p.add_argument('--ckpt', required=True)
    p.add_argument('--source', required=True)
    p.add_argument('--target', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--config')
    p.add_argument('--audio', action='store_true')
    p.add_argument('--gl-iters', type=int, default=Config.GRIFFIN_LIM_ITERS)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser('eval-mcd', help="mel-cepstral distortion")
    p.add_argument('--ref', required=True)
    p.add_argument('--hyp', required=True)
    p.add_argument('--no-dtw', action='store_true')
    p.set_defaults(func=cmd_eval_mcd)

    p = sub.add_parser('export-embeddings', help="speaker embeddings as TSV")
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser('info', help="parameter and timing report")
    p.add_argument('--ckpt')
    p.add_argument('--data', help="seen-speaker manifest for embedding diagnostics")
    p.add_argument('--unseen-data', help="unseen-speaker manifest for embedding diagnostics")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigMismatchError, CheckpointFormatError) as e:
        logger.error(f"Checkpoint/config error: {e}")
        return EXIT_CHECKPOINT
    except (InputError, AudioFormatError, NoEligibleSpeakerError, ShapeError) as e:
        logger.error(f"Input error: {e}")
        return EXIT_INPUT
    except TrainingDivergedError as e:
        logger.error(f"Training diverged: {e}")
        return EXIT_DIVERGED


if __name__ == '__main__':
    sys.exit(main())
