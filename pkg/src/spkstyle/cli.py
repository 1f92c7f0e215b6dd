"""Command-line entry point.

Subcommands: prep, synth-data, train, eval-sv, eval-probe, convert,
export-emb, project-2d.  Exit codes: 0 success, 2 usage error (argparse),
3 data/validation/config error.  Commands that own a run directory take an
exclusive lock file and write a resolved-config echo plus the global seed so
the run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import backend, evaluation, synthdata, training
from .config import RunConfig, SEED_ENV_VAR, load_config, save_config
from .errors import DataError, SpkStyleError
from .features import (
    FRAME_RATE,
    N_MELS,
    augmentation_rng,
    ingest,
    logmel,
    convolve_rir,
    read_features,
    read_manifest,
    resolve_path,
    validate_manifest,
    write_features,
    write_manifest,
    Rir,
)
from .model import load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3


def _default_seed(value):
    if value is not None:
        return int(value)
    return int(os.environ.get(SEED_ENV_VAR, "0"))


class _RunDir:
    """Exclusive ownership of a run directory via a lock file."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock = self.path / ".lock"

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"run directory {self.path} is locked by another process ({self.lock})")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self.path

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False


def _echo_run(out_dir: Path, cfg: RunConfig | None, seed: int, argv) -> None:
    if cfg is not None:
        save_config(cfg, out_dir / "config.ini")
    (out_dir / "run.json").write_text(
        json.dumps({"seed": seed, "argv": list(argv), "backend": backend.active_backend()}, indent=2)
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth_data(args, argv) -> int:
    corpus = synthdata.generate_corpus(
        args.speakers, args.styles, args.utts_per_cell, args.duration, args.seed
    )
    with _RunDir(args.out) as out:
        paths = synthdata.write_corpus(corpus, out)
        _echo_run(out, None, args.seed, argv)
    print(f"wrote {len(corpus.utterances)} utterances; manifests: {', '.join(sorted(paths))}")
    return EXIT_OK


def _load_rirs(rir_dir: Path, sample_rate: int) -> list[Rir]:
    rirs = []
    for path in sorted(Path(rir_dir).glob("*.wav")):
        w = ingest(path, target_rate=sample_rate)
        rirs.append(Rir(taps=w.samples, sample_rate=sample_rate, label=path.stem))
    if not rirs:
        raise DataError(f"no .wav impulse responses found in {rir_dir}")
    return rirs


def _cmd_prep(args, argv) -> int:
    manifest = Path(args.manifest)
    records = read_manifest(manifest)
    validate_manifest(records, manifest.parent)
    cfg = load_config(args.config) if args.config else RunConfig()
    fc = cfg.features
    rirs = _load_rirs(args.rir_dir, fc.sample_rate) if args.rir_dir else None
    with _RunDir(args.out) as out:
        (out / "features").mkdir(exist_ok=True)
        out_records = []
        for rec in records:
            wave = ingest(resolve_path(rec, manifest.parent), target_rate=fc.sample_rate)
            variants = [(rec["utterance_id"], wave, rec["style_id"])]
            if rirs:
                rng = augmentation_rng(args.seed, rec["utterance_id"])
                picks = rng.choice(len(rirs), size=min(args.rirs_per_utt, len(rirs)), replace=False)
                variants = [
                    (f"{rec['utterance_id']}__{rirs[k].label}", convolve_rir(wave, rirs[k]), rirs[k].label)
                    for k in picks
                ]
            for uid, w, style in variants:
                feats = logmel(w, n_mels=args.n_mels, frame_rate=args.frame_rate,
                               window_ms=fc.window_ms, log_floor=fc.log_floor)
                rel = f"features/{uid}.dsf"
                write_features(out / rel, feats.values, args.frame_rate)
                out_records.append(
                    {
                        "utterance_id": uid,
                        "feature_path": rel,
                        "speaker_id": rec["speaker_id"],
                        "session_id": rec["session_id"],
                        "style_id": style,
                        "duration_s": feats.n_frames / args.frame_rate,
                    }
                )
        write_manifest(out / "manifest.jsonl", out_records)
        _echo_run(out, cfg, args.seed, argv)
    print(f"wrote {len(out_records)} feature files to {args.out}")
    return EXIT_OK


def _cmd_train(args, argv) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = _default_seed(args.seed)
    freeze = tuple(args.freeze.split(",")) if args.freeze else ()
    with _RunDir(args.out) as out:
        _echo_run(out, cfg, seed, argv)
        final = training.fit(
            cfg,
            args.manifest,
            out,
            seed=seed,
            init_checkpoint=args.init,
            resume_checkpoint=args.resume,
            freeze=freeze,
            log_every=args.log_every,
        )
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _load_model_and_records(ckpt, manifest_path):
    model, cfg, meta, _ = load_checkpoint(ckpt)
    manifest = Path(manifest_path)
    records = read_manifest(manifest)
    validate_manifest(records, manifest.parent)
    return model, cfg, records, manifest.parent


def _cmd_eval_sv(args, argv) -> int:
    model, cfg, records, base = _load_model_and_records(args.ckpt, args.manifest)
    seed = _default_seed(args.seed)
    n_target = args.n_target or cfg.eval.n_target
    n_nontarget = args.n_nontarget or cfg.eval.n_nontarget
    trials = evaluation.build_trials(records, args.condition, n_target, n_nontarget, seed)
    evaluation.validate_trials(trials, records)
    embeddings = evaluation.embed_manifest(records, base, model, args.stream)
    scored = evaluation.score_trials(trials, embeddings)
    report = evaluation.eer_report(scored)
    report.update(
        {"condition": args.condition, "stream": args.stream, "seed": seed,
         "checkpoint": str(args.ckpt), "manifest": str(args.manifest)}
    )
    Path(args.out).write_text(json.dumps(report, indent=2))
    print(f"eer={report['eer']:.4f} condition={args.condition} stream={args.stream}")
    return EXIT_OK


def _cmd_eval_probe(args, argv) -> int:
    model, cfg, records, base = _load_model_and_records(args.ckpt, args.manifest)
    train_manifest = Path(args.train_manifest)
    train_records = read_manifest(train_manifest)
    validate_manifest(train_records, train_manifest.parent)
    seed = _default_seed(args.seed)
    _, _, train_matrix = evaluation.export_embeddings(train_records, train_manifest.parent, model, args.stream)
    _, _, eval_matrix = evaluation.export_embeddings(records, base, model, args.stream)
    y_train, classes = evaluation.encode_labels([r[args.label] for r in train_records])
    index = {c: i for i, c in enumerate(classes)}
    try:
        y_eval = np.array([index[r[args.label]] for r in records])
    except KeyError as exc:
        raise DataError(f"evaluation manifest contains unseen {args.label} value {exc}") from exc
    probe = evaluation.train_probe(
        train_matrix, y_train, hidden=cfg.eval.probe_hidden, n_layers=cfg.eval.probe_layers,
        steps=cfg.eval.probe_steps, lr=cfg.eval.probe_lr, seed=seed,
    )
    acc = evaluation.probe_accuracy(probe, eval_matrix, y_eval)
    report = {
        "accuracy": acc, "label": args.label, "stream": args.stream, "classes": classes,
        "n_train": len(train_records), "n_eval": len(records), "seed": seed,
        "checkpoint": str(args.ckpt),
    }
    Path(args.out).write_text(json.dumps(report, indent=2))
    print(f"probe accuracy={acc:.4f} label={args.label} stream={args.stream}")
    return EXIT_OK


def _cmd_convert(args, argv) -> int:
    model, _, _, _ = load_checkpoint(args.ckpt)
    src = read_features(args.src)
    tgt = read_features(args.tgt)
    out_values = evaluation.convert(src.values, tgt.values, args.mode, model)
    write_features(args.out, out_values, src.frame_rate)
    print(f"wrote converted features ({out_values.shape[0]}x{out_values.shape[1]}) to {args.out}")
    return EXIT_OK


def _cmd_export_emb(args, argv) -> int:
    model, _, records, base = _load_model_and_records(args.ckpt, args.manifest)
    ids, labels, matrix = evaluation.export_embeddings(records, base, model, args.stream)
    evaluation.write_embedding_csv(args.out, ids, labels, matrix)
    print(f"wrote {len(ids)} embeddings ({matrix.shape[1]} dims) to {args.out}")
    return EXIT_OK


def _cmd_project_2d(args, argv) -> int:
    ids, labels, matrix = evaluation.read_embedding_csv(args.emb)
    coords = evaluation.project_2d(matrix)
    import csv as _csv

    with open(args.out, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["utterance_id", "speaker_id", "style_id", "session_id", "x", "y"])
        for i, uid in enumerate(ids):
            writer.writerow([uid, labels["speaker_id"][i], labels["style_id"][i],
                             labels["session_id"][i], f"{coords[i, 0]:.8g}", f"{coords[i, 1]:.8g}"])
    print(f"wrote 2-D coordinates for {len(ids)} embeddings to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spkstyle", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="extract log-mel features from an audio manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-mels", type=int, default=N_MELS)
    p.add_argument("--frame-rate", type=int, default=FRAME_RATE)
    p.add_argument("--rir-dir", default=None)
    p.add_argument("--rirs-per-utt", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_prep)

    p = sub.add_parser("synth-data", help="generate the factorized synthetic corpus")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--styles", type=int, required=True)
    p.add_argument("--utts-per-cell", type=int, required=True)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="run the alternating training schedule")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--init", default=None, help="checkpoint to initialize parameters from")
    p.add_argument("--resume", default=None, help="checkpoint to resume bit-exactly from")
    p.add_argument("--freeze", default=None, help="comma-separated parameter groups to freeze")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-sv", help="speaker verification EER on a trial list")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stream", choices=evaluation.STREAMS, default="speaker")
    p.add_argument("--condition", choices=evaluation.CONDITIONS, default="unconstrained")
    p.add_argument("--n-target", type=int, default=None)
    p.add_argument("--n-nontarget", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval_sv)

    p = sub.add_parser("eval-probe", help="label probe accuracy on pooled embeddings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--manifest", required=True, help="held-out manifest to evaluate on")
    p.add_argument("--label", choices=("speaker_id", "style_id", "session_id"), default="style_id")
    p.add_argument("--stream", choices=evaluation.STREAMS, default="style")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval_probe)

    p = sub.add_parser("convert", help="speaker/style conversion between two feature files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--mode", choices=("speaker", "style", "both"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("export-emb", help="write an embedding table as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stream", choices=evaluation.STREAMS, default="speaker")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_emb)

    p = sub.add_parser("project-2d", help="2-D principal-component view of an embedding table")
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_project_2d)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except SpkStyleError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
