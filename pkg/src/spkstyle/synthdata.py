"""Synthetic factorized corpus with known speaker/style/session/content truth.

Each utterance is an additive composition in the log-mel domain:

    features = base + speaker offset + style tilt + session offset
               + smear_style(content activations) @ content basis

Speaker, style and session components are exactly constant over time; the
content component is a fast-mixing AR(1) activation of smooth spectral
patterns, temporally smeared by a style-specific kernel.  Everything is a
linear function of the recorded ground-truth codes, so a least-squares fit on
those codes reconstructs the corpus essentially exactly -- the property the
generator tests pin down.

Styles differ in spectral tilt slope and smear width, making them separable
from speaker offsets by a linear probe.  Sessions model small recording-
channel changes within a speaker, giving same-session trial pairs a real
advantage over cross-session ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

from .errors import ParameterError
from .features import FRAME_RATE, N_MELS, Rir

N_CONTENT = 10
CONTENT_RHO = 0.85
CONTENT_DELTA = 0.5
SPEAKER_SCALE = 1.2
TILT_SCALE = 1.5
SESSION_SCALE = 0.5
CONTENT_SCALE = 1.0
SMOOTH_BINS = 4

HOLDOUT_SPEAKER_FRAC = 0.2
HOLDOUT_CELL_FRAC = 0.2

SPLIT_TRAIN = "train"
SPLIT_HELDOUT_SEEN = "heldout_seen"
SPLIT_UNSEEN_SPEAKER = "unseen_speaker"
SPLIT_UNSEEN_STYLE = "unseen_style"
SPLITS = (SPLIT_TRAIN, SPLIT_HELDOUT_SEEN, SPLIT_UNSEEN_SPEAKER, SPLIT_UNSEEN_STYLE)


@dataclass
class FactorTables:
    """Global ground-truth tables shared by all utterances."""

    base: np.ndarray  # (F,)
    ramp: np.ndarray  # (F,) tilt direction, zero mean
    speaker_offsets: np.ndarray  # (K, F)
    session_offsets: np.ndarray  # (K, n_sessions, F)
    tilt_slopes: np.ndarray  # (J,)
    smear_widths: np.ndarray  # (J,) odd ints
    content_basis: np.ndarray  # (M, F)
    speaker_ids: list[str]
    style_ids: list[str]


@dataclass
class SyntheticFactors:
    """Ground-truth factor assignment of one utterance."""

    speaker_id: str
    style_id: str
    session_id: str
    content_trajectory: np.ndarray  # (T, M) activations before smearing


@dataclass
class SyntheticUtterance:
    utterance_id: str
    features: np.ndarray  # (T, F) float32
    factors: SyntheticFactors
    split: str


@dataclass
class SyntheticCorpus:
    utterances: list[SyntheticUtterance]
    tables: FactorTables
    frame_rate: int
    seed: int

    def manifest_records(self, with_paths: bool = True) -> list[dict]:
        records = []
        for utt in self.utterances:
            rec = {
                "utterance_id": utt.utterance_id,
                "speaker_id": utt.factors.speaker_id,
                "session_id": utt.factors.session_id,
                "style_id": utt.factors.style_id,
                "duration_s": utt.features.shape[0] / self.frame_rate,
            }
            if with_paths:
                rec["feature_path"] = f"features/{utt.utterance_id}.dsf"
            records.append(rec)
        return records


def _smooth_vector(rng: np.random.Generator, n_bins: int, width: float = SMOOTH_BINS) -> np.ndarray:
    raw = rng.standard_normal(n_bins + 8 * int(width))
    kernel = np.exp(-0.5 * (np.arange(-3 * width, 3 * width + 1) / width) ** 2)
    kernel /= kernel.sum()
    sm = np.convolve(raw, kernel, mode="same")[4 * int(width) : 4 * int(width) + n_bins]
    return sm / max(sm.std(), 1e-12)


def content_activations(rng: np.random.Generator, n_frames: int, n_channels: int = N_CONTENT) -> np.ndarray:
    """AR(1) activations with uniform innovations: fast mixing, bounded steps."""
    a = np.zeros((n_frames, n_channels))
    state = rng.uniform(-1.0, 1.0, n_channels) * CONTENT_DELTA / (1.0 - CONTENT_RHO)
    for t in range(n_frames):
        state = CONTENT_RHO * state + rng.uniform(-CONTENT_DELTA, CONTENT_DELTA, n_channels)
        a[t] = state
    return a


def smear(activations: np.ndarray, width: int) -> np.ndarray:
    """Temporal box smoothing with an odd window; width 1 is the identity."""
    if width <= 1:
        return activations
    return uniform_filter1d(activations, size=int(width), axis=0, mode="nearest")


def _utterance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1, index])))


def build_tables(n_speakers: int, n_styles: int, n_sessions: int, n_mels: int, seed: int) -> FactorTables:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0])))
    base = 1.0 + 0.5 * np.cos(np.linspace(0.0, 2.0 * np.pi, n_mels))
    ramp = np.linspace(-1.0, 1.0, n_mels)
    speaker_offsets = SPEAKER_SCALE * np.stack([_smooth_vector(rng, n_mels) for _ in range(n_speakers)])
    session_offsets = SESSION_SCALE * np.stack(
        [[_smooth_vector(rng, n_mels) for _ in range(n_sessions)] for _ in range(n_speakers)]
    )
    if n_styles == 1:
        slopes = np.zeros(1)
    else:
        slopes = TILT_SCALE * np.linspace(-1.0, 1.0, n_styles)
    widths = 1 + 2 * np.round(np.linspace(0.0, 4.0, n_styles)).astype(int)
    basis = CONTENT_SCALE * np.stack([_smooth_vector(rng, n_mels, width=2.5) for _ in range(N_CONTENT)])
    return FactorTables(
        base=base,
        ramp=ramp,
        speaker_offsets=speaker_offsets,
        session_offsets=session_offsets,
        tilt_slopes=slopes,
        smear_widths=widths,
        content_basis=basis,
        speaker_ids=[f"spk{k:03d}" for k in range(n_speakers)],
        style_ids=[f"sty{j}" for j in range(n_styles)],
    )


def compose_features(tables: FactorTables, spk: int, sty: int, sess: int, activations: np.ndarray) -> np.ndarray:
    """Assemble one utterance's (T, F) matrix from its factor codes."""
    smeared = smear(activations, int(tables.smear_widths[sty]))
    values = (
        tables.base
        + tables.speaker_offsets[spk]
        + tables.tilt_slopes[sty] * tables.ramp
        + tables.session_offsets[spk, sess]
        + smeared @ tables.content_basis
    )
    return values


def generate_corpus(
    n_speakers: int,
    n_styles: int,
    utts_per_cell: int,
    duration_s: float,
    seed: int,
    *,
    n_sessions: int = 2,
    n_mels: int = N_MELS,
    frame_rate: int = FRAME_RATE,
    holdout_speaker_frac: float = HOLDOUT_SPEAKER_FRAC,
    holdout_cell_frac: float = HOLDOUT_CELL_FRAC,
) -> SyntheticCorpus:
    """Generate a factorized corpus; deterministic given ``seed``.

    Every (speaker, style) cell holds ``utts_per_cell`` utterances.  The last
    20% of speakers and the last style are reserved for the unseen-speaker
    and unseen-style splits; within the remaining cells the last 20% of
    utterances form the held-out-seen split.
    """
    if n_speakers < 2:
        raise ParameterError("verification corpora need at least 2 speakers")
    if min(n_styles, utts_per_cell, n_sessions) < 1:
        raise ParameterError("n_styles, utts_per_cell, and n_sessions must be >= 1")
    if duration_s <= 0:
        raise ParameterError("duration_s must be positive")
    n_frames = int(round(duration_s * frame_rate))
    if n_frames < 1:
        raise ParameterError("duration too short for one frame")

    tables = build_tables(n_speakers, n_styles, n_sessions, n_mels, seed)
    n_holdout_spk = math.ceil(holdout_speaker_frac * n_speakers) if n_speakers > 2 else 0
    train_speakers = n_speakers - n_holdout_spk
    heldout_style = n_styles - 1 if n_styles > 1 else None
    n_holdout_utts = int(round(holdout_cell_frac * utts_per_cell)) if utts_per_cell >= 2 else 0

    utterances = []
    index = 0
    for spk in range(n_speakers):
        per_speaker_count = 0
        for sty in range(n_styles):
            for u in range(utts_per_cell):
                sess = per_speaker_count % n_sessions
                per_speaker_count += 1
                rng = _utterance_rng(seed, index)
                activations = content_activations(rng, n_frames)
                values = compose_features(tables, spk, sty, sess, activations)
                if sty == heldout_style:
                    split = SPLIT_UNSEEN_STYLE
                elif spk >= train_speakers:
                    split = SPLIT_UNSEEN_SPEAKER
                elif u >= utts_per_cell - n_holdout_utts:
                    split = SPLIT_HELDOUT_SEEN
                else:
                    split = SPLIT_TRAIN
                speaker_id = tables.speaker_ids[spk]
                factors = SyntheticFactors(
                    speaker_id=speaker_id,
                    style_id=tables.style_ids[sty],
                    session_id=f"{speaker_id}_s{sess}",
                    content_trajectory=activations,
                )
                utterances.append(
                    SyntheticUtterance(
                        utterance_id=f"{speaker_id}_{tables.style_ids[sty]}_u{u:03d}",
                        features=values.astype(np.float32),
                        factors=factors,
                        split=split,
                    )
                )
                index += 1
    return SyntheticCorpus(utterances=utterances, tables=tables, frame_rate=frame_rate, seed=seed)


def write_corpus(corpus: SyntheticCorpus, out_dir) -> dict[str, str]:
    """Write feature files, the full manifest, per-split manifests, and the
    ground-truth factor tables.  Returns the manifest paths by split name."""
    from pathlib import Path

    from .features import write_features, write_manifest

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    records = corpus.manifest_records()
    for utt, rec in zip(corpus.utterances, records):
        write_features(out / rec["feature_path"], utt.features, corpus.frame_rate)
    write_manifest(out / "manifest.jsonl", records)
    paths = {"all": str(out / "manifest.jsonl")}
    for split in SPLITS:
        split_records = [r for u, r in zip(corpus.utterances, records) if u.split == split]
        if split_records:
            p = out / f"manifest_{split}.jsonl"
            write_manifest(p, split_records)
            paths[split] = str(p)
    np.savez(
        out / "factors.npz",
        base=corpus.tables.base,
        ramp=corpus.tables.ramp,
        speaker_offsets=corpus.tables.speaker_offsets,
        session_offsets=corpus.tables.session_offsets,
        tilt_slopes=corpus.tables.tilt_slopes,
        smear_widths=corpus.tables.smear_widths,
        content_basis=corpus.tables.content_basis,
        speaker_ids=np.array(corpus.tables.speaker_ids),
        style_ids=np.array(corpus.tables.style_ids),
        utterance_ids=np.array([u.utterance_id for u in corpus.utterances]),
        splits=np.array([u.split for u in corpus.utterances]),
        content=np.stack([u.factors.content_trajectory for u in corpus.utterances]),
        seed=np.array(corpus.seed),
    )
    return paths


# ---------------------------------------------------------------------------
# synthetic room impulse responses
# ---------------------------------------------------------------------------


def generate_rir(rt60_s: float, length: int, seed: int, sample_rate: int = 16000, label: str = "") -> Rir:
    """Exponentially decaying noise whose energy drops 60 dB over ``rt60_s``.

    The first tap is the direct path and carries the maximum magnitude.
    """
    if rt60_s <= 0:
        raise ParameterError("rt60_s must be positive")
    if length < 2 or length < rt60_s * sample_rate:
        raise ParameterError(
            f"length {length} too short to represent rt60 {rt60_s}s at {sample_rate} Hz"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    t = np.arange(length) / sample_rate
    envelope = 10.0 ** (-3.0 * t / rt60_s)
    taps = envelope * rng.uniform(-1.0, 1.0, length) * 0.9
    taps[0] = 1.0
    return Rir(taps=taps, sample_rate=sample_rate, label=label or f"rir_rt{rt60_s:g}")


# ---------------------------------------------------------------------------
# statistics used to verify conversion behavior on this corpus
# ---------------------------------------------------------------------------


def spectral_tilt(values: np.ndarray, n_bins: int | None = None) -> float:
    """Projection of the time-averaged spectrum onto the tilt ramp.

    For corpus utterances this recovers (up to speaker/session projections)
    the style's tilt slope; comparing source/target/converted values measures
    how far a conversion moved the style.
    """
    values = np.asarray(values)
    ramp = np.linspace(-1.0, 1.0, values.shape[-1])
    mean_spectrum = values.mean(axis=0)
    return float(mean_spectrum @ ramp / (ramp @ ramp))


def content_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of the temporally varying parts of two feature
    matrices; near 1 when the fast modulation patterns line up."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    denom = np.linalg.norm(da) * np.linalg.norm(db)
    if denom == 0:
        return 0.0
    return float((da * db).sum() / denom)
