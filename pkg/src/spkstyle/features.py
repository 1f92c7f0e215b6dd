"""Audio ingestion, log-mel extraction, and the content-branch preprocessing.

The content encoder's input is warped (``vtlp``) and per-channel standardized
(``instance_normalize``) to strip temporally stable cues before encoding;
both are generic (T, F) matrix operations so they apply equally to power
spectrograms and stored log-mel features.  Room-response convolution
(``convolve_rir``) is the only waveform-domain augmentation.

Also holds the two on-disk formats: the binary feature file (magic ``DSF1``)
and the JSON-lines corpus manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve, resample_poly

from .errors import DataError, EmptyInputError, IngestError, ParameterError

SAMPLE_RATE = 16000
N_MELS = 80
FRAME_RATE = 80
WINDOW_MS = 25.0
LOG_FLOOR = 1e-10
NORM_EPS = 1e-5
VTLP_KNEE = 0.85

FEATURE_MAGIC = b"DSF1"
MANIFEST_FIELDS = ("utterance_id", "speaker_id", "session_id", "style_id", "duration_s")


@dataclass
class Waveform:
    """Mono audio samples, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int


@dataclass
class FeatureSequence:
    """A (T frames x F bins) log-energy matrix at a fixed frame rate."""

    values: np.ndarray
    frame_rate: int

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


@dataclass
class Rir:
    """A finite impulse response standing in for a recording environment."""

    taps: np.ndarray
    sample_rate: int
    label: str = ""


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

_PCM_SCALE = {np.dtype(np.int16): 32768.0, np.dtype(np.int32): 2147483648.0}


def ingest(path, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Read an audio file, downmix to mono, and resample to ``target_rate``.

    Raises ``IngestError`` if the file cannot be decoded and
    ``EmptyInputError`` for zero-length audio.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    except Exception as exc:  # wavfile raises bare ValueError on bad headers
        raise IngestError(f"cannot decode {path}: {exc}") from exc
    if data.size == 0:
        raise EmptyInputError(f"{path} contains no samples")
    if data.dtype in _PCM_SCALE:
        samples = data.astype(np.float64) / _PCM_SCALE[data.dtype]
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if rate != target_rate:
        g = np.gcd(int(rate), int(target_rate))
        samples = resample_poly(samples, target_rate // g, rate // g)
    if not np.all(np.isfinite(samples)):
        raise IngestError(f"{path} decodes to non-finite samples")
    return Waveform(samples=samples, sample_rate=int(target_rate))


# ---------------------------------------------------------------------------
# log-mel extraction
# ---------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular mel filters, (n_mels, n_fft//2 + 1)."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fbank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        fbank[m] = np.maximum(0.0, np.minimum(up, down))
    return fbank


def _frame(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    n_frames = len(samples) // hop
    padded = np.pad(samples, (0, max(0, (n_frames - 1) * hop + window - len(samples))))
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def logmel(
    w: Waveform,
    n_mels: int = N_MELS,
    frame_rate: int = FRAME_RATE,
    window_ms: float = WINDOW_MS,
    log_floor: float = LOG_FLOOR,
    vtlp_alpha: float | None = None,
) -> FeatureSequence:
    """Log mel-energy features; T = floor(samples / hop) frames.

    One second of 16 kHz audio at the default frame rate yields exactly 80
    frames.  ``vtlp_alpha`` warps the power spectrogram before the mel
    projection (the warp route for audio inputs).
    """
    if w.sample_rate % frame_rate != 0:
        raise ParameterError(f"frame_rate {frame_rate} must divide sample rate {w.sample_rate}")
    hop = w.sample_rate // frame_rate
    window = int(round(w.sample_rate * window_ms / 1000.0))
    if len(w.samples) < window:
        raise EmptyInputError(f"waveform shorter than one {window}-sample analysis window")
    n_fft = 1 << (window - 1).bit_length()
    frames = _frame(np.asarray(w.samples, dtype=np.float64), window, hop)
    spec = np.abs(np.fft.rfft(frames * np.hanning(window), n=n_fft)) ** 2
    if vtlp_alpha is not None:
        spec = vtlp(spec, vtlp_alpha)
    mel = spec @ mel_filterbank(w.sample_rate, n_fft, n_mels).T
    return FeatureSequence(values=np.log(np.maximum(mel, log_floor)), frame_rate=frame_rate)


# ---------------------------------------------------------------------------
# content-branch preprocessing
# ---------------------------------------------------------------------------


def vtlp_warp_positions(n_bins: int, alpha: float, knee: float = VTLP_KNEE) -> np.ndarray:
    """Source positions sampled by each output bin under the warp.

    Piecewise linear with initial slope ``alpha``; the break point keeps the
    map inside [0, n_bins-1] and the highest bin always maps to itself.
    """
    if alpha <= 0:
        raise ParameterError(f"warp factor must be positive, got {alpha}")
    top = n_bins - 1
    j = np.arange(n_bins, dtype=np.float64)
    j0 = knee * top / max(alpha, 1.0)
    second = alpha * j0 + (j - j0) * (top - alpha * j0) / (top - j0)
    return np.clip(np.where(j <= j0, alpha * j, second), 0.0, float(top))


def vtlp(values: np.ndarray, alpha: float, knee: float = VTLP_KNEE) -> np.ndarray:
    """Warp the frequency axis of a (T, F) matrix by ``alpha``.

    ``alpha == 1`` returns the input unchanged (exact identity).  Energy at
    bin k relocates to bins around k/alpha via linear interpolation.
    """
    values = np.asarray(values)
    if alpha <= 0:
        raise ParameterError(f"warp factor must be positive, got {alpha}")
    if alpha == 1.0:
        return values.copy()
    n_bins = values.shape[-1]
    pos = vtlp_warp_positions(n_bins, alpha, knee)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_bins - 1)
    frac = pos - lo
    return values[..., lo] * (1.0 - frac) + values[..., hi] * frac


def instance_normalize(values: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Zero-mean, unit-variance per frequency channel over the time axis.

    The stabilizer floors the variance in the denominator, so constant
    channels map to zeros while channels with real variance are standardized
    exactly -- which keeps the operation idempotent and invariant to
    per-channel affine maps at any input scale.  Works on (T, F) or batched
    (B, T, F) arrays; time is the second-to-last axis.
    """
    values = np.asarray(values)
    mean = values.mean(axis=-2, keepdims=True)
    var = values.var(axis=-2, keepdims=True)
    return (values - mean) / np.sqrt(np.maximum(var, eps))


# ---------------------------------------------------------------------------
# room-response augmentation
# ---------------------------------------------------------------------------


def convolve_rir(w: Waveform, r: Rir) -> Waveform:
    """Linear convolution with an impulse response, truncated to the input
    length and rescaled so the output peak matches the input peak."""
    if w.sample_rate != r.sample_rate:
        raise ParameterError(
            f"sample-rate mismatch: waveform {w.sample_rate} Hz vs response {r.sample_rate} Hz"
        )
    wet = fftconvolve(np.asarray(w.samples, dtype=np.float64), np.asarray(r.taps, dtype=np.float64))
    wet = wet[: len(w.samples)]
    peak_in = np.max(np.abs(w.samples))
    peak_out = np.max(np.abs(wet))
    if peak_out > 0.0:
        wet = wet * (peak_in / peak_out)
    return Waveform(samples=wet, sample_rate=w.sample_rate)


# ---------------------------------------------------------------------------
# feature files (magic "DSF1", u32 T, u32 F, u32 frame_rate, f32 row-major)
# ---------------------------------------------------------------------------


def write_features(path, values: np.ndarray, frame_rate: int) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    t, f = values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", FEATURE_MAGIC, t, f, frame_rate))
        fh.write(values.tobytes())


def read_features(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise IngestError(f"{path}: truncated feature header")
        magic, t, f, frame_rate = struct.unpack("<4sIII", header)
        if magic != FEATURE_MAGIC:
            raise IngestError(f"{path}: bad magic {magic!r}")
        data = np.frombuffer(fh.read(4 * t * f), dtype="<f4")
    if data.size != t * f:
        raise IngestError(f"{path}: truncated feature payload")
    return FeatureSequence(values=data.reshape(t, f).astype(np.float32), frame_rate=int(frame_rate))


# ---------------------------------------------------------------------------
# manifests (JSON lines)
# ---------------------------------------------------------------------------


def read_manifest(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def resolve_path(record: dict, manifest_dir: Path) -> Path:
    key = "feature_path" if "feature_path" in record else "audio_path"
    return (Path(manifest_dir) / record[key]).resolve()


def validate_manifest(records, manifest_dir) -> None:
    """Reject duplicate utterance ids, missing fields, and dangling paths."""
    seen = set()
    for rec in records:
        for fieldname in MANIFEST_FIELDS:
            if fieldname not in rec:
                raise DataError(f"manifest record missing field {fieldname!r}: {rec}")
        if "feature_path" not in rec and "audio_path" not in rec:
            raise DataError(f"record {rec['utterance_id']!r} has neither feature_path nor audio_path")
        uid = rec["utterance_id"]
        if uid in seen:
            raise DataError(f"duplicate utterance_id {uid!r}")
        seen.add(uid)
        target = resolve_path(rec, manifest_dir)
        if not target.exists():
            raise DataError(f"{uid!r}: dangling path {target}")


def augmentation_rng(global_seed: int, utterance_id: str) -> np.random.Generator:
    """Per-utterance generator so parallel augmentation is order-independent."""
    import zlib

    mix = zlib.crc32(utterance_id.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([global_seed, mix])))
