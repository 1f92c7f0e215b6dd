"""Feature-path contracts: ingestion, log-mel framing, warping,
normalization, room-response convolution, and the two file formats.

The log-mel test rebuilds the spectrogram with an explicit DFT matrix (no
FFT) as an independent reference; the convolution test uses a direct
O(N*K) sum.
"""

import numpy as np
import pytest
from scipy.io import wavfile

from spkstyle import features
from spkstyle.errors import DataError, EmptyInputError, IngestError, ParameterError
from spkstyle.features import (
    FeatureSequence,
    Rir,
    Waveform,
    convolve_rir,
    ingest,
    instance_normalize,
    logmel,
    mel_filterbank,
    read_features,
    read_manifest,
    validate_manifest,
    vtlp,
    write_features,
    write_manifest,
)

SR = 16000


def _write_wav(path, samples, sr=SR, dtype=np.int16):
    if dtype == np.int16:
        samples = (np.clip(samples, -1, 1) * 32767).astype(np.int16)
    wavfile.write(path, sr, samples)


class TestIngest:
    def test_silence_identity_resample(self, tmp_path):
        _write_wav(tmp_path / "sil.wav", np.zeros(SR))
        w = ingest(tmp_path / "sil.wav", target_rate=SR)
        assert len(w.samples) == SR
        assert w.sample_rate == SR
        np.testing.assert_array_equal(w.samples, 0.0)

    def test_upsample_length_contract(self, tmp_path):
        _write_wav(tmp_path / "low.wav", np.zeros(8000), sr=8000)
        w = ingest(tmp_path / "low.wav", target_rate=SR)
        assert len(w.samples) == SR

    def test_impulse_passthrough(self, tmp_path):
        x = np.zeros(SR)
        x[100] = 0.9
        _write_wav(tmp_path / "imp.wav", x)
        w = ingest(tmp_path / "imp.wav", target_rate=SR)
        assert np.max(np.abs(w.samples)) <= 1.0
        assert np.argmax(np.abs(w.samples)) == 100

    def test_unreadable_file(self, tmp_path):
        bad = tmp_path / "noise.wav"
        bad.write_bytes(b"not a wav at all")
        with pytest.raises(IngestError):
            ingest(bad)
        with pytest.raises(IngestError):
            ingest(tmp_path / "missing.wav")

    def test_zero_length(self, tmp_path):
        _write_wav(tmp_path / "empty.wav", np.zeros(0))
        with pytest.raises(EmptyInputError):
            ingest(tmp_path / "empty.wav")


class TestLogmel:
    def test_one_second_gives_80_frames(self):
        w = Waveform(np.random.default_rng(0).uniform(-0.1, 0.1, SR), SR)
        fs = logmel(w, n_mels=80, frame_rate=80)
        assert fs.values.shape == (80, 80)
        assert fs.frame_rate == 80

    def test_silence_hits_log_floor(self):
        fs = logmel(Waveform(np.zeros(SR), SR))
        np.testing.assert_array_equal(fs.values, np.log(1e-10))

    def test_too_short(self):
        with pytest.raises(EmptyInputError):
            logmel(Waveform(np.zeros(100), SR))

    def test_matches_independent_dft(self):
        # Reference: frame, window, explicit DFT matrix multiply, mel project.
        rng = np.random.default_rng(7)
        n = 4000
        samples = 0.3 * np.sin(2 * np.pi * 440 * np.arange(n) / SR) + 0.01 * rng.standard_normal(n)
        w = Waveform(samples, SR)
        fs = logmel(w, n_mels=40, frame_rate=80)

        hop, window, n_fft = 200, 400, 512
        t_frames = n // hop
        padded = np.pad(samples, (0, (t_frames - 1) * hop + window - n))
        hann = np.hanning(window)
        grid = np.arange(n_fft)
        dft = np.exp(-2j * np.pi * np.outer(grid[: n_fft // 2 + 1], grid) / n_fft)
        ref_rows = []
        for t in range(t_frames):
            frame = np.zeros(n_fft)
            frame[:window] = padded[t * hop : t * hop + window] * hann
            power = np.abs(dft @ frame) ** 2
            mel = mel_filterbank(SR, n_fft, 40) @ power
            ref_rows.append(np.log(np.maximum(mel, 1e-10)))
        np.testing.assert_allclose(fs.values, np.array(ref_rows), atol=1e-8)

    def test_pure_tone_frames_constant(self):
        # 440 Hz tone: interior frames should be near-identical; the final
        # frame sees zero padding and the first can catch onset effects.
        samples = 0.5 * np.sin(2 * np.pi * 440 * np.arange(SR) / SR)
        fs = logmel(Waveform(samples, SR))
        interior = fs.values[1:-1]
        dyn_range = fs.values.max() - fs.values.min()
        deviation = np.abs(interior - interior.mean(axis=0)).max()
        assert deviation < 1e-3 * dyn_range


class TestVtlp:
    def test_identity_alpha_one_exact(self, rng):
        x = rng.standard_normal((12, 80))
        np.testing.assert_array_equal(vtlp(x, 1.0), x)

    def test_impulse_moves_to_scaled_bin(self):
        # Impulse at bin 40, alpha=1.1.  Inside the first warp segment the
        # source position of output bin j is 1.1*j, so bins 36 (pos 39.6) and
        # 37 (pos 40.7) pick up 0.6 and 0.3 of the mass by linear
        # interpolation; everything else reads zeros.
        x = np.zeros((3, 80))
        x[:, 40] = 2.0
        y = vtlp(x, 1.1)
        nonzero = np.nonzero(y[0])[0]
        np.testing.assert_array_equal(nonzero, [36, 37])
        np.testing.assert_allclose(y[:, 36], 0.6 * 2.0, atol=1e-12)
        np.testing.assert_allclose(y[:, 37], 0.3 * 2.0, atol=1e-12)

    def test_constant_input_unchanged(self, rng):
        x = np.full((5, 64), 3.25)
        for alpha in (0.9, 0.95, 1.05, 1.1):
            np.testing.assert_allclose(vtlp(x, alpha), x, atol=1e-6)

    def test_shape_preserved_and_top_bin_fixed(self, rng):
        x = rng.standard_normal((7, 33))
        for alpha in np.linspace(0.9, 1.1, 9):
            y = vtlp(x, float(alpha))
            assert y.shape == x.shape
            np.testing.assert_allclose(y[:, -1], x[:, -1], atol=1e-12)

    def test_rejects_nonpositive_alpha(self, rng):
        with pytest.raises(ParameterError):
            vtlp(np.zeros((2, 8)), 0.0)
        with pytest.raises(ParameterError):
            vtlp(np.zeros((2, 8)), -1.0)


class TestInstanceNormalize:
    def test_constant_channel_maps_to_zero(self):
        x = np.full((10, 4), 3.0)
        np.testing.assert_allclose(instance_normalize(x), 0.0, atol=1e-12)

    def test_affine_invariance(self, rng):
        x = rng.standard_normal((50, 6))
        a = rng.uniform(0.5, 2.0, 6)
        b = rng.uniform(-3.0, 3.0, 6)
        np.testing.assert_allclose(
            instance_normalize(x), instance_normalize(a * x + b), atol=1e-5
        )

    def test_two_frame_hand_computation(self):
        # channel [1, 3]: mean 2, population std 1 -> [-1, 1] as eps -> 0
        x = np.array([[1.0], [3.0]])
        np.testing.assert_allclose(instance_normalize(x), [[-1.0], [1.0]], atol=1e-4)

    def test_idempotent(self, rng):
        x = rng.standard_normal((64, 8)) * 5 + 2
        once = instance_normalize(x)
        twice = instance_normalize(once)
        assert np.abs(twice - once).max() < 1e-5

    def test_moment_contract(self, rng):
        x = rng.standard_normal((128, 16)) * 3 + 1
        y = instance_normalize(x)
        assert np.abs(y.mean(axis=0)).max() < 1e-5
        assert np.abs(y.var(axis=0) - 1.0).max() < 1e-3


class TestConvolveRir:
    def test_unit_impulse_identity(self, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 400), SR)
        r = Rir(np.array([1.0]), SR)
        out = convolve_rir(w, r)
        np.testing.assert_allclose(out.samples, w.samples, atol=1e-9)

    def test_delayed_impulse_shifts(self, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 300), SR)
        taps = np.zeros(8)
        taps[5] = 1.0
        out = convolve_rir(w, Rir(taps, SR))
        np.testing.assert_allclose(out.samples[5:], w.samples[:-5], atol=1e-9)
        np.testing.assert_allclose(out.samples[:5], 0.0, atol=1e-9)

    def test_matches_bruteforce_sum(self, rng):
        for _ in range(10):
            x = rng.standard_normal(64)
            taps = rng.standard_normal(16)
            out = convolve_rir(Waveform(x, SR), Rir(taps, SR))
            ref = np.zeros(64)
            for n in range(64):
                acc = 0.0
                for k in range(16):
                    if n - k >= 0:
                        acc += taps[k] * x[n - k]
                ref[n] = acc
            ref *= np.max(np.abs(x)) / np.max(np.abs(ref))
            np.testing.assert_allclose(out.samples, ref, atol=1e-6)

    def test_rate_mismatch(self):
        with pytest.raises(ParameterError):
            convolve_rir(Waveform(np.ones(10), 16000), Rir(np.ones(2), 8000))


class TestFeatureFiles:
    def test_roundtrip(self, tmp_path, rng):
        values = rng.standard_normal((37, 12)).astype(np.float32)
        write_features(tmp_path / "x.dsf", values, 80)
        fs = read_features(tmp_path / "x.dsf")
        np.testing.assert_array_equal(fs.values, values)
        assert fs.frame_rate == 80

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.dsf").write_bytes(b"XXXX" + b"\x00" * 12)
        with pytest.raises(IngestError):
            read_features(tmp_path / "bad.dsf")

    def test_truncated(self, tmp_path, rng):
        write_features(tmp_path / "x.dsf", rng.standard_normal((5, 4)).astype(np.float32), 80)
        data = (tmp_path / "x.dsf").read_bytes()
        (tmp_path / "cut.dsf").write_bytes(data[:-8])
        with pytest.raises(IngestError):
            read_features(tmp_path / "cut.dsf")


class TestManifest:
    def _records(self, tmp_path, n=3):
        recs = []
        for i in range(n):
            write_features(tmp_path / f"u{i}.dsf", np.zeros((4, 2), np.float32), 80)
            recs.append(
                {
                    "utterance_id": f"u{i}",
                    "feature_path": f"u{i}.dsf",
                    "speaker_id": f"s{i % 2}",
                    "session_id": "sess0",
                    "style_id": "sty0",
                    "duration_s": 0.05,
                }
            )
        return recs

    def test_roundtrip_and_validation(self, tmp_path):
        recs = self._records(tmp_path)
        write_manifest(tmp_path / "m.jsonl", recs)
        loaded = read_manifest(tmp_path / "m.jsonl")
        assert loaded == recs
        validate_manifest(loaded, tmp_path)

    def test_duplicate_ids_rejected(self, tmp_path):
        recs = self._records(tmp_path)
        recs[1]["utterance_id"] = recs[0]["utterance_id"]
        with pytest.raises(DataError, match="duplicate"):
            validate_manifest(recs, tmp_path)

    def test_dangling_path_rejected(self, tmp_path):
        recs = self._records(tmp_path)
        recs[2]["feature_path"] = "nowhere.dsf"
        with pytest.raises(DataError, match="dangling"):
            validate_manifest(recs, tmp_path)

    def test_missing_field_rejected(self, tmp_path):
        recs = self._records(tmp_path)
        del recs[0]["style_id"]
        with pytest.raises(DataError, match="style_id"):
            validate_manifest(recs, tmp_path)
