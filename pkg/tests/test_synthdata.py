"""Generator contracts: counting, determinism, factor constancy, linear
recoverability from the recorded ground truth, and the synthetic room
responses."""

import numpy as np
import pytest

from spkstyle import synthdata
from spkstyle.errors import ParameterError
from spkstyle.features import read_manifest, validate_manifest
from spkstyle.synthdata import (
    SPLIT_HELDOUT_SEEN,
    SPLIT_TRAIN,
    SPLIT_UNSEEN_SPEAKER,
    SPLIT_UNSEEN_STYLE,
    content_correlation,
    generate_corpus,
    generate_rir,
    smear,
    spectral_tilt,
    write_corpus,
)


class TestGenerateCorpus:
    def test_counting_contract(self):
        corpus = generate_corpus(2, 2, 1, 1.0, seed=7)
        assert len(corpus.utterances) == 4
        for utt in corpus.utterances:
            assert utt.features.shape == (80, 80)

    def test_determinism(self):
        a = generate_corpus(3, 2, 2, 0.5, seed=11)
        b = generate_corpus(3, 2, 2, 0.5, seed=11)
        for ua, ub in zip(a.utterances, b.utterances):
            np.testing.assert_array_equal(ua.features, ub.features)
            assert ua.utterance_id == ub.utterance_id
        c = generate_corpus(3, 2, 2, 0.5, seed=12)
        assert any(
            not np.array_equal(ua.features, uc.features)
            for ua, uc in zip(a.utterances, c.utterances)
        )

    def test_single_speaker_rejected(self):
        with pytest.raises(ParameterError):
            generate_corpus(1, 2, 1, 1.0, seed=0)

    def test_shared_speaker_offsets_identical(self):
        corpus = generate_corpus(4, 2, 3, 0.5, seed=3)
        spk_index = {s: i for i, s in enumerate(corpus.tables.speaker_ids)}
        # Recompute each utterance's non-content residual from the tables and
        # check all utterances of one speaker agree on the speaker offset.
        for utt in corpus.utterances:
            k = spk_index[utt.factors.speaker_id]
            j = corpus.tables.style_ids.index(utt.factors.style_id)
            sess = int(utt.factors.session_id.rsplit("_s", 1)[1])
            content = smear(utt.factors.content_trajectory, int(corpus.tables.smear_widths[j]))
            residual = utt.features.astype(np.float64) - content @ corpus.tables.content_basis
            offset = (
                residual.mean(axis=0)
                - corpus.tables.base
                - corpus.tables.tilt_slopes[j] * corpus.tables.ramp
                - corpus.tables.session_offsets[k, sess]
            )
            np.testing.assert_allclose(offset, corpus.tables.speaker_offsets[k], atol=1e-5)

    def test_stable_components_time_constant(self):
        corpus = generate_corpus(3, 3, 1, 1.0, seed=5)
        for utt in corpus.utterances:
            j = corpus.tables.style_ids.index(utt.factors.style_id)
            content = smear(utt.factors.content_trajectory, int(corpus.tables.smear_widths[j]))
            stable = utt.features.astype(np.float64) - content @ corpus.tables.content_basis
            # tolerance covers float32 feature storage only
            np.testing.assert_allclose(stable, stable[0], atol=5e-5)

    def test_content_lag80_autocorrelation_low(self):
        corpus = generate_corpus(2, 2, 2, 2.0, seed=9)
        lag = 80
        for utt in corpus.utterances:
            j = corpus.tables.style_ids.index(utt.factors.style_id)
            content = smear(utt.factors.content_trajectory, int(corpus.tables.smear_widths[j]))
            c = content @ corpus.tables.content_basis
            c = c - c.mean(axis=0)
            num = (c[:-lag] * c[lag:]).sum()
            den = (c * c).sum()
            assert abs(num / den) < 0.2

    def test_content_first_difference_bounded(self):
        corpus = generate_corpus(2, 2, 1, 1.0, seed=4)
        for utt in corpus.utterances:
            steps = np.abs(np.diff(utt.factors.content_trajectory, axis=0)).max()
            assert steps < 1.5

    def test_least_squares_recoverability(self):
        # A linear decoder fit on the true codes must reconstruct the corpus:
        # design = [speaker one-hot | style one-hot | (speaker, session)
        # one-hot | smeared content activations | 1].
        corpus = generate_corpus(6, 3, 4, 1.0, seed=21)
        tables = corpus.tables
        spk_index = {s: i for i, s in enumerate(tables.speaker_ids)}
        sty_index = {s: i for i, s in enumerate(tables.style_ids)}
        k_spk, k_sty = len(spk_index), len(sty_index)
        n_sess = tables.session_offsets.shape[1]
        rows, targets = [], []
        for utt in corpus.utterances:
            t = utt.features.shape[0]
            j = sty_index[utt.factors.style_id]
            k = spk_index[utt.factors.speaker_id]
            sess = int(utt.factors.session_id.rsplit("_s", 1)[1])
            smeared = smear(utt.factors.content_trajectory, int(tables.smear_widths[j]))
            design = np.zeros((t, k_spk + k_sty + k_spk * n_sess + smeared.shape[1] + 1))
            design[:, k] = 1.0
            design[:, k_spk + j] = 1.0
            design[:, k_spk + k_sty + k * n_sess + sess] = 1.0
            design[:, k_spk + k_sty + k_spk * n_sess : -1] = smeared
            design[:, -1] = 1.0
            rows.append(design)
            targets.append(utt.features.astype(np.float64))
        a = np.concatenate(rows)
        y = np.concatenate(targets)
        coef, *_ = np.linalg.lstsq(a, y, rcond=None)
        rel_err = np.linalg.norm(a @ coef - y) / np.linalg.norm(y)
        assert rel_err < 1e-2

    def test_splits(self):
        corpus = generate_corpus(10, 4, 5, 0.5, seed=2)
        splits = {u.utterance_id: u.split for u in corpus.utterances}
        by_split = {}
        for u in corpus.utterances:
            by_split.setdefault(u.split, []).append(u)
        train_speakers = {u.factors.speaker_id for u in by_split[SPLIT_TRAIN]}
        unseen_speakers = {u.factors.speaker_id for u in by_split[SPLIT_UNSEEN_SPEAKER]}
        assert train_speakers.isdisjoint(unseen_speakers)
        assert len(unseen_speakers) == 2  # 20% of 10
        train_styles = {u.factors.style_id for u in by_split[SPLIT_TRAIN]}
        unseen_styles = {u.factors.style_id for u in by_split[SPLIT_UNSEEN_STYLE]}
        assert unseen_styles == {"sty3"}
        assert "sty3" not in train_styles
        heldout = by_split[SPLIT_HELDOUT_SEEN]
        assert {u.factors.speaker_id for u in heldout} <= train_speakers
        # every training (speaker, style) cell is non-empty
        cells = {(u.factors.speaker_id, u.factors.style_id) for u in by_split[SPLIT_TRAIN]}
        assert len(cells) == len(train_speakers) * len(train_styles)

    def test_write_corpus_roundtrip(self, tmp_path):
        corpus = generate_corpus(3, 2, 2, 0.5, seed=13)
        paths = write_corpus(corpus, tmp_path)
        records = read_manifest(paths["all"])
        assert len(records) == len(corpus.utterances)
        validate_manifest(records, tmp_path)
        factors = np.load(tmp_path / "factors.npz")
        assert factors["content"].shape[0] == len(corpus.utterances)
        assert list(factors["splits"]) == [u.split for u in corpus.utterances]


class TestGenerateRir:
    def test_determinism(self):
        a = generate_rir(0.2, 4000, seed=5)
        b = generate_rir(0.2, 4000, seed=5)
        np.testing.assert_array_equal(a.taps, b.taps)

    def test_first_tap_is_direct_path_maximum(self):
        r = generate_rir(0.3, 8000, seed=1)
        assert np.argmax(np.abs(r.taps)) == 0
        assert r.taps[0] == 1.0

    def test_degenerate_decay_approaches_impulse(self):
        # rt60 of 0.1 ms is ~1.6 samples at 16 kHz; virtually all energy must
        # sit in the direct-path tap.
        r = generate_rir(1e-4, 32, seed=0)
        assert r.taps[0] == 1.0
        assert np.abs(r.taps[1:]).max() < 0.02
        assert r.taps[0] ** 2 / (r.taps**2).sum() > 0.99

    def test_decay_slope_fits_60db_per_rt60(self):
        # Fit log RMS energy in windows against time; the slope over one
        # rt60 must be -60 dB within 1 dB.
        rt60, sr = 0.25, 16000
        r = generate_rir(rt60, int(rt60 * sr) + 1000, seed=8, sample_rate=sr)
        win = 200
        n_win = len(r.taps) // win
        rms = np.array([np.sqrt((r.taps[i * win : (i + 1) * win] ** 2).mean()) for i in range(n_win)])
        t = (np.arange(n_win) + 0.5) * win / sr
        keep = slice(1, n_win)  # skip the window holding the direct path
        slope_db_per_s = np.polyfit(t[keep], 20 * np.log10(rms[keep]), 1)[0]
        assert abs(slope_db_per_s * rt60 + 60.0) < 1.0

    def test_errors(self):
        with pytest.raises(ParameterError):
            generate_rir(0.0, 100, seed=0)
        with pytest.raises(ParameterError):
            generate_rir(0.5, 100, seed=0, sample_rate=16000)  # too short


class TestStatistics:
    def test_spectral_tilt_orders_styles(self):
        corpus = generate_corpus(6, 3, 4, 1.0, seed=17)
        by_style = {}
        for u in corpus.utterances:
            by_style.setdefault(u.factors.style_id, []).append(spectral_tilt(u.features))
        means = [np.mean(by_style[s]) for s in corpus.tables.style_ids]
        assert means == sorted(means)
        assert means[-1] - means[0] > 1.0

    def test_content_correlation_self_and_cross(self):
        corpus = generate_corpus(2, 2, 2, 1.0, seed=19)
        x = corpus.utterances[0].features
        y = corpus.utterances[1].features
        assert content_correlation(x, x) == pytest.approx(1.0, abs=1e-9)
        assert content_correlation(x, y) < 0.5
