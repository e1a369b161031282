import numpy as np
import pytest

from emphatts.prosody import (
    EmphasisMask,
    EmphasisSpan,
    NormalizationStats,
    PhonemeSequence,
    ProsodyError,
    ProsodyTargets,
    compute_variance_features,
    expand_mask_to_frames,
    fit_normalization_stats,
    normalize_to_range,
    span_to_mask,
)

WIDE_STATS = NormalizationStats(-10.0, 10.0, -10.0, 10.0)


def targets(pitch, duration, energy=None):
    pitch = np.asarray(pitch, dtype=np.float64)
    if energy is None:
        energy = np.zeros_like(pitch)
    return ProsodyTargets(pitch, energy, np.asarray(duration, dtype=np.int64))


class TestPhonemeSequence:
    def test_valid_tiling(self):
        seq = PhonemeSequence((1, 2, 3, 4), ((0, 1), (2, 3)))
        assert len(seq) == 4 and seq.n_words == 2

    def test_gap_rejected(self):
        with pytest.raises(ProsodyError):
            PhonemeSequence((1, 2, 3, 4), ((0, 1), (3, 3)))

    def test_overlap_rejected(self):
        with pytest.raises(ProsodyError):
            PhonemeSequence((1, 2, 3), ((0, 1), (1, 2)))

    def test_incomplete_cover_rejected(self):
        with pytest.raises(ProsodyError):
            PhonemeSequence((1, 2, 3), ((0, 1),))

    def test_empty_rejected(self):
        with pytest.raises(ProsodyError):
            PhonemeSequence((), ())


class TestEmphasisSpan:
    def test_matching_word_boundary_ok(self):
        seq = PhonemeSequence((1, 2, 3, 4), ((0, 1), (2, 3)))
        EmphasisSpan(1, 2, 3).validate(seq)

    def test_non_word_span_rejected(self):
        seq = PhonemeSequence((1, 2, 3, 4), ((0, 1), (2, 3)))
        with pytest.raises(ProsodyError):
            EmphasisSpan(1, 1, 3).validate(seq)

    def test_out_of_range_rejected(self):
        seq = PhonemeSequence((1, 2), ((0, 1),))
        with pytest.raises(ProsodyError):
            EmphasisSpan(0, 0, 5).validate(seq)


class TestVarianceFeatures:
    def test_mean_arithmetic_oracle_pitch(self):
        feats = compute_variance_features(
            targets([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 1]), EmphasisSpan(1, 2, 3), WIDE_STATS
        )
        assert feats.w_pitch == pytest.approx(3.5)
        assert feats.s_pitch == pytest.approx(2.5)
        assert feats.raw_pitch_var == pytest.approx(1.0)

    def test_whole_sentence_span_gives_zero_raw_variance(self):
        feats = compute_variance_features(
            targets([0.3, -0.2, 1.1], [2, 3, 4]), EmphasisSpan(0, 0, 2), WIDE_STATS
        )
        assert feats.raw_pitch_var == 0.0
        assert feats.raw_dur_var == 0.0

    def test_mean_arithmetic_oracle_duration(self):
        feats = compute_variance_features(
            targets([0, 0, 0, 0], [2, 2, 4, 4]), EmphasisSpan(1, 2, 3), WIDE_STATS
        )
        assert feats.w_dur == pytest.approx(4.0)
        assert feats.s_dur == pytest.approx(3.0)
        assert feats.raw_dur_var == pytest.approx(1.0)

    def test_tracks_zero_outside_span(self):
        feats = compute_variance_features(
            targets([5, 1, 1, 1], [9, 1, 1, 1]), EmphasisSpan(0, 0, 0), WIDE_STATS
        )
        assert np.all(feats.pitch_track[1:] == 0.0)
        assert np.all(feats.dur_track[1:] == 0.0)
        assert feats.pitch_track[0] == feats.norm_pitch_var

    def test_track_mean_over_span_reproduces_scalar(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 12))
            start = int(rng.integers(0, n))
            end = int(rng.integers(start, n))
            feats = compute_variance_features(
                targets(rng.normal(size=n), rng.integers(1, 9, size=n)),
                EmphasisSpan(0, start, end),
                WIDE_STATS,
            )
            width = end - start + 1
            assert feats.pitch_track[start : end + 1].sum() / width == pytest.approx(
                feats.norm_pitch_var, abs=1e-12
            )

    def test_translation_invariance_of_raw_pitch_variance(self):
        rng = np.random.default_rng(1)
        pitch = rng.normal(size=8)
        dur = rng.integers(1, 6, size=8)
        span = EmphasisSpan(0, 2, 5)
        a = compute_variance_features(targets(pitch, dur), span, WIDE_STATS)
        b = compute_variance_features(targets(pitch + 13.25, dur), span, WIDE_STATS)
        assert b.raw_pitch_var == pytest.approx(a.raw_pitch_var, abs=1e-12)

    def test_brute_force_oracle_equivalence_1000_cases(self):
        # independent two-loop means, no numpy reductions
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n = int(rng.integers(1, 16))
            start = int(rng.integers(0, n))
            end = int(rng.integers(start, n))
            pitch = rng.normal(size=n)
            dur = rng.integers(1, 12, size=n)
            feats = compute_variance_features(
                targets(pitch, dur), EmphasisSpan(0, start, end), WIDE_STATS
            )
            w_p = s_p = w_d = s_d = 0.0
            for i in range(n):
                s_p += pitch[i]
                s_d += float(dur[i])
            for i in range(start, end + 1):
                w_p += pitch[i]
                w_d += float(dur[i])
            w_p /= end - start + 1
            w_d /= end - start + 1
            s_p /= n
            s_d /= n
            assert abs(feats.w_pitch - w_p) <= 1e-12
            assert abs(feats.s_pitch - s_p) <= 1e-12
            assert abs(feats.w_dur - w_d) <= 1e-12
            assert abs(feats.s_dur - s_d) <= 1e-12

    def test_span_outside_sequence_rejected(self):
        with pytest.raises(ProsodyError):
            compute_variance_features(
                targets([1.0], [1]), EmphasisSpan(0, 0, 3), WIDE_STATS
            )


class TestNormalizeToRange:
    def test_affine_formula_by_hand(self):
        assert normalize_to_range(1.0, -1.0, 3.0) == pytest.approx(1.0)

    def test_lower_bound(self):
        assert normalize_to_range(-1.0, -1.0, 3.0) == 0.0

    def test_clamp_above(self):
        assert normalize_to_range(7.0, -1.0, 3.0) == 2.0

    def test_degenerate_rejected(self):
        with pytest.raises(ProsodyError):
            normalize_to_range(0.0, 1.0, 1.0)


class TestFitNormalizationStats:
    def test_uniform_0_to_100(self):
        values = np.arange(101.0)
        stats = fit_normalization_stats(values, values)
        assert stats.pitch_p5 == pytest.approx(5.0, abs=1.0)
        assert stats.pitch_p95 == pytest.approx(95.0, abs=1.0)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(3)
        values = rng.normal(size=60)
        a = fit_normalization_stats(values, values)
        b = fit_normalization_stats(values + 4.5, values + 4.5)
        assert b.pitch_p5 == pytest.approx(a.pitch_p5 + 4.5, abs=1e-12)
        assert b.pitch_p95 == pytest.approx(a.pitch_p95 + 4.5, abs=1e-12)

    def test_identical_values_rejected(self):
        with pytest.raises(ProsodyError):
            fit_normalization_stats(np.ones(20), np.ones(20))

    def test_too_few_utterances_rejected(self):
        with pytest.raises(ProsodyError, match="20"):
            fit_normalization_stats(np.arange(19.0), np.arange(19.0))

    def test_dur_unit_is_half_percentile_spread(self):
        stats = NormalizationStats(0.0, 1.0, -2.0, 4.0)
        assert stats.dur_unit == pytest.approx(3.0)


class TestMasks:
    def test_expand_to_frames(self):
        mask = EmphasisMask(np.array([0.0, 1.0]), "phoneme")
        frames = expand_mask_to_frames(mask, [2, 3])
        np.testing.assert_array_equal(frames.values, [0, 0, 1, 1, 1])
        assert frames.resolution == "frame"

    def test_all_zero_stays_zero(self):
        frames = expand_mask_to_frames(EmphasisMask(np.zeros(3), "phoneme"), [1, 2, 1])
        assert np.all(frames.values == 0)

    def test_single_phoneme(self):
        frames = expand_mask_to_frames(EmphasisMask(np.ones(1), "phoneme"), [4])
        np.testing.assert_array_equal(frames.values, [1, 1, 1, 1])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ProsodyError):
            expand_mask_to_frames(EmphasisMask(np.ones(2), "phoneme"), [1, 2, 3])

    def test_span_to_mask_marks_inclusive_range(self):
        mask = span_to_mask(EmphasisSpan(0, 1, 2), 4)
        np.testing.assert_array_equal(mask.values, [0, 1, 1, 0])

    def test_none_span_gives_zero_mask(self):
        assert np.all(span_to_mask(None, 5).values == 0)

    def test_non_binary_mask_rejected(self):
        with pytest.raises(ProsodyError):
            EmphasisMask(np.array([0.5]), "phoneme")
