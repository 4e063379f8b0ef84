"""Rupture-pipeline tests: resampling and window arithmetic against
enumeration oracles, NearMiss against brute force, metric hand-counts,
and the cross-validation structure guarantees."""

from __future__ import annotations

import numpy as np
import pytest

from coachflow.rupture import (
    AUDIO_WIDTH,
    FACIAL_WIDTH,
    CVConfig,
    CVResult,
    FeatureStream,
    FeatureWindow,
    FoldMetrics,
    RuptureDataset,
    SyntheticRuptureConfig,
    build_dataset,
    compute_metrics,
    early_fusion_windows,
    format_report_table,
    late_fusion_predict,
    load_feature_csv,
    load_labels_csv,
    make_windows,
    nearmiss_undersample,
    rank_configurations,
    resample_1hz,
    run_cv,
    save_feature_csv,
    save_labels_csv,
    stratified_subject_folds,
    summarize,
    synthetic_rupture_corpus,
    window_starts,
    znormalize,
)


def facial_stream(timestamps, fill=None, subject="s1") -> FeatureStream:
    n = len(timestamps)
    if fill is None:
        values = np.arange(n, dtype=float)[:, None] * np.ones((1, FACIAL_WIDTH))
    else:
        values = np.asarray(fill, dtype=float)
    return FeatureStream(
        modality="facial", subject_id=subject,
        timestamps=tuple(float(t) for t in timestamps), values=values,
    )


class TestResample:
    def test_subsecond_samples_collapse_to_whole_seconds(self):
        stream = facial_stream([0.0, 0.5, 1.0])
        out = resample_1hz(stream)
        assert out.timestamps == (0.0, 1.0)
        # Second 0 takes the sample at 0.0; second 1 the one at exactly 1.0.
        assert out.values[0, 0] == 0.0
        assert out.values[1, 0] == 2.0

    def test_nearest_at_or_before_rule(self):
        stream = facial_stream([0.0, 0.5, 1.7, 2.0])
        out = resample_1hz(stream)
        assert out.timestamps == (0.0, 1.0, 2.0)
        # Second 1 has no exact sample; 0.5 is the latest at-or-before.
        assert out.values[1, 0] == 1.0
        assert out.values[2, 0] == 3.0

    def test_one_hz_stream_is_fixed_point(self):
        stream = facial_stream(range(12))
        out = resample_1hz(stream)
        assert out.timestamps == stream.timestamps
        np.testing.assert_array_equal(out.values, stream.values)

    def test_24s_stream_gives_25_steps(self):
        stream = facial_stream([i * 0.5 for i in range(49)])  # 0.0 .. 24.0
        assert len(resample_1hz(stream)) == 25

    def test_fractional_start_begins_at_next_whole_second(self):
        stream = facial_stream([0.3, 1.1, 2.6, 3.0])
        out = resample_1hz(stream)
        assert out.timestamps == (1.0, 2.0, 3.0)

    def test_empty_stream_rejected_at_construction(self):
        with pytest.raises(ValueError, match="at least one"):
            facial_stream([], fill=np.empty((0, FACIAL_WIDTH)))

    def test_non_increasing_timestamps_rejected(self):
        with pytest.raises(ValueError, match="increasing"):
            facial_stream([0.0, 1.0, 1.0])


class TestWindowArithmetic:
    def test_exact_window_length_gives_one(self):
        assert window_starts(10) == [0]

    def test_24_steps_give_three_windows(self):
        assert window_starts(24) == [0, 7, 14]

    def test_too_short_gives_none(self):
        assert window_starts(9) == []

    @pytest.mark.parametrize("length", range(9, 61))
    def test_count_matches_start_enumeration(self, length):
        # Brute force: every stride-aligned start whose window fits.
        expected = [s for s in range(0, max(length - 10 + 1, 0)) if s % 7 == 0]
        if length < 10:
            expected = []
        starts = window_starts(length)
        assert starts == expected
        if length >= 10:
            assert len(starts) == (length - 10) // 7 + 1

    def test_make_windows_attaches_labels_by_absolute_start(self):
        stream = resample_1hz(facial_stream(range(25)))
        windows = make_windows(stream, labels={7: 1})
        assert [w.start_s for w in windows] == [0, 7, 14]
        assert [w.label for w in windows] == [0, 1, 0]
        assert all(w.matrix.shape == (10, FACIAL_WIDTH) for w in windows)

    def test_make_windows_short_stream_warns_and_returns_empty(self, caplog):
        stream = resample_1hz(facial_stream(range(9)))
        with caplog.at_level("WARNING"):
            assert make_windows(stream) == []
        assert "shorter than one" in caplog.text

    def test_make_windows_rejects_non_1hz_input(self):
        stream = facial_stream([0.0, 0.5, 1.0])
        with pytest.raises(ValueError, match="1 Hz"):
            make_windows(stream)

    def test_window_content_matches_stream_slice(self):
        stream = resample_1hz(facial_stream(range(17)))
        windows = make_windows(stream)
        np.testing.assert_array_equal(windows[1].matrix, stream.values[7:17])


class TestZNormalize:
    def test_training_set_self_normalizes(self):
        rng = np.random.default_rng(3)
        train = rng.normal(5.0, 2.0, size=(20, 10, 4))
        normed, _, _ = znormalize(train, train)
        flat = normed.reshape(-1, 4)
        assert np.abs(flat.mean(axis=0)).max() < 1e-9
        assert np.abs(flat.std(axis=0) - 1.0).max() < 1e-9

    def test_constant_feature_becomes_zero_column(self, caplog):
        train = np.ones((5, 10, 3))
        train[..., 1] = np.random.default_rng(0).normal(size=(5, 10))
        with caplog.at_level("WARNING"):
            normed, test_normed, (mean, std) = znormalize(train, train)
        assert np.all(normed[..., 0] == 0.0)
        assert np.all(normed[..., 2] == 0.0)
        assert "constant feature" in caplog.text
        assert std[0] == 0.0

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        train = rng.normal(size=(12, 10, 6))
        test = rng.normal(size=(4, 10, 6))
        base_train, base_test, _ = znormalize(train, test)
        shift_train, shift_test, _ = znormalize(train + 17.5, test + 17.5)
        np.testing.assert_allclose(shift_train, base_train, atol=1e-9)
        np.testing.assert_allclose(shift_test, base_test, atol=1e-9)

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            znormalize(np.empty((0, 10, 3)), np.ones((2, 10, 3)))


def constant_windows(levels) -> np.ndarray:
    # One window per level, every cell set to the level: distances between
    # flattened windows are then |a - b| * sqrt(10 * width).
    return np.asarray([np.full((10, 2), v) for v in levels])


class TestNearMiss:
    def test_planted_closest_majority_points_survive(self):
        # Minority at 0 and 10; majority at 0.1, 9.9 (atop them) and 50, 60.
        windows = constant_windows([0.0, 10.0, 0.1, 9.9, 50.0, 60.0])
        labels = np.array([1, 1, 0, 0, 0, 0])
        kept = nearmiss_undersample(windows, labels, k=3)
        assert sorted(kept.tolist()) == [0, 1, 2, 3]

    def test_balanced_input_is_identity(self):
        windows = constant_windows([0.0, 1.0, 2.0, 3.0])
        labels = np.array([1, 1, 0, 0])
        kept = nearmiss_undersample(windows, labels)
        assert kept.tolist() == [0, 1, 2, 3]

    def test_single_class_rejected(self):
        windows = constant_windows([0.0, 1.0])
        with pytest.raises(ValueError, match="both classes"):
            nearmiss_undersample(windows, np.array([1, 1]))

    def test_output_classes_exactly_equal(self):
        rng = np.random.default_rng(11)
        windows = rng.normal(size=(30, 10, 2))
        labels = np.array([1] * 9 + [0] * 21)
        kept = nearmiss_undersample(windows, labels, k=3)
        kept_labels = labels[kept]
        assert int((kept_labels == 1).sum()) == 9
        assert int((kept_labels == 0).sum()) == 9

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(23)
        windows = rng.normal(size=(25, 10, 2))
        labels = np.asarray(rng.random(25) < 0.3, dtype=int)
        if labels.sum() in (0, 25):  # guard: the seed above yields both classes
            pytest.fail("seed no longer produces two classes")
        k = 3
        flat = windows.reshape(25, -1)
        minority = np.flatnonzero(labels == 1) if labels.sum() <= 25 / 2 else np.flatnonzero(labels == 0)
        majority = np.setdiff1d(np.arange(25), minority)
        k_eff = min(k, len(minority))
        scored = []
        for mi in majority:
            dists = sorted(float(np.linalg.norm(flat[mi] - flat[mj])) for mj in minority)
            scored.append((sum(dists[:k_eff]) / k_eff, mi))
        scored.sort()
        expected = sorted(list(minority) + [mi for _, mi in scored[: len(minority)]])
        kept = nearmiss_undersample(windows, labels, k=k)
        assert kept.tolist() == expected


def window_of(matrix, subject="s1", start=0, label=0, width=None) -> FeatureWindow:
    return FeatureWindow(matrix=np.asarray(matrix, dtype=float), label=label,
                         subject_id=subject, start_s=start)


class TestEarlyFusion:
    def test_widths_concatenate_to_60(self):
        f = window_of(np.ones((10, FACIAL_WIDTH)))
        a = window_of(np.ones((10, AUDIO_WIDTH)))
        fused = early_fusion_windows(f, a)
        assert fused.shape == (10, FACIAL_WIDTH + AUDIO_WIDTH)

    def test_facial_block_first_audio_last(self):
        f = window_of(np.full((10, FACIAL_WIDTH), 2.0))
        a = window_of(np.zeros((10, AUDIO_WIDTH)))
        fused = early_fusion_windows(f, a)
        assert np.all(fused[:, :FACIAL_WIDTH] == 2.0)
        assert np.all(fused[:, FACIAL_WIDTH:] == 0.0)

    def test_slicing_recovers_originals(self):
        rng = np.random.default_rng(2)
        f = window_of(rng.normal(size=(10, FACIAL_WIDTH)))
        a = window_of(rng.normal(size=(10, AUDIO_WIDTH)))
        fused = early_fusion_windows(f, a)
        np.testing.assert_array_equal(fused[:, :FACIAL_WIDTH], f.matrix)
        np.testing.assert_array_equal(fused[:, FACIAL_WIDTH:], a.matrix)

    def test_misaligned_windows_rejected(self):
        f = window_of(np.ones((10, FACIAL_WIDTH)), start=0)
        a = window_of(np.ones((10, AUDIO_WIDTH)), start=7)
        with pytest.raises(ValueError, match="misaligned"):
            early_fusion_windows(f, a)


class FixedProbs:
    """predict_proba stub returning one fixed probability row."""

    def __init__(self, p_noir: float, p_ir: float):
        self.row = np.asarray([p_noir, p_ir])

    def predict_proba(self, windows):
        return np.tile(self.row, (len(windows), 1))


class TestLateFusion:
    def setup_method(self):
        self.f_window = window_of(np.ones((10, FACIAL_WIDTH)))
        self.a_window = window_of(np.ones((10, AUDIO_WIDTH)))

    def test_higher_confidence_model_wins(self):
        facial = FixedProbs(0.1, 0.9)   # IR at 0.9
        audio = FixedProbs(0.6, 0.4)    # NoIR at 0.6
        label, conf = late_fusion_predict(facial, audio, self.f_window, self.a_window)
        assert label == 1
        assert conf == pytest.approx(0.9)

    def test_equal_confidence_goes_to_audio(self):
        facial = FixedProbs(0.25, 0.75)
        audio = FixedProbs(0.75, 0.25)
        label, conf = late_fusion_predict(facial, audio, self.f_window, self.a_window)
        assert label == 0  # the audio model's call
        assert conf == pytest.approx(0.75)

    def test_agreement_emits_shared_label_with_max_confidence(self):
        facial = FixedProbs(0.2, 0.8)
        audio = FixedProbs(0.3, 0.7)
        label, conf = late_fusion_predict(facial, audio, self.f_window, self.a_window)
        assert label == 1
        assert conf == pytest.approx(0.8)

    def test_misaligned_windows_rejected(self):
        other = window_of(np.ones((10, AUDIO_WIDTH)), subject="s2")
        with pytest.raises(ValueError, match="misaligned"):
            late_fusion_predict(FixedProbs(0.5, 0.5), FixedProbs(0.5, 0.5),
                                self.f_window, other)


class TestMetrics:
    def test_perfect_predictions(self):
        m = compute_metrics([1, 0, 1, 0], [1, 0, 1, 0])
        assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)

    def test_hand_counted_confusion_matrix(self):
        m = compute_metrics([1, 1, 0, 0], [1, 0, 1, 0])
        assert m.accuracy == pytest.approx(0.5)
        assert m.precision == pytest.approx(0.5)
        assert m.recall == pytest.approx(0.5)
        assert m.f1 == pytest.approx(0.5)

    def test_all_negative_predictions_flag_precision(self):
        m = compute_metrics([0, 0, 0], [1, 0, 1])
        assert m.precision == 0.0
        assert not m.precision_defined
        assert m.recall == 0.0
        assert m.recall_defined

    def test_f1_is_harmonic_mean_when_defined(self):
        m = compute_metrics([1, 1, 1, 0], [1, 0, 1, 1])
        expected = 2 * m.precision * m.recall / (m.precision + m.recall)
        assert m.f1 == pytest.approx(expected)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            compute_metrics([1, 0], [1])

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            compute_metrics([], [])


@pytest.fixture(scope="module")
def small_dataset():
    config = SyntheticRuptureConfig(
        n_subjects=6, seconds_per_subject=120, seed=9, negative_subjects=1
    )
    facial, audio, labels = synthetic_rupture_corpus(config)
    return build_dataset(facial, audio, labels).balanced()


class TestDatasetConstruction:
    def test_alignment_and_window_counts(self):
        facial, audio, labels = synthetic_rupture_corpus(
            SyntheticRuptureConfig(n_subjects=5, seconds_per_subject=80, seed=1)
        )
        ds = build_dataset(facial, audio, labels)
        # 81 one-second steps per subject -> floor((81-10)/7)+1 = 11 windows.
        assert len(ds) == 5 * 11
        for f, a in zip(ds.facial, ds.audio):
            assert (f.subject_id, f.start_s) == (a.subject_id, a.start_s)
            assert f.label == a.label

    def test_labels_follow_generator_assignment(self):
        facial, audio, labels = synthetic_rupture_corpus(
            SyntheticRuptureConfig(n_subjects=5, seconds_per_subject=80, seed=1)
        )
        ds = build_dataset(facial, audio, labels)
        for w in ds.facial:
            assert w.label == labels[(w.subject_id, w.start_s)]

    def test_balancing_equalizes_classes_and_keeps_alignment(self, small_dataset):
        counts = small_dataset.class_counts()
        assert counts[0] == counts[1]
        for f, a in zip(small_dataset.facial, small_dataset.audio):
            assert (f.subject_id, f.start_s) == (a.subject_id, a.start_s)

    def test_label_disagreement_rejected(self):
        f = window_of(np.ones((10, FACIAL_WIDTH)), label=1)
        a = window_of(np.ones((10, AUDIO_WIDTH)), label=0)
        with pytest.raises(ValueError, match="disagreement"):
            RuptureDataset(facial=[f], audio=[a])


class TestCrossValidation:
    def test_stratified_folds_partition_subjects(self):
        subjects = [f"s{i}" for i in range(11)]
        positives = set(subjects[:6])
        rng = np.random.default_rng(0)
        folds = stratified_subject_folds(subjects, positives, 5, rng)
        flat = [s for fold in folds for s in fold]
        assert sorted(flat) == sorted(subjects)
        pos_counts = [len([s for s in fold if s in positives]) for fold in folds]
        assert max(pos_counts) - min(pos_counts) <= 1
        sizes = [len(fold) for fold in folds]
        assert max(sizes) - min(sizes) <= 1

    def test_fold_count_and_subject_independence(self, small_dataset):
        cfg = CVConfig(repeats=2, epochs=2, hidden=4, seed=3)
        result = run_cv(small_dataset, "lstm", "audio", cfg)
        assert len(result.records) == cfg.folds * cfg.repeats
        # Leakage is asserted inside run_cv per fold; reaching here means
        # every fold kept train and test subject sets disjoint.

    def test_fifty_folds_by_default(self, small_dataset):
        cfg = CVConfig(epochs=1, hidden=4, seed=1)
        result = run_cv(small_dataset, "gru", "audio", cfg)
        assert len(result.records) == 50

    def test_too_few_subjects_rejected(self):
        facial, audio, labels = synthetic_rupture_corpus(
            SyntheticRuptureConfig(n_subjects=4, seconds_per_subject=60, seed=2)
        )
        ds = build_dataset(facial, audio, labels)
        with pytest.raises(ValueError, match="subjects"):
            run_cv(ds, "lstm", "audio", CVConfig(epochs=1))

    def test_unknown_tags_rejected(self, small_dataset):
        with pytest.raises(ValueError, match="model tag"):
            run_cv(small_dataset, "transformer", "audio")
        with pytest.raises(ValueError, match="fusion tag"):
            run_cv(small_dataset, "lstm", "middle")

    def test_audio_model_separates_planted_shift(self, small_dataset):
        # Cheap separability check; the full 50-fold late-fusion bar lives in
        # the acceptance suite.
        cfg = CVConfig(repeats=2, epochs=25, seed=5)
        result = run_cv(small_dataset, "lstm", "audio", cfg)
        assert result.summary["precision"]["mean"] >= 0.9


def fake_result(model, fusion, precisions) -> CVResult:
    records = tuple(
        FoldMetrics(accuracy=p, precision=p, recall=p, f1=p) for p in precisions
    )
    return CVResult(model=model, fusion=fusion, records=records,
                    summary=summarize(records))


class TestModelSelection:
    def test_ranking_orders_by_mean_precision(self):
        weak = fake_result("lstm", "facial", [0.5, 0.6, 0.55])
        strong = fake_result("bilstm", "late", [0.95, 0.92, 0.97])
        middle = fake_result("gru", "early", [0.8, 0.75, 0.85])
        ranked = rank_configurations([weak, strong, middle])
        assert [(r.model, r.fusion) for r in ranked] == [
            ("bilstm", "late"), ("gru", "early"), ("lstm", "facial"),
        ]

    def test_ranking_is_pure_and_stable(self):
        a = fake_result("lstm", "audio", [0.9, 0.9])
        b = fake_result("gru", "audio", [0.9, 0.9])
        first = rank_configurations([a, b])
        second = rank_configurations([a, b])
        assert [(r.model, r.fusion) for r in first] == [(r.model, r.fusion) for r in second]

    def test_report_table_has_one_row_per_config(self):
        results = [fake_result("lstm", "audio", [0.9]), fake_result("gru", "early", [0.7])]
        table = format_report_table(results)
        assert "lstm" in table and "gru" in table
        assert len(table.splitlines()) == 4  # header, rule, two rows


class TestCsvRoundTrip:
    def test_feature_csv_round_trip(self, tmp_path):
        facial, _, _ = synthetic_rupture_corpus(
            SyntheticRuptureConfig(n_subjects=2, seconds_per_subject=15, seed=4)
        )
        path = tmp_path / "facial.csv"
        save_feature_csv(facial, path)
        loaded = load_feature_csv(path, "facial")
        assert len(loaded) == 2
        for orig, back in zip(facial, loaded):
            assert back.subject_id == orig.subject_id
            assert back.timestamps == orig.timestamps
            np.testing.assert_array_equal(back.values, orig.values)

    def test_labels_csv_round_trip(self, tmp_path):
        labels = {("s1", 0): 1, ("s1", 7): 0, ("s2", 14): 1}
        path = tmp_path / "labels.csv"
        save_labels_csv(labels, path)
        assert load_labels_csv(path) == labels

    def test_feature_csv_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("who,when,f_0\nx,0.0,1.0\n")
        with pytest.raises(ValueError, match="header"):
            load_feature_csv(path, "facial")

    def test_feature_csv_wrong_width_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        header = "subject_id,t_seconds," + ",".join(f"f_{i}" for i in range(3))
        path.write_text(header + "\ns1,0.0,1,2,3\n")
        with pytest.raises(ValueError, match="feature col"):
            load_feature_csv(path, "facial")

    def test_labels_csv_bad_row_names_line(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("subject_id,t_start,label\ns1,0,1\ns1,7\n")
        with pytest.raises(ValueError, match=":3"):
            load_labels_csv(path)

    def test_labels_csv_bad_label_value_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("subject_id,t_start,label\ns1,0,2\n")
        with pytest.raises(ValueError, match="label"):
            load_labels_csv(path)
