import json
import logging
from collections import Counter

import numpy as np
import pytest
from scipy.signal import find_peaks

from mvp.data import (
    AU_COLUMNS,
    AU_IDS,
    N_AU,
    ChannelStats,
    Normalizer,
    Trial,
    au_csv_text,
    binarize_label,
    intensity_column,
    load_au_csv,
    load_corpus,
    load_physio_csv,
    make_folds,
    normalize,
    pad_batch,
    read_manifest,
    read_signal_file,
    scan_max_lengths,
    split_trials,
)
from mvp.errors import ParseError, SchemaError, ValidationError
from mvp.synthetic import generate_synthetic


def make_trial(tv=5, tp=9, subject="S01", tid="S01_T01", v=6.0, a=3.0, seed=0):
    rng = np.random.default_rng(seed)
    return Trial(subject, tid, rng.standard_normal((tv, 42)), rng.standard_normal((tp, 2)), v, a)


def write_au(path, rows, columns=AU_COLUMNS):
    lines = [",".join(("frame", " timestamp") + tuple(f" {c}" for c in columns))]
    for i, r in enumerate(rows):
        lines.append(",".join([str(i), str(i / 18)] + [str(x) for x in r]))
    path.write_text("\n".join(lines) + "\n")


class TestAUCsv:
    def test_column_layout(self):
        assert len(AU_COLUMNS) == 42
        assert AU_COLUMNS[0] == "AU01_c" and AU_COLUMNS[N_AU] == "AU01_r"
        assert AU_COLUMNS[-6:] == ("gaze_0_x", "gaze_0_y", "gaze_0_z", "gaze_1_x", "gaze_1_y", "gaze_1_z")
        assert AU_IDS == (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 28, 45)
        assert AU_COLUMNS[intensity_column(12)] == "AU12_r"

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        m = np.column_stack([(rng.random((30, 18)) > 0.5) * 1.0, rng.uniform(0, 5, (30, 18)), rng.standard_normal((30, 6))])
        p = tmp_path / "a.csv"
        p.write_text(au_csv_text(m))
        np.testing.assert_allclose(load_au_csv(p), m, rtol=1e-7)

    def test_missing_columns_listed(self, tmp_path):
        p = tmp_path / "a.csv"
        cols = tuple(c for c in AU_COLUMNS if c not in ("AU06_r", "gaze_1_z"))
        write_au(p, [[0.0] * len(cols)], cols)
        with pytest.raises(SchemaError, match="AU06_r, gaze_1_z"):
            load_au_csv(p)

    def test_non_numeric_cell_gives_row(self, tmp_path):
        p = tmp_path / "a.csv"
        rows = [[0.0] * 42 for _ in range(4)]
        rows[2][7] = "oops"
        write_au(p, rows)
        with pytest.raises(ParseError, match="row 2"):
            load_au_csv(p)

    def test_header_only_is_empty_then_rejected(self, tmp_path):
        p = tmp_path / "a.csv"
        write_au(p, [])
        m = load_au_csv(p)
        assert m.shape == (0, 42)
        with pytest.raises(ValidationError, match="empty"):
            Trial("S1", "T1", m, np.zeros((10, 2)), 5.0, 5.0)

    def test_full_length_trial(self, tmp_path):
        # 155 s at 18 fps
        p = tmp_path / "a.csv"
        p.write_text(au_csv_text(np.zeros((2_790, 42))))
        m = load_au_csv(p)
        assert m.shape == (2_790, 42)
        batch = pad_batch([Trial("S1", "T1", m, np.zeros((10, 2)), 5.0, 5.0)], 2_800, 10)
        assert batch.video.shape == (1, 2_800, 42)

    def test_presence_rounding_and_clamping(self, tmp_path, caplog):
        p = tmp_path / "a.csv"
        row = [0.0] * 42
        row[0], row[1], row[2], row[3] = 0.4, 0.5, 1.7, 1.0
        row[N_AU], row[N_AU + 1] = -0.3, 6.2
        write_au(p, [row])
        counters = Counter()
        with caplog.at_level(logging.WARNING):
            m = load_au_csv(p, counters)
        np.testing.assert_array_equal(m[0, :4], [0.0, 1.0, 1.0, 1.0])
        np.testing.assert_array_equal(m[0, N_AU : N_AU + 2], [0.0, 5.0])
        assert counters["presence_rounded"] == 2  # 1.7 is clamped, not rounded
        assert "rounded" in caplog.text


class TestTrial:
    def test_width_checked(self):
        with pytest.raises(ValidationError):
            Trial("S", "T", np.zeros((4, 41)), np.zeros((4, 2)), 5.0, 5.0)
        with pytest.raises(ValidationError):
            Trial("S", "T", np.zeros((4, 42)), np.zeros((4, 3)), 5.0, 5.0)

    def test_label_range(self):
        with pytest.raises(ValidationError):
            Trial("S", "T", np.zeros((4, 42)), np.zeros((4, 2)), 9.5, 5.0)

    def test_dataset_tag(self):
        with pytest.raises(ValidationError):
            Trial("S", "T", np.zeros((4, 42)), np.zeros((4, 2)), 5.0, 5.0, "mahnob")


class TestNormalize:
    def test_constant_channel(self, caplog):
        with caplog.at_level(logging.WARNING):
            out = normalize(np.full((5, 1), 3.0))
        np.testing.assert_array_equal(out, 0.0)
        assert "zero-variance" in caplog.text

    def test_two_point(self):
        np.testing.assert_allclose(normalize(np.array([[1.0], [3.0]]))[:, 0], [-1.0, 1.0])

    def test_training_stats(self):
        rng = np.random.default_rng(0)
        mats = [rng.normal(3, 2, (rng.integers(5, 50), 4)) for _ in range(6)]
        stats = ChannelStats.fit(mats)
        out = np.concatenate([stats.apply(m) for m in mats])
        assert np.all(np.abs(out.mean(axis=0)) <= 1e-8)
        assert np.all(np.abs(out.std(axis=0) - 1) <= 1e-6)

    def test_test_split_uses_train_stats(self):
        rng = np.random.default_rng(1)
        train = [make_trial(tv=40, tp=60, tid=f"a{i}", seed=i) for i in range(4)]
        shifted = Trial("S9", "b", rng.normal(2, 3, (40, 42)), rng.normal(-1, 0.5, (60, 2)), 5.0, 5.0)
        norm = Normalizer.fit(train)
        out = norm.transform(shifted)
        assert not np.allclose(out.video_feats.mean(axis=0), 0, atol=0.1)
        assert not np.allclose(out.physio.std(axis=0), 1, atol=0.1)

    def test_arrays_round_trip(self):
        norm = Normalizer.fit([make_trial(seed=i, tid=str(i)) for i in range(3)])
        back = Normalizer.from_arrays(norm.arrays())
        np.testing.assert_array_equal(back.physio.std, norm.physio.std)


class TestBinarize:
    @pytest.mark.parametrize(
        "raw,thr,expected",
        [(4.5, 4.5, 0), (4.500001, 4.5, 1), (9.0, 4.5, 1), (9.0, 5.0, 1), (5.0, 5.0, 0), (1.0, 4.5, 0)],
    )
    def test_boundaries(self, raw, thr, expected):
        assert binarize_label(raw, thr) == expected

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            binarize_label(0.5, 4.5)

    def test_monotone(self):
        raws = np.linspace(1, 9, 401)
        out = [binarize_label(r, 5.0) for r in raws]
        assert np.all(np.diff(out) >= 0)


class TestPadBatch:
    def test_exact_max_is_bit_identical(self):
        t = make_trial(tv=6, tp=10)
        b = pad_batch([t], 6, 10)
        assert b.video[0].tobytes() == t.video_feats.tobytes()
        assert b.physio[0].tobytes() == t.physio.tobytes()

    def test_zero_tail(self):
        t = Trial("S", "T", np.ones((5, 42)), np.ones((19_000, 2)), 5.0, 5.0)
        b = pad_batch([t], 8, 19_900)
        assert not b.physio[0, 19_000:].any()
        assert b.physio[0, 18_999].all()
        assert not b.video[0, 5:].any()

    def test_over_length_names_trial(self):
        with pytest.raises(ValidationError, match="S01_T07"):
            pad_batch([make_trial(tv=9, tid="S01_T07")], 8, 20)

    def test_empty(self):
        with pytest.raises(ValidationError):
            pad_batch([], 8, 8)

    def test_labels_and_unpad(self):
        trials = [make_trial(tv=3 + i, tp=5 + 2 * i, tid=str(i), v=4.5 + i, a=5.0 - i, seed=i) for i in range(3)]
        b = pad_batch(trials, 8, 12, thresholds=(4.5, 4.5))
        np.testing.assert_array_equal(b.labels, [[0, 1], [1, 0], [1, 0]])
        assert b.true_lengths == ((3, 5), (4, 7), (5, 9))
        for t, (v, p) in zip(trials, b.unpad()):
            np.testing.assert_array_equal(v, t.video_feats)
            np.testing.assert_array_equal(p, t.physio)

    def test_scan_max(self):
        trials = [make_trial(tv=3, tp=20), make_trial(tv=7, tp=4)]
        assert scan_max_lengths(trials) == (7, 20)


class TestFolds:
    @pytest.mark.parametrize("n,sizes", [(40, [8] * 5), (32, [7, 7, 6, 6, 6])])
    def test_sizes_and_disjoint(self, n, sizes):
        subjects = [f"S{i:02d}" for i in range(n)]
        plan = make_folds(subjects, 5, seed=3)
        assert [len(f) for f in plan.folds] == sizes
        assert plan.subjects == set(subjects)
        for i in range(5):
            train, test = plan.split(i)
            assert not train & test
            assert train | test == set(subjects)

    def test_deterministic(self):
        subjects = [f"S{i}" for i in range(32)]
        assert make_folds(subjects, 5, 11) == make_folds(list(reversed(subjects)), 5, 11)
        assert make_folds(subjects, 5, 11) != make_folds(subjects, 5, 12)

    def test_too_few_subjects(self):
        with pytest.raises(ValidationError):
            make_folds(["a", "b", "c"], 5)

    def test_split_trials_keeps_subjects_whole(self):
        trials = [make_trial(subject=f"S{s}", tid=f"S{s}_{j}", seed=s * 10 + j) for s in range(10) for j in range(3)]
        plan = make_folds([t.subject_id for t in trials], 5, 0)
        for i in range(5):
            train, test = split_trials(trials, plan, i)
            assert len(train) + len(test) == 30
            assert not {t.subject_id for t in train} & {t.subject_id for t in test}


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(20, 12, seed=7)


def pulse_period(ecg, fs=128.0):
    peaks, _ = find_peaks(ecg, height=0.5 * ecg.max(), distance=int(0.3 * fs))
    return float(np.median(np.diff(peaks))) / fs


class TestSynthetic:
    def test_deterministic(self):
        a, b = generate_synthetic(5, 2, 3), generate_synthetic(5, 2, 3)
        for x, y in zip(a, b):
            assert x.physio.tobytes() == y.physio.tobytes()
            assert x.video_feats.tobytes() == y.video_feats.tobytes()
            assert (x.valence_raw, x.arousal_raw) == (y.valence_raw, y.arousal_raw)

    def test_balance(self, corpus):
        assert len(corpus) == 240
        for attr in ("valence_raw", "arousal_raw"):
            frac = np.mean([binarize_label(getattr(t, attr), 4.5) for t in corpus])
            assert 0.45 <= frac <= 0.55

    def test_lengths(self, corpus):
        for t in corpus:
            tv, tp = t.lengths
            assert 60 * 128 - 1 <= tp <= 155 * 128 + 1
            assert abs(tv / 18 - tp / 128) < 0.1

    def test_pulse_period_rule_predicts_arousal(self, corpus):
        periods = np.array([pulse_period(t.physio[:, 0]) for t in corpus])
        arousal = np.array([binarize_label(t.arousal_raw, 4.5) for t in corpus])
        assert np.mean((periods < 0.8) == arousal) >= 0.95

    def test_valence_lifts_au6_au12(self, corpus):
        cols = [intensity_column(6), intensity_column(12)]
        lift = np.array([t.video_feats[:, cols].mean() for t in corpus])
        valence = np.array([binarize_label(t.valence_raw, 4.5) for t in corpus])
        assert lift[valence == 1].mean() - lift[valence == 0].mean() > 0.7

    def test_too_few_subjects(self):
        with pytest.raises(ValidationError):
            generate_synthetic(4, 2, 0)


class TestManifest:
    def test_corpus_round_trip(self, tmp_path):
        from mvp.cli import write_corpus

        trials = generate_synthetic(5, 1, 0)
        write_corpus(tmp_path, trials)
        recs = read_manifest(tmp_path / "manifest.jsonl")
        assert [r["trial_id"] for r in recs] == [t.trial_id for t in trials]
        back = load_corpus(tmp_path / "manifest.jsonl")
        for t, u in zip(trials, back):
            np.testing.assert_allclose(u.physio, t.physio, rtol=1e-7, atol=1e-12)
            np.testing.assert_allclose(u.video_feats, t.video_feats, rtol=1e-7, atol=1e-12)
            assert u.valence_raw == t.valence_raw

    def test_missing_keys(self, tmp_path):
        p = tmp_path / "manifest.jsonl"
        p.write_text(json.dumps({"subject_id": "S1"}) + "\n")
        with pytest.raises(SchemaError, match="trial_id"):
            read_manifest(p)

    def test_bad_json_line(self, tmp_path):
        p = tmp_path / "manifest.jsonl"
        p.write_text("{not json\n")
        with pytest.raises(ParseError, match=":1:"):
            read_manifest(p)

    def test_physio_header(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("t,EDA,ECG\n0,1,2\n")
        with pytest.raises(SchemaError):
            load_physio_csv(p)


class TestSignalFiles:
    def test_csv_rate(self, tmp_path):
        p = tmp_path / "s.csv"
        t = np.arange(100) / 256.0
        np.savetxt(p, np.column_stack([t, np.sin(t)]), delimiter=",", header="t,PPG", comments="")
        (sig,) = read_signal_file(p)
        assert sig.sample_rate_hz == 256.0 and sig.channel == "PPG" and len(sig) == 100

    def test_bin_with_sidecar(self, tmp_path):
        p = tmp_path / "s.bin"
        data = np.column_stack([np.arange(50) / 512.0, np.arange(50.0)])
        data.astype("<f8").tofile(p)
        (tmp_path / "s.meta").write_text("sample_rate_hz=512\nchannel=EDA\n")
        (sig,) = read_signal_file(p)
        assert sig.sample_rate_hz == 512.0 and sig.channel == "EDA"
        np.testing.assert_array_equal(sig.samples, np.arange(50.0))

    def test_bin_missing_key(self, tmp_path):
        p = tmp_path / "s.bin"
        np.zeros(4).tofile(p)
        (tmp_path / "s.meta").write_text("channel=EDA\n")
        with pytest.raises(SchemaError, match="sample_rate_hz"):
            read_signal_file(p)
