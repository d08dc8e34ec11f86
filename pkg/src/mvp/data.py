"""Trial ingestion, normalization, label binarization, padding and fold plans.

AU table layout
---------------
``load_au_csv`` reads OpenFace-style CSV output and returns a ``[frames, 42]``
matrix with this column order:

* 0-17: presence ``AU01_c ... AU45_c`` (rounded to 0/1)
* 18-35: intensity ``AU01_r ... AU45_r`` (clamped to [0, 5])
* 36-41: gaze ``gaze_0_x, gaze_0_y, gaze_0_z, gaze_1_x, gaze_1_y, gaze_1_z``

AUs are taken in the order of ``AU_IDS``. Extra columns (frame, timestamp,
confidence, ...) are ignored; header names are whitespace-stripped.

Physio files
------------
CSV with header ``t,<cardiac>,EDA`` where ``<cardiac>`` is ``ECG`` or ``PPG``,
one row per sample at 128 Hz. The ``t`` column is ignored on load.

Corpus manifest
---------------
JSON lines, one object per trial with keys ``subject_id, trial_id,
au_csv_path, physio_path, valence_raw, arousal_raw, dataset_tag``. Relative
paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .dsp import RawSignal
from .errors import IOFailure, ParseError, SchemaError, ValidationError

log = logging.getLogger(__name__)

AU_IDS = (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 28, 45)
PRESENCE_COLUMNS = tuple(f"AU{i:02d}_c" for i in AU_IDS)
INTENSITY_COLUMNS = tuple(f"AU{i:02d}_r" for i in AU_IDS)
GAZE_COLUMNS = tuple(f"gaze_{e}_{a}" for e in (0, 1) for a in "xyz")
AU_COLUMNS = PRESENCE_COLUMNS + INTENSITY_COLUMNS + GAZE_COLUMNS
VIDEO_WIDTH = len(AU_COLUMNS)
PHYSIO_WIDTH = 2
N_AU = len(AU_IDS)

DATASET_TAGS = ("amigos", "deap", "synthetic")
THRESHOLDS = {"amigos": 4.5, "deap": 5.0, "synthetic": 4.5}
# dataset-wide padding lengths for AMIGOS (155 s at 18 fps / 128 Hz)
AMIGOS_TV_MAX = 2_800
AMIGOS_TP_MAX = 19_900

MANIFEST_KEYS = ("subject_id", "trial_id", "au_csv_path", "physio_path", "valence_raw", "arousal_raw", "dataset_tag")


def intensity_column(au: int) -> int:
    return N_AU + AU_IDS.index(au)


@dataclass(frozen=True)
class Trial:
    subject_id: str
    trial_id: str
    video_feats: np.ndarray
    physio: np.ndarray
    valence_raw: float
    arousal_raw: float
    dataset_tag: str = "synthetic"

    def __post_init__(self):
        v = np.asarray(self.video_feats, dtype=np.float64)
        p = np.asarray(self.physio, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != VIDEO_WIDTH:
            raise ValidationError(f"trial {self.trial_id}: video features must be [T, {VIDEO_WIDTH}], got {v.shape}")
        if p.ndim != 2 or p.shape[1] != PHYSIO_WIDTH:
            raise ValidationError(f"trial {self.trial_id}: physio must be [T, {PHYSIO_WIDTH}], got {p.shape}")
        if v.shape[0] == 0 or p.shape[0] == 0:
            raise ValidationError(f"trial {self.trial_id}: empty trial (video {v.shape[0]} rows, physio {p.shape[0]} rows)")
        for name in ("valence_raw", "arousal_raw"):
            val = getattr(self, name)
            if not 1.0 <= val <= 9.0:
                raise ValidationError(f"trial {self.trial_id}: {name}={val} outside [1, 9]")
        if self.dataset_tag not in DATASET_TAGS:
            raise ValidationError(f"trial {self.trial_id}: unknown dataset tag {self.dataset_tag!r}")
        object.__setattr__(self, "video_feats", v)
        object.__setattr__(self, "physio", p)

    @property
    def lengths(self) -> tuple[int, int]:
        return self.video_feats.shape[0], self.physio.shape[0]

    def with_features(self, video_feats: np.ndarray, physio: np.ndarray) -> "Trial":
        return Trial(self.subject_id, self.trial_id, video_feats, physio, self.valence_raw, self.arousal_raw, self.dataset_tag)


# ---------------------------------------------------------------------------
# file formats


def load_au_csv(path, counters: Optional[Counter] = None) -> np.ndarray:
    """Read an OpenFace AU/gaze CSV into a ``[frames, 42]`` matrix.

    Presence values are clamped to [0, 1] and rounded half-up to {0, 1};
    every value that needed rounding bumps ``counters["presence_rounded"]``.
    Intensities are clamped to [0, 5].
    """
    counters = counters if counters is not None else Counter()
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IOFailure(f"cannot read AU file {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        missing = [c for c in AU_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing AU columns: {', '.join(missing)}")
        idx = [header.index(c) for c in AU_COLUMNS]
        rows = []
        for row_no, row in enumerate(reader):
            if not row:
                continue
            try:
                rows.append([float(row[i]) for i in idx])
            except (ValueError, IndexError):
                raise ParseError(f"{path}: non-numeric or missing cell in data row {row_no}") from None
    m = np.asarray(rows, dtype=np.float64).reshape(-1, VIDEO_WIDTH)
    pres = np.clip(m[:, :N_AU], 0.0, 1.0)
    rounded = np.floor(pres + 0.5)
    n_rounded = int(np.count_nonzero(rounded != pres))
    if n_rounded:
        counters["presence_rounded"] += n_rounded
        log.warning("%s: rounded %d non-binary AU presence values", path, n_rounded)
    m[:, :N_AU] = rounded
    m[:, N_AU : 2 * N_AU] = np.clip(m[:, N_AU : 2 * N_AU], 0.0, 5.0)
    return m


def au_csv_text(feats: np.ndarray) -> str:
    lines = [",".join(("frame",) + AU_COLUMNS)]
    for i, row in enumerate(feats):
        lines.append(f"{i}," + ",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return f"{v:.8g}"


def read_signal_file(path) -> list[RawSignal]:
    """Load raw signals from ``.csv`` (``t,<channel>[,<channel>...]``) or ``.bin`` + ``.meta``.

    CSV sample rate is ``1 / median(diff(t))``. A ``.bin`` file holds
    row-major float64 pairs ``(t, value)``; its ``.meta`` sidecar has lines
    ``sample_rate_hz=<float>`` and ``channel=<ECG|PPG|EDA>``.
    """
    path = Path(path)
    if path.suffix == ".bin":
        meta_path = path.with_suffix(".meta")
        try:
            raw = np.fromfile(path, dtype="<f8")
            meta = dict(
                line.split("=", 1) for line in meta_path.read_text().splitlines() if "=" in line
            )
        except OSError as exc:
            raise IOFailure(f"cannot read {path}: {exc.strerror}") from exc
        if raw.size % 2:
            raise ParseError(f"{path}: odd number of float64 values for a two-column file")
        for key in ("sample_rate_hz", "channel"):
            if key not in meta:
                raise SchemaError(f"{meta_path}: missing key {key!r}")
        return [RawSignal(raw.reshape(-1, 2)[:, 1], float(meta["sample_rate_hz"]), meta["channel"].strip())]
    header, data = _read_numeric_csv(path)
    if not header or header[0] != "t" or len(header) < 2:
        raise SchemaError(f"{path}: header must be 't,<channel>[,...]', got {','.join(header)}")
    if data.shape[0] < 2:
        raise ValidationError(f"{path}: need at least two samples to infer the sample rate")
    rate = 1.0 / float(np.median(np.diff(data[:, 0])))
    return [RawSignal(data[:, i + 1], round(rate, 3), ch) for i, ch in enumerate(header[1:])]


def signal_csv(signals: Sequence[RawSignal]) -> str:
    n = min(len(s) for s in signals)
    rate = signals[0].sample_rate_hz
    t = np.arange(n) / rate
    vals = np.column_stack([s.samples[:n] for s in signals])
    lines = [",".join(["t"] + [s.channel for s in signals])]
    lines += [f"{ti:.10g}," + ",".join(_fmt(v) for v in row) for ti, row in zip(t, vals)]
    return "\n".join(lines) + "\n"


def _read_numeric_csv(path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path) as fh:
            header = [h.strip() for h in fh.readline().strip().split(",")]
            try:
                data = np.loadtxt(fh, delimiter=",", ndmin=2)
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}") from None
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror}") from exc
    if data.size == 0:
        data = np.zeros((0, len(header)))
    if data.shape[1] != len(header):
        raise ParseError(f"{path}: {data.shape[1]} columns but header names {len(header)}")
    return header, data


def load_physio_csv(path) -> np.ndarray:
    header, data = _read_numeric_csv(path)
    if len(header) != 3 or header[0] != "t" or header[1] not in ("ECG", "PPG") or header[2] != "EDA":
        raise SchemaError(f"{path}: physio header must be 't,ECG|PPG,EDA', got {','.join(header)}")
    return data[:, 1:3].copy()


def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {path}: {exc.strerror}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            raise ParseError(f"{path}:{lineno}: invalid JSON") from None
        missing = [k for k in MANIFEST_KEYS if k not in rec]
        if missing:
            raise SchemaError(f"{path}:{lineno}: missing keys {', '.join(missing)}")
        records.append(rec)
    return records


def manifest_line(rec: dict) -> str:
    return json.dumps({k: rec[k] for k in MANIFEST_KEYS}, sort_keys=False)


def load_corpus(manifest_path, counters: Optional[Counter] = None) -> list[Trial]:
    base = Path(manifest_path).parent
    trials = []
    for rec in read_manifest(manifest_path):
        video = load_au_csv(base / rec["au_csv_path"], counters)
        physio = load_physio_csv(base / rec["physio_path"])
        trials.append(
            Trial(
                str(rec["subject_id"]),
                str(rec["trial_id"]),
                video,
                physio,
                float(rec["valence_raw"]),
                float(rec["arousal_raw"]),
                rec["dataset_tag"],
            )
        )
    return trials


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std. Only ``fit`` produces one; ``apply`` never refits."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, matrices: Iterable[np.ndarray]) -> "ChannelStats":
        stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in matrices], axis=0)
        if stacked.shape[0] == 0:
            raise ValidationError("cannot fit normalization statistics on zero rows")
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        if np.any(flat):
            log.warning("zero-variance channel(s) %s: using std=1", np.flatnonzero(flat).tolist())
            std = np.where(flat, 1.0, std)
        return cls(mean, std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def normalize(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance per column using the column's own statistics."""
    return ChannelStats.fit([x]).apply(x)


@dataclass(frozen=True)
class Normalizer:
    video: ChannelStats
    physio: ChannelStats

    @classmethod
    def fit(cls, train_trials: Sequence[Trial]) -> "Normalizer":
        """Statistics over the un-padded rows of the training trials only."""
        return cls(
            ChannelStats.fit(t.video_feats for t in train_trials),
            ChannelStats.fit(t.physio for t in train_trials),
        )

    def transform(self, trial: Trial) -> Trial:
        return trial.with_features(self.video.apply(trial.video_feats), self.physio.apply(trial.physio))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "norm.video.mean": self.video.mean,
            "norm.video.std": self.video.std,
            "norm.physio.mean": self.physio.mean,
            "norm.physio.std": self.physio.std,
        }

    @classmethod
    def from_arrays(cls, arrays: dict) -> "Normalizer":
        return cls(
            ChannelStats(arrays["norm.video.mean"], arrays["norm.video.std"]),
            ChannelStats(arrays["norm.physio.mean"], arrays["norm.physio.std"]),
        )


# ---------------------------------------------------------------------------
# labels, padding, folds


def binarize_label(raw: float, threshold: float) -> int:
    if not 1.0 <= raw <= 9.0 or math.isnan(raw):
        raise ValidationError(f"raw label {raw} outside [1, 9]")
    return 0 if raw <= threshold else 1


@dataclass(frozen=True)
class PaddedBatch:
    video: np.ndarray  # [B, TV_max, 42]
    physio: np.ndarray  # [B, TP_max, 2]
    labels: np.ndarray  # [B, 2] as (valence, arousal)
    true_lengths: tuple  # per trial (TV_ij, TP_ij)
    trial_ids: tuple = ()

    def __len__(self) -> int:
        return self.video.shape[0]

    def unpad(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.video[i, :tv], self.physio[i, :tp]) for i, (tv, tp) in enumerate(self.true_lengths)]


def pad_batch(trials: Sequence[Trial], tv_max: int, tp_max: int, thresholds: tuple[float, float] = (4.5, 4.5)) -> PaddedBatch:
    """Zero-pad every trial to ``[tv_max, 42]`` / ``[tp_max, 2]`` and binarize labels."""
    if not trials:
        raise ValidationError("cannot build a batch from zero trials")
    b = len(trials)
    video = np.zeros((b, tv_max, VIDEO_WIDTH))
    physio = np.zeros((b, tp_max, PHYSIO_WIDTH))
    labels = np.zeros((b, 2))
    lengths = []
    for i, t in enumerate(trials):
        tv, tp = t.lengths
        if tv > tv_max or tp > tp_max:
            raise ValidationError(
                f"trial {t.trial_id}: lengths ({tv}, {tp}) exceed padding limits ({tv_max}, {tp_max})"
            )
        video[i, :tv] = t.video_feats
        physio[i, :tp] = t.physio
        labels[i] = (binarize_label(t.valence_raw, thresholds[0]), binarize_label(t.arousal_raw, thresholds[1]))
        lengths.append((tv, tp))
    return PaddedBatch(video, physio, labels, tuple(lengths), tuple(t.trial_id for t in trials))


def scan_max_lengths(trials: Sequence[Trial]) -> tuple[int, int]:
    if not trials:
        raise ValidationError("empty corpus")
    return max(t.lengths[0] for t in trials), max(t.lengths[1] for t in trials)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple  # tuple of sorted subject-id tuples

    def __post_init__(self):
        seen: set = set()
        for f in self.folds:
            overlap = seen.intersection(f)
            if overlap:
                raise ValidationError(f"subjects {sorted(overlap)} appear in more than one fold")
            seen.update(f)
        sizes = [len(f) for f in self.folds]
        if len(self.folds) != self.k or max(sizes) - min(sizes) > 1:
            raise ValidationError(f"fold sizes {sizes} are not a balanced {self.k}-way split")

    @property
    def subjects(self) -> set:
        return set().union(*self.folds)

    def split(self, i: int) -> tuple[set, set]:
        test = set(self.folds[i])
        return self.subjects - test, test


def make_folds(subjects: Iterable, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle the distinct subjects with ``seed`` and deal them into ``k`` near-equal folds."""
    uniq = sorted(set(str(s) for s in subjects))
    if k < 2:
        raise ValidationError(f"need at least 2 folds, got {k}")
    if len(uniq) < k:
        raise ValidationError(f"{len(uniq)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(uniq))
    parts = np.array_split(order, k)
    return FoldPlan(k, tuple(tuple(sorted(uniq[i] for i in part)) for part in parts))


def split_trials(trials: Sequence[Trial], plan: FoldPlan, i: int) -> tuple[list[Trial], list[Trial]]:
    train_s, test_s = plan.split(i)
    train = [t for t in trials if t.subject_id in train_s]
    test = [t for t in trials if t.subject_id in test_s]
    return train, test
