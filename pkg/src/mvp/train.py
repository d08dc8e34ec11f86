"""Training, subject-independent cross-validation and weighted-F1 reporting."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Normalizer, Trial, binarize_label, make_folds, pad_batch, scan_max_lengths, split_trials
from .errors import ConfigError, NumericError, ValidationError
from .fusion import MODES, MVPConfig, init_mvp, mvp_forward
from .optim import AdamState, adam_step
from .util import atomic_write

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    dataset_tag: str = "synthetic"
    threshold_valence: float = 4.5
    threshold_arousal: float = 4.5
    folds: int = 5
    patience: int = 5
    min_delta: float = 1e-4
    mode: str = "fused"
    model: MVPConfig = field(default_factory=MVPConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("threshold_valence", "threshold_arousal"):
            if not 1.0 <= getattr(self, name) <= 9.0:
                raise ConfigError(f"{name} must lie in [1, 9]")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    @property
    def thresholds(self) -> tuple[float, float]:
        return self.threshold_valence, self.threshold_arousal


# ---------------------------------------------------------------------------
# metrics


def weighted_f1(preds: Sequence[int], targets: Sequence[int]) -> float:
    """Per-class F1 averaged with weights proportional to class support.

    A class with no true and no predicted members has F1 = 0 (and weight 0).
    """
    p = np.asarray(preds, dtype=np.int64).ravel()
    t = np.asarray(targets, dtype=np.int64).ravel()
    if p.size == 0 or p.size != t.size:
        raise ValidationError(f"weighted_f1 needs equal non-empty inputs, got {p.size} and {t.size}")
    total = 0.0
    for c in np.union1d(p, t):
        tp = np.count_nonzero((p == c) & (t == c))
        fp = np.count_nonzero((p == c) & (t != c))
        fn = np.count_nonzero((p != c) & (t == c))
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        total += f1 * np.count_nonzero(t == c)
    return total / t.size


# ---------------------------------------------------------------------------
# reports


@dataclass
class FoldReport:
    fold_index: int
    f1w_valence: float
    f1w_arousal: float
    support_valence: list  # test trials per class [n0, n1]
    support_arousal: list
    epoch_losses: list
    test_subjects: list = field(default_factory=list)
    mode: str = "fused"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CVSummary:
    mode: str
    folds: list  # list[FoldReport]
    mean_valence: float
    std_valence: float
    mean_arousal: float
    std_arousal: float

    @classmethod
    def from_reports(cls, reports: Sequence[FoldReport], mode: str) -> "CVSummary":
        v = np.array([r.f1w_valence for r in reports])
        a = np.array([r.f1w_arousal for r in reports])
        return cls(mode, list(reports), float(v.mean()), float(v.std()), float(a.mean()), float(a.std()))

    def to_json(self) -> str:
        d = {
            "mode": self.mode,
            "valence": {"mean": self.mean_valence, "std": self.std_valence},
            "arousal": {"mean": self.mean_arousal, "std": self.std_arousal},
            "folds": [r.to_dict() for r in self.folds],
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CVSummary":
        d = json.loads(text)
        return cls(
            d["mode"],
            [FoldReport(**r) for r in d["folds"]],
            d["valence"]["mean"],
            d["valence"]["std"],
            d["arousal"]["mean"],
            d["arousal"]["std"],
        )

    def to_text(self) -> str:
        lines = [f"mode: {self.mode}", "fold  f1w_valence  f1w_arousal  epochs"]
        for r in self.folds:
            lines.append(f"{r.fold_index:>4}  {r.f1w_valence:11.4f}  {r.f1w_arousal:11.4f}  {len(r.epoch_losses):>6}")
        lines.append(f"valence: {100 * self.mean_valence:.1f} +- {100 * self.std_valence:.1f}")
        lines.append(f"arousal: {100 * self.mean_arousal:.1f} +- {100 * self.std_arousal:.1f}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# training


def _batch_arrays(trials: Sequence[Trial], cfg: RunConfig):
    b = pad_batch(trials, cfg.model.video.input_time_max, cfg.model.physio.input_time_max, cfg.thresholds)
    return b.video, b.physio, b.labels


def predict_logits(trials: Sequence[Trial], params, cfg: RunConfig, mode: Optional[str] = None) -> np.ndarray:
    """Inference logits ``[N, 2]``; runs without a tape, so nothing can be backpropagated."""
    if ad.is_recording():
        raise ConfigError("evaluation must not run inside a gradient tape")
    mode = mode or cfg.mode
    out = []
    for i in range(0, len(trials), cfg.batch_size):
        chunk = trials[i : i + cfg.batch_size]
        video, physio, _ = _batch_arrays(chunk, cfg)
        if mode == "video_only":
            physio = None
        elif mode == "physio_only":
            video = None
        out.append(mvp_forward(video, physio, params, cfg.model, mode=mode, training=False).data)
    return np.concatenate(out, axis=0)


def evaluate(trials: Sequence[Trial], params, cfg: RunConfig, mode: Optional[str] = None) -> dict:
    logits = predict_logits(trials, params, cfg, mode)
    preds = (logits > 0).astype(int)
    yv = [binarize_label(t.valence_raw, cfg.threshold_valence) for t in trials]
    ya = [binarize_label(t.arousal_raw, cfg.threshold_arousal) for t in trials]
    return {
        "f1w_valence": weighted_f1(preds[:, 0], yv),
        "f1w_arousal": weighted_f1(preds[:, 1], ya),
        "support_valence": [yv.count(0), yv.count(1)],
        "support_arousal": [ya.count(0), ya.count(1)],
    }


def with_corpus_lengths(cfg: RunConfig, trials: Sequence[Trial]) -> RunConfig:
    """Fill zero ``input_time_max`` entries from the longest trial in ``trials``."""
    tv, tp = scan_max_lengths(trials)
    m = cfg.model
    video = m.video if m.video.input_time_max else replace(m.video, input_time_max=tv)
    physio = m.physio if m.physio.input_time_max else replace(m.physio, input_time_max=tp)
    return replace(cfg, model=replace(m, video=video, physio=physio))


def fit(train_trials: Sequence[Trial], cfg: RunConfig, seed: int):
    """Train a fresh model on already-normalized trials. Returns ``(params, epoch_losses)``."""
    params = init_mvp(cfg.model, seed)
    rng = np.random.default_rng(seed + 1)
    state = AdamState()
    losses: list[float] = []
    best = np.inf
    stale = 0
    step = 0
    n = len(train_trials)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            chunk = [train_trials[i] for i in order[start : start + cfg.batch_size]]
            video, physio, labels = _batch_arrays(chunk, cfg)
            step += 1
            with ad.Tape() as tape:
                logits = mvp_forward(video, physio, params, cfg.model, mode=cfg.mode, training=True, rng=rng)
                loss = ad.bce_loss(logits, labels)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss at step {step}")
            tape.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            params = adam_step(params, grads, state, cfg.lr)
            tape.reset()
            total += loss.item() * len(chunk)
        losses.append(total / n)
        log.info("epoch %d loss %.5f", epoch + 1, losses[-1])
        if epoch == 2 and not losses[2] < losses[0]:
            log.warning("training loss did not decrease over the first 3 epochs: %s", losses[:3])
        if losses[-1] < best - cfg.min_delta:
            best = losses[-1]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop after epoch %d (loss plateau)", epoch + 1)
                break
    return params, losses


def train_fold(
    train_trials: Sequence[Trial],
    test_trials: Sequence[Trial],
    cfg: RunConfig,
    fold_index: int = 0,
    out_dir=None,
) -> FoldReport:
    train_s = {t.subject_id for t in train_trials}
    test_s = {t.subject_id for t in test_trials}
    if train_s & test_s:
        raise ValidationError(f"subjects in both train and test: {sorted(train_s & test_s)}")
    if not train_trials or not test_trials:
        raise ValidationError("train and test splits must both be non-empty")
    cfg = with_corpus_lengths(cfg, list(train_trials) + list(test_trials))
    norm = Normalizer.fit(train_trials)
    train_n = [norm.transform(t) for t in train_trials]
    test_n = [norm.transform(t) for t in test_trials]
    params, losses = fit(train_n, cfg, cfg.seed + 1000 * fold_index)
    scores = evaluate(test_n, params, cfg)
    report = FoldReport(
        fold_index=fold_index,
        epoch_losses=losses,
        test_subjects=sorted(test_s),
        mode=cfg.mode,
        **scores,
    )
    if out_dir is not None:
        save_model(Path(out_dir) / f"fold{fold_index}.ckpt", params, norm, cfg, fold_index)
    return report


def save_model(path, params, norm: Normalizer, cfg: RunConfig, fold_index: int = 0) -> None:
    from .config import run_config_to_dict

    arrays = {k: p.data for k, p in params.items()}
    arrays.update(norm.arrays())
    save_checkpoint(path, arrays, {"config": run_config_to_dict(cfg), "fold_index": fold_index})


def load_model(path):
    from .config import run_config_from_dict

    arrays, meta = load_checkpoint(path)
    cfg = run_config_from_dict(meta["config"])
    norm = Normalizer.from_arrays(arrays)
    params = {k: ad.Tensor(v, name=k) for k, v in arrays.items() if not k.startswith("norm.")}
    return params, norm, cfg


def _run_fold(args):
    trials, plan, i, cfg, out_dir = args
    train, test = split_trials(trials, plan, i)
    return train_fold(train, test, cfg, fold_index=i, out_dir=out_dir)


def cross_validate(trials: Sequence[Trial], cfg: RunConfig, out_dir=None, workers: Optional[int] = None) -> CVSummary:
    """Subject-independent k-fold CV. Folds run in ``workers`` processes (default ``$MVP_THREADS`` or 1)."""
    trials = list(trials)
    cfg = with_corpus_lengths(cfg, trials)
    plan = make_folds([t.subject_id for t in trials], cfg.folds, cfg.seed)
    jobs = [(trials, plan, i, cfg, out_dir) for i in range(cfg.folds)]
    workers = workers or int(os.environ.get("MVP_THREADS", "1") or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_fold, jobs))
    else:
        reports = [_run_fold(j) for j in jobs]
    summary = CVSummary.from_reports(reports, cfg.mode)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write(out / f"summary_{cfg.mode}.json", summary.to_json())
        atomic_write(out / f"summary_{cfg.mode}.txt", summary.to_text())
    return summary


def ablation_modes(trials: Sequence[Trial], cfg: RunConfig, mode: str, out_dir=None, workers: Optional[int] = None) -> CVSummary:
    if mode not in MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {MODES}")
    return cross_validate(trials, replace(cfg, mode=mode), out_dir=out_dir, workers=workers)
