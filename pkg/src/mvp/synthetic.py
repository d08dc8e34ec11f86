"""Synthetic trials with planted valence/arousal structure.

Each trial gets a latent binary (valence, arousal) pair. Arousal shortens the
heartbeat period (0.6 s vs 1.0 s) and raises the rate of skin-conductance
responses (0.2/s vs 0.05/s, instant rise, 4 s exponential decay). Valence lifts
the AU6 and AU12 intensity channels by +1.0. Every subject also carries its
own random offsets (heart-period scale, EDA tonic level and gain, AU
baselines), so leaking subjects across a split would inflate scores.

Within a subject the four (valence, arousal) quadrants are dealt out evenly,
keeping both label axes balanced by construction.
"""

from __future__ import annotations

import numpy as np
from scipy import signal as sps
from scipy.ndimage import uniform_filter1d

from .data import N_AU, VIDEO_WIDTH, Trial, intensity_column
from .errors import ValidationError

PHYSIO_RATE_HZ = 128.0
VIDEO_FPS = 18.0
MIN_SECONDS = 60.0
MAX_SECONDS = 155.0
PERIOD_HIGH_AROUSAL = 0.6
PERIOD_LOW_AROUSAL = 1.0
SCR_RATE_HIGH = 0.2
SCR_RATE_LOW = 0.05
SCR_DECAY_S = 4.0
VALENCE_AUS = (6, 12)
VALENCE_SHIFT = 1.0
EDA_TONIC = 2.0
EDA_TONIC_SD = 0.05
AU_BASE = 0.6
AU_BASE_SD = 0.3


def _ecg(rng, n: int, fs: float, period: float) -> np.ndarray:
    """Gaussian R-peak plus T-wave at every beat, with baseline wander and white noise."""
    duration = n / fs
    beats = []
    t = rng.uniform(0.0, period)
    while t < duration:
        beats.append(t)
        t += period * (1.0 + 0.03 * rng.standard_normal())
    impulses = np.zeros(n)
    idx = np.round(np.asarray(beats) * fs).astype(int)
    np.add.at(impulses, idx[idx < n], 1.0)
    tk = np.arange(-0.1, 0.45, 1.0 / fs)
    template = np.exp(-0.5 * (tk / 0.015) ** 2) + 0.25 * np.exp(-0.5 * ((tk - 0.25) / 0.05) ** 2)
    lead = int(round(0.1 * fs))
    wave = np.convolve(impulses, template)[lead : lead + n]
    tt = np.arange(n) / fs
    wander = 0.1 * np.sin(2 * np.pi * 0.25 * tt + rng.uniform(0, 2 * np.pi))
    return wave + wander + 0.03 * rng.standard_normal(n)


def _eda(rng, n: int, fs: float, rate: float, tonic: float, gain: float) -> np.ndarray:
    events = rng.random(n) < rate / fs
    amps = np.where(events, rng.uniform(0.3, 0.7, n) * gain, 0.0)
    phasic = sps.lfilter([1.0], [1.0, -np.exp(-1.0 / (SCR_DECAY_S * fs))], amps)
    tt = np.arange(n) / fs
    drift = 0.05 * np.sin(2 * np.pi * tt / 90.0 + rng.uniform(0, 2 * np.pi))
    return tonic + phasic + drift + 0.01 * rng.standard_normal(n)


def _video(rng, n: int, valence: int, au_base: np.ndarray) -> np.ndarray:
    win = int(VIDEO_FPS)
    noise = uniform_filter1d(rng.standard_normal((n, N_AU)), size=win, axis=0, mode="nearest") * 1.5
    intensity = au_base + noise
    if valence:
        for au in VALENCE_AUS:
            intensity[:, intensity_column(au) - N_AU] += VALENCE_SHIFT
    intensity = np.clip(intensity, 0.0, 5.0)
    presence = (intensity > 1.0).astype(np.float64)
    gaze = uniform_filter1d(rng.standard_normal((n, 6)), size=win, axis=0, mode="nearest") * 0.2
    gaze[:, 2] -= 0.95
    gaze[:, 5] -= 0.95
    out = np.concatenate([presence, intensity, gaze], axis=1)
    assert out.shape[1] == VIDEO_WIDTH
    return out


def generate_synthetic(n_subjects: int, trials_per_subject: int, seed: int) -> list[Trial]:
    """Deterministic corpus of ``n_subjects * trials_per_subject`` trials."""
    if n_subjects < 5:
        raise ValidationError(f"need at least 5 subjects, got {n_subjects}")
    if trials_per_subject < 1:
        raise ValidationError(f"need at least 1 trial per subject, got {trials_per_subject}")
    rng = np.random.default_rng(seed)
    quadrants = [(0, 0), (0, 1), (1, 0), (1, 1)]
    trials = []
    for s in range(n_subjects):
        subject = f"S{s + 1:02d}"
        period_scale = rng.uniform(0.93, 1.07)
        tonic = EDA_TONIC + EDA_TONIC_SD * rng.standard_normal()
        eda_gain = rng.uniform(0.8, 1.2)
        ecg_gain = rng.uniform(0.9, 1.1)
        au_base = np.clip(AU_BASE + AU_BASE_SD * rng.standard_normal(N_AU), 0.1, None)
        deck = [quadrants[i % 4] for i in range(trials_per_subject)]
        deck = [deck[i] for i in rng.permutation(trials_per_subject)]
        for j, (valence, arousal) in enumerate(deck):
            seconds = rng.uniform(MIN_SECONDS, MAX_SECONDS)
            n_p = int(round(seconds * PHYSIO_RATE_HZ))
            n_v = int(round(seconds * VIDEO_FPS))
            period = (PERIOD_HIGH_AROUSAL if arousal else PERIOD_LOW_AROUSAL) * period_scale
            rate = SCR_RATE_HIGH if arousal else SCR_RATE_LOW
            physio = np.column_stack(
                [
                    ecg_gain * _ecg(rng, n_p, PHYSIO_RATE_HZ, period),
                    _eda(rng, n_p, PHYSIO_RATE_HZ, rate, tonic, eda_gain),
                ]
            )
            video = _video(rng, n_v, valence, au_base)
            v_raw = rng.uniform(5.0, 9.0) if valence else rng.uniform(1.0, 4.5)
            a_raw = rng.uniform(5.0, 9.0) if arousal else rng.uniform(1.0, 4.5)
            trials.append(Trial(subject, f"{subject}_T{j + 1:02d}", video, physio, round(v_raw, 2), round(a_raw, 2), "synthetic"))
    return trials
