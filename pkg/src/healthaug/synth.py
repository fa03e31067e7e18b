"""Synthetic labelled corpus of health-acoustic-like events.

Classes cycle through three event families, each confined to its own
frequency band so the classes separate linearly in log-mel space:

* tone bursts (voiced, throat-clearing like)
* band-passed noise bursts with a sharp attack (cough like)
* slowly amplitude-modulated low-passed noise (breathing like)

Classes beyond three reuse a family with the band shifted upwards.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .audio_io import DEFAULT_SAMPLE_RATE, ClipManifestEntry, Waveform, save_wav, write_manifest

CLIP_SECONDS = 2.0
NOISE_FLOOR = 0.01


def _band(kind: int, shift: int) -> tuple[float, float]:
    base = {0: (300.0, 600.0), 1: (1500.0, 3000.0), 2: (150.0, 900.0)}[kind]
    factor = 1.6**shift
    return base[0] * factor, min(base[1] * factor, 7000.0)


def _tone_bursts(n, rate, rng, band):
    out = np.zeros(n)
    for _ in range(int(rng.integers(1, 4))):
        length = int(rng.uniform(0.15, 0.4) * rate)
        start = int(rng.integers(0, n - length))
        t = np.arange(length) / rate
        f0 = rng.uniform(*band)
        burst = np.sin(2 * np.pi * f0 * t) + 0.3 * np.sin(2 * np.pi * 2 * f0 * t)
        out[start : start + length] += rng.uniform(0.2, 0.5) * np.hanning(length) * burst
    return out


def _noise_bursts(n, rate, rng, band):
    sos = butter(4, band, btype="bandpass", fs=rate, output="sos")
    out = np.zeros(n)
    for _ in range(int(rng.integers(1, 4))):
        length = int(rng.uniform(0.15, 0.35) * rate)
        start = int(rng.integers(0, n - length))
        t = np.arange(length) / rate
        env = (1 - np.exp(-t / 0.005)) * np.exp(-t / rng.uniform(0.05, 0.12))
        burst = sosfilt(sos, rng.standard_normal(length))
        out[start : start + length] += rng.uniform(1.0, 2.5) * env * burst
    return out


def _modulated_noise(n, rate, rng, band):
    sos = butter(4, band, btype="bandpass", fs=rate, output="sos")
    t = np.arange(n) / rate
    rate_hz = rng.uniform(0.3, 0.6)
    env = 0.5 * (1 - np.cos(2 * np.pi * rate_hz * t + rng.uniform(0, 2 * np.pi)))
    return rng.uniform(0.6, 1.2) * env * sosfilt(sos, rng.standard_normal(n))


_FAMILIES = (_tone_bursts, _noise_bursts, _modulated_noise)


def synth_clip(label: int, rng: np.random.Generator, rate: int = DEFAULT_SAMPLE_RATE,
               seconds: float = CLIP_SECONDS) -> Waveform:
    n = int(round(seconds * rate))
    kind, shift = label % 3, label // 3
    x = _FAMILIES[kind](n, rate, rng, _band(kind, shift))
    x += NOISE_FLOOR * rng.standard_normal(n)
    return Waveform(np.clip(x, -0.99, 0.99), rate)


def synth_corpus(n_classes: int, clips_per_class: int, out_dir, seed: int = 0,
                 split_fractions=(0.5, 0.25, 0.25)) -> list[ClipManifestEntry]:
    """Write ``n_classes * clips_per_class`` WAV clips plus ``manifest.tsv``.

    Tasks are one-vs-rest columns ``class_<k>``. Within every class the clips
    are assigned to train / probe_train / probe_eval by ``split_fractions``.
    Output bytes depend only on the arguments.
    """
    if n_classes < 1 or clips_per_class < 1:
        raise ValueError("class count and clips per class must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    tasks = [f"class_{k}" for k in range(n_classes)]
    n_train = int(round(split_fractions[0] * clips_per_class))
    n_probe = int(round(split_fractions[1] * clips_per_class))

    entries = []
    for k in range(n_classes):
        order = np.random.default_rng([seed, k, 1 << 20]).permutation(clips_per_class)
        split_of = {}
        for pos, i in enumerate(order):
            split_of[int(i)] = "train" if pos < n_train else "probe_train" if pos < n_train + n_probe else "probe_eval"
        for i in range(clips_per_class):
            rel = f"clips/class{k}_{i:04d}.wav"
            save_wav(synth_clip(k, np.random.default_rng([seed, k, i])), out_dir / rel)
            labels = {t: int(j == k) for j, t in enumerate(tasks)}
            entries.append(ClipManifestEntry(rel, 0.0, CLIP_SECONDS, split_of[i], labels))
    write_manifest(entries, out_dir / "manifest.tsv", tasks)
    return entries
