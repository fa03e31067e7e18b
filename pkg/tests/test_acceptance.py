"""Acceptance criteria 1-9; each test prints one PASS/FAIL line.

Criterion 7 trains for 5000 steps twice and takes several minutes; it is
marked ``slow`` (deselect with ``-m "not slow"``).
"""

import csv
import itertools
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, RATE, peak_hz
from healthaug.audio_io import Waveform, segment_clips
from healthaug.augment import (
    BEST_PARAMS,
    KINDS,
    SPEC_AUGMENT,
    AugmentationError,
    AugmentationSpec,
    add_noise,
    apply_spec,
    brownian_tape_speed,
    circular_time_shift,
    crop_and_pad,
    pitch_shift,
    scale_gain,
    spec_augment,
    time_stretch,
)
from healthaug.cli import dispatch
from healthaug.contrastive import ema_curve, nt_xent_loss, select_checkpoint_ema
from healthaug.encoder import EncoderConfig, ReferenceEncoder
from healthaug.evalkit import auroc, delong_ci, embed_clip_sliding, mean_pool, read_report
from healthaug.experiments import enumerate_chains, enumerate_param_grid
from healthaug.features import LogMelSpectrogram, Spectrogram


def record(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


# --- 1: best parameters and grid sizes -----------------------------------------

def test_criterion_1_parameter_table():
    t0 = time.perf_counter()
    for kind in KINDS:
        AugmentationSpec.best(kind)
    counts = {kind: len(enumerate_param_grid(kind)) for kind in KINDS}
    expected = dict(zip(KINDS, (12, 18, 6, 12, 12, 12, 2, 32)))
    bad = [("CropAndPad", "min_fraction", "max_fraction"), ("Scaling", "min_factor", "max_factor"),
           ("PitchShift", "min_factor", "max_factor"), ("TimeStretch", "min_stretch", "max_stretch")]
    rejected = 0
    for kind, lo, hi in bad:
        for a, b in ((0.5, 0.5), (0.75, 0.25)):
            try:
                AugmentationSpec(kind, 1.0, {lo: a, hi: b})
            except AugmentationError:
                rejected += 1
    elapsed = time.perf_counter() - t0
    ok = counts == expected and rejected == 2 * len(bad) and elapsed < 1.0
    record(1, ok, f"grid sizes {list(counts.values())}, {rejected}/{2 * len(bad)} max<=min specs rejected, "
                  f"{elapsed * 1000:.1f} ms")
    assert ok


# --- 2: zero-intensity identities ----------------------------------------------

def _identity_case(rng):
    n = int(rng.integers(1024, 8000))
    kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind == SPEC_AUGMENT:
        values = rng.standard_normal((80, int(rng.integers(10, 200))))
        s = Spectrogram(values, 100.0)
        if rng.random() < 0.5:
            out = apply_spec(AugmentationSpec(kind, 0.0, BEST_PARAMS[kind][1]), s, rng)
        else:
            out = spec_augment(s, int(rng.integers(0, 40)), 0, int(rng.integers(0, 30)), 0, rng)
        return np.array_equal(out.values, values)

    vocoder_kind = kind in ("PitchShift", "TimeStretch")
    if vocoder_kind and rng.random() < 0.75:
        freq = float(rng.uniform(200.0, 4000.0))
        w = Waveform(0.5 * np.sin(2 * np.pi * freq * np.arange(n) / RATE))
        if kind == "PitchShift":
            y = pitch_shift(w, 0.5, 1.5, rng, factor=1.0)
        else:
            y = time_stretch(w, 0.5, 1.5, rng, stretch=1.0)
        resolution = RATE / n
        return len(y) == n and abs(peak_hz(y.samples) - freq) <= resolution

    w = Waveform(rng.standard_normal(n))
    x = w.samples.copy()
    if vocoder_kind or rng.random() < 0.25:
        y = apply_spec(AugmentationSpec(kind, 0.0, BEST_PARAMS[kind][1]), w, rng)
    elif kind == "CropAndPad":
        y = crop_and_pad(w, 0.1, 0.5, rng, fraction=0.0)
    elif kind == "Noising":
        y = add_noise(w, 0.0, 0.0, rng)
    elif kind == "BrownianTapeSpeed":
        y = brownian_tape_speed(w, 0.0, rng)
    elif kind == "Scaling":
        y = scale_gain(w, 0.25, 1.75, rng, gain=1.0)
    else:
        y = circular_time_shift(w, rng, shift=0)
    return np.array_equal(y.samples, x)


def test_criterion_2_identity_suite():
    rng = np.random.default_rng(20)
    failures = sum(not _identity_case(rng) for _ in range(1000))
    ok = failures == 0
    record(2, ok, f"{1000 - failures}/1000 zero-intensity cases are identities")
    assert ok


# --- 3: conservation ---------------------------------------------------------------

def _energy(x):
    return sum(Fraction(float(v)) ** 2 for v in x)


def test_criterion_3_conservation_suite():
    rng = np.random.default_rng(30)
    failures = []
    for case in range(1000):
        n = int(rng.integers(16, 400))
        # PCM16-grid samples and a gain with 20 fractional bits keep g*x exact in float64
        x = np.round(rng.uniform(-1, 1, n) * 32768) / 32768
        w = Waveform(x)

        y = circular_time_shift(w, rng).samples
        if not (np.array_equal(np.sort(y), np.sort(x)) and math.fsum(y**2) == math.fsum(x**2)):
            failures.append((case, "shift"))

        g = np.round(rng.uniform(0.25, 1.75) * 2**20) / 2**20
        z = scale_gain(w, 0.25, 1.75, rng, gain=g).samples
        if _energy(z) != Fraction(g) ** 2 * _energy(x):
            failures.append((case, "gain"))

        tmax, tcount = int(rng.integers(0, 40)), int(rng.integers(0, 25))
        fmax, fcount = int(rng.integers(0, 25)), int(rng.integers(0, 6))
        values = rng.uniform(1.0, 2.0, (80, 198))
        out = spec_augment(Spectrogram(values, 100.0), tmax, tcount, fmax, fcount, rng).values
        t_only = spec_augment(Spectrogram(values, 100.0), tmax, tcount, 0, 0, rng).values
        f_only = spec_augment(Spectrogram(values, 100.0), 0, 0, fmax, fcount, rng).values
        zeroed_frames = int(np.sum(np.all(t_only == 0, axis=0)))
        zeroed_bins = int(np.sum(np.all(f_only == 0, axis=1)))
        changed = out != values
        if (zeroed_frames > tcount * tmax or zeroed_bins > fcount * fmax or np.any(out[changed] != 0)
                or np.sum(changed) > 80 * tcount * tmax + 198 * fcount * fmax):
            failures.append((case, "specaugment"))
    ok = not failures
    record(3, ok, f"{3000 - len(failures)}/3000 checks (1000 cases x shift/gain/mask) hold exactly")
    assert ok, failures[:5]


# --- 4: NT-Xent closed forms and gradient ---------------------------------------------

def _central_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def test_criterion_4_nt_xent():
    err_ident = abs(nt_xent_loss(np.ones((4, 8)), 0.1)[0] - math.log(3))
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    err_orth = abs(nt_xent_loss(z, 0.5)[0] - math.log(1 + 2 * math.exp(-2)))
    rng = np.random.default_rng(40)
    worst = 0.0
    for _ in range(20):
        z = rng.standard_normal((2 * int(rng.integers(2, 6)), int(rng.integers(2, 10))))
        tau = float(rng.uniform(0.1, 1.0))
        _, g = nt_xent_loss(z, tau)
        num = _central_diff(lambda: nt_xent_loss(z, tau)[0], z)
        worst = max(worst, np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-300))
    ok = err_ident <= 1e-9 and err_orth <= 1e-9 and worst <= 1e-4
    record(4, ok, f"|loss-ln3|={err_ident:.1e}, |loss-ln(1+2e^-2)|={err_orth:.1e}, "
                  f"max gradient rel. error {worst:.1e} over 20 instances")
    assert ok


# --- 5: AUROC oracle equivalence ------------------------------------------------------

def _brute(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_criterion_5_auroc_oracle():
    rng = np.random.default_rng(50)
    bad = 0
    for _ in range(200):
        n = int(rng.integers(2, 13))
        labels = rng.permutation(np.r_[[0, 1], rng.integers(0, 2, n - 2)])
        scores = rng.integers(-4, 5, n).astype(float) if rng.random() < 0.5 else rng.standard_normal(n)
        a = auroc(scores, labels)
        ci = delong_ci(scores, labels)
        if a != _brute(scores, labels) or a + auroc(-scores, labels) != 1.0:
            bad += 1
        elif ci.auroc != a or not ci.ci_low <= a <= ci.ci_high:
            bad += 1
    sep = delong_ci([0.9, 0.8, 0.7, 0.3, 0.2, 0.1], [1, 1, 1, 0, 0, 0])
    ok = bad == 0 and (sep.ci_low, sep.ci_high) == (1.0, 1.0)
    record(5, ok, f"{200 - bad}/200 instances exact vs brute force with antisymmetry and DeLong containment; "
                  f"separated CI [{sep.ci_low}, {sep.ci_high}]")
    assert ok


# --- 6: chain enumeration ----------------------------------------------------------------

def test_criterion_6_chains():
    t0 = time.perf_counter()
    plain = enumerate_chains(allow_repeat=False)
    rep = enumerate_chains(allow_repeat=True)
    elapsed = time.perf_counter() - t0
    singles = [c for c in plain if len(c) == 1]
    pairs = [c for c in plain if len(c) == 2]
    pairs_rep = [c for c in rep if len(c) == 2]
    spec_last = all(SPEC_AUGMENT not in c.kinds[:-1] for c in rep)
    has_best = ("CircularTimeShift", "TimeStretch") in {c.kinds for c in pairs}
    ok = (len(singles), len(pairs), len(pairs_rep)) == (8, 49, 56) and spec_last and has_best and elapsed < 1.0
    record(6, ok, f"{len(singles)} singles, {len(pairs)} pairs ({len(pairs_rep)} with repeats), "
                  f"SpecAugment-last {spec_last}, best chain present {has_best}, {elapsed * 1000:.1f} ms")
    assert ok


# --- 7: end-to-end desk run ------------------------------------------------------------------

E2E_TRAIN = {"steps": 5000, "batch_size": 8, "checkpoint_every": 250, "seed": 0}


def _pipeline(root):
    """synth -> train -> embed -> probe through the command line; returns wall time."""
    t0 = time.perf_counter()
    corpus = root / "corpus"
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "train.json"
    cfg.write_text(json.dumps(E2E_TRAIN))
    assert dispatch(["synth", "--classes", "3", "--per-class", "200", "--out", str(corpus), "--seed", "0"]) == 0
    assert dispatch(["train", "--manifest", str(corpus / "manifest.tsv"), "--out", str(root / "run"),
                     "--config", str(cfg)]) == 0
    assert dispatch(["embed", "--manifest", str(corpus / "manifest.tsv"), "--checkpoint",
                     str(root / "run" / "best.bin"), "--out", str(root / "embeddings.csv"), "--seed", "0"]) == 0
    assert dispatch(["probe", "--embeddings", str(root / "embeddings.csv"), "--labels",
                     str(corpus / "manifest.tsv"), "--out", str(root / "report.csv"), "--seed", "0"]) == 0
    return time.perf_counter() - t0


def _all_files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_7_end_to_end(tmp_path):
    first = _pipeline(tmp_path / "a")
    with open(tmp_path / "a" / "run" / "train_log.csv", newline="") as fh:
        losses = [float(r["train_loss"]) for r in csv.DictReader(fh)]
    decile = len(losses) // 10
    head, tail = float(np.mean(losses[:decile])), float(np.mean(losses[-decile:]))
    composite = read_report(tmp_path / "a" / "report.csv").composite

    second = _pipeline(tmp_path / "b")
    files_a, files_b = _all_files(tmp_path / "a"), _all_files(tmp_path / "b")
    identical = files_a.keys() == files_b.keys() and all(files_a[k] == files_b[k] for k in files_a)

    ok = first < 600 and tail < head and composite > 0.90 and identical
    record(7, ok, f"run {first:.0f} s (rerun {second:.0f} s), train loss first/last decile {head:.3f}/{tail:.3f}, "
                  f"composite AUROC {composite:.4f}, {len(files_a)} output files byte-identical {identical}")
    assert ok


# --- 8: EMA checkpoint selection ----------------------------------------------------------------

def test_criterion_8_ema():
    s = ema_curve([1.0, 2.0], 0.5)
    steps = list(range(250, 5250, 250))
    dec = [(t, 1.0 / t) for t in steps]
    inc = [(t, float(t)) for t in steps]
    picks = (select_checkpoint_ema(dec), select_checkpoint_ema(inc), select_checkpoint_ema(inc, mode="max"))
    ok = (abs(s[0] - 1.0) <= 1e-12 and abs(s[1] - 5 / 3) <= 1e-12
          and picks == (steps[-1], steps[0], steps[-1]))
    record(8, ok, f"s1={float(s[0])!r}, s2={s[1]:.12f}, monotone picks {picks}")
    assert ok


# --- 9: sliding windows ---------------------------------------------------------------------------

def test_criterion_9_sliding_windows():
    rng = np.random.default_rng(90)
    w = Waveform(rng.standard_normal(10 * RATE) * 0.1)
    windows = segment_clips(w, 2.0, 1.0)
    encoder = ReferenceEncoder(EncoderConfig(), 0)
    fe = LogMelSpectrogram()
    per_window = encoder.embed(fe.transform(windows))
    pooled = embed_clip_sliding(w, encoder)
    worst = max(float(np.max(np.abs(mean_pool(per_window[rng.permutation(9)]) - pooled))) for _ in range(20))
    ok = len(windows) == 9 and worst <= 1e-12
    record(9, ok, f"{len(windows)} windows from 10 s at 2 s/1 s, max pooled difference under permutation {worst:.1e}")
    assert ok
