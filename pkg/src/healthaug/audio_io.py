"""Audio loading, saving, segmentation and the clip manifest format.

All pipelines run at :data:`DEFAULT_SAMPLE_RATE` mono. Samples are held as
``float64`` so that augmentation and feature code never loses precision
before the final quantization in :func:`save_wav`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from ._fileio import atomic_open, atomic_write_bytes

DEFAULT_SAMPLE_RATE = 16_000
SPLITS = ("train", "probe_train", "probe_eval")

_INT16_SCALE = 32768.0


class AudioError(ValueError):
    """Raised for unreadable, unsupported or empty audio."""


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio at a fixed sample rate."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if samples.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate_hz)


def standard_length(duration_s: float, sample_rate_hz: int) -> int:
    """Number of samples in a clip of ``duration_s`` seconds."""
    return int(round(duration_s * sample_rate_hz))


def resample(samples: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling (Kaiser window, scipy defaults)."""
    if orig_rate == target_rate:
        return np.asarray(samples, dtype=np.float64)
    ratio = Fraction(int(target_rate), int(orig_rate))
    out = resample_poly(np.asarray(samples, dtype=np.float64), ratio.numerator, ratio.denominator)
    return out


def load_wav(path, target_rate_hz: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read a PCM16 or float32 WAV file as a mono waveform at ``target_rate_hz``.

    Channels are averaged. PCM16 is scaled by 1/32768. Float files whose peak
    exceeds 1 are peak-normalized into [-1, 1]; otherwise they pass unchanged.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError / struct errors for bad RIFF
        raise AudioError(f"cannot read WAV file {path}: {exc}") from exc

    if data.dtype == np.int16:
        x = data.astype(np.float64) / _INT16_SCALE
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV encoding {data.dtype} in {path}; expected PCM16 or float32")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioError(f"zero-length audio in {path}")
    if not np.all(np.isfinite(x)):
        raise AudioError(f"non-finite samples in {path}")
    if data.dtype == np.float32:
        peak = np.max(np.abs(x))
        if peak > 1.0:
            x = x / peak

    x = resample(x, rate, target_rate_hz)
    return Waveform(x, target_rate_hz)


def wav_bytes(w: Waveform) -> bytes:
    """Encode a waveform as PCM16 WAV bytes (values outside [-1, 1) are clipped)."""
    q = np.clip(np.round(w.samples * _INT16_SCALE), -32768, 32767).astype(np.int16)
    buf = io.BytesIO()
    wavfile.write(buf, w.sample_rate_hz, q)
    return buf.getvalue()


def save_wav(w: Waveform, path) -> None:
    """Write ``w`` as mono PCM16. The write is atomic."""
    atomic_write_bytes(path, wav_bytes(w))


def segment_clips(w: Waveform, clip_len_s: float, stride_s: float) -> list[Waveform]:
    """Cut ``w`` into fixed-length clips; a trailing remainder is dropped."""
    if clip_len_s <= 0 or stride_s <= 0:
        raise ValueError("clip_len_s and stride_s must be positive")
    rate = w.sample_rate_hz
    clip_len = standard_length(clip_len_s, rate)
    stride = standard_length(stride_s, rate)
    if stride < 1:
        raise ValueError(f"stride {stride_s}s is shorter than one sample")
    n = len(w)
    if n < clip_len:
        return []
    count = (n - clip_len) // stride + 1
    return [w.with_samples(w.samples[i * stride : i * stride + clip_len]) for i in range(count)]


def crop_or_pad(w: Waveform, target_len_s: float) -> Waveform:
    """Center-crop longer inputs, zero-pad shorter ones at the end."""
    if target_len_s <= 0:
        raise ValueError("target_len_s must be positive")
    target = standard_length(target_len_s, w.sample_rate_hz)
    return w.with_samples(fit_length(w.samples, target, crop="center"))


def fit_length(x: np.ndarray, target: int, crop: str = "center") -> np.ndarray:
    """Crop (``"center"`` or ``"end"``) or end-pad an array to ``target`` samples."""
    n = x.size
    if n == target:
        return x.copy()
    if n > target:
        start = (n - target) // 2 if crop == "center" else 0
        return x[start : start + target].copy()
    out = np.zeros(target, dtype=np.float64)
    out[:n] = x
    return out


def sample_random_clip(w: Waveform, clip_len_s: float, rng: np.random.Generator) -> Waveform:
    """A contiguous clip whose start offset is uniform over the valid range."""
    clip_len = standard_length(clip_len_s, w.sample_rate_hz)
    if clip_len < 1 or len(w) < clip_len:
        raise ValueError(f"waveform of {w.duration_s:.3f}s is shorter than clip length {clip_len_s}s")
    start = int(rng.integers(0, len(w) - clip_len + 1))
    return w.with_samples(w.samples[start : start + clip_len])


# --------------------------------------------------------------------------
# Clip manifest (TSV)


@dataclass
class ClipManifestEntry:
    source_path: str
    clip_start_s: float
    clip_len_s: float
    split: str
    task_labels: dict[str, int | None] = field(default_factory=dict)

    def __post_init__(self):
        if self.clip_start_s < 0:
            raise ValueError(f"clip_start_s must be >= 0, got {self.clip_start_s}")
        if self.clip_len_s <= 0:
            raise ValueError(f"clip_len_s must be > 0, got {self.clip_len_s}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def clip_id(self) -> str:
        return f"{self.source_path}@{self.clip_start_s:.3f}"

    def load(self, root=None, target_rate_hz: int = DEFAULT_SAMPLE_RATE) -> Waveform:
        """Load the referenced span, zero-padding if the file ends early."""
        path = Path(self.source_path)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        w = load_wav(path, target_rate_hz)
        start = standard_length(self.clip_start_s, target_rate_hz)
        length = standard_length(self.clip_len_s, target_rate_hz)
        return w.with_samples(fit_length(w.samples[start:], length, crop="end"))


_FIXED_COLUMNS = ("path", "start", "length", "split")


def _fmt_seconds(x: float) -> str:
    return f"{x:.6f}".rstrip("0").rstrip(".") if x != int(x) else f"{int(x)}"


def write_manifest(entries: Iterable[ClipManifestEntry], path, tasks: list[str] | None = None) -> None:
    entries = list(entries)
    if tasks is None:
        tasks = sorted({t for e in entries for t in e.task_labels})
    with atomic_open(path, "w") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow([*_FIXED_COLUMNS, *tasks])
        for e in entries:
            labels = [e.task_labels.get(t) for t in tasks]
            writer.writerow([
                e.source_path,
                _fmt_seconds(e.clip_start_s),
                _fmt_seconds(e.clip_len_s),
                e.split,
                *["" if v is None else str(int(v)) for v in labels],
            ])


def read_manifest(path) -> tuple[list[ClipManifestEntry], list[str]]:
    """Parse a manifest TSV. Returns the entries and the task column names."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty manifest {path}") from None
        if tuple(header[:4]) != _FIXED_COLUMNS:
            raise ValueError(f"manifest header must start with {'/'.join(_FIXED_COLUMNS)}, got {header[:4]}")
        tasks = header[4:]
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            labels: dict[str, int | None] = {}
            for task, value in zip(tasks, row[4:]):
                value = value.strip()
                if value == "":
                    labels[task] = None
                elif value in ("0", "1"):
                    labels[task] = int(value)
                else:
                    raise ValueError(f"{path}:{lineno}: label for {task!r} must be 0, 1 or empty, got {value!r}")
            entries.append(ClipManifestEntry(row[0], float(row[1]), float(row[2]), row[3], labels))
    return entries, tasks

