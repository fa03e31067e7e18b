"""Log-mel spectrogram features.

Defaults: 16 kHz audio, 25 ms Hann window (400 samples, FFT size 512),
10 ms hop, 80 mel bins spanning 60-7800 Hz, natural log of mel power with
an additive floor of 1e-6. A 2 s clip yields 198 frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._fileio import atomic_open, atomic_write_bytes
from .audio_io import DEFAULT_SAMPLE_RATE, Waveform

LOG_FLOOR = 1e-6

DEFAULT_WIN_LEN = 400
DEFAULT_HOP = 160
DEFAULT_N_MELS = 80
DEFAULT_FMIN = 60.0
DEFAULT_FMAX = 7800.0


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Log-mel matrix of shape ``[n_mel_bins, n_frames]``."""

    values: np.ndarray
    frame_rate_hz: float = DEFAULT_SAMPLE_RATE / DEFAULT_HOP

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"spectrogram values must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("spectrogram contains non-finite values")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame_rate_hz must be positive")
        object.__setattr__(self, "values", values)

    @property
    def n_mel_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_values(self, values) -> "Spectrogram":
        return Spectrogram(values, self.frame_rate_hz)


def n_frames(n_samples: int, win_len: int, hop: int) -> int:
    return 1 + (n_samples - win_len) // hop


def fft_size(win_len: int) -> int:
    return 1 << (int(win_len) - 1).bit_length()


@lru_cache(maxsize=16)
def _hann(win_len: int) -> np.ndarray:
    # periodic Hann, the usual STFT convention
    n = np.arange(win_len)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_len)
    w.setflags(write=False)
    return w


def _frame(x: np.ndarray, win_len: int, hop: int) -> np.ndarray:
    frames = np.lib.stride_tricks.sliding_window_view(x, win_len)[::hop]
    return frames


def stft(w: Waveform | np.ndarray, win_len: int = DEFAULT_WIN_LEN, hop: int = DEFAULT_HOP) -> np.ndarray:
    """Hann-windowed STFT without centering.

    Returns a complex matrix ``[fft_size // 2 + 1, n_frames]`` where the FFT
    size is ``win_len`` rounded up to a power of two.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if hop <= 0:
        raise ValueError("hop must be positive")
    if win_len <= 0 or win_len > x.size:
        raise ValueError(f"window length {win_len} is longer than the signal ({x.size} samples)")
    frames = _frame(x, win_len, hop) * _hann(win_len)
    return np.fft.rfft(frames, n=fft_size(win_len), axis=1).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    edges = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(edges[1:-1])


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft // 2 + 1]`` with unit peak.

    Triangles are linear in mel, so neighbouring filters sum to exactly 1
    between the first and last centers; every FFT bin's total weight is <= 1.
    """
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got fmin={fmin}, fmax={fmax}")
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    edges = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_mel - lower) / (center - lower)
    falling = (upper - bin_mel) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def log_mel(
    w: Waveform,
    n_mels: int = DEFAULT_N_MELS,
    fmin: float = DEFAULT_FMIN,
    fmax: float = DEFAULT_FMAX,
    win_len: int = DEFAULT_WIN_LEN,
    hop: int = DEFAULT_HOP,
) -> Spectrogram:
    """Log mel power spectrogram ``log(mel @ |STFT|^2 + 1e-6)``."""
    fb = mel_filterbank(n_mels, fft_size(win_len), w.sample_rate_hz, float(fmin), float(fmax))
    spec = stft(w, win_len, hop)
    power = spec.real**2 + spec.imag**2
    return Spectrogram(np.log(fb @ power + LOG_FLOOR), w.sample_rate_hz / hop)


class LogMelSpectrogram(TransformerMixin, BaseEstimator):
    """Stateless transformer: list of waveforms -> array ``[n, n_mels, n_frames]``."""

    def __init__(self, n_mels=DEFAULT_N_MELS, fmin=DEFAULT_FMIN, fmax=DEFAULT_FMAX,
                 win_len=DEFAULT_WIN_LEN, hop=DEFAULT_HOP):
        self.n_mels = n_mels
        self.fmin = fmin
        self.fmax = fmax
        self.win_len = win_len
        self.hop = hop

    def fit(self, X=None, y=None):
        return self

    def __call__(self, w: Waveform) -> Spectrogram:
        return log_mel(w, self.n_mels, self.fmin, self.fmax, self.win_len, self.hop)

    def transform(self, X):
        specs = [self(w).values for w in X]
        if len({s.shape for s in specs}) > 1:
            raise ValueError("waveforms of different lengths produce spectrograms of different shapes")
        return np.stack(specs)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


# --------------------------------------------------------------------------
# Binary / CSV dumps
#
# Layout (little endian): magic b"HSPC", uint32 version, uint32 rows,
# uint32 cols, float64 frame rate, then rows*cols float32 row-major.

_MAGIC = b"HSPC"
_HEADER = struct.Struct("<4sIIId")


def matrix_to_bytes(values: np.ndarray, frame_rate_hz: float = 0.0) -> bytes:
    values = np.asarray(values)
    rows, cols = values.shape
    header = _HEADER.pack(_MAGIC, 1, rows, cols, float(frame_rate_hz))
    return header + np.ascontiguousarray(values, dtype="<f4").tobytes()


def matrix_from_bytes(data: bytes) -> tuple[np.ndarray, float]:
    if len(data) < _HEADER.size:
        raise ValueError("truncated matrix dump")
    magic, version, rows, cols, rate = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != 1:
        raise ValueError("not a matrix dump (bad magic/version)")
    body = data[_HEADER.size :]
    if len(body) != rows * cols * 4:
        raise ValueError(f"dump body has {len(body)} bytes, expected {rows * cols * 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64), rate


def save_spectrogram(s: Spectrogram, path) -> None:
    atomic_write_bytes(path, matrix_to_bytes(s.values, s.frame_rate_hz))


def load_spectrogram(path) -> Spectrogram:
    with open(path, "rb") as fh:
        values, rate = matrix_from_bytes(fh.read())
    return Spectrogram(values, rate)


def save_spectrogram_csv(s: Spectrogram, path) -> None:
    with atomic_open(path, "w") as fh:
        for row in s.values:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
