"""Phase-vocoder time-scale modification (1024-point FFT, hop 256, Hann).

Internals run in single precision; these kernels dominate the cost of view
generation during training and float32 halves it. Inputs and outputs are
float64.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft
from scipy.signal import resample as fft_resample

N_FFT = 1024
HOP = 256

_WINDOW = (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(N_FFT) / N_FFT)).astype(np.float32)
_WINDOW.setflags(write=False)
_WINDOW_SQ = _WINDOW**2


def _stft(x: np.ndarray) -> np.ndarray:
    pad = N_FFT // 2
    xp = np.pad(x.astype(np.float32), (pad, pad + N_FFT))
    n = 1 + (xp.size - N_FFT) // HOP
    frames = np.lib.stride_tricks.sliding_window_view(xp, N_FFT)[::HOP][:n]
    return sfft.rfft(frames * _WINDOW, axis=1)  # [frames, bins]


def _istft(spec: np.ndarray, length: int) -> np.ndarray:
    frames = sfft.irfft(spec, n=N_FFT, axis=1) * _WINDOW
    n_frames = frames.shape[0]
    total = N_FFT + HOP * (n_frames - 1)
    out = np.zeros(total, dtype=np.float32)
    norm = np.zeros(total, dtype=np.float32)
    # N_FFT / HOP interleaved passes; frames within one pass do not overlap
    step = N_FFT // HOP
    for phase in range(step):
        sel = frames[phase::step]
        if sel.size == 0:
            continue
        seg = slice(phase * HOP, phase * HOP + sel.shape[0] * N_FFT)
        out[seg] += sel.reshape(-1)
        norm[seg] += np.tile(_WINDOW_SQ, sel.shape[0])
    nz = norm > 1e-6
    out[nz] /= norm[nz]
    pad = N_FFT // 2
    y = np.zeros(length)
    body = out[pad : pad + length]
    y[: body.size] = body
    return y


def stretch(x: np.ndarray, rate: float, out_len: int | None = None) -> np.ndarray:
    """Play ``x`` ``rate`` times faster without changing pitch.

    The output has ``round(len(x) / rate)`` samples unless ``out_len`` is given.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    x = np.asarray(x, dtype=np.float64)
    if out_len is None:
        out_len = int(round(x.size / rate))
    if out_len <= 0:
        return np.zeros(0)
    spec = _stft(x)
    n_in, n_bins = spec.shape
    mag_in = np.abs(spec)
    # Unit phasors. The phase advance exp(i*(angle(b) - angle(a))) between
    # neighbouring frames equals b_unit * conj(a_unit), so no angle/exp calls.
    zero = mag_in == 0
    unit = (spec + zero) / (mag_in + zero)
    mag_in = np.concatenate([mag_in, np.zeros((2, n_bins), dtype=mag_in.dtype)])
    unit = np.concatenate([unit, np.ones((2, n_bins), dtype=unit.dtype)])

    steps = np.arange(0.0, n_in, rate)
    idx = steps.astype(np.int64)
    alpha = (steps - idx).astype(np.float32)[:, None]
    mag = mag_in[idx]
    mag += alpha * (mag_in[idx + 1] - mag)
    advance = unit[idx + 1]
    advance *= np.conj(unit[idx])
    out = np.empty_like(advance)
    out[0] = unit[0]
    if out.shape[0] > 1:
        np.cumprod(advance[:-1], axis=0, out=out[1:])
        out[1:] *= unit[0]
    out *= mag
    return _istft(out, out_len)


def shift_pitch(x: np.ndarray, factor: float) -> np.ndarray:
    """Multiply every frequency by ``factor`` while keeping ``len(x)`` samples."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    n = x.size
    slowed = stretch(x, 1.0 / factor)
    if slowed.size == 0:
        return np.zeros(n)
    return fft_resample(slowed, n)
