import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import RATE, tone
from healthaug.audio_io import Waveform
from healthaug.features import (
    LogMelSpectrogram,
    Spectrogram,
    hz_to_mel,
    load_spectrogram,
    log_mel,
    matrix_from_bytes,
    matrix_to_bytes,
    mel_center_frequencies,
    mel_filterbank,
    mel_to_hz,
    n_frames,
    save_spectrogram,
    save_spectrogram_csv,
)


def test_two_second_clip_shape():
    s = log_mel(Waveform(np.zeros(2 * RATE)))
    assert s.shape == (80, 198)
    assert n_frames(32000, 400, 160) == 198
    assert s.frame_rate_hz == 100.0


def test_silence_is_log_floor():
    s = log_mel(Waveform(np.zeros(RATE)))
    assert np.allclose(s.values, np.log(1e-6))


def test_filterbank_partition_bound():
    fb = mel_filterbank(80, 512, RATE, 60.0, 7800.0)
    assert fb.shape == (80, 257)
    assert fb.min() >= 0
    assert fb.sum(axis=0).max() <= 1 + 1e-6
    assert np.all(fb.sum(axis=1) > 0)


def test_mel_scale_inverse():
    f = np.linspace(0, 8000, 101)
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f)
    assert abs(hz_to_mel(1000.0) - 1000.0) < 0.1


def test_tone_peaks_at_nearest_mel_bin():
    s = log_mel(tone(1000.0))
    centers = mel_center_frequencies(80, 60.0, 7800.0)
    expected = int(np.argmin(np.abs(centers - 1000.0)))
    assert np.all(np.argmax(s.values, axis=0) == expected)


@settings(max_examples=30, deadline=None)
@given(st.floats(1.01, 4.0), st.integers(0, 2**31 - 1))
def test_log_mel_monotone_in_gain(gain, seed):
    x = np.random.default_rng(seed).standard_normal(4000) * 0.1
    a = log_mel(Waveform(x)).values
    b = log_mel(Waveform(gain * x)).values
    assert np.all(b >= a)


def test_spectrogram_rejects_nan():
    with pytest.raises(ValueError):
        Spectrogram(np.array([[0.0, np.nan]]), 100.0)


def test_transformer_stacks(rng):
    clips = [Waveform(rng.standard_normal(8000)) for _ in range(3)]
    out = LogMelSpectrogram().fit_transform(clips)
    assert out.shape == (3, 80, n_frames(8000, 400, 160))
    assert np.array_equal(out[1], log_mel(clips[1]).values)
    with pytest.raises(ValueError):
        LogMelSpectrogram().transform([Waveform(np.zeros(8000)), Waveform(np.zeros(9000))])


def test_dump_round_trip(tmp_path):
    s = log_mel(tone(440.0, 0.5))
    save_spectrogram(s, tmp_path / "s.bin")
    back = load_spectrogram(tmp_path / "s.bin")
    assert back.shape == s.shape
    assert np.array_equal(back.values, s.values.astype(np.float32).astype(np.float64))
    assert back.frame_rate_hz == s.frame_rate_hz
    raw = (tmp_path / "s.bin").read_bytes()
    assert raw[:4] == b"HSPC"
    with pytest.raises(ValueError):
        matrix_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        matrix_from_bytes(raw[:-4])


def test_matrix_layout_row_major():
    m = np.arange(6, dtype=float).reshape(2, 3)
    data = matrix_to_bytes(m)
    assert np.array_equal(np.frombuffer(data[-24:], "<f4"), np.arange(6, dtype=np.float32))
    values, _ = matrix_from_bytes(data)
    assert np.array_equal(values, m)


def test_csv_export(tmp_path):
    s = Spectrogram(np.array([[1.0, 2.0], [3.0, 4.5]]), 100.0)
    save_spectrogram_csv(s, tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().strip().splitlines()
    assert len(rows) >= 2
    assert "4.5" in rows[-1]
