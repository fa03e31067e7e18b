"""The eight health-acoustic augmentations and their 1-/2-step chains.

Each augmentation is a pure function of its input, its parameter bounds and
an explicit :class:`numpy.random.Generator`. The randomly drawn quantity
(crop fraction, gain, stretch, shift ...) can be pinned with a keyword
argument, which is how the exact-identity cases are exercised.

:class:`AugmentationSpec` mirrors one row of the augmentation table
(probability plus kind-specific parameters) and :class:`AugmentationChain`
is an ordered sequence of one or two specs.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import vocoder
from ._fileio import atomic_write_text
from .audio_io import Waveform, fit_length
from .features import LogMelSpectrogram, Spectrogram

CROP_AND_PAD = "CropAndPad"
NOISING = "Noising"
BROWNIAN_TAPE_SPEED = "BrownianTapeSpeed"
SCALING = "Scaling"
PITCH_SHIFT = "PitchShift"
TIME_STRETCH = "TimeStretch"
CIRCULAR_TIME_SHIFT = "CircularTimeShift"
SPEC_AUGMENT = "SpecAugment"

KINDS = (
    CROP_AND_PAD,
    NOISING,
    BROWNIAN_TAPE_SPEED,
    SCALING,
    PITCH_SHIFT,
    TIME_STRETCH,
    CIRCULAR_TIME_SHIFT,
    SPEC_AUGMENT,
)
TIME_DOMAIN_KINDS = KINDS[:-1]

PARAM_NAMES: dict[str, tuple[str, ...]] = {
    CROP_AND_PAD: ("min_fraction", "max_fraction"),
    NOISING: ("mean", "stddev"),
    BROWNIAN_TAPE_SPEED: ("magnitude",),
    SCALING: ("min_factor", "max_factor"),
    PITCH_SHIFT: ("min_factor", "max_factor"),
    TIME_STRETCH: ("min_stretch", "max_stretch"),
    CIRCULAR_TIME_SHIFT: (),
    SPEC_AUGMENT: ("time_mask_max_frames", "time_mask_count", "freq_mask_max_bins", "freq_mask_count"),
}

_INT_PARAMS = frozenset(PARAM_NAMES[SPEC_AUGMENT])

# best-performing settings from the grid search
BEST_PARAMS: dict[str, tuple[float, dict]] = {
    CROP_AND_PAD: (1.0, {"min_fraction": 0.1, "max_fraction": 0.5}),
    NOISING: (1.0, {"mean": 0.2, "stddev": 0.2}),
    BROWNIAN_TAPE_SPEED: (0.8, {"magnitude": 20.0}),
    SCALING: (0.8, {"min_factor": 0.25, "max_factor": 1.75}),
    PITCH_SHIFT: (0.8, {"min_factor": 1.25, "max_factor": 1.75}),
    TIME_STRETCH: (0.8, {"min_stretch": 0.75, "max_stretch": 1.75}),
    CIRCULAR_TIME_SHIFT: (1.0, {}),
    SPEC_AUGMENT: (1.0, {"time_mask_max_frames": 24, "time_mask_count": 20,
                         "freq_mask_max_bins": 20, "freq_mask_count": 5}),
}


class AugmentationError(ValueError):
    """Invalid augmentation parameters, chain layout or input domain."""


# --------------------------------------------------------------------------
# Parameter validation


def _check_fraction_bounds(min_fraction, max_fraction):
    if not 0.0 <= min_fraction < max_fraction <= 1.0:
        raise AugmentationError(
            f"crop fractions need 0 <= min < max <= 1, got min={min_fraction}, max={max_fraction}")


def _check_factor_bounds(lo, hi, what="factor"):
    if not 0.0 < lo < hi:
        raise AugmentationError(f"{what} bounds need 0 < min < max, got min={lo}, max={hi}")


def _validate_params(kind: str, params: Mapping[str, float]) -> None:
    if kind == CROP_AND_PAD:
        _check_fraction_bounds(params["min_fraction"], params["max_fraction"])
    elif kind == NOISING:
        if params["stddev"] < 0:
            raise AugmentationError(f"noise stddev must be >= 0, got {params['stddev']}")
    elif kind == BROWNIAN_TAPE_SPEED:
        if params["magnitude"] < 0:
            raise AugmentationError(f"magnitude must be >= 0, got {params['magnitude']}")
    elif kind in (SCALING, PITCH_SHIFT):
        _check_factor_bounds(params["min_factor"], params["max_factor"])
    elif kind == TIME_STRETCH:
        _check_factor_bounds(params["min_stretch"], params["max_stretch"], "stretch")
    elif kind == SPEC_AUGMENT:
        for name in _INT_PARAMS:
            if params[name] < 0:
                raise AugmentationError(f"{name} must be >= 0, got {params[name]}")


# --------------------------------------------------------------------------
# Waveform augmentations


def crop_and_pad(w: Waveform, min_fraction: float, max_fraction: float, rng: np.random.Generator,
                 *, fraction: float | None = None, offset: int | None = None) -> Waveform:
    """Keep a random contiguous segment and zero-pad it back to the input length.

    ``fraction`` is the share of samples removed, drawn uniformly from
    ``[min_fraction, max_fraction]``. The retained segment of
    ``round((1 - fraction) * N)`` samples starts at a uniform offset.
    """
    _check_fraction_bounds(min_fraction, max_fraction)
    x = w.samples
    n = x.size
    if fraction is None:
        fraction = rng.uniform(min_fraction, max_fraction)
    keep = int(round((1.0 - fraction) * n))
    if offset is None:
        offset = int(rng.integers(0, n - keep + 1))
    if not 0 <= offset <= n - keep:
        raise AugmentationError(f"offset {offset} out of range for {keep} of {n} samples")
    out = np.zeros(n)
    out[:keep] = x[offset : offset + keep]
    return w.with_samples(out)


def add_noise(w: Waveform, mean: float, stddev: float, rng: np.random.Generator) -> Waveform:
    """Add i.i.d. Gaussian noise."""
    if stddev < 0:
        raise AugmentationError(f"noise stddev must be >= 0, got {stddev}")
    return w.with_samples(w.samples + rng.normal(mean, stddev, size=len(w)))


def brownian_tape_speed(w: Waveform, magnitude: float, rng: np.random.Generator) -> Waveform:
    """Resample along a Brownian playback-speed path.

    Speed increments are Normal(0, (magnitude / N)^2); the running speed is
    clamped to [0.1, 10]. Read positions advance by the speed each sample and
    the output is the linearly interpolated input there, zero past the end.
    """
    if magnitude < 0:
        raise AugmentationError(f"magnitude must be >= 0, got {magnitude}")
    x = w.samples
    n = x.size
    if magnitude == 0:
        return w.with_samples(x.copy())
    speed = np.clip(1.0 + np.cumsum(rng.normal(0.0, magnitude / n, size=n)), 0.1, 10.0)
    pos = np.empty(n)
    pos[0] = 0.0
    np.cumsum(speed[1:], out=pos[1:])
    # positions beyond the last sample read as silence
    out = np.interp(pos, np.arange(n, dtype=np.float64), x, right=0.0)
    return w.with_samples(out)


def scale_gain(w: Waveform, min_factor: float, max_factor: float, rng: np.random.Generator,
               *, gain: float | None = None) -> Waveform:
    """Multiply by a gain drawn from ``[min_factor, max_factor]``."""
    _check_factor_bounds(min_factor, max_factor)
    if gain is None:
        gain = rng.uniform(min_factor, max_factor)
    return w.with_samples(gain * w.samples)


def pitch_shift(w: Waveform, min_factor: float, max_factor: float, rng: np.random.Generator,
                *, factor: float | None = None) -> Waveform:
    """Multiply every frequency by a factor from ``[min_factor, max_factor]``; length is kept."""
    _check_factor_bounds(min_factor, max_factor)
    if factor is None:
        factor = rng.uniform(min_factor, max_factor)
    return w.with_samples(vocoder.shift_pitch(w.samples, factor))


def time_stretch(w: Waveform, min_stretch: float, max_stretch: float, rng: np.random.Generator,
                 *, stretch: float | None = None) -> Waveform:
    """Speed up (stretch > 1) or slow down without changing pitch.

    The vocoder produces ``round(N / stretch)`` samples, which are then
    end-cropped or zero-padded back to ``N`` so chains operate on fixed-length clips.
    """
    _check_factor_bounds(min_stretch, max_stretch, "stretch")
    if stretch is None:
        stretch = rng.uniform(min_stretch, max_stretch)
    y = vocoder.stretch(w.samples, stretch)
    return w.with_samples(fit_length(y, len(w), crop="end"))


def circular_time_shift(w: Waveform, rng: np.random.Generator, *, shift: int | None = None) -> Waveform:
    """Rotate the signal in time: ``out[i] = w[(i - k) mod N]``."""
    n = len(w)
    if shift is None:
        shift = int(rng.integers(0, n))
    return w.with_samples(np.roll(w.samples, shift))


# --------------------------------------------------------------------------
# Spectrogram augmentation


def spec_augment(s: Spectrogram, time_mask_max_frames: int, time_mask_count: int,
                 freq_mask_max_bins: int, freq_mask_count: int, rng: np.random.Generator) -> Spectrogram:
    """Zero out random time and mel-frequency bands (fill value 0.0).

    Each mask has width uniform on ``{0, ..., max}`` (max clipped to the axis
    length) and a uniform start such that it fits inside the axis.
    """
    for name, v in (("time_mask_max_frames", time_mask_max_frames), ("time_mask_count", time_mask_count),
                    ("freq_mask_max_bins", freq_mask_max_bins), ("freq_mask_count", freq_mask_count)):
        if v < 0:
            raise AugmentationError(f"{name} must be >= 0, got {v}")
    values = s.values.copy()
    n_bins, n_frames = values.shape
    for axis, length, max_width, count in ((1, n_frames, time_mask_max_frames, time_mask_count),
                                           (0, n_bins, freq_mask_max_bins, freq_mask_count)):
        max_width = min(int(max_width), length)
        for _ in range(int(count)):
            width = int(rng.integers(0, max_width + 1))
            start = int(rng.integers(0, length - width + 1))
            if axis == 1:
                values[:, start : start + width] = 0.0
            else:
                values[start : start + width, :] = 0.0
    return s.with_values(values)


# --------------------------------------------------------------------------
# Specs and chains


@dataclass(frozen=True)
class AugmentationSpec:
    """One augmentation with its application probability and parameter record."""

    kind: str
    probability: float = 1.0
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PARAM_NAMES:
            raise AugmentationError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= float(self.probability) <= 1.0:
            raise AugmentationError(f"probability must be in [0, 1], got {self.probability}")
        expected = PARAM_NAMES[self.kind]
        given = dict(self.params)
        if set(given) != set(expected):
            raise AugmentationError(
                f"{self.kind} takes parameters {expected}, got {tuple(sorted(given))}")
        clean = {name: (int(given[name]) if name in _INT_PARAMS else float(given[name])) for name in expected}
        if any(name in _INT_PARAMS and clean[name] != given[name] for name in expected):
            raise AugmentationError(f"{self.kind} mask sizes and counts must be integers: {given}")
        _validate_params(self.kind, clean)
        object.__setattr__(self, "probability", float(self.probability))
        object.__setattr__(self, "params", clean)

    def __hash__(self):
        return hash((self.kind, self.probability, tuple(self.params.items())))

    @classmethod
    def best(cls, kind: str) -> "AugmentationSpec":
        """The grid-search winner for ``kind``."""
        probability, params = BEST_PARAMS[kind]
        return cls(kind, probability, dict(params))

    @property
    def domain(self) -> str:
        return "spectrogram" if self.kind == SPEC_AUGMENT else "waveform"

    def sort_key(self):
        return (KINDS.index(self.kind), self.probability, tuple(self.params[n] for n in PARAM_NAMES[self.kind]))

    def label(self) -> str:
        inner = ", ".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"{self.kind}(p={self.probability:g}{', ' + inner if inner else ''})"


def augment(kind: str, params: Mapping[str, float], x, rng: np.random.Generator):
    """Apply augmentation ``kind`` unconditionally with freshly drawn randomness."""
    if kind == CROP_AND_PAD:
        return crop_and_pad(x, params["min_fraction"], params["max_fraction"], rng)
    if kind == NOISING:
        return add_noise(x, params["mean"], params["stddev"], rng)
    if kind == BROWNIAN_TAPE_SPEED:
        return brownian_tape_speed(x, params["magnitude"], rng)
    if kind == SCALING:
        return scale_gain(x, params["min_factor"], params["max_factor"], rng)
    if kind == PITCH_SHIFT:
        return pitch_shift(x, params["min_factor"], params["max_factor"], rng)
    if kind == TIME_STRETCH:
        return time_stretch(x, params["min_stretch"], params["max_stretch"], rng)
    if kind == CIRCULAR_TIME_SHIFT:
        return circular_time_shift(x, rng)
    if kind == SPEC_AUGMENT:
        return spec_augment(x, params["time_mask_max_frames"], params["time_mask_count"],
                            params["freq_mask_max_bins"], params["freq_mask_count"], rng)
    raise AugmentationError(f"unknown augmentation kind {kind!r}")


def apply_spec(spec: AugmentationSpec, x, rng: np.random.Generator):
    """With probability ``spec.probability`` augment ``x``, else return it unchanged.

    One uniform draw is consumed for the coin flip whatever the outcome, so the
    stream position after a call does not depend on the probability alone.
    """
    if spec.domain == "spectrogram":
        if not isinstance(x, Spectrogram):
            raise AugmentationError(f"{spec.kind} applies to spectrograms, got {type(x).__name__}")
    elif not isinstance(x, Waveform):
        raise AugmentationError(f"{spec.kind} applies to waveforms, got {type(x).__name__}")
    if rng.random() < spec.probability:
        return augment(spec.kind, spec.params, x, rng)
    return x


@dataclass(frozen=True)
class AugmentationChain:
    """One or two augmentations applied in order; SpecAugment may only come last."""

    steps: tuple[AugmentationSpec, ...]

    def __post_init__(self):
        steps = tuple(self.steps)
        if len(steps) not in (1, 2):
            raise AugmentationError(f"a chain has 1 or 2 steps, got {len(steps)}")
        for s in steps:
            if not isinstance(s, AugmentationSpec):
                raise AugmentationError(f"chain steps must be AugmentationSpec, got {type(s).__name__}")
        kinds = [s.kind for s in steps]
        if kinds.count(SPEC_AUGMENT) > 1:
            raise AugmentationError("at most one SpecAugment step per chain")
        if SPEC_AUGMENT in kinds[:-1]:
            raise AugmentationError("SpecAugment must be the last step of a chain")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def of(cls, *steps) -> "AugmentationChain":
        """Build from specs or kind names (names resolve to best parameters)."""
        return cls(tuple(s if isinstance(s, AugmentationSpec) else AugmentationSpec.best(s) for s in steps))

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(s.kind for s in self.steps)

    @property
    def name(self) -> str:
        return "+".join(self.kinds)

    def __len__(self):
        return len(self.steps)

    def to_config(self) -> str:
        return chain_to_config(self)


def apply_chain(chain: AugmentationChain, w: Waveform, feature_fn: Callable[[Waveform], Spectrogram],
                rng: np.random.Generator) -> Spectrogram:
    """Time-domain steps, then ``feature_fn``, then SpecAugment if present."""
    if not isinstance(chain, AugmentationChain):
        chain = AugmentationChain(tuple(chain))
    for spec in chain.steps:
        if spec.domain == "waveform":
            w = apply_spec(spec, w, rng)
    s = feature_fn(w)
    last = chain.steps[-1]
    if last.domain == "spectrogram":
        s = apply_spec(last, s, rng)
    return s


# --------------------------------------------------------------------------
# Config files: one INI section per step, floats written with repr() so a
# round trip is bit-exact.


def chain_to_config(chain: AugmentationChain) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for i, spec in enumerate(chain.steps, start=1):
        section = {"kind": spec.kind, "probability": repr(spec.probability)}
        for name, value in spec.params.items():
            section[name] = str(value) if name in _INT_PARAMS else repr(value)
        cp[f"step{i}"] = section
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def chain_from_config(text: str) -> AugmentationChain:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise AugmentationError(f"malformed chain config: {exc}") from exc
    sections = sorted(cp.sections(), key=lambda s: int(s[4:]) if s.startswith("step") and s[4:].isdigit() else -1)
    if not sections or any(not s.startswith("step") or not s[4:].isdigit() for s in sections):
        raise AugmentationError(f"chain config needs sections [step1], [step2]; got {cp.sections()}")
    steps = []
    for name in sections:
        sec = dict(cp[name])
        try:
            kind = sec.pop("kind")
            probability = float(sec.pop("probability", "1.0"))
            params = {k: (int(v) if k in _INT_PARAMS else float(v)) for k, v in sec.items()}
        except (KeyError, ValueError) as exc:
            raise AugmentationError(f"bad section [{name}]: {exc}") from exc
        steps.append(AugmentationSpec(kind, probability, params))
    return AugmentationChain(tuple(steps))


def save_chain(chain: AugmentationChain, path) -> None:
    atomic_write_text(path, chain_to_config(chain))


def load_chain(path) -> AugmentationChain:
    with open(path, encoding="utf-8") as fh:
        return chain_from_config(fh.read())


BEST_CHAIN = AugmentationChain.of(CIRCULAR_TIME_SHIFT, TIME_STRETCH)


class ChainAugmenter(TransformerMixin, BaseEstimator):
    """Turn waveforms into augmented log-mel spectrograms.

    Every call to :meth:`transform` restarts from ``random_state``, so the same
    inputs always produce the same views; each clip gets its own RNG stream
    keyed by its position.
    """

    def __init__(self, chain: AugmentationChain | Sequence = BEST_CHAIN, feature_fn=None, random_state=0):
        self.chain = chain
        self.feature_fn = feature_fn
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.chain_ = self.chain if isinstance(self.chain, AugmentationChain) else AugmentationChain.of(*self.chain)
        self.feature_fn_ = self.feature_fn if self.feature_fn is not None else LogMelSpectrogram()
        return self

    def transform(self, X):
        if not hasattr(self, "chain_"):
            self.fit()
        out = [apply_chain(self.chain_, w, self.feature_fn_, np.random.default_rng([self.random_state, i])).values
               for i, w in enumerate(X)]
        return np.stack(out)
