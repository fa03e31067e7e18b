"""SimCLR-style contrastive training at desk scale.

Views of a clip are two independent draws of the same augmentation chain.
Batches are laid out so rows ``2i`` and ``2i + 1`` are the two views of
input ``i``. Training uses NT-Xent with an AdamW update and writes
checkpoints that are later ranked by a bias-corrected EMA of their
validation curve.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._fileio import atomic_open, atomic_write_bytes
from .audio_io import Waveform
from .augment import BEST_CHAIN, AugmentationChain, apply_chain
from .encoder import EncoderConfig, ReferenceEncoder
from .features import LogMelSpectrogram, Spectrogram

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged or was misconfigured."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1.6e-3
    steps: int = 5000
    checkpoint_every: int = 250
    temperature: float = 0.1
    ema_weight: float = 0.5
    seed: int = 0
    weight_decay: float = 1e-4
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size, steps and checkpoint_every must be positive")
        if self.checkpoint_every > self.steps:
            raise ValueError(f"checkpoint_every ({self.checkpoint_every}) exceeds steps ({self.steps})")
        if self.learning_rate < 0 or self.temperature <= 0:
            raise ValueError("learning_rate must be >= 0 and temperature > 0")
        if not 0.0 < self.ema_weight < 1.0:
            raise ValueError(f"ema_weight must be in (0, 1), got {self.ema_weight}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


# Accelerator-scale settings; legal but far beyond a desk run.
ACCELERATOR_SCALE = TrainConfig(batch_size=4096, steps=300_000, checkpoint_every=5000)


# --------------------------------------------------------------------------
# Loss


def nt_xent_loss(z: np.ndarray, temperature: float = 0.1) -> tuple[float, np.ndarray]:
    """NT-Xent loss over ``2B`` rows and its exact gradient w.r.t. ``z``.

    Row ``i``'s positive is row ``i ^ 1``. Rows are L2-normalised, similarities
    divided by ``temperature``, and each anchor's loss is a softmax cross
    entropy over the other ``2B - 1`` rows. The mean over anchors is returned.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] % 2:
        raise ValueError(f"expected an even number of rows, got shape {z.shape}")
    n = z.shape[0]
    if n < 4:
        raise ValueError(f"need at least 2 pairs (B >= 2), got {n // 2}")
    if not np.all(np.isfinite(z)):
        raise ValueError("embeddings contain non-finite values")
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalise an all-zero embedding row")
    u = z / norms
    logits = (u @ u.T) / temperature
    np.fill_diagonal(logits, -np.inf)
    pos = np.arange(n) ^ 1
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(n), pos]))

    # d loss / d logits
    g = np.exp(logits - lse[:, None])
    g[np.arange(n), pos] -= 1.0
    g /= n
    du = (g + g.T) @ u / temperature
    dz = (du - u * np.sum(du * u, axis=1, keepdims=True)) / norms
    return loss, dz


# --------------------------------------------------------------------------
# Optimizer


class AdamW:
    """Adam with decoupled weight decay (decay applied as ``p *= 1 - lr * wd``)."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# Views


def make_view_pair(w: Waveform, chain: AugmentationChain, feature_fn: Callable[[Waveform], Spectrogram],
                   rng: np.random.Generator) -> tuple[Spectrogram, Spectrogram]:
    """Two independent applications of ``chain`` to the same clip."""
    return apply_chain(chain, w, feature_fn, rng), apply_chain(chain, w, feature_fn, rng)


def view_batch(clips: Sequence[Waveform], chain, feature_fn, seed_key: Sequence[int]) -> np.ndarray:
    """``[2B, n_mels, n_frames]`` with rows ``2i, 2i+1`` the views of clip ``i``.

    Clip ``i`` draws from ``default_rng([*seed_key, i])`` so batches can be
    built in any order (or concurrently) with identical results.
    """
    views = []
    for i, w in enumerate(clips):
        a, b = make_view_pair(w, chain, feature_fn, np.random.default_rng([*seed_key, i]))
        views.append(a.values)
        views.append(b.values)
    shapes = {v.shape for v in views}
    if len(shapes) != 1:
        raise ValueError(f"views have inconsistent shapes {shapes}")
    return np.stack(views)


# --------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    step: int
    state: list[np.ndarray]
    encoder_config: EncoderConfig
    val_loss: float = float("nan")
    train_loss: float = float("nan")

    def encoder(self) -> ReferenceEncoder:
        enc = ReferenceEncoder(self.encoder_config, 0)
        enc.load_state(self.state)
        return enc


# little endian: magic, version, sha256(config json), step, val, train,
# config-json length, array count; then config json, per-array
# (ndim, dims...) and finally the float64 parameter blob
_CKPT_MAGIC = b"HCKP"
_CKPT_HEADER = struct.Struct("<4sI32sQddII")


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.encoder_config.to_json().encode()
    parts = [_CKPT_HEADER.pack(_CKPT_MAGIC, 1, ckpt.encoder_config.digest(), ckpt.step,
                               ckpt.val_loss, ckpt.train_loss, len(cfg), len(ckpt.state)), cfg]
    for a in ckpt.state:
        parts.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
    parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in ckpt.state)
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    try:
        magic, version, digest, step, val, train, cfg_len, n_arrays = _CKPT_HEADER.unpack_from(data)
    except struct.error as exc:
        raise ValueError("truncated checkpoint") from exc
    if magic != _CKPT_MAGIC or version != 1:
        raise ValueError("not a checkpoint file (bad magic/version)")
    off = _CKPT_HEADER.size
    config = EncoderConfig.from_json(data[off : off + cfg_len].decode())
    off += cfg_len
    if config.digest() != digest:
        raise ValueError("checkpoint config hash mismatch")
    shapes = []
    for _ in range(n_arrays):
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shapes.append(struct.unpack_from(f"<{ndim}Q", data, off))
        off += 8 * ndim
    state = []
    for shape in shapes:
        count = int(np.prod(shape))
        state.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
        off += 8 * count
    if off != len(data):
        raise ValueError(f"checkpoint has {len(data) - off} trailing bytes")
    return Checkpoint(int(step), state, config, val, train)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# --------------------------------------------------------------------------
# Checkpoint selection


def ema_curve(values: Sequence[float], ema_weight: float) -> np.ndarray:
    """Bias-corrected EMA: ``s_t = w s_{t-1} + (1 - w) x_t``, ``s_0 = 0``, ``s_t / (1 - w^t)``."""
    if not 0.0 < ema_weight < 1.0:
        raise ValueError(f"ema_weight must be in (0, 1), got {ema_weight}")
    out = np.empty(len(values))
    s = 0.0
    for t, x in enumerate(values, start=1):
        s = ema_weight * s + (1.0 - ema_weight) * x
        out[t - 1] = s / (1.0 - ema_weight**t)
    return out


def select_checkpoint_ema(val_curve: Sequence[tuple[int, float]], ema_weight: float = 0.5,
                          mode: str = "min") -> int:
    """Step with the best smoothed metric (``mode="min"`` for losses, ``"max"`` for AUROC)."""
    if len(val_curve) == 0:
        raise ValueError("no validation points to select from")
    if mode not in ("min", "max"):
        raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
    steps = [int(s) for s, _ in val_curve]
    smoothed = ema_curve([float(v) for _, v in val_curve], ema_weight)
    best = int(np.argmin(smoothed) if mode == "min" else np.argmax(smoothed))
    return steps[best]


# --------------------------------------------------------------------------
# Training loop


def _split_validation(n: int, fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_val = int(round(fraction * n))
    if fraction == 0 or n - n_val < 2 or n_val < 2:
        return order, order  # too small to hold out: validate on the training clips
    return order[n_val:], order[:n_val]


def train(dataset: Sequence[Waveform], chain: AugmentationChain = BEST_CHAIN,
          enc: EncoderConfig | None = None, cfg: TrainConfig = TrainConfig(), *,
          feature_fn: Callable[[Waveform], Spectrogram] | None = None,
          log_path=None, checkpoint_dir=None, progress: Callable[[int, float], None] | None = None,
          ) -> list[Checkpoint]:
    """Train a :class:`ReferenceEncoder` contrastively and return its checkpoints.

    Fully determined by ``cfg.seed``: the validation split, initial weights,
    batch composition and every augmentation draw derive from it.
    """
    if len(dataset) == 0:
        raise TrainingError("training dataset is empty")
    feature_fn = feature_fn or LogMelSpectrogram()
    if not isinstance(chain, AugmentationChain):
        chain = AugmentationChain.of(*chain)

    root = np.random.SeedSequence(cfg.seed)
    split_rng, init_rng, batch_rng = (np.random.default_rng(s) for s in root.spawn(3))
    train_idx, val_idx = _split_validation(len(dataset), cfg.val_fraction, split_rng)

    clean = np.stack([feature_fn(dataset[i]).values for i in train_idx])
    if enc is None:
        enc = EncoderConfig(input_shape=clean.shape[1:])
    model = ReferenceEncoder(enc, init_rng)
    model.fit_input_stats(clean)
    del clean

    val_clips = [dataset[i] for i in val_idx]
    if len(val_clips) < 2:
        val_clips = val_clips * 2
    val_views = view_batch(val_clips, chain, feature_fn, (cfg.seed, 1 << 32))

    opt = AdamW(model.params, cfg.learning_rate, cfg.weight_decay)
    checkpoints: list[Checkpoint] = []
    log_rows = []
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    replace_batch = len(train_idx) < cfg.batch_size
    if cfg.batch_size < 2:
        raise TrainingError("batch_size must be >= 2 for a contrastive loss")

    for step in range(1, cfg.steps + 1):
        chosen = train_idx[batch_rng.choice(len(train_idx), cfg.batch_size, replace=replace_batch)]
        views = view_batch([dataset[i] for i in chosen], chain, feature_fn, (cfg.seed, step))
        z = model.forward(views)
        if not np.all(np.isfinite(z)):
            raise TrainingError(f"non-finite projections at step {step}")
        loss, grad = nt_xent_loss(z, cfg.temperature)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step} (lr={cfg.learning_rate})")
        model.backward(grad)
        opt.step(model.grads)
        if progress is not None:
            progress(step, loss)

        val_loss = float("nan")
        if step % cfg.checkpoint_every == 0 or step == cfg.steps:
            val_loss, _ = nt_xent_loss(model.forward(val_views), cfg.temperature)
            ckpt = Checkpoint(step, [a.copy() for a in model.state], enc, val_loss, loss)
            checkpoints.append(ckpt)
            if checkpoint_dir is not None:
                save_checkpoint(ckpt, Path(checkpoint_dir) / f"ckpt_{step:08d}.bin")
            logger.info("step %d train_loss %.4f val_loss %.4f", step, loss, val_loss)
        log_rows.append((step, loss, val_loss))

    if log_path is not None:
        write_training_log(log_rows, log_path)
    return checkpoints


def write_training_log(rows, path) -> None:
    with atomic_open(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "train_loss", "val_loss"])
        for step, train_loss, val_loss in rows:
            writer.writerow([step, repr(float(train_loss)), "" if np.isnan(val_loss) else repr(float(val_loss))])


def read_training_log(path) -> list[tuple[int, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["step"]), float(r["train_loss"]), float(r["val_loss"]) if r["val_loss"] else float("nan"))
                for r in reader]


# --------------------------------------------------------------------------
# Estimator wrapper


class ContrastiveEncoder(TransformerMixin, BaseEstimator):
    """Fit a reference encoder contrastively; ``transform`` returns embeddings.

    ``fit`` takes a list of fixed-length :class:`Waveform` clips. After
    training, the checkpoint with the best bias-corrected EMA of validation
    loss is loaded. ``transform`` accepts waveforms or precomputed
    spectrograms ``[n, n_mels, n_frames]``.
    """

    def __init__(self, chain=BEST_CHAIN, steps=5000, batch_size=32, learning_rate=1.6e-3,
                 checkpoint_every=250, temperature=0.1, ema_weight=0.5, weight_decay=1e-4,
                 embedding_dim=128, hidden=(256, 256), projection_dim=64, pooling="meanstd",
                 feature_fn=None, random_state=0):
        self.chain = chain
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.checkpoint_every = checkpoint_every
        self.temperature = temperature
        self.ema_weight = ema_weight
        self.weight_decay = weight_decay
        self.embedding_dim = embedding_dim
        self.hidden = hidden
        self.projection_dim = projection_dim
        self.pooling = pooling
        self.feature_fn = feature_fn
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate, steps=self.steps,
                           checkpoint_every=min(self.checkpoint_every, self.steps),
                           temperature=self.temperature, ema_weight=self.ema_weight,
                           seed=self.random_state, weight_decay=self.weight_decay)

    def fit(self, X, y=None, **train_kwargs):
        clips = list(X)
        feature_fn = self.feature_fn or LogMelSpectrogram()
        shape = feature_fn(clips[0]).shape
        enc = EncoderConfig(input_shape=shape, embedding_dim=self.embedding_dim, hidden=tuple(self.hidden),
                            projection_dim=self.projection_dim, pooling=self.pooling)
        self.checkpoints_ = train(clips, self.chain, enc, self._train_config(), feature_fn=feature_fn,
                                  **train_kwargs)
        curve = [(c.step, c.val_loss) for c in self.checkpoints_]
        self.best_step_ = select_checkpoint_ema(curve, self.ema_weight, mode="min")
        best = next(c for c in self.checkpoints_ if c.step == self.best_step_)
        self.encoder_ = best.encoder()
        self.feature_fn_ = feature_fn
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return embed_batch(self.encoder_, X, self.feature_fn_)


def embed_batch(encoder, X, feature_fn=None) -> np.ndarray:
    """Embed waveforms or spectrograms with any object exposing ``embed``."""
    items = list(X) if not isinstance(X, np.ndarray) else X
    if isinstance(items, np.ndarray):
        return encoder.embed(items)
    if len(items) and isinstance(items[0], Waveform):
        feature_fn = feature_fn or LogMelSpectrogram()
        items = [feature_fn(w) for w in items]
    arr = np.stack([s.values if isinstance(s, Spectrogram) else np.asarray(s) for s in items])
    return encoder.embed(arr)
