"""Reference encoder: a small numpy MLP with hand-written backprop.

Stands in for a large convolutional backbone. Any object exposing
``embed(batch) -> [n, embedding_dim]`` can be used for evaluation; the
contrastive trainer additionally needs ``forward``/``backward`` and flat
parameter access, which :class:`ReferenceEncoder` provides.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

POOLINGS = ("meanstd", "flatten")


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple[int, int] = (80, 198)
    embedding_dim: int = 128
    hidden: tuple[int, ...] = (256, 256)
    projection_hidden: int = 128
    projection_dim: int = 64
    pooling: str = "meanstd"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (n_mels, n_frames), got {self.input_shape}")
        if self.embedding_dim < 1 or self.projection_dim < 1 or self.projection_hidden < 1:
            raise ValueError("embedding_dim, projection_hidden and projection_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")

    @property
    def input_dim(self) -> int:
        n_mels, n_frames = self.input_shape
        return 2 * n_mels if self.pooling == "meanstd" else n_mels * n_frames

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        return cls(**json.loads(text))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


def pool_features(spectrograms: np.ndarray, pooling: str = "meanstd") -> np.ndarray:
    """``[n, n_mels, n_frames]`` -> ``[n, input_dim]`` (fixed, not learned)."""
    x = np.asarray(spectrograms, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if pooling == "meanstd":
        return np.concatenate([x.mean(axis=2), x.std(axis=2)], axis=1)
    if pooling == "flatten":
        return x.reshape(x.shape[0], -1)
    raise ValueError(f"unknown pooling {pooling!r}")


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        # He initialisation, suited to the ReLU that follows
        self.W = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.b = np.zeros(n_out)

    @property
    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        self._x = x
        return x @ self.W + self.b

    def backward(self, grad):
        self.grads = [self._x.T @ grad, grad.sum(axis=0)]
        return grad @ self.W.T


class ReLU:
    params: list = []

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        self.grads = []
        return grad * self._mask


class Standardize:
    """Fixed affine input normalisation; its statistics are stored, not trained."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.scale = np.ones(dim)

    params: list = []

    @property
    def buffers(self):
        return [self.mean, self.scale]

    def forward(self, x):
        return (x - self.mean) / self.scale

    def backward(self, grad):
        self.grads = []
        return grad / self.scale


def _mlp(dims, rng):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(Linear(a, b, rng))
        if i < len(dims) - 2:
            layers.append(ReLU())
    return layers


class ReferenceEncoder:
    """Pooled log-mel -> MLP trunk -> embedding -> projection head."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator | int = 0):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.config = config
        self.norm = Standardize(config.input_dim)
        self.trunk = _mlp([config.input_dim, *config.hidden, config.embedding_dim], rng)
        self.head = _mlp([config.embedding_dim, config.projection_hidden, config.projection_dim], rng)

    # parameters ------------------------------------------------------
    @property
    def layers(self):
        return [self.norm, *self.trunk, *self.head]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    @property
    def state(self) -> list[np.ndarray]:
        """Everything needed to reproduce the encoder: buffers then parameters."""
        return [*self.norm.buffers, *self.params]

    def load_state(self, arrays) -> None:
        targets = self.state
        if len(arrays) != len(targets):
            raise ValueError(f"expected {len(targets)} arrays, got {len(arrays)}")
        for dst, src in zip(targets, arrays):
            if dst.shape != np.shape(src):
                raise ValueError(f"shape mismatch {dst.shape} vs {np.shape(src)}")
            dst[...] = src

    def fit_input_stats(self, spectrograms) -> None:
        feats = pool_features(spectrograms, self.config.pooling)
        self.norm.mean[...] = feats.mean(axis=0)
        self.norm.scale[...] = feats.std(axis=0) + 1e-3

    # computation -----------------------------------------------------
    def _inputs(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 3 or (batch.ndim == 2 and batch.shape == self.config.input_shape):
            if tuple(batch.shape[-2:]) != self.config.input_shape and self.config.pooling == "flatten":
                raise ValueError(f"spectrogram shape {batch.shape[-2:]} != {self.config.input_shape}")
            return pool_features(batch, self.config.pooling)
        return batch

    def embed(self, batch) -> np.ndarray:
        """Embeddings (trunk output) for spectrograms ``[n, n_mels, n_frames]``."""
        h = self.norm.forward(self._inputs(batch))
        for layer in self.trunk:
            h = layer.forward(h)
        return h

    def forward(self, batch) -> np.ndarray:
        """Projection-head output used by the contrastive loss."""
        h = self.embed(batch)
        for layer in self.head:
            h = layer.forward(h)
        return h

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad
