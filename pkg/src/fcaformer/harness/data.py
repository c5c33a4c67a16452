"""Procedural 10-class image task.

Class ``c`` fixes a grating orientation (``c % 5`` steps of 36 degrees) and a
spatial frequency (``c // 5`` picks 2 or 4 cycles per image, scaled for other
class counts). Phase, tint, small orientation/frequency jitter and a few
randomly coloured blobs vary per sample. Random phase makes the class-mean
image nearly flat, so a linear probe on raw pixels does poorly while a
convolutional model separates the classes easily.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import philox


@dataclass
class Split:
    images: np.ndarray  # [N, 3, S, S]
    labels: np.ndarray  # [N]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SynthTask:
    seed: int = 0
    num_classes: int = 10
    image_size: int = 32
    samples_per_class: int = 40
    val_per_class: int = 10
    dtype: str = "f32"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.num_classes < 2 or self.samples_per_class < 1 or self.image_size < 8:
            raise ValueError("task needs >= 2 classes, >= 1 sample per class and >= 8px images")

    def _class_params(self, c: int) -> tuple[float, float]:
        orientations = 5
        angle = (c % orientations) * np.pi / orientations
        band = c // orientations
        cycles = 2.0 * (2.0 ** band)
        return angle, cycles

    def _render(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = self.image_size
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
        out = np.empty((len(labels), 3, s, s))
        for i, c in enumerate(labels):
            angle, cycles = self._class_params(int(c))
            angle += rng.uniform(-0.08, 0.08)
            cycles *= rng.uniform(0.9, 1.1)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * cycles * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
            tint = rng.uniform(0.4, 1.0, size=3) * rng.choice([-1.0, 1.0], size=3)
            img = tint[:, None, None] * wave[None]
            for _ in range(rng.integers(1, 4)):
                cy, cx = rng.uniform(0, 1, size=2)
                radius = rng.uniform(0.06, 0.15)
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
                img += rng.uniform(-1.0, 1.0, size=3)[:, None, None] * blob[None]
            img += 0.1 * rng.standard_normal(img.shape)
            out[i] = img
        return out

    def _split(self, name: str, per_class: int) -> Split:
        if name not in self._cache:
            rng = philox(self.seed, f"synth.{name}")
            labels = np.repeat(np.arange(self.num_classes), per_class)
            labels = labels[rng.permutation(len(labels))]
            images = self._render(labels, rng).astype(np.float64 if self.dtype == "f64" else np.float32)
            self._cache[name] = Split(images, labels.astype(np.int64))
        return self._cache[name]

    @property
    def train(self) -> Split:
        return self._split("train", self.samples_per_class)

    @property
    def val(self) -> Split:
        return self._split("val", self.val_per_class)


def linear_probe_accuracy(task: SynthTask, ridge: float = 1.0) -> float:
    """Validation accuracy of a ridge-regression one-vs-all classifier on raw pixels."""
    tr, va = task.train, task.val
    x = tr.images.reshape(len(tr), -1).astype(np.float64)
    xv = va.images.reshape(len(va), -1).astype(np.float64)
    mu = x.mean(axis=0)
    x, xv = x - mu, xv - mu
    targets = np.eye(task.num_classes)[tr.labels]
    # dual form: the pixel count exceeds the sample count
    gram = x @ x.T + ridge * np.eye(len(x))
    w = x.T @ np.linalg.solve(gram, targets - targets.mean(axis=0))
    pred = (xv @ w).argmax(axis=1)
    return float((pred == va.labels).mean())
