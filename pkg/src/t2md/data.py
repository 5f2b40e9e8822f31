"""Procedural latent dataset: colored shapes placed in captioned quadrants.

Each sample is a (C, H, W) latent holding one or two objects on a zero
background. A caption is three tokens per object (shape, color, quadrant),
so the caption fixes everything except a small placement jitter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHAPES = ("square", "ring")
COLORS = ("red", "green", "blue", "yellow")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")

SHAPE_BASE = 0
COLOR_BASE = SHAPE_BASE + len(SHAPES)
QUADRANT_BASE = COLOR_BASE + len(COLORS)
VOCAB_SIZE = QUADRANT_BASE + len(QUADRANTS)

# Hadamard rows: mutually orthogonal channel signatures for C = 4.
_COLOR_VECTORS = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=np.float64)


def caption_tokens(shape: int, color: int, quadrant: int) -> list[int]:
    return [SHAPE_BASE + shape, COLOR_BASE + color, QUADRANT_BASE + quadrant]


def describe(tokens) -> str:
    words = []
    for tok in tokens:
        tok = int(tok)
        if tok < COLOR_BASE:
            words.append(SHAPES[tok - SHAPE_BASE])
        elif tok < QUADRANT_BASE:
            words.append(COLORS[tok - COLOR_BASE])
        else:
            words.append(QUADRANTS[tok - QUADRANT_BASE])
    return " ".join(words)


def object_extent(size: int) -> int:
    return max(2, size // 4 + 1)


def render(size: int, channels: int, objects: list[tuple[int, int, int]], jitter: list[tuple[int, int]],
           amplitude: float = 3.0) -> np.ndarray:
    """Draw ``(shape, color, quadrant)`` objects on a ``size`` x ``size`` latent."""
    img = np.zeros((channels, size, size))
    half = size // 2
    extent = object_extent(size)
    for (shape, color, quad), (dy, dx) in zip(objects, jitter):
        top = (quad // 2) * half + (half - extent) // 2 + dy
        left = (quad % 2) * half + (half - extent) // 2 + dx
        mask = np.zeros((size, size), dtype=bool)
        mask[top:top + extent, left:left + extent] = True
        if SHAPES[shape] == "ring" and extent >= 3:
            mask[top + 1:top + extent - 1, left + 1:left + extent - 1] = False
        vec = np.resize(_COLOR_VECTORS[color], channels) * amplitude / 2.0
        img[:, mask] += vec[:, None]
    return img


@dataclass(frozen=True)
class SyntheticDataset:
    seed: int = 0
    size: int = 16
    channels: int = 4
    objects: int = 1

    def caption_length(self) -> int:
        return 3 * self.objects

    def item(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, index, self.size])
        quads = rng.permutation(4)[: self.objects]
        objs = [(int(rng.integers(len(SHAPES))), int(rng.integers(len(COLORS))), int(q)) for q in quads]
        half = self.size // 2
        extent = object_extent(self.size)
        slack = max(0, (half - extent) // 2)
        jit = [tuple(int(v) for v in rng.integers(-slack, slack + 1, size=2)) for _ in objs]
        latent = render(self.size, self.channels, objs, jit)
        tokens = np.array([t for o in objs for t in caption_tokens(*o)], dtype=np.int64)
        return latent, tokens

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        items = [self.item(int(i)) for i in indices]
        return np.stack([z for z, _ in items]), np.stack([c for _, c in items])

    def at_size(self, size: int) -> SyntheticDataset:
        return SyntheticDataset(self.seed, size, self.channels, self.objects)


def quadrant_of(latent: np.ndarray) -> int:
    """Rule-based classifier: the quadrant holding the largest pixel energy."""
    energy = (np.asarray(latent) ** 2).sum(axis=0)
    h, w = energy.shape
    masses = [energy[:h // 2, :w // 2].sum(), energy[:h // 2, w // 2:].sum(),
              energy[h // 2:, :w // 2].sum(), energy[h // 2:, w // 2:].sum()]
    return int(np.argmax(masses))


def captioned_quadrant(tokens) -> int:
    quads = [int(t) - QUADRANT_BASE for t in tokens if int(t) >= QUADRANT_BASE]
    return quads[0]
