"""Deterministic synthetic digit corpus.

This sandbox has no dataset downloads, so the exporter synthesizes an
MNIST-shaped corpus instead: 5x7 digit glyphs scaled, shifted, and noised
onto a dark canvas. Everything is driven by a counter-based RNG, so a seed
fully determines every pixel. The corpus also ships in IDX containers to
keep the dataset path identical to the real thing.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_array(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    return np.array([[int(c) for c in row] for row in rows], dtype=np.uint8)


def render_digit(digit: int, rng: np.random.Generator, side: int = 28) -> np.ndarray:
    """One noisy grayscale digit image of shape (side, side)."""
    glyph = _glyph_array(digit)
    factor = int(rng.integers(2, 4))
    scaled = np.kron(glyph, np.ones((factor, factor), dtype=np.uint8))
    intensity = int(rng.integers(160, 256))
    canvas = np.zeros((side, side), dtype=np.float64)
    max_y = side - scaled.shape[0]
    max_x = side - scaled.shape[1]
    oy = int(rng.integers(0, max_y + 1))
    ox = int(rng.integers(0, max_x + 1))
    canvas[oy:oy + scaled.shape[0], ox:ox + scaled.shape[1]] = scaled * intensity
    sigma = float(rng.uniform(4.0, 14.0))
    canvas += rng.normal(0.0, sigma, size=canvas.shape)
    return np.clip(canvas, 0, 255).astype(np.uint8)


def make_corpus(count: int, seed: int, side: int = 28,
                channels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """``count`` images of shape (count, channels, side, side) plus labels."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    labels = rng.integers(0, 10, size=count).astype(np.int64)
    images = np.empty((count, channels, side, side), dtype=np.uint8)
    for i, digit in enumerate(labels):
        base = render_digit(int(digit), rng, side)
        if channels == 1:
            images[i, 0] = base
        else:
            # color jitter per channel keeps shape the class signal
            for c in range(channels):
                gain = float(rng.uniform(0.55, 1.0))
                images[i, c] = np.clip(base.astype(np.float64) * gain, 0, 255)
    return images, labels


def write_idx_images(images: np.ndarray, path: str | Path) -> None:
    """IDX image container (big-endian header); expects (N, rows, cols) uint8."""
    count, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, count, rows, cols))
        fh.write(images.astype(np.uint8).tobytes())


def write_idx_labels(labels: np.ndarray, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x801, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())
