"""Conditional-GAN objectives for a heightmap generator, as pure functions.

``d_real``/``d_fake`` are discriminator probabilities on real and generated
pairs; ``x``/``g`` are the real and generated heightmaps of the same shape.
"""

from __future__ import annotations

import numpy as np


def _probabilities(name: str, d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all((d > 0) & (d < 1)):
        raise ValueError(f"{name} must lie strictly inside (0, 1)")
    return d


def discriminator_loss(d_real, d_fake) -> float:
    """``-mean(log d_real + log(1 - d_fake))``; minimized by the discriminator."""
    real = _probabilities("d_real", d_real)
    fake = _probabilities("d_fake", d_fake)
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: d_real {real.shape} vs d_fake {fake.shape}")
    return float(-(np.mean(np.log(real)) + np.mean(np.log1p(-fake))))


def generator_loss(d_fake, x, g, lambda_adv: float = 1.0, lambda_l1: float = 100.0) -> float:
    """Non-saturating adversarial term plus a pixelwise L1 term pulling ``g`` toward ``x``."""
    fake = _probabilities("d_fake", d_fake)
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if not fake.shape == x.shape == g.shape:
        raise ValueError(f"shape mismatch: d_fake {fake.shape}, real {x.shape}, generated {g.shape}")
    if lambda_adv < 0 or lambda_l1 < 0:
        raise ValueError("loss weights must be non-negative")
    return float(np.mean(-lambda_adv * np.log(fake) + lambda_l1 * np.abs(x - g)))
