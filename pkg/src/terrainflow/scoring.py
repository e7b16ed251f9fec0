"""Foothold-difficulty score of a heightmap and the "hard"/"medium" rewards."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .heightmap import Heightmap

MEDIUM_TARGET_BETA = 0.055


class RewardKind(str, enum.Enum):
    HARD = "hard"
    MEDIUM = "medium"


@dataclass(frozen=True)
class ScoreWeights:
    lambda1: float = 0.3  # edges: spread of slopes
    lambda2: float = 0.5  # slopes
    lambda3: float = 0.2  # roughness
    # Alternative reading of the slope term: mean(k**2) instead of mean(k)**2.
    mean_of_squares: bool = False

    def __post_init__(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("score weights must be non-negative")


@dataclass(frozen=True)
class RewardSpec:
    kind: RewardKind = RewardKind.HARD
    target_beta: float = MEDIUM_TARGET_BETA
    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RewardKind(self.kind))
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.target_beta < 1:
            raise ValueError("target_beta must lie in (0, 1)")

    @classmethod
    def hard(cls) -> RewardSpec:
        return cls(RewardKind.HARD)

    @classmethod
    def medium(cls, target_beta: float = MEDIUM_TARGET_BETA) -> RewardSpec:
        return cls(RewardKind.MEDIUM, target_beta)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "target_beta": self.target_beta, "epsilon": self.epsilon}


def slope_field(h: Heightmap) -> np.ndarray:
    """Slope angle of every pixel divided by pi/2, in [0, 1).

    Central differences inside, one-sided differences on the border rows/cols.
    """
    if h.rows < 3 or h.cols < 3:
        raise ValueError("slope_field needs at least 3x3 pixels")
    d_row, d_col = np.gradient(h.values, h.cell_size_m, h.cell_size_m)
    return np.arctan(np.hypot(d_row, d_col)) / (math.pi / 2)


def score_terms(h: Heightmap, w: ScoreWeights = ScoreWeights()) -> tuple[float, float, float]:
    """The three weighted terms (edges, slopes, roughness) whose sum is the score."""
    k = slope_field(h)
    edges = float(np.std(k))
    slopes = float(np.mean(k**2)) if w.mean_of_squares else float(np.mean(k)) ** 2
    # Offsetting by one pixel first makes constant grids come out exactly 0.
    v = h.values - h.values.flat[0]
    roughness = float(np.mean(np.abs(v - v.mean()))) / h.h0_m
    return w.lambda1 * edges, w.lambda2 * slopes, w.lambda3 * roughness


def score(h: Heightmap, w: ScoreWeights = ScoreWeights()) -> float:
    return float(sum(score_terms(h, w)))


def reward_from_beta(beta: float, spec: RewardSpec) -> float:
    if spec.kind is RewardKind.HARD:
        return spec.epsilon + 10.0 ** (150.0 * beta - 6.0)
    return spec.epsilon + math.exp(0.1 / (abs(beta - spec.target_beta) + 0.005) - 10.0)


def reward(h: Heightmap, spec: RewardSpec, w: ScoreWeights = ScoreWeights()) -> float:
    return reward_from_beta(score(h, w), spec)
