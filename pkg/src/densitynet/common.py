"""Constants and small value types shared across the pipeline."""

from dataclasses import dataclass

import numpy as np

VIEWS = ("L-CC", "R-CC", "L-MLO", "R-MLO")
N_CLASSES = 4
MAX_INTENSITY = 65535

DENSITY_PHRASES = (
    "almost entirely fatty",
    "scattered areas of fibroglandular density",
    "heterogeneously dense",
    "extremely dense",
)

# Screening-population exam counts by density (rows 0-3) and overall BI-RADS (columns 0-2).
REFERENCE_COUNTS = np.array(
    [
        [1702, 9803, 8434],
        [9607, 40060, 35998],
        [12656, 37167, 34029],
        [1839, 5157, 4727],
    ]
)
REFERENCE_TOTAL = int(REFERENCE_COUNTS.sum())  # 201179
EXCLUDED_EXAMS = 519
DENSITY_MARGINALS = REFERENCE_COUNTS.sum(axis=1) / REFERENCE_TOTAL
BIRADS_GIVEN_DENSITY = REFERENCE_COUNTS / REFERENCE_COUNTS.sum(axis=1, keepdims=True)
MISSING_DENSITY_FRACTION = EXCLUDED_EXAMS / (REFERENCE_TOTAL + EXCLUDED_EXAMS)


def is_right(view):
    return view.startswith("R")


def is_mlo(view):
    return view.endswith("MLO")


@dataclass
class ViewImage:
    """A single-channel 16-bit mammogram view."""

    view: str
    pixels: np.ndarray

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"unknown view kind {self.view!r}")
        if self.pixels.ndim != 2:
            raise ValueError(f"{self.view}: expected a 2-d pixel grid, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint16:
            self.pixels = np.clip(np.rint(self.pixels), 0, MAX_INTENSITY).astype(np.uint16)

    @property
    def shape(self):
        return self.pixels.shape


def superclass(label):
    """0 for not dense (classes 0, 1), 1 for dense (classes 2, 3)."""
    return int(label >= 2)
