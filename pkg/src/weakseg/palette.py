"""Deterministic class-index color palette.

Shared between the synthetic dataset generator (which paints regions with
these colors) and the separable backbone mode (which recovers the class
layout from patch colors). Index 0 is background.
"""

import colorsys

import numpy as np

_BACKGROUND_RGB = (0.15, 0.15, 0.15)
_GOLDEN_RATIO = 0.618033988749895


def class_color(index: int):
    """RGB triple in [0, 1] for a class index (0 = background)."""
    if index == 0:
        return _BACKGROUND_RGB
    hue = (0.13 + (index - 1) * _GOLDEN_RATIO) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.7, 0.9)


def palette_array(num_classes: int) -> np.ndarray:
    """(num_classes, 3) float array of class colors."""
    return np.array([class_color(i) for i in range(num_classes)], dtype=np.float32)
