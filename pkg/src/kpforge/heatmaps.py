"""Gaussian heatmap targets at one resolution or at every supervision level."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import KeypointSchema, SampleAnnotation


class HeatmapConfigError(ValueError):
    pass


@dataclass
class HeatmapStack:
    """Per-channel probability planes, shape (channels, height, width)."""

    values: np.ndarray
    channel_names: tuple[str, ...]

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


HeatmapPyramid = list[HeatmapStack]


def sigma_for(size: int) -> float:
    return size / 64.0


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def peak_pixel(v: float, size: int) -> int:
    """Rounded grid index of a coordinate; in-frame values in the last half pixel stay on the grid."""
    i = round_half_up(v)
    return size - 1 if i == size and v < size else i


def gaussian_kernel(size: int, cx: int, cy: int, sigma: float) -> np.ndarray:
    """Unnormalised Gaussian on a size x size grid, exactly 1.0 at pixel (cx, cy)."""
    xs = np.arange(size, dtype=np.float64) - cx
    ys = np.arange(size, dtype=np.float64) - cy
    # separable evaluation keeps exp(0) == 1.0 exact at the centre
    gx = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    gy = np.exp(-(ys * ys) / (2.0 * sigma * sigma))
    return np.outer(gy, gx)


def render_targets(annotation: SampleAnnotation, schema: KeypointSchema,
                   size: int) -> HeatmapStack:
    """Render one square heatmap stack of side ``size``.

    ``annotation`` must already be expressed at the target resolution. Every
    keypoint present in the annotation (visible or not) places a kernel centred
    on its rounded pixel; members of a merge group are summed and clamped to 1.
    """
    if size < 1:
        raise HeatmapConfigError(f"size must be >= 1, got {size}")
    sigma = sigma_for(size)
    out = np.zeros((schema.num_channels, size, size), dtype=np.float64)
    for c, members in enumerate(schema.channels):
        centres = []
        for name in members:
            kp = annotation.keypoint(name)
            if kp is not None:
                centres.append((peak_pixel(kp.y, size), peak_pixel(kp.x, size)))
        # canonical order so permuting group members cannot change the float sum
        for cy, cx in sorted(centres):
            out[c] += gaussian_kernel(size, cx, cy, sigma)
        if len(centres) > 1:
            np.minimum(out[c], 1.0, out=out[c])
    return HeatmapStack(out, schema.channel_names)


def check_level_sizes(level_sizes: Sequence[int]) -> None:
    if not level_sizes:
        raise HeatmapConfigError("need at least one level size")
    if level_sizes[0] < 1:
        raise HeatmapConfigError(f"level sizes must be positive, got {list(level_sizes)}")
    for a, b in zip(level_sizes, level_sizes[1:]):
        if b != 2 * a:
            raise HeatmapConfigError(
                f"level sizes must double at every step, got {list(level_sizes)}")


def render_pyramid(annotation: SampleAnnotation, schema: KeypointSchema,
                   level_sizes: Sequence[int]) -> HeatmapPyramid:
    """Render targets for every supervision level, smallest first.

    Each level is rendered from scratch with its own sigma (size / 64) after
    scaling the annotation from image pixels to that level's grid.
    """
    check_level_sizes(level_sizes)
    stacks = []
    for size in level_sizes:
        scaled = annotation.scaled(size / annotation.width, size / annotation.height,
                                   width=size, height=size)
        stacks.append(render_targets(scaled, schema, size))
    return stacks


def save_stack_images(stack: HeatmapStack, out_dir: str | Path, prefix: str = "heatmap") -> list[Path]:
    """Debug helper: one 8-bit grayscale PNG per channel."""
    import cv2

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, plane in zip(stack.channel_names, stack.values):
        path = out_dir / f"{prefix}_{name}.png"
        cv2.imwrite(str(path), np.clip(plane * 255.0 + 0.5, 0, 255).astype(np.uint8))
        paths.append(path)
    return paths
