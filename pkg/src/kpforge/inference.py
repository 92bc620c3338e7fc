"""Turn heatmaps into keypoint detections and time the full image-to-keypoints path."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import torch

from .dataset import KeypointSchema
from .heatmaps import HeatmapStack
from .model import HeatmapNet, preprocess


@dataclass(frozen=True)
class Detection:
    name: str
    x: float
    y: float
    confidence: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DecodeConfig:
    confidence_threshold: float = 0.5
    max_peaks_per_group: int | None = None  # None: the group's member count
    output_scale: float | tuple[float, float] = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError(f"confidence_threshold must be in [0, 1], got {self.confidence_threshold}")
        if self.max_peaks_per_group is not None and self.max_peaks_per_group < 1:
            raise ValueError("max_peaks_per_group must be >= 1")

    @property
    def scale_xy(self) -> tuple[float, float]:
        s = self.output_scale
        return (float(s), float(s)) if np.isscalar(s) else (float(s[0]), float(s[1]))


def strict_local_maxima(plane: np.ndarray) -> np.ndarray:
    """Boolean map of pixels strictly greater than all in-bounds 8-neighbours."""
    h, w = plane.shape
    padded = np.pad(plane.astype(np.float64), 1, constant_values=-np.inf)
    peak = np.ones((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr or dc:
                peak &= plane > padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
    return peak


def decode_channel(plane: np.ndarray, merged: bool, threshold: float,
                   max_peaks: int) -> list[tuple[int, int, float]]:
    """(row, col, value) peaks of one channel, strongest first.

    Single keypoints use the global argmax (first in row-major order on ties).
    Merged channels use strict 3x3 local maxima; a channel whose maximum sits on
    a plateau falls back to the global argmax.
    """
    flat = int(np.argmax(plane))
    r, c = divmod(flat, plane.shape[1])
    top = float(plane[r, c])
    if not merged:
        return [(r, c, top)] if top >= threshold else []
    rows, cols = np.nonzero(strict_local_maxima(plane) & (plane >= threshold))
    values = plane[rows, cols]
    # np.nonzero is row-major, so a stable sort keeps scan order among equal values
    order = np.argsort(-values, kind="stable")[:max_peaks]
    peaks = [(int(rows[i]), int(cols[i]), float(values[i])) for i in order]
    if not peaks and top >= threshold:
        peaks = [(r, c, top)]
    return peaks


def decode_heatmaps(stack: HeatmapStack | np.ndarray, schema: KeypointSchema,
                    config: DecodeConfig = DecodeConfig()) -> list[Detection]:
    values = stack.values if isinstance(stack, HeatmapStack) else np.asarray(stack)
    if values.ndim != 3 or values.shape[0] != schema.num_channels:
        raise ValueError(f"stack has shape {values.shape}, schema expects {schema.num_channels} channels")
    sx, sy = config.scale_xy
    detections = []
    for c, members in enumerate(schema.channels):
        merged = len(members) > 1
        max_peaks = config.max_peaks_per_group or len(members)
        name = "+".join(members)
        for r, col, v in decode_channel(values[c], merged, config.confidence_threshold, max_peaks):
            detections.append(Detection(name, col * sx, r * sy, v))
    return detections


def predict_heatmaps(model: HeatmapNet, image: np.ndarray) -> list[np.ndarray]:
    """Eval-mode forward of one BGR image; (C, H, W) arrays for every head."""
    model.eval()
    with torch.no_grad():
        outputs = model(preprocess(image, model.config.input_size))
    return [o[0].numpy() for o in outputs]


def detect(model: HeatmapNet, image: np.ndarray, schema: KeypointSchema,
           config: DecodeConfig = DecodeConfig(), level: int = -1) -> list[Detection]:
    """Detect keypoints in a BGR image of any size.

    ``level`` indexes the model's heads (default: finest). Coordinates are
    reported in the pixel frame of ``image``.
    """
    heads = predict_heatmaps(model, image)
    plane = heads[level]
    h, w = image.shape[:2]
    scale = (w / plane.shape[2], h / plane.shape[1])
    return decode_heatmaps(plane, schema, DecodeConfig(config.confidence_threshold,
                                                       config.max_peaks_per_group, scale))


@dataclass
class TimingReport:
    count: int
    warmup: int
    mean_s: float
    median_s: float
    p95_s: float
    min_s: float
    max_s: float
    fps: float
    device: str = "cpu"
    threads: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def timing_stats(samples: list[float], warmup: int = 0) -> TimingReport:
    if not samples:
        raise ValueError("no timing samples")
    mean = statistics.fmean(samples)
    return TimingReport(
        count=len(samples), warmup=warmup, mean_s=mean, median_s=statistics.median(samples),
        p95_s=float(np.percentile(samples, 95)), min_s=min(samples), max_s=max(samples),
        fps=1.0 / mean if mean > 0 else float("inf"), threads=torch.get_num_threads())


def benchmark_latency(model: HeatmapNet, images: Iterable[np.ndarray], schema: KeypointSchema,
                      config: DecodeConfig = DecodeConfig(), warmup: int = 10,
                      min_samples: int = 100) -> TimingReport:
    """Per-image wall time of preprocessing + forward + decode, after ``warmup`` untimed runs.

    ``images`` is cycled until ``min_samples`` timed runs are collected.
    """
    pool = list(images)
    if not pool:
        raise ValueError("need at least one image")
    model.eval()
    for i in range(warmup):
        detect(model, pool[i % len(pool)], schema, config)
    samples = []
    i = 0
    while len(samples) < min_samples:
        image = pool[i % len(pool)]
        t0 = time.perf_counter()
        detect(model, image, schema, config)
        samples.append(time.perf_counter() - t0)
        i += 1
    return timing_stats(samples, warmup)


def benchmark_decode(shape: tuple[int, int, int], schema: KeypointSchema, repeats: int = 100,
                     seed: int = 0) -> TimingReport:
    """Decode-only timing on random stacks of ``shape`` (channels, height, width)."""
    rng = np.random.default_rng(seed)
    stacks = [rng.random(shape) for _ in range(min(repeats, 10))]
    samples = []
    for i in range(repeats):
        t0 = time.perf_counter()
        decode_heatmaps(stacks[i % len(stacks)], schema)
        samples.append(time.perf_counter() - t0)
    return timing_stats(samples)
