"""Write a composite dataset (PNG images + manifest) to disk."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from ..dataset import KeypointSchema, SampleAnnotation, save_schema, write_manifest
from .compose import (CANVAS_SIZE, CompositeRejected, ForegroundAsset, augment_with_distractors,
                      compose_sample, fit_background, sample_spec)

log = logging.getLogger(__name__)

MAX_RESAMPLES = 50


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (global seed, sample index)."""
    return np.random.default_rng([seed, index])


def generate_one(assets: Sequence[ForegroundAsset], backgrounds: Sequence[np.ndarray],
                 seed: int, index: int, size: int = CANVAS_SIZE, min_on_canvas: int = 1):
    """Compose sample ``index``; returns (image, annotation, mask)."""
    rng = sample_rng(seed, index)
    for _ in range(MAX_RESAMPLES):
        asset = assets[int(rng.integers(len(assets)))]
        bg = fit_background(backgrounds[int(rng.integers(len(backgrounds)))], (size, size), rng)
        try:
            spec = sample_spec(asset, rng, (size, size), min_on_canvas=min_on_canvas)
            return compose_sample(asset, bg, spec)
        except CompositeRejected:
            continue
    raise CompositeRejected(f"sample {index}: no valid composite after {MAX_RESAMPLES} tries")


def generate_dataset(assets: Sequence[ForegroundAsset], backgrounds: Sequence[np.ndarray],
                     count: int, seed: int, out_dir: str | Path,
                     distractors: Sequence[ForegroundAsset] = (), size: int = CANVAS_SIZE,
                     schema: KeypointSchema | None = None,
                     min_on_canvas: int = 1) -> list[SampleAnnotation]:
    """Generate ``count`` images under ``out_dir/images`` plus ``manifest.jsonl``.

    With a distractor pool, every odd-indexed image is the occlusion copy
    (distractor in front or swapped background) of the image before it.
    A schema without merge groups is written when none is given.
    ``min_on_canvas`` is the number of keypoints every placement must keep
    inside the canvas (capped at the asset's keypoint count).
    """
    if not assets or not backgrounds:
        raise ValueError("need at least one asset and one background")
    tools = {a.tool_name for a in assets}
    if len(tools) != 1:
        raise ValueError(f"assets must all depict one tool, got {sorted(tools)}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if schema is None:
        names = [n for n, _, _ in assets[0].keypoints]
        schema = KeypointSchema(tools.pop(), tuple(names))
    save_schema(schema, out_dir / "schema.json")

    samples: list[SampleAnnotation] = []
    base = None
    for i in range(count):
        if distractors and i % 2 == 1 and base is not None:
            image, annotation, mask = base
            image, annotation = augment_with_distractors(
                image, annotation, distractors, backgrounds,
                seed=int(sample_rng(seed, i).integers(2**31)), mask=mask)
        else:
            image, annotation, mask = generate_one(assets, backgrounds, seed, i, size, min_on_canvas)
            base = (image, annotation, mask)
        rel = f"images/{i:06d}.png"
        cv2.imwrite(str(out_dir / rel), image)
        annotation = replace(annotation, image_path=rel)
        annotation.validate(schema)
        samples.append(annotation)
        if (i + 1) % 1000 == 0:
            log.info("generated %d / %d", i + 1, count)
    write_manifest(samples, out_dir / "manifest.jsonl")
    return samples
