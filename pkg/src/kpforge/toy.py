"""Procedural stand-ins for tool cutouts, backgrounds and distractors.

Used by the test suite and the quick-start demo so that the full pipeline can
run without any downloaded images.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .compositor.compose import ForegroundAsset, save_asset
from .dataset import KeypointSchema, save_schema

SCREWDRIVER = KeypointSchema("screwdriver", ("tip", "handle_end"))


def make_screwdriver(seed: int = 0, length: int = 160) -> ForegroundAsset:
    """Horizontal screwdriver: coloured handle on the left, metal shaft to the right.

    Keypoints are the shaft tip and the far end of the handle.
    """
    rng = np.random.default_rng(seed)
    handle_len = int(length * rng.uniform(0.35, 0.5))
    handle_w = int(rng.integers(18, 30))
    shaft_w = int(rng.integers(4, 8))
    h, w = handle_w + 8, length + 8
    cy = h // 2
    image = np.zeros((h, w, 3), np.uint8)
    mask = np.zeros((h, w), np.uint8)
    x0, x_handle, x_tip = 4, 4 + handle_len, 4 + length - 1

    handle_color = tuple(int(c) for c in rng.integers(30, 256, 3))
    cv2.rectangle(image, (x0, cy - handle_w // 2), (x_handle, cy + handle_w // 2), handle_color, -1)
    cv2.rectangle(mask, (x0, cy - handle_w // 2), (x_handle, cy + handle_w // 2), 255, -1)
    stripe = tuple(int(c) // 2 for c in handle_color)
    for sx in range(x0 + 6, x_handle - 3, int(rng.integers(6, 12))):
        cv2.line(image, (sx, cy - handle_w // 2 + 2), (sx, cy + handle_w // 2 - 2), stripe, 2)
    metal = int(rng.integers(150, 230))
    cv2.rectangle(image, (x_handle, cy - shaft_w // 2), (x_tip, cy + shaft_w // 2), (metal,) * 3, -1)
    cv2.rectangle(mask, (x_handle, cy - shaft_w // 2), (x_tip, cy + shaft_w // 2), 255, -1)
    # darker flat tip so the two ends differ in appearance
    cv2.rectangle(image, (x_tip - 6, cy - shaft_w // 2), (x_tip, cy + shaft_w // 2), (60, 60, 60), -1)

    keypoints = [("tip", float(x_tip), float(cy)), ("handle_end", float(x0), float(cy))]
    return ForegroundAsset(image, mask.astype(np.float64) / 255.0, keypoints, SCREWDRIVER.tool_name)


def make_background(seed: int, size: int = 256) -> np.ndarray:
    """Smooth colour field with random rectangles, circles and lines."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0, 255, (4, 4, 3)).astype(np.float32)
    image = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    image = np.clip(image, 0, 255).astype(np.uint8)
    for _ in range(int(rng.integers(3, 9))):
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        p = rng.integers(0, size, 4)
        kind = rng.integers(3)
        if kind == 0:
            cv2.rectangle(image, (int(p[0]), int(p[1])), (int(p[2]), int(p[3])), color, -1)
        elif kind == 1:
            cv2.circle(image, (int(p[0]), int(p[1])), int(rng.integers(5, size // 4)), color, -1)
        else:
            cv2.line(image, (int(p[0]), int(p[1])), (int(p[2]), int(p[3])), color,
                     int(rng.integers(1, 6)))
    noise = rng.normal(0, 6, image.shape)
    return np.clip(image + noise, 0, 255).astype(np.uint8)


def make_distractor(seed: int, size: int = 64) -> ForegroundAsset:
    """Random filled ellipse cutout without keypoints."""
    rng = np.random.default_rng(seed)
    image = np.zeros((size, size, 3), np.uint8)
    mask = np.zeros((size, size), np.uint8)
    axes = (int(rng.integers(size // 4, size // 2 - 2)), int(rng.integers(size // 6, size // 2 - 2)))
    color = tuple(int(c) for c in rng.integers(0, 256, 3))
    centre = (size // 2, size // 2)
    angle = float(rng.uniform(0, 180))
    cv2.ellipse(image, centre, axes, angle, 0, 360, color, -1)
    cv2.ellipse(mask, centre, axes, angle, 0, 360, 255, -1)
    return ForegroundAsset(image, mask.astype(np.float64) / 255.0, [], "distractor")


def write_fixture(out_dir: str | Path, n_assets: int = 1, n_backgrounds: int = 8,
                  n_distractors: int = 4, seed: int = 0) -> dict[str, Path]:
    """Write assets/, backgrounds/ and distractors/ directories under ``out_dir``."""
    out_dir = Path(out_dir)
    dirs = {k: out_dir / k for k in ("assets", "backgrounds", "distractors")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    for i in range(n_assets):
        save_asset(make_screwdriver(seed + i), dirs["assets"] / f"screwdriver_{i:02d}.png")
    for i in range(n_backgrounds):
        cv2.imwrite(str(dirs["backgrounds"] / f"bg_{i:02d}.png"), make_background(seed * 1000 + i))
    for i in range(n_distractors):
        save_asset(make_distractor(seed * 1000 + i), dirs["distractors"] / f"blob_{i:02d}.png")
    return dirs


def main(argv: list[str] | None = None) -> None:
    import argparse

    parser = argparse.ArgumentParser(prog="python -m kpforge.toy",
                                     description="write a synthetic screwdriver fixture")
    parser.add_argument("out")
    parser.add_argument("--assets", type=int, default=1)
    parser.add_argument("--backgrounds", type=int, default=8)
    parser.add_argument("--distractors", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    dirs = write_fixture(args.out, args.assets, args.backgrounds, args.distractors, args.seed)
    save_schema(SCREWDRIVER, Path(args.out) / "schema.json")
    for name, path in dirs.items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
