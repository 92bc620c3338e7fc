"""Cut-and-paste sample generation with exact label transport."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from ..dataset import Keypoint, SampleAnnotation
from .blending import BLEND_MODES, alpha_blend, laplacian_blend, poisson_blend

CANVAS_SIZE = 224
LAPLACIAN_LEVELS = 4


class CompositeRejected(Exception):
    """The composite parameters put every keypoint (or the whole mask) off the canvas; resample."""


@dataclass
class ForegroundAsset:
    """RGB cutout (H x W x 3, uint8) with an alpha mask in [0, 1] and keypoints in asset pixels."""

    image: np.ndarray
    mask: np.ndarray
    keypoints: list[tuple[str, float, float]]
    tool_name: str = ""

    def __post_init__(self):
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError("asset mask and image sizes differ")
        if not (self.mask > 0.5).any():
            raise ValueError("asset mask is empty")
        x0, y0, x1, y1 = self.mask_bbox()
        for name, x, y in self.keypoints:
            if not (x0 - 0.5 <= x <= x1 - 0.5 and y0 - 0.5 <= y <= y1 - 0.5):
                raise ValueError(f"asset keypoint '{name}' ({x}, {y}) outside the mask bounding box")

    def mask_bbox(self) -> tuple[int, int, int, int]:
        return mask_bbox(self.mask)

    @property
    def long_side(self) -> int:
        x0, y0, x1, y1 = self.mask_bbox()
        return max(x1 - x0, y1 - y0)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Pixel extent (x_min, y_min, x_max, y_max) of mask > 0.5; max is exclusive."""
    ys, xs = np.nonzero(mask > 0.5)
    if xs.size == 0:
        raise CompositeRejected("mask is empty")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


@dataclass(frozen=True)
class CompositeSpec:
    rotation: float = 0.0
    scale: float = 1.0
    translation: tuple[float, float] = (0.0, 0.0)
    blend_mode: str = "alpha"
    seed: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.blend_mode not in BLEND_MODES:
            raise ValueError(f"blend_mode must be one of {BLEND_MODES}, got {self.blend_mode!r}")


@dataclass(frozen=True)
class AffineMap:
    matrix: np.ndarray  # 2 x 3, asset -> canvas

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError("affine matrix must be 2 x 3")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise ValueError("affine map is not invertible")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_spec(cls, spec: CompositeSpec, pivot: tuple[float, float]) -> "AffineMap":
        """Rotate by ``spec.rotation`` degrees (x towards y) and scale about ``pivot``,
        then shift the pivot by ``spec.translation``."""
        theta = math.radians(spec.rotation)
        c, s = math.cos(theta) * spec.scale, math.sin(theta) * spec.scale
        px, py = pivot
        tx, ty = spec.translation
        linear = np.array([[c, -s], [s, c]])
        offset = np.array([px + tx, py + ty]) - linear @ np.array([px, py])
        return cls(np.hstack([linear, offset[:, None]]))

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self) -> "AffineMap":
        return AffineMap(cv2.invertAffineTransform(self.matrix))


def asset_pivot(asset: ForegroundAsset) -> tuple[float, float]:
    h, w = asset.mask.shape
    return (w - 1) / 2.0, (h - 1) / 2.0


def warp_asset(asset: ForegroundAsset, affine: AffineMap,
               size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Warp image and mask onto a canvas of (width, height)."""
    w, h = size
    image = cv2.warpAffine(asset.image, affine.matrix, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    mask = cv2.warpAffine(asset.mask.astype(np.float32), affine.matrix, (w, h),
                          flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return image, np.clip(mask.astype(np.float64), 0.0, 1.0)


def blend(mode: str, foreground: np.ndarray, mask: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Apply one of the blend modes and return a uint8 image."""
    if mode == "alpha":
        out = alpha_blend(foreground, mask, background)
    elif mode == "laplacian":
        out = laplacian_blend(foreground, mask, background, levels=LAPLACIAN_LEVELS)
    elif mode == "poisson":
        region = cv2.erode((mask > 0.5).astype(np.uint8), np.ones((3, 3), np.uint8))
        region[0, :] = region[-1, :] = 0
        region[:, 0] = region[:, -1] = 0
        out = poisson_blend(foreground, region, background)
    else:
        raise ValueError(f"unknown blend mode {mode!r}")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def compose_sample(asset: ForegroundAsset, background: np.ndarray, spec: CompositeSpec,
                   image_path: str = "") -> tuple[np.ndarray, SampleAnnotation, np.ndarray]:
    """Paste ``asset`` onto ``background`` (already at output size).

    Returns (image, annotation, warped mask). Keypoints off the canvas become
    invisible; raises CompositeRejected if none stays on the canvas.
    """
    h, w = background.shape[:2]
    affine = AffineMap.from_spec(spec, asset_pivot(asset))
    fg, mask = warp_asset(asset, affine, (w, h))
    keypoints = []
    for name, x, y in asset.keypoints:
        (cx, cy), = affine.apply([x, y])
        on_canvas = 0 <= cx < w and 0 <= cy < h
        keypoints.append(Keypoint(name, float(cx), float(cy), bool(on_canvas)))
    if not any(k.visible for k in keypoints):
        raise CompositeRejected("all keypoints off canvas")
    bbox = mask_bbox(mask)
    image = blend(spec.blend_mode, fg, mask, background)
    annotation = SampleAnnotation(image_path, w, h, bbox, tuple(keypoints), asset.tool_name,
                                  "composite2d")
    return image, annotation, mask


def sample_spec(asset: ForegroundAsset, rng: np.random.Generator,
                canvas: tuple[int, int] = (CANVAS_SIZE, CANVAS_SIZE),
                scale_range: tuple[float, float] = (0.3, 1.0), max_tries: int = 100,
                min_on_canvas: int = 1) -> CompositeSpec:
    """Random pose: uniform rotation, long side uniform in ``scale_range`` x canvas
    width, pivot placed uniformly on the canvas until at least ``min_on_canvas``
    keypoints (capped at the asset's count) land on it."""
    if min_on_canvas < 1:
        raise ValueError(f"min_on_canvas must be >= 1, got {min_on_canvas}")
    w, h = canvas
    needed = min(min_on_canvas, len(asset.keypoints))
    pivot = asset_pivot(asset)
    for _ in range(max_tries):
        rotation = float(rng.uniform(0.0, 360.0))
        scale = float(rng.uniform(*scale_range)) * w / asset.long_side
        target = rng.uniform([0.0, 0.0], [w, h])
        spec = CompositeSpec(rotation, scale, (float(target[0] - pivot[0]), float(target[1] - pivot[1])),
                             str(rng.choice(BLEND_MODES)), int(rng.integers(2**31)))
        if not asset.keypoints:
            return spec
        pts = AffineMap.from_spec(spec, pivot).apply([(x, y) for _, x, y in asset.keypoints])
        if np.count_nonzero((pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)) >= needed:
            return spec
    raise CompositeRejected(f"no valid placement found in {max_tries} tries")


def paste_distractor(image: np.ndarray, annotation: SampleAnnotation, distractor: ForegroundAsset,
                     spec: CompositeSpec) -> tuple[np.ndarray, SampleAnnotation]:
    """Composite ``distractor`` in front of ``image``; covered keypoints become invisible."""
    h, w = image.shape[:2]
    affine = AffineMap.from_spec(spec, asset_pivot(distractor))
    fg, mask = warp_asset(distractor, affine, (w, h))
    if not (mask > 0.5).any():
        return image.copy(), annotation
    out = blend(spec.blend_mode, fg, mask, image)
    keypoints = []
    for kp in annotation.keypoints:
        col, row = int(math.floor(kp.x + 0.5)), int(math.floor(kp.y + 0.5))
        covered = 0 <= col < w and 0 <= row < h and mask[row, col] > 0.5
        keypoints.append(replace(kp, visible=kp.visible and not covered))
    return out, replace(annotation, keypoints=tuple(keypoints))


def swap_background(image: np.ndarray, mask: np.ndarray, background: np.ndarray,
                    mode: str) -> np.ndarray:
    return blend(mode, image, mask, background)


def augment_with_distractors(image: np.ndarray, annotation: SampleAnnotation,
                             distractor_pool: Sequence[ForegroundAsset],
                             background_pool: Sequence[np.ndarray], seed: int,
                             mask: np.ndarray | None = None,
                             swap_probability: float = 0.5) -> tuple[np.ndarray, SampleAnnotation]:
    """Occlusion copy: either paste a random distractor in front of the sample or,
    when the sample's foreground ``mask`` is known, move it onto a new background."""
    if not distractor_pool or not background_pool:
        raise ValueError("distractor and background pools must be non-empty")
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]
    if rng.random() < swap_probability:
        if mask is None:
            raise ValueError("background swap needs the sample's foreground mask")
        bg = fit_background(background_pool[int(rng.integers(len(background_pool)))], (w, h), rng)
        mode = str(rng.choice(BLEND_MODES))
        return swap_background(image, mask, bg, mode), annotation
    distractor = distractor_pool[int(rng.integers(len(distractor_pool)))]
    scale = float(rng.uniform(0.2, 0.6)) * w / distractor.long_side
    pivot = asset_pivot(distractor)
    target = rng.uniform([0.0, 0.0], [w, h])
    spec = CompositeSpec(float(rng.uniform(0.0, 360.0)), scale,
                         (float(target[0] - pivot[0]), float(target[1] - pivot[1])),
                         str(rng.choice(BLEND_MODES)), seed)
    return paste_distractor(image, annotation, distractor, spec)


def fit_background(background: np.ndarray, size: tuple[int, int],
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Random square-ish crop (or the whole image without rng) resized to ``size``."""
    w, h = size
    bh, bw = background.shape[:2]
    if rng is not None and min(bh, bw) > 1:
        side = int(rng.integers(max(1, min(bh, bw) // 2), min(bh, bw) + 1))
        y0 = int(rng.integers(0, bh - side + 1))
        x0 = int(rng.integers(0, bw - side + 1))
        background = background[y0:y0 + side, x0:x0 + side]
    if background.shape[:2] == (h, w):
        return background.copy()
    return cv2.resize(background, (w, h), interpolation=cv2.INTER_AREA)


# asset I/O ---------------------------------------------------------------

def load_asset(png_path: str | Path, tool_name: str | None = None) -> ForegroundAsset:
    """PNG with alpha channel plus optional sidecar ``<stem>.json``:
    {"tool": str, "keypoints": [{"name", "x", "y"}]}."""
    png_path = Path(png_path)
    rgba = cv2.imread(str(png_path), cv2.IMREAD_UNCHANGED)
    if rgba is None:
        raise FileNotFoundError(png_path)
    if rgba.ndim != 3 or rgba.shape[2] != 4:
        raise ValueError(f"{png_path}: asset needs an alpha channel")
    sidecar = png_path.with_suffix(".json")
    keypoints, tool = [], tool_name or ""
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        tool = meta.get("tool", tool)
        keypoints = [(k["name"], float(k["x"]), float(k["y"])) for k in meta.get("keypoints", [])]
    return ForegroundAsset(rgba[:, :, :3].copy(), rgba[:, :, 3].astype(np.float64) / 255.0,
                           keypoints, tool)


def save_asset(asset: ForegroundAsset, png_path: str | Path) -> None:
    png_path = Path(png_path)
    alpha = np.clip(np.rint(asset.mask * 255.0), 0, 255).astype(np.uint8)
    cv2.imwrite(str(png_path), np.dstack([asset.image, alpha]))
    meta = {"tool": asset.tool_name,
            "keypoints": [{"name": n, "x": x, "y": y} for n, x, y in asset.keypoints]}
    png_path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_assets(directory: str | Path) -> list[ForegroundAsset]:
    return [load_asset(p) for p in sorted(Path(directory).glob("*.png"))]


def load_backgrounds(directory: str | Path) -> list[np.ndarray]:
    images = []
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"):
            img = cv2.imread(str(p), cv2.IMREAD_COLOR)
            if img is not None:
                images.append(img)
    return images
