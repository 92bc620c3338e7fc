"""Multiscale heatmap loss, label-consistent augmentation and the training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .dataset import DatasetManifest, SampleAnnotation
from .heatmaps import render_pyramid
from .model import HeatmapNet, preprocess, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")


class AugmentationError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def multiscale_loss(predictions: Sequence[torch.Tensor], targets: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over supervision levels of the mean squared error at that level."""
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} prediction levels vs {len(targets)} target levels")
    total = None
    for k, (p, t) in enumerate(zip(predictions, targets)):
        if p.shape != t.shape:
            raise ValueError(f"level {k}: prediction {tuple(p.shape)} vs target {tuple(t.shape)}")
        level = torch.mean((p - t) ** 2)
        total = level if total is None else total + level
    if total is None:
        raise ValueError("no levels to compare")
    return total


# augmentation ------------------------------------------------------------

Range = tuple[float, float]


@dataclass(frozen=True)
class AugmentationConfig:
    """Magnitude ranges; every enabled op is applied with a value drawn uniformly from its range."""

    affine: bool = True
    rotation: Range = (-25.0, 25.0)          # degrees
    translate_x: Range = (-0.1, 0.1)         # fraction of width
    translate_y: Range = (-0.1, 0.1)         # fraction of height
    scale: Range = (0.8, 1.2)
    shear: Range = (-8.0, 8.0)               # degrees
    perspective: bool = True
    perspective_jitter: float = 0.05         # max corner offset, fraction of size
    blur: bool = True
    blur_radius: Range = (0.0, 2.0)          # Gaussian sigma, pixels
    add: bool = True
    add_value: Range = (-20.0, 20.0)
    multiply: bool = True
    multiply_value: Range = (0.8, 1.2)
    noise: bool = True
    noise_sigma: Range = (0.0, 8.0)
    max_retries: int = 10

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (tuple, list)):
                object.__setattr__(self, f.name, tuple(float(x) for x in v))
                if len(v) != 2 or v[0] > v[1]:
                    raise ValueError(f"{f.name}: expected (low, high) with low <= high, got {v}")
        if self.scale[0] <= 0 or self.multiply_value[0] < 0:
            raise ValueError("scale and multiply ranges must be positive")
        if self.blur_radius[0] < 0 or self.noise_sigma[0] < 0 or self.perspective_jitter < 0:
            raise ValueError("blur, noise and perspective magnitudes must be non-negative")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(affine=False, perspective=False, blur=False, add=False, multiply=False, noise=False)

    @property
    def geometric(self) -> bool:
        return self.affine or self.perspective


def _affine_matrix(rng: np.random.Generator, cfg: AugmentationConfig, w: int, h: int) -> np.ndarray:
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(rng.uniform(*cfg.rotation))
    shear = math.tan(math.radians(rng.uniform(*cfg.shear)))
    s = rng.uniform(*cfg.scale)
    tx = rng.uniform(*cfg.translate_x) * w
    ty = rng.uniform(*cfg.translate_y) * h
    rot = np.array([[math.cos(theta), -math.sin(theta), 0], [math.sin(theta), math.cos(theta), 0], [0, 0, 1]])
    shr = np.array([[1, shear, 0], [0, 1, 0], [0, 0, 1]])
    scl = np.diag([s, s, 1.0])
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1]])
    return back @ rot @ shr @ scl @ to_origin


def _perspective_matrix(rng: np.random.Generator, jitter: float, w: int, h: int) -> np.ndarray:
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float32)
    offsets = rng.uniform(-jitter, jitter, (4, 2)) * np.array([w, h])
    dst = (src + offsets).astype(np.float32)
    return cv2.getPerspectiveTransform(src, dst)


def transform_points(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.hstack([np.asarray(points, dtype=np.float64).reshape(-1, 2), np.ones((len(points), 1))])
    out = pts @ matrix.T
    return out[:, :2] / out[:, 2:3]


def transport_annotation(annotation: SampleAnnotation, matrix: np.ndarray) -> SampleAnnotation | None:
    """Map keypoints and bbox through a 3x3 homography; None if the bbox leaves the frame."""
    w, h = annotation.width, annotation.height
    keypoints = []
    if annotation.keypoints:
        pts = transform_points(matrix, [(k.x, k.y) for k in annotation.keypoints])
        for kp, (x, y) in zip(annotation.keypoints, pts):
            inside = 0 <= x < w and 0 <= y < h
            keypoints.append(replace(kp, x=float(x), y=float(y), visible=kp.visible and inside))
    x0, y0, x1, y1 = annotation.bbox
    corners = transform_points(matrix, [(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    bx0, by0 = max(0.0, corners[:, 0].min()), max(0.0, corners[:, 1].min())
    bx1, by1 = min(float(w), corners[:, 0].max()), min(float(h), corners[:, 1].max())
    if not (bx0 < bx1 and by0 < by1):
        return None
    return replace(annotation, bbox=(bx0, by0, bx1, by1), keypoints=tuple(keypoints))


def augment(image: np.ndarray, annotation: SampleAnnotation, config: AugmentationConfig,
            seed: int) -> tuple[np.ndarray, SampleAnnotation]:
    """Randomly transform an image; geometric ops carry keypoints and bbox along."""
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]
    if (w, h) != (annotation.width, annotation.height):
        raise ValueError(f"image is {w}x{h} but annotation says {annotation.width}x{annotation.height}")
    out = image
    if config.geometric:
        had_visible = any(k.visible for k in annotation.keypoints)
        for _ in range(config.max_retries):
            matrix = np.eye(3)
            if config.affine:
                matrix = _affine_matrix(rng, config, w, h) @ matrix
            if config.perspective:
                matrix = _perspective_matrix(rng, config.perspective_jitter, w, h) @ matrix
            moved = transport_annotation(annotation, matrix)
            if moved is not None and (not had_visible or any(k.visible for k in moved.keypoints)):
                break
        else:
            raise AugmentationError(f"no geometric transform kept a keypoint in frame after "
                                    f"{config.max_retries} tries")
        annotation = moved
        out = cv2.warpPerspective(image, matrix, (w, h), flags=cv2.INTER_LINEAR,
                                  borderMode=cv2.BORDER_CONSTANT, borderValue=0)

    photometric = config.blur or config.add or config.multiply or config.noise
    if photometric:
        img = out.astype(np.float32)
        if config.blur:
            sigma = rng.uniform(*config.blur_radius)
            if sigma > 0:
                img = cv2.GaussianBlur(img, (0, 0), sigma)
        if config.multiply:
            img = img * rng.uniform(*config.multiply_value)
        if config.add:
            img = img + rng.uniform(*config.add_value)
        if config.noise:
            sigma = rng.uniform(*config.noise_sigma)
            if sigma > 0:
                img = img + rng.normal(0.0, sigma, img.shape)
        out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    elif out is image:
        out = image.copy()
    return out, annotation


# data --------------------------------------------------------------------

def load_image(manifest: DatasetManifest, sample: SampleAnnotation) -> np.ndarray:
    path = manifest.image_file(sample)
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if image.shape[:2] != (sample.height, sample.width):
        raise ValueError(f"{path} is {image.shape[1]}x{image.shape[0]}, manifest says "
                         f"{sample.width}x{sample.height}")
    return image


class KeypointDataset(Dataset):
    """Images resized to the network input with heatmap targets for every head.

    Augmentation seeds derive from (seed, epoch, index) so an epoch is
    reproducible regardless of worker scheduling.
    """

    def __init__(self, manifest: DatasetManifest, input_size: int, level_sizes: Sequence[int],
                 augmentation: AugmentationConfig | None = None, seed: int = 0):
        self.manifest = manifest
        self.input_size = input_size
        self.level_sizes = list(level_sizes)
        self.augmentation = augmentation
        self.seed = seed
        self.epoch = 0
        self._cache: dict[int, tuple[np.ndarray, SampleAnnotation]] = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.manifest)

    def sample(self, index: int) -> tuple[np.ndarray, SampleAnnotation]:
        """Resized (un-augmented) image and annotation at input resolution."""
        if index not in self._cache:
            ann = self.manifest[index]
            image = load_image(self.manifest, ann)
            s = self.input_size
            if image.shape[:2] != (s, s):
                image = cv2.resize(image, (s, s), interpolation=cv2.INTER_AREA)
            self._cache[index] = (image, ann.scaled(s / ann.width, s / ann.height, width=s, height=s))
        return self._cache[index]

    def __getitem__(self, index: int):
        image, ann = self.sample(index)
        if self.augmentation is not None:
            seed = int(np.random.SeedSequence([self.seed, self.epoch, index]).generate_state(1)[0])
            image, ann = augment(image, ann, self.augmentation, seed)
        pyramid = render_pyramid(ann, self.manifest.schema, self.level_sizes)
        x = preprocess(image, self.input_size)[0]
        targets = [torch.from_numpy(s.values.astype(np.float32)) for s in pyramid]
        return x, targets


# optimisation ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.5e-5
    batch_size: int = 16
    max_epochs: int = 200
    early_stop_patience: int = 20
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0
    validation_fraction: float = 0.1
    min_delta: float = 1e-7

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "early_stop_patience",
                     "plateau_patience", "plateau_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.plateau_patience >= self.early_stop_patience:
            raise ValueError("plateau_patience must be smaller than early_stop_patience")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config fields {sorted(unknown)}")
        aug = data.pop("augmentation", None)
        if isinstance(aug, dict):
            data["augmentation"] = AugmentationConfig(**aug)
        elif aug is False:
            data["augmentation"] = AugmentationConfig.disabled()
        return cls(**data)


class PlateauSchedule:
    """Learning-rate decay on plateau plus early stopping, both keyed on validation loss.

    An epoch improves when the loss drops below the best so far by more than
    ``min_delta``. After ``plateau_patience`` non-improving epochs the rate is
    multiplied by ``factor`` and that counter restarts; after
    ``stop_patience`` non-improving epochs training stops.
    """

    def __init__(self, lr: float, factor: float, plateau_patience: int, stop_patience: int,
                 min_delta: float = 1e-7):
        self.lr = lr
        self.factor = factor
        self.plateau_patience = plateau_patience
        self.stop_patience = stop_patience
        self.min_delta = min_delta
        self.best = math.inf
        self.plateau_wait = 0
        self.stop_wait = 0
        self.should_stop = False

    def step(self, val_loss: float) -> bool:
        improved = val_loss < self.best - self.min_delta
        if improved:
            self.best = val_loss
            self.plateau_wait = self.stop_wait = 0
            return True
        self.plateau_wait += 1
        self.stop_wait += 1
        if self.plateau_wait >= self.plateau_patience:
            self.lr *= self.factor
            self.plateau_wait = 0
        if self.stop_wait >= self.stop_patience:
            self.should_stop = True
        return False


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    best_checkpoint: Path | None = None
    log: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def evaluate_loss(model: HeatmapNet, dataset: Dataset, batch_size: int = 16) -> float:
    """Mean multiscale loss over a dataset in inference mode (sample-weighted)."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for images, targets in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            loss = multiscale_loss(model(images), targets)
            total += float(loss) * images.shape[0]
            count += images.shape[0]
    return total / max(count, 1)


def write_log(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def train(model: HeatmapNet, train_set: Dataset, val_set: Dataset, config: TrainConfig,
          out_dir: str | Path | None = None, schema=None, progress=None) -> TrainState:
    """Adam on the trainable parameters with plateau decay, early stopping and
    best-on-validation checkpointing. The best weights are loaded back into
    ``model`` before returning.

    With ``out_dir`` and ``schema`` the best checkpoint and ``training_log.csv``
    are written there after every epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    torch.manual_seed(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("model has no trainable parameters")
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    schedule = PlateauSchedule(config.learning_rate, config.plateau_factor, config.plateau_patience,
                               config.early_stop_patience, config.min_delta)
    loader = DataLoader(train_set, batch_size=config.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(config.seed))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    state = TrainState()
    best_weights = copy.deepcopy(model.state_dict())

    for epoch in range(1, config.max_epochs + 1):
        lr = schedule.lr
        for group in optimizer.param_groups:
            group["lr"] = lr
        if hasattr(train_set, "set_epoch"):
            train_set.set_epoch(epoch)
        model.train()
        running, seen = 0.0, 0
        for batch_id, (images, targets) in enumerate(loader):
            optimizer.zero_grad()
            loss = multiscale_loss(model(images), targets)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {batch_id}, lr {lr}")
            loss.backward()
            optimizer.step()
            running += loss.item() * images.shape[0]
            seen += images.shape[0]
        train_loss = running / seen
        val_loss = evaluate_loss(model, val_set, config.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}, lr {lr}")

        improved = schedule.step(val_loss)
        state.epoch = epoch
        state.log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        if improved:
            state.best_val_loss, state.best_epoch = val_loss, epoch
            best_weights = copy.deepcopy(model.state_dict())
            if out_dir is not None and schema is not None:
                state.best_checkpoint = save_checkpoint(model, schema, out_dir)
        if out_dir is not None:
            write_log(state.log, out_dir / "training_log.csv")
        log.info("epoch %d train %.6f val %.6f lr %.2e%s", epoch, train_loss, val_loss, lr,
                 " *" if improved else "")
        if progress is not None:
            progress(state)
        if schedule.should_stop:
            state.stopped_early = epoch < config.max_epochs
            break

    model.load_state_dict(best_weights)
    model.eval()
    return state
