"""Keypoint schema, sample annotations and line-delimited dataset manifests."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

SOURCES = ("synthetic3d", "composite2d", "real")
RECORD_KEYS = {"image", "width", "height", "bbox", "tool", "source", "keypoints"}
KEYPOINT_KEYS = {"name", "x", "y", "visible"}


class DatasetError(ValueError):
    """Base class for manifest and schema problems."""


class SchemaError(DatasetError):
    pass


class ManifestParseError(DatasetError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ManifestValidationError(DatasetError):
    def __init__(self, field_name: str, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}field '{field_name}': {message}")
        self.field = field_name
        self.message = message
        self.line = line


@dataclass(frozen=True)
class KeypointSchema:
    """Ordered keypoint names of one tool plus groups that share a heatmap channel.

    Channels are laid out in keypoint order; a merge group occupies the slot of
    its first member and is named by joining its members with ``+``.
    """

    tool_name: str
    keypoint_names: tuple[str, ...]
    merge_groups: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "keypoint_names", tuple(self.keypoint_names))
        object.__setattr__(self, "merge_groups", tuple(tuple(g) for g in self.merge_groups))
        if not self.tool_name:
            raise SchemaError("tool_name must be non-empty")
        names = self.keypoint_names
        if not names:
            raise SchemaError("schema needs at least one keypoint")
        if any(not n for n in names):
            raise SchemaError("keypoint names must be non-empty")
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate keypoint names in {list(names)}")
        seen: set[str] = set()
        for group in self.merge_groups:
            if not group:
                raise SchemaError("merge groups must be non-empty")
            for name in group:
                if name not in names:
                    raise SchemaError(f"merge group member '{name}' is not a keypoint")
                if name in seen:
                    raise SchemaError(f"keypoint '{name}' appears in more than one merge group")
                seen.add(name)

    # channel layout -----------------------------------------------------

    @property
    def channels(self) -> tuple[tuple[str, ...], ...]:
        """Members of each heatmap channel, in channel order."""
        group_of = {n: g for g in self.merge_groups for n in g}
        out: list[tuple[str, ...]] = []
        for name in self.keypoint_names:
            members = group_of.get(name, (name,))
            if members not in out:
                out.append(members)
        return tuple(out)

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple("+".join(m) for m in self.channels)

    @property
    def num_channels(self) -> int:
        return len(self.channels)

    def channel_of(self, keypoint_name: str) -> int:
        for i, members in enumerate(self.channels):
            if keypoint_name in members:
                return i
        raise SchemaError(f"unknown keypoint '{keypoint_name}' for tool '{self.tool_name}'")

    def is_merged(self, channel: int) -> bool:
        return len(self.channels[channel]) > 1

    # serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "tool": self.tool_name,
            "keypoints": list(self.keypoint_names),
            "merge_groups": [list(g) for g in self.merge_groups],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KeypointSchema":
        try:
            return cls(data["tool"], tuple(data["keypoints"]),
                       tuple(tuple(g) for g in data.get("merge_groups", [])))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema object: {exc}") from exc


def load_schema(path: str | Path) -> KeypointSchema:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    return KeypointSchema.from_dict(data)


def save_schema(schema: KeypointSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Keypoint:
    name: str
    x: float
    y: float
    visible: bool = True


@dataclass(frozen=True)
class SampleAnnotation:
    """One image with its keypoints and the object's bounding box.

    Coordinates are continuous pixels with the origin at the centre of the
    top-left pixel.
    """

    image_path: str
    width: int
    height: int
    bbox: tuple[float, float, float, float]
    keypoints: tuple[Keypoint, ...]
    tool_name: str
    source: str = "real"

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        object.__setattr__(self, "keypoints", tuple(self.keypoints))

    def validate(self, schema: KeypointSchema | None = None) -> None:
        """Raise ManifestValidationError / SchemaError if an invariant is broken."""
        if not isinstance(self.width, int) or self.width <= 0:
            raise ManifestValidationError("width", f"must be a positive integer, got {self.width!r}")
        if not isinstance(self.height, int) or self.height <= 0:
            raise ManifestValidationError("height", f"must be a positive integer, got {self.height!r}")
        if len(self.bbox) != 4 or not all(math.isfinite(v) for v in self.bbox):
            raise ManifestValidationError("bbox", "must be four finite numbers")
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 < x1 <= self.width):
            raise ManifestValidationError("bbox", f"need 0 <= x_min < x_max <= width, got {self.bbox}")
        if not (0 <= y0 < y1 <= self.height):
            raise ManifestValidationError("bbox", f"need 0 <= y_min < y_max <= height, got {self.bbox}")
        if self.source not in SOURCES:
            raise ManifestValidationError("source", f"must be one of {SOURCES}, got {self.source!r}")
        names = [k.name for k in self.keypoints]
        if len(set(names)) != len(names):
            raise ManifestValidationError("keypoints", f"duplicate keypoint names {names}")
        for kp in self.keypoints:
            if not (math.isfinite(kp.x) and math.isfinite(kp.y)):
                raise ManifestValidationError("keypoints", f"'{kp.name}' has non-finite coordinates")
            if kp.visible and not (0 <= kp.x < self.width and 0 <= kp.y < self.height):
                raise ManifestValidationError(
                    "keypoints", f"visible keypoint '{kp.name}' at ({kp.x}, {kp.y}) outside "
                    f"[0, {self.width}) x [0, {self.height})")
        if schema is not None:
            if self.tool_name != schema.tool_name:
                raise SchemaError(f"annotation tool '{self.tool_name}' does not match schema "
                                  f"tool '{schema.tool_name}'")
            for kp in self.keypoints:
                if kp.name not in schema.keypoint_names:
                    raise SchemaError(f"unknown keypoint '{kp.name}' for tool '{schema.tool_name}'")

    def keypoint(self, name: str) -> Keypoint | None:
        for kp in self.keypoints:
            if kp.name == name:
                return kp
        return None

    def scaled(self, sx: float, sy: float | None = None, width: int | None = None,
               height: int | None = None) -> "SampleAnnotation":
        """Annotation expressed at another resolution (coordinates multiplied by sx, sy)."""
        sy = sx if sy is None else sy
        x0, y0, x1, y1 = self.bbox
        return replace(
            self,
            width=width if width is not None else max(1, int(round(self.width * sx))),
            height=height if height is not None else max(1, int(round(self.height * sy))),
            bbox=(x0 * sx, y0 * sy, x1 * sx, y1 * sy),
            keypoints=tuple(replace(k, x=k.x * sx, y=k.y * sy) for k in self.keypoints),
        )

    def to_record(self) -> dict:
        return {
            "image": self.image_path,
            "width": self.width,
            "height": self.height,
            "bbox": list(self.bbox),
            "tool": self.tool_name,
            "source": self.source,
            "keypoints": [{"name": k.name, "x": k.x, "y": k.y, "visible": k.visible}
                          for k in self.keypoints],
        }

    @classmethod
    def from_record(cls, record: dict) -> "SampleAnnotation":
        keys = set(record)
        if keys != RECORD_KEYS:
            missing, extra = RECORD_KEYS - keys, keys - RECORD_KEYS
            field_name = sorted(missing or extra)[0]
            raise ManifestValidationError(
                field_name, f"missing keys {sorted(missing)}, unexpected keys {sorted(extra)}")
        _expect(record["image"], str, "image")
        _expect(record["tool"], str, "tool")
        _expect(record["source"], str, "source")
        for name in ("width", "height"):
            if not isinstance(record[name], int) or isinstance(record[name], bool):
                raise ManifestValidationError(name, "must be an integer")
        bbox = record["bbox"]
        if not isinstance(bbox, list) or len(bbox) != 4 or not all(_is_number(v) for v in bbox):
            raise ManifestValidationError("bbox", "must be a list of four numbers")
        if not isinstance(record["keypoints"], list):
            raise ManifestValidationError("keypoints", "must be a list")
        keypoints = []
        for item in record["keypoints"]:
            if not isinstance(item, dict) or set(item) != KEYPOINT_KEYS:
                raise ManifestValidationError("keypoints", f"entries need keys {sorted(KEYPOINT_KEYS)}")
            if not isinstance(item["name"], str):
                raise ManifestValidationError("keypoints", "name must be a string")
            if not (_is_number(item["x"]) and _is_number(item["y"])):
                raise ManifestValidationError("keypoints", "x and y must be numbers")
            if not isinstance(item["visible"], bool):
                raise ManifestValidationError("keypoints", "visible must be a boolean")
            keypoints.append(Keypoint(item["name"], float(item["x"]), float(item["y"]), item["visible"]))
        return cls(record["image"], record["width"], record["height"], tuple(bbox),
                   tuple(keypoints), record["tool"], record["source"])


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _expect(value, kind, name):
    if not isinstance(value, kind):
        raise ManifestValidationError(name, f"must be of type {kind.__name__}")


@dataclass
class DatasetManifest:
    root: Path
    samples: list[SampleAnnotation]
    schema: KeypointSchema

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[SampleAnnotation]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> SampleAnnotation:
        return self.samples[index]

    def image_file(self, sample: SampleAnnotation) -> Path:
        return self.root / sample.image_path

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return DatasetManifest(self.root, [self.samples[i] for i in indices], self.schema)


def _check_under_root(root: Path, rel: str) -> None:
    resolved = (root / rel).resolve()
    if not resolved.is_relative_to(root.resolve()):
        raise ManifestValidationError("image", f"path '{rel}' escapes the dataset root")


def load_manifest(path: str | Path, schema: KeypointSchema,
                  root: str | Path | None = None) -> DatasetManifest:
    """Read a line-delimited JSON manifest, validating every record.

    ``root`` defaults to the directory containing the manifest. Blank lines are
    skipped; line numbers in errors are 1-based.
    """
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(lineno, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise ManifestParseError(lineno, "record must be a JSON object")
            try:
                sample = SampleAnnotation.from_record(record)
                sample.validate()
                _check_under_root(root, sample.image_path)
            except ManifestValidationError as exc:
                raise ManifestValidationError(exc.field, exc.message, lineno) from exc
            try:
                sample.validate(schema)
            except SchemaError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            samples.append(sample)
    return DatasetManifest(root, samples, schema)


def write_manifest(samples: Iterable[SampleAnnotation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps(sample.to_record()) + "\n")


def split_dataset(manifest: DatasetManifest, validation_fraction: float = 0.1,
                  seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded random split into (train, validation); both keep manifest order."""
    n = len(manifest)
    if n == 0:
        raise DatasetError("cannot split an empty manifest")
    if not 0 < validation_fraction < 1:
        raise DatasetError(f"validation_fraction must be in (0, 1), got {validation_fraction}")
    if n < 2:
        raise DatasetError("need at least two samples to split")
    n_val = min(n - 1, max(1, round(validation_fraction * n)))
    order = np.random.default_rng(seed).permutation(n)
    val_idx = sorted(order[:n_val].tolist())
    train_idx = sorted(order[n_val:].tolist())
    return manifest.subset(train_idx), manifest.subset(val_idx)

