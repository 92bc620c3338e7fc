"""PCK, PCK-vs-alpha curves, localization error and model comparison reports."""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DatasetManifest, KeypointSchema, SampleAnnotation
from .inference import DecodeConfig, Detection, detect, timing_stats
from .training import load_image

REFERENCE_ALPHA = 0.1


@dataclass(frozen=True)
class PCKResult:
    alpha: float
    correct_count: int
    total_count: int

    @property
    def pck(self) -> float:
        return self.correct_count / self.total_count if self.total_count else 0.0

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "correct_count": self.correct_count,
                "total_count": self.total_count, "pck": self.pck}

    @classmethod
    def from_dict(cls, d: dict) -> "PCKResult":
        return cls(d["alpha"], d["correct_count"], d["total_count"])


@dataclass
class ErrorStats:
    reference_alpha: float
    per_name: dict[str, dict]
    count: int
    mean: float | None
    median: float | None
    image_sizes: list[tuple[int, int]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.count == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["empty"] = self.empty
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorStats":
        return cls(d["reference_alpha"], d["per_name"], d["count"], d["mean"], d["median"],
                   [tuple(s) for s in d.get("image_sizes", [])])


@dataclass
class EvalReport:
    model_id: str
    pck: PCKResult
    curve: list[PCKResult]
    errors: ErrorStats
    timing: dict | None = None

    @property
    def alphas(self) -> list[float]:
        return [r.alpha for r in self.curve]

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "pck": self.pck.to_dict(),
                "curve": [r.to_dict() for r in self.curve], "errors": self.errors.to_dict(),
                "timing": self.timing}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["model_id"], PCKResult.from_dict(d["pck"]),
                   [PCKResult.from_dict(r) for r in d["curve"]], ErrorStats.from_dict(d["errors"]),
                   d.get("timing"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# matching ----------------------------------------------------------------

def match_keypoints(detections: Sequence[Detection], annotation: SampleAnnotation,
                    schema: KeypointSchema) -> dict[str, float]:
    """Distance from every annotated keypoint to its matched prediction (inf if unmatched).

    Merged groups assign peaks to members greedily by ascending distance; each
    peak is used at most once.
    """
    by_name: dict[str, list[Detection]] = {}
    for det in detections:
        by_name.setdefault(det.name, []).append(det)
    distances: dict[str, float] = {}
    for members in schema.channels:
        gts = [annotation.keypoint(n) for n in members]
        gts = [k for k in gts if k is not None]
        if not gts:
            continue
        peaks = sorted(by_name.get("+".join(members), []), key=lambda d: -d.confidence)
        pairs = sorted((math.hypot(p.x - k.x, p.y - k.y), gi, pi)
                       for gi, k in enumerate(gts) for pi, p in enumerate(peaks))
        used_gt, used_peak = set(), set()
        for dist, gi, pi in pairs:
            if gi in used_gt or pi in used_peak:
                continue
            used_gt.add(gi)
            used_peak.add(pi)
            distances[gts[gi].name] = dist
        for k in gts:
            distances.setdefault(k.name, math.inf)
    return distances


def _threshold(annotation: SampleAnnotation, alpha: float) -> float:
    if annotation.bbox is None or len(annotation.bbox) != 4:
        raise ValueError(f"{annotation.image_path}: bounding box required for PCK")
    x0, y0, x1, y1 = annotation.bbox
    return alpha * max(x1 - x0, y1 - y0)


def _check_inputs(detections, annotations):
    if len(detections) != len(annotations):
        raise ValueError(f"{len(detections)} detection lists for {len(annotations)} annotations")


def pck(detections: Sequence[Sequence[Detection]], annotations: Sequence[SampleAnnotation],
        alpha: float, schema: KeypointSchema) -> PCKResult:
    """Fraction of annotated keypoints (visible or not) whose prediction lies
    strictly closer than alpha * max(bbox width, bbox height)."""
    return pck_curve(detections, annotations, [alpha], schema)[0]


def pck_curve(detections: Sequence[Sequence[Detection]], annotations: Sequence[SampleAnnotation],
              alpha_grid: Sequence[float], schema: KeypointSchema) -> list[PCKResult]:
    if not alpha_grid:
        raise ValueError("alpha grid is empty")
    if any(a <= 0 for a in alpha_grid):
        raise ValueError(f"alpha must be positive, got {list(alpha_grid)}")
    if any(b <= a for a, b in zip(alpha_grid, alpha_grid[1:])):
        raise ValueError(f"alpha grid must be strictly increasing, got {list(alpha_grid)}")
    _check_inputs(detections, annotations)
    correct = [0] * len(alpha_grid)
    total = 0
    for dets, ann in zip(detections, annotations):
        dists = match_keypoints(dets, ann, schema)
        total += len(dists)
        for j, a in enumerate(alpha_grid):
            thr = _threshold(ann, a)
            correct[j] += sum(d < thr for d in dists.values())
    return [PCKResult(float(a), c, total) for a, c in zip(alpha_grid, correct)]


def localization_error(detections: Sequence[Sequence[Detection]],
                       annotations: Sequence[SampleAnnotation], schema: KeypointSchema,
                       reference_alpha: float = REFERENCE_ALPHA) -> ErrorStats:
    """Mean / median pixel distance over the keypoints counted correct at ``reference_alpha``."""
    if reference_alpha <= 0:
        raise ValueError("reference_alpha must be positive")
    _check_inputs(detections, annotations)
    per_name: dict[str, list[float]] = {}
    overall: list[float] = []
    sizes = set()
    for dets, ann in zip(detections, annotations):
        sizes.add((ann.width, ann.height))
        thr = _threshold(ann, reference_alpha)
        for name, d in match_keypoints(dets, ann, schema).items():
            if d < thr:
                per_name.setdefault(name, []).append(d)
                overall.append(d)
    summary = {n: {"count": len(v), "mean": statistics.fmean(v), "median": statistics.median(v)}
               for n, v in per_name.items()}
    return ErrorStats(reference_alpha, summary, len(overall),
                      statistics.fmean(overall) if overall else None,
                      statistics.median(overall) if overall else None, sorted(sizes))


def parse_alpha_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        if step <= 0 or stop < start:
            raise ValueError(f"bad alpha range {text!r}")
        n = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(v) for v in text.split(",") if v.strip()]


def build_report(model_id: str, detections, annotations, schema: KeypointSchema,
                 alpha_grid: Sequence[float], timing: dict | None = None) -> EvalReport:
    curve = pck_curve(detections, annotations, alpha_grid, schema)
    return EvalReport(model_id, pck(detections, annotations, REFERENCE_ALPHA, schema), curve,
                      localization_error(detections, annotations, schema), timing)


def run_detector(model, manifest: DatasetManifest, decode: DecodeConfig = DecodeConfig(0.0),
                 level: int = -1) -> tuple[list[list[Detection]], list[float]]:
    """Detections for every manifest image (in annotation pixels) plus per-image seconds."""
    detections, seconds = [], []
    for sample in manifest:
        image = load_image(manifest, sample)
        t0 = time.perf_counter()
        detections.append(detect(model, image, manifest.schema, decode, level))
        seconds.append(time.perf_counter() - t0)
    return detections, seconds


def evaluate_model(model, manifest: DatasetManifest, alpha_grid: Sequence[float],
                   model_id: str = "model", decode: DecodeConfig = DecodeConfig(0.0),
                   level: int = -1) -> EvalReport:
    """Threshold 0 by default: every channel contributes its argmax."""
    detections, seconds = run_detector(model, manifest, decode, level)
    timing = timing_stats(seconds).to_dict() if seconds else None
    return build_report(model_id, detections, manifest.samples, manifest.schema, alpha_grid, timing)


# comparison --------------------------------------------------------------

def compare_reports(reports: Sequence[EvalReport]) -> dict:
    if not reports:
        raise ValueError("no reports to compare")
    grid = reports[0].alphas
    for r in reports[1:]:
        if len(r.alphas) != len(grid) or not np.allclose(r.alphas, grid, rtol=0, atol=1e-12):
            raise ValueError(f"report '{r.model_id}' uses a different alpha grid")
    table = [{"model": r.model_id, "pck@0.1": r.pck.pck, "mean_error_px": r.errors.mean,
              "median_error_px": r.errors.median,
              "mean_latency_s": (r.timing or {}).get("mean_s")} for r in reports]
    curves = {"alphas": list(grid), "series": {r.model_id: [p.pck for p in r.curve] for r in reports}}
    return {"table": table, "curves": curves}


def format_table(comparison: dict) -> str:
    lines = [f"{'model':<24} {'PCK@0.1':>8} {'err(px)':>8}"]
    for row in comparison["table"]:
        err = row["mean_error_px"]
        lines.append(f"{row['model']:<24} {100 * row['pck@0.1']:>8.1f} "
                     f"{'-' if err is None else format(err, '.1f'):>8}")
    return "\n".join(lines)


def plot_reports(reports: Sequence[EvalReport], out_path: str | Path) -> Path:
    """PCK-vs-alpha curves next to a per-keypoint localization error bar chart."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    comparison = compare_reports(reports)
    fig, (ax_curve, ax_err) = plt.subplots(1, 2, figsize=(11, 4))
    alphas = comparison["curves"]["alphas"]
    for name, values in comparison["curves"]["series"].items():
        ax_curve.plot(alphas, [100 * v for v in values], marker="o", label=name)
    ax_curve.set_xlabel("alpha")
    ax_curve.set_ylabel("PCK (%)")
    ax_curve.set_ylim(0, 100)
    ax_curve.grid(alpha=0.3)
    ax_curve.legend()

    names = sorted({n for r in reports for n in r.errors.per_name})
    width = 0.8 / max(len(reports), 1)
    for i, r in enumerate(reports):
        vals = [r.errors.per_name.get(n, {}).get("mean", 0.0) for n in names]
        ax_err.bar(np.arange(len(names)) + i * width, vals, width, label=r.model_id)
    ax_err.set_xticks(np.arange(len(names)) + width * (len(reports) - 1) / 2)
    ax_err.set_xticklabels(names)
    ax_err.set_ylabel(f"mean error (px), correct at alpha={REFERENCE_ALPHA}")
    ax_err.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
