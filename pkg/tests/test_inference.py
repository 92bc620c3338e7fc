import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from kpforge.dataset import KeypointSchema
from kpforge.heatmaps import render_pyramid, render_targets
from kpforge.inference import (DecodeConfig, Detection, benchmark_decode, benchmark_latency,
                               decode_heatmaps, detect)
from kpforge.model import ModelConfig, build_model

from conftest import make_annotation

SINGLE = KeypointSchema("screwdriver", ("tip",))
MIXED = KeypointSchema("open_wrench", ("end_a", "end_b", "middle"), (("end_a", "end_b"),))


def oracle_decode(values, schema, threshold, max_peaks=None, scale=(1.0, 1.0)):
    """Pixel-by-pixel scan, written independently of the vectorised decoder."""
    out = []
    for c, members in enumerate(schema.channels):
        plane = values[c]
        h, w = plane.shape
        best = None
        for r in range(h):
            for col in range(w):
                if best is None or plane[r, col] > plane[best]:
                    best = (r, col)
        name = "+".join(members)
        if len(members) == 1:
            if plane[best] >= threshold:
                out.append(Detection(name, best[1] * scale[0], best[0] * scale[1], float(plane[best])))
            continue
        peaks = []
        for r in range(h):
            for col in range(w):
                v = plane[r, col]
                if v < threshold:
                    continue
                neighbours = [plane[r + dr, col + dc] for dr in (-1, 0, 1) for dc in (-1, 0, 1)
                              if (dr or dc) and 0 <= r + dr < h and 0 <= col + dc < w]
                if all(v > n for n in neighbours):
                    peaks.append((-v, r, col))
        peaks.sort()
        peaks = peaks[:max_peaks or len(members)]
        if not peaks and plane[best] >= threshold:
            peaks = [(-plane[best], best[0], best[1])]
        out += [Detection(name, col * scale[0], r * scale[1], float(-nv)) for nv, r, col in peaks]
    return out


def test_single_argmax_example():
    stack = np.zeros((1, 56, 56))
    stack[0, 34, 12] = 0.8
    assert decode_heatmaps(stack, SINGLE) == [Detection("tip", 12, 34, 0.8)]


def test_below_threshold_is_empty():
    assert decode_heatmaps(np.full((2, 20, 20), 0.49), MIXED) == []


def test_merged_channel_two_peaks():
    ann = make_annotation([("end_a", 60.0, 100.0), ("end_b", 110.0, 100.0), ("middle", 85.0, 120.0)],
                          tool="open_wrench")
    stack = render_targets(ann, MIXED, 224)
    dets = decode_heatmaps(stack, MIXED)
    merged = sorted((d.x, d.y) for d in dets if d.name == "end_a+end_b")
    assert merged == [(60, 100), (110, 100)]
    assert [d.name for d in dets].count("middle") == 1


def test_channel_mismatch():
    with pytest.raises(ValueError):
        decode_heatmaps(np.zeros((2, 8, 8)), SINGLE)


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(confidence_threshold=1.5)
    with pytest.raises(ValueError):
        DecodeConfig(max_peaks_per_group=0)


def random_stack(rng, channels, size):
    kind = rng.integers(3)
    if kind == 0:
        return rng.random((channels, size, size))
    if kind == 1:  # coarse quantisation forces ties and plateaus
        return rng.integers(0, 4, (channels, size, size)) / 3.0
    stack = np.zeros((channels, size, size))
    for c in range(channels):
        for _ in range(rng.integers(0, 4)):
            r, col = rng.integers(size, size=2)
            stack[c, r, col] = rng.choice([0.3, 0.6, 0.9])
    return stack


def test_decode_matches_exhaustive_oracle():
    rng = np.random.default_rng(7)
    for trial in range(240):
        schema = MIXED if trial % 2 else SINGLE
        size = int(rng.integers(3, 14))
        values = random_stack(rng, schema.num_channels, size)
        thr = float(rng.choice([0.0, 0.25, 0.5, 0.9]))
        peaks = int(rng.integers(1, 4))
        scale = (float(rng.choice([1, 4])), float(rng.choice([1, 2])))
        got = decode_heatmaps(values, schema, DecodeConfig(thr, peaks, scale))
        assert got == oracle_decode(values, schema, thr, peaks, scale), trial


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10 ** 6), low=st.floats(0, 1), high=st.floats(0, 1))
def test_threshold_monotone(seed, low, high):
    low, high = min(low, high), max(low, high)
    values = random_stack(np.random.default_rng(seed), MIXED.num_channels, 12)
    strict = set(decode_heatmaps(values, MIXED, DecodeConfig(high, 3)))
    loose = set(decode_heatmaps(values, MIXED, DecodeConfig(low, 3)))
    assert strict <= loose


@settings(max_examples=60, deadline=None)
@given(ax=st.floats(0, 223), ay=st.floats(0, 223), mx=st.floats(0, 223), my=st.floats(0, 223),
       dx=st.floats(30, 90), size=st.sampled_from([56, 112, 224]))
def test_render_decode_round_trip(ax, ay, mx, my, dx, size):
    bx = ax + dx if ax + dx < 224 else ax - dx
    ann = make_annotation([("end_a", ax, ay), ("end_b", bx, ay), ("middle", mx, my)], tool="open_wrench")
    dets = decode_heatmaps(render_pyramid(ann, MIXED, [size])[0], MIXED, DecodeConfig(0.5))
    s = size / 224
    merged = [d for d in dets if d.name == "end_a+end_b"]
    assert len(merged) == 2
    # within one pixel along each axis
    for kx in (ax, bx):
        assert min(max(abs(d.x - kx * s), abs(d.y - ay * s)) for d in merged) <= 1.0
    mid, = [d for d in dets if d.name == "middle"]
    assert max(abs(mid.x - mx * s), abs(mid.y - my * s)) <= 1.0 and mid.confidence == 1.0


@settings(max_examples=40, deadline=None)
@given(x=st.floats(0, 223.4), y=st.floats(0, 223.4))
def test_scale_consistency_across_levels(x, y):
    ann = make_annotation([("tip", x, y)], tool="screwdriver")
    sizes = [14, 28, 56, 112, 224]
    points = []
    for stack in render_pyramid(ann, SINGLE, sizes):
        s = 224 / stack.width
        d, = decode_heatmaps(stack, SINGLE, DecodeConfig(0.5, output_scale=s))
        points.append((d.x, d.y, s))
    for (x0, y0, coarse), (x1, y1, _) in zip(points, points[1:]):
        assert abs(x0 - x1) <= coarse and abs(y0 - y1) <= coarse


class FixedHeads(nn.Module):
    """Stands in for a network: returns stored heatmaps whatever the input."""

    def __init__(self, planes, input_size=224):
        super().__init__()
        self.config = ModelConfig(input_size=input_size)
        self.planes = [torch.from_numpy(p[None]).float() for p in planes]

    def forward(self, x):
        return self.planes


def test_detect_scales_head_to_image():
    fine = np.zeros((1, 56, 56))
    fine[0, 14, 28] = 0.9
    coarse = np.zeros((1, 14, 14))
    coarse[0, 3, 5] = 0.9
    model = FixedHeads([coarse, fine])
    image = np.zeros((224, 224, 3), np.uint8)
    d, = detect(model, image, SINGLE)
    assert (d.x, d.y) == (112, 56)
    d, = detect(model, image, SINGLE, level=0)
    assert (d.x, d.y) == (80, 48) and d.x % 16 == 0 and d.y % 16 == 0


def test_detect_reports_original_image_pixels():
    fine = np.zeros((1, 56, 56))
    fine[0, 14, 28] = 0.9
    d, = detect(FixedHeads([fine]), np.zeros((112, 448, 3), np.uint8), SINGLE)
    assert (d.x, d.y) == (28 * 8, 14 * 2)


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    return build_model(ModelConfig.for_variant("hm", 1, 64), None, True)


def test_detect_repeatable(small_model, rng):
    image = rng.integers(0, 256, (80, 80, 3)).astype(np.uint8)
    a = detect(small_model, image, SINGLE, DecodeConfig(0.0))
    assert a == detect(small_model, image, SINGLE, DecodeConfig(0.0)) and len(a) == 1


def test_benchmark_latency_counts(small_model, rng):
    images = [rng.integers(0, 256, (64, 64, 3)).astype(np.uint8) for _ in range(5)]
    report = benchmark_latency(small_model, images, SINGLE, warmup=2, min_samples=100)
    assert report.count == 100 and report.warmup == 2
    assert 0 < report.min_s <= report.median_s <= report.max_s and report.mean_s > 0
    assert report.p95_s <= report.max_s


def test_decode_is_fast():
    schema = KeypointSchema("pliers", ("a", "b", "c"), (("a", "b"),))
    report = benchmark_decode((2, 224, 224), schema, repeats=50)
    assert report.mean_s < 5e-3
