import json

import numpy as np
import pytest

from kpforge.dataset import Keypoint, KeypointSchema, SampleAnnotation


@pytest.fixture
def wrench_schema():
    return KeypointSchema("wrench", ("open_end", "ring_end"))


@pytest.fixture
def merged_schema():
    return KeypointSchema("open_wrench", ("end_a", "end_b", "middle"), (("end_a", "end_b"),))


def make_annotation(points, width=224, height=224, tool="wrench", bbox=None, source="synthetic3d",
                    image="img.png"):
    kps = tuple(Keypoint(n, float(x), float(y), v) for n, x, y, v in
                ((p + (True,)) if len(p) == 3 else p for p in points))
    return SampleAnnotation(image, width, height, bbox or (0, 0, width, height), kps, tool, source)


@pytest.fixture
def annotation_factory():
    return make_annotation


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary: tests/test_acceptance.py records one verdict per criterion
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[number] = (passed, title, detail)
    print(f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, title, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
