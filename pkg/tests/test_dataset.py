import json

import pytest
from hypothesis import given, settings, strategies as st

from kpforge.dataset import (DatasetError, DatasetManifest, Keypoint, KeypointSchema,
                             ManifestParseError, ManifestValidationError, SampleAnnotation,
                             SchemaError, load_manifest, load_schema, save_schema, split_dataset,
                             write_manifest)

from conftest import make_annotation, write_lines


def record(x=10.0, y=20.0, **overrides):
    rec = {
        "image": "images/0.png", "width": 224, "height": 224, "bbox": [5, 5, 120, 90],
        "tool": "wrench", "source": "synthetic3d",
        "keypoints": [{"name": "open_end", "x": x, "y": y, "visible": True},
                      {"name": "ring_end", "x": 100.5, "y": 80.25, "visible": True}],
    }
    rec.update(overrides)
    return rec


class TestSchema:
    def test_channel_count_counts_groups_once(self, merged_schema):
        assert merged_schema.num_channels == 2
        assert merged_schema.channel_names == ("end_a+end_b", "middle")
        assert merged_schema.channel_of("end_b") == 0
        assert merged_schema.is_merged(0) and not merged_schema.is_merged(1)

    def test_ungrouped(self, wrench_schema):
        assert wrench_schema.num_channels == 2
        assert wrench_schema.channel_names == ("open_end", "ring_end")

    @pytest.mark.parametrize("names,groups", [
        ((), ()),
        (("a", "a"), ()),
        (("a", ""), ()),
        (("a", "b"), (("a", "c"),)),
        (("a", "b", "c"), (("a", "b"), ("b", "c"))),
    ])
    def test_invalid(self, names, groups):
        with pytest.raises(SchemaError):
            KeypointSchema("t", names, groups)

    def test_file_round_trip(self, tmp_path, merged_schema):
        save_schema(merged_schema, tmp_path / "schema.json")
        assert load_schema(tmp_path / "schema.json") == merged_schema
        assert json.loads((tmp_path / "schema.json").read_text()) == {
            "tool": "open_wrench", "keypoints": ["end_a", "end_b", "middle"],
            "merge_groups": [["end_a", "end_b"]]}


class TestLoadManifest:
    def test_single_record(self, tmp_path, wrench_schema):
        m = load_manifest(write_lines(tmp_path / "m.jsonl", [record()]), wrench_schema)
        assert len(m) == 1
        assert m[0].keypoint("ring_end") == Keypoint("ring_end", 100.5, 80.25, True)
        assert m[0].bbox == (5.0, 5.0, 120.0, 90.0)
        assert m.image_file(m[0]) == tmp_path / "images/0.png"

    def test_x_equal_width_rejected_with_line(self, tmp_path, wrench_schema):
        path = write_lines(tmp_path / "m.jsonl", [record(), record(x=224)])
        with pytest.raises(ManifestValidationError) as err:
            load_manifest(path, wrench_schema)
        assert err.value.line == 2 and err.value.field == "keypoints"

    def test_invisible_keypoint_may_leave_frame(self, tmp_path, wrench_schema):
        rec = record()
        rec["keypoints"][0].update(x=-12.0, visible=False)
        m = load_manifest(write_lines(tmp_path / "m.jsonl", [rec]), wrench_schema)
        assert not m[0].keypoint("open_end").visible

    def test_malformed_json_names_line(self, tmp_path, wrench_schema):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(record()) + "\n{not json\n")
        with pytest.raises(ManifestParseError, match="line 2"):
            load_manifest(path, wrench_schema)

    @pytest.mark.parametrize("overrides,field", [
        ({"bbox": [50, 5, 40, 90]}, "bbox"),
        ({"bbox": [0, 0, 225, 90]}, "bbox"),
        ({"width": 0}, "width"),
        ({"width": 12.5}, "width"),
        ({"source": "render"}, "source"),
        ({"image": "../outside.png"}, "image"),
    ])
    def test_invariant_violation_names_field(self, tmp_path, wrench_schema, overrides, field):
        with pytest.raises(ManifestValidationError) as err:
            load_manifest(write_lines(tmp_path / "m.jsonl", [record(**overrides)]), wrench_schema)
        assert err.value.field == field and err.value.line == 1

    def test_missing_key(self, tmp_path, wrench_schema):
        rec = record()
        del rec["source"]
        with pytest.raises(ManifestValidationError) as err:
            load_manifest(write_lines(tmp_path / "m.jsonl", [rec]), wrench_schema)
        assert err.value.field == "source"

    def test_unknown_keypoint_is_schema_error(self, tmp_path, wrench_schema):
        rec = record()
        rec["keypoints"][1]["name"] = "handle"
        with pytest.raises(SchemaError, match="handle"):
            load_manifest(write_lines(tmp_path / "m.jsonl", [rec]), wrench_schema)

    def test_wrong_tool_is_schema_error(self, tmp_path, wrench_schema):
        with pytest.raises(SchemaError):
            load_manifest(write_lines(tmp_path / "m.jsonl", [record(tool="hammer")]), wrench_schema)

    def test_ten_thousand_lines(self, tmp_path, wrench_schema):
        samples = [make_annotation([("open_end", i % 200, 3), ("ring_end", 7, 9)],
                                   image=f"images/{i:05d}.png") for i in range(10000)]
        write_manifest(samples, tmp_path / "m.jsonl")
        m = load_manifest(tmp_path / "m.jsonl", wrench_schema)
        assert len(m) == 10000
        assert m[9999].image_path == "images/09999.png"


coord = st.floats(0, 223.99, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(x=coord, y=coord, vis=st.booleans(), bx=st.floats(0, 100), bw=st.floats(1, 124))
def test_write_then_load_round_trip(tmp_path_factory, x, y, vis, bx, bw):
    tmp = tmp_path_factory.mktemp("rt")
    schema = KeypointSchema("wrench", ("open_end", "ring_end"))
    ann = SampleAnnotation("a/b.png", 224, 224, (bx, bx, bx + bw, bx + bw),
                           (Keypoint("open_end", x, y, vis), Keypoint("ring_end", y, x, True)),
                           "wrench", "composite2d")
    write_manifest([ann, ann], tmp / "m.jsonl")
    loaded = load_manifest(tmp / "m.jsonl", schema)
    assert loaded.samples == [ann, ann]


def _manifest(n, schema):
    return DatasetManifest(None, [make_annotation([("open_end", 1, 1)], image=f"{i}.png")
                                  for i in range(n)], schema)


class TestSplit:
    def test_sizes_and_determinism(self, wrench_schema):
        m = _manifest(10, wrench_schema)
        train, val = split_dataset(m, 0.2, seed=7)
        assert (len(train), len(val)) == (8, 2)
        again = split_dataset(m, 0.2, seed=7)
        assert train.samples == again[0].samples and val.samples == again[1].samples

    def test_minimum_one_validation_sample(self, wrench_schema):
        train, val = split_dataset(_manifest(10, wrench_schema), 0.05, seed=0)
        assert (len(train), len(val)) == (9, 1)

    def test_seed_changes_membership_not_size(self, wrench_schema):
        m = _manifest(10000, wrench_schema)
        _, v1 = split_dataset(m, 0.1, seed=1)
        _, v2 = split_dataset(m, 0.1, seed=2)
        assert len(v1) == len(v2) == 1000
        assert {s.image_path for s in v1} != {s.image_path for s in v2}

    def test_empty_manifest(self, wrench_schema):
        with pytest.raises(DatasetError):
            split_dataset(_manifest(0, wrench_schema), 0.1, 0)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(2, 300), frac=st.floats(0.01, 0.99), seed=st.integers(0, 2**32 - 1))
    def test_partition(self, n, frac, seed):
        m = _manifest(n, KeypointSchema("wrench", ("open_end", "ring_end")))
        train, val = split_dataset(m, frac, seed)
        a = {s.image_path for s in train}
        b = {s.image_path for s in val}
        assert a | b == {s.image_path for s in m} and not a & b
        assert len(val) == min(n - 1, max(1, round(frac * n)))
