import json
import os

import pytest

from detcal.formats import (
    ImageInfo,
    ParseError,
    atomic_write,
    csv_text,
    load_json_with_lines,
    parse_detections,
    parse_ground_truth,
    to_detections,
)

GT = {
    "images": [{"id": 1, "width": 200, "height": 100}],
    "annotations": [{"id": 7, "image_id": 1, "category_id": 2, "bbox": [20, 10, 40, 20]}],
    "categories": [{"id": 2, "name": "car"}],
}


def test_line_numbers_of_array_elements():
    text = '[\n  {"a": 1},\n\n  {"a": 2}\n]'
    recs = load_json_with_lines(text, depth=1)
    assert [(r.value, r.line) for r in recs] == [({"a": 1}, 2), ({"a": 2}, 4)]


def test_nested_arrays_keep_lines():
    text = '{"x": [\n1,\n2], "y": {"z": [3]}}'
    doc = load_json_with_lines(text, depth=2)
    assert [(r.value, r.line) for r in doc["x"]] == [(1, 2), (2, 3)]
    assert doc["y"] == {"z": [3]}


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("[\n{\"a\": 1},\n{\"a\": }\n]", 3),
    ("[1, 2", 1),
    ("[1]\n\n[2]", 3),
])
def test_syntax_errors_are_line_anchored(text, line):
    with pytest.raises(ParseError) as exc:
        load_json_with_lines(text, "f.json", depth=1)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"f.json:{line}:")


def test_parse_detections_valid():
    text = json.dumps([{"image_id": 1, "category_id": 2, "bbox": [20, 10, 40, 20], "score": 0.7,
                        "logits": [0.1, 0.2, 1.0]}], indent=1)
    recs = parse_detections(text)
    assert recs[0]["bbox"] == (20.0, 10.0, 40.0, 20.0)
    assert recs[0]["logits"] == (0.1, 0.2, 1.0)
    assert recs[0]["line"] == 2


@pytest.mark.parametrize("field,value,msg", [
    ("score", 1.5, "score must lie"),
    ("score", "0.5", "finite number"),
    ("image_id", 1.5, "integer"),
    ("category_id", True, "integer"),
    ("bbox", [1, 2, 3], "4 finite numbers"),
    ("bbox", [1, 2, 0, 3], "positive"),
    ("logits", [], "non-empty"),
])
def test_parse_detections_field_errors(field, value, msg):
    rec = {"image_id": 1, "category_id": 0, "bbox": [1, 2, 3, 4], "score": 0.5}
    rec[field] = value
    text = "[\n" + json.dumps({"image_id": 1, "category_id": 0, "bbox": [1, 2, 3, 4], "score": 0.5}) \
        + ",\n" + json.dumps(rec) + "\n]"
    with pytest.raises(ParseError, match=msg) as exc:
        parse_detections(text, "d.json")
    assert exc.value.line == 3


def test_parse_detections_missing_field_and_wrong_root():
    with pytest.raises(ParseError, match="missing field 'score'"):
        parse_detections('[{"image_id": 1, "category_id": 0, "bbox": [1, 2, 3, 4]}]')
    with pytest.raises(ParseError, match="JSON array"):
        parse_detections('{"a": 1}')


def test_parse_ground_truth_normalizes():
    gt = parse_ground_truth(json.dumps(GT))
    (obj,) = gt.objects
    assert obj.gt_id == 7 and obj.label == 2
    assert obj.box.as_tuple() == pytest.approx((0.2, 0.2, 0.2, 0.2))


@pytest.mark.parametrize("mutate,msg", [
    (lambda g: g["annotations"][0].update(image_id=5), "does not match any image"),
    (lambda g: g["images"][0].update(width=0), "positive"),
    (lambda g: g["annotations"][0].update(category_id=3), "not listed"),
    (lambda g: g.pop("images"), "images"),
    (lambda g: g["images"].append({"id": 1, "width": 5, "height": 5}), "duplicate"),
])
def test_parse_ground_truth_errors(mutate, msg):
    g = json.loads(json.dumps(GT))
    mutate(g)
    with pytest.raises(ParseError, match=msg):
        parse_ground_truth(json.dumps(g, indent=2))


def test_ground_truth_error_points_at_annotation_line():
    g = json.loads(json.dumps(GT))
    g["annotations"][0]["image_id"] = 9
    text = json.dumps(g, indent=2)
    with pytest.raises(ParseError) as exc:
        parse_ground_truth(text, "gt.json")
    line = text.splitlines()[exc.value.line - 1]
    assert line.strip() == "{" and '"annotations"' in text.splitlines()[exc.value.line - 2]


def test_normalize_clips_to_image():
    img = ImageInfo(1, 100, 50)
    b = img.normalize((-10, 0, 30, 60))
    assert b.xyxy() == pytest.approx((0.0, 0.0, 0.2, 1.0))
    with pytest.raises(ValueError):
        img.normalize((120, 0, 10, 10))


def test_to_detections_unknown_image_and_min_score():
    gt = parse_ground_truth(json.dumps(GT))
    recs = parse_detections(json.dumps([{"image_id": 1, "category_id": 2, "bbox": [0, 0, 5, 5], "score": 0.1}]))
    assert to_detections(recs, gt, min_score=0.2) == []
    bad = parse_detections(json.dumps([{"image_id": 4, "category_id": 2, "bbox": [0, 0, 5, 5], "score": 0.1}]))
    with pytest.raises(ParseError, match="not in the ground truth"):
        to_detections(bad, gt)


def test_csv_text_format():
    text = csv_text(("a", "b", "c"), [(0.1, None, 3), (1e-20, 2.5, 0)])
    assert text == "a,b,c\n0.1,,3\n1e-20,2.5,0\n"


def test_atomic_write_replaces(tmp_path):
    p = tmp_path / "out.txt"
    p.write_text("old")
    atomic_write(str(p), "new\n")
    assert p.read_bytes() == b"new\n"
    assert os.listdir(tmp_path) == ["out.txt"]
