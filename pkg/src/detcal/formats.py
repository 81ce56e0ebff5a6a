"""File formats: COCO-style detections and ground truth in, JSON reports and
CSV tables out.

Parsing keeps track of where each array element starts, so validation errors
name the offending line.  Outputs are written atomically.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Any, Optional, Sequence

from .core import Detection, GroundTruthObject, NormBox

__all__ = [
    "ParseError",
    "Record",
    "ImageInfo",
    "GroundTruth",
    "load_json_with_lines",
    "parse_detections",
    "parse_ground_truth",
    "read_detections",
    "read_ground_truth",
    "read_text",
    "is_integer",
    "is_number",
    "to_detections",
    "atomic_write",
    "format_float",
    "csv_text",
    "json_text",
]


class ParseError(ValueError):
    def __init__(self, source: str, line: Optional[int], message: str):
        self.source = source
        self.line = line
        self.message = message
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass
class Record:
    """A JSON value together with the line its text starts on."""

    value: Any
    line: int


_decoder = json.JSONDecoder()
_WS = " \t\n\r"


class _Reader:
    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source
        self.pos = 0
        self._mark = (0, 1)  # (position, line) of the last lookup

    def line_at(self, pos: int) -> int:
        # lookups mostly move forward, so count only the newlines since the last one
        mpos, mline = self._mark
        if pos >= mpos:
            line = mline + self.text.count("\n", mpos, pos)
        else:
            line = self.text.count("\n", 0, pos) + 1
        self._mark = (pos, line)
        return line

    def fail(self, message: str, pos: Optional[int] = None):
        raise ParseError(self.source, self.line_at(self.pos if pos is None else pos), message)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos] in _WS:
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            found = self.peek() or "end of file"
            self.fail(f"expected {ch!r}, found {found!r}")
        self.pos += 1

    def value(self):
        self.skip_ws()
        try:
            v, end = _decoder.raw_decode(self.text, self.pos)
        except json.JSONDecodeError as exc:
            raise ParseError(self.source, exc.lineno, f"invalid JSON: {exc.msg}") from None
        self.pos = end
        return v

    def array(self, depth: int) -> list:
        """Array whose elements are wrapped in :class:`Record` (``depth`` levels deep)."""
        self.expect("[")
        out = []
        if self.peek() == "]":
            self.pos += 1
            return out
        while True:
            self.skip_ws()
            line = self.line_at(self.pos)
            out.append(Record(self.node(depth - 1), line))
            if self.peek() == ",":
                self.pos += 1
                continue
            self.expect("]")
            return out

    def obj(self, depth: int) -> dict:
        self.expect("{")
        out = {}
        if self.peek() == "}":
            self.pos += 1
            return out
        while True:
            if self.peek() != '"':
                self.fail("expected a string key")
            key = self.value()
            self.expect(":")
            out[key] = self.node(depth - 1)
            if self.peek() == ",":
                self.pos += 1
                continue
            self.expect("}")
            return out

    def node(self, depth: int):
        if depth <= 0:
            return self.value()
        ch = self.peek()
        if ch == "[":
            return self.array(depth)
        if ch == "{":
            return self.obj(depth)
        return self.value()

    def document(self, depth: int):
        if not self.text.strip():
            raise ParseError(self.source, 1, "empty file")
        v = self.node(depth)
        if self.peek():
            self.fail("trailing content after the JSON document")
        return v


def load_json_with_lines(text: str, source: str = "<input>", depth: int = 1):
    """Parse JSON, recording the start line of array elements.

    Containers up to ``depth`` levels below the root are walked; array
    elements at those levels come back as :class:`Record`, everything deeper
    as plain Python values.
    """
    return _Reader(text, source).document(depth)


# -- field validation ---------------------------------------------------------

def is_integer(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def is_number(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


class _Fields:
    def __init__(self, rec: Record, source: str, what: str):
        if not isinstance(rec.value, dict):
            raise ParseError(source, rec.line, f"{what} must be a JSON object")
        self.d = rec.value
        self.line = rec.line
        self.source = source
        self.what = what

    def fail(self, message: str):
        raise ParseError(self.source, self.line, f"{self.what}: {message}")

    def get(self, key: str, check, kind: str, required: bool = True):
        if key not in self.d:
            if required:
                self.fail(f"missing field {key!r}")
            return None
        v = self.d[key]
        if not check(v):
            self.fail(f"field {key!r} must be {kind}, got {json.dumps(v)}")
        return v

    def integer(self, key: str) -> int:
        return self.get(key, is_integer, "an integer")

    def number(self, key: str) -> float:
        return float(self.get(key, is_number, "a finite number"))

    def bbox(self, key: str = "bbox") -> tuple[float, float, float, float]:
        b = self.get(key, lambda v: isinstance(v, list) and len(v) == 4 and all(map(is_number, v)),
                     "a list of 4 finite numbers")
        x, y, w, h = (float(t) for t in b)
        if w <= 0 or h <= 0:
            self.fail(f"bbox width and height must be positive, got {b}")
        return x, y, w, h


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: float
    height: float

    def normalize(self, bbox) -> NormBox:
        """Absolute top-left (x, y, w, h) to a normalized box, clipped to the image."""
        x, y, w, h = bbox
        x1 = min(max(x / self.width, 0.0), 1.0)
        y1 = min(max(y / self.height, 0.0), 1.0)
        x2 = min(max((x + w) / self.width, 0.0), 1.0)
        y2 = min(max((y + h) / self.height, 0.0), 1.0)
        if x2 <= x1 or y2 <= y1:
            raise ValueError("box lies outside the image")
        return NormBox.from_xyxy(x1, y1, x2, y2)


@dataclass
class GroundTruth:
    images: dict
    objects: list[GroundTruthObject]
    categories: dict


def parse_detections(text: str, source: str = "<detections>") -> list[dict]:
    """Validated detection records (plain dicts plus their ``line``)."""
    doc = load_json_with_lines(text, source, depth=1)
    if not isinstance(doc, list):
        raise ParseError(source, 1, "detections file must be a JSON array")
    out = []
    for i, rec in enumerate(doc):
        f = _Fields(rec, source, f"detection {i}")
        d = {
            "image_id": f.integer("image_id"),
            "category_id": f.integer("category_id"),
            "bbox": f.bbox(),
            "score": f.number("score"),
            "line": rec.line,
        }
        if not 0.0 <= d["score"] <= 1.0:
            f.fail(f"score must lie in [0, 1], got {d['score']}")
        if d["category_id"] < 0:
            f.fail("category_id must be non-negative")
        logits = f.get("logits", lambda v: isinstance(v, list) and len(v) > 0 and all(map(is_number, v)),
                       "a non-empty list of finite numbers", required=False)
        d["logits"] = None if logits is None else tuple(float(v) for v in logits)
        out.append(d)
    return out


def parse_ground_truth(text: str, source: str = "<ground truth>") -> GroundTruth:
    doc = load_json_with_lines(text, source, depth=2)
    if not isinstance(doc, dict):
        raise ParseError(source, 1, "ground-truth file must be a JSON object")
    for key in ("images", "annotations"):
        if not isinstance(doc.get(key), list):
            raise ParseError(source, 1, f"ground-truth file needs an array {key!r}")
    images = {}
    for i, rec in enumerate(doc["images"]):
        f = _Fields(rec, source, f"image {i}")
        img = ImageInfo(f.integer("id"), f.number("width"), f.number("height"))
        if img.width <= 0 or img.height <= 0:
            f.fail("width and height must be positive")
        if img.id in images:
            f.fail(f"duplicate image id {img.id}")
        images[img.id] = img
    categories = {}
    for i, rec in enumerate(doc.get("categories") or []):
        f = _Fields(rec, source, f"category {i}")
        categories[f.integer("id")] = f.get("name", lambda v: isinstance(v, str), "a string")
    objects = []
    for i, rec in enumerate(doc["annotations"]):
        f = _Fields(rec, source, f"annotation {i}")
        ann_id, image_id, cat = f.integer("id"), f.integer("image_id"), f.integer("category_id")
        bbox = f.bbox()
        if image_id not in images:
            f.fail(f"image_id {image_id} does not match any image")
        if cat < 0:
            f.fail("category_id must be non-negative")
        if categories and cat not in categories:
            f.fail(f"category_id {cat} is not listed in categories")
        try:
            box = images[image_id].normalize(bbox)
        except ValueError as exc:
            f.fail(str(exc))
        objects.append(GroundTruthObject(image_id, cat, box, gt_id=ann_id))
    return GroundTruth(images, objects, categories)


def to_detections(records: Sequence[dict], gt: GroundTruth, source: str = "<detections>",
                  min_score: float = 0.0) -> list[Detection]:
    """Detection objects in normalized coordinates; records below ``min_score`` are skipped."""
    out = []
    for i, d in enumerate(records):
        img = gt.images.get(d["image_id"])
        if img is None:
            raise ParseError(source, d["line"], f"detection {i}: image_id {d['image_id']} is not in the ground truth")
        if d["score"] < min_score:
            continue
        try:
            box = img.normalize(d["bbox"])
        except ValueError as exc:
            raise ParseError(source, d["line"], f"detection {i}: {exc}") from None
        out.append(Detection(d["image_id"], d["category_id"], d["score"], box, logits=d["logits"]))
    return out


def read_text(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(path, None, f"cannot read file: {exc}") from None


def read_detections(path: str) -> list[dict]:
    return parse_detections(read_text(path), path)


def read_ground_truth(path: str) -> GroundTruth:
    return parse_ground_truth(read_text(path), path)


# -- output -------------------------------------------------------------------

def atomic_write(path: str, text: str):
    """Write UTF-8 text with LF line endings via a temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_float(v) -> str:
    """Shortest round-tripping decimal; empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return str(v)
    return repr(float(v))


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([format_float(v) for v in r])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"
