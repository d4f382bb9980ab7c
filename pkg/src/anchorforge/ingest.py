"""Annotation ingestion: COCO JSON, VOC XML, and plain CSV to one canonical form.

Every parser emits AnnotatedBox values (center form, pixel units, with
the source image size), which normalize_to_canvas rescales onto a square
canvas per axis. The canonical dataset file is a small line format:

    anchorforge-dataset v1 S=<canvas>
    <image_id>\t<cx>\t<cy>\t<w>\t<h>

one record per line, UTF-8, LF line endings. Numbers are printed with
enough significant digits that a write/read round trip reproduces every
field to within 1e-9 relative.

Parsers are strict: malformed input raises ParseError naming the file,
line, or annotation at fault rather than producing partial data.
"""

from __future__ import annotations

import csv
import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Box, BoxShape

_HEADER_RE = re.compile(r"anchorforge-dataset v(\d+) S=(\d+)")
_CSV_HEADER = ["image_id", "image_w", "image_h", "x_min", "y_min", "x_max", "y_max"]


class ParseError(ValueError):
    """Raised for malformed annotation or dataset files."""


@dataclass(frozen=True)
class AnnotatedBox:
    """One ground-truth box in pixel units, tied to its source image size."""

    image_id: str
    image_w: float
    image_h: float
    box: Box
    difficult: bool = False

    def __post_init__(self) -> None:
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError(f"image size must be positive, got {self.image_w}x{self.image_h}")


@dataclass(frozen=True)
class CanonicalRecord:
    """One normalized box on the canonical canvas."""

    image_id: str
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if "\t" in self.image_id or "\n" in self.image_id:
            raise ValueError("image_id must not contain tabs or newlines")


@dataclass(frozen=True)
class CanonicalDataset:
    """Normalized boxes on a square canvas of side canvas_size."""

    canvas_size: int
    records: tuple[CanonicalRecord, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        s = self.canvas_size
        if not isinstance(s, int) or s < 1:
            raise ValueError(f"canvas_size must be a positive integer, got {s!r}")
        for i, r in enumerate(self.records):
            if not (0.0 < r.w <= s and 0.0 < r.h <= s):
                raise ValueError(f"record {i}: size ({r.w}, {r.h}) outside (0, {s}]")
            if not (0.0 <= r.cx <= s and 0.0 <= r.cy <= s):
                raise ValueError(f"record {i}: center ({r.cx}, {r.cy}) outside [0, {s}]")

    def __len__(self) -> int:
        return len(self.records)

    def shapes(self) -> np.ndarray:
        """(n, 2) array of linear (w, h)."""
        return np.array([[r.w, r.h] for r in self.records], dtype=float).reshape(-1, 2)

    def log_shapes(self) -> np.ndarray:
        """(n, 2) array of (log w, log h)."""
        return np.log(self.shapes()) if len(self) else np.empty((0, 2))


def _clamped_box(
    image_id: str,
    image_w: float,
    image_h: float,
    x_min: float,
    y_min: float,
    x_max: float,
    y_max: float,
    context: str,
    difficult: bool = False,
) -> AnnotatedBox:
    x0 = min(max(x_min, 0.0), image_w)
    x1 = min(max(x_max, 0.0), image_w)
    y0 = min(max(y_min, 0.0), image_h)
    y1 = min(max(y_max, 0.0), image_h)
    if x1 - x0 <= 0.0 or y1 - y0 <= 0.0:
        raise ParseError(f"{context}: box ({x_min}, {y_min}, {x_max}, {y_max}) is empty after clamping to the image")
    shape = BoxShape(x1 - x0, y1 - y0)
    return AnnotatedBox(
        image_id=image_id,
        image_w=image_w,
        image_h=image_h,
        box=Box((x0 + x1) / 2.0, (y0 + y1) / 2.0, shape),
        difficult=difficult,
    )


def parse_coco(
    path: "str | Path",
    skip_crowd: bool = True,
    counters: Optional[dict] = None,
) -> list[AnnotatedBox]:
    """Read COCO instance annotations (bbox is [x, y, w, h], top-left origin).

    Crowd regions are skipped by default; pass skip_crowd=False to keep
    them. The optional counters dict receives the record and skip totals.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON at byte {e.pos}: {e.msg}") from e
    images = {}
    for img in doc.get("images", []):
        images[img["id"]] = (float(img["width"]), float(img["height"]))
    out = []
    skipped_crowd = 0
    annotations = doc.get("annotations", [])
    for ann in annotations:
        if skip_crowd and ann.get("iscrowd", 0):
            skipped_crowd += 1
            continue
        image_id = ann["image_id"]
        if image_id not in images:
            raise ParseError(f"{path}: annotation {ann.get('id')} references unknown image {image_id}")
        iw, ih = images[image_id]
        x, y, w, h = (float(v) for v in ann["bbox"])
        out.append(
            _clamped_box(
                str(image_id), iw, ih, x, y, x + w, y + h,
                context=f"{path}: annotation {ann.get('id')}",
            )
        )
    if counters is not None:
        counters["records"] = len(annotations)
        counters["skipped_crowd"] = skipped_crowd
    return out


def parse_voc(
    directory: "str | Path",
    include_difficult: bool = True,
    counters: Optional[dict] = None,
) -> list[AnnotatedBox]:
    """Read every .xml file in a directory of VOC-style annotations.

    Files are processed in sorted filename order so the output order is
    stable regardless of filesystem enumeration. Boxes marked difficult
    are kept by default and can be excluded.
    """
    directory = Path(directory)
    files = sorted(directory.glob("*.xml"))
    out = []
    records = 0
    skipped_difficult = 0
    for f in files:
        try:
            root = ET.parse(f).getroot()
        except ET.ParseError as e:
            raise ParseError(f"{f}: malformed XML: {e}") from e
        size = root.find("size")
        if size is None:
            raise ParseError(f"{f}: missing <size> element")
        try:
            iw = float(size.findtext("width"))
            ih = float(size.findtext("height"))
        except (TypeError, ValueError):
            raise ParseError(f"{f}: <size> must contain numeric <width> and <height>") from None
        for obj in root.findall("object"):
            records += 1
            difficult = (obj.findtext("difficult") or "0").strip() == "1"
            if difficult and not include_difficult:
                skipped_difficult += 1
                continue
            bb = obj.find("bndbox")
            if bb is None:
                raise ParseError(f"{f}: <object> without <bndbox>")
            try:
                x_min = float(bb.findtext("xmin"))
                y_min = float(bb.findtext("ymin"))
                x_max = float(bb.findtext("xmax"))
                y_max = float(bb.findtext("ymax"))
            except (TypeError, ValueError):
                raise ParseError(f"{f}: <bndbox> must contain numeric corners") from None
            out.append(
                _clamped_box(f.stem, iw, ih, x_min, y_min, x_max, y_max, context=str(f), difficult=difficult)
            )
    if counters is not None:
        counters["records"] = records
        counters["skipped_difficult"] = skipped_difficult
    return out


def parse_csv(path: "str | Path", counters: Optional[dict] = None) -> list[AnnotatedBox]:
    """Read corner-format CSV rows: image_id,image_w,image_h,x_min,y_min,x_max,y_max."""
    path = Path(path)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if [c.strip() for c in header] != _CSV_HEADER:
            raise ParseError(f"{path}: line 1: expected header {','.join(_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 7:
                raise ParseError(f"{path}: line {lineno}: expected 7 fields, got {len(row)}")
            fields = [c.strip() for c in row]
            try:
                iw, ih = float(fields[1]), float(fields[2])
                x_min, y_min, x_max, y_max = (float(v) for v in fields[3:7])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric field") from None
            if iw <= 0 or ih <= 0:
                raise ParseError(f"{path}: line {lineno}: image size must be positive")
            if x_max <= x_min or y_max <= y_min:
                raise ParseError(f"{path}: line {lineno}: degenerate box (max must exceed min)")
            out.append(
                _clamped_box(fields[0], iw, ih, x_min, y_min, x_max, y_max, context=f"{path}: line {lineno}")
            )
    if counters is not None:
        counters["records"] = len(out)
    return out


def normalize_to_canvas(
    boxes: Iterable[AnnotatedBox],
    canvas_size: int,
    min_size: float = 1e-3,
    source: str = "",
) -> CanonicalDataset:
    """Rescale boxes from their image frames onto a square canvas.

    Each axis scales independently by canvas/image dimension, so aspect
    ratios change exactly as they would under letterbox-free resizing.
    Boxes whose scaled width or height falls below min_size are dropped
    and counted in the result metadata.
    """
    records = []
    dropped = 0
    total = 0
    for b in boxes:
        total += 1
        sx = canvas_size / b.image_w
        sy = canvas_size / b.image_h
        w = b.box.shape.w * sx
        h = b.box.shape.h * sy
        if w < min_size or h < min_size:
            dropped += 1
            continue
        records.append(
            CanonicalRecord(b.image_id, b.box.cx * sx, b.box.cy * sy, w, h)
        )
    metadata = {"source_boxes": total, "dropped": dropped}
    if source:
        metadata["source"] = source
    return CanonicalDataset(canvas_size, tuple(records), metadata)


def _fmt(value: float) -> str:
    return format(float(value), ".10g")


def write_canonical(ds: CanonicalDataset, path: "str | Path") -> None:
    """Write the canonical line format (see module docstring)."""
    lines = [f"anchorforge-dataset v1 S={ds.canvas_size}"]
    for r in ds.records:
        lines.append(f"{r.image_id}\t{_fmt(r.cx)}\t{_fmt(r.cy)}\t{_fmt(r.w)}\t{_fmt(r.h)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_canonical(path: "str | Path") -> CanonicalDataset:
    """Read a canonical dataset file, validating the version header."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{path}: empty file")
    m = _HEADER_RE.fullmatch(lines[0].strip())
    if m is None:
        raise ParseError(f"{path}: line 1: not a canonical dataset header")
    version = int(m.group(1))
    if version != 1:
        raise ParseError(f"{path}: unsupported dataset version {version} (this reader handles v1)")
    canvas = int(m.group(2))
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 5:
            raise ParseError(f"{path}: line {lineno}: expected 5 tab-separated fields, got {len(parts)}")
        try:
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric field") from None
        records.append(CanonicalRecord(parts[0], cx, cy, w, h))
    try:
        return CanonicalDataset(canvas, tuple(records), {"path": str(path)})
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from None
