"""Synthetic scene dataset with exact local correspondences, plus every
file format the pipeline touches: PPM images, JSONL records with
run-length masks, and the GEMB embedding dump.

Each generated sample is 2 to 5 colored shapes on a gray background.
The caption holds one scene sentence plus one sentence per shape, in
shuffled order, and gt_links records which sentence describes which
segment. Colors within a sample are pairwise distinct so a sentence
identifies its shape unambiguously; shape kinds can repeat (only three
exist), but no sentence ever mentions another shape's color together
with its kind.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, ValidationError

IMAGE_SIDE = 64
GEMB_MAGIC = b"GEMB"

COLOR_TABLE: dict[str, tuple[int, int, int]] = {
    "red": (220, 50, 50),
    "green": (60, 170, 70),
    "blue": (60, 90, 220),
    "yellow": (240, 210, 60),
    "orange": (245, 140, 50),
    "purple": (150, 70, 200),
    "cyan": (70, 200, 220),
    "brown": (130, 85, 50),
}
BACKGROUND_RGB = (235, 235, 235)

SHAPE_KINDS = ("circle", "square", "triangle")

# Half-extent in pixels. The smallest triangle at radius 5 rasterizes to
# 61 pixels, above the 41-pixel (1%) floor for a 64x64 image.
SIZE_TABLE = {"small": 5, "medium": 7, "large": 9}

CELL_CENTERS = (11, 32, 53)
CELL_NAMES = (
    "top left", "top center", "top right",
    "middle left", "center", "middle right",
    "bottom left", "bottom center", "bottom right",
)

NUMBER_WORDS = {2: "two", 3: "three", 4: "four", 5: "five"}

SCENE_TEMPLATES = (
    "There are {n} shapes on a gray background.",
    "This picture shows {n} shapes on a gray background.",
)
SHAPE_TEMPLATES = (
    "A {size} {color} {kind} sits at the {pos}.",
    "A {size} {color} {kind} appears at the {pos}.",
    "There is a {size} {color} {kind} at the {pos}.",
    "A {size} {color} {kind} occupies the {pos}.",
)

_SENTENCE_END_RE = re.compile(r"[.!?](?=\s|\Z)")
_RLE_TOKEN_RE = re.compile(r"^([01]):([1-9][0-9]*)$")


@dataclass
class BBox:
    """Pixel rectangle, inclusive-exclusive on both axes."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (0 <= self.x1 < self.x2 and 0 <= self.y1 < self.y2):
            raise ValidationError(f"degenerate bbox ({self.x1},{self.y1},{self.x2},{self.y2})")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


class SegmentMask:
    """Boolean pixel mask plus its stored area fraction.

    The fraction is redundant with the mask but serialized explicitly;
    construction cross-checks the two to 1e-12.
    """

    __slots__ = ("mask", "area_fraction")

    def __init__(self, mask: np.ndarray, area_fraction: float):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
            raise ValidationError(f"segment mask must be square, got {mask.shape}")
        actual = float(np.count_nonzero(mask)) / mask.size
        if abs(actual - area_fraction) > 1e-12:
            raise ValidationError(
                f"area_fraction {area_fraction!r} does not match mask popcount fraction {actual!r}"
            )
        self.mask = mask
        self.area_fraction = float(area_fraction)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "SegmentMask":
        mask = np.asarray(mask, dtype=bool)
        return cls(mask, float(np.count_nonzero(mask)) / mask.size)


@dataclass
class SampleRecord:
    id: str
    image_path: str
    caption: str
    sentence_spans: list[tuple[int, int]]
    segments: list[SegmentMask]
    gt_links: list[tuple[int, int]]  # (segment_index, sentence_index)

    def __post_init__(self):
        n_sent = len(self.sentence_spans)
        n_seg = len(self.segments)
        for seg, sent in self.gt_links:
            if not (0 <= seg < n_seg and 0 <= sent < n_sent):
                raise ValidationError(f"sample {self.id}: gt_link ({seg},{sent}) out of range")


class Dataset:
    """Records plus image access, either disk-backed or in-memory."""

    def __init__(self, records: list[SampleRecord], root: Path | None = None,
                 images: dict[str, np.ndarray] | None = None):
        self.records = records
        self.root = Path(root) if root is not None else None
        self._raw = dict(images) if images else {}
        self._float_cache: dict[str, np.ndarray] = {}
        self._by_id = {r.id: r for r in records}
        if len(self._by_id) != len(records):
            raise ValidationError("duplicate sample ids in dataset")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, sample_id: str) -> SampleRecord:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise ValidationError(f"unknown sample id {sample_id!r}") from None

    @property
    def image_side(self) -> int:
        first = self.records[0]
        return first.segments[0].mask.shape[0] if first.segments else IMAGE_SIDE

    def raw_image(self, sample_id: str) -> np.ndarray:
        rec = self.get(sample_id)
        if sample_id not in self._raw:
            if self.root is None:
                raise ContractError(f"no image stored for sample {sample_id!r}")
            self._raw[sample_id] = read_ppm(self.root / rec.image_path)
        return self._raw[sample_id]

    def image(self, sample_id: str) -> np.ndarray:
        """float64 (S, S, 3) scaled to [0, 1]."""
        if sample_id not in self._float_cache:
            self._float_cache[sample_id] = self.raw_image(sample_id).astype(np.float64) / 255.0
        return self._float_cache[sample_id]

    def ids(self) -> list[str]:
        return [r.id for r in self.records]


# ---- geometry ----


def render_shape_mask(kind: str, cx: int, cy: int, radius: int, side: int) -> np.ndarray:
    ys, xs = np.ogrid[:side, :side]
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius
    if kind == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= radius
    if kind == "triangle":
        # Upward isoceles: apex (cx, cy-r), base corners (cx+-r, cy+r).
        dy = ys - (cy - radius)
        inside_rows = (dy >= 0) & (ys <= cy + radius)
        return inside_rows & (np.abs(xs - cx) * 2 <= dy)
    raise ContractError(f"unknown shape kind {kind!r}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_to_bbox(mask: SegmentMask | np.ndarray, expand_frac: float = 0.1) -> BBox:
    """Tight box around the true pixels, each side pushed outward by
    round-half-up(expand_frac * side length) and clamped to the image."""
    arr = mask.mask if isinstance(mask, SegmentMask) else np.asarray(mask, dtype=bool)
    if expand_frac < 0:
        raise ValidationError(f"expand_frac must be non-negative, got {expand_frac}")
    ys, xs = np.nonzero(arr)
    if ys.size == 0:
        raise ContractError("mask_to_bbox: empty mask")
    side_y, side_x = arr.shape
    x1, x2 = int(xs.min()), int(xs.max()) + 1
    y1, y2 = int(ys.min()), int(ys.max()) + 1
    ex = _round_half_up(expand_frac * (x2 - x1))
    ey = _round_half_up(expand_frac * (y2 - y1))
    return BBox(max(0, x1 - ex), max(0, y1 - ey), min(side_x, x2 + ex), min(side_y, y2 + ey))


def split_sentences(caption: str) -> list[tuple[int, int]]:
    """Char ranges of sentences: split after . ! ? followed by whitespace
    or end of text, trimmed of surrounding whitespace, empties dropped."""
    spans: list[tuple[int, int]] = []
    start = 0

    def push(lo: int, hi: int) -> None:
        while lo < hi and caption[lo].isspace():
            lo += 1
        while hi > lo and caption[hi - 1].isspace():
            hi -= 1
        if lo < hi:
            spans.append((lo, hi))

    for m in _SENTENCE_END_RE.finditer(caption):
        push(start, m.end())
        start = m.end()
    push(start, len(caption))
    return spans


# ---- generator ----


def _generate_sample(rng: np.random.Generator, idx: int, side: int):
    color_names = list(COLOR_TABLE)
    n = int(rng.integers(2, 6))
    colors = [color_names[i] for i in rng.choice(len(color_names), size=n, replace=False)]
    kinds = [SHAPE_KINDS[i] for i in rng.integers(0, len(SHAPE_KINDS), size=n)]
    size_names = list(SIZE_TABLE)
    sizes = [size_names[i] for i in rng.integers(0, len(size_names), size=n)]
    cells = rng.choice(len(CELL_NAMES), size=n, replace=False)
    jitters = rng.integers(-1, 2, size=(n, 2))
    scene_tmpl = SCENE_TEMPLATES[int(rng.integers(0, len(SCENE_TEMPLATES)))]
    shape_tmpls = [SHAPE_TEMPLATES[i] for i in rng.integers(0, len(SHAPE_TEMPLATES), size=n)]
    order = rng.permutation(n + 1)

    image = np.empty((side, side, 3), dtype=np.uint8)
    image[:] = BACKGROUND_RGB
    masks: list[np.ndarray] = []
    occupied = np.zeros((side, side), dtype=bool)
    sentences = [scene_tmpl.format(n=NUMBER_WORDS[n])]
    for k in range(n):
        cell = int(cells[k])
        cx = CELL_CENTERS[cell % 3] + int(jitters[k, 0])
        cy = CELL_CENTERS[cell // 3] + int(jitters[k, 1])
        m = render_shape_mask(kinds[k], cx, cy, SIZE_TABLE[sizes[k]], side)
        if np.any(m & occupied):  # grid spacing makes this unreachable
            raise ContractError(f"sample {idx}: overlapping shapes")
        occupied |= m
        image[m] = COLOR_TABLE[colors[k]]
        masks.append(m)
        sentences.append(shape_tmpls[k].format(
            size=sizes[k], color=colors[k], kind=kinds[k], pos=CELL_NAMES[cell]))

    ordered = [sentences[i] for i in order]
    caption = " ".join(ordered)
    spans: list[tuple[int, int]] = []
    at = 0
    for s in ordered:
        spans.append((at, at + len(s)))
        at += len(s) + 1
    position_of = {int(orig): pos for pos, orig in enumerate(order)}
    gt_links = [(k, position_of[k + 1]) for k in range(n)]

    segments = [SegmentMask.from_mask(m) for m in masks]
    segments.append(SegmentMask.from_mask(~occupied))
    sample_id = f"{idx:04d}"
    record = SampleRecord(sample_id, f"images/{sample_id}.ppm", caption, spans, segments, gt_links)
    return record, image


def generate_dataset(seed: int, n_samples: int, out_dir: str | Path | None,
                     image_side: int = IMAGE_SIDE) -> Dataset:
    """Deterministic per seed. With out_dir, writes dataset.jsonl plus an
    images/ directory of PPM files; with None, stays in memory."""
    if n_samples < 1:
        raise ValidationError(f"n_samples must be at least 1, got {n_samples}")
    rng = np.random.default_rng(seed)
    records: list[SampleRecord] = []
    images: dict[str, np.ndarray] = {}
    for idx in range(n_samples):
        record, image = _generate_sample(rng, idx, image_side)
        records.append(record)
        images[record.id] = image

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        with (out_dir / "dataset.jsonl").open("w") as fh:
            for record in records:
                fh.write(json.dumps(record_to_json(record)) + "\n")
        for record in records:
            write_ppm(out_dir / record.image_path, images[record.id])
    return Dataset(records, root=out_dir, images=images)


# ---- JSONL records ----


def record_to_json(record: SampleRecord) -> dict:
    return {
        "id": record.id,
        "image_path": record.image_path,
        "caption": record.caption,
        "sentence_spans": [list(s) for s in record.sentence_spans],
        "segments": [
            {"rle": rle_encode(seg.mask), "area_fraction": seg.area_fraction}
            for seg in record.segments
        ],
        "gt_links": [list(l) for l in record.gt_links],
    }


def record_from_json(obj: dict) -> SampleRecord:
    try:
        segments = [SegmentMask(rle_decode(s["rle"]), float(s["area_fraction"]))
                    for s in obj["segments"]]
        return SampleRecord(
            id=str(obj["id"]),
            image_path=str(obj["image_path"]),
            caption=str(obj["caption"]),
            sentence_spans=[(int(a), int(b)) for a, b in obj["sentence_spans"]],
            segments=segments,
            gt_links=[(int(a), int(b)) for a, b in obj["gt_links"]],
        )
    except (KeyError, TypeError) as e:
        raise ParseError(f"sample record missing or malformed field: {e}") from e


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    path = directory / "dataset.jsonl"
    if not path.is_file():
        raise FileNotFoundError(path)
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: invalid JSON at column {e.colno}") from e
            records.append(record_from_json(obj))
    if not records:
        raise ParseError(f"{path}: no records")
    return Dataset(records, root=directory)


# ---- RLE masks ----


def rle_encode(mask: np.ndarray) -> str:
    """Row-major run-length string "v:run,v:run,..." with v in {0,1}."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        raise ContractError("rle_encode: empty mask")
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [flat.size]))
    return ",".join(f"{int(flat[s])}:{e - s}" for s, e in zip(starts, ends))


def rle_decode(text: str) -> np.ndarray:
    """Inverse of rle_encode; total run length must be a perfect square."""
    values: list[int] = []
    runs: list[int] = []
    prev = None
    for i, token in enumerate(text.split(",")):
        m = _RLE_TOKEN_RE.match(token)
        if m is None:
            raise ParseError(f"rle: bad token {token!r} at position {i}")
        v = int(m.group(1))
        if v == prev:
            raise ParseError(f"rle: repeated value in adjacent runs at position {i}")
        prev = v
        values.append(v)
        runs.append(int(m.group(2)))
    total = sum(runs)
    side = math.isqrt(total)
    if side * side != total:
        raise ParseError(f"rle: total length {total} is not a perfect square")
    flat = np.repeat(np.asarray(values, dtype=bool), runs)
    return flat.reshape(side, side)


# ---- PPM images ----


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"encode_ppm: need uint8 (H, W, 3), got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise ParseError("ppm: bad magic at offset 0, expected 'P6'")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError(f"ppm: expected integer at offset {start}")
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise ParseError(f"ppm: unsupported maxval {maxval} at offset {pos - len(str(maxval))}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError(f"ppm: expected single whitespace after header at offset {pos}")
    pos += 1
    need = w * h * 3
    raster = data[pos:]
    if len(raster) != need:
        raise ParseError(f"ppm: expected {need} raster bytes at offset {pos}, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# ---- GEMB embeddings ----


def encode_gemb(mat: np.ndarray) -> bytes:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ContractError(f"encode_gemb: need (count, dim), got {mat.shape}")
    header = GEMB_MAGIC + struct.pack("<II", mat.shape[0], mat.shape[1])
    return header + np.ascontiguousarray(mat, dtype="<f8").tobytes()


def decode_gemb(data: bytes) -> np.ndarray:
    if data[:4] != GEMB_MAGIC:
        raise ParseError("gemb: bad magic at offset 0, expected 'GEMB'")
    if len(data) < 12:
        raise ParseError(f"gemb: header truncated, expected 12 bytes, got {len(data)}")
    count, dim = struct.unpack("<II", data[4:12])
    need = 12 + count * dim * 8
    if len(data) != need:
        raise ParseError(f"gemb: expected {need} bytes for {count}x{dim}, got {len(data)}")
    body = np.frombuffer(data, dtype="<f8", count=count * dim, offset=12)
    return body.astype(np.float64).reshape(count, dim)


def _gemb_sidecar(path: Path) -> Path:
    return path.with_suffix(".ids.jsonl")


def write_gemb(path: str | Path, ids: list[str], mat: np.ndarray) -> None:
    path = Path(path)
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape[0] != len(ids):
        raise ContractError(f"write_gemb: {len(ids)} ids for {mat.shape[0]} rows")
    path.write_bytes(encode_gemb(mat))
    with _gemb_sidecar(path).open("w") as fh:
        for item_id in ids:
            fh.write(json.dumps(item_id) + "\n")


def read_gemb(path: str | Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    mat = decode_gemb(path.read_bytes())
    sidecar = _gemb_sidecar(path)
    ids: list[str] = []
    if sidecar.is_file():
        with sidecar.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    ids.append(str(json.loads(line)))
                except json.JSONDecodeError as e:
                    raise ParseError(f"{sidecar}:{lineno}: invalid JSON id") from e
    else:
        ids = [str(i) for i in range(mat.shape[0])]
    if len(ids) != mat.shape[0]:
        raise ParseError(f"{sidecar}: {len(ids)} ids for {mat.shape[0]} embedding rows")
    return ids, mat
