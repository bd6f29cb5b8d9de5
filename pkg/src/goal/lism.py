"""Pseudo local-pair mining: filter segments by area, crop candidate
regions, embed every sentence against the full image plus all crops,
and keep at most one best (crop, sentence) pair per sample.

Selection rule, applied to the M x (K+1) cosine table whose column 0 is
the full image: each sentence picks its best candidate (lowest column
index on ties); the best of those M pairs wins (lowest sentence index
on ties); if the winner's candidate is the full image, the sample
yields no pair. All of this is deterministic, so mining is a one-time
preprocessing step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BBox, Dataset, SampleRecord, SegmentMask, mask_to_bbox
from .errors import ContractError, ParseError, ValidationError

MIN_AREA_FRACTION = 0.01
DEFAULT_EXPAND_FRAC = 0.1


@dataclass
class LocalPair:
    sample_id: str
    bbox: BBox
    segment_index: int
    sentence_index: int
    sentence_char_span: tuple[int, int]
    similarity: float
    local_image: np.ndarray | None = None  # recomputable crop, not serialized

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.similarity <= 1.0 + 1e-9:
            raise ValidationError(f"similarity {self.similarity} outside [-1, 1]")


@dataclass
class CandidateSet:
    """Everything lism_match embeds for one sample."""

    kept_indices: list[int]
    crops: list[tuple[BBox, np.ndarray]]
    n_sentences: int

    @property
    def n_regions(self) -> int:
        return len(self.crops)


def filter_segments(segments: list[SegmentMask]) -> list[int]:
    """Indices of segments with area_fraction >= 1%, order preserved.
    The boundary value is kept."""
    return [i for i, seg in enumerate(segments) if seg.area_fraction >= MIN_AREA_FRACTION]


def crop_and_resize(image: np.ndarray, bbox: BBox, out_side: int) -> np.ndarray:
    """Nearest-neighbor resize of the bbox region to out_side x out_side.

    Output pixel (i, j) reads source pixel (y1 + floor(i*h/out),
    x1 + floor(j*w/out)); a full-image bbox at out_side == side is the
    identity.
    """
    h = bbox.y2 - bbox.y1
    w = bbox.x2 - bbox.x1
    rows = bbox.y1 + (np.arange(out_side) * h) // out_side
    cols = bbox.x1 + (np.arange(out_side) * w) // out_side
    return image[np.ix_(rows, cols)]


def candidate_set(sample: SampleRecord, image: np.ndarray,
                  expand_frac: float = DEFAULT_EXPAND_FRAC) -> CandidateSet:
    kept = filter_segments(sample.segments)
    side = image.shape[0]
    crops = []
    for idx in kept:
        bbox = mask_to_bbox(sample.segments[idx], expand_frac)
        crops.append((bbox, crop_and_resize(image, bbox, side)))
    return CandidateSet(kept, crops, len(sample.sentence_spans))


def select_best_pair(table: np.ndarray) -> tuple[int, int, float] | None:
    """Apply the selection rule to a cosine table (column 0 = full image).

    Returns (sentence_index, candidate_index, similarity), or None when
    the overall winner is the full image. Ties break toward lower
    candidate index, then lower sentence index.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 1 or table.shape[1] < 1:
        raise ContractError(f"select_best_pair: bad table shape {table.shape}")
    per_sentence = np.argmax(table, axis=1)  # first max wins: lowest candidate
    scores = table[np.arange(table.shape[0]), per_sentence]
    winner = int(np.argmax(scores))  # first max wins: lowest sentence
    cand = int(per_sentence[winner])
    if cand == 0:
        return None
    return winner, cand, float(scores[winner])


def lism_match(model, sample: SampleRecord, image: np.ndarray,
               expand_frac: float = DEFAULT_EXPAND_FRAC) -> LocalPair | None:
    """Mine the single best local pair for one sample, if any.

    The model is the matching encoder (any checkpoint); its weights are
    read-only here. Returns None when no segment survives the area
    filter or when the full image out-scores every crop.
    """
    if not sample.sentence_spans:
        raise ContractError(f"sample {sample.id} has no sentences")
    cands = candidate_set(sample, image, expand_frac)
    if not cands.crops:
        return None
    images = np.stack([image] + [crop for _, crop in cands.crops])
    img_vecs = model.embed_images(images)
    sentences = [sample.caption[s:e] for s, e in sample.sentence_spans]
    txt_vecs = model.embed_texts(sentences)
    table = txt_vecs @ img_vecs.T
    selected = select_best_pair(table)
    if selected is None:
        return None
    sent_idx, cand_idx, sim = selected
    bbox, crop = cands.crops[cand_idx - 1]
    return LocalPair(
        sample_id=sample.id,
        bbox=bbox,
        segment_index=cands.kept_indices[cand_idx - 1],
        sentence_index=sent_idx,
        sentence_char_span=sample.sentence_spans[sent_idx],
        similarity=sim,
        local_image=crop,
    )


def match_dataset(model, dataset: Dataset,
                  expand_frac: float = DEFAULT_EXPAND_FRAC) -> list[LocalPair]:
    pairs = []
    for record in dataset:
        pair = lism_match(model, record, dataset.image(record.id), expand_frac)
        if pair is not None:
            pairs.append(pair)
    return pairs


# ---- pairs file ----


def write_pairs(path: str | Path, pairs: list[LocalPair]) -> None:
    with Path(path).open("w") as fh:
        for p in pairs:
            fh.write(json.dumps({
                "sample_id": p.sample_id,
                "bbox": list(p.bbox.as_tuple()),
                "segment_index": p.segment_index,
                "sentence_index": p.sentence_index,
                "sentence_char_span": list(p.sentence_char_span),
                "similarity": p.similarity,
            }) + "\n")


def read_pairs(path: str | Path) -> list[LocalPair]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    pairs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: invalid JSON at column {e.colno}") from e
            try:
                pairs.append(LocalPair(
                    sample_id=str(obj["sample_id"]),
                    bbox=BBox(*(int(v) for v in obj["bbox"])),
                    segment_index=int(obj["segment_index"]),
                    sentence_index=int(obj["sentence_index"]),
                    sentence_char_span=tuple(int(v) for v in obj["sentence_char_span"]),
                    similarity=float(obj["similarity"]),
                ))
            except (KeyError, TypeError) as e:
                raise ParseError(f"{path}:{lineno}: missing or malformed field: {e}") from e
    return pairs


def validate_pairs(pairs: list[LocalPair], dataset: Dataset) -> dict[str, LocalPair]:
    """Check pairs against a dataset; returns a sample_id -> pair map."""
    by_id: dict[str, LocalPair] = {}
    for p in pairs:
        record = dataset.get(p.sample_id)  # raises ValidationError when unknown
        if p.sample_id in by_id:
            raise ValidationError(f"duplicate local pair for sample {p.sample_id}")
        if p.sentence_index >= len(record.sentence_spans):
            raise ValidationError(
                f"pair for {p.sample_id}: sentence index {p.sentence_index} out of range"
            )
        if tuple(p.sentence_char_span) != tuple(record.sentence_spans[p.sentence_index]):
            raise ValidationError(
                f"pair for {p.sample_id}: char span {p.sentence_char_span} does not match dataset"
            )
        if not 0 <= p.segment_index < len(record.segments):
            raise ValidationError(
                f"pair for {p.sample_id}: segment index {p.segment_index} out of range"
            )
        side = dataset.image_side
        if p.bbox.x2 > side or p.bbox.y2 > side:
            raise ValidationError(f"pair for {p.sample_id}: bbox exceeds image bounds")
        by_id[p.sample_id] = p
    return by_id


# ---- joint test set ----


@dataclass
class JointTestSet:
    """Original items extended with mined local counterparts.

    Item ids are "<sample>#g" for originals and "<sample>#l" for local
    crops/sentences. Judgments map a query id to every correct id on the
    opposite modality: both of a sample's items when it has a local
    pair, otherwise just the global one.
    """

    image_ids: list[str]
    images: list[np.ndarray]
    text_ids: list[str]
    texts: list[str]
    t2i: dict[str, set[str]]
    i2t: dict[str, set[str]]


def build_joint_items(dataset: Dataset, pairs: list[LocalPair],
                      expand_frac: float = DEFAULT_EXPAND_FRAC) -> JointTestSet:
    """Assemble the joint set from already-mined pairs."""
    by_id = validate_pairs(pairs, dataset)
    image_ids, images, text_ids, texts = [], [], [], []
    t2i: dict[str, set[str]] = {}
    i2t: dict[str, set[str]] = {}
    for record in dataset:
        gid = f"{record.id}#g"
        image_ids.append(gid)
        images.append(dataset.image(record.id))
        text_ids.append(gid)
        texts.append(record.caption)
        pair = by_id.get(record.id)
        if pair is None:
            t2i[gid] = {gid}
            i2t[gid] = {gid}
            continue
        lid = f"{record.id}#l"
        crop = pair.local_image
        if crop is None:
            crop = crop_and_resize(dataset.image(record.id), pair.bbox, dataset.image_side)
        image_ids.append(lid)
        images.append(crop)
        s, e = pair.sentence_char_span
        text_ids.append(lid)
        texts.append(record.caption[s:e])
        both = {gid, lid}
        t2i[gid] = set(both)
        t2i[lid] = set(both)
        i2t[gid] = set(both)
        i2t[lid] = set(both)
    return JointTestSet(image_ids, images, text_ids, texts, t2i, i2t)


def build_joint_test_set(model, dataset: Dataset,
                         expand_frac: float = DEFAULT_EXPAND_FRAC) -> JointTestSet:
    """Mine pairs with the given model, then assemble the joint set."""
    if len(dataset) == 0:
        raise ContractError("build_joint_test_set: empty dataset")
    return build_joint_items(dataset, match_dataset(model, dataset, expand_frac), expand_frac)
