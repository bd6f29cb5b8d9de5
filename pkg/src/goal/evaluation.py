"""Retrieval evaluation: Recall@K on original pairs, mAP@K on joint sets.

Scores are cosines between unit embeddings. Rankings sort by descending
score with ties broken by ascending item id, so reports are reproducible
to the byte.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, write_gemb
from .errors import ContractError, ValidationError
from .lism import JointTestSet

ORIGINAL_KS = (1, 5, 25, 50)
JOINT_K = 10


@dataclass
class RetrievalIndex:
    """Item ids with their unit-norm embedding rows."""

    ids: list[str]
    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ContractError(
                f"index needs one row per id: {len(self.ids)} ids, matrix {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate item ids in retrieval index")
        if len(self.ids):
            norms = np.linalg.norm(self.vectors, axis=1)
            worst = float(np.abs(norms - 1.0).max())
            if worst > 1e-10:
                raise ContractError(f"index rows must be unit norm, worst deviation {worst:.3e}")

    def __len__(self) -> int:
        return len(self.ids)


def rank(index: RetrievalIndex, query_vec: np.ndarray) -> list[str]:
    """All item ids ordered by descending cosine, ties by ascending id."""
    scores = index.vectors @ np.asarray(query_vec, dtype=np.float64)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    return [index.ids[i] for i in order]


def _check_judgments(index: RetrievalIndex, queries: RetrievalIndex,
                     judgments: dict[str, set[str]], k: int) -> None:
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not len(queries):
        raise ValidationError("no queries to evaluate")
    items = set(index.ids)
    for qid in queries.ids:
        rel = judgments.get(qid)
        if not rel:
            raise ValidationError(f"query {qid!r} has no relevance judgments")
        missing = rel - items
        if missing:
            raise ValidationError(
                f"judgments for {qid!r} reference unknown items {sorted(missing)}")


def recall_at_k(index: RetrievalIndex, queries: RetrievalIndex,
                judgments: dict[str, set[str]], k: int) -> float:
    """Fraction of queries with at least one relevant item in the top k."""
    _check_judgments(index, queries, judgments, k)
    hits = 0
    for qid, qvec in zip(queries.ids, queries.vectors):
        top = rank(index, qvec)[:k]
        if judgments[qid].intersection(top):
            hits += 1
    return hits / len(queries)


def map_at_k(index: RetrievalIndex, queries: RetrievalIndex,
             judgments: dict[str, set[str]], k: int) -> float:
    """Mean over queries of AP@k = (1/min(R,k)) sum_i P@i * rel(i)."""
    _check_judgments(index, queries, judgments, k)
    ap_sum = 0.0
    for qid, qvec in zip(queries.ids, queries.vectors):
        rel = judgments[qid]
        top = rank(index, qvec)[:k]
        found = 0
        ap = 0.0
        for i, item in enumerate(top, start=1):
            if item in rel:
                found += 1
                ap += found / i
        ap_sum += ap / min(len(rel), k)
    return ap_sum / len(queries)


def _image_index(model, ids: list[str], images) -> RetrievalIndex:
    stacked = np.stack(images) if len(images) else np.zeros((0, 1, 1, 3))
    return RetrievalIndex(list(ids), model.embed_images(stacked))


def _text_index(model, ids: list[str], texts: list[str]) -> RetrievalIndex:
    return RetrievalIndex(list(ids), model.embed_texts(list(texts)))


def evaluate_original(model, dataset: Dataset, ks=ORIGINAL_KS) -> dict[str, dict[int, float]]:
    """Recall@K in both directions; each caption's sole correct image is
    its own sample and vice versa."""
    ids = dataset.ids()
    images = _image_index(model, ids, [dataset.image(i) for i in ids])
    texts = _text_index(model, ids, [dataset.get(i).caption for i in ids])
    identity = {i: {i} for i in ids}
    return {
        "T2I": {k: recall_at_k(images, texts, identity, k) for k in ks},
        "I2T": {k: recall_at_k(texts, images, identity, k) for k in ks},
    }


def evaluate_joint(model, joint: JointTestSet, k: int = JOINT_K) -> dict[str, float]:
    """mAP@k over the global+local item pool with multi-correct judgments."""
    images = _image_index(model, joint.image_ids, joint.images)
    texts = _text_index(model, joint.text_ids, joint.texts)
    return {
        "T2I": map_at_k(images, texts, joint.t2i, k),
        "I2T": map_at_k(texts, images, joint.i2t, k),
    }


def embed_corpus(model, dataset: Dataset) -> dict[str, object]:
    """Unit CLS embeddings for every image and caption, order preserving."""
    ids = dataset.ids()
    return {
        "ids": ids,
        "image_vecs": model.embed_images(np.stack([dataset.image(i) for i in ids])),
        "text_vecs": model.embed_texts([dataset.get(i).caption for i in ids]),
    }


def write_corpus_embeddings(prefix: str | Path, corpus: dict[str, object]) -> list[Path]:
    prefix = Path(prefix)
    img = prefix.with_name(prefix.name + ".images.gemb")
    txt = prefix.with_name(prefix.name + ".texts.gemb")
    write_gemb(img, corpus["ids"], corpus["image_vecs"])
    write_gemb(txt, corpus["ids"], corpus["text_vecs"])
    return [img, txt]


# ---- report files ----

def original_report_columns(ks=ORIGINAL_KS) -> list[str]:
    return [f"{d}_R@{k}" for d in ("T2I", "I2T") for k in ks]


def joint_report_columns() -> list[str]:
    return [f"{d}_mAP@{JOINT_K}" for d in ("T2I", "I2T")]


def format_percent(value: float) -> str:
    return f"{100.0 * value:.2f}"


def write_report_csv(path: str | Path, mode: str, metrics) -> None:
    """One header plus one row; metric cells are percentages, %.2f."""
    if mode == "original":
        header = ["mode"] + original_report_columns()
        row = ["original"] + [format_percent(metrics[d][k])
                              for d in ("T2I", "I2T") for k in ORIGINAL_KS]
    elif mode == "joint":
        header = ["mode"] + joint_report_columns()
        row = ["joint"] + [format_percent(metrics[d]) for d in ("T2I", "I2T")]
    else:
        raise ValidationError(f"unknown report mode {mode!r}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(row)


def read_csv_rows(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
