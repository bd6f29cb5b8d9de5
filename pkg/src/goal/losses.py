"""The training objective: symmetric contrastive losses on global and
local pairs, plus a token-similarity loss that pulls pooled, projected
global tokens toward the matching local summary embeddings.

Index-set selection lives here too: which patch tokens fall inside a
local pair's box, and which sequence tokens fall inside its sentence
span. Both selections fall back to a nearest singleton rather than
returning an empty set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BBox
from .encoders import EncoderConfig
from .errors import ContractError, DimensionError, ValidationError
from .tensor import Tensor

LOGIT_SCALE_MAX = 100.0


@dataclass
class LossWeights:
    lambda_global: float = 1.0
    lambda_local: float = 0.5
    lambda_tsl: float = 1.0

    def __post_init__(self):
        if min(self.lambda_global, self.lambda_local, self.lambda_tsl) < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass
class BatchViews:
    """Everything one training step sees, already encoded.

    The first block covers all n samples; the local block covers the
    n_l <= n sub-batch that carries a local pair. local_rows holds those
    samples' positions within the batch, aligned with v_l_cls, t_l_cls,
    patch_sets and token_sets. Fields a given ablation never touches may
    be None.
    """

    v_g_cls: Tensor | None = None       # (n, d)
    t_g_cls: Tensor | None = None       # (n, d)
    p_g: Tensor | None = None           # (n, N, d) patch tokens
    s_g: Tensor | None = None           # (n, L, d) sequence tokens
    local_rows: list[int] = field(default_factory=list)
    v_l_cls: Tensor | None = None       # (n_l, d)
    t_l_cls: Tensor | None = None       # (n_l, d)
    patch_sets: list[list[int]] = field(default_factory=list)
    token_sets: list[list[int]] = field(default_factory=list)

    @property
    def n_local(self) -> int:
        return len(self.local_rows)


def select_patch_indices(bbox: BBox, config: EncoderConfig) -> list[int]:
    """Patches whose center pixel lies inside the box, boundaries
    inclusive; when none do, the single patch center nearest the box
    center (lowest index on ties)."""
    g = config.grid
    ps = config.patch_size
    centers = np.arange(g) * ps + ps / 2.0
    cols = np.flatnonzero((centers >= bbox.x1) & (centers <= bbox.x2))
    rows = np.flatnonzero((centers >= bbox.y1) & (centers <= bbox.y2))
    if cols.size and rows.size:
        return [int(r * g + c) for r in rows for c in cols]
    bx = (bbox.x1 + bbox.x2) / 2.0
    by = (bbox.y1 + bbox.y2) / 2.0
    cx, cy = np.meshgrid(centers, centers)
    dist = (cx - bx) ** 2 + (cy - by) ** 2
    return [int(np.argmin(dist))]  # row-major argmin: lowest index wins ties


def select_token_indices(sentence_char_span: tuple[int, int],
                         token_char_spans: list[tuple[int, int]]) -> list[int]:
    """Non-special tokens whose char span overlaps the sentence span.

    Specials and pads carry empty spans and can never overlap. When no
    token overlaps (zero-length sentence span, say), the nearest real
    token by character distance is returned, later index winning ties so
    the fallback stays adjacent to <end>.
    """
    s, e = sentence_char_span
    if s > e or s < 0:
        raise ContractError(f"bad sentence span ({s}, {e})")
    hits = [i for i, (ts, te) in enumerate(token_char_spans) if ts < te and ts < e and te > s]
    if hits:
        return hits
    best = None
    best_d = None
    for i, (ts, te) in enumerate(token_char_spans):
        if ts >= te:
            continue
        d = max(ts - e, s - te, 0)
        if best_d is None or d <= best_d:
            best, best_d = i, d
    if best is None:
        raise ContractError("no real tokens to fall back to")
    return [best]


def pool_and_project(tokens: Tensor, indices: list[int], w: Tensor, b: Tensor) -> Tensor:
    """Mean of the selected token rows pushed through one affine map.

    tokens is (K, d); the result is (d,). Empty index sets are the
    caller's bug: fallbacks happen at selection time.
    """
    if not indices:
        raise ContractError("pool_and_project: empty index set")
    pooled = T.reshape(T.mean_rows(tokens, indices), (1, -1))
    return T.reshape(T.add_broadcast(T.matmul(pooled, w), b), (-1,))


def _pooled_projected_rows(tokens3d: Tensor, rows: list[int], index_sets: list[list[int]],
                           w: Tensor, b: Tensor) -> Tensor:
    """Batch form of pool_and_project: one (n_l, d) tensor."""
    pooled = [T.reshape(T.mean_rows(T.take(tokens3d, r), idx), (1, -1))
              for r, idx in zip(rows, index_sets)]
    return T.add_broadcast(T.matmul(T.concat(pooled, axis=0), w), b)


def _scaled_logits(a: Tensor, b: Tensor, logit_scale: Tensor) -> Tensor:
    a_hat = T.l2_normalize_rows(a)
    b_hat = T.l2_normalize_rows(b)
    s = T.clamp_max(T.exp(logit_scale), LOGIT_SCALE_MAX)
    return T.mul(T.matmul(a_hat, T.transpose(b_hat, (1, 0))), s)


def _mean_diag_cross_entropy(logits: Tensor) -> Tensor:
    """Mean over rows of -log softmax(row)[diagonal]."""
    n = logits.shape[0]
    row_max = np.max(logits.data, axis=1, keepdims=True)
    shifted = T.add_const(logits, -row_max)
    lse = T.add(T.log(T.sum_axis(T.exp(shifted), 1)), Tensor(row_max[:, 0]))
    return T.scale(T.sum_all(T.sub(lse, T.diag_part(logits))), 1.0 / n)


def contrastive_loss(a: Tensor, b: Tensor, logit_scale: Tensor) -> Tensor:
    """Symmetric InfoNCE on cosine logits with targets on the diagonal.

    Rows are l2-normalized inside; exp(logit_scale) is clamped at 100.
    Equals ln(n) under uniform logits and 0 for n = 1.
    """
    if a.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"contrastive_loss: shapes {a.shape} and {b.shape} must match (n, d)")
    logits = _scaled_logits(a, b, logit_scale)
    per_row = _mean_diag_cross_entropy(logits)
    per_col = _mean_diag_cross_entropy(T.transpose(logits, (1, 0)))
    return T.scale(T.add(per_row, per_col), 0.5)


def _mse_vs_identity(x: Tensor, y: Tensor) -> Tensor:
    n = x.shape[0]
    sim = T.matmul(T.l2_normalize_rows(x), T.transpose(T.l2_normalize_rows(y), (1, 0)))
    diff = T.add_const(sim, -np.eye(n))
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / (n * n))


def tsl_loss(p_hat: Tensor, v_l_cls: Tensor, s_hat: Tensor, t_l_cls: Tensor) -> Tensor:
    """MSE between each modality's cosine matrix and the identity,
    averaged over all n_l^2 entries, the two modalities summed."""
    if p_hat.shape != v_l_cls.shape or s_hat.shape != t_l_cls.shape:
        raise DimensionError("tsl_loss: row counts and widths must match per modality")
    if p_hat.shape[0] < 1:
        raise ContractError("tsl_loss: needs at least one local pair")
    return T.add(_mse_vs_identity(p_hat, v_l_cls), _mse_vs_identity(s_hat, t_l_cls))


def total_loss(batch: BatchViews, weights: LossWeights,
               params: dict[str, Tensor]) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three terms with an unweighted breakdown.

    A term is computed only when its weight is positive and its inputs
    exist; the local and similarity terms are defined to be 0 when the
    batch has no local pairs. params supplies the logit scale and the
    two projection maps.
    """
    breakdown = {"L_global": 0.0, "L_local": 0.0, "L_TSL": 0.0}
    total: Tensor | None = None

    def accumulate(term: Tensor, weight: float) -> None:
        nonlocal total
        weighted = T.scale(term, weight) if weight != 1.0 else term
        total = weighted if total is None else T.add(total, weighted)

    if weights.lambda_global > 0:
        if batch.v_g_cls is None or batch.t_g_cls is None:
            raise ContractError("global term enabled but global views missing")
        lg = contrastive_loss(batch.v_g_cls, batch.t_g_cls, params["logit_scale"])
        breakdown["L_global"] = lg.item()
        accumulate(lg, weights.lambda_global)

    if batch.n_local > 0:
        if weights.lambda_local > 0:
            if batch.v_l_cls is None or batch.t_l_cls is None:
                raise ContractError("local term enabled but local views missing")
            ll = contrastive_loss(batch.v_l_cls, batch.t_l_cls, params["logit_scale"])
            breakdown["L_local"] = ll.item()
            accumulate(ll, weights.lambda_local)
        if weights.lambda_tsl > 0:
            if batch.p_g is None or batch.s_g is None or batch.v_l_cls is None or batch.t_l_cls is None:
                raise ContractError("similarity term enabled but token or local views missing")
            p_hat = _pooled_projected_rows(batch.p_g, batch.local_rows, batch.patch_sets,
                                           params["proj.img.w"], params["proj.img.b"])
            s_hat = _pooled_projected_rows(batch.s_g, batch.local_rows, batch.token_sets,
                                           params["proj.txt.w"], params["proj.txt.b"])
            lt = tsl_loss(p_hat, batch.v_l_cls, s_hat, batch.t_l_cls)
            breakdown["L_TSL"] = lt.item()
            accumulate(lt, weights.lambda_tsl)

    if total is None:
        total = Tensor(0.0)
    breakdown["L_total"] = float(total.data)
    return total, breakdown
