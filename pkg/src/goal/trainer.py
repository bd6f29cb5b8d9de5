"""Fine-tuning loop over global and local pairs with shared encoders.

One optimizer step sees a batch of full images and captions; the subset
of samples carrying a mined local pair additionally contributes crop
and sentence encodings plus the token-similarity term. Ablations switch
loss terms off without touching batch assembly semantics.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BBox, Dataset, split_sentences
from .encoders import (
    EncoderConfig,
    Model,
    TokenizedText,
    Vocab,
    pack_token_batch,
    save_checkpoint,
    tokenize,
)
from .errors import ContractError, ValidationError
from .lism import LocalPair, build_joint_items, crop_and_resize, match_dataset, write_pairs, validate_pairs
from .losses import (
    BatchViews,
    LossWeights,
    select_patch_indices,
    select_token_indices,
    total_loss,
)
from .tensor import Tensor

ABLATIONS = ("global_only", "local_only", "no_tsl", "goal")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
TRAIN_LOG_COLUMNS = ("step", "epoch", "L_global", "L_local", "L_TSL", "L_total", "logit_scale")

GRADCHECK_CONFIG = EncoderConfig(d_model=8, n_layers=1, n_heads=2, image_side=8,
                                 patch_size=4, base_context=12, extended_context=16)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    ablation: str = "goal"
    weights: LossWeights = field(default_factory=LossWeights)
    model: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")


def effective_weights(weights: LossWeights, ablation: str) -> LossWeights:
    """Loss weights with the ablation's disabled terms forced to zero."""
    if ablation == "goal":
        return weights
    if ablation == "global_only":
        return LossWeights(weights.lambda_global, 0.0, 0.0)
    if ablation == "local_only":
        return LossWeights(0.0, weights.lambda_local, 0.0)
    if ablation == "no_tsl":
        return LossWeights(weights.lambda_global, weights.lambda_local, 0.0)
    raise ValidationError(f"unknown ablation {ablation!r}")


class Adam:
    """Adam over a named parameter dict; parameters without a gradient
    this step are left untouched, moments included."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float):
        self.params = params
        self.learning_rate = learning_rate
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = np.asarray(p.grad, dtype=np.float64)
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data, dtype=np.float64)
                self._v[name] = np.zeros_like(p.data, dtype=np.float64)
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - ADAM_BETA1 ** t)
            v_hat = v / (1.0 - ADAM_BETA2 ** t)
            p.data = p.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class LocalEntry:
    """One sample's local pair, prepared for a specific batch."""

    row: int                    # position within the batch
    bbox: BBox
    crop: np.ndarray            # (S, S, 3) resized crop
    sentence: TokenizedText
    char_span: tuple[int, int]


def build_batch_views(model: Model, images: np.ndarray, tokens: list[TokenizedText],
                      entries: list[LocalEntry], ablation: str) -> BatchViews:
    """Run the shared encoders over everything one step needs.

    Global and local inputs go through the same parameter tensors; the
    ablation only prunes encodes whose outputs no loss term will read.
    """
    views = BatchViews()
    if ablation != "local_only":
        ids, lengths = pack_token_batch(tokens)
        views.t_g_cls, views.s_g = model.encode_text_batch(ids, lengths)
        views.v_g_cls, views.p_g = model.encode_image_batch(images)
    if ablation != "global_only" and entries:
        views.local_rows = [e.row for e in entries]
        views.v_l_cls, _ = model.encode_image_batch(np.stack([e.crop for e in entries]))
        lids, llens = pack_token_batch([e.sentence for e in entries])
        views.t_l_cls, _ = model.encode_text_batch(lids, llens)
        if ablation == "goal":
            views.patch_sets = [select_patch_indices(e.bbox, model.config) for e in entries]
            views.token_sets = [select_token_indices(e.char_span, tokens[e.row].spans)
                                for e in entries]
    return views


def _prepare_entries(dataset: Dataset, by_id: dict[str, LocalPair], model: Model,
                     images: list[np.ndarray]):
    """Per-record crop and sentence tokenization, computed once."""
    templates: list[LocalEntry | None] = []
    for i, rec in enumerate(dataset.records):
        pair = by_id.get(rec.id)
        if pair is None:
            templates.append(None)
            continue
        crop = crop_and_resize(images[i], pair.bbox, model.config.image_side)
        s, e = pair.sentence_char_span
        sent = tokenize(rec.caption[s:e], model.vocab, model.config)
        templates.append(LocalEntry(-1, pair.bbox, crop, sent, (s, e)))
    return templates


def train(dataset: Dataset, pairs: list[LocalPair] | None, config: TrainConfig,
          out_dir: str | Path | None = None, init: Model | None = None):
    """Fit a model; returns (model, per-step history).

    With out_dir set, also writes the checkpoint, train_log.csv, and a
    loss-curve figure there.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot train on an empty dataset")
    by_id = validate_pairs(pairs, dataset) if pairs else {}
    if init is not None:
        if init.config != config.model:
            raise ValidationError("init checkpoint config differs from the training config")
        model = init.copy()
    else:
        vocab = Vocab.build([r.caption for r in dataset.records])
        model = Model.init(config.model, vocab, config.seed)

    weights = effective_weights(config.weights, config.ablation)
    records = dataset.records
    images = [dataset.image(r.id) for r in records]
    tokens = [tokenize(r.caption, model.vocab, model.config) for r in records]
    templates = _prepare_entries(dataset, by_id, model, images)

    optimizer = Adam(model.parameters(), config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(records))
        for start in range(0, len(records), config.batch_size):
            chosen = order[start:start + config.batch_size]
            batch_images = np.stack([images[i] for i in chosen])
            batch_tokens = [tokens[i] for i in chosen]
            entries = [replace(templates[i], row=j) for j, i in enumerate(chosen)
                       if templates[i] is not None]
            views = build_batch_views(model, batch_images, batch_tokens, entries,
                                      config.ablation)
            loss, breakdown = total_loss(views, weights, model.params)
            step += 1
            history.append({
                "step": step,
                "epoch": epoch,
                "L_global": breakdown["L_global"],
                "L_local": breakdown["L_local"],
                "L_TSL": breakdown["L_TSL"],
                "L_total": breakdown["L_total"],
                "logit_scale": float(model.logit_scale.data),
            })
            if loss.requires_grad:
                optimizer.zero_grad()
                T.backward(loss)
                optimizer.step()

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir, model)
        write_train_log(out_dir / "train_log.csv", history)
        from .figures import plot_loss_curves
        plot_loss_curves(history, out_dir / "loss_curves.png")
    return model, history


def write_train_log(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_COLUMNS)
        for row in history:
            writer.writerow([row["step"], row["epoch"]]
                            + [f"{row[c]:.10g}" for c in TRAIN_LOG_COLUMNS[2:]])


def read_train_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {"step": int(row["step"]), "epoch": int(row["epoch"])}
        for c in TRAIN_LOG_COLUMNS[2:]:
            parsed[c] = float(row[c])
        out.append(parsed)
    return out


# ---- ablation suite ----

def _percent(value: float) -> str:
    return f"{100.0 * value:.2f}"


def run_ablation_suite(dataset: Dataset, pairs: list[LocalPair], base_config: TrainConfig,
                       out_dir: str | Path, test_dataset: Dataset | None = None,
                       test_pairs: list[LocalPair] | None = None) -> dict:
    """Train all four ablations from one shared init and compare them.

    Writes per-ablation checkpoints under out_dir plus comparison.csv
    (method x Recall@K) and joint_map.csv (method x mAP@10). Retrieval
    is measured on test_dataset when given, else on the training set.
    When no test pairs are supplied, the joint set's local items are
    mined with the goal-trained checkpoint.
    """
    from .evaluation import evaluate_joint, evaluate_original, ORIGINAL_KS

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = Vocab.build([r.caption for r in dataset.records])
    init_model = Model.init(base_config.model, vocab, base_config.seed)
    eval_dataset = test_dataset if test_dataset is not None else dataset

    models: dict[str, Model] = {}
    for ablation in ABLATIONS:
        config = replace(base_config, ablation=ablation)
        model, _ = train(dataset, pairs, config, out_dir=out_dir / ablation, init=init_model)
        models[ablation] = model

    comparison_rows = []
    for ablation in ABLATIONS:
        report = evaluate_original(models[ablation], eval_dataset)
        row = {"method": ablation}
        for direction in ("T2I", "I2T"):
            for k in ORIGINAL_KS:
                row[f"{direction}_R@{k}"] = _percent(report[direction][k])
        comparison_rows.append(row)
    comparison_path = out_dir / "comparison.csv"
    _write_rows(comparison_path, comparison_rows)

    if test_pairs is None:
        test_pairs = match_dataset(models["goal"], eval_dataset)
        write_pairs(out_dir / "test_pairs.jsonl", test_pairs)
    joint = build_joint_items(eval_dataset, test_pairs)
    joint_rows = []
    for ablation in ABLATIONS:
        report = evaluate_joint(models[ablation], joint)
        joint_rows.append({"method": ablation,
                           "T2I_mAP@10": _percent(report["T2I"]),
                           "I2T_mAP@10": _percent(report["I2T"])})
    joint_path = out_dir / "joint_map.csv"
    _write_rows(joint_path, joint_rows)

    from .figures import plot_method_bars
    plot_method_bars(comparison_rows, ["T2I_R@1", "I2T_R@1"], "Recall@1 (%)",
                     out_dir / "ablation_bars.png")
    plot_method_bars(joint_rows, ["T2I_mAP@10", "I2T_mAP@10"], "mAP@10 (%)",
                     out_dir / "joint_map_bars.png")
    return {"models": models, "comparison": comparison_rows, "joint": joint_rows,
            "test_pairs": test_pairs, "out_dir": out_dir}


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# ---- finite-difference gradient check ----

@dataclass
class GradcheckReport:
    ok: bool
    max_rel_err: float
    worst_param: str
    n_entries: int
    seconds: float
    per_param: dict[str, float]


def _gradcheck_scene(seed: int):
    """Tiny self-contained batch: 3 samples, 2 with a local pair."""
    rng = np.random.default_rng(seed)
    captions = [
        "red circle near blue square. green triangle sits alone.",
        "yellow square above cyan circle. purple triangle waits.",
        "brown triangle beside orange square. red circle floats.",
    ]
    vocab = Vocab.build(captions)
    images = rng.random((3, GRADCHECK_CONFIG.image_side, GRADCHECK_CONFIG.image_side, 3))
    tokens = [tokenize(c, vocab, GRADCHECK_CONFIG) for c in captions]
    entries = []
    for row, bbox, sentence_index in ((0, BBox(1, 1, 5, 5), 1), (2, BBox(2, 0, 8, 6), 0)):
        spans = split_sentences(captions[row])
        s, e = spans[sentence_index]
        crop = crop_and_resize(images[row], bbox, GRADCHECK_CONFIG.image_side)
        sent = tokenize(captions[row][s:e], vocab, GRADCHECK_CONFIG)
        entries.append(LocalEntry(row, bbox, crop, sent, (s, e)))
    return vocab, images, tokens, entries


def run_gradcheck(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> GradcheckReport:
    """Compare every parameter gradient of the full objective against
    central finite differences on a tiny config.

    Per entry: |analytic - fd| / max(|analytic|, |fd|, 1e-4). The floor
    turns the check absolute (at tol * 1e-4 = 1e-8) for near-zero
    gradients, where central differences on an O(1) loss only resolve
    to ~1e-10; key biases, for instance, have exactly zero gradient
    because a constant key offset cancels inside the softmax.
    """
    started = time.perf_counter()
    vocab, images, tokens, entries = _gradcheck_scene(seed)
    model = Model.init(GRADCHECK_CONFIG, vocab, seed)
    weights = LossWeights()

    def forward() -> Tensor:
        views = build_batch_views(model, images, tokens, entries, "goal")
        loss, _ = total_loss(views, weights, model.params)
        return loss

    loss = forward()
    for p in model.params.values():
        p.grad = None
    T.backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None
                       else np.array(p.grad, dtype=np.float64))
                for name, p in model.params.items()}

    per_param: dict[str, float] = {}
    worst_name = ""
    worst_err = 0.0
    n_entries = 0
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            with T.no_grad():
                up = forward().item()
            flat[i] = keep - h
            with T.no_grad():
                down = forward().item()
            flat[i] = keep
            fd = (up - down) / (2.0 * h)
            a = grad_flat[i]
            denom = max(abs(a), abs(fd), 1e-4)
            err = max(err, abs(a - fd) / denom)
            n_entries += 1
        per_param[name] = err
        if err >= worst_err:
            worst_err = err
            worst_name = name
    return GradcheckReport(
        ok=worst_err <= tol,
        max_rel_err=worst_err,
        worst_param=worst_name,
        n_entries=n_entries,
        seconds=time.perf_counter() - started,
        per_param=per_param,
    )
