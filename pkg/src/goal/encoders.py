"""The two-tower encoder: a patch transformer for images and a token
transformer for text, sharing one parameter dictionary.

Conventions that the rest of the package relies on:

* Image tokens are the final-layer patch positions in row-major patch
  order; the prepended class position is reported separately and never
  appears in the token sequence.
* The text summary vector is read at the ``<end>`` position. Attention
  is bidirectional, with padding masked out of the keys, so trailing
  pads cannot influence any real position.
* Text positional embeddings are stored at ``base_context`` rows and
  stretched to ``extended_context`` by linear interpolation inside the
  autodiff graph, so gradients flow back to the stored table.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParseError, ValidationError
from .tensor import Tensor

CHECKPOINT_FORMAT = "goal-checkpoint-v1"
MASK_BIAS = -1e9

SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")
PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    image_side: int = 64
    patch_size: int = 8
    base_context: int = 77
    extended_context: int = 308

    def __post_init__(self):
        if min(self.d_model, self.n_layers, self.n_heads, self.image_side,
               self.patch_size, self.base_context, self.extended_context) < 1:
            raise ValidationError("encoder config fields must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}"
            )
        if self.image_side % self.patch_size != 0:
            raise ValidationError(
                f"image_side {self.image_side} must be divisible by patch_size {self.patch_size}"
            )
        if self.extended_context < self.base_context:
            raise ValidationError("extended_context must be at least base_context")
        if self.base_context < 4:
            raise ValidationError("base_context must hold at least start, end and two tokens")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return 2 * self.d_model


class Vocab:
    """Word-level vocabulary. Ids are list positions; the four special
    tokens always occupy ids 0..3."""

    def __init__(self, words: list[str]):
        if tuple(words[:4]) != SPECIALS:
            raise ValidationError(f"vocabulary must start with {SPECIALS}")
        if len(set(words)) != len(words):
            raise ValidationError("vocabulary contains duplicate entries")
        self.words = list(words)
        self._index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    @classmethod
    def build(cls, texts) -> "Vocab":
        seen: set[str] = set()
        for text in texts:
            seen.update(m.group(0) for m in _WORD_RE.finditer(text.lower()))
        seen.difference_update(SPECIALS)
        return cls(list(SPECIALS) + sorted(seen))


@dataclass
class TokenizedText:
    """Fixed-length id sequence plus character provenance.

    ids has exactly extended_context entries. spans[i] is the half-open
    character range of token i in the lowercased source text; specials
    and pads get empty spans. length counts positions up to and
    including <end>.
    """

    ids: np.ndarray
    spans: list[tuple[int, int]]
    length: int


def tokenize(text: str, vocab: Vocab, config: EncoderConfig) -> TokenizedText:
    """Lowercase, split into words and punctuation, frame with specials.

    Words beyond extended_context - 2 are dropped so start and end
    always fit. Output is padded to exactly extended_context ids.
    """
    lower = text.lower()
    ctx = config.extended_context
    pieces = [(m.group(0), m.span()) for m in _WORD_RE.finditer(lower)]
    pieces = pieces[: ctx - 2]
    n = len(lower)
    ids = [START_ID] + [vocab.id_of(w) for w, _ in pieces] + [END_ID]
    spans = [(0, 0)] + [s for _, s in pieces] + [(n, n)]
    length = len(ids)
    ids += [PAD_ID] * (ctx - length)
    spans += [(n, n)] * (ctx - length)
    return TokenizedText(np.asarray(ids, dtype=np.int64), spans, length)


def pack_token_batch(tokenized: list[TokenizedText]) -> tuple[np.ndarray, np.ndarray]:
    """Stack tokenized texts, trimming shared trailing padding.

    Returns (ids of shape (B, L), lengths of shape (B,)) where L is the
    longest real length in the batch. Pads only ever trail, and padded
    positions are masked inside the encoder, so trimming cannot change
    any output.
    """
    if not tokenized:
        raise ContractError("pack_token_batch: empty batch")
    lengths = np.asarray([t.length for t in tokenized], dtype=np.intp)
    longest = int(lengths.max())
    ids = np.stack([t.ids[:longest] for t in tokenized])
    return ids, lengths


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, S, S, 3) -> (B, n_patches, patch_size*patch_size*3), row-major
    patch order. Pixels of patch i land only in output row i."""
    b, side, side2, ch = images.shape
    if side != side2 or ch != 3:
        raise DimensionError(f"patchify: expected (B, S, S, 3), got {images.shape}")
    if side % patch_size != 0:
        raise DimensionError(f"patchify: side {side} not divisible by patch {patch_size}")
    g = side // patch_size
    x = images.reshape(b, g, patch_size, g, patch_size, ch)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch_size * patch_size * ch)


def interpolate_positional_embeddings(table: Tensor, target_len: int) -> Tensor:
    """Stretch a positional table to target_len rows by linear blending.

    Row j of the result samples position j * (base - 1) / (target - 1)
    of the source, so both endpoints are copied exactly and
    target_len == base returns the table unchanged. Differentiable: the
    blend weights scatter gradient back into the source rows.
    """
    base = table.shape[0]
    if table.ndim != 2:
        raise DimensionError(f"positional table must be 2-d, got {table.shape}")
    if target_len < base:
        raise ContractError(f"cannot shrink positional table from {base} to {target_len}")
    if target_len == base:
        return table
    pos = np.arange(target_len, dtype=np.float64) * (base - 1) / (target_len - 1)
    lo = np.floor(pos).astype(np.intp)
    lo = np.minimum(lo, base - 1)
    hi = np.minimum(lo + 1, base - 1)
    frac = (pos - lo)[:, None]
    data = (1.0 - frac) * table.data[lo] + frac * table.data[hi]

    def rule(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, lo, (1.0 - frac) * g)
        np.add.at(dt, hi, frac * g)
        return (dt,)

    return T._make(data, (table,), rule)


def _param_spec(config: EncoderConfig, vocab_size: int) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init kind) for every parameter.

    The order is the initialization draw order and the checkpoint blob
    layout, so it must stay stable.
    """
    d = config.d_model
    spec: list[tuple[str, tuple[int, ...], str]] = []

    def block(prefix: str):
        spec.extend([
            (f"{prefix}.ln1.g", (d,), "ones"),
            (f"{prefix}.ln1.b", (d,), "zeros"),
            (f"{prefix}.attn.wq", (d, d), "linear"),
            (f"{prefix}.attn.bq", (d,), "zeros"),
            (f"{prefix}.attn.wk", (d, d), "linear"),
            (f"{prefix}.attn.bk", (d,), "zeros"),
            (f"{prefix}.attn.wv", (d, d), "linear"),
            (f"{prefix}.attn.bv", (d,), "zeros"),
            (f"{prefix}.attn.wo", (d, d), "linear"),
            (f"{prefix}.attn.bo", (d,), "zeros"),
            (f"{prefix}.ln2.g", (d,), "ones"),
            (f"{prefix}.ln2.b", (d,), "zeros"),
            (f"{prefix}.mlp.w1", (d, config.mlp_hidden), "linear"),
            (f"{prefix}.mlp.b1", (config.mlp_hidden,), "zeros"),
            (f"{prefix}.mlp.w2", (config.mlp_hidden, d), "linear"),
            (f"{prefix}.mlp.b2", (d,), "zeros"),
        ])

    spec.append(("vis.patch.w", (config.patch_dim, d), "linear"))
    spec.append(("vis.patch.b", (d,), "zeros"))
    spec.append(("vis.cls", (1, d), "embed"))
    spec.append(("vis.pos", (config.n_patches + 1, d), "embed"))
    for i in range(config.n_layers):
        block(f"vis.blk{i}")
    spec.append(("vis.lnf.g", (d,), "ones"))
    spec.append(("vis.lnf.b", (d,), "zeros"))

    spec.append(("txt.tok", (vocab_size, d), "embed"))
    spec.append(("txt.pos", (config.base_context, d), "embed"))
    for i in range(config.n_layers):
        block(f"txt.blk{i}")
    spec.append(("txt.lnf.g", (d,), "ones"))
    spec.append(("txt.lnf.b", (d,), "zeros"))

    spec.append(("proj.img.w", (d, d), "linear"))
    spec.append(("proj.img.b", (d,), "zeros"))
    spec.append(("proj.txt.w", (d, d), "linear"))
    spec.append(("proj.txt.b", (d,), "zeros"))
    spec.append(("logit_scale", (), "logit_scale"))
    return spec


def init_params(config: EncoderConfig, vocab_size: int, seed: int) -> dict[str, Tensor]:
    """Draw all parameters from one seeded generator in spec order.

    Linear weights are uniform on +-1/sqrt(fan_in), embeddings are
    N(0, 0.02), biases start at zero, and the logit scale starts at
    ln(1/0.07) following the usual contrastive initialization.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in _param_spec(config, vocab_size):
        if kind == "linear":
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "embed":
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "logit_scale":
            data = np.array(math.log(1.0 / 0.07))
        else:  # pragma: no cover
            raise ContractError(f"unknown init kind {kind}")
        params[name] = Tensor(data, requires_grad=True)
    return params


def _attention(p: dict[str, Tensor], pre: str, x: Tensor, bias: np.ndarray | None,
               n_heads: int) -> Tensor:
    b, l, d = x.shape
    hd = d // n_heads

    def project(name: str) -> Tensor:
        h = T.add_broadcast(T.matmul(x, p[f"{pre}.w{name}"]), p[f"{pre}.b{name}"])
        return T.transpose(T.reshape(h, (b, l, n_heads, hd)), (0, 2, 1, 3))

    q, k, v = project("q"), project("k"), project("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    if bias is not None:
        scores = T.add_const(scores, bias)
    ctx = T.matmul(T.softmax_rows(scores), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, l, d))
    return T.add_broadcast(T.matmul(ctx, p[f"{pre}.wo"]), p[f"{pre}.bo"])


def _transformer(p: dict[str, Tensor], tower: str, x: Tensor, bias: np.ndarray | None,
                 config: EncoderConfig) -> Tensor:
    for i in range(config.n_layers):
        pre = f"{tower}.blk{i}"
        h = T.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        x = T.add(x, _attention(p, f"{pre}.attn", h, bias, config.n_heads))
        h = T.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        h = T.gelu(T.add_broadcast(T.matmul(h, p[f"{pre}.mlp.w1"]), p[f"{pre}.mlp.b1"]))
        h = T.add_broadcast(T.matmul(h, p[f"{pre}.mlp.w2"]), p[f"{pre}.mlp.b2"])
        x = T.add(x, h)
    return T.layer_norm(x, p[f"{tower}.lnf.g"], p[f"{tower}.lnf.b"])


@dataclass
class EncoderOutput:
    """Summary vector plus the full last-layer token sequence."""

    cls: Tensor
    tokens: Tensor


class Model:
    """Parameter dictionary plus the forward passes that use it."""

    def __init__(self, config: EncoderConfig, vocab: Vocab, params: dict[str, Tensor], seed: int):
        self.config = config
        self.vocab = vocab
        self.params = params
        self.seed = seed

    @classmethod
    def init(cls, config: EncoderConfig, vocab: Vocab, seed: int) -> "Model":
        return cls(config, vocab, init_params(config, len(vocab), seed), seed)

    def copy(self) -> "Model":
        fresh = {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.params.items()}
        return Model(self.config, self.vocab, fresh, self.seed)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def logit_scale(self) -> Tensor:
        return self.params["logit_scale"]

    # ---- forward passes ----

    def encode_image_batch(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """images (B, S, S, 3) in [0, 1] -> (cls (B, d), tokens (B, N, d))."""
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (cfg.image_side, cfg.image_side, 3):
            raise DimensionError(
                f"encode_image_batch: expected (B, {cfg.image_side}, {cfg.image_side}, 3), "
                f"got {images.shape}"
            )
        p = self.params
        patches = Tensor(patchify(images, cfg.patch_size))
        x = T.add_broadcast(T.matmul(patches, p["vis.patch.w"]), p["vis.patch.b"])
        cls = T.tile_leading(p["vis.cls"], images.shape[0])
        x = T.concat([cls, x], axis=1)
        x = T.add_broadcast(x, p["vis.pos"])
        x = _transformer(p, "vis", x, None, cfg)
        cls_out = T.reshape(T.narrow(x, 1, 0, 1), (images.shape[0], cfg.d_model))
        return cls_out, T.narrow(x, 1, 1, cfg.n_patches)

    def encode_text_batch(self, ids: np.ndarray, lengths: np.ndarray) -> tuple[Tensor, Tensor]:
        """ids (B, L) with trailing pads -> (cls (B, d), tokens (B, L, d)).

        The cls vector is read at each sequence's <end> position; padded
        key positions are pushed to -1e9 before the softmax.
        """
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.intp)
        if ids.ndim != 2:
            raise DimensionError(f"encode_text_batch: ids must be (B, L), got {ids.shape}")
        b, l = ids.shape
        if l > cfg.extended_context:
            raise ContractError(f"sequence length {l} exceeds extended_context {cfg.extended_context}")
        if lengths.shape != (b,) or lengths.min() < 2 or lengths.max() > l:
            raise ContractError("encode_text_batch: lengths inconsistent with ids")
        p = self.params
        x = T.embedding(p["txt.tok"], ids)
        pos = interpolate_positional_embeddings(p["txt.pos"], cfg.extended_context)
        x = T.add_broadcast(x, T.narrow(pos, 0, 0, l))
        if int(lengths.min()) < l:
            bias = np.where(np.arange(l) < lengths[:, None], 0.0, MASK_BIAS)
            bias = bias[:, None, None, :]  # (B, 1, 1, L) over key positions
        else:
            bias = None
        x = _transformer(p, "txt", x, bias, cfg)
        cls_out = T.gather_rows(x, lengths - 1)
        return cls_out, x

    def encode_image(self, image: np.ndarray) -> EncoderOutput:
        cls, tokens = self.encode_image_batch(np.asarray(image)[None])
        return EncoderOutput(T.take(cls, 0), T.take(tokens, 0))

    def embed_images(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """CLS embeddings as a plain (n, d) array with unit rows.

        Inference-only: no graph is recorded. Order preserving and
        deterministic.
        """
        out = []
        with T.no_grad():
            for at in range(0, len(images), batch_size):
                cls, _ = self.encode_image_batch(np.asarray(images[at:at + batch_size]))
                out.append(T.l2_normalize_rows(cls).data)
        return np.concatenate(out) if out else np.zeros((0, self.config.d_model))

    def embed_texts(self, texts: list[str], batch_size: int = 64) -> np.ndarray:
        """CLS embeddings of raw strings, unit rows, no graph recorded."""
        out = []
        with T.no_grad():
            for at in range(0, len(texts), batch_size):
                chunk = [tokenize(t, self.vocab, self.config) for t in texts[at:at + batch_size]]
                ids, lengths = pack_token_batch(chunk)
                cls, _ = self.encode_text_batch(ids, lengths)
                out.append(T.l2_normalize_rows(cls).data)
        return np.concatenate(out) if out else np.zeros((0, self.config.d_model))

    def encode_text(self, tokenized: TokenizedText) -> EncoderOutput:
        ids, lengths = pack_token_batch([tokenized])
        cls, tokens = self.encode_text_batch(ids, lengths)
        return EncoderOutput(T.take(cls, 0), T.take(tokens, 0))

    # ---- persistence ----

    def save(self, directory: str | Path) -> None:
        save_checkpoint(directory, self)

    @classmethod
    def load(cls, directory: str | Path) -> "Model":
        return load_checkpoint(directory)


def save_checkpoint(directory: str | Path, model: Model) -> None:
    """Write manifest.json plus a little-endian float64 blob.

    The manifest records each parameter's name, shape and byte offset
    into params.f64, together with the config, vocabulary and seed
    needed to rebuild the model.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "seed": model.seed,
        "config": asdict(model.config),
        "vocab": model.vocab.words,
        "params": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (directory / "params.f64").write_bytes(b"".join(chunks))


def load_checkpoint(directory: str | Path) -> Model:
    """Inverse of save_checkpoint, with structural validation."""
    directory = Path(directory)
    man_path = directory / "manifest.json"
    blob_path = directory / "params.f64"
    if not man_path.is_file():
        raise FileNotFoundError(man_path)
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{man_path}: invalid JSON at offset {e.pos}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{man_path}: unknown format {manifest.get('format')!r}")
    try:
        config = EncoderConfig(**manifest["config"])
        vocab = Vocab(manifest["vocab"])
        seed = int(manifest["seed"])
        declared = [(e["name"], tuple(e["shape"]), int(e["offset"])) for e in manifest["params"]]
    except (KeyError, TypeError) as e:
        raise ParseError(f"{man_path}: missing or malformed field: {e}") from e

    expected = [(n, s) for n, s, _ in _param_spec(config, len(vocab))]
    if [(n, s) for n, s, _ in declared] != expected:
        raise ParseError(f"{man_path}: parameter list does not match config")

    blob = blob_path.read_bytes()
    params: dict[str, Tensor] = {}
    offset = 0
    for name, shape, declared_off in declared:
        if declared_off != offset:
            raise ParseError(f"{man_path}: offset for {name} is {declared_off}, expected {offset}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise ParseError(
                f"{blob_path}: truncated at byte {len(blob)}, need {offset + nbytes} for {name}"
            )
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True)
        offset += nbytes
    if offset != len(blob):
        raise ParseError(f"{blob_path}: {len(blob) - offset} trailing bytes after parameters")
    return Model(config, vocab, params, seed)
