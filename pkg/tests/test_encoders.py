import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import goal.tensor as T
from goal.encoders import (
    END_ID,
    PAD_ID,
    SPECIALS,
    START_ID,
    EncoderConfig,
    Model,
    Vocab,
    interpolate_positional_embeddings,
    pack_token_batch,
    patchify,
    tokenize,
)
from goal.errors import ContractError, DimensionError, ParseError, ValidationError

from _oracles import central_difference, max_rel_err

TINY = EncoderConfig(d_model=8, n_layers=1, n_heads=2, image_side=8, patch_size=4,
                     base_context=8, extended_context=12)


@pytest.fixture(scope="module")
def tiny_model():
    vocab = Vocab.build(["a red circle sits here.", "two shapes on gray!"])
    return Model.init(TINY, vocab, seed=7)


class TestConfig:
    def test_defaults(self):
        cfg = EncoderConfig()
        assert (cfg.d_model, cfg.n_layers, cfg.n_heads) == (64, 2, 4)
        assert (cfg.image_side, cfg.patch_size) == (64, 8)
        assert (cfg.base_context, cfg.extended_context) == (77, 308)
        assert cfg.n_patches == 64 and cfg.patch_dim == 192

    def test_validation(self):
        with pytest.raises(ValidationError):
            EncoderConfig(d_model=10, n_heads=4)
        with pytest.raises(ValidationError):
            EncoderConfig(image_side=60, patch_size=8)
        with pytest.raises(ValidationError):
            EncoderConfig(base_context=77, extended_context=76)
        with pytest.raises(ValidationError):
            EncoderConfig(n_layers=0)


class TestTokenizer:
    def test_vocab_layout(self):
        v = Vocab.build(["Zebra apple! apple zebra?"])
        assert tuple(v.words[:4]) == SPECIALS
        assert v.words[4:] == ["!", "?", "apple", "zebra"]
        assert v.id_of("apple") == 6
        assert v.id_of("missing") == 3  # <unk>

    def test_framing_and_padding(self, tiny_model):
        cfg, vocab = tiny_model.config, tiny_model.vocab
        tok = tokenize("A red circle.", vocab, cfg)
        assert tok.ids.shape == (cfg.extended_context,)
        assert tok.ids[0] == START_ID
        assert tok.ids[tok.length - 1] == END_ID
        assert tok.length == 2 + 4  # a, red, circle, "."
        assert np.all(tok.ids[tok.length:] == PAD_ID)

    def test_span_roundtrip(self, tiny_model):
        cfg, vocab = tiny_model.config, tiny_model.vocab
        text = "Two shapes, on GRAY!"
        tok = tokenize(text, vocab, cfg)
        lower = text.lower()
        words = []
        for i in range(tok.length):
            s, e = tok.spans[i]
            if s == e:
                continue
            words.append(lower[s:e])
        assert words == ["two", "shapes", ",", "on", "gray", "!"]

    def test_truncation(self, tiny_model):
        cfg, vocab = tiny_model.config, tiny_model.vocab
        tok = tokenize("a " * 50, vocab, cfg)
        assert tok.length == cfg.extended_context
        assert tok.ids[-1] == END_ID

    @settings(max_examples=60, deadline=None)
    @given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=40))
    def test_span_property(self, text):
        vocab = Vocab.build([text])
        tok = tokenize(text, vocab, EncoderConfig(base_context=8, extended_context=64,
                                                  d_model=8, n_heads=2, image_side=8, patch_size=4))
        lower = text.lower()
        for i in range(len(tok.spans)):
            s, e = tok.spans[i]
            assert 0 <= s <= e <= len(lower)
            if s < e and tok.ids[i] not in (PAD_ID, START_ID, END_ID):
                piece = lower[s:e]
                assert vocab.id_of(piece) == tok.ids[i]

    def test_pack_trims_trailing_pads(self, tiny_model):
        cfg, vocab = tiny_model.config, tiny_model.vocab
        toks = [tokenize("red circle", vocab, cfg), tokenize("a", vocab, cfg)]
        ids, lengths = pack_token_batch(toks)
        assert ids.shape == (2, 4)
        assert lengths.tolist() == [4, 3]


class TestPatchify:
    def test_shapes_and_order(self):
        img = np.zeros((1, 8, 8, 3))
        img[0, 0, 4, 0] = 1.0  # row 0, col 4 -> patch 1 of the 2x2 grid
        p = patchify(img, 4)
        assert p.shape == (1, 4, 48)
        assert p[0, 1].sum() == 1.0
        assert p[0, 0].sum() == 0.0

    def test_locality_perturbation(self):
        # Pre-transformer embedding of patch i must ignore pixels outside patch i.
        rng = np.random.default_rng(0)
        a = rng.random((1, 8, 8, 3))
        b = a.copy()
        b[0, 6, 6, :] = rng.random(3)  # inside patch 3 only
        pa, pb = patchify(a, 4), patchify(b, 4)
        assert np.array_equal(pa[0, :3], pb[0, :3])
        assert not np.array_equal(pa[0, 3], pb[0, 3])

    def test_bad_shapes(self):
        with pytest.raises(DimensionError):
            patchify(np.zeros((1, 8, 6, 3)), 4)
        with pytest.raises(DimensionError):
            patchify(np.zeros((1, 9, 9, 3)), 4)


class TestPositionalInterpolation:
    def test_identity_when_equal(self):
        t = T.Tensor(np.random.default_rng(1).normal(size=(5, 3)))
        out = interpolate_positional_embeddings(t, 5)
        assert out is t

    def test_endpoints_exact(self):
        rng = np.random.default_rng(2)
        t = T.Tensor(rng.normal(size=(7, 4)))
        out = interpolate_positional_embeddings(t, 20).data
        assert np.array_equal(out[0], t.data[0])
        assert np.array_equal(out[-1], t.data[-1])

    def test_linear_table_reproduced(self):
        # Rows on a line stay on the line under linear interpolation.
        base, target, d = 7, 19, 3
        direction = np.array([1.0, -2.0, 0.5])
        table = np.arange(base)[:, None] * direction
        out = interpolate_positional_embeddings(T.Tensor(table), target).data
        pos = np.arange(target) * (base - 1) / (target - 1)
        assert np.allclose(out, pos[:, None] * direction, atol=1e-12)

    def test_shrink_rejected(self):
        with pytest.raises(ContractError):
            interpolate_positional_embeddings(T.Tensor(np.zeros((5, 2))), 4)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        table = rng.normal(size=(5, 3))
        w = rng.normal(size=(11, 3))

        def build(t):
            return T.sum_all(T.mul(interpolate_positional_embeddings(t, 11), T.Tensor(w)))

        x = T.Tensor(table, requires_grad=True)
        T.backward(build(x))
        num = central_difference(lambda v: build(T.Tensor(v.reshape(5, 3))).item(),
                                 table.reshape(-1))
        assert max_rel_err(x.grad.reshape(-1), num) <= 1e-5


class TestForward:
    def test_image_shapes(self, tiny_model):
        rng = np.random.default_rng(4)
        imgs = rng.random((3, 8, 8, 3))
        cls, tokens = tiny_model.encode_image_batch(imgs)
        assert cls.shape == (3, 8)
        assert tokens.shape == (3, 4, 8)

    def test_image_shape_error(self, tiny_model):
        with pytest.raises(DimensionError):
            tiny_model.encode_image_batch(np.zeros((1, 16, 16, 3)))

    def test_text_shapes_and_cls_position(self, tiny_model):
        cfg, vocab = tiny_model.config, tiny_model.vocab
        toks = [tokenize("red circle on gray", vocab, cfg), tokenize("a", vocab, cfg)]
        ids, lengths = pack_token_batch(toks)
        cls, tokens = tiny_model.encode_text_batch(ids, lengths)
        assert cls.shape == (2, 8) and tokens.shape == (2, ids.shape[1], 8)
        # cls row must equal the token at each sample's <end> position
        for i, ln in enumerate(lengths):
            assert np.array_equal(cls.data[i], tokens.data[i, ln - 1])

    def test_text_oversize_rejected(self, tiny_model):
        ids = np.full((1, TINY.extended_context + 1), PAD_ID, dtype=np.int64)
        with pytest.raises(ContractError):
            tiny_model.encode_text_batch(ids, np.array([2]))

    def test_padding_invariance(self, tiny_model):
        cfg, vocab = tiny_model.config, tiny_model.vocab
        tok = tokenize("red circle on gray", vocab, cfg)
        short_ids = tok.ids[None, : tok.length]
        long_ids = tok.ids[None, : tok.length + 4]  # four extra pads
        lens = np.array([tok.length])
        with T.no_grad():
            cls_a, tokens_a = tiny_model.encode_text_batch(short_ids, lens)
            cls_b, tokens_b = tiny_model.encode_text_batch(long_ids, lens)
        assert np.max(np.abs(cls_a.data - cls_b.data)) <= 1e-10
        assert np.max(np.abs(tokens_a.data - tokens_b.data[:, : tok.length])) <= 1e-10

    def test_attention_rows_sum_to_one(self, tiny_model, monkeypatch):
        captured = []
        real = T.softmax_rows

        def probe(x):
            out = real(x)
            captured.append(out.data)
            return out

        monkeypatch.setattr(T, "softmax_rows", probe)
        tiny_model.encode_image_batch(np.random.default_rng(5).random((2, 8, 8, 3)))
        assert captured
        for arr in captured:
            assert np.allclose(arr.sum(axis=-1), 1.0, atol=1e-12)

    def test_init_determinism(self, tiny_model):
        again = Model.init(TINY, tiny_model.vocab, seed=7)
        for name, t in tiny_model.params.items():
            assert np.array_equal(t.data, again.params[name].data), name
        other = Model.init(TINY, tiny_model.vocab, seed=8)
        assert not np.array_equal(other.params["vis.patch.w"].data,
                                  tiny_model.params["vis.patch.w"].data)

    def test_logit_scale_init(self, tiny_model):
        assert abs(tiny_model.logit_scale.item() - np.log(1.0 / 0.07)) < 1e-12


class TestEncoderGradients:
    def test_fd_through_both_towers(self, tiny_model):
        """Composed finite-difference check on a handful of parameters."""
        model = tiny_model.copy()
        rng = np.random.default_rng(6)
        img = rng.random((1, 8, 8, 3))
        tok = tokenize("red circle on gray!", model.vocab, model.config)
        ids, lengths = pack_token_batch([tok, tokenize("a", model.vocab, model.config)])
        w_img = rng.normal(size=(1, 8))
        w_txt = rng.normal(size=(2, 8))

        def forward() -> float:
            c_i, _ = model.encode_image_batch(img)
            c_t, _ = model.encode_text_batch(ids, lengths)
            loss = T.add(T.sum_all(T.mul(c_i, T.Tensor(w_img))),
                         T.sum_all(T.mul(c_t, T.Tensor(w_txt))))
            return loss

        loss = forward()
        T.backward(loss)
        checked = ["vis.cls", "txt.pos", "vis.blk0.attn.wq", "txt.lnf.g", "vis.patch.b"]
        for name in checked:
            t = model.params[name]
            base = t.data.copy()
            assert t.grad is not None, name

            def f(vec, t=t, base=base):
                t.data = vec.reshape(base.shape)
                with_val = forward().item()
                t.data = base
                return with_val

            num = central_difference(f, base.reshape(-1))
            err = max_rel_err(t.grad.reshape(-1), num)
            assert err <= 1e-4, f"{name}: rel err {err:.2e}"


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tiny_model, tmp_path):
        tiny_model.save(tmp_path / "ckpt")
        again = Model.load(tmp_path / "ckpt")
        assert again.config == tiny_model.config
        assert again.vocab.words == tiny_model.vocab.words
        assert again.seed == tiny_model.seed
        for name, t in tiny_model.params.items():
            assert np.array_equal(t.data, again.params[name].data), name

    def test_truncated_blob(self, tiny_model, tmp_path):
        tiny_model.save(tmp_path / "ckpt")
        blob = (tmp_path / "ckpt" / "params.f64").read_bytes()
        (tmp_path / "ckpt" / "params.f64").write_bytes(blob[:-16])
        with pytest.raises(ParseError):
            Model.load(tmp_path / "ckpt")

    def test_bad_manifest_json(self, tiny_model, tmp_path):
        tiny_model.save(tmp_path / "ckpt")
        (tmp_path / "ckpt" / "manifest.json").write_text("{not json")
        with pytest.raises(ParseError):
            Model.load(tmp_path / "ckpt")

    def test_param_list_mismatch(self, tiny_model, tmp_path):
        import json as j
        tiny_model.save(tmp_path / "ckpt")
        man = j.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        man["params"][0]["name"] = "vis.bogus"
        (tmp_path / "ckpt" / "manifest.json").write_text(j.dumps(man))
        with pytest.raises(ParseError):
            Model.load(tmp_path / "ckpt")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Model.load(tmp_path / "nope")
