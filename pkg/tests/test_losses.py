import numpy as np
import pytest

import goal.tensor as T
from goal.data import BBox
from goal.encoders import EncoderConfig, Vocab, tokenize
from goal.errors import ContractError, DimensionError
from goal.losses import (
    BatchViews,
    LossWeights,
    contrastive_loss,
    pool_and_project,
    select_patch_indices,
    select_token_indices,
    total_loss,
    tsl_loss,
)
from goal.tensor import Tensor

from _oracles import central_difference, max_rel_err, patch_indices_ref

DEFAULT_CFG = EncoderConfig()
TINY_CFG = EncoderConfig(d_model=8, n_layers=1, n_heads=2, image_side=8, patch_size=4,
                         base_context=8, extended_context=12)


class TestPatchSelection:
    def test_full_image_selects_all(self):
        assert select_patch_indices(BBox(0, 0, 64, 64), DEFAULT_CFG) == list(range(64))

    def test_corner_box(self):
        assert select_patch_indices(BBox(0, 0, 8, 8), DEFAULT_CFG) == [0]

    def test_boundary_center_inclusive(self):
        # patch centers sit at 4, 12, ...; a box ending exactly on 4 keeps patch 0
        assert select_patch_indices(BBox(0, 0, 4, 4), DEFAULT_CFG) == [0]
        assert select_patch_indices(BBox(4, 4, 12, 12), DEFAULT_CFG) == [0, 1, 8, 9]

    def test_fallback_between_centers(self):
        # no center inside; box center (8, 8) is equidistant from four centers
        assert select_patch_indices(BBox(5, 5, 11, 11), DEFAULT_CFG) == [0]

    def test_oracle_sweep(self):
        rng = np.random.default_rng(5)
        for cfg in (DEFAULT_CFG, TINY_CFG):
            side = cfg.image_side
            for _ in range(200):
                x1, y1 = rng.integers(0, side - 1, size=2)
                x2 = int(rng.integers(x1 + 1, side + 1))
                y2 = int(rng.integers(y1 + 1, side + 1))
                bbox = BBox(int(x1), int(y1), x2, y2)
                assert select_patch_indices(bbox, cfg) == patch_indices_ref(
                    bbox.as_tuple(), side, cfg.patch_size)


class TestTokenSelection:
    def test_second_sentence(self):
        caption = "a dog. a cat."
        vocab = Vocab.build([caption])
        tok = tokenize(caption, vocab, TINY_CFG)
        assert select_token_indices((7, 13), tok.spans) == [4, 5, 6]

    def test_whole_caption(self):
        caption = "a dog. a cat."
        vocab = Vocab.build([caption])
        tok = tokenize(caption, vocab, TINY_CFG)
        assert select_token_indices((0, 13), tok.spans) == [1, 2, 3, 4, 5, 6]

    def test_zero_length_span_falls_back(self):
        caption = "a dog. a cat."
        vocab = Vocab.build([caption])
        tok = tokenize(caption, vocab, TINY_CFG)
        assert select_token_indices((7, 7), tok.spans) == [4]

    def test_fallback_tie_prefers_later(self):
        spans = [(0, 0), (0, 1), (3, 4), (4, 4)]
        assert select_token_indices((2, 2), spans) == [2]

    def test_specials_never_selected(self):
        caption = "red circle"
        vocab = Vocab.build([caption])
        tok = tokenize(caption, vocab, TINY_CFG)
        picked = select_token_indices((0, len(caption)), tok.spans)
        for i in picked:
            s, e = tok.spans[i]
            assert s < e

    def test_no_real_tokens(self):
        with pytest.raises(ContractError):
            select_token_indices((0, 3), [(0, 0), (0, 0)])

    def test_bad_span(self):
        with pytest.raises(ContractError):
            select_token_indices((5, 2), [(0, 1)])


class TestPooling:
    def test_identity_projection_returns_token(self):
        rng = np.random.default_rng(7)
        tokens = Tensor(rng.standard_normal((3, 4)))
        w = Tensor(np.eye(4))
        b = Tensor(np.zeros(4))
        out = pool_and_project(tokens, [1], w, b)
        assert np.array_equal(out.data, tokens.data[1])

    def test_zero_map_returns_bias(self):
        tokens = Tensor(np.ones((2, 4)))
        w = Tensor(np.zeros((4, 4)))
        b = Tensor(np.arange(4.0))
        out = pool_and_project(tokens, [0, 1], w, b)
        assert np.array_equal(out.data, np.arange(4.0))

    def test_mean_is_uniform(self):
        tokens = Tensor(np.array([[2.0, 0.0], [4.0, 6.0]]))
        out = pool_and_project(tokens, [0, 1], Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [3.0, 3.0], atol=1e-15)

    def test_empty_indices_rejected(self):
        with pytest.raises(ContractError):
            pool_and_project(Tensor(np.ones((2, 2))), [], Tensor(np.eye(2)),
                             Tensor(np.zeros(2)))

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(8)
        tok0 = rng.standard_normal((5, 4))
        w0 = rng.standard_normal((4, 4))
        b0 = rng.standard_normal(4)
        idx = [0, 2, 3]

        def run(tok_a, w_a, b_a):
            tokens = Tensor(tok_a, requires_grad=True)
            w = Tensor(w_a, requires_grad=True)
            b = Tensor(b_a, requires_grad=True)
            out = pool_and_project(tokens, idx, w, b)
            loss = T.sum_all(T.mul(out, out))
            return loss, (tokens, w, b)

        loss, leaves = run(tok0, w0, b0)
        T.backward(loss)
        for leaf, arr, rebuild in (
            (leaves[0], tok0, lambda v: run(v.reshape(5, 4), w0, b0)[0].item()),
            (leaves[1], w0, lambda v: run(tok0, v.reshape(4, 4), b0)[0].item()),
            (leaves[2], b0, lambda v: run(tok0, w0, v)[0].item()),
        ):
            fd = central_difference(rebuild, arr.ravel())
            assert max_rel_err(leaf.grad.ravel(), fd) <= 1e-6


def make_ls(value: float = np.log(1.0 / 0.07)) -> Tensor:
    return Tensor(np.float64(value), requires_grad=True)


class TestContrastive:
    def test_single_pair_is_zero(self):
        a = Tensor(np.array([[3.0, 4.0]]))
        loss = contrastive_loss(a, a, make_ls())
        assert loss.item() == 0.0

    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_uniform_logits_give_ln_n(self, n):
        rng = np.random.default_rng(n)
        a = Tensor(np.tile(rng.standard_normal(6), (n, 1)))
        b = Tensor(np.tile(rng.standard_normal(6), (n, 1)))
        loss = contrastive_loss(a, b, make_ls())
        assert abs(loss.item() - np.log(n)) <= 1e-9

    def test_separated_pairs_near_zero(self):
        eye = Tensor(np.eye(4, 8))
        loss = contrastive_loss(eye, eye, make_ls(np.log(100.0)))
        assert loss.item() < 0.05

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.standard_normal((5, 6)))
        b = Tensor(rng.standard_normal((5, 6)))
        ls = make_ls()
        assert abs(contrastive_loss(a, b, ls).item()
                   - contrastive_loss(b, a, ls).item()) <= 1e-12

    def test_row_rescaling_invariance(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((4, 6))
        scales = rng.uniform(0.1, 9.0, size=(4, 1))
        ls = make_ls()
        base = contrastive_loss(Tensor(a), Tensor(b), ls).item()
        scaled = contrastive_loss(Tensor(a * scales), Tensor(b * 3.0), ls).item()
        assert abs(base - scaled) <= 1e-12

    def test_temperature_clamp(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.standard_normal((3, 4)))
        b = Tensor(rng.standard_normal((3, 4)))
        ls_low = make_ls(10.0)   # exp = 22026 -> clamped to 100
        ls_high = make_ls(20.0)  # exp = 4.8e8 -> clamped to 100
        low = contrastive_loss(a, b, ls_low)
        high = contrastive_loss(a, b, ls_high)
        assert low.item() == high.item()
        T.backward(low)
        assert ls_low.grad == 0.0  # clamped scale blocks the gradient

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            contrastive_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), make_ls())

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(12)
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((3, 4))
        ls0 = np.log(1.0 / 0.07)

        def run(a_a, b_a, ls_a):
            a = Tensor(a_a, requires_grad=True)
            b = Tensor(b_a, requires_grad=True)
            ls = Tensor(np.float64(ls_a), requires_grad=True)
            return contrastive_loss(a, b, ls), (a, b, ls)

        loss, (a, b, ls) = run(a0, b0, ls0)
        T.backward(loss)
        fd_a = central_difference(lambda v: run(v.reshape(3, 4), b0, ls0)[0].item(), a0.ravel())
        fd_b = central_difference(lambda v: run(a0, v.reshape(3, 4), ls0)[0].item(), b0.ravel())
        fd_ls = central_difference(lambda v: run(a0, b0, v[0])[0].item(), np.array([ls0]))
        assert max_rel_err(a.grad.ravel(), fd_a) <= 1e-5
        assert max_rel_err(b.grad.ravel(), fd_b) <= 1e-5
        assert max_rel_err(np.array([ls.grad]), fd_ls) <= 1e-5


class TestTsl:
    def test_aligned_orthonormal_is_zero(self):
        eye = Tensor(np.eye(2))
        loss = tsl_loss(eye, eye, Tensor(np.eye(2)), Tensor(np.eye(2)))
        assert abs(loss.item()) <= 1e-12

    def test_all_ones_cosines_pinned(self):
        row = np.array([[1.0, 0.0], [1.0, 0.0]])
        loss = tsl_loss(Tensor(row), Tensor(row), Tensor(row), Tensor(row))
        assert abs(loss.item() - 1.0) <= 1e-12

    def test_single_pair_aligned_is_zero(self):
        v = Tensor(np.array([[0.3, -0.4]]))
        w = Tensor(np.array([[0.6, -0.8]]))  # same direction
        assert abs(tsl_loss(v, w, w, v).item()) <= 1e-12

    def test_row_rescaling_invariance(self):
        rng = np.random.default_rng(13)
        mats = [rng.standard_normal((3, 5)) for _ in range(4)]
        base = tsl_loss(*[Tensor(m) for m in mats]).item()
        scales = rng.uniform(0.2, 7.0, size=(3, 1))
        scaled = tsl_loss(Tensor(mats[0] * scales), Tensor(mats[1] * 2.0),
                          Tensor(mats[2]), Tensor(mats[3] * scales)).item()
        assert abs(base - scaled) <= 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(14)
        for _ in range(25):
            mats = [Tensor(rng.standard_normal((3, 4))) for _ in range(4)]
            assert tsl_loss(*mats).item() >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tsl_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))),
                     Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(15)
        arrs = [rng.standard_normal((3, 4)) for _ in range(4)]

        def run(which, flat):
            current = [a.copy() for a in arrs]
            current[which] = flat.reshape(3, 4)
            tensors = [Tensor(a, requires_grad=True) for a in current]
            return tsl_loss(*tensors), tensors

        for which in range(4):
            loss, tensors = run(which, arrs[which].ravel())
            T.backward(loss)
            fd = central_difference(lambda v: run(which, v)[0].item(), arrs[which].ravel())
            assert max_rel_err(tensors[which].grad.ravel(), fd) <= 1e-5


def tiny_params(rng, d):
    return {
        "logit_scale": Tensor(np.float64(np.log(1.0 / 0.07)), requires_grad=True),
        "proj.img.w": Tensor(rng.standard_normal((d, d)), requires_grad=True),
        "proj.img.b": Tensor(rng.standard_normal(d), requires_grad=True),
        "proj.txt.w": Tensor(rng.standard_normal((d, d)), requires_grad=True),
        "proj.txt.b": Tensor(rng.standard_normal(d), requires_grad=True),
    }


def tiny_batch(rng, d=4, n=3, with_local=True):
    views = BatchViews(
        v_g_cls=Tensor(rng.standard_normal((n, d)), requires_grad=True),
        t_g_cls=Tensor(rng.standard_normal((n, d)), requires_grad=True),
    )
    if with_local:
        views.p_g = Tensor(rng.standard_normal((n, 4, d)), requires_grad=True)
        views.s_g = Tensor(rng.standard_normal((n, 5, d)), requires_grad=True)
        views.local_rows = [0, 2]
        views.v_l_cls = Tensor(rng.standard_normal((2, d)), requires_grad=True)
        views.t_l_cls = Tensor(rng.standard_normal((2, d)), requires_grad=True)
        views.patch_sets = [[0, 1], [2]]
        views.token_sets = [[1, 2, 3], [1]]
    return views


class TestTotalLoss:
    def test_global_only_matches_contrastive_bitwise(self):
        rng = np.random.default_rng(16)
        batch = tiny_batch(rng)
        params = tiny_params(rng, 4)
        total, breakdown = total_loss(batch, LossWeights(1.0, 0.0, 0.0), params)
        direct = contrastive_loss(batch.v_g_cls, batch.t_g_cls, params["logit_scale"])
        assert total.item() == direct.item()
        assert breakdown["L_local"] == 0.0
        assert breakdown["L_TSL"] == 0.0
        assert breakdown["L_total"] == breakdown["L_global"]

    def test_doubling_weights_doubles_total(self):
        rng = np.random.default_rng(17)
        batch = tiny_batch(rng)
        params = tiny_params(rng, 4)
        base, _ = total_loss(batch, LossWeights(1.0, 0.5, 1.0), params)
        doubled, _ = total_loss(batch, LossWeights(2.0, 1.0, 2.0), params)
        assert abs(doubled.item() - 2.0 * base.item()) <= 1e-12

    def test_breakdown_sums_to_total(self):
        rng = np.random.default_rng(18)
        batch = tiny_batch(rng)
        w = LossWeights(1.0, 0.5, 1.0)
        total, br = total_loss(batch, w, tiny_params(rng, 4))
        expected = (w.lambda_global * br["L_global"] + w.lambda_local * br["L_local"]
                    + w.lambda_tsl * br["L_TSL"])
        assert abs(br["L_total"] - expected) <= 1e-12
        assert abs(total.item() - br["L_total"]) <= 1e-15

    def test_no_local_pairs_zeroes_local_terms(self):
        rng = np.random.default_rng(19)
        batch = tiny_batch(rng, with_local=False)
        params = tiny_params(rng, 4)
        total, br = total_loss(batch, LossWeights(1.0, 0.5, 1.0), params)
        assert br["L_local"] == 0.0
        assert br["L_TSL"] == 0.0
        assert total.item() == br["L_global"]

    def test_all_terms_disabled_gives_zero(self):
        rng = np.random.default_rng(20)
        batch = tiny_batch(rng, with_local=False)
        total, br = total_loss(batch, LossWeights(0.0, 0.5, 1.0), tiny_params(rng, 4))
        assert total.item() == 0.0
        assert br["L_total"] == 0.0

    def test_missing_global_views_rejected(self):
        rng = np.random.default_rng(21)
        with pytest.raises(ContractError):
            total_loss(BatchViews(), LossWeights(1.0, 0.0, 0.0), tiny_params(rng, 4))

    def test_missing_local_views_rejected(self):
        rng = np.random.default_rng(22)
        batch = tiny_batch(rng, with_local=False)
        batch.local_rows = [0]
        with pytest.raises(ContractError):
            total_loss(batch, LossWeights(1.0, 0.5, 0.0), tiny_params(rng, 4))

    def test_missing_token_views_rejected(self):
        rng = np.random.default_rng(23)
        batch = tiny_batch(rng)
        batch.p_g = None
        with pytest.raises(ContractError):
            total_loss(batch, LossWeights(1.0, 0.5, 1.0), tiny_params(rng, 4))

    def test_gradients_flow_to_all_inputs(self):
        rng = np.random.default_rng(24)
        batch = tiny_batch(rng)
        params = tiny_params(rng, 4)
        total, _ = total_loss(batch, LossWeights(1.0, 0.5, 1.0), params)
        T.backward(total)
        for t in (batch.v_g_cls, batch.t_g_cls, batch.p_g, batch.s_g,
                  batch.v_l_cls, batch.t_l_cls, params["proj.img.w"],
                  params["proj.txt.b"], params["logit_scale"]):
            assert t.grad is not None
            assert np.any(t.grad != 0.0) or np.ndim(t.grad) == 0

    def test_projection_gradient_matches_fd(self):
        rng = np.random.default_rng(25)
        batch_arrays = {
            "v_g": rng.standard_normal((3, 4)), "t_g": rng.standard_normal((3, 4)),
            "p_g": rng.standard_normal((3, 4, 4)), "s_g": rng.standard_normal((3, 5, 4)),
            "v_l": rng.standard_normal((2, 4)), "t_l": rng.standard_normal((2, 4)),
        }
        pw0 = rng.standard_normal((4, 4))
        fixed = tiny_params(rng, 4)

        def run(pw_flat):
            params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in fixed.items()}
            params["proj.img.w"] = Tensor(pw_flat.reshape(4, 4), requires_grad=True)
            batch = BatchViews(
                v_g_cls=Tensor(batch_arrays["v_g"]), t_g_cls=Tensor(batch_arrays["t_g"]),
                p_g=Tensor(batch_arrays["p_g"], requires_grad=True),
                s_g=Tensor(batch_arrays["s_g"]),
                local_rows=[0, 2],
                v_l_cls=Tensor(batch_arrays["v_l"]), t_l_cls=Tensor(batch_arrays["t_l"]),
                patch_sets=[[0, 1], [2]], token_sets=[[1, 2, 3], [1]],
            )
            total, _ = total_loss(batch, LossWeights(1.0, 0.5, 1.0), params)
            return total, params["proj.img.w"]

        total, pw = run(pw0.ravel())
        T.backward(total)
        fd = central_difference(lambda v: run(v)[0].item(), pw0.ravel())
        assert max_rel_err(pw.grad.ravel(), fd) <= 1e-5
