import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from multigran.core import Box
from multigran.decoder import DecoderOutput, DenoisingBatch, PredictionSet
from multigran.objective import (LossWeights, MatchResult, Targets, cost_matrix, generalized_box_iou, hungarian,
                                 loss_box, loss_cls, loss_mask, recompose, total_loss)

from oracles import brute_force_assignment, giou_closed_form, naive_sentence_bce, naive_word_ce



@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def random_boxes(g, n):
    c = torch.rand(n, 2, generator=g) * 0.6 + 0.2
    wh = torch.rand(n, 2, generator=g) * 0.3 + 0.05
    return torch.cat([c, wh], -1)


def random_prediction(g, Q, k, mode, hw=6):
    logits = torch.randn(Q, k + 1, generator=g) if mode == "word" else torch.randn(Q, generator=g)
    return PredictionSet(logits, random_boxes(g, Q), torch.randn(Q, hw, hw, generator=g), mode)


def random_targets(g, G, k, mode, hw=6, has_mask=True):
    labels = torch.randint(0, k, (G,), generator=g) if mode == "word" else torch.zeros(G, dtype=torch.long)
    masks = (torch.rand(G, hw, hw, generator=g) < 0.4).double()
    return Targets(labels, random_boxes(g, G), masks, torch.full((G,), has_mask))


class TestHungarian:
    def test_identity_favoring(self):
        m = hungarian(np.array([[0.0, 9.0], [9.0, 0.0]]))
        assert m.pairs == [(0, 0), (1, 1)] and m.cost == 0.0

    def test_anti_diagonal(self):
        assert hungarian(np.array([[1.0, 2.0], [2.0, 1.0]])).cost == 2.0

    def test_rectangular_sizes(self):
        m = hungarian(np.random.default_rng(0).random((7, 3)))
        assert len(m.pairs) == 3 and len(m.unmatched) == 4
        assert len({g for _, g in m.pairs}) == 3

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            hungarian(np.array([[0.0, np.nan]]))
        with pytest.raises(ValueError):
            hungarian(np.array([[np.inf]]))

    def test_empty(self):
        m = hungarian(np.zeros((3, 0)))
        assert m.pairs == [] and m.unmatched == [0, 1, 2]

    def test_brute_force_square_6(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            C = rng.random((6, 6))
            assert hungarian(C).cost == pytest.approx(brute_force_assignment(C)[0], abs=1e-12)

    def test_lexicographic_ties(self):
        """Integer costs with many ties: the chosen pairing is the smallest sorted pair list."""
        rng = np.random.default_rng(2)
        for _ in range(300):
            Q, G = rng.integers(1, 6, size=2)
            C = rng.integers(0, 3, size=(Q, G)).astype(float)
            best, pairs = brute_force_assignment(C)
            m = hungarian(C)
            assert m.cost == best
            assert m.pairs == pairs

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31), st.floats(-50, 50))
    def test_constant_shift_invariance(self, Q, G, seed, shift):
        C = np.random.default_rng(seed).random((Q, G))
        assert hungarian(C).pairs == hungarian(C + shift).pairs


class TestLossBox:
    def test_identical(self):
        b = Box(0.4, 0.5, 0.2, 0.3)
        assert loss_box(b, b) == (0.0, 0.0)

    def test_touching_edge(self):
        a, b = Box.from_corners(0.1, 0.1, 0.3, 0.3), Box.from_corners(0.3, 0.1, 0.5, 0.3)
        _, gl = loss_box(a, b)
        assert gl == pytest.approx(1.0)

    def test_far_apart_approaches_two(self):
        prev = 1.0
        for gap in (0.1, 0.3, 0.6, 0.9):
            s = 0.02
            a = Box.from_corners(0.0, 0.0, s, s)
            b = Box.from_corners(gap + s, gap + s, gap + 2 * s, gap + 2 * s)
            _, gl = loss_box(a, b)
            expect = 1 - giou_closed_form(a.to_corners(), b.to_corners())
            assert gl == pytest.approx(expect)
            assert prev < gl < 2.0
            prev = gl

    def test_l1_sums_coordinates(self):
        l1, _ = loss_box(Box(0.5, 0.5, 0.2, 0.2), Box(0.6, 0.4, 0.3, 0.1))
        assert l1 == pytest.approx(0.4)

    def test_degenerate_gt(self):
        with pytest.raises(ValueError):
            loss_box(torch.tensor([[0.5, 0.5, 0.2, 0.2]]), torch.tensor([[0.5, 0.5, 0.0, 0.2]]))

    @settings(max_examples=200)
    @given(st.integers(0, 2 ** 31))
    def test_giou_range(self, seed):
        g = torch.Generator().manual_seed(seed)
        a, b = random_boxes(g, 8), random_boxes(g, 8)
        _, gl = loss_box(a, b)
        assert (gl >= 0).all() and (gl < 2).all()

    def test_pairwise_matches_closed_form(self):
        g = torch.Generator().manual_seed(0)
        a, b = random_boxes(g, 5), random_boxes(g, 4)
        from multigran.objective import box_cxcywh_to_xyxy
        A, B = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
        G = generalized_box_iou(A, B)
        for i in range(5):
            for j in range(4):
                assert float(G[i, j]) == pytest.approx(giou_closed_form(A[i].tolist(), B[j].tolist()))


class TestLossMask:
    def test_saturated_correct(self):
        gt = (torch.rand(1, 5, 5) < 0.5).double()
        bce, dice = loss_mask((gt * 2 - 1) * 50, gt)
        assert float(bce) < 1e-10 and float(dice) < 1e-10

    def test_soft_formula(self):
        p = torch.rand(1, 4, 4, dtype=torch.float64) * 0.98 + 0.01
        logits = torch.log(p / (1 - p))
        _, dice = loss_mask(logits, p)
        s2, s = float((p * p).sum()), float(p.sum())
        assert float(dice) == pytest.approx(1 - (2 * s2 + 1) / (2 * s + 1))

    def test_bce_is_mean(self):
        x = torch.tensor([[[0.0, 0.0]]])
        bce, _ = loss_mask(x, torch.tensor([[[1.0, 0.0]]]))
        assert float(bce) == pytest.approx(math.log(2))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            loss_mask(torch.zeros(1, 4, 4), torch.zeros(1, 2, 2))


class TestLossCls:
    def test_uniform_word(self):
        for k in (1, 3, 7):
            logits = torch.zeros(5, k + 1)
            m = MatchResult([(0, 0), (2, 1)], [1, 3, 4])
            v = loss_cls(logits, m, torch.tensor([0, min(1, k - 1)]), "word")
            assert float(v) == pytest.approx(math.log(k + 1))

    def test_perfect_sentence(self):
        logits = torch.tensor([60.0, -60.0, -60.0])
        v = loss_cls(logits, MatchResult([(0, 0)], [1, 2]), torch.zeros(1, dtype=torch.long), "sentence")
        assert float(v) < 1e-20

    def test_naive_loops(self):
        g = torch.Generator().manual_seed(5)
        for _ in range(50):
            Q, k = 6, 4
            logits = torch.randn(Q, k + 1, generator=g)
            m = hungarian(np.random.default_rng(int(torch.randint(0, 1000, (1,), generator=g))).random((Q, 3)))
            labels = torch.randint(0, k, (3,), generator=g)
            targets = [k] * Q
            for q, gi in m.pairs:
                targets[q] = int(labels[gi])
            ours = float(loss_cls(logits, m, labels, "word", 0.1))
            assert ours == pytest.approx(naive_word_ce(logits.numpy(), targets, 0.1), abs=1e-6)
            s = torch.randn(Q, generator=g)
            ours = float(loss_cls(s, m, labels, "sentence"))
            assert ours == pytest.approx(naive_sentence_bce(s.numpy(), set(m.query_index)), abs=1e-6)

    def test_label_out_of_vocab(self):
        with pytest.raises(ValueError):
            loss_cls(torch.zeros(2, 3), MatchResult([(0, 0)], [1]), torch.tensor([5]), "word")


class TestCostMatrix:
    def test_shape(self):
        g = torch.Generator().manual_seed(0)
        C = cost_matrix(random_prediction(g, 200, 5, "word"), random_targets(g, 7, 5, "word"), LossWeights())
        assert C.shape == (200, 7)

    def test_identical_prediction_is_row_minimum(self):
        g = torch.Generator().manual_seed(1)
        tgt = random_targets(g, 3, 4, "word")
        pred = random_prediction(g, 5, 4, "word")
        pred.boxes[2] = tgt.boxes[1]
        pred.masks[2] = (tgt.masks[1] * 2 - 1) * 30
        pred.logits[2] = -30.0
        pred.logits[2, tgt.labels[1]] = 30.0
        C = cost_matrix(pred, tgt, LossWeights())
        assert int(C[2].argmin()) == 1

    def test_entries_match_single_pair_losses(self):
        g = torch.Generator().manual_seed(2)
        w = LossWeights()
        for mode in ("word", "sentence"):
            pred, tgt = random_prediction(g, 6, 3, mode), random_targets(g, 4, 3, mode)
            C = cost_matrix(pred, tgt, w)
            for q in range(6):
                for j in range(4):
                    if mode == "word":
                        cls = -pred.logits[q].softmax(-1)[tgt.labels[j]]
                    else:
                        cls = -pred.logits[q].sigmoid()
                    l1, gl = loss_box(pred.boxes[q:q + 1], tgt.boxes[j:j + 1])
                    bce, dice = loss_mask(pred.masks[q:q + 1], tgt.masks[j:j + 1])
                    expect = w.cls(mode) * cls + w.l1 * l1 + w.giou * gl + w.bce * bce + w.dice * dice
                    assert float(C[q, j]) == pytest.approx(float(expect), abs=1e-6)

    def test_box_only_targets_skip_mask_terms(self):
        g = torch.Generator().manual_seed(3)
        pred, tgt = random_prediction(g, 4, 2, "word"), random_targets(g, 2, 2, "word", has_mask=False)
        C1 = cost_matrix(pred, tgt, LossWeights())
        C2 = cost_matrix(pred, tgt, LossWeights(bce=0.0, dice=0.0))
        assert torch.equal(C1, C2)


def decoder_output(g, mode, Q=6, k=3, G=3, layers=3, dn_groups=2):
    preds = [random_prediction(g, Q, k, mode) for _ in range(layers)]
    init = random_prediction(g, Q, k, mode)
    M = G * dn_groups
    dn = DenoisingBatch(random_boxes(g, M), torch.zeros(M, dtype=torch.long), torch.arange(G).repeat(dn_groups),
                        torch.arange(1, dn_groups + 1).repeat_interleave(G))
    dn_preds = [random_prediction(g, M, k, mode) for _ in range(layers)]
    return DecoderOutput(preds, init, dn_preds, dn)


class TestTotalLoss:
    def test_only_llm(self):
        g = torch.Generator().manual_seed(0)
        w = LossWeights(0, 0, 0, 0, 0, 0, 1.0)
        llm = torch.tensor(2.5)
        total, _ = total_loss(decoder_output(g, "word"), random_targets(g, 3, 3, "word"), w, llm)
        assert float(total) == 2.5

    def test_recomposition(self):
        g = torch.Generator().manual_seed(1)
        w = LossWeights()
        for mode in ("word", "sentence"):
            out = decoder_output(g, mode)
            total, rep = total_loss(out, random_targets(g, 3, 3, mode), w, torch.tensor(1.7))
            manual = w.llm * float(rep["llm"])
            for key, v in rep.items():
                if key == "llm":
                    continue
                term = key.split(".")[1]
                manual += {"word": w.word, "sent": w.sent, "l1": w.l1, "giou": w.giou,
                           "bce": w.bce, "dice": w.dice}[term] * float(v)
            assert float(total) == pytest.approx(manual, abs=1e-9)

    def test_report_groups_and_one_flavor(self):
        g = torch.Generator().manual_seed(2)
        for mode, flavor, other in (("word", "word", "sent"), ("sentence", "sent", "word")):
            _, rep = total_loss(decoder_output(g, mode), random_targets(g, 3, 3, mode), LossWeights())
            groups = {k.split(".")[0] for k in rep}
            assert groups == {"init", "layer1", "layer2", "layer3", "dn1", "dn2", "dn3"}
            assert any(k.endswith("." + flavor) for k in rep)
            assert not any(k.endswith("." + other) for k in rep)

    def test_terms_non_negative(self):
        g = torch.Generator().manual_seed(3)
        _, rep = total_loss(decoder_output(g, "word"), random_targets(g, 3, 3, "word"), LossWeights())
        assert all(float(v) >= 0 for v in rep.values())
        assert float(recompose(rep, LossWeights())) >= 0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(l1=-1.0)
