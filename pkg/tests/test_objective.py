"""Classifier head, decoding rule, and the two loss functions."""

import math

import numpy as np
import pytest
import torch

from remir.objective import (
    Classifier,
    LabelScores,
    cell_distributions,
    decode,
    gold_label_tensor,
    loss_atl,
    loss_recon,
    total_loss,
)
from remir.trainer import finite_difference_error

torch.set_num_threads(1)


def scores_from(logits, valid=None):
    logits = torch.as_tensor(logits, dtype=torch.float64)
    if valid is None:
        n = logits.shape[0]
        valid = ~torch.eye(n, dtype=torch.bool)
    return LabelScores(logits=logits, valid=valid)


def single_cell_scores(cell_logits):
    """A 1x1 score field whose only cell is valid (diagonal rule bypassed)."""
    logits = torch.tensor(cell_logits, dtype=torch.float64).view(1, 1, -1)
    return LabelScores(logits=logits, valid=torch.ones(1, 1, dtype=torch.bool))


class TestClassifier:
    def test_zero_parameters_zero_logits(self):
        clf = Classifier(pair_dim=4, num_relations=2).double()
        with torch.no_grad():
            clf.linear.weight.zero_()
            clf.linear.bias.zero_()
        out = clf(torch.randn(3, 3, 4, dtype=torch.float64), ~torch.eye(3, dtype=torch.bool))
        assert torch.all(out.logits == 0)
        assert out.num_relations == 2

    def test_identity_like_map(self):
        """d=2, R=1 with rows (1,0),(0,1): the cell vector passes through."""
        clf = Classifier(pair_dim=2, num_relations=1).double()
        with torch.no_grad():
            clf.linear.weight.copy_(torch.eye(2))
            clf.linear.bias.zero_()
        field = torch.zeros(3, 3, 2, dtype=torch.float64)
        field[1, 2] = torch.tensor([3.0, -1.0])
        out = clf(field, ~torch.eye(3, dtype=torch.bool))
        assert torch.allclose(out.logits[1, 2], torch.tensor([3.0, -1.0], dtype=torch.float64))

    def test_matches_per_cell_loop(self):
        torch.manual_seed(0)
        clf = Classifier(pair_dim=5, num_relations=3).double()
        field = torch.randn(4, 4, 5, dtype=torch.float64)
        out = clf(field, ~torch.eye(4, dtype=torch.bool))
        for s in range(4):
            for o in range(4):
                expected = clf.linear.weight @ field[s, o] + clf.linear.bias
                assert torch.allclose(out.logits[s, o], expected, atol=1e-12)


class TestDecode:
    def test_rule_selects_classes_above_th(self):
        logits = torch.zeros(2, 2, 3)
        logits[0, 1] = torch.tensor([2.0, -1.0, 0.5])  # r0, r1, TH
        assert decode(scores_from(logits)) == {(0, 1, 0)}

    def test_all_below_threshold_empty(self):
        logits = torch.zeros(2, 2, 3)
        logits[0, 1] = torch.tensor([-2.0, -1.0, 0.5])
        logits[1, 0] = torch.tensor([-2.0, -1.0, 3.0])
        assert decode(scores_from(logits)) == set()

    def test_tie_is_negative(self):
        logits = torch.zeros(2, 2, 3)
        logits[0, 1] = torch.tensor([0.5, 0.2, 0.5])
        assert decode(scores_from(logits)) == set()

    def test_diagonal_never_emitted(self):
        logits = torch.full((2, 2, 3), -1.0)
        logits[:, :, 0] = 5.0
        out = decode(scores_from(logits))
        assert out == {(0, 1, 0), (1, 0, 0)}

    def test_constant_shift_invariance_fuzz(self):
        """Adding one constant to every logit of a cell never changes the
        decoded set (1000 random cells)."""
        rng = np.random.default_rng(13)
        for _ in range(1000):
            cell = rng.normal(size=4)
            shift = rng.normal() * 10
            a = single_cell_scores(cell)
            b = single_cell_scores(cell + shift)
            assert decode(a) == decode(b)


class TestLossAtl:
    def test_uniform_logits_single_positive(self):
        """R=2, positive {r1}, all logits 0: both terms are softmax over two
        entries, so the cell loss is 2 ln 2."""
        scores = single_cell_scores([0.0, 0.0, 0.0])
        loss = loss_atl(scores, [(0, 0, 0)])
        assert loss.item() == pytest.approx(2 * math.log(2.0), abs=1e-9)

    def test_uniform_logits_no_positive(self):
        """Empty positive set: only the threshold term, softmax over
        {r1, r2, TH} -> ln 3."""
        scores = single_cell_scores([0.0, 0.0, 0.0])
        loss = loss_atl(scores, [])
        assert loss.item() == pytest.approx(math.log(3.0), abs=1e-9)

    def test_dominant_threshold_limit(self):
        """logit_TH = 30 with empty positives: the threshold term vanishes."""
        scores = single_cell_scores([0.0, 0.0, 30.0])
        loss = loss_atl(scores, [])
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_mean_over_valid_cells(self):
        logits = torch.zeros(2, 2, 3, dtype=torch.float64)
        scores = scores_from(logits)
        loss = loss_atl(scores, [(0, 1, 0)])
        expected = (2 * math.log(2.0) + math.log(3.0)) / 2
        assert loss.item() == pytest.approx(expected, abs=1e-9)

    def test_matches_direct_formula_fuzz(self):
        """Against a per-cell loop evaluating the two-term definition."""
        rng = np.random.default_rng(5)
        for _ in range(25):
            n, r_count = 3, 4
            logits = torch.tensor(rng.normal(size=(n, n, r_count + 1)))
            gold = []
            for s in range(n):
                for o in range(n):
                    if s != o:
                        for r in range(r_count):
                            if rng.random() < 0.25:
                                gold.append((s, o, r))
            scores = scores_from(logits)
            loss = loss_atl(scores, gold)

            total = 0.0
            cells = 0
            for s in range(n):
                for o in range(n):
                    if s == o:
                        continue
                    pos = [r for (h, t, r) in gold if (h, t) == (s, o)]
                    neg = [r for r in range(r_count) if r not in pos]
                    cell = logits[s, o]
                    l1 = 0.0
                    denom_pos = torch.logsumexp(cell[pos + [r_count]], dim=0)
                    for r in pos:
                        l1 += -(cell[r] - denom_pos)
                    denom_neg = torch.logsumexp(cell[neg + [r_count]], dim=0)
                    l2 = -(cell[r_count] - denom_neg)
                    total += float(l1 + l2)
                    cells += 1
            assert loss.item() == pytest.approx(total / cells, abs=1e-8)

    def test_positive_logit_increase_decreases_loss(self):
        """Directional finite difference: raising a positive class's logit
        strictly lowers the loss."""
        rng = np.random.default_rng(23)
        for _ in range(50):
            base = rng.normal(size=4)
            scores = single_cell_scores(base)
            gold = [(0, 0, 1)]
            before = loss_atl(scores, gold).item()
            bumped = base.copy()
            bumped[1] += 1e-3
            after = loss_atl(single_cell_scores(bumped), gold).item()
            assert after < before

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = torch.tensor(rng.normal(size=(3, 3, 5)), requires_grad=True)
        gold = [(0, 1, 0), (0, 1, 3), (1, 2, 2)]

        def loss_fn():
            return loss_atl(LabelScores(logits=logits, valid=~torch.eye(3, dtype=torch.bool)), gold)

        err = finite_difference_error(loss_fn, [("logits", logits)], epsilon=1e-6, num_coords=45)
        assert err <= 1e-6


class TestCellDistributions:
    def test_uniform_for_zero_logits(self):
        dist = cell_distributions(single_cell_scores([0.0, 0.0]))
        assert torch.allclose(dist, torch.full((1, 1, 2), 0.5, dtype=torch.float64))

    def test_softmax_closed_form(self):
        dist = cell_distributions(single_cell_scores([math.log(9.0), math.log(1.0)]))
        assert dist[0, 0, 0].item() == pytest.approx(0.9, abs=1e-12)
        assert dist[0, 0, 1].item() == pytest.approx(0.1, abs=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        logits = torch.tensor(rng.normal(size=(4, 4, 6)))
        dist = cell_distributions(scores_from(logits))
        assert torch.allclose(dist.sum(-1), torch.ones(4, 4, dtype=torch.float64), atol=1e-6)


class TestLossRecon:
    def test_identical_fields_exactly_zero(self):
        rng = np.random.default_rng(4)
        p = torch.tensor(rng.dirichlet(np.ones(4), size=(3, 3)))
        valid = ~torch.eye(3, dtype=torch.bool)
        assert loss_recon(p, p, valid).item() == 0.0

    def test_two_point_oracle(self):
        """p=(0.5,0.5), q=(0.9,0.1): value from direct summation."""
        p = torch.tensor([[[0.5, 0.5]]], dtype=torch.float64)
        q = torch.tensor([[[0.9, 0.1]]], dtype=torch.float64)
        valid = torch.ones(1, 1, dtype=torch.bool)
        kl_pq = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        kl_qp = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
        expected = 0.5 * (kl_pq + kl_qp)
        value = loss_recon(p, q, valid).item()
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(0.43948, abs=1e-4)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(6)
        p = torch.tensor(rng.dirichlet(np.ones(5), size=(3, 3)))
        q = torch.tensor(rng.dirichlet(np.ones(5), size=(3, 3)))
        valid = ~torch.eye(3, dtype=torch.bool)
        assert loss_recon(p, q, valid).item() == pytest.approx(loss_recon(q, p, valid).item(), abs=1e-12)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            p = torch.tensor(rng.dirichlet(np.ones(3), size=(2, 2)))
            q = torch.tensor(rng.dirichlet(np.ones(3), size=(2, 2)))
            valid = ~torch.eye(2, dtype=torch.bool)
            val = loss_recon(p, q, valid).item()
            assert val >= 0
            if val <= 1e-12:
                assert torch.allclose(p[valid], q[valid], atol=1e-5)

    def test_mean_over_valid_cells_only(self):
        p = torch.tensor([[[0.5, 0.5], [0.5, 0.5]], [[0.9, 0.1], [0.5, 0.5]]], dtype=torch.float64)
        q = p.clone()
        q[0, 1] = torch.tensor([0.9, 0.1], dtype=torch.float64)
        valid = torch.tensor([[False, True], [True, False]])
        kl_pq = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        kl_qp = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
        expected = 0.5 * (kl_pq + kl_qp) / 2  # one differing cell of two valid
        assert loss_recon(p, q, valid).item() == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        logits_a = torch.tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
        logits_b = torch.tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
        valid = ~torch.eye(2, dtype=torch.bool)

        def loss_fn():
            p = torch.softmax(logits_a, dim=-1)
            q = torch.softmax(logits_b, dim=-1)
            return loss_recon(p, q, valid)

        err = finite_difference_error(
            loss_fn, [("a", logits_a), ("b", logits_b)], epsilon=1e-6, num_coords=32
        )
        assert err <= 1e-6


class TestTotalLoss:
    def test_simple_sum(self):
        breakdown = total_loss(0.5, 1.0, alpha=1.0, beta=1.0)
        assert breakdown.total == pytest.approx(1.5)

    def test_alpha_zero_is_pure_classification(self):
        breakdown = total_loss(0.7, 1.2, alpha=0.0, beta=1.0)
        assert breakdown.total == pytest.approx(1.2)

    def test_oracle_sum(self):
        breakdown = total_loss(0.43948, 2 * math.log(2.0), alpha=1.0, beta=1.0)
        assert breakdown.total == pytest.approx(1.82578, abs=1e-4)

    def test_invariant_total(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            lr_, lc_, a, b = rng.normal(size=4) ** 2
            assert total_loss(lr_, lc_, a, b).total == pytest.approx(a * lr_ + b * lc_)


class TestGoldLabelTensor:
    def test_one_hot_placement(self):
        out = gold_label_tensor([(0, 1, 2), (1, 0, 0)], 2, 3)
        assert out.shape == (2, 2, 3)
        assert out[0, 1, 2] == 1 and out[1, 0, 0] == 1
        assert out.sum() == 2

    def test_accepts_triple_objects(self):
        from remir.corpus import Triple

        out = gold_label_tensor([Triple(head=1, tail=0, relation=1)], 2, 2)
        assert out[1, 0, 1] == 1
