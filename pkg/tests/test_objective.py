import math

import numpy as np
import pytest

from relsep.autodiff import Parameter, Tape, finite_diff_check
from relsep.objective import (
    BACKWARD,
    FORWARD,
    ContrastiveObjective,
    ObjectiveError,
    PositiveSet,
    ProjectionHead,
    merge_pair_affinities,
    positives_for_index,
    sample_positives,
)
from relsep.separation import HOMOPHILIC, build_two_hop
from relsep import NodeType, Relation, build_graph


def brute_direction(sims, mask, inv_sizes, tau, denominator):
    """Scalar loops straight off the definition; the tape version must
    reproduce this."""
    n = sims.shape[0]
    total = 0.0
    for i in range(n):
        num = sum(math.exp(sims[i, j] / tau)
                  for j in range(n) if mask[i, j])
        if denominator == "excl_pos":
            den = sum(math.exp(sims[i, k] / tau)
                      for k in range(n) if not mask[i, k])
        else:
            den = sum(math.exp(sims[i, k] / tau) for k in range(n) if k != i)
        total += -inv_sizes[i] * math.log(num / den)
    return total / n


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestSamplePositives:
    def graph(self):
        types = [NodeType("t", 4, 2), NodeType("m", 2, 2)]
        edges = np.array([[0, 0], [1, 0], [2, 0], [0, 1], [3, 1]])
        return build_graph(types, [Relation("r", "t", "m", edges)],
                           {"t": np.zeros((4, 2)), "m": np.zeros((2, 2))},
                           "t", np.zeros(4, dtype=np.int64), 1)

    def test_ranks_by_affinity_times_cosine(self):
        g = self.graph()
        idx = build_two_hop(g, "r")
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        aff = np.ones(idx.num_pairs)
        pos = positives_for_index(idx, aff, emb, k_pos=2)
        # the round trip ties node 1 on cosine and wins the tie break;
        # cos then favors node 1 over 2 and 3 for the second slot
        assert pos.mask[0].tolist() == [True, True, False, False]
        assert pos.inv_sizes[0] == pytest.approx(0.5)

    def test_affinity_can_override_cosine(self):
        g = self.graph()
        idx = build_two_hop(g, "r")
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.6, 0.8], [1.0, 1.0]])
        aff = np.zeros(idx.num_pairs)
        for p, (i, j) in enumerate(idx.pairs.tolist()):
            aff[p] = 100.0 if (i, j) == (0, 2) else 1.0
        pos = positives_for_index(idx, aff, emb, k_pos=1)
        assert pos.mask[0].tolist() == [False, False, True, False]

    def test_ties_break_toward_smaller_index(self):
        pairs = np.array([[0, 2], [0, 1]])
        order = np.argsort(pairs[:, 0] * 3 + pairs[:, 1])
        pairs = pairs[order]
        indptr = np.array([0, 2, 2, 2])
        emb = np.ones((3, 2))
        pos = sample_positives(pairs, indptr, 3, np.ones(2), emb, k_pos=1)
        assert pos.mask[0].tolist() == [False, True, False]

    def test_kpos_zero_falls_back_to_self(self):
        g = self.graph()
        idx = build_two_hop(g, "r")
        pos = positives_for_index(idx, np.ones(idx.num_pairs),
                                  np.ones((4, 2)), k_pos=0)
        np.testing.assert_array_equal(pos.mask, np.eye(4, dtype=bool))
        np.testing.assert_array_equal(pos.inv_sizes, np.ones(4))

    def test_nodes_without_pairs_fall_back_to_self(self):
        pairs = np.empty((0, 2), dtype=np.int64)
        pos = sample_positives(pairs, np.zeros(4, dtype=np.int64), 3,
                               np.empty(0), np.ones((3, 2)), k_pos=3)
        np.testing.assert_array_equal(pos.mask, np.eye(3, dtype=bool))

    def test_kpos_larger_than_candidates_takes_all(self):
        g = self.graph()
        idx = build_two_hop(g, "r")
        pos = positives_for_index(idx, np.ones(idx.num_pairs),
                                  np.ones((4, 2)), k_pos=50)
        # node 0 reaches itself plus 1, 2 via m0 and 3 via m1
        assert pos.mask[0].tolist() == [True, True, True, True]
        assert pos.inv_sizes[0] == pytest.approx(1 / 4)

    def test_negative_kpos_rejected(self):
        with pytest.raises(ObjectiveError, match="k_pos"):
            sample_positives(np.empty((0, 2), dtype=np.int64),
                             np.zeros(2, dtype=np.int64), 1, np.empty(0),
                             np.ones((1, 2)), k_pos=-1)


class TestMergePairAffinities:
    def test_union_with_mean(self):
        g1 = build_graph(
            [NodeType("t", 3, 1), NodeType("m", 1, 1)],
            [Relation("r", "t", "m", np.array([[0, 0], [1, 0]]))],
            {"t": np.zeros((3, 1)), "m": np.zeros((1, 1))},
            "t", np.zeros(3, dtype=np.int64), 1)
        g2 = build_graph(
            [NodeType("t", 3, 1), NodeType("m", 1, 1)],
            [Relation("q", "t", "m", np.array([[0, 0], [2, 0]]))],
            {"t": np.zeros((3, 1)), "m": np.zeros((1, 1))},
            "t", np.zeros(3, dtype=np.int64), 1)
        i1, i2 = build_two_hop(g1, "r"), build_two_hop(g2, "q")
        # i1 pairs: (0,0), (0,1), (1,0), (1,1)
        # i2 pairs: (0,0), (0,2), (2,0), (2,2)
        pairs, indptr, mean = merge_pair_affinities(
            [i1, i2], [np.array([0.8, 0.4, 0.2, 0.6]),
                       np.array([0.2, 0.6, 0.3, 0.5])])
        np.testing.assert_array_equal(
            pairs, [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [2, 0], [2, 2]])
        np.testing.assert_allclose(mean,
                                   [0.5, 0.2, 0.3, 0.1, 0.3, 0.15, 0.25])
        np.testing.assert_array_equal(indptr, [0, 3, 5, 7])

    def test_overlapping_pairs_average(self):
        g = build_graph(
            [NodeType("t", 2, 1), NodeType("m", 1, 1)],
            [Relation("r", "t", "m", np.array([[0, 0], [1, 0]]))],
            {"t": np.zeros((2, 1)), "m": np.zeros((1, 1))},
            "t", np.zeros(2, dtype=np.int64), 1)
        idx = build_two_hop(g, "r")
        _, _, mean = merge_pair_affinities(
            [idx, idx], [np.array([0.4, 0.2, 0.1, 0.3]),
                         np.array([0.6, 0.4, 0.3, 0.5])])
        np.testing.assert_allclose(mean, [0.5, 0.3, 0.2, 0.4])

    def test_empty_rejected(self):
        with pytest.raises(ObjectiveError, match="at least one"):
            merge_pair_affinities([], [])


class TestProjectionHead:
    def test_two_layer_shape_and_gradients(self):
        rng = np.random.Generator(np.random.PCG64(3))
        head = ProjectionHead("anchor", 4, rng, np.float64)
        x = Parameter("x", rng.normal(size=(5, 4)))

        def build():
            t = Tape()
            y = head(t, t.watch(x))
            return t.sum_all(t.mul(y, y))

        report = finite_diff_check(build, head.parameters() + [x],
                                   epsilon=1e-6, tolerance=1e-5)
        assert report.passed, report.per_param

    def test_param_names_are_per_view(self):
        rng = np.random.Generator(np.random.PCG64(0))
        head = ProjectionHead("paper.homophilic", 3, rng, np.float32)
        assert {p.name for p in head.parameters()} == {
            "proj.paper.homophilic.W1", "proj.paper.homophilic.b1",
            "proj.paper.homophilic.W2", "proj.paper.homophilic.b2"}


class TestContrastiveLoss:
    def identity_objective(self, view_keys, tau_c=1.0, k_pos=0,
                           denominator="excl_pos"):
        obj = ContrastiveObjective(view_keys, dim=3, k_pos=k_pos,
                                   tau_c=tau_c, seed=0, dtype=np.float64,
                                   denominator=denominator)
        heads = [obj.anchor_head] + [obj.view_heads[k] for k in view_keys]
        for head in heads:
            head.w1.data[:] = np.eye(3)
            head.w2.data[:] = np.eye(3)
            head.b1.data[:] = 0.0
            head.b2.data[:] = 0.0
        return obj

    def self_positive(self, n):
        return PositiveSet(np.eye(n, dtype=bool), np.ones(n))

    def test_orthonormal_self_positive_value(self):
        key = ("r", HOMOPHILIC)
        obj = self.identity_objective([key], tau_c=1.0)
        tape = Tape()
        eye = tape.constant(np.eye(3))
        total, breakdown = obj.loss(tape, eye, {key: eye},
                                    {key: self.self_positive(3)})
        expected = -(1.0 - math.log(2.0))
        assert float(total.data) == pytest.approx(expected, abs=1e-12)
        assert breakdown.entries[0] == ("r", HOMOPHILIC, FORWARD,
                                        pytest.approx(expected))
        assert breakdown.entries[1][2] == BACKWARD

    def test_orthonormal_value_at_half_temperature(self):
        key = ("r", HOMOPHILIC)
        obj = self.identity_objective([key], tau_c=0.5)
        tape = Tape()
        eye = tape.constant(np.eye(3))
        total, _ = obj.loss(tape, eye, {key: eye},
                            {key: self.self_positive(3)})
        assert float(total.data) == pytest.approx(-(2.0 - math.log(2.0)),
                                                  abs=1e-12)

    def test_matches_brute_force_both_denominators(self):
        rng = np.random.Generator(np.random.PCG64(8))
        n = 6
        key = ("r", HOMOPHILIC)
        for denominator in ("excl_pos", "full"):
            obj = self.identity_objective([key], tau_c=0.6,
                                          denominator=denominator)
            anchor = rng.uniform(0.1, 1.0, (n, 3))
            view = rng.uniform(0.1, 1.0, (n, 3))
            mask = np.zeros((n, n), dtype=bool)
            for i in range(n):
                mask[i, rng.choice(n, size=2, replace=False)] = True
            pos = PositiveSet(mask, 1.0 / mask.sum(axis=1))
            tape = Tape()
            total, breakdown = obj.loss(
                tape, tape.constant(anchor), {key: tape.constant(view)},
                {key: pos})
            sims = unit_rows(anchor) @ unit_rows(view).T
            fwd = brute_direction(sims, mask, pos.inv_sizes, 0.6, denominator)
            bwd = brute_direction(sims.T, mask, pos.inv_sizes, 0.6,
                                  denominator)
            assert float(total.data) == pytest.approx(0.5 * (fwd + bwd),
                                                      abs=1e-10)
            assert breakdown.entries[0][3] == pytest.approx(fwd, abs=1e-10)
            assert breakdown.entries[1][3] == pytest.approx(bwd, abs=1e-10)

    def test_total_sums_views_in_key_order(self):
        keys = [("r", "homophilic"), ("r", "heterophilic")]
        obj = self.identity_objective(keys)
        rng = np.random.Generator(np.random.PCG64(1))
        anchor = rng.uniform(0.1, 1.0, (4, 3))
        views = {k: rng.uniform(0.1, 1.0, (4, 3)) for k in keys}
        pos = {k: self.self_positive(4) for k in keys}

        def run(subset):
            tape = Tape()
            total, breakdown = obj.loss(
                tape, tape.constant(anchor),
                {k: tape.constant(views[k]) for k in subset},
                pos)
            return float(total.data), breakdown

        both, breakdown = run(keys)
        first, _ = run(keys[:1])
        second, _ = run(keys[1:])
        assert both == pytest.approx(first + second, abs=1e-12)
        assert [(e[0], e[1]) for e in breakdown.entries] == [
            ("r", "homophilic"), ("r", "homophilic"),
            ("r", "heterophilic"), ("r", "heterophilic")]
        view_totals = breakdown.view_totals()
        assert view_totals[("r", "homophilic")] == pytest.approx(first)

    def test_subset_of_views_allowed(self):
        keys = [("a", "homophilic"), ("b", "homophilic")]
        obj = self.identity_objective(keys)
        tape = Tape()
        eye = tape.constant(np.eye(3))
        total, breakdown = obj.loss(tape, eye, {keys[1]: eye},
                                    {keys[1]: self.self_positive(3)})
        assert len(breakdown.entries) == 2
        assert breakdown.entries[0][0] == "b"

    def test_gradients_through_heads(self):
        key = ("r", HOMOPHILIC)
        obj = ContrastiveObjective([key], dim=3, k_pos=0, tau_c=0.7, seed=4,
                                   dtype=np.float64)
        rng = np.random.Generator(np.random.PCG64(2))
        anchor = Parameter("anchor", rng.normal(size=(5, 3)))
        view = Parameter("view", rng.normal(size=(5, 3)))
        pos = self.self_positive(5)

        def build():
            t = Tape()
            total, _ = obj.loss(t, t.watch(anchor), {key: t.watch(view)},
                                {key: pos})
            return total

        params = obj.parameters() + [anchor, view]
        report = finite_diff_check(build, params, epsilon=1e-6,
                                   tolerance=2e-5)
        assert report.passed, report.per_param

    def test_invalid_configuration_rejected(self):
        with pytest.raises(ObjectiveError, match="tau_c"):
            ContrastiveObjective([("r", "x")], 3, 0, tau_c=0.0, seed=0)
        with pytest.raises(ObjectiveError, match="k_pos"):
            ContrastiveObjective([("r", "x")], 3, -1, tau_c=0.5, seed=0)
        with pytest.raises(ObjectiveError, match="denominator"):
            ContrastiveObjective([("r", "x")], 3, 0, tau_c=0.5, seed=0,
                                 denominator="odd")
        with pytest.raises(ObjectiveError, match="unique"):
            ContrastiveObjective([("r", "x"), ("r", "x")], 3, 0, tau_c=0.5,
                                 seed=0)

    def test_unknown_view_key_rejected(self):
        obj = self.identity_objective([("r", "homophilic")])
        tape = Tape()
        eye = tape.constant(np.eye(3))
        with pytest.raises(ObjectiveError, match="unknown view"):
            obj.loss(tape, eye, {("q", "homophilic"): eye},
                     {("q", "homophilic"): self.self_positive(3)})

    def test_empty_views_rejected(self):
        obj = self.identity_objective([("r", "homophilic")])
        tape = Tape()
        with pytest.raises(ObjectiveError, match="no views"):
            obj.loss(tape, tape.constant(np.eye(3)), {}, {})

    def test_degenerate_contrast_pool_rejected(self):
        key = ("r", "homophilic")
        obj = self.identity_objective([key])
        tape = Tape()
        one = tape.constant(np.ones((1, 3)))
        with pytest.raises(ObjectiveError, match="contrast pool"):
            obj.loss(tape, one, {key: one}, {key: self.self_positive(1)})
