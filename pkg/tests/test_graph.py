import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relsep import (
    AttributeSpec,
    FormatError,
    GraphError,
    NodeType,
    Relation,
    SyntheticConfig,
    build_graph,
    build_incidence,
    dual_transform,
    generate_synthetic,
    load_graph,
    perturb_edges,
    save_graph,
    xavier_random_features,
)


def toy_graph():
    types = [NodeType("a", 2, 2), NodeType("b", 2, 0)]
    edges = np.array([[0, 0], [0, 1], [1, 1]])
    rels = [Relation("a-b", "a", "b", edges)]
    feats = {"a": np.ones((2, 2))}
    return build_graph(types, rels, feats, "a", np.array([0, 1]), 2)


class TestBuildGraph:
    def test_inverse_is_materialized(self):
        g = toy_graph()
        assert len(g.relations) == 2
        inv = g.relation_by_name("a-b-inv")
        assert inv.generated
        assert inv.src_type == "b" and inv.dst_type == "a"
        np.testing.assert_array_equal(inv.edges, [[0, 0], [1, 0], [1, 1]])
        assert g.inverse_of(g.relation_by_name("a-b")) is inv
        assert g.inverse_of(inv).name == "a-b"

    def test_declared_mirror_pair_is_linked_not_duplicated(self):
        types = [NodeType("a", 2, 0), NodeType("b", 2, 0)]
        fwd = np.array([[0, 0], [1, 1]])
        rels = [
            Relation("ab", "a", "b", fwd),
            Relation("ba", "b", "a", fwd[:, ::-1]),
        ]
        g = build_graph(types, rels, {}, "a", np.array([0, 1]), 2)
        assert len(g.relations) == 2
        assert g.relation_by_name("ab").inverse_name == "ba"
        assert g.relation_by_name("ba").inverse_name == "ab"
        assert not g.relation_by_name("ba").generated

    def test_swapped_types_without_mirrored_edges_get_own_inverses(self):
        types = [NodeType("a", 2, 0), NodeType("b", 2, 0)]
        rels = [
            Relation("ab", "a", "b", np.array([[0, 0]])),
            Relation("ba", "b", "a", np.array([[1, 1]])),
        ]
        g = build_graph(types, rels, {}, "a", np.array([0, 1]), 2)
        assert {r.name for r in g.relations} == {"ab", "ba", "ab-inv", "ba-inv"}

    def test_zero_edge_relation_rejected(self):
        types = [NodeType("a", 2, 0), NodeType("b", 2, 0)]
        rels = [Relation("ab", "a", "b", np.empty((0, 2), dtype=np.int64))]
        with pytest.raises(GraphError, match="has zero edges"):
            build_graph(types, rels, {}, "a", np.array([0, 1]), 2)

    def test_duplicate_edge_rejected(self):
        types = [NodeType("a", 2, 0), NodeType("b", 2, 0)]
        rels = [Relation("ab", "a", "b", np.array([[0, 0], [0, 0]]))]
        with pytest.raises(GraphError, match="duplicate"):
            build_graph(types, rels, {}, "a", np.array([0, 1]), 2)

    def test_out_of_range_edge_rejected(self):
        types = [NodeType("a", 2, 0), NodeType("b", 2, 0)]
        rels = [Relation("ab", "a", "b", np.array([[0, 5]]))]
        with pytest.raises(GraphError, match="out of range"):
            build_graph(types, rels, {}, "a", np.array([0, 1]), 2)

    def test_too_small_to_be_heterogeneous(self):
        with pytest.raises(GraphError, match="heterogeneous"):
            build_graph([NodeType("a", 2, 0)], [], {}, "a", np.array([0, 1]), 2)

    def test_label_out_of_range_rejected(self):
        types = [NodeType("a", 2, 0), NodeType("b", 2, 0)]
        rels = [Relation("ab", "a", "b", np.array([[0, 0]]))]
        with pytest.raises(GraphError, match="labels"):
            build_graph(types, rels, {}, "a", np.array([0, 7]), 2)

    def test_feature_shape_mismatch_rejected(self):
        types = [NodeType("a", 2, 3), NodeType("b", 2, 0)]
        rels = [Relation("ab", "a", "b", np.array([[0, 0]]))]
        with pytest.raises(GraphError, match="shape"):
            build_graph(types, rels, {"a": np.ones((2, 2))}, "a",
                        np.array([0, 1]), 2)

    def test_degree_helpers(self):
        g = toy_graph()
        r = g.relation_by_name("a-b")
        np.testing.assert_array_equal(g.src_degrees(r), [2, 1])
        np.testing.assert_array_equal(g.dst_degrees(r), [1, 2])


class TestIncidenceAndDual:
    def test_hand_enumerated_incidence(self):
        g = toy_graph()
        inc = build_incidence(g, g.relation_by_name("a-b"))
        dense = inc.matrix.toarray()
        np.testing.assert_array_equal(dense, [
            [1, 1, 0],
            [0, 0, 1],
            [1, 0, 0],
            [0, 1, 1],
        ])
        np.testing.assert_array_equal(dense.sum(axis=0), [2, 2, 2])
        np.testing.assert_array_equal(dense.sum(axis=1), [2, 1, 1, 2])

    def test_dual_swaps_roles(self):
        g = toy_graph()
        inc = build_incidence(g, g.relation_by_name("a-b"))
        dual = dual_transform(inc)
        assert dual.num_dual_nodes == 3
        assert dual.num_hyperedges == 4
        np.testing.assert_array_equal(dual.mbar.toarray(), inc.matrix.toarray().T)
        np.testing.assert_array_equal(dual.hyperedge_degrees, [2, 1, 1, 2])
        row_sums = np.asarray(dual.mbar.sum(axis=1)).ravel()
        np.testing.assert_array_equal(row_sums, np.full(3, 2))

    @settings(max_examples=50, deadline=None)
    @given(st.data())
    def test_dual_properties_hold_on_random_graphs(self, data):
        n_src = data.draw(st.integers(1, 6))
        n_dst = data.draw(st.integers(1, 6))
        all_pairs = [(s, d) for s in range(n_src) for d in range(n_dst)]
        picked = data.draw(st.lists(st.sampled_from(all_pairs), min_size=1,
                                    max_size=len(all_pairs), unique=True))
        types = [NodeType("u", n_src, 0), NodeType("v", n_dst, 0)]
        rel = Relation("uv", "u", "v", np.array(picked, dtype=np.int64))
        g = build_graph(types, [rel], {}, "u",
                        np.zeros(n_src, dtype=np.int64), 1)
        inc = build_incidence(g, g.relation_by_name("uv"))
        col_sums = np.asarray(inc.matrix.sum(axis=0)).ravel()
        np.testing.assert_array_equal(col_sums, np.full(len(picked), 2))
        dual = dual_transform(inc)
        np.testing.assert_array_equal(dual.mbar.T.toarray(), inc.matrix.toarray())
        np.testing.assert_array_equal(
            dual.hyperedge_degrees,
            np.asarray(inc.matrix.sum(axis=1)).ravel())


class TestPerturb:
    def big_graph(self):
        rng = np.random.Generator(np.random.PCG64(0))
        pairs = [(s, d) for s in range(20) for d in range(20)]
        idx = rng.choice(len(pairs), size=100, replace=False)
        edges = np.array([pairs[i] for i in sorted(idx)], dtype=np.int64)
        types = [NodeType("a", 20, 0), NodeType("b", 20, 0)]
        return build_graph(types, [Relation("ab", "a", "b", edges)], {}, "a",
                           np.zeros(20, dtype=np.int64), 1)

    def test_half_rate_keeps_exactly_half(self):
        g = self.big_graph()
        p = perturb_edges(g, 0.5, seed=3)
        assert p.relation_by_name("ab").num_edges == 50

    def test_kept_edges_preserve_original_order(self):
        g = self.big_graph()
        p = perturb_edges(g, 0.3, seed=3)
        orig = [tuple(e) for e in g.relation_by_name("ab").edges.tolist()]
        kept = [tuple(e) for e in p.relation_by_name("ab").edges.tolist()]
        it = iter(orig)
        assert all(e in it for e in kept)

    def test_rate_zero_is_identity(self):
        g = self.big_graph()
        p = perturb_edges(g, 0.0, seed=9)
        np.testing.assert_array_equal(p.relation_by_name("ab").edges,
                                      g.relation_by_name("ab").edges)

    def test_rate_one_empties_relations(self):
        g = self.big_graph()
        p = perturb_edges(g, 1.0, seed=9)
        assert p.relation_by_name("ab").num_edges == 0
        assert p.relation_by_name("ab-inv").num_edges == 0

    def test_deterministic_given_seed(self):
        g = self.big_graph()
        a = perturb_edges(g, 0.4, seed=11)
        b = perturb_edges(g, 0.4, seed=11)
        np.testing.assert_array_equal(a.relation_by_name("ab").edges,
                                      b.relation_by_name("ab").edges)
        c = perturb_edges(g, 0.4, seed=12)
        assert not np.array_equal(a.relation_by_name("ab").edges,
                                  c.relation_by_name("ab").edges)

    def test_inverse_rederived_from_survivors(self):
        g = self.big_graph()
        p = perturb_edges(g, 0.5, seed=3)
        fwd = p.relation_by_name("ab").edges
        np.testing.assert_array_equal(p.relation_by_name("ab-inv").edges,
                                      fwd[:, ::-1])

    def test_invalid_rate_rejected(self):
        g = self.big_graph()
        with pytest.raises(GraphError, match="rate"):
            perturb_edges(g, 1.5, seed=0)
        with pytest.raises(GraphError, match="rate"):
            perturb_edges(g, -0.1, seed=0)

    @settings(max_examples=30, deadline=None)
    @given(rate=st.floats(0.0, 1.0), seed=st.integers(0, 2**31 - 1))
    def test_keep_count_matches_formula(self, rate, seed):
        g = self.big_graph()
        p = perturb_edges(g, rate, seed=seed)
        expected = int(np.ceil((1.0 - rate) * 100))
        assert p.relation_by_name("ab").num_edges == expected


class TestSynthetic:
    def test_round_robin_labels(self):
        g = generate_synthetic(SyntheticConfig(num_target_nodes=9, num_classes=3,
                                               seed=0))
        np.testing.assert_array_equal(g.labels, [0, 1, 2] * 3)

    def test_full_affinity_intra_class_fraction(self):
        cfg = SyntheticConfig(num_target_nodes=600, num_classes=3,
                              attributes=(AttributeSpec(240, 1.0),),
                              p_in=0.2, p_out=0.02, seed=5)
        g = generate_synthetic(cfg)
        r = g.relation_by_name("target-attr0")
        attr_labels = np.arange(240) % 3
        intra = (g.labels[r.edges[:, 0]] == attr_labels[r.edges[:, 1]]).mean()
        expected = 0.2 / (0.2 + 2 * 0.02)
        sigma = np.sqrt(expected * (1 - expected) / r.num_edges)
        assert abs(intra - expected) < 3 * sigma

    def test_zero_affinity_is_classless(self):
        cfg = SyntheticConfig(num_target_nodes=600, num_classes=3,
                              attributes=(AttributeSpec(240, 0.0),),
                              p_in=0.2, p_out=0.05, seed=5)
        g = generate_synthetic(cfg)
        r = g.relation_by_name("target-attr0")
        attr_labels = np.arange(240) % 3
        intra = (g.labels[r.edges[:, 0]] == attr_labels[r.edges[:, 1]]).mean()
        sigma = np.sqrt((1 / 3) * (2 / 3) / r.num_edges)
        assert abs(intra - 1 / 3) < 3 * sigma

    def test_deterministic_given_seed(self):
        cfg = SyntheticConfig(seed=42)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        for r in a.base_relations():
            np.testing.assert_array_equal(r.edges,
                                          b.relation_by_name(r.name).edges)
        np.testing.assert_array_equal(a.features["target"], b.features["target"])

    def test_config_json_round_trip(self):
        cfg = SyntheticConfig(num_target_nodes=50, num_classes=2,
                              attributes=(AttributeSpec(10, 0.5),),
                              p_in=0.3, p_out=0.1, feature_dim=8,
                              noise_sigma=0.5, seed=7)
        assert SyntheticConfig.from_json(cfg.to_json()) == cfg

    def test_config_rejects_unknown_fields(self):
        with pytest.raises(GraphError, match="unknown"):
            SyntheticConfig.from_json('{"p_inn": 0.5}')

    def test_config_rejects_bad_probability(self):
        with pytest.raises(GraphError, match="p_in"):
            SyntheticConfig(p_in=1.5)


class TestXavierFeatures:
    def test_bound_and_shape(self):
        g = toy_graph()
        rx = xavier_random_features(g, 128, seed=0)
        bound = np.sqrt(6.0 / 256.0)
        assert abs(bound - 0.15309310892394862) < 1e-15
        for t in rx.node_types:
            feats = rx.features[t.name]
            assert feats.shape == (t.count, 128)
            assert np.abs(feats).max() <= bound

    def test_deterministic_and_seed_sensitive(self):
        g = toy_graph()
        a = xavier_random_features(g, 16, seed=1)
        b = xavier_random_features(g, 16, seed=1)
        c = xavier_random_features(g, 16, seed=2)
        np.testing.assert_array_equal(a.features["a"], b.features["a"])
        assert not np.array_equal(a.features["a"], c.features["a"])

    def test_structure_preserved(self):
        g = toy_graph()
        rx = xavier_random_features(g, 8, seed=0)
        np.testing.assert_array_equal(
            rx.relation_by_name("a-b").edges, g.relation_by_name("a-b").edges)
        np.testing.assert_array_equal(rx.labels, g.labels)

    def test_bad_dim_rejected(self):
        with pytest.raises(GraphError, match="positive"):
            xavier_random_features(toy_graph(), 0, seed=0)


class TestDataIO:
    def test_round_trip(self, tmp_path):
        g = generate_synthetic(SyntheticConfig(num_target_nodes=30,
                                               num_classes=3, seed=1))
        save_graph(g, tmp_path / "ds")
        h = load_graph(tmp_path / "ds")
        assert [t.name for t in h.node_types] == [t.name for t in g.node_types]
        for r in g.base_relations():
            np.testing.assert_array_equal(h.relation_by_name(r.name).edges,
                                          r.edges)
        for t in g.node_types:
            np.testing.assert_array_equal(h.features[t.name],
                                          g.features[t.name])
        np.testing.assert_array_equal(h.labels, g.labels)
        assert h.num_classes == g.num_classes

    def test_splits_round_trip(self, tmp_path):
        g = generate_synthetic(SyntheticConfig(num_target_nodes=30,
                                               num_classes=3, seed=1))
        splits = {"20": {"train": [0, 1], "val": [2, 3], "test": [4, 5]}}
        g = type(g)(**{**g.__dict__, "splits": splits})
        save_graph(g, tmp_path / "ds")
        assert load_graph(tmp_path / "ds").splits == splits

    def write_minimal(self, root):
        root.mkdir()
        (root / "meta.json").write_text(
            '{"node_types": [{"name": "a", "count": 2, "feature_dim": 0},'
            ' {"name": "b", "count": 2, "feature_dim": 0}],'
            ' "relations": [{"name": "ab", "src_type": "a", "dst_type": "b"}],'
            ' "target_type": "a", "num_classes": 2}')
        (root / "ab.edges.tsv").write_text("0\t0\n1\t1\n")
        (root / "a.labels.tsv").write_text("0\n1\n")

    def test_minimal_directory_loads(self, tmp_path):
        self.write_minimal(tmp_path / "ds")
        g = load_graph(tmp_path / "ds")
        assert len(g.node_types) == 2
        assert len(g.relations) == 2

    def test_missing_meta_reported(self, tmp_path):
        (tmp_path / "ds").mkdir()
        with pytest.raises(FormatError, match="meta.json"):
            load_graph(tmp_path / "ds")

    def test_missing_directory_reported(self, tmp_path):
        with pytest.raises(FormatError, match="not found"):
            load_graph(tmp_path / "nope")

    def test_edge_error_carries_file_and_line(self, tmp_path):
        self.write_minimal(tmp_path / "ds")
        (tmp_path / "ds" / "ab.edges.tsv").write_text("0\t0\n1\t9\n")
        with pytest.raises(FormatError, match=r"ab\.edges\.tsv:2"):
            load_graph(tmp_path / "ds")

    def test_non_integer_edge_reported(self, tmp_path):
        self.write_minimal(tmp_path / "ds")
        (tmp_path / "ds" / "ab.edges.tsv").write_text("0\tx\n")
        with pytest.raises(FormatError, match=r"ab\.edges\.tsv:1"):
            load_graph(tmp_path / "ds")

    def test_zero_edges_reported(self, tmp_path):
        self.write_minimal(tmp_path / "ds")
        (tmp_path / "ds" / "ab.edges.tsv").write_text("")
        with pytest.raises(FormatError, match="has zero edges"):
            load_graph(tmp_path / "ds")

    def test_duplicate_edge_line_reported(self, tmp_path):
        self.write_minimal(tmp_path / "ds")
        (tmp_path / "ds" / "ab.edges.tsv").write_text("0\t0\n0\t0\n")
        with pytest.raises(FormatError, match=r"ab\.edges\.tsv:2.*duplicate"):
            load_graph(tmp_path / "ds")

    def test_label_count_mismatch_reported(self, tmp_path):
        self.write_minimal(tmp_path / "ds")
        (tmp_path / "ds" / "a.labels.tsv").write_text("0\n")
        with pytest.raises(FormatError, match="expected 2 labels"):
            load_graph(tmp_path / "ds")

    def test_feature_arity_error_carries_line(self, tmp_path):
        self.write_minimal(tmp_path / "ds")
        meta = (tmp_path / "ds" / "meta.json").read_text()
        meta = meta.replace('"name": "a", "count": 2, "feature_dim": 0',
                            '"name": "a", "count": 2, "feature_dim": 2')
        (tmp_path / "ds" / "meta.json").write_text(meta)
        (tmp_path / "ds" / "a.features.tsv").write_text("0.5\t1.0\n0.25\n")
        with pytest.raises(FormatError, match=r"a\.features\.tsv:2"):
            load_graph(tmp_path / "ds")

    def test_bad_split_index_reported(self, tmp_path):
        self.write_minimal(tmp_path / "ds")
        (tmp_path / "ds" / "splits.json").write_text(
            '{"20": {"train": [0], "val": [1], "test": [99]}}')
        with pytest.raises(FormatError, match="outside"):
            load_graph(tmp_path / "ds")
