import numpy as np
import pytest

from wisteria.errors import ConfigError
from wisteria.ontology import build_tree_ontology, propagate_mass
from wisteria.rng import stream
from wisteria.supervision import (
    ChannelParams,
    CooccurrenceParams,
    CooccurrenceRule,
    OntologyPropParams,
    OperatorSpec,
    SupervisionViewSet,
    apply_channel,
    apply_cooccurrence,
    apply_ontology_prop,
    build_views,
    corrupt_views,
    default_cooccurrence_rules,
    load_views,
    save_views,
    views_from_bytes,
    views_sidecar_json,
    views_to_bytes,
)
from wisteria.synthgen import GenConfig, PatientRecord, SiteSpec, generate_dataset, make_prototypes


GRAPH = build_tree_ontology(2, 2)  # 7 nodes, leaves (3, 4, 5, 6)
C = 4


def record(truth=1, x=None, site=0):
    return PatientRecord(
        x=np.zeros(4) if x is None else np.asarray(x, dtype=float),
        site_id=site,
        truth_class=truth,
    )


def uniform_flip(rate):
    m = np.full((C, C), rate / (C - 1))
    np.fill_diagonal(m, 1.0 - rate)
    return m


class TestApplyChannel:
    def test_identity_returns_truth_leaf(self):
        rng = stream(0, "test")
        for truth in range(C):
            vec = apply_channel(record(truth), np.eye(C), rng, GRAPH)
            assert vec[GRAPH.leaf_ids[truth]] == 1.0
            assert vec.sum() == 1.0

    def test_uniform_confusion_marginal(self):
        rng = stream(1, "marginal")
        uniform = np.full((C, C), 1.0 / C)
        counts = np.zeros(C)
        n = 10_000
        for _ in range(n):
            vec = apply_channel(record(2), uniform, rng, GRAPH)
            counts[list(GRAPH.leaf_ids).index(int(np.argmax(vec)))] += 1
        sigma = np.sqrt(n * 0.25 * 0.75)
        assert np.all(np.abs(counts - n / 4) <= 4 * sigma)

    def test_flip_rate_agreement(self):
        rng = stream(2, "flip")
        confusion = uniform_flip(0.3)
        n = 10_000
        agree = sum(
            apply_channel(record(1), confusion, rng, GRAPH)[GRAPH.leaf_ids[1]] == 1.0
            for _ in range(n)
        )
        sigma = np.sqrt(n * 0.7 * 0.3)
        assert abs(agree - 0.7 * n) <= 3 * sigma

    def test_soft_mode_returns_expected_row(self):
        confusion = uniform_flip(0.2)
        vec = apply_channel(record(3), confusion, stream(0), GRAPH, soft=True)
        np.testing.assert_array_equal(vec[list(GRAPH.leaf_ids)], confusion[3])

    def test_rejects_invalid_confusion(self):
        bad = np.full((C, C), 0.3)
        with pytest.raises(ConfigError):
            apply_channel(record(0), bad, stream(0), GRAPH)


class TestApplyOntologyProp:
    def test_alpha_zero_unchanged(self):
        base = np.zeros(GRAPH.num_nodes)
        base[GRAPH.leaf_ids[0]] = 1.0
        np.testing.assert_array_equal(apply_ontology_prop(base, GRAPH, 0.0), base)

    def test_support_widens(self):
        base = np.zeros(GRAPH.num_nodes)
        base[GRAPH.leaf_ids[0]] = 1.0
        out = apply_ontology_prop(base, GRAPH, 0.5)
        assert (out > 1e-9).sum() > (base > 1e-9).sum()
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_propagate_mass_for_onehot(self, path_graph):
        base = np.array([1.0, 0.0, 0.0])
        out = apply_ontology_prop(base, path_graph, 0.5)
        np.testing.assert_allclose(out, propagate_mass(path_graph, 0, 0.5), atol=1e-15)

    def test_rejects_non_distribution(self):
        with pytest.raises(ConfigError):
            apply_ontology_prop(np.full(GRAPH.num_nodes, 0.5), GRAPH, 0.3)


class TestApplyCooccurrence:
    def _params(self, eps=0.2):
        directions = np.eye(C, 4)
        rules = tuple(CooccurrenceRule(direction=directions[c]) for c in range(C))
        return CooccurrenceParams(rules=rules, eps_rule=eps)

    def test_noiseless_record_peaks_on_truth(self):
        config = GenConfig(
            num_records=1, num_classes=C, feature_dim=4, num_sites=1,
            feature_noise_sd=0.0, seed=3,
        )
        protos = make_prototypes(config)
        rules = default_cooccurrence_rules(protos)
        params = CooccurrenceParams(rules=rules, eps_rule=0.2)
        for truth in range(C):
            rec = record(truth, x=protos[truth])
            vec = apply_cooccurrence(rec, params, GRAPH)
            assert int(np.argmax(vec)) == GRAPH.leaf_ids[truth]

    def test_full_smoothing_uniform(self):
        vec = apply_cooccurrence(record(0, x=[5.0, 0, 0, 0]), self._params(eps=1.0), GRAPH)
        np.testing.assert_allclose(vec[list(GRAPH.leaf_ids)], 0.25, atol=1e-15)

    def test_tie_breaks_to_lowest_class(self):
        vec = apply_cooccurrence(record(3, x=[0.0, 0, 0, 0]), self._params(), GRAPH)
        assert int(np.argmax(vec)) == GRAPH.leaf_ids[0]

    def test_rejects_wrong_rule_count(self):
        rules = (CooccurrenceRule(direction=np.ones(4)),)
        with pytest.raises(ConfigError):
            apply_cooccurrence(record(0), CooccurrenceParams(rules=rules, eps_rule=0.1), GRAPH)


def _dataset(n=50, noise=0.0, seed=17, num_sites=1):
    config = GenConfig(
        num_records=n, num_classes=C, feature_dim=4, num_sites=num_sites,
        prototype_separation=2.0, feature_noise_sd=noise, seed=seed,
    )
    sites = [SiteSpec(i, np.zeros(4), np.eye(C)) for i in range(num_sites)]
    return generate_dataset(config, sites)


class TestBuildViews:
    def test_identity_channel_matches_truth(self):
        dataset = _dataset()
        specs = [OperatorSpec("channel", ChannelParams(confusion=np.eye(C)), 0)]
        views = build_views(dataset, specs, GRAPH, seed=5)
        for i, rec in enumerate(dataset):
            assert views.views[i, 0, GRAPH.leaf_ids[rec.truth_class]] == 1.0

    def test_deterministic(self):
        dataset = _dataset()
        specs = [
            OperatorSpec("channel", ChannelParams(confusion=uniform_flip(0.3)), 0),
            OperatorSpec("ontology_prop", OntologyPropParams(0.4, ChannelParams(confusion=uniform_flip(0.2))), 1),
        ]
        a = build_views(dataset, specs, GRAPH, seed=9)
        b = build_views(dataset, specs, GRAPH, seed=9)
        np.testing.assert_array_equal(a.views, b.views)

    def test_error_decorrelation_across_operators(self):
        dataset = _dataset(n=10_000, seed=29)
        confusion = uniform_flip(0.3)
        specs = [
            OperatorSpec("channel", ChannelParams(confusion=confusion), 0),
            OperatorSpec("channel", ChannelParams(confusion=confusion), 1),
        ]
        views = build_views(dataset, specs, GRAPH, seed=31)
        leaf_idx = np.array(GRAPH.leaf_ids)
        truth_leaves = leaf_idx[[r.truth_class for r in dataset]]
        errors = views.views.argmax(axis=2) != truth_leaves[:, None]
        corr = np.corrcoef(errors[:, 0], errors[:, 1])[0, 1]
        assert abs(corr) <= 4.0 / np.sqrt(len(dataset))

    def test_per_site_confusion_lookup(self):
        dataset = _dataset(num_sites=1)
        params = ChannelParams(per_site=((0, np.eye(C)),))
        specs = [OperatorSpec("channel", params, 0)]
        views = build_views(dataset, specs, GRAPH, seed=1)
        assert views.views.shape == (len(dataset), 1, GRAPH.num_nodes)

    def test_missing_site_confusion_raises(self):
        dataset = _dataset(num_sites=1)
        params = ChannelParams(per_site=((3, np.eye(C)),))
        specs = [OperatorSpec("channel", params, 0)]
        with pytest.raises(ConfigError):
            build_views(dataset, specs, GRAPH, seed=1)

    def test_rejects_duplicate_operator_ids(self):
        dataset = _dataset(n=5)
        specs = [
            OperatorSpec("channel", ChannelParams(confusion=np.eye(C)), 7),
            OperatorSpec("channel", ChannelParams(confusion=np.eye(C)), 7),
        ]
        with pytest.raises(ConfigError):
            build_views(dataset, specs, GRAPH, seed=1)


class TestCorruptViews:
    def _views(self, n=400, seed=41):
        dataset = _dataset(n=n, seed=seed)
        specs = [
            OperatorSpec("channel", ChannelParams(confusion=np.eye(C)), 0),
            OperatorSpec("channel", ChannelParams(confusion=np.eye(C)), 1),
        ]
        return build_views(dataset, specs, GRAPH, seed=seed)

    def test_rho_zero_bit_identical(self):
        views = self._views()
        out = corrupt_views(views, 0.0, seed=3)
        np.testing.assert_array_equal(out.views, views.views)

    def test_rho_one_uniform_leaves(self):
        views = self._views(n=2500)
        out = corrupt_views(views, 1.0, seed=7)
        flat = out.views.reshape(-1, GRAPH.num_nodes)
        assert np.all(flat.max(axis=1) == 1.0)
        counts = flat[:, list(GRAPH.leaf_ids)].sum(axis=0)
        n = flat.shape[0]
        sigma = np.sqrt(n * 0.25 * 0.75)
        assert np.all(np.abs(counts - n / 4) <= 4 * sigma)

    def test_partial_rho_change_fraction(self):
        views = self._views(n=5000)
        out = corrupt_views(views, 0.3, seed=11)
        changed = np.any(out.views != views.views, axis=2).mean()
        # a redraw matching the original one-hot leaves the view unchanged
        expected = 0.3 * (1.0 - 1.0 / C)
        n = views.views.shape[0] * views.views.shape[1]
        sigma = np.sqrt(expected * (1 - expected) / n)
        assert abs(changed - expected) <= 4 * sigma

    def test_deterministic(self):
        views = self._views()
        a = corrupt_views(views, 0.5, seed=13)
        b = corrupt_views(views, 0.5, seed=13)
        np.testing.assert_array_equal(a.views, b.views)

    @pytest.mark.parametrize("rho", [-0.01, 1.01])
    def test_rejects_bad_rho(self, rho):
        with pytest.raises(ConfigError):
            corrupt_views(self._views(n=5), rho, seed=1)


class TestViewSetValidation:
    def test_rejects_negative_mass(self):
        bad = np.zeros((1, 1, GRAPH.num_nodes))
        bad[0, 0, 0] = 1.5
        bad[0, 0, 1] = -0.5
        with pytest.raises(ConfigError):
            SupervisionViewSet(views=bad, leaf_ids=GRAPH.leaf_ids)

    def test_rejects_bad_sum(self):
        bad = np.full((1, 1, GRAPH.num_nodes), 0.5)
        with pytest.raises(ConfigError):
            SupervisionViewSet(views=bad, leaf_ids=GRAPH.leaf_ids)


class TestPersistence:
    def _views_and_specs(self):
        dataset = _dataset(n=12)
        specs = [
            OperatorSpec("channel", ChannelParams(confusion=uniform_flip(0.25)), 0),
            OperatorSpec(
                "cooccurrence",
                CooccurrenceParams(
                    rules=default_cooccurrence_rules(np.eye(C, 4)), eps_rule=0.3
                ),
                1,
            ),
        ]
        return build_views(dataset, specs, GRAPH, seed=2), specs

    def test_roundtrip(self, tmp_path):
        views, specs = self._views_and_specs()
        data = tmp_path / "views.wstv"
        sidecar = tmp_path / "views.json"
        save_views(data, sidecar, views, specs)
        loaded, loaded_specs = load_views(data, sidecar)
        np.testing.assert_array_equal(loaded.views, views.views)
        assert loaded.leaf_ids == views.leaf_ids
        assert [s.kind for s in loaded_specs] == [s.kind for s in specs]

    def test_bytes_deterministic(self):
        views, specs = self._views_and_specs()
        assert views_to_bytes(views) == views_to_bytes(views)
        assert views_sidecar_json(views, specs) == views_sidecar_json(views, specs)

    def test_rejects_bad_magic(self):
        views, specs = self._views_and_specs()
        blob = b"XXXX" + views_to_bytes(views)[4:]
        with pytest.raises(ConfigError):
            views_from_bytes(blob, views_sidecar_json(views, specs))

    def test_rejects_bad_version(self):
        views, specs = self._views_and_specs()
        blob = bytearray(views_to_bytes(views))
        blob[4] = 99
        with pytest.raises(ConfigError):
            views_from_bytes(bytes(blob), views_sidecar_json(views, specs))

    def test_rejects_truncated_payload(self):
        views, specs = self._views_and_specs()
        blob = views_to_bytes(views)[:-8]
        with pytest.raises(ConfigError):
            views_from_bytes(blob, views_sidecar_json(views, specs))


class TestOperatorSpecValidation:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ConfigError):
            OperatorSpec("votes", ChannelParams(confusion=np.eye(C)), 0)

    def test_rejects_kind_params_mismatch(self):
        with pytest.raises(ConfigError):
            OperatorSpec("cooccurrence", ChannelParams(confusion=np.eye(C)), 0)

    def test_rejects_bad_alpha(self):
        with pytest.raises(ConfigError):
            OntologyPropParams(alpha=1.0, base=ChannelParams(confusion=np.eye(C)))

    def test_eps_rule_accepts_one(self):
        rules = default_cooccurrence_rules(np.eye(C, 4))
        CooccurrenceParams(rules=rules, eps_rule=1.0)

    def test_rejects_eps_rule_zero(self):
        rules = default_cooccurrence_rules(np.eye(C, 4))
        with pytest.raises(ConfigError):
            CooccurrenceParams(rules=rules, eps_rule=0.0)
