import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm
from sklearn.feature_selection import mutual_info_classif
from sklearn.linear_model import LogisticRegression

from fedanon.anonymizer import Anonymizer, ModelConfig
from fedanon.data import ChannelStats, SegmentSet, SignalSpec, generate_synthetic_population, segment_population, \
    standardize, train_test_split
from fedanon.errors import DegenerateLabels, EmptySet, SingleClassData
from fedanon.evaluation import (CNNConfig, classification_metrics, curve_csv, load_inference_model, mutual_information,
                                pca_fit, pca_project, privacy_utility_curve, save_inference_model, score,
                                train_inference_cnn, write_curve)
from fedanon.experiment import planted_schema

from oracles import macro_f1, plugin_mi

FAST = CNNConfig(conv_channels=(8, 8, 8, 8), dense=(32, 16), epochs=8)


def seg_set(x, public, private=None):
    n = len(x)
    private = np.zeros((n, 1), int) if private is None else np.asarray(private).reshape(n, -1)
    return SegmentSet(x, public, private, np.full(n, "c", dtype=object), np.arange(n))


def two_class_signals(n, separable, seed):
    """Two channels of 16 samples; class 1 carries a shifted mean when ``separable``."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 32)) + (2.0 * y[:, None] if separable else 0.0)
    return seg_set(x, y)


@pytest.fixture(scope="module")
def planted():
    sch = planted_schema()
    recs = generate_synthetic_population(4, sch, SignalSpec(segments_per_client=200), np.random.default_rng(0))
    train, test = train_test_split(segment_population(recs, sch), np.random.default_rng(0))
    stats = ChannelStats.fit(train, 2)
    train, test = standardize(train, stats), standardize(test, stats)
    desired = train_inference_cnn(train, "public", 4, 2, seed=0, config=FAST)
    intrusive = train_inference_cnn(train, 0, 2, 2, seed=0, config=FAST)
    return sch, train, test, desired, intrusive


# -- inference CNNs ---------------------------------------------------------------

class TestInferenceCNN:
    def test_shuffled_labels_chance(self):
        data = two_class_signals(1500, False, 0)
        clf = train_inference_cnn(data[:500], "public", 2, 2, seed=0, config=FAST)
        assert abs(score(clf, data[500:]).accuracy - 0.5) <= 0.10

    def test_separable(self):
        data = two_class_signals(800, True, 1)
        # independent route: a linear model already separates the classes
        lr = LogisticRegression(max_iter=1000).fit(data.x[:600], data.public[:600])
        assert lr.score(data.x[600:], data.public[600:]) >= 0.99
        clf = train_inference_cnn(data[:600], "public", 2, 2, seed=0, config=CNNConfig(epochs=20))
        assert score(clf, data[600:]).accuracy >= 0.99
        assert clf.train_accuracy >= 0.99

    def test_deterministic(self):
        data = two_class_signals(200, True, 2)
        a = train_inference_cnn(data, "public", 2, 2, seed=4, config=FAST)
        b = train_inference_cnn(data, "public", 2, 2, seed=4, config=FAST)
        assert a.net.params.checksum() == b.net.params.checksum()

    def test_single_class(self):
        data = seg_set(np.zeros((10, 32)), np.zeros(10, int))
        with pytest.raises(SingleClassData):
            train_inference_cnn(data, "public", 2, 2, config=FAST)

    def test_architecture(self):
        from fedanon.evaluation import cnn_specs
        kinds = [s.kind for s in cnn_specs(6, 128, 2)]
        assert kinds.count("conv1d") == 4 and kinds.count("dense") == 3

    def test_persistence(self, planted, tmp_path):
        _, _, test, desired, _ = planted
        save_inference_model(desired, tmp_path / "d.cnn")
        back = load_inference_model(tmp_path / "d.cnn")
        np.testing.assert_array_equal(back.predict(test.x), desired.predict(test.x))
        assert back.target == "public" and back.n_classes == 4


# -- metrics ---------------------------------------------------------------------------

class TestScore:
    def test_perfect(self):
        data = seg_set(np.arange(8.0)[:, None], [0, 1, 2, 3] * 2)
        r = score(lambda x: data.public.copy(), data, "public", 4)
        assert r.accuracy == 1.0 and r.macro_f1 == 1.0 and r.baseline == 0.25

    def test_constant_predictor(self):
        data = seg_set(np.zeros((10, 1)), [0, 1] * 5)
        r = score(lambda x: np.zeros(len(x), int), data, "public", 2)
        assert r.accuracy == 0.5
        assert r.macro_f1 == pytest.approx(1 / 3)
        assert r.macro_f1 == pytest.approx(macro_f1(data.public, np.zeros(10, int)))
        assert r.per_class == {0: 1.0, 1: 0.0}

    @given(st.lists(st.integers(0, 3), min_size=2, max_size=60), st.integers(0, 1000))
    def test_matches_oracle_and_permutation_invariant(self, labels, seed):
        rng = np.random.default_rng(seed)
        y = np.array(labels)
        pred = rng.integers(0, 4, len(y))
        acc, f1, per = classification_metrics(y, pred)
        assert f1 == pytest.approx(macro_f1(y, pred))
        perm = rng.permutation(len(y))
        acc2, f12, per2 = classification_metrics(y[perm], pred[perm])
        assert (acc, f1, per) == (acc2, f12, per2)
        assert all(0.0 <= v <= 1.0 for v in per.values())

    def test_symmetric_confusion_f1_equals_accuracy(self):
        # balanced binary, 3 errors each way
        y = np.array([0] * 10 + [1] * 10)
        pred = y.copy()
        pred[:3], pred[10:13] = 1, 0
        acc, f1, _ = classification_metrics(y, pred)
        assert f1 == pytest.approx(acc)

    def test_empty(self):
        with pytest.raises(EmptySet):
            score(lambda x: x, seg_set(np.zeros((0, 1)), np.zeros(0, int)), "public", 2)

    def test_report_json(self, planted):
        _, _, test, desired, _ = planted
        r = score(desired, test, config={"k": 1})
        d = r.to_dict()
        assert d["baseline"] == 0.25 and d["config"] == {"k": 1} and d["target"] == "public"


# -- PCA --------------------------------------------------------------------------

class TestPCA:
    def test_exact_rank_reconstruction(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((50, 3)) @ rng.standard_normal((3, 10)) + 5
        pca = pca_fit(x, 3)
        np.testing.assert_allclose(pca.inverse_transform(pca.transform(x)), x, atol=1e-9)

    def test_axis_aligned(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2000, 3)) * np.array([1.0, 5.0, 2.5])
        pca = pca_fit(x, 3)
        np.testing.assert_allclose(np.abs(pca.components), np.eye(3)[[1, 2, 0]], atol=0.05)

    @settings(max_examples=20)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_ratios_match_covariance_oracle(self, seed, k):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((40, 8)) @ rng.standard_normal((8, 8))
        pca = pca_fit(x, k)
        eig = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
        np.testing.assert_allclose(pca.explained_variance, eig[:k], rtol=1e-8, atol=1e-10)
        r = pca.explained_variance_ratio
        assert r.sum() <= 1 + 1e-12 and np.all(np.diff(r) <= 1e-12)

    def test_projection_centered(self):
        x = np.random.default_rng(2).standard_normal((100, 6)) + 3
        proj, _ = pca_project(x, 4)
        np.testing.assert_allclose(proj.mean(0), 0, atol=1e-10)

    def test_rank_deficient_keeps_available(self):
        x = np.outer(np.arange(30.0), np.ones(5))
        assert pca_fit(x, 4).components.shape[0] == 1


# -- mutual information -------------------------------------------------------------

def two_cluster_mi(sep):
    """Analytic MI (nats) between a balanced binary label and N(+-sep/2, 1)."""
    def mix(c):
        return 0.5 * (norm.pdf(c, -sep / 2) + norm.pdf(c, sep / 2))
    h_mix = quad(lambda c: -mix(c) * math.log(max(mix(c), 1e-300)), -sep - 10, sep + 10, limit=200)[0]
    return h_mix - 0.5 * math.log(2 * math.pi * math.e)


class TestMI:
    def test_independent(self):
        rng = np.random.default_rng(0)
        r = mutual_information(rng.standard_normal((2000, 3)), rng.integers(0, 2, 2000), rng=rng)
        assert np.all(r.per_component <= 0.02)

    def test_separated_clusters(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 2, 2000)
        c = y * 20.0 + rng.standard_normal(2000)
        est = mutual_information(c, y).mean
        # plug-in oracle on the discretized joint: the sign of the centred value recovers the label
        assert plugin_mi((c > 10).astype(int), y) == pytest.approx(math.log(2), abs=1e-3)
        assert est == pytest.approx(math.log(2), abs=0.03)

    def test_agrees_with_sklearn(self):
        rng = np.random.default_rng(2)
        y = rng.integers(0, 3, 1500)
        comps = np.column_stack([y + rng.standard_normal(1500), rng.standard_normal(1500),
                                 0.5 * y + rng.standard_normal(1500)])
        ours = mutual_information(comps, y).per_component
        ref = mutual_info_classif(comps, y, discrete_features=False, n_neighbors=3, random_state=0)
        np.testing.assert_allclose(ours, ref, atol=0.03)

    def test_consistency_with_more_data(self):
        truth = two_cluster_mi(2.0)
        errs = {}
        for n in (300, 600):
            vals = []
            for seed in range(20):
                rng = np.random.default_rng(seed)
                y = rng.integers(0, 2, n)
                vals.append(mutual_information(rng.standard_normal(n) + 2.0 * y - 1.0, y).mean)
            errs[n] = abs(np.mean(vals) - truth) + np.std(vals)
        assert errs[600] <= errs[300]

    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        r = mutual_information(rng.standard_normal((60, 2)), rng.integers(0, 2, 60), rng=rng)
        assert np.all(r.per_component >= 0)

    def test_degenerate(self):
        with pytest.raises(DegenerateLabels):
            mutual_information(np.zeros((5, 1)), np.ones(5))


# -- curves -----------------------------------------------------------------------------

class TestCurve:
    def test_rows_ordered_and_untrained_is_poor(self, planted, tmp_path):
        sch, _, test, desired, intrusive = planted
        cfg = ModelConfig(2, 32, 4, (2,))
        snaps = [(2, Anonymizer(cfg, seed=2)), (0, Anonymizer(cfg, seed=0)), (1, Anonymizer(cfg, seed=1))]
        rows = privacy_utility_curve(snaps, test, desired, intrusive, seed=0, n_components=5)
        assert [r.epoch for r in rows] == [0, 1, 2]
        raw = score(desired, test).accuracy
        assert raw >= 0.9
        assert rows[0].desired_acc <= raw - 0.4
        write_curve(rows, tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "epoch,desired_acc,intrusive_acc,mi_public,mi_private" and len(lines) == 4
        assert curve_csv(rows) == (tmp_path / "c.csv").read_text()
