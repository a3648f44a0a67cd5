import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from sklearn.base import clone

from vocodetect.dsp import CepstralFeatures, FeatureConfig
from vocodetect.exceptions import CompatibilityError, DataError, EmptyInputError, ShapeError
from vocodetect.gmm import (
    DetectorPair,
    DiagonalGMM,
    GmmDetector,
    GmmModel,
    TrainConfig,
    density_gradient,
    log_density,
    nll_and_grad,
    score,
    train_em,
    train_gd,
)


def random_model(rng, m=3, d=4, spread=1.0):
    w = rng.uniform(0.2, 1.0, m)
    return GmmModel(w / w.sum(), spread * rng.normal(size=(m, d)), rng.uniform(0.3, 2.0, (m, d)))


def naive_density(model, x):
    total = 0.0
    for w, mu, var in zip(model.weights, model.means, model.variances):
        comp = w
        for xd, md, vd in zip(x, mu, var):
            comp *= np.exp(-0.5 * (xd - md) ** 2 / vd) / np.sqrt(2 * np.pi * vd)
        total += comp
    return total


def two_clusters(rng, n=2000):
    return np.concatenate([rng.normal(-5, 0.5, (n, 1)), rng.normal(5, 0.5, (n, 1))])


class TestLogDensity:
    def test_standard_normal(self):
        model = GmmModel(np.array([1.0]), np.zeros((1, 1)), np.ones((1, 1)))
        assert abs(log_density(model, np.zeros(1)) - (-0.91894)) < 1e-5
        assert log_density(model, np.zeros(1)) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)

    def test_duplicate_components_collapse(self, rng):
        single = random_model(rng, m=1, d=3)
        double = GmmModel(np.array([0.5, 0.5]), np.repeat(single.means, 2, 0),
                          np.repeat(single.variances, 2, 0))
        x = rng.normal(size=(20, 3))
        np.testing.assert_allclose(log_density(double, x), log_density(single, x), atol=1e-12)

    def test_matches_naive_sum(self, rng):
        for _ in range(10):
            model = random_model(rng)
            for x in rng.normal(size=(10, 4)):
                naive = naive_density(model, x)
                assert log_density(model, x) == pytest.approx(np.log(naive), abs=1e-10)

    def test_never_minus_inf(self):
        model = GmmModel(np.array([1.0]), np.zeros((1, 2)), np.full((1, 2), 1e-3))
        assert np.isfinite(log_density(model, np.array([1e3, -1e3])))

    def test_permutation_invariant(self, rng):
        model = random_model(rng, m=4)
        perm = rng.permutation(4)
        other = GmmModel(model.weights[perm], model.means[perm], model.variances[perm])
        x = rng.normal(size=(15, 4))
        np.testing.assert_allclose(log_density(model, x), log_density(other, x), atol=1e-12)

    def test_integrates_to_one(self):
        model = GmmModel(np.array([0.3, 0.7]), np.array([[-1.0], [2.0]]), np.array([[0.5], [2.0]]))
        val, _ = quad(lambda t: np.exp(log_density(model, np.array([t]))), -1 - 10 * 1.5, 2 + 10 * 1.5,
                      limit=200)
        assert abs(val - 1.0) < 1e-3

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            log_density(random_model(rng), np.zeros(3))


def _params(rng, m=3, d=2):
    return {"logits": rng.normal(size=m), "means": rng.normal(size=(m, d)),
            "log_var": rng.normal(scale=0.3, size=(m, d))}


class TestGradients:
    def test_nll_gradient_finite_differences(self, rng):
        for _ in range(5):
            params = _params(rng)
            x = rng.normal(size=(25, 2))
            floor = np.full(2, 1e-3)
            _, grads = nll_and_grad(params, x, floor)
            h = 1e-6
            for key in params:
                flat = params[key].ravel()
                for i in range(flat.size):
                    plus = {k: v.copy() for k, v in params.items()}
                    minus = {k: v.copy() for k, v in params.items()}
                    plus[key].ravel()[i] += h
                    minus[key].ravel()[i] -= h
                    fd = (nll_and_grad(plus, x, floor)[0] - nll_and_grad(minus, x, floor)[0]) / (2 * h)
                    an = grads[key].ravel()[i]
                    assert abs(an - fd) <= 1e-5 * max(abs(fd), 1e-3)

    def test_density_gradient_finite_differences(self, rng):
        model = random_model(rng)
        x = rng.normal(size=(5, 4))
        g = density_gradient(model, x)
        h = 1e-6
        for n in range(5):
            for d in range(4):
                e = np.zeros(4)
                e[d] = h
                fd = (log_density(model, x[n] + e) - log_density(model, x[n] - e)) / (2 * h)
                assert abs(g[n, d] - fd) <= 1e-5 * max(abs(fd), 1e-3)


class TestTrainGd:
    def test_single_gaussian_moments(self, rng):
        x = rng.normal([2.0, -1.0], [0.5, 2.0], size=(4000, 2))
        model = train_gd(x, TrainConfig(components=1))
        np.testing.assert_allclose(model.means[0], x.mean(axis=0), rtol=0.05, atol=0.02)
        np.testing.assert_allclose(model.variances[0], x.var(axis=0), rtol=0.05)

    def test_two_clusters(self, rng):
        model = train_gd(two_clusters(rng), TrainConfig(components=2))
        np.testing.assert_allclose(np.sort(model.means[:, 0]), [-5, 5], atol=0.2)

    def test_deterministic(self, rng):
        x = two_clusters(rng, 300)
        a = train_gd(x, TrainConfig(components=3, seed=7))
        b = train_gd(x, TrainConfig(components=3, seed=7))
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())

    def test_too_few_frames(self, rng):
        with pytest.raises(DataError):
            train_gd(rng.normal(size=(5, 2)), TrainConfig(components=8))

    def test_variance_floor(self, rng):
        x = np.concatenate([np.zeros((200, 1)), rng.normal(size=(200, 1))])
        model = train_gd(x, TrainConfig(components=2))
        assert np.all(model.variances >= 1e-4 * x.var(axis=0))


class TestTrainEm:
    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_likelihood(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(300, 3)) * rng.uniform(0.5, 3, 3) + rng.integers(-3, 4, (300, 1))
        _, hist = train_em(x, 4, iterations=50, seed=seed, return_history=True)
        diffs = np.diff(hist)
        assert np.all(diffs >= -1e-8 * np.abs(hist[1:]))

    def test_two_clusters(self, rng):
        model = train_em(two_clusters(rng), 2)
        np.testing.assert_allclose(np.sort(model.means[:, 0]), [-5, 5], atol=0.1)

    def test_gd_close_to_em(self, rng):
        x = two_clusters(rng)
        ll_gd = log_density(train_gd(x, TrainConfig(components=2)), x).mean()
        ll_em = log_density(train_em(x, 2), x).mean()
        assert abs(ll_gd - ll_em) <= 0.02 * abs(ll_em)


def _pair(rng, d=3):
    return DetectorPair(random_model(rng, 2, d), random_model(rng, 2, d))


class TestScore:
    def test_same_models_zero(self, rng):
        model = random_model(rng, 2, 3)
        pair = DetectorPair(model, model)
        assert score(pair, rng.normal(size=(10, 3))) == 0.0

    def test_swap_negates(self, rng):
        pair = _pair(rng)
        x = rng.normal(size=(10, 3))
        swapped = DetectorPair(pair.fake_model, pair.real_model)
        assert score(swapped, x) == pytest.approx(-score(pair, x), abs=1e-12)

    def test_duplicating_frames(self, rng):
        pair = _pair(rng)
        x = rng.normal(size=(10, 3))
        assert score(pair, np.vstack([x, x])) == pytest.approx(score(pair, x), abs=1e-12)

    def test_samples_from_real_score_positive(self):
        rng = np.random.default_rng(5)
        real = GmmModel(np.array([1.0]), np.zeros((1, 4)), np.ones((1, 4)))
        fake = GmmModel(np.array([1.0]), np.full((1, 4), 3.0), np.ones((1, 4)))
        pair = DetectorPair(real, fake)
        hits = sum(score(pair, rng.normal(size=(20, 4))) > 0 for _ in range(1000))
        assert hits >= 990

    def test_empty(self, rng):
        with pytest.raises(EmptyInputError):
            score(_pair(rng), np.zeros((0, 3)))

    def test_fingerprint_mismatch(self, rng):
        cfg = FeatureConfig(n_ceps=1, n_filters=4)
        pair = DetectorPair(random_model(rng, 2, 3), random_model(rng, 2, 3), cfg.fingerprint())
        feats = CepstralFeatures(*(rng.normal(size=(5, 1)) for _ in range(3)), 2, "lfcc",
                                 FeatureConfig(kind="mfcc", n_ceps=1, n_filters=4))
        with pytest.raises(CompatibilityError):
            score(pair, feats)
        feats.config = cfg
        assert np.isfinite(score(pair, feats))

    def test_model_json_round_trip(self, rng, tmp_path):
        pair = _pair(rng)
        pair.fingerprint = FeatureConfig().fingerprint()
        pair.save(tmp_path / "m.json", {"seed": 1})
        back = DetectorPair.load(tmp_path / "m.json")
        for a, b in ((pair.real_model, back.real_model), (pair.fake_model, back.fake_model)):
            np.testing.assert_array_equal(a.means, b.means)
            np.testing.assert_array_equal(a.variances, b.variances)
            np.testing.assert_array_equal(a.weights, b.weights)
        assert back.fingerprint == pair.fingerprint


class TestEstimators:
    def test_diagonal_gmm(self, rng):
        x = two_clusters(rng, 500)
        est = DiagonalGMM(n_components=2, solver="em", max_iter=30)
        assert clone(est).get_params()["solver"] == "em"
        est.fit(x)
        assert est.score(x) == pytest.approx(np.mean(est.score_samples(x)))
        assert est.score(x) > -2.0

    def test_detector(self, rng):
        real = [rng.normal(0, 1, (40, 2)) for _ in range(10)]
        fake = [rng.normal(2, 1, (40, 2)) for _ in range(10)]
        det = GmmDetector(n_components=2).fit(real + fake, [1] * 10 + [0] * 10)
        test = [rng.normal(0, 1, (40, 2)), rng.normal(2, 1, (40, 2))]
        assert det.predict(test).tolist() == [1, 0]
        assert det.score(test, [1, 0]) == 1.0

    def test_detector_feature_width_checked(self, rng):
        det = GmmDetector(n_components=1).fit([rng.normal(size=(30, 2))] * 2, [1, 0])
        with pytest.raises(ShapeError):
            det.decision_function([rng.normal(size=(5, 3))])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_log_density_permutation_property(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, m=3, d=2, spread=3.0)
    perm = rng.permutation(3)
    other = GmmModel(model.weights[perm], model.means[perm], model.variances[perm])
    x = rng.normal(scale=5, size=(8, 2))
    np.testing.assert_allclose(log_density(model, x), log_density(other, x), rtol=1e-12, atol=1e-12)


def test_pipeline_with_extractor():
    from sklearn.pipeline import make_pipeline

    from vocodetect.audio_io import synth_signal
    from vocodetect.dsp import CepstralExtractor

    clips = [synth_signal("sine", 0.3, freq=200 + 40 * i) for i in range(4)]
    clips += [synth_signal("white_noise", 0.3, seed=i) for i in range(4)]
    labels = [1] * 4 + [0] * 4
    clf = make_pipeline(CepstralExtractor(n_filters=20, n_ceps=8), GmmDetector(n_components=2))
    clf.fit(clips, labels)
    test = [synth_signal("sine", 0.3, freq=330), synth_signal("white_noise", 0.3, seed=9)]
    assert clf.predict(test).tolist() == [1, 0]
    assert clone(clf).get_params()["gmmdetector__n_components"] == 2
