import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from conftest import central_diff, rel_err, unit_rows
from spa.errors import DimensionMismatch, NormViolation
from spa.fewshot import (
    FewShotClassifier,
    TrainConfig,
    ce_loss_and_grads,
    init_classifier,
    load_classifier,
    predict_proba,
    save_classifier,
    train_fewshot,
)


def _instance(seed=0, k=5, d=8, n=4):
    rng = np.random.default_rng(seed)
    text = unit_rows(rng, k, d)
    clf = FewShotClassifier(w=rng.standard_normal((k, d)), alpha=rng.standard_normal(k), text=text)
    f = unit_rows(rng, n, d)
    y = rng.integers(0, k, n)
    return clf, f, y


def _ref_proba(w, alpha, t, f):
    # plain loop evaluation, no shared helpers
    out = np.zeros((f.shape[0], w.shape[0]))
    for i in range(f.shape[0]):
        z = [float(f[i] @ (w[j] + alpha[j] * t[j])) for j in range(w.shape[0])]
        m = max(z)
        e = [math.exp(v - m) for v in z]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def test_init_state():
    rng = np.random.default_rng(0)
    t = unit_rows(rng, 7, 512)
    clf = init_classifier(t, seed=0)
    assert clf.w.shape == (7, 512) and not clf.w.any()
    np.testing.assert_array_equal(clf.alpha, np.ones(7))
    again = init_classifier(t, seed=0)
    np.testing.assert_array_equal(again.w, clf.w)
    np.testing.assert_array_equal(again.alpha, clf.alpha)


def test_init_rejects_non_unit():
    with pytest.raises(NormViolation):
        init_classifier(np.array([[1.0, 1.0], [0.0, 1.0]]))
    assert issubclass(NormViolation, DimensionMismatch)


def test_text_is_frozen():
    clf, _, _ = _instance()
    with pytest.raises(ValueError):
        clf.text[0, 0] = 3.0


def test_predict_proba_two_phase_example():
    clf = FewShotClassifier(w=np.array([[1.0, 0.0], [0.0, 1.0]]), alpha=np.zeros(2), text=np.eye(2))
    p = predict_proba(clf, np.array([[1.0, 0.0]]))
    e = math.e
    np.testing.assert_allclose(p[0], [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    assert abs(p[0, 0] - 0.7311) < 1e-4


def test_uniform_when_blend_is_zero(rng):
    t = unit_rows(rng, 4, 6)
    clf = FewShotClassifier(w=np.zeros((4, 6)), alpha=np.zeros(4), text=t)
    np.testing.assert_allclose(predict_proba(clf, rng.standard_normal((9, 6))), 0.25, atol=1e-15)


def test_predict_proba_matches_loop_oracle():
    clf, f, _ = _instance(0, k=5, d=8, n=4)
    p = predict_proba(clf, f)
    np.testing.assert_allclose(p, _ref_proba(clf.w, clf.alpha, clf.text, f), atol=1e-12)
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-9


def test_predict_proba_dimension_check():
    clf, _, _ = _instance()
    with pytest.raises(DimensionMismatch):
        predict_proba(clf, np.ones((3, 7)))


def test_loss_perfect_and_uniform():
    t = np.eye(3)
    clf = FewShotClassifier(w=1e3 * np.eye(3), alpha=np.zeros(3), text=t)
    loss, _, _ = ce_loss_and_grads(clf, np.eye(3), [0, 1, 2])
    assert loss <= 1e-6
    rng = np.random.default_rng(1)
    t7 = unit_rows(rng, 7, 10)
    uni = FewShotClassifier(w=np.zeros((7, 10)), alpha=np.zeros(7), text=t7)
    loss, _, _ = ce_loss_and_grads(uni, unit_rows(rng, 5, 10), [0, 1, 2, 3, 4])
    assert abs(loss - math.log(7)) < 1e-12
    assert abs(loss - 1.9459) < 1e-4


def test_loss_is_clamped():
    clf = FewShotClassifier(w=np.array([[1e4, 0.0], [0.0, 0.0]]), alpha=np.zeros(2), text=np.eye(2))
    loss, gw, ga = ce_loss_and_grads(clf, np.array([[1.0, 0.0]]), [1])
    assert abs(loss + math.log(1e-12)) < 1e-9
    assert np.isfinite(gw).all() and np.isfinite(ga).all()


def test_gradients_match_finite_differences():
    clf, f, y = _instance(0, k=5, d=8, n=6)
    _, gw, ga = ce_loss_and_grads(clf, f, y)
    w, a = clf.w.copy(), clf.alpha.copy()

    def loss():
        return ce_loss_and_grads(FewShotClassifier(w=w, alpha=a, text=clf.text), f, y)[0]

    assert rel_err(gw, central_diff(loss, w, 1e-5)) <= 1e-4
    assert rel_err(ga, central_diff(loss, a, 1e-5)) <= 1e-4


def test_zero_steps_is_identity():
    clf, f, y = _instance()
    res = train_fewshot(clf, f, y, TrainConfig(steps=0))
    np.testing.assert_array_equal(res.classifier.w, clf.w)
    np.testing.assert_array_equal(res.classifier.alpha, clf.alpha)
    assert res.losses == []


def test_default_lr():
    assert TrainConfig().lr == 0.01
    assert TrainConfig().steps == 500


def _separable_two_phase(seed=0, shots=16, d=16):
    rng = np.random.default_rng(seed)
    t = unit_rows(rng, 2, d)
    centers = unit_rows(rng, 2, d)
    y = np.repeat([0, 1], shots)
    f = centers[y] + 0.1 * rng.standard_normal((2 * shots, d))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    return t, f, y


def test_separable_set_fits_and_agrees_with_logistic_regression():
    t, f, y = _separable_two_phase()
    oracle = LogisticRegression(C=1e6, max_iter=5000).fit(f, y)
    assert oracle.score(f, y) == 1.0  # confirms separability independently
    res = train_fewshot(init_classifier(t), f, y, TrainConfig(steps=300, lr=0.01))
    assert len(res.losses) <= 300
    pred = np.argmax(predict_proba(res.classifier, f), axis=1)
    assert np.mean(pred == y) == 1.0
    np.testing.assert_array_equal(pred, oracle.predict(f))


def test_text_unchanged_by_training():
    t, f, y = _separable_two_phase(1)
    clf = init_classifier(t)
    before = clf.text.tobytes()
    res = train_fewshot(clf, f, y, TrainConfig(steps=50))
    assert res.classifier.text.tobytes() == before


def test_loss_non_increasing_small_lr():
    rng = np.random.default_rng(0)
    k, d, shots = 7, 32, 16
    t = unit_rows(rng, k, d)
    y = np.repeat(np.arange(k), shots)
    f = unit_rows(rng, k, d)[y] + 0.1 * rng.standard_normal((k * shots, d))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    res = train_fewshot(init_classifier(t), f, y, TrainConfig(lr=1e-3, steps=200, tol=0.0))
    assert np.all(np.diff(res.losses) <= 1e-15)


def test_zero_step_equals_zero_shot_text_classifier(rng):
    t = unit_rows(rng, 4, 9)
    f = unit_rows(rng, 10, 9)
    clf = train_fewshot(init_classifier(t), f, rng.integers(0, 4, 10), TrainConfig(steps=0)).classifier
    z = f @ t.T
    zs = np.exp(z - z.max(axis=1, keepdims=True))
    np.testing.assert_array_equal(predict_proba(clf, f), predict_proba(init_classifier(t), f))
    np.testing.assert_allclose(predict_proba(clf, f), zs / zs.sum(axis=1, keepdims=True), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_permutation_equivariance(seed, k):
    clf, f, y = _instance(seed, k=k, d=5, n=7)
    perm = np.random.default_rng(seed + 1).permutation(k)
    pclf = FewShotClassifier(w=clf.w[perm], alpha=clf.alpha[perm], text=clf.text[perm])
    np.testing.assert_allclose(predict_proba(pclf, f), predict_proba(clf, f)[:, perm], atol=1e-12)
    inv = np.argsort(perm)
    l1, gw1, ga1 = ce_loss_and_grads(clf, f, y)
    l2, gw2, ga2 = ce_loss_and_grads(pclf, f, inv[y])
    assert abs(l1 - l2) < 1e-12
    np.testing.assert_allclose(gw2, gw1[perm], atol=1e-12)
    np.testing.assert_allclose(ga2, ga1[perm], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_shared_shift_invariance(seed, lam):
    # a common vector c added to every blended prototype adds f.c to each logit of a frame
    clf, f, _ = _instance(seed, k=4, d=6, n=5)
    c = lam * unit_rows(np.random.default_rng(seed), 1, 6)[0]
    shifted = FewShotClassifier(w=clf.w + c, alpha=clf.alpha, text=clf.text)
    np.testing.assert_allclose(predict_proba(shifted, f), predict_proba(clf, f), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50))
def test_rows_sum_to_one(seed, scale):
    clf, f, _ = _instance(seed, k=6, d=4, n=8)
    p = predict_proba(FewShotClassifier(w=scale * clf.w, alpha=clf.alpha, text=clf.text), scale * f)
    assert np.all(p >= 0) and np.all(p <= 1)
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-6


def test_checkpoint_round_trip(tmp_path):
    clf, f, _ = _instance(3)
    save_classifier(tmp_path / "clf", clf)
    back = load_classifier(tmp_path / "clf")
    assert back.k == clf.k and back.d == clf.d
    np.testing.assert_array_equal(back.alpha, clf.alpha)
    np.testing.assert_allclose(back.w, clf.w, atol=1e-6)
    np.testing.assert_allclose(predict_proba(back, f), predict_proba(clf, f), atol=1e-5)
