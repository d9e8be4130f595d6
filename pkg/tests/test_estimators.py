import numpy as np
import pytest
from sklearn.base import clone

from forgelab.estimators import ErrorMatrixForger, FcnClassifier, PerturbationForger, check_batch
from forgelab.nn import FcnParams, grad_batch, l2_distance


@pytest.fixture
def blobs(rng):
    X = np.vstack([rng.normal(0.3, 0.05, (40, 6)), rng.normal(0.7, 0.05, (40, 6))])
    y = np.repeat(["a", "b"], 40)
    return X, y


def test_check_batch():
    b = check_batch(np.zeros((3, 2)), [0, 2, 1], 3)
    assert b.X.shape == (2, 3) and b.Y[:, 1].tolist() == [0, 0, 1]
    with pytest.raises(ValueError):
        check_batch(np.zeros((3, 2)), [0, 1, 1])
    with pytest.raises(ValueError):
        check_batch(np.zeros((3, 2)), np.zeros((2, 2)))


def test_classifier_params_and_clone():
    est = FcnClassifier(hidden_layer_sizes=(4,), lr=0.1)
    assert est.get_params()["lr"] == 0.1
    c = clone(est).set_params(steps=3)
    assert c.steps == 3 and est.steps == 200


def test_classifier_fit_predict(blobs):
    X, y = blobs
    est = FcnClassifier(hidden_layer_sizes=(8,), lr=0.5, steps=300, batch_size=16).fit(X, y)
    assert est.trace_.steps == 300
    assert est.score(X, y) > 0.9
    proba = est.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(est.predict(X)) <= {"a", "b"}


def test_unfitted():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        FcnClassifier().predict(np.zeros((1, 2)))


def test_perturbation_forger(rng, blobs):
    X, y = blobs
    clf = FcnClassifier(hidden_layer_sizes=(2,), steps=5).fit(X, y)
    batch_X, codes = X[:20], np.searchsorted(clf.classes_, y[:20])
    f = PerturbationForger(clf, random_state=3).fit(batch_X, codes)
    forged = f.transform(batch_X)
    assert forged.shape == batch_X.shape and not np.allclose(forged, batch_X)
    assert f.approx_error_ <= 1e-8
    with pytest.raises(ValueError):
        f.transform(batch_X + 1)
    with pytest.raises(TypeError):
        PerturbationForger("nope").fit(batch_X, codes)


def test_error_matrix_forger(rng):
    W = rng.uniform(-1, 1, (10, 3))
    X = rng.uniform(size=(8, 10))
    y = rng.integers(0, 3, 8)
    f = ErrorMatrixForger(W).fit(X, y)
    assert f.approx_error_ <= 1e-8
    assert f.transform(X).shape == X.shape and f.forged_Y_.shape == (8, 3)
    model = FcnParams([W], [np.zeros(3)], "identity")
    orig = check_batch(X, y, 3)
    forged = check_batch(f.forged_X_, f.forged_Y_)
    assert l2_distance(grad_batch(model, orig).d_weights[0], grad_batch(model, forged).d_weights[0]) <= 1e-8
    with pytest.raises(ValueError):
        f.transform(X[:3])
