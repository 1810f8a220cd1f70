import numpy as np
import pytest

from stvlp.svm import LinearSVM, kfold_indices


# --- fold assignment ----------------------------------------------------------


def test_kfold_partitions():
    for n, folds in ((10, 5), (23, 4), (7, 7)):
        splits = kfold_indices(n, folds, seed=3)
        assert len(splits) == folds
        all_test = np.concatenate([test for _, test in splits])
        assert sorted(all_test.tolist()) == list(range(n))
        for train, test in splits:
            assert set(train.tolist()).isdisjoint(test.tolist())
            assert len(train) + len(test) == n


def test_kfold_pure_function_of_seed():
    a = kfold_indices(20, 5, seed=9)
    b = kfold_indices(20, 5, seed=9)
    c = kfold_indices(20, 5, seed=10)
    for (ta, sa), (tb, sb) in zip(a, b):
        np.testing.assert_array_equal(ta, tb)
        np.testing.assert_array_equal(sa, sb)
    assert any(
        not np.array_equal(sa, sc) for (_, sa), (_, sc) in zip(a, c)
    )


def test_kfold_validation():
    with pytest.raises(ValueError, match="folds"):
        kfold_indices(5, 1, seed=0)
    with pytest.raises(ValueError, match="folds"):
        kfold_indices(3, 4, seed=0)


# --- classifier ----------------------------------------------------------------


def _blobs(n_per_class, centers, spread, seed):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for cls, center in enumerate(centers):
        xs.append(center + spread * rng.standard_normal((n_per_class, len(center))))
        ys.append(np.full(n_per_class, cls))
    return np.concatenate(xs), np.concatenate(ys)


def test_separable_two_class():
    x, y = _blobs(30, [np.array([2.0, 2.0]), np.array([-2.0, -2.0])], 0.3, seed=0)
    model = LinearSVM().fit(x, y)
    assert (model.predict(x) == y).mean() == 1.0


def test_separable_three_class():
    centers = [np.array([4.0, 0.0]), np.array([-4.0, 4.0]), np.array([-4.0, -4.0])]
    x, y = _blobs(25, centers, 0.4, seed=1)
    model = LinearSVM().fit(x, y)
    assert (model.predict(x) == y).mean() == 1.0


def test_one_hot_features_are_trivially_separable():
    y = np.array([0, 1, 2] * 10)
    x = np.eye(3)[y]
    model = LinearSVM().fit(x, y)
    assert (model.predict(x) == y).all()


def test_bias_handles_offset_classes():
    # 1-d data on one side of zero: unreachable without the bias column
    x = np.array([[1.0], [2.0], [3.0], [7.0], [8.0], [9.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    model = LinearSVM().fit(x, y)
    assert (model.predict(x) == y).all()


def test_fit_is_deterministic():
    x, y = _blobs(20, [np.array([1.0, 0.0]), np.array([-1.0, 0.0])], 1.0, seed=2)
    a = LinearSVM().fit(x, y).weights
    b = LinearSVM().fit(x, y).weights
    np.testing.assert_array_equal(a, b)


def test_weights_stay_inside_projection_ball():
    x, y = _blobs(15, [np.array([0.5, 0.5]), np.array([-0.5, -0.5])], 2.0, seed=3)
    model = LinearSVM(c=1.0).fit(x, y)
    lam = 1.0 / (1.0 * len(y))
    radius = 1.0 / np.sqrt(lam)
    for w in model.weights:
        assert np.linalg.norm(w) <= radius + 1e-9


def test_decision_shape_and_tie_break():
    x, y = _blobs(10, [np.array([3.0, 0.0]), np.array([-3.0, 0.0])], 0.2, seed=4)
    model = LinearSVM().fit(x, y)
    scores = model.decision(x)
    assert scores.shape == (20, 2)
    # argmax resolves exact ties to the lowest class index
    tied = np.zeros((1, 2))
    model.weights = np.zeros_like(model.weights)
    assert model.predict(tied)[0] == 0


def test_predict_before_fit_raises():
    with pytest.raises(RuntimeError, match="fit"):
        LinearSVM().predict(np.zeros((1, 2)))
