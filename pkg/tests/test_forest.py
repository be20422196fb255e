import pytest
param = pytest.mark.parametrize

import numpy as np

def separable(num_per_class = 20, seed = 0):
    rng = np.random.default_rng(seed)

    labels = np.repeat(np.arange(4), num_per_class)
    features = labels[:, None] * 10. + rng.uniform(0., 1., size = (len(labels), 4))
    return features, labels

def test_balanced_class_weights():
    from metastasis_ewc_pytorch.forest import balanced_class_weights

    weights = balanced_class_weights(np.array([0, 0, 0, 1]), 4)

    assert weights.tolist() == pytest.approx([4 / 6, 2., 0., 0.])

def test_gini():
    from metastasis_ewc_pytorch.forest import gini

    assert gini(np.array([5., 0.])) == 0.
    assert gini(np.array([2., 2.])) == pytest.approx(0.5)

def test_perfectly_separable():
    from metastasis_ewc_pytorch.forest import forest_train, forest_predict, forest_evaluate
    from metastasis_ewc_pytorch.postproc import MetastasisClass

    features, labels = separable()
    model = forest_train(features, labels, seed = 0, num_trees = 25)

    assert forest_predict(model, features) == [MetastasisClass(int(label)) for label in labels]

    test_features, test_labels = separable(seed = 1)
    report = forest_evaluate(model, test_features, test_labels)

    assert report.accuracy == 1.
    assert np.array_equal(report.confusion, np.diag(np.full(4, 20)))

def test_forest_is_deterministic():
    from metastasis_ewc_pytorch.forest import forest_train

    rng = np.random.default_rng(3)
    features = rng.normal(size = (60, 4))
    labels = rng.integers(0, 4, size = 60)

    a = forest_train(features, labels, seed = 11, num_trees = 10)
    b = forest_train(features, labels, seed = 11, num_trees = 10)

    queries = rng.normal(size = (30, 4))
    assert np.array_equal(a.votes(queries), b.votes(queries))

def test_single_class():
    from metastasis_ewc_pytorch.forest import forest_train, forest_predict
    from metastasis_ewc_pytorch.postproc import MetastasisClass

    features = np.random.default_rng(0).normal(size = (10, 4))
    model = forest_train(features, np.full(10, 2), seed = 0, num_trees = 5)

    assert set(forest_predict(model, features)) == {MetastasisClass.micro}

def test_forest_round_trip(tmp_path):
    from metastasis_ewc_pytorch.forest import forest_train, save_forest, load_forest
    from metastasis_ewc_pytorch.errors import FormatError

    features, labels = separable(num_per_class = 5)
    model = forest_train(features, labels, seed = 0, num_trees = 4)

    save_forest(model, tmp_path / 'forest.rfc')
    loaded = load_forest(tmp_path / 'forest.rfc')

    assert len(loaded.trees) == 4 and loaded.num_features == 4
    assert np.array_equal(loaded.class_weights, model.class_weights)
    assert np.array_equal(loaded.votes(features), model.votes(features))

    data = (tmp_path / 'forest.rfc').read_bytes()
    (tmp_path / 'bad.rfc').write_bytes(b'XXXX' + data[4:])

    with pytest.raises(FormatError):
        load_forest(tmp_path / 'bad.rfc')
