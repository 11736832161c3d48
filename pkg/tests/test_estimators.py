import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from alseg.estimators import (
    ContrastivePretrainer,
    CoreSetSelector,
    EntropySelector,
    RandomSelector,
    RarenessAwareSelector,
    SegmentationNet,
)
from alseg.net import image_embedding, predict
from alseg.rng import Rng

FAST = dict(epochs=4, batch_size=8, lr_drop_epoch=2)


@pytest.fixture(scope="module")
def xy(request):
    ds = request.getfixturevalue("small_dataset")
    idx = np.asarray(ds.train_indices[:16], dtype=np.intp)
    return ds.images[idx], ds.masks[idx].astype(np.int64), ds


def test_fit_predict_shapes(xy):
    X, y, _ = xy
    net = SegmentationNet(seed=1, **FAST).fit(X, y)
    proba = net.predict_proba(X[:3])
    assert proba.shape == (3, 32, 32, net.n_classes_)
    assert np.abs(proba.sum(-1) - 1.0).max() < 1e-5
    pred = net.predict(X[:3])
    assert pred.shape == (3, 32, 32)
    assert pred.max() < net.n_classes_


def test_fit_infers_classes_or_accepts_explicit(xy):
    X, y, _ = xy
    net = SegmentationNet(seed=0, **FAST).fit(X, y)
    assert net.n_classes_ == int(y.max()) + 1
    net5 = SegmentationNet(seed=0, n_classes=5, **FAST).fit(X, y)
    assert net5.n_classes_ == 5
    assert net5.predict_proba(X[:1]).shape[-1] == 5


def test_predict_matches_functional_core(xy):
    X, y, _ = xy
    net = SegmentationNet(seed=2, **FAST).fit(X, y)
    assert np.array_equal(net.predict_proba(X[:1])[0], predict(net.params_, X[0]))
    assert np.array_equal(net.transform(X[:1])[0], image_embedding(net.params_, X[0]))


def test_score_is_miou(xy):
    X, y, _ = xy
    net = SegmentationNet(seed=3, **FAST).fit(X, y)
    s = net.score(X, y)
    assert 0.0 <= s <= 1.0


def test_unfitted_raises(xy):
    X, y, _ = xy
    with pytest.raises(NotFittedError):
        SegmentationNet().predict(X)
    with pytest.raises(NotFittedError):
        ContrastivePretrainer().transform(X)


def test_sklearn_clone_and_params_roundtrip():
    net = SegmentationNet(enc1_channels=4, learning_rate=2e-3, seed=9)
    cloned = clone(net)
    assert cloned.get_params() == net.get_params()
    cloned.set_params(epochs=7)
    assert cloned.epochs == 7 and net.epochs == 50


def test_fit_is_deterministic(xy):
    X, y, _ = xy
    a = SegmentationNet(seed=5, **FAST).fit(X, y)
    b = SegmentationNet(seed=5, **FAST).fit(X, y)
    assert a.loss_history_ == b.loss_history_
    for (_, p), (_, q) in zip(a.params_.groups(), b.params_.groups()):
        assert np.array_equal(p, q)


def test_init_weights_hyperparameter(xy):
    X, y, _ = xy
    base = SegmentationNet(seed=6, **FAST).fit(X, y)
    warm = SegmentationNet(seed=6, init_weights=base.params_, **FAST).fit(X, y)
    assert warm.n_classes_ == base.n_classes_
    # warm start trains from the given weights, so results differ from cold
    assert not np.array_equal(warm.params_.enc1_w, base.params_.enc1_w)


def test_validation_rejects_bad_inputs(xy):
    X, y, _ = xy
    with pytest.raises(ValueError):
        SegmentationNet(**FAST).fit(X[:, :31, :, :], y[:, :31, :])
    with pytest.raises(ValueError):
        SegmentationNet(**FAST).fit(X, y[:4])
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        SegmentationNet(**FAST).fit(bad, y)


def test_pretrainer_fit_transform_and_transfer(xy):
    X, y, ds = xy
    pre = ContrastivePretrainer(epochs=2, batch_size=8, seed=4).fit(ds.images[:24])
    assert pre.encoder_params_.head_w is None
    emb = pre.transform(X[:5])
    assert emb.shape == (5, 8)
    init = pre.segmentation_init(n_classes=4, seed=1)
    assert init.head_w.shape == (8, 4)
    assert np.array_equal(init.dec_w, pre.encoder_params_.dec_w)
    net = SegmentationNet(seed=1, init_weights=init, **FAST).fit(X, y)
    assert hasattr(net, "params_")


def test_pretrainer_accepts_encoder_as_init_weights(xy):
    X, y, ds = xy
    pre = ContrastivePretrainer(epochs=1, batch_size=8, seed=4).fit(ds.images[:24])
    net = SegmentationNet(seed=2, init_weights=pre.encoder_params_, **FAST).fit(X, y)
    assert np.array_equal(
        net.params_.enc1_w.shape, pre.encoder_params_.enc1_w.shape
    )


def test_selectors_common_interface(xy):
    X, y, _ = xy
    net = SegmentationNet(seed=7, **FAST).fit(X, y)
    labelled, unlabelled = [0, 1, 2], list(range(3, 16))
    for selector in (
        RarenessAwareSelector(),
        EntropySelector(),
        CoreSetSelector(),
        RandomSelector(seed=3),
    ):
        picks = selector.select(net, X, labelled, unlabelled, 4)
        assert len(picks) == 4
        assert set(picks) <= set(unlabelled)
        assert len(set(picks)) == 4


def test_selector_get_params():
    sel = RarenessAwareSelector(use_diversity=False, aggregator="mean")
    params = sel.get_params()
    assert params["use_diversity"] is False and params["aggregator"] == "mean"
    assert clone(sel).get_params() == params


def test_entropy_selector_matches_functional(xy):
    X, y, _ = xy
    net = SegmentationNet(seed=8, **FAST).fit(X, y)
    from alseg.acquisition import PoolState, entropy_select

    labelled, unlabelled = [0, 1], list(range(2, 12))
    direct = entropy_select(
        net.params_, X, PoolState(labelled=labelled, unlabelled=list(unlabelled)), 3
    )
    assert EntropySelector().select(net, X, labelled, unlabelled, 3) == direct
