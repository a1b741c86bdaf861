import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ophthmae import tensor as T
from ophthmae.classify import (MULTI, SINGLE, Classifier, FinetuneRecipe, LabeledImages, finetune,
                               evaluate_scores, finetune_multi_label, finetune_single_label, label_smooth, lr_at, one_hot,
                               predict, select_best_epoch)
from ophthmae.metrics import UndefinedMetricError
from ophthmae.vit import ViTConfig
from synthetic import param_grad_error, scale_params, two_class

TINY = ViTConfig(image_size=16, patch_size=8, in_channels=3, enc_depth=1, enc_dim=16, enc_heads=2,
                 dec_depth=1, dec_dim=8, dec_heads=2)


def test_recipes():
    s = FinetuneRecipe.single_label()
    assert (s.batch_size, s.epochs, s.warmup_epochs, s.peak_lr, s.min_lr, s.smoothing) == (16, 50, 10, 5e-4, 1e-6, 0.1)
    m = FinetuneRecipe.multi_label()
    assert (m.batch_size, m.epochs, m.peak_lr, m.constant_lr) == (4, 30, 0.01, True)
    with pytest.raises(ValueError):
        FinetuneRecipe(mode="ranking")
    with pytest.raises(ValueError):
        FinetuneRecipe(smoothing=1.0)


def test_lr_anchors_exact():
    s = FinetuneRecipe.single_label()
    assert lr_at(0, s) == 0.0
    assert lr_at(10, s) == 5e-4
    assert lr_at(50, s) == 1e-6
    assert lr_at(30, s) == pytest.approx(2.505e-4, rel=1e-12)
    assert lr_at(5, s) == 2.5e-4
    m = FinetuneRecipe.multi_label()
    assert {lr_at(e, m) for e in (0, 7.5, 30)} == {0.01}


def test_label_smooth_values_and_errors():
    np.testing.assert_allclose(label_smooth(one_hot([2], 5), 0.1)[0], [0.02, 0.02, 0.92, 0.02, 0.02], atol=1e-15)
    np.testing.assert_array_equal(label_smooth(one_hot([0, 1], 2), 0.0), one_hot([0, 1], 2))
    with pytest.raises(ValueError):
        label_smooth([[1.0, 1.0]], 0.1)
    with pytest.raises(ValueError):
        label_smooth(one_hot([0], 2), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 11), st.floats(0.0, 1.0, exclude_max=True))
def test_label_smooth_argmax_invariance(k, cls, frac):
    cls %= k
    eps = frac * (k - 1) / k          # any eps strictly below (K-1)/K
    smoothed = label_smooth(one_hot([cls], k), eps)[0]
    assert int(np.argmax(smoothed)) == cls
    assert smoothed.sum() == pytest.approx(1.0, abs=1e-12)
    # margin between the hot entry and any other is exactly 1 - eps
    others = np.delete(smoothed, cls)
    np.testing.assert_allclose(smoothed[cls] - others, 1.0 - eps, atol=1e-12)


def test_select_best_epoch_ties_and_nan():
    assert select_best_epoch([0.5, 0.9, 0.9, 0.7]) == 2
    assert select_best_epoch([float("nan"), 0.1]) == 2
    with pytest.raises(ValueError):
        select_best_epoch([])


def test_classifier_loss_gradients():
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(0)
        for mode, k in ((SINGLE, 3), (MULTI, 2)):
            model = Classifier(TINY, k, mode, rng, hidden=8)
            scale_params(model, rng)
            x = rng.normal(size=(2, 3, 16, 16))
            y = label_smooth(one_hot([0, 2], 3), 0.1) if mode == SINGLE else np.array([[1.0, 0.0], [1.0, 1.0]])
            for name in ("head.out.weight", "head.hidden.bias", "encoder.blocks.0.mlp.fc1.weight"):
                err = param_grad_error(model, name, lambda: model.loss(x, y), eps=1e-3, order=4)
                assert err < 1e-5, (mode, name, err)


def test_classifier_rejects_bad_class_counts():
    with pytest.raises(ValueError):
        Classifier(TINY, 1, SINGLE, np.random.default_rng(0))


def test_predict_rows():
    model = Classifier(TINY, 3, SINGLE, np.random.default_rng(0))
    images, _ = two_class(5, 20)
    probs = predict(model, images, batch_size=2)
    assert probs.shape == (5, 3)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-6)
    model.mode = MULTI
    scores = predict(model, images)
    assert np.all((scores > 0) & (scores < 1))


def _tiny_sets(n=8):
    images, labels = two_class(n, 16)
    return LabeledImages(images, labels)


def test_finetune_deterministic_and_history():
    data = _tiny_sets()
    recipe = FinetuneRecipe.single_label(epochs=3, warmup_epochs=1, batch_size=4)
    lines = []
    a = finetune(data, data, TINY, 2, recipe, seed=4, log=lines.append)
    b = finetune(data, data, TINY, 2, recipe, seed=4)
    assert len(a.history) == 3 and len(lines) == 3
    assert [h["val_auroc"] for h in a.history] == [h["val_auroc"] for h in b.history]
    assert a.best_epoch == select_best_epoch([h["val_auroc"] for h in a.history])
    for name, p in a.model.state_dict().items():
        np.testing.assert_array_equal(p, a.best_state[name])
        np.testing.assert_array_equal(p, b.best_state[name])


def test_finetune_linear_probe_freezes_encoder():
    data = _tiny_sets()
    recipe = FinetuneRecipe.single_label(epochs=1, warmup_epochs=0, batch_size=4)
    ref = Classifier(TINY, 2, SINGLE, np.random.default_rng(1)).state_dict()
    res = finetune(data, data, TINY, 2, recipe, seed=1, linear_probe=True, use_augment=False)
    state = res.model.state_dict()
    for name, p in ref.items():
        if name.startswith("encoder."):
            np.testing.assert_array_equal(state[name], p)
    assert not np.array_equal(state["head.out.weight"], ref["head.out.weight"])


def test_finetune_multi_label_and_missing_class_warning():
    images, _ = two_class(6, 16)
    data = LabeledImages(images, [[0], [0, 1], [0], [1], [0], [0, 1]])
    recipe = FinetuneRecipe.multi_label(epochs=1)
    with pytest.warns(UserWarning, match="absent"), pytest.warns(UserWarning, match="excluded"):
        finetune_multi_label(data, data, TINY, 3, seed=0, recipe=recipe)
    with pytest.raises(ValueError):
        finetune_single_label(data, data, TINY, 3, seed=0, recipe=recipe)
    with pytest.raises(ValueError):
        finetune(LabeledImages([], []), data, TINY, 2, recipe, 0)


def test_finetune_rejects_unevaluable_val_split():
    data = _tiny_sets()
    one_class = LabeledImages(data.images[:3], [1, 1, 1])
    recipe = FinetuneRecipe.single_label(epochs=1)
    with pytest.raises(UndefinedMetricError, match="validation"):
        finetune(data, one_class, TINY, 2, recipe, 0)


def test_best_checkpoint_reproduces_logged_val_auroc():
    data = _tiny_sets()
    recipe = FinetuneRecipe.single_label(epochs=3, warmup_epochs=1, batch_size=4)
    res = finetune(data, data, TINY, 2, recipe, seed=2)
    auroc, _ = evaluate_scores(predict(res.model, data.images), data.labels, 2, SINGLE)
    assert auroc.macro == res.best_val_auroc


def test_finetune_loads_encoder_state():
    data = _tiny_sets(4)
    donor = Classifier(TINY, 2, SINGLE, np.random.default_rng(9))
    state = {k: v for k, v in donor.state_dict().items() if k.startswith("encoder.")}
    recipe = FinetuneRecipe.single_label(epochs=1, warmup_epochs=1, batch_size=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = finetune(data, data, TINY, 2, recipe, 0, encoder_state=state, linear_probe=True)
    for name, p in state.items():
        np.testing.assert_array_equal(res.model.state_dict()[name], p)
