import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.errors import DegenerateBatchError, StructuralError, ValidationError
from src.tensornet import dbl_loss, dice_focal_loss, pair_labels, pairwise_sq_distances
from src.tensornet.gradcheck import numeric_gradient, relative_error


def test_pairwise_distances_match_direct_computation(rng):
    f = rng.normal(size=(6, 5))
    direct = ((f[:, None, :] - f[None, :, :]) ** 2).sum(axis=-1)
    np.testing.assert_allclose(pairwise_sq_distances(f), direct, atol=1e-10)


def test_pair_labels_by_product_and_cell():
    ids = ["A", "A", "B", "A"]
    labels = pair_labels(ids)
    assert labels.dtype == np.uint8
    assert labels.trace() == 0
    assert labels[0, 1] == labels[0, 3] == 1
    assert labels[0, 2] == 0

    by_cell = pair_labels(ids, cells=[0, 1, 0, 0])
    assert by_cell[0, 1] == 0
    assert by_cell[0, 3] == 1


def test_dbl_equal_features_is_log_of_batch_share():
    # every softmax weight is 1/3; each anchor has exactly one positive
    loss, grad = dbl_loss(np.zeros((4, 3)), pair_labels(["a", "a", "b", "b"]))
    assert loss == pytest.approx(np.log(3.0))
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_dbl_well_separated_products_cost_nothing():
    features = np.array([[0.0], [0.0], [20.0], [20.0]])
    loss, _ = dbl_loss(features, pair_labels(["a", "a", "b", "b"]))
    assert loss == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 8))
def test_dbl_gradient_matches_finite_differences(seed, batch):
    gen = np.random.default_rng(seed)
    features = gen.normal(size=(batch, 4))
    ids = [f"p{i % 2}" for i in range(batch)]
    labels = pair_labels(ids)
    _, grad = dbl_loss(features, labels)
    numeric = numeric_gradient(lambda f: dbl_loss(f, labels)[0], features.copy(), 1e-5)
    assert relative_error(grad, numeric) < 1e-4


def test_dbl_skips_anchors_without_positives():
    features = np.random.default_rng(3).normal(size=(3, 2))
    labels = pair_labels(["a", "a", "b"])
    loss, grad = dbl_loss(features, labels)
    numeric = numeric_gradient(lambda f: dbl_loss(f, labels)[0], features.copy(), 1e-5)
    assert np.isfinite(loss)
    assert relative_error(grad, numeric) < 1e-4


def test_dbl_rejects_degenerate_batches():
    with pytest.raises(DegenerateBatchError):
        dbl_loss(np.zeros((3, 2)), pair_labels(["a", "b", "c"]))
    with pytest.raises(StructuralError):
        dbl_loss(np.zeros((1, 2)), np.zeros((1, 1)))
    with pytest.raises(StructuralError):
        dbl_loss(np.zeros((3, 2)), np.zeros((2, 2)))


def test_dice_focal_single_pixel():
    out = dice_focal_loss(np.array([0.5]), np.array([1.0]))
    # dice: 1 - (2 * 0.5 + 1) / (0.5 + 1 + 1); focal: -0.25 * 0.5**2 * log(0.5)
    assert out.dice == pytest.approx(0.2)
    assert out.focal == pytest.approx(-0.25 * 0.25 * np.log(0.5))
    assert out.loss == pytest.approx(out.dice + out.focal)


def test_dice_focal_perfect_prediction():
    truth = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = dice_focal_loss(truth.copy(), truth)
    assert out.loss < 1e-5


@pytest.mark.parametrize(("alpha", "gamma"), [(0.25, 2.0), (0.5, 1.0), (0.8, 3.0)])
def test_dice_focal_gradient(alpha, gamma):
    gen = np.random.default_rng(int(gamma * 10))
    pred = gen.uniform(0.05, 0.95, size=(2, 1, 4, 4))
    truth = (gen.uniform(size=pred.shape) > 0.6).astype(np.float64)
    out = dice_focal_loss(pred, truth, alpha=alpha, gamma=gamma)
    numeric = numeric_gradient(
        lambda p: dice_focal_loss(p, truth, alpha=alpha, gamma=gamma).loss, pred.copy(), 1e-6
    )
    assert relative_error(out.grad, numeric) < 1e-4


def test_dice_focal_validates_truth():
    with pytest.raises(ValidationError):
        dice_focal_loss(np.full((2, 2), 0.5), np.full((2, 2), 0.5))
    with pytest.raises(StructuralError):
        dice_focal_loss(np.full((2, 2), 0.5), np.ones((2, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_dbl_ignores_batch_order(seed):
    gen = np.random.default_rng(seed)
    features = gen.normal(size=(6, 3))
    labels = pair_labels(["a", "a", "b", "b", "c", "c"])
    perm = gen.permutation(6)
    loss, grad = dbl_loss(features, labels)
    shuffled_loss, shuffled_grad = dbl_loss(features[perm], labels[np.ix_(perm, perm)])
    assert shuffled_loss == pytest.approx(loss, rel=1e-12)
    np.testing.assert_allclose(shuffled_grad, grad[perm], atol=1e-12)


def test_dbl_falls_as_positive_pairs_close_in():
    labels = pair_labels(["a", "a", "b", "b"])
    losses = [dbl_loss(np.array([[0.0], [gap], [2.0], [2.2]]), labels)[0] for gap in (1.5, 1.0, 0.5, 0.25, 0.0)]
    assert all(later < earlier for earlier, later in zip(losses, losses[1:], strict=False)), losses
