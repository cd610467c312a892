import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropda import diffcore as dc
from dropda import network as nw
from dropda.errors import DimensionError, ValidationError


def small_net(seed=0, dropout=0.5, n_classes=3):
    return nw.NetworkParams.build(2, n_classes, dc.make_rng(seed), extractor_hidden=(8, 6),
                                  discriminator_hidden=(10,), dropout=dropout)


def test_build_shapes():
    p = small_net()
    assert p.input_dim == 2 and p.n_classes == 3
    assert [l.weights.shape for l in p.extractor.layers] == [(8, 2), (6, 8)]
    assert [l.weights.shape for l in p.discriminator.layers] == [(10, 6), (1, 10)]
    assert all(not l.bias.any() for g in p.groups().values() for l in g)


def test_glorot_bounds():
    rng = dc.make_rng(0)
    layer = dc.DenseLayer.init(30, 20, rng)
    limit = np.sqrt(6 / 50)
    assert np.abs(layer.weights).max() <= limit
    assert np.abs(layer.weights).max() > 0.8 * limit


def test_extractor_outputs_nonnegative():
    p = small_net()
    h = nw.extract_features(dc.make_rng(1).normal(size=(20, 2)), p.extractor)
    assert h.shape == (20, 6) and (h >= 0).all()


def test_extractor_rejects_wrong_width():
    with pytest.raises(DimensionError):
        nw.extract_features(np.ones((3, 5)), small_net().extractor)


def test_discriminator_needs_single_logit():
    with pytest.raises(DimensionError):
        nw.Discriminator.build([4, 3, 2], dc.make_rng(0))


@pytest.mark.parametrize("rate", [-0.1, 1.0])
def test_discriminator_rejects_bad_rate(rate):
    with pytest.raises(ValidationError):
        nw.Discriminator.build([4, 3, 1], dc.make_rng(0), rate)


def test_mc_rate_zero_all_samples_identical():
    p = small_net(dropout=0.0)
    h = nw.extract_features(dc.make_rng(1).normal(size=(5, 2)), p.extractor)
    out = nw.discriminate_mc(h, p.discriminator, 5, dc.make_rng(2))
    assert out.logits.shape == (5, 5, 1)
    for j in range(1, 5):
        np.testing.assert_array_equal(out.logits[j], out.logits[0])
    assert not nw.mc_output_variance(out).any()


def test_mc_rate_half_varies():
    p = small_net(dropout=0.5)
    h = nw.extract_features(dc.make_rng(1).normal(size=(4, 2)), p.extractor)
    out = nw.discriminate_mc(h, p.discriminator, 32, dc.make_rng(2))
    assert (nw.mc_output_variance(out) > 0).any()


def test_mc_requires_positive_k():
    p = small_net()
    with pytest.raises(ValidationError):
        nw.discriminate_mc(np.ones((2, 6)), p.discriminator, 0, dc.make_rng(0))


def test_mc_variance_needs_two_samples():
    out = nw.McOutput(np.zeros((1, 3, 1)), [[]])
    with pytest.raises(ValidationError):
        nw.mc_output_variance(out)


def test_mc_variance_hand_example():
    out = nw.McOutput(np.array([0.0, 1.0, 2.0]).reshape(3, 1, 1), [[], [], []])
    assert nw.mc_output_variance(out)[0] == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-100_000, 100_000).map(lambda i: i / 1000), min_size=2, max_size=8))
def test_mc_variance_zero_iff_identical(values):
    # values on a 1e-3 grid: differences of a few ulps near 1e-308 would square to zero
    out = nw.McOutput(np.array(values).reshape(-1, 1, 1), [[]] * len(values))
    var = nw.mc_output_variance(out)[0]
    assert var >= 0
    if len(set(values)) == 1:
        assert var == 0
    else:
        assert var > 0


def test_mc_same_rng_state_same_output():
    p = small_net()
    h = nw.extract_features(dc.make_rng(1).normal(size=(4, 2)), p.extractor)
    a = nw.discriminate_mc(h, p.discriminator, 6, dc.make_rng(3))
    b = nw.discriminate_mc(h, p.discriminator, 6, dc.make_rng(3))
    np.testing.assert_array_equal(a.logits, b.logits)


def test_backward_reuses_forward_masks(monkeypatch):
    """Every mask used in backward is the very object drawn for that forward pass."""
    p = small_net()
    h = nw.extract_features(dc.make_rng(1).normal(size=(4, 2)), p.extractor)
    out = nw.discriminate_mc(h, p.discriminator, 4, dc.make_rng(5))
    seen = []
    real = dc.dropout_backward

    def spy(grad, mask):
        seen.append(mask)
        return real(grad, mask)

    monkeypatch.setattr(dc, "dropout_backward", spy)
    for j in range(out.k):
        p.discriminator.backward(np.ones((4, 1)), out.caches[j])
    drawn = [m for masks in out.masks for m in masks]
    assert len(seen) == len(drawn)
    assert all(a is b for a, b in zip(seen, drawn))
    # distinct draws per sample
    assert not np.array_equal(out.masks[0][0].keep, out.masks[1][0].keep)


def test_discriminator_backward_matches_fd_with_fixed_mask():
    p = small_net()
    for layer in p.discriminator.layers:
        layer.bias[:] = dc.make_rng(9).normal(0, 0.1, size=layer.bias.shape)
    h = np.abs(dc.make_rng(1).normal(size=(5, 6)))
    t = np.array([0, 1, 0, 1, 1])
    masks = p.discriminator.sample_masks(dc.make_rng(4))

    def f():
        z, cache = p.discriminator.forward(h, masks)
        loss, g = dc.sigmoid_bce(z, t)
        return loss, p.discriminator.backward(g, cache)[1]

    assert dc.finite_difference_check(f, p.discriminator.params()) < 1e-4


def test_predict_is_deterministic():
    p = small_net()
    x = dc.make_rng(1).normal(size=(10, 2))
    np.testing.assert_array_equal(nw.predict(p, x), nw.predict(p, x))
    assert nw.predict(p, x).shape == (10,)


def test_checkpoint_round_trip(tmp_path):
    p = small_net(seed=3)
    path = tmp_path / "ck.npz"
    nw.save_checkpoint(path, p)
    q = nw.load_checkpoint(path)
    for name, layers in p.groups().items():
        for a, b in zip(layers, q.groups()[name]):
            np.testing.assert_array_equal(a.weights, b.weights)
            np.testing.assert_array_equal(a.bias, b.bias)
    assert q.discriminator.dropout == p.discriminator.dropout
    x = dc.make_rng(2).normal(size=(7, 2))
    np.testing.assert_array_equal(nw.predict(p, x), nw.predict(q, x))


def test_checkpoint_wrong_version(tmp_path):
    path = tmp_path / "ck.npz"
    nw.save_checkpoint(path, small_net())
    with np.load(path) as z:
        arrays = dict(z)
    arrays["format_version"] = np.array([99])
    np.savez(path, **arrays)
    with pytest.raises(ValidationError, match="format 99"):
        nw.load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "ck.npz"
    nw.save_checkpoint(path, small_net())
    with np.load(path) as z:
        arrays = dict(z)
    arrays["extractor.0.weights"] = np.zeros((3, 3))
    np.savez(path, **arrays)
    with pytest.raises(DimensionError, match="extractor layer 0"):
        nw.load_checkpoint(path)
