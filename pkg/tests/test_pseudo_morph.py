import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdgmorph.gradcheck import check_gradients
from sdgmorph.morphology import dilate_flat, erode_flat
from sdgmorph.pseudo_morph import (EmptyForegroundWarning, PseudoMorphParams, apply_to_array,
                                   foreground_mask, init_pseudo_morph, one_hot_bank,
                                   pseudo_dilate, pseudo_erode, sample_kernel_size)
from sdgmorph import tensor as T
from sdgmorph.tensor import ContractError, Tape


class FixedDraw:
    """Stand-in generator whose uniform draws always return ``u``."""

    def __init__(self, u):
        self.u = u
        self.calls = 0

    def random(self):
        self.calls += 1
        return self.u


DRAW_FOR = {3: 0.25, 5: 0.75}


def identity_params(mode, n_layers=1):
    return PseudoMorphParams(mode, [{k: one_hot_bank(k) for k in (3, 5)} for _ in range(n_layers)])


def masked_min_reference(v, k):
    """Minimum over in-bounds foreground neighbours; background stays 0."""
    r = (k - 1) // 2
    out = np.zeros_like(v)
    for idx in zip(*np.nonzero(v)):
        window = tuple(slice(max(0, i - r), i + r + 1) for i in idx)
        vals = v[window]
        out[idx] = vals[vals != 0].min()
    return out


def test_foreground_mask_examples():
    assert not foreground_mask(np.zeros((1, 1, 3, 3, 3))).any()
    assert foreground_mask(np.full((1, 1, 3, 3, 3), 2.0)).all()
    z, y, x = np.mgrid[:9, :9, :9]
    inside = ((z - 4) / 3.5) ** 2 + ((y - 4) / 2.5) ** 2 + ((x - 4) / 3.0) ** 2 <= 1
    v = np.where(inside, 100.0, 0.0)
    np.testing.assert_array_equal(foreground_mask(v), inside.astype(float))


def test_sample_kernel_size():
    assert sample_kernel_size(np.random.default_rng(1)) == sample_kernel_size(np.random.default_rng(1))
    a, b = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_kernel_size(a) for _ in range(50)] == [sample_kernel_size(b) for _ in range(50)]
    rng = np.random.default_rng(2024)
    draws = [sample_kernel_size(rng) for _ in range(10_000)]
    assert set(draws) == {3, 5}
    assert 0.47 <= draws.count(3) / len(draws) <= 0.53
    # exactly one draw per call
    rng1, rng2 = np.random.default_rng(5), np.random.default_rng(5)
    sample_kernel_size(rng1)
    rng2.random()
    assert rng1.random() == rng2.random()


def test_one_hot_bank_selects_distinct_offsets():
    for k in (3, 5):
        bank = one_hot_bank(k)
        assert bank.shape == (k ** 3, 1, k, k, k)
        flat = bank.reshape(k ** 3, -1)
        np.testing.assert_array_equal(flat, np.eye(k ** 3))


def test_init_shapes_and_noise():
    p = init_pseudo_morph("dilation", 2, np.random.default_rng(0), sigma=0.01)
    assert len(p.layers) == 2
    for layer in p.layers:
        assert set(layer) == {3, 5}
        for k, bank in layer.items():
            assert bank.shape == (k ** 3, 1, k, k, k)
            assert 0.005 < np.std(bank - one_hot_bank(k)) < 0.015
    exact = init_pseudo_morph("erosion", 1, np.random.default_rng(0), sigma=0.0)
    np.testing.assert_array_equal(exact.layers[0][3], one_hot_bank(3))
    with pytest.raises(ContractError):
        init_pseudo_morph("opening", 1, np.random.default_rng(0))


@pytest.mark.parametrize("k", [3, 5])
def test_identity_equivalence_on_positive_volumes(k):
    """One-hot banks with L=1 reproduce exact flat morphology (100 volumes per k)."""
    rng = np.random.default_rng(100 + k)
    dil, ero = identity_params("dilation"), identity_params("erosion")
    for _ in range(100):
        shape = tuple(int(s) for s in rng.integers(max(3, k - 1), 9, size=3))
        v = rng.uniform(1.0, 255.0, size=shape)
        got_d = apply_to_array(dil, v, FixedDraw(DRAW_FOR[k]))
        got_e = apply_to_array(ero, v, FixedDraw(DRAW_FOR[k]))
        assert np.abs(got_d - dilate_flat(v, k)).max() <= 1e-9
        assert np.abs(got_e - erode_flat(v, k)).max() <= 1e-9


@pytest.mark.parametrize("k", [3, 5])
def test_identity_with_background(k):
    rng = np.random.default_rng(200 + k)
    for _ in range(20):
        v = rng.uniform(1.0, 255.0, size=(6, 7, 5)) * (rng.random((6, 7, 5)) < 0.7)
        mask = v != 0
        got_d = apply_to_array(identity_params("dilation"), v, FixedDraw(DRAW_FOR[k]))
        np.testing.assert_allclose(got_d, dilate_flat(v, k) * mask, rtol=0, atol=1e-9)
        got_e = apply_to_array(identity_params("erosion"), v, FixedDraw(DRAW_FOR[k]))
        np.testing.assert_allclose(got_e, masked_min_reference(v, k), rtol=0, atol=1e-9)
        assert np.all(got_e[mask] <= v[mask] + 1e-9)
        assert np.all(got_d[mask] >= v[mask] - 1e-9)


def test_constant_foreground_stays_constant():
    v = np.zeros((7, 7, 7))
    v[1:6, 2:6, 1:5] = 80.0
    for mode in ("dilation", "erosion"):
        out = apply_to_array(identity_params(mode, 2), v, np.random.default_rng(0))
        np.testing.assert_allclose(out, v, atol=1e-9)


def test_zero_input_and_mode_checks():
    tape = Tape()
    x = tape.constant(np.zeros((2, 1, 5, 5, 5)))
    p = init_pseudo_morph("dilation", 2, np.random.default_rng(0))
    assert not pseudo_dilate(p, x, np.random.default_rng(0)).value.any()
    with pytest.raises(ContractError):
        pseudo_erode(p, x, np.random.default_rng(0))
    with pytest.raises(ContractError):
        pseudo_dilate(p, tape.constant(np.zeros((2, 2, 5, 5, 5))), np.random.default_rng(0))


def test_empty_foreground_erosion_warns_and_passes_through():
    p = init_pseudo_morph("erosion", 1, np.random.default_rng(0))
    v = np.zeros((2, 1, 5, 5, 5))
    v[1, 0, 1:4, 1:4, 1:4] = 50.0
    with pytest.warns(EmptyForegroundWarning):
        out = apply_to_array(p, v, np.random.default_rng(1))
    assert not out[0].any()
    assert out.shape == v.shape


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), mode=st.sampled_from(["dilation", "erosion"]),
       layers=st.integers(1, 3))
def test_shape_and_background_invariance(seed, mode, layers):
    rng = np.random.default_rng(seed)
    p = init_pseudo_morph(mode, layers, rng, sigma=0.05)
    v = rng.uniform(1, 255, size=(2, 1, 6, 5, 7)) * (rng.random((2, 1, 6, 5, 7)) < 0.6)
    v[:, :, 2, 2, 2] = 100.0  # keep both samples nonempty
    with warnings.catch_warnings():
        warnings.simplefilter("error", EmptyForegroundWarning)
        out = apply_to_array(p, v, rng)
    assert out.shape == v.shape
    assert np.all(out[v == 0] == 0)


def test_desk_shape_preserved():
    rng = np.random.default_rng(3)
    v = rng.uniform(0, 255, size=(2, 1, 16, 16, 16))
    for mode in ("dilation", "erosion"):
        assert apply_to_array(init_pseudo_morph(mode, 2, rng), v, rng).shape == (2, 1, 16, 16, 16)


@pytest.mark.parametrize("mode,fn", [("dilation", pseudo_dilate), ("erosion", pseudo_erode)])
@pytest.mark.parametrize("k", [3, 5])
def test_gradient_wrt_kernels(mode, fn, k):
    rng = np.random.default_rng(7 * k)
    x = rng.uniform(1, 255, size=(1, 1, 5, 5, 5)) * (rng.random((1, 1, 5, 5, 5)) < 0.8)
    x[0, 0, 2, 2, 2] = 90.0
    banks = {f"b{kk}": one_hot_bank(kk) + rng.normal(0, 0.05, one_hot_bank(kk).shape)
             for kk in (3, 5)}
    proj = rng.normal(size=x.shape)

    def build(tape, v):
        params = PseudoMorphParams(mode, [{3: v["b3"], 5: v["b5"]}])
        out = fn(params, tape.constant(x), FixedDraw(DRAW_FOR[k]))
        return T.sum(T.mul(out, proj))

    err = check_gradients(build, banks, step=1e-6, max_probes=60, rng=np.random.default_rng(k))
    assert err[f"b{k}"] <= 1e-4


@pytest.mark.parametrize("mode,fn", [("dilation", pseudo_dilate), ("erosion", pseudo_erode)])
def test_gradient_through_two_layers(mode, fn):
    # the second erosion layer's fill value depends on the first layer's kernels
    rng = np.random.default_rng(21)
    x = np.zeros((1, 1, 6, 6, 6))
    x[0, 0, 1:5, 1:5, 1:5] = rng.uniform(20, 240, size=(4, 4, 4))
    banks = {f"l{i}": one_hot_bank(3) + rng.normal(0, 0.05, (27, 1, 3, 3, 3)) for i in range(2)}
    proj = rng.normal(size=x.shape)

    def build(tape, v):
        params = PseudoMorphParams(mode, [{3: v["l0"], 5: one_hot_bank(5)},
                                          {3: v["l1"], 5: one_hot_bank(5)}])
        return T.sum(T.mul(fn(params, tape.constant(x), FixedDraw(0.25)), proj))

    err = check_gradients(build, banks, step=1e-6, max_probes=80, rng=np.random.default_rng(0))
    assert max(err.values()) <= 1e-4, err
