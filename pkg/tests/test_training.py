import itertools

import numpy as np
import pytest

from sdgmorph.augment import affine_mci, sample_affine
from sdgmorph.config import TrainConfig
from sdgmorph.model import init_params
from sdgmorph.morphology import dilate_flat, erode_flat
from sdgmorph.phantoms import AD, MCI, NC, LabeledSample, derive_seed, \
    generate_phantom, make_datasets, split_80_20, SOURCE
from sdgmorph.pseudo_morph import sample_kernel_size
from sdgmorph.tensor import ContractError, Tape
from sdgmorph.training import (OptimizerState, Route, TrainingDiverged, augment_view, batch_route,
                               class_counts, compute_gradients, dataset_cross_entropy,
                               dispatch_augment, evaluate, fit, fit_split, lr_schedule, sgd_update,
                               train_step)

SMALL = dict(channels=(4, 8), embed_dim=8, dims=(8, 8, 8), source_total=40, target_total=20)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


def batch(labels, dims=(8, 8, 8), seed=0):
    return np.stack([generate_phantom(y, SOURCE, dims, np.random.default_rng(seed + i)).volume
                     for i, y in enumerate(labels)])


def one_step(cfg, x, labels, rng_seed=5):
    params = init_params(cfg.model_spec(), np.random.default_rng(1))
    opt = OptimizerState.create(params, cfg.lr0)
    opt.lr = cfg.lr0
    rep = train_step(x, labels, params, opt, cfg, np.ones(3), np.random.default_rng(rng_seed))
    return params, rep


@pytest.mark.parametrize("pair", list(itertools.product([NC, MCI, AD], repeat=2)))
def test_routing_table(pair):
    expected = (Route.UNIFORM_MCI if pair == (MCI, MCI)
                else Route.UNIFORM_OTHER if pair[0] == pair[1] else Route.MIXED)
    assert batch_route(pair) is expected
    cfg = small_cfg()
    rep, _ = compute_gradients(batch(pair), pair, init_params(cfg.model_spec(),
                               np.random.default_rng(0)), cfg, np.ones(3), np.random.default_rng(1))
    assert rep.route is expected
    if expected is Route.MIXED:
        assert rep.l_scl is not None and rep.n_embeddings == 4
    else:
        assert rep.l_scl is None and rep.n_embeddings == 0
    with pytest.raises(ContractError):
        batch_route([])


def test_uniform_mci_trains_on_cutmix_samples():
    cfg = small_cfg()
    params = init_params(cfg.model_spec(), np.random.default_rng(0))
    x = batch([MCI, MCI])
    with_mix, _ = compute_gradients(x, [MCI, MCI], params, cfg, np.ones(3), np.random.default_rng(3))
    no_mix, _ = compute_gradients(x, [MCI, MCI], params, cfg.replace(use_cutmix=False),
                                  np.ones(3), np.random.default_rng(3))
    assert with_mix.l_ce != no_mix.l_ce


def test_dispatch_augment_matches_operators():
    cfg = small_cfg(pm_sigma=0.0)
    params = init_params(cfg.model_spec(), np.random.default_rng(0))
    vols = batch([NC, MCI, AD])
    for label, vol in zip((NC, MCI, AD), vols):
        s = LabeledSample(vol, label)
        out = dispatch_augment(s, params, cfg, np.random.default_rng(9))
        assert out.label == label and out.volume.shape == vol.shape
        replay = np.random.default_rng(9)
        mask = vol != 0
        if label == MCI:
            ranges = cfg.affine_ranges()
            expected = affine_mci(vol, sample_affine(replay, **ranges), **ranges)
            np.testing.assert_array_equal(out.volume, expected)
            continue
        expected = vol
        for _ in range(cfg.pm_layers):
            k = sample_kernel_size(replay)
            layer_mask = expected != 0
            if label == NC:
                expected = dilate_flat(expected, k) * layer_mask
            else:
                filled = np.where(layer_mask, expected, expected.max())
                expected = erode_flat(filled, k) * layer_mask
        np.testing.assert_allclose(out.volume, expected, atol=1e-9)
        assert not out.volume[~mask].any()
    tape = Tape()
    with pytest.raises(ContractError):
        augment_view(tape.constant(vols[:1, None]), 3, {}, cfg, np.random.default_rng(0))


def test_augmenter_gradients_only_on_mixed_batches():
    cfg = small_cfg()
    params = init_params(cfg.model_spec(), np.random.default_rng(0))
    for pair in itertools.product([NC, MCI, AD], repeat=2):
        _, grads = compute_gradients(batch(pair), pair, params, cfg, np.ones(3),
                                     np.random.default_rng(2))
        dil = sum(np.abs(g).sum() for n, g in grads.items() if n.startswith("dil"))
        ero = sum(np.abs(g).sum() for n, g in grads.items() if n.startswith("ero"))
        if batch_route(pair) is not Route.MIXED:
            assert dil == 0 and ero == 0
        else:
            assert (dil > 0) == (NC in pair)
            assert (ero > 0) == (AD in pair)


def test_lambda_zero_equals_ce_only_update():
    x, labels = batch([NC, AD]), [NC, AD]
    cfg = small_cfg(effective_batch=2, lam=0.0)
    a, rep_a = one_step(cfg, x, labels)
    b, rep_b = one_step(cfg.replace(use_scl=False), x, labels)
    assert rep_a.stepped and rep_b.stepped
    assert rep_a.l_scl is not None and rep_b.l_scl is None
    for name in a:
        assert np.abs(a[name] - b[name]).max() <= 1e-12, name


def test_sgd_hand_recurrence():
    p = {"w": np.array(1.0)}
    opt = OptimizerState.create(p, 0.01)
    sgd_update(p, {"w": np.array(1.0)}, opt, 0.01, momentum=0.9, weight_decay=0.0)
    assert abs(p["w"] - 0.99) <= 1e-12
    sgd_update(p, {"w": np.array(1.0)}, opt, 0.01, momentum=0.9, weight_decay=0.0)
    assert abs(opt.velocity["w"] - 1.9) <= 1e-12
    assert abs(p["w"] - 0.971) <= 1e-12


def test_sgd_decay_only_and_no_op():
    p = {"w": np.array(1.0), "m": np.arange(4.0).reshape(2, 2)}
    opt = OptimizerState.create(p, 0.01)
    before = p["m"].copy()
    sgd_update(p, {k: np.zeros_like(v) for k, v in p.items()}, opt, 0.01, 0.9, 0.0005)
    assert abs(p["w"] - 0.999995) <= 1e-12
    np.testing.assert_allclose(p["m"], before * (1 - 0.01 * 0.0005), rtol=0, atol=1e-15)
    q = {"w": np.array(2.0)}
    sgd_update(q, {"w": np.array(0.0)}, OptimizerState.create(q, 0.01), 0.01, 0.9, 0.0)
    assert q["w"] == 2.0
    with pytest.raises(ContractError):
        sgd_update(q, {"w": np.zeros(2)}, OptimizerState.create(q, 0.01), 0.01)


def test_lr_schedule():
    assert lr_schedule(0, 0.01) == 0.01
    assert lr_schedule(1, 0.01) == pytest.approx(0.0095, abs=1e-15)
    assert abs(lr_schedule(10, 0.01) - 0.01 * 0.95 ** 10) <= 1e-15
    assert lr_schedule(10, 0.01) == pytest.approx(0.005987, abs=5e-7)
    with pytest.raises(ContractError):
        lr_schedule(-1, 0.01)


def test_accumulation_equivalence():
    labels = [NC, NC, MCI, AD, AD, NC, MCI, MCI, AD, NC, NC, AD, MCI, NC, AD, MCI]
    x = batch(labels)
    weights = np.array([0.8, 1.1, 1.3])
    base = small_cfg(use_scl=False, use_cutmix=False, weight_decay=0.0005)
    init = init_params(base.model_spec(), np.random.default_rng(4))

    micro = {k: v.copy() for k, v in init.items()}
    cfg8 = base.replace(micro_batch=2, effective_batch=16)
    opt = OptimizerState.create(micro, 0.01)
    opt.lr = 0.01
    reps = [train_step(x[i:i + 2], labels[i:i + 2], micro, opt, cfg8, weights,
                       np.random.default_rng(i)) for i in range(0, 16, 2)]
    assert [r.stepped for r in reps] == [False] * 7 + [True]

    full = {k: v.copy() for k, v in init.items()}
    cfg1 = base.replace(micro_batch=16, effective_batch=16)
    opt1 = OptimizerState.create(full, 0.01)
    opt1.lr = 0.01
    assert train_step(x, labels, full, opt1, cfg1, weights, np.random.default_rng(0)).stepped
    for name in init:
        assert np.abs(micro[name] - full[name]).max() <= 1e-10, name


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_train_step_rejects_wrong_batch_and_nonfinite_loss():
    cfg = small_cfg()
    params = init_params(cfg.model_spec(), np.random.default_rng(0))
    opt = OptimizerState.create(params, 0.01)
    with pytest.raises(ContractError):
        train_step(batch([NC]), [NC], params, opt, cfg, np.ones(3), np.random.default_rng(0))
    params["cls.b"][:] = np.inf
    with pytest.raises(TrainingDiverged):
        train_step(batch([NC, AD]), [NC, AD], params, opt, cfg, np.ones(3), np.random.default_rng(0))


def small_data(cfg):
    source, _ = make_datasets(cfg.data_config())
    return source


def test_fit_zero_epochs_returns_initial_params():
    cfg = small_cfg(epochs=0)
    res = fit(small_data(cfg), cfg)
    assert res.log == [] and res.log_text() == ""
    init = init_params(cfg.model_spec(), np.random.default_rng(derive_seed(cfg.seed, 1)))
    for name in init:
        np.testing.assert_array_equal(res.params[name], init[name])


def test_fit_is_deterministic_and_logs_routes():
    cfg = small_cfg(epochs=2)
    data = small_data(cfg)
    a, b = fit(data, cfg), fit(data, cfg)
    assert a.log_text() == b.log_text()
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    train, _ = split_80_20(data, np.random.default_rng(derive_seed(cfg.seed, 4)))
    for rec in a.log:
        assert sum(rec.routes.values()) == len(train) // cfg.micro_batch
        assert len(rec.tsv().split("\t")) == 11
    with pytest.raises(ContractError):
        fit(data + [LabeledSample(data[0].volume, NC, 1)], cfg)
    with pytest.raises(ContractError):
        fit([], cfg)


def test_desk_smoke_run_reduces_training_ce():
    cfg = TrainConfig(epochs=5)
    source, _ = make_datasets(cfg.data_config())
    train, val = split_80_20(source, np.random.default_rng(derive_seed(cfg.seed, 4)))
    counts = np.bincount([s.label for s in train], minlength=3)
    init = init_params(cfg.model_spec(), np.random.default_rng(derive_seed(cfg.seed, 1)))
    res = fit_split(train, val, cfg)
    assert len(res.log) == 5
    np.testing.assert_array_equal(class_counts(train), counts)
    before = dataset_cross_entropy(init, train, res.class_weights)
    after = dataset_cross_entropy(res.params, train, res.class_weights)
    assert after < before


def test_returned_params_reproduce_logged_validation_row():
    cfg = small_cfg(epochs=3)
    data = small_data(cfg)
    res = fit(data, cfg)
    _, val = split_80_20(data, np.random.default_rng(derive_seed(cfg.seed, 4)))
    report = evaluate(res.params, val, val[0].domain)
    logged = res.log[res.best_epoch].val
    assert report == logged
    assert report.tsv() == logged.tsv()
    assert report == evaluate(res.params, val, val[0].domain)
    assert all(rec.val.f1 <= logged.f1 for rec in res.log)


@pytest.mark.parametrize("seed", range(8))
def test_end_to_end_gradient_at_generic_points(seed):
    from sdgmorph.selfcheck import end_to_end_error
    assert end_to_end_error(np.random.default_rng(seed)) <= 1e-4
