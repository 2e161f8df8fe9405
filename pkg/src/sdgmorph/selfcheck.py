"""Built-in verification runs behind ``oracle-check`` and ``gradcheck``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .losses import supcon_loss, weighted_cross_entropy
from .model import init_params
from .morphology import dilate_bruteforce, dilate_flat, erode_bruteforce, erode_flat
from .pseudo_morph import (PseudoMorphParams, apply_to_array, init_pseudo_morph, one_hot_bank,
                           pseudo_dilate, pseudo_erode)
from .training import compute_gradients

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4


@dataclass
class OracleReport:
    trials: int = 0
    morphology_failures: list = field(default_factory=list)
    pseudo_trials: dict = field(default_factory=dict)
    pseudo_max_error: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.morphology_failures and self.pseudo_max_error <= 1e-9


class _Draw:
    """Generator stand-in pinning the kernel-size draw."""

    def __init__(self, k):
        self.u = 0.25 if k == 3 else 0.75

    def random(self):
        return self.u


def oracle_check(trials: int, rng: np.random.Generator, max_side: int = 16,
                 pseudo_per_k: int = 100) -> OracleReport:
    """Separable morphology vs brute force (plus duality) on ``trials`` random
    volumes, and one-hot pseudo-morphology vs exact morphology on
    ``pseudo_per_k`` strictly positive volumes per kernel size."""
    report = OracleReport(trials=trials)
    for t in range(trials):
        k = int(rng.choice([1, 3, 5]))
        lo = max(1, (k + 1) // 2)
        shape = tuple(int(s) for s in rng.integers(lo, max_side + 1, size=3))
        v = rng.integers(0, 256, size=shape).astype(np.float64)
        checks = {
            "dilate": np.array_equal(dilate_flat(v, k), dilate_bruteforce(v, k)),
            "erode": np.array_equal(erode_flat(v, k), erode_bruteforce(v, k)),
            "duality": np.array_equal(erode_flat(v, k), -dilate_flat(-v, k)),
        }
        for name, passed in checks.items():
            if not passed:
                report.morphology_failures.append((t, name, shape, k))
    identity = {mode: PseudoMorphParams(mode, [{k: one_hot_bank(k) for k in (3, 5)}])
                for mode in ("dilation", "erosion")}
    worst = 0.0
    for k in (3, 5):
        for _ in range(pseudo_per_k):
            shape = tuple(int(s) for s in rng.integers(k, max_side + 1, size=3))
            v = rng.uniform(1.0, 255.0, size=shape)
            d = apply_to_array(identity["dilation"], v, _Draw(k))
            e = apply_to_array(identity["erosion"], v, _Draw(k))
            worst = max(worst, np.abs(d - dilate_flat(v, k)).max(), np.abs(e - erode_flat(v, k)).max())
        report.pseudo_trials[k] = pseudo_per_k
    report.pseudo_max_error = float(worst)
    return report


@dataclass
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tol


def _projected(fn, rng, shapes):
    """Scalar probe sum(fn(...) * R) with a fixed random R."""
    probe = T.Tape()
    out_shape = fn({n: probe.leaf(np.ones(s)) for n, s in shapes.items()}).shape
    proj = rng.normal(size=out_shape)
    return lambda tape, v: T.sum(T.mul(fn(v), proj))


def _primitive_cases(rng):
    mask = ~np.eye(4, dtype=bool)
    m4 = (4, 4)
    vol = (2, 2, 4, 4, 4)
    return {
        "add": (lambda v: T.add(v["a"], v["b"]), {"a": m4, "b": m4}),
        "sub": (lambda v: T.sub(v["a"], v["b"]), {"a": m4, "b": m4}),
        "mul": (lambda v: T.mul(v["a"], v["b"]), {"a": m4, "b": m4}),
        "neg": (lambda v: T.neg(v["a"]), {"a": m4}),
        "scale": (lambda v: T.scale(v["a"], -1.7), {"a": m4}),
        "clamp": (lambda v: T.clamp(v["a"], -0.5, 0.5), {"a": m4}),
        "relu": (lambda v: T.relu(v["a"]), {"a": m4}),
        "exp": (lambda v: T.exp(v["a"]), {"a": m4}),
        "log": (lambda v: T.log(T.exp(v["a"])), {"a": m4}),
        "reshape": (lambda v: T.reshape(v["a"], (2, 8)), {"a": m4}),
        "transpose": (lambda v: T.transpose(v["a"]), {"a": (3, 4)}),
        "broadcast_to": (lambda v: T.broadcast_to(v["a"], (3, 4)), {"a": (1, 4)}),
        "sum": (lambda v: T.sum(v["a"], axis=1), {"a": m4}),
        "mean": (lambda v: T.mean(v["a"], axis=0), {"a": m4}),
        "concat": (lambda v: T.concat([v["a"], v["b"]], axis=1), {"a": m4, "b": (4, 2)}),
        "take": (lambda v: T.take(v["a"], [2, 0, 2], axis=0), {"a": m4}),
        "reduce_extreme_max": (lambda v: T.reduce_extreme(v["a"], 1, "max"), {"a": (3, 5, 2)}),
        "reduce_extreme_min": (lambda v: T.reduce_extreme(v["a"], 1, "min"), {"a": (3, 5, 2)}),
        "matmul": (lambda v: T.matmul(v["a"], v["b"]), {"a": (3, 4), "b": (4, 5)}),
        "global_avg_pool": (lambda v: T.global_avg_pool(v["a"]), {"a": vol}),
        "matvec_affine": (lambda v: T.matvec_affine(v["x"], v["w"], v["b"]),
                          {"x": (3, 5), "w": (4, 5), "b": (4,)}),
        "max_pool2": (lambda v: T.max_pool2(v["a"]), {"a": vol}),
        "log_softmax": (lambda v: T.log_softmax(v["a"], axis=1), {"a": m4}),
        "logsumexp": (lambda v: T.logsumexp(v["a"], axis=1, mask=mask), {"a": m4}),
        "l2_normalize_rows": (lambda v: T.l2_normalize_rows(v["a"]), {"a": m4}),
        "conv3d_same": (lambda v: T.conv3d_same(v["x"], v["w"], v["b"]),
                        {"x": vol, "w": (3, 2, 3, 3, 3), "b": (3,)}),
    }


def micro_config() -> TrainConfig:
    """Smallest configuration exercising every branch: one encoder block on 6^3."""
    return TrainConfig(channels=(3,), embed_dim=4, pm_layers=2, pm_sigma=0.01, dims=(6, 6, 6),
                       lam=1.0, tau=0.5)


def micro_batch_inputs(rng: np.random.Generator) -> np.ndarray:
    x = np.zeros((2, 1, 6, 6, 6))
    x[:, :, 1:5, 1:5, 1:5] = rng.uniform(40.0, 220.0, size=(2, 1, 4, 4, 4))
    return x


def end_to_end_error(rng: np.random.Generator, probes: int = 6, step: float = 1e-6) -> float:
    """FD check of L_total = L_CE + lam * L_SCL on a Mixed (NC, AD) micro-batch
    w.r.t. every parameter array, including the augmenter kernels."""
    cfg = micro_config()
    params = init_params(cfg.model_spec(), rng)
    # Zero-initialised biases put ReLU inputs exactly at 0 wherever a whole
    # neighbourhood is clipped; random biases move the check off that kink.
    for name in params:
        if name.endswith(".b"):
            params[name] = rng.normal(0.0, 0.1, size=params[name].shape)
    x = micro_batch_inputs(rng)
    labels = [0, 2]
    weights = np.array([0.8, 1.0, 1.2])

    def loss() -> float:
        rep, _ = compute_gradients(x, labels, params, cfg, weights, np.random.default_rng(11))
        return rep.l_ce + cfg.lam * rep.l_scl

    _, grads = compute_gradients(x, labels, params, cfg, weights, np.random.default_rng(11))
    worst = 0.0
    for name in sorted(params):
        arr = params[name]
        idx = np.sort(rng.choice(arr.size, size=min(probes, arr.size), replace=False))
        numeric = numerical_gradient(loss, arr, step, idx).reshape(-1)[idx]
        analytic = grads[name].reshape(-1)[idx]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def gradient_suite(rng: np.random.Generator) -> list:
    results = []
    for name, (fn, shapes) in _primitive_cases(rng).items():
        arrays = {n: rng.normal(size=s) for n, s in shapes.items()}
        err = check_gradients(_projected(fn, rng, shapes), arrays)
        results.append(GradResult(name, max(err.values()), PRIMITIVE_TOL))

    # composite ops
    q = rng.normal(size=(6, 5))
    labels = [0, 1, 2, 0, 1, 2]
    w = np.array([0.7, 1.1, 1.2])
    err = check_gradients(lambda t, v: supcon_loss(T.l2_normalize_rows(v["q"]), labels, 0.3, w),
                          {"q": q})
    results.append(GradResult("supcon_loss", err["q"], COMPOSITE_TOL))
    err = check_gradients(lambda t, v: weighted_cross_entropy(v["z"], labels, w),
                          {"z": rng.normal(size=(6, 3))})
    results.append(GradResult("weighted_cross_entropy", err["z"], COMPOSITE_TOL))
    x = np.zeros((1, 1, 5, 5, 5))
    x[0, 0, 1:4, :, 1:5] = rng.uniform(20, 240, size=(3, 5, 4))
    for mode, fn in (("dilation", pseudo_dilate), ("erosion", pseudo_erode)):
        for k in (3, 5):
            bank = init_pseudo_morph(mode, 1, rng, sigma=0.05).layers[0]
            proj = rng.normal(size=x.shape)

            def build(tape, v, mode=mode, fn=fn, k=k, proj=proj):
                p = PseudoMorphParams(mode, [{3: v["b3"], 5: v["b5"]}])
                return T.sum(T.mul(fn(p, tape.constant(x), _Draw(k)), proj))

            err = check_gradients(build, {"b3": bank[3], "b5": bank[5]}, max_probes=40, rng=rng)
            results.append(GradResult(f"pseudo_{mode}_k{k}", err[f"b{k}"], COMPOSITE_TOL))
    results.append(GradResult("end_to_end_L_total", end_to_end_error(rng), COMPOSITE_TOL))
    return results
