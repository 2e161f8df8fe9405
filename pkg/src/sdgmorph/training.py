"""Class-routed training loop with contrastive regularisation.

Each micro-batch takes one of three paths:

* all MCI: sub-volume mixing between neighbours, cross-entropy on the mixes;
* all one non-MCI class: cross-entropy only;
* mixed: cross-entropy on the originals, one class-specific augmented view
  per sample, and the supervised contrastive loss over originals and views.

Gradients from ``effective_batch / micro_batch`` micro-batches are averaged
before each SGD step.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import affine_mci, cutmix3d, sample_affine
from .config import TrainConfig
from .losses import class_weights_inverse_frequency, supcon_loss, total_loss, weighted_cross_entropy
from .metrics import MetricReport, confusion, metrics
from .model import bind, feature_map, forward, init_params, pseudo_morph_params, predict, project_normalize
from .phantoms import AD, MCI, NC, LabeledSample, derive_seed, split_80_20
from .pseudo_morph import pseudo_dilate, pseudo_erode
from .tensor import ContractError, Tape, Var

log = logging.getLogger(__name__)

# stream tags for derive_seed
_INIT, _SHUFFLE, _AUGMENT, _SPLIT = 1, 2, 3, 4


class Route(enum.Enum):
    UNIFORM_MCI = "uniform_mci"
    UNIFORM_OTHER = "uniform_other"
    MIXED = "mixed"


class TrainingDiverged(RuntimeError):
    pass


def batch_route(labels) -> Route:
    labels = list(labels)
    if not labels:
        raise ContractError("empty batch")
    if len(set(labels)) > 1:
        return Route.MIXED
    return Route.UNIFORM_MCI if labels[0] == MCI else Route.UNIFORM_OTHER


def lr_schedule(epoch: int, lr0: float, decay: float = 0.05) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return lr0 * (1.0 - decay) ** epoch


def augment_view(x: Var, label: int, p: dict, cfg: TrainConfig, rng: np.random.Generator) -> Var:
    """Class-specific view of one sample ``x`` [1, 1, D, H, W] on the tape of ``p``."""
    if label == NC:
        if not cfg.use_pseudo_morph:
            return x
        return pseudo_dilate(pseudo_morph_params(p, "dilation"), x, rng)
    if label == MCI:
        if not cfg.use_mci_affine:
            return x
        ranges = cfg.affine_ranges()
        view = affine_mci(x.value[0, 0], sample_affine(rng, **ranges), **ranges)
        return x.tape.constant(view[None, None])
    if label == AD:
        if not cfg.use_pseudo_morph:
            return x
        return pseudo_erode(pseudo_morph_params(p, "erosion"), x, rng)
    raise ContractError(f"unknown label {label}")


def dispatch_augment(sample: LabeledSample, params: dict, cfg: TrainConfig,
                     rng: np.random.Generator) -> LabeledSample:
    """Array-level wrapper of :func:`augment_view`."""
    tape = Tape()
    p = bind(params, tape, requires_grad=False)
    view = augment_view(tape.constant(sample.volume[None, None]), sample.label, p, cfg, rng)
    return LabeledSample(view.value[0, 0].copy(), sample.label, sample.domain)


@dataclass
class StepReport:
    route: Route
    l_ce: float
    l_scl: float = None
    n_embeddings: int = 0
    stepped: bool = False


def compute_gradients(x: np.ndarray, labels, params: dict, cfg: TrainConfig,
                      weights, rng: np.random.Generator):
    """Forward/backward for one micro-batch. Returns (report, grads by name)."""
    labels = [int(v) for v in labels]
    route = batch_route(labels)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x[:, None]
    B = len(labels)
    if route is Route.UNIFORM_MCI and cfg.use_cutmix and B > 1:
        frac = (cfg.cutmix_min, cfg.cutmix_max)
        x = np.stack([cutmix3d(x[i, 0], x[(i + 1) % B, 0], rng, fraction=frac)
                      for i in range(B)])[:, None]
    tape = Tape()
    p = bind(params, tape)
    fmap, logits = forward(p, tape.constant(x))
    l_ce = weighted_cross_entropy(logits, labels, weights)
    l_scl = None
    n_emb = 0
    if route is Route.MIXED and cfg.use_scl:
        views = T.concat([augment_view(tape.constant(x[i:i + 1]), labels[i], p, cfg, rng)
                          for i in range(B)], axis=0)
        q = T.concat([project_normalize(p, None, fmap), project_normalize(p, views)], axis=0)
        n_emb = q.shape[0]
        l_scl = supcon_loss(q, labels + labels, cfg.tau, weights)
    loss = total_loss(l_ce, l_scl, cfg.lam)
    report = StepReport(route, float(l_ce.value),
                        None if l_scl is None else float(l_scl.value), n_emb)
    if not np.isfinite(loss.value):
        norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
        raise TrainingDiverged(f"non-finite loss {report}; labels {labels}; parameter norms {norms}")
    grads = tape.backward(loss)
    return report, {name: grads[v] for name, v in p.items()}


@dataclass
class OptimizerState:
    velocity: dict
    epoch: int = 0
    lr: float = 0.0
    accum: dict = field(default_factory=dict)
    accum_batches: int = 0
    accum_samples: int = 0
    steps: int = 0

    @classmethod
    def create(cls, params: dict, lr: float) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, 0, lr)


def sgd_update(params: dict, grads: dict, opt: OptimizerState, lr: float,
               momentum: float = 0.9, weight_decay: float = 0.0005) -> dict:
    """In place: g = grad + wd * p;  v = momentum * v + g;  p -= lr * v."""
    for name, param in params.items():
        g = grads[name]
        if g.shape != param.shape or opt.velocity[name].shape != param.shape:
            raise ContractError(f"{name}: gradient {g.shape} vs parameter {param.shape}")
        g = g + weight_decay * param
        v = opt.velocity[name]
        v *= momentum
        v += g
        param -= lr * v
    opt.steps += 1
    return params


def train_step(x, labels, params: dict, opt: OptimizerState, cfg: TrainConfig, weights,
               rng: np.random.Generator) -> StepReport:
    if len(labels) != cfg.micro_batch:
        raise ContractError(f"micro-batch of {len(labels)} != configured {cfg.micro_batch}")
    report, grads = compute_gradients(x, labels, params, cfg, weights, rng)
    for name, g in grads.items():
        if name in opt.accum:
            opt.accum[name] += g
        else:
            opt.accum[name] = g.copy()
    opt.accum_batches += 1
    opt.accum_samples += len(labels)
    if opt.accum_samples >= cfg.effective_batch:
        mean_grads = {k: g / opt.accum_batches for k, g in opt.accum.items()}
        sgd_update(params, mean_grads, opt, opt.lr, cfg.momentum, cfg.weight_decay)
        opt.accum = {}
        opt.accum_batches = opt.accum_samples = 0
        report.stepped = True
    return report


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_ce: float
    mean_scl: float
    routes: dict
    val: MetricReport

    FIELDS = ("epoch", "lr", "mean_ce", "mean_scl", "n_uniform_mci", "n_uniform_other",
              "n_mixed", "val_acc", "val_f1", "val_sen", "val_spe")

    def tsv(self) -> str:
        cols = [str(self.epoch), f"{self.lr:.10f}", f"{self.mean_ce:.10f}", f"{self.mean_scl:.10f}"]
        cols += [str(self.routes[r]) for r in Route]
        cols += [f"{v:.10f}" for v in (self.val.accuracy, self.val.f1,
                                       self.val.sensitivity, self.val.specificity)]
        return "\t".join(cols)


@dataclass
class FitResult:
    params: dict
    log: list
    best_epoch: int
    class_weights: np.ndarray

    def log_text(self) -> str:
        return "".join(rec.tsv() + "\n" for rec in self.log)


def evaluate(params: dict, samples: list, domain: int = -1) -> MetricReport:
    if not samples:
        raise ContractError("cannot evaluate an empty dataset")
    logits = predict(params, np.stack([s.volume for s in samples]))
    cm = confusion(np.argmax(logits, axis=1), [s.label for s in samples])
    return metrics(cm, domain)


def class_counts(samples: list) -> np.ndarray:
    return np.bincount([s.label for s in samples], minlength=3)


def fit_split(train: list, val: list, cfg: TrainConfig) -> FitResult:
    """Train on ``train``; keep the parameters with the best validation macro-F1."""
    cfg.validate()
    if not train or not val:
        raise ContractError("training and validation splits must be nonempty")
    params = init_params(cfg.model_spec(), np.random.default_rng(derive_seed(cfg.seed, _INIT)))
    weights = class_weights_inverse_frequency(class_counts(train))
    opt = OptimizerState.create(params, cfg.lr0)
    volumes = np.stack([s.volume for s in train])[:, None]
    labels = np.array([s.label for s in train])
    records = []
    best = (-1.0, {k: v.copy() for k, v in params.items()}, -1)
    n_batches = len(train) // cfg.micro_batch
    for epoch in range(cfg.epochs):
        opt.epoch = epoch
        opt.lr = lr_schedule(epoch, cfg.lr0, cfg.lr_decay_per_epoch)
        order = np.random.default_rng(derive_seed(cfg.seed, _SHUFFLE, epoch)).permutation(len(train))
        ce, scl = [], []
        routes = {r: 0 for r in Route}
        for b in range(n_batches):
            idx = order[b * cfg.micro_batch:(b + 1) * cfg.micro_batch]
            rng = np.random.default_rng(derive_seed(cfg.seed, _AUGMENT, epoch, b))
            rep = train_step(volumes[idx], labels[idx], params, opt, cfg, weights, rng)
            routes[rep.route] += 1
            ce.append(rep.l_ce)
            if rep.l_scl is not None:
                scl.append(rep.l_scl)
        report = evaluate(params, val, val[0].domain)
        rec = EpochRecord(epoch, opt.lr, float(np.mean(ce)) if ce else 0.0,
                          float(np.mean(scl)) if scl else 0.0, routes, report)
        records.append(rec)
        log.info("epoch %d  lr %.5f  ce %.4f  scl %.4f  val F1 %.3f", epoch, opt.lr,
                 rec.mean_ce, rec.mean_scl, report.f1)
        if report.f1 > best[0]:
            best = (report.f1, {k: v.copy() for k, v in params.items()}, epoch)
    return FitResult(best[1], records, best[2], weights)


def fit(dataset: list, cfg: TrainConfig) -> FitResult:
    """80/20 stratified split of a single-domain ``dataset``, then :func:`fit_split`."""
    if not dataset:
        raise ContractError("empty dataset")
    if len({s.domain for s in dataset}) != 1:
        raise ContractError("training data must come from a single domain")
    train, val = split_80_20(dataset, np.random.default_rng(derive_seed(cfg.seed, _SPLIT)))
    return fit_split(train, val, cfg)


def dataset_cross_entropy(params: dict, samples: list, weights) -> float:
    """Weighted CE of ``params`` over ``samples`` (no augmentation)."""
    logits = predict(params, np.stack([s.volume for s in samples]))
    tape = Tape()
    return float(weighted_cross_entropy(tape.constant(logits), [s.label for s in samples],
                                        weights).value)
