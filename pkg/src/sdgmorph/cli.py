"""Command-line entry point: ``sdgmorph <subcommand> ...``.

Exit codes: 0 success, 1 contract violation (including usage errors),
2 I/O or parse error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import affine_mci, cutmix3d, sample_affine
from .config import TrainConfig
from .io import FormatError, load_checkpoint, load_volume, read_manifest, save_checkpoint, \
    save_volume, write_dataset, write_manifest
from .metrics import MetricReport
from .model import ModelSpec, init_params, pseudo_morph_params, spec_from_params
from .phantoms import LabeledSample, derive_seed, make_datasets
from .pseudo_morph import apply_to_array
from .selfcheck import gradient_suite, oracle_check
from .tensor import ContractError
from .training import TrainingDiverged, evaluate, fit

log = logging.getLogger("sdgmorph")

DEFAULT_SEED = 42
EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit 1."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed).validate()
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, targets = make_datasets(cfg.data_config())
    lines = write_dataset(out, source, "source")
    for dom, samples in sorted(targets.items()):
        lines += write_dataset(out, samples, f"target_{dom}")
    write_manifest(out, lines)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    print(f"wrote {len(lines)} volumes to {out} "
          f"(source {len(source)}, " + ", ".join(f"domain {d} {len(s)}" for d, s in
                                              sorted(targets.items())) + ")")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    samples = read_manifest(args.data, domain=0)
    if not samples:
        raise ContractError(f"{args.data}: manifest lists no source-domain (0) samples")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = fit(samples, cfg)
    text = cfg.to_text()
    (out / "config.txt").write_text(text, encoding="utf-8")
    save_checkpoint(out / "checkpoint.sdgc", result.params, cfg.digest())
    (out / "train_log.tsv").write_text(result.log_text(), encoding="utf-8")
    if result.log:
        best = result.log[result.best_epoch].val
        (out / "val_report.tsv").write_text(MetricReport.tsv_header() + "\n" + best.tsv() + "\n",
                                            encoding="utf-8")
        print(f"best epoch {result.best_epoch}: {best.text()}")
    print(f"checkpoint written to {out / 'checkpoint.sdgc'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, digest = load_checkpoint(args.checkpoint)
    spec_from_params(params)
    if args.config is not None:
        cfg = _load_config(args)
        if cfg.digest() != digest:
            raise ContractError(f"{args.checkpoint}: config digest does not match {args.config}")
        if cfg.model_spec() != spec_from_params(params):
            raise ContractError(f"{args.checkpoint}: architecture differs from {args.config}")
    samples = read_manifest(args.data, domain=args.domain)
    if not samples:
        raise ContractError(f"{args.data}: no samples for domain {args.domain}")
    report = evaluate(params, samples, args.domain)
    tsv = MetricReport.tsv_header() + "\n" + report.tsv() + "\n"
    print(report.text())
    sys.stdout.write(tsv)
    if args.out:
        Path(args.out).write_text(tsv, encoding="utf-8")
    return EXIT_OK


def cmd_preview_aug(args) -> int:
    sample = load_volume(args.input)
    seed = DEFAULT_SEED if args.seed is None else args.seed
    rng = np.random.default_rng(derive_seed(seed, 5))
    if args.mode in ("dilate", "erode"):
        if args.checkpoint:
            params, _ = load_checkpoint(args.checkpoint)
            spec_from_params(params)
        else:
            # freshly initialised augmenters: near-exact morphology
            params = init_params(ModelSpec(), np.random.default_rng(derive_seed(seed, 1)))
        mode = "dilation" if args.mode == "dilate" else "erosion"
        out = apply_to_array(pseudo_morph_params(params, mode), sample.volume, rng)
    elif args.mode == "mci":
        out = affine_mci(sample.volume, sample_affine(rng))
    else:
        if not args.other:
            raise UsageError("preview-aug --mode cutmix needs --other F (the second volume)")
        other = load_volume(args.other)
        out = cutmix3d(sample.volume, other.volume, rng)
    save_volume(args.out, LabeledSample(out, sample.label, sample.domain))
    print(f"{args.mode}: {args.input} -> {args.out}  "
          f"foreground {np.count_nonzero(sample.volume)} -> {np.count_nonzero(out)} voxels, "
          f"mean {sample.volume.mean():.3f} -> {out.mean():.3f}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    report = oracle_check(args.trials, np.random.default_rng(derive_seed(seed, 6)))
    print(f"morphology trials: {report.trials}, failures: {len(report.morphology_failures)}")
    for t, name, shape, k in report.morphology_failures[:10]:
        print(f"  trial {t}: {name} mismatch, shape {shape}, k={k}")
    print(f"pseudo-morphology identity trials: "
          + ", ".join(f"k={k}: {n}" for k, n in report.pseudo_trials.items())
          + f", max abs error {report.pseudo_max_error:.3e}")
    if not report.ok:
        raise ContractError("oracle check failed")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    failed = []
    for r in gradient_suite(np.random.default_rng(derive_seed(seed, 7))):
        tol = r.tol if args.tol is None else min(r.tol, args.tol)
        status = "ok" if r.error <= tol else "FAIL"
        print(f"{r.name:28s} rel err {r.error:.3e}  tol {tol:.0e}  {status}")
        if status != "ok":
            failed.append(r.name)
    if failed:
        raise ContractError(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdgmorph", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None,
                       help=f"random seed (default: config value, else {DEFAULT_SEED})")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate source and target phantom sets")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train on the source domain of a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "evaluate a checkpoint on one domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", type=int, required=True)
    p.add_argument("--config", default=None, help="optionally verify the checkpoint's config")
    p.add_argument("--out", default=None, help="also write the TSV report here")

    p = add("preview-aug", cmd_preview_aug, "apply one augmentation to an SDGV volume")
    p.add_argument("--input", required=True)
    p.add_argument("--mode", required=True, choices=["dilate", "erode", "mci", "cutmix"])
    p.add_argument("--out", required=True)
    p.add_argument("--other", default=None, help="second volume for cutmix")
    p.add_argument("--checkpoint", default=None, help="use trained augmenter kernels")

    p = add("oracle-check", cmd_oracle_check, "exact-morphology and identity-equivalence oracles")
    p.add_argument("--trials", type=int, default=200)

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    p.add_argument("--tol", type=float, default=None,
                   help="tighten every tolerance to at most this value")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONTRACT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
