"""Command-line front end for the recognition pipeline.

One process runs one subcommand. Reports are JSON, tensors travel as
embedding files, tables as CSV. Binary artifacts get a `<path>.meta.json`
sidecar carrying the provenance header (tool version, seed, config hash);
JSON outputs embed the same header inline, CSV outputs carry it as a
leading comment line. Set PROTOGATE_LOG=debug for per-epoch chatter.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from .alignment import Projector, alignment_loss, compute_prototypes, train_pa
from .context import (
    ContextDictionary,
    FusionHead,
    build_dictionary,
    csr_forward_loss,
    train_csr,
)
from .dataio import (
    EmbeddingDataset,
    RunConfig,
    check_paired_views,
    load_embeddings,
    load_png,
    mask_center,
    save_embeddings,
    save_png,
)
from .errors import DataError, ProtogateError
from .numkit import grad_check
from .recognizer import (
    COMPARATORS,
    OPEN_METRICS,
    ModelBundle,
    NullFallback,
    PrototypeFallback,
    evaluate,
    sweep_threshold,
    write_sweep_csv,
)
from .selection import materialize_selection, select_representatives
from .serialize import (
    load_bank,
    load_dictionary,
    load_head,
    load_projector,
    save_bank,
    save_dictionary,
    save_head,
    save_projector,
)

log = logging.getLogger("protogate")

CONFIG_FIELDS = tuple(f.name for f in fields(RunConfig))

GRAD_TOLERANCE = 1e-4


# ---------------------------------------------------------------------------
# Config and provenance plumbing
# ---------------------------------------------------------------------------


def _add_config_flags(parser, names) -> None:
    parser.add_argument("--config", help="key=value config file")
    for name in names:
        kind = int if RunConfig.__dataclass_fields__[name].type == "int" else float
        parser.add_argument(
            f"--{name.replace('_', '-')}",
            dest=name,
            type=kind,
            default=None,
            help=f"override {name}",
        )


def _resolve_config(args) -> RunConfig:
    base = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        name: getattr(args, name)
        for name in CONFIG_FIELDS
        if getattr(args, name, None) is not None
    }
    return base.with_overrides(**overrides)


def _provenance(cfg: RunConfig) -> dict:
    digest = hashlib.sha256(cfg.canonical().encode()).hexdigest()
    return {
        "tool": "protogate",
        "version": __version__,
        "seed": cfg.seed,
        "config_sha256": digest,
    }


def _provenance_line(cfg: RunConfig) -> str:
    prov = _provenance(cfg)
    return (
        f"protogate {prov['version']} seed={prov['seed']} "
        f"config={prov['config_sha256']}"
    )


def _write_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_sidecar(out_path, cfg: RunConfig, extra: dict | None = None) -> None:
    """Provenance companion for artifacts whose own format is fixed."""
    body = {"provenance": _provenance(cfg)}
    if extra:
        body.update(extra)
    _write_json(body, f"{out_path}.meta.json")


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_mask(args) -> int:
    cfg = _resolve_config(args)
    img = load_png(args.input)
    masked = mask_center(img, cfg.gamma)
    save_png(masked, args.output)
    _write_sidecar(
        args.output,
        cfg,
        {"gamma": cfg.gamma, "height": img.height, "width": img.width},
    )
    log.info("masked %s -> %s (gamma=%d)", args.input, args.output, cfg.gamma)
    return 0


def cmd_select(args) -> int:
    cfg = _resolve_config(args)
    pool = load_embeddings(args.pool, args.pool_labels, view="full")
    report = select_representatives(pool, cfg.k, cfg.seed)
    chosen = materialize_selection(pool, report)
    save_embeddings(chosen, args.out)
    _write_sidecar(args.out, cfg, {"selection": report.to_dict()})
    if args.context:
        if not args.context_out:
            raise DataError("--context requires --context-out")
        ctx = load_embeddings(args.context, args.context_labels, view="context")
        check_paired_views(pool, ctx)
        chosen_ctx = materialize_selection(ctx, report)
        save_embeddings(chosen_ctx, args.context_out)
        _write_sidecar(args.context_out, cfg, {"selection": report.to_dict()})
    if args.report:
        _write_json(
            {"provenance": _provenance(cfg), "selection": report.to_dict()},
            args.report,
        )
    log.info(
        "selected %d rows (%d per class) -> %s",
        report.total_selected,
        cfg.k,
        args.out,
    )
    return 0


def cmd_build_context(args) -> int:
    cfg = _resolve_config(args)
    ctx = load_embeddings(args.context, args.context_labels, view="context")
    dictionary = build_dictionary(ctx, cfg.beta, cfg.seed)
    save_dictionary(dictionary, args.out)
    _write_sidecar(
        args.out,
        cfg,
        {"beta": dictionary.beta, "d": dictionary.d,
         "group_sizes": dictionary.group_sizes.tolist()},
    )
    log.info("built %d context prototypes -> %s", dictionary.beta, args.out)
    return 0


def cmd_train_csr(args) -> int:
    cfg = _resolve_config(args)
    train = load_embeddings(args.train, args.train_labels, view="full")
    dictionary = load_dictionary(args.dict)
    head, train_log = train_csr(train, dictionary, cfg, cfg.seed)
    save_head(head, args.out)
    _write_sidecar(args.out, cfg, {"train_log": train_log.to_dict()})
    if args.log:
        _write_json(
            {"provenance": _provenance(cfg), "train_log": train_log.to_dict()},
            args.log,
        )
    for rec in train_log.records:
        log.debug(
            "csr epoch %d stage %d lr %g loss %.6f acc %.3f",
            rec.epoch, rec.stage, rec.lr, rec.loss, rec.accuracy,
        )
    log.info("trained fusion head (%d epochs) -> %s", len(train_log), args.out)
    return 0


def cmd_train_pa(args) -> int:
    cfg = _resolve_config(args)
    train = load_embeddings(args.train, args.train_labels, view="full")
    projector, bank, train_log = train_pa(train, cfg, cfg.seed)
    save_projector(projector, args.out)
    _write_sidecar(args.out, cfg, {"train_log": train_log.to_dict()})
    save_bank(bank, train.class_names, args.bank)
    _write_sidecar(args.bank, cfg)
    if args.log:
        _write_json(
            {"provenance": _provenance(cfg), "train_log": train_log.to_dict()},
            args.log,
        )
    for rec in train_log.records:
        log.debug(
            "pa epoch %d lr %g loss %.6f align %.4f",
            rec.epoch, rec.lr, rec.loss, rec.accuracy,
        )
    log.info(
        "trained projector -> %s, prototypes -> %s", args.out, args.bank
    )
    return 0


def _load_bundle(args) -> ModelBundle:
    dictionary = load_dictionary(args.dict)
    head = load_head(args.head)
    projector = load_projector(args.projector)
    bank, _ = load_bank(args.bank)
    if args.fallback:
        fb_ds = load_embeddings(args.fallback, view="full")
        fallback = PrototypeFallback.from_dataset(fb_ds)
    else:
        fallback = NullFallback()
    return ModelBundle(dictionary, head, projector, bank, fallback)


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    test = load_embeddings(
        args.test, args.test_labels, view="full", allow_unknown=True
    )
    bundle = _load_bundle(args)
    report = evaluate(
        test, bundle, cfg.threshold, args.comparator, args.open_metric
    )
    _write_json(
        {
            "provenance": _provenance(cfg),
            "report": report.to_dict(include_decisions=args.decisions),
        },
        args.out,
    )
    log.info(
        "eval T=%g closed=%.4f open=%.4f overall=%.4f -> %s",
        cfg.threshold,
        report.closed_acc,
        report.open_acc,
        report.overall_acc,
        args.out,
    )
    return 0


def cmd_sweep_threshold(args) -> int:
    cfg = _resolve_config(args)
    try:
        thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
    except ValueError as e:
        raise DataError(f"bad --thresholds list: {args.thresholds!r}") from e
    if not thresholds:
        raise DataError("--thresholds must name at least one value")
    test = load_embeddings(
        args.test, args.test_labels, view="full", allow_unknown=True
    )
    bundle = _load_bundle(args)
    results = sweep_threshold(
        test, bundle, thresholds, args.comparator, args.open_metric
    )
    write_sweep_csv(results, args.out, comment=_provenance_line(cfg))
    log.info("swept %d thresholds -> %s", len(thresholds), args.out)
    return 0


# ---------------------------------------------------------------------------
# Gradient self-test
# ---------------------------------------------------------------------------


def _fusion_grad_suite(rng: np.random.Generator, trials: int) -> float:
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 7))
        d = int(rng.integers(2, 9))
        beta = int(rng.integers(1, 5))
        n_classes = int(rng.integers(2, 6))
        features = rng.normal(size=(n, d))
        labels = rng.integers(0, n_classes, size=n).astype(np.int64)
        priors = rng.random(beta) + 0.1
        priors = priors / priors.sum()
        dictionary = ContextDictionary(
            prototypes=rng.normal(size=(beta, d)),
            priors=priors,
            group_sizes=np.ones(beta, dtype=np.int64),
        )

        def loss_fn(params):
            head = FusionHead.from_params(params)
            return csr_forward_loss(features, labels, dictionary, head)

        params = {
            "query_proj": rng.normal(size=(d, d)) * 0.3,
            "key_proj": rng.normal(size=(d, d)) * 0.3,
            "cls_weight": rng.normal(size=(n_classes, d)) * 0.3,
            "cls_bias": rng.normal(size=n_classes) * 0.1,
        }
        worst = max(worst, grad_check(loss_fn, params))
    return worst


def _alignment_grad_suite(rng: np.random.Generator, trials: int) -> float:
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 7))
        d = int(rng.integers(2, 9))
        n_classes = int(rng.integers(2, 4))
        features = rng.normal(size=(n, d))
        labels = rng.integers(0, n_classes, size=n).astype(np.int64)
        labels[:n_classes] = np.arange(n_classes)
        ds = EmbeddingDataset(
            features, labels, [f"c{i}" for i in range(n_classes)]
        )
        bank = compute_prototypes(ds)

        def loss_fn(params):
            proj = Projector.from_params(params)
            return alignment_loss(features, labels, bank, proj)

        h = int(rng.integers(2, 9))
        params = {
            "w1": rng.normal(size=(h, d)) * 0.5,
            "b1": rng.normal(size=h) * 0.1,
            "w2": rng.normal(size=(d, h)) * 0.5,
            "b2": rng.normal(size=d) * 0.1,
        }
        worst = max(worst, grad_check(loss_fn, params))
    return worst


def cmd_selfcheck(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 12345)
    trials = args.trials
    fusion_err = _fusion_grad_suite(rng, trials)
    align_err = _alignment_grad_suite(rng, trials)
    print(f"fusion-loss gradients:    max_rel_err={fusion_err:.3e} "
          f"({trials} instances)")
    print(f"alignment-loss gradients: max_rel_err={align_err:.3e} "
          f"({trials} instances)")
    worst = max(fusion_err, align_err)
    if worst >= GRAD_TOLERANCE:
        raise DataError(
            f"gradient check failed: max relative error {worst:.3e} "
            f">= {GRAD_TOLERANCE}"
        )
    print(f"ok: all gradients within {GRAD_TOLERANCE}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protogate",
        description="few-shot open-set recognition over precomputed embeddings",
    )
    parser.add_argument(
        "--version", action="version", version=f"protogate {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="zero the center square of a PNG")
    p.add_argument("input")
    p.add_argument("output")
    _add_config_flags(p, ["gamma", "seed"])
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser(
        "select", help="pick k cluster-representative rows per class"
    )
    p.add_argument("--pool", required=True, help="candidate embeddings (EMB1)")
    p.add_argument("--pool-labels", help="labels CSV (default: sibling .csv)")
    p.add_argument("--out", required=True, help="selected embeddings (EMB1)")
    p.add_argument("--context", help="paired context-view embeddings")
    p.add_argument("--context-labels")
    p.add_argument("--context-out", help="selected context rows (EMB1)")
    p.add_argument("--report", help="selection report JSON")
    _add_config_flags(p, ["k", "seed"])
    p.set_defaults(func=cmd_select)

    p = sub.add_parser(
        "build-context", help="cluster context features into a dictionary"
    )
    p.add_argument("--context", required=True, help="context embeddings (EMB1)")
    p.add_argument("--context-labels")
    p.add_argument("--out", required=True, help="dictionary file")
    _add_config_flags(p, ["beta", "seed"])
    p.set_defaults(func=cmd_build_context)

    p = sub.add_parser("train-csr", help="train the fused closed-set head")
    p.add_argument("--train", required=True, help="training embeddings (EMB1)")
    p.add_argument("--train-labels")
    p.add_argument("--dict", required=True, help="context dictionary file")
    p.add_argument("--out", required=True, help="fusion head file")
    p.add_argument("--log", help="training log JSON")
    _add_config_flags(
        p,
        [
            "lr_main", "lr_classifier", "batch_size", "weight_decay",
            "epochs", "lr_decay_epoch", "lr_decay_factor", "stage1_epochs",
            "seed",
        ],
    )
    p.set_defaults(func=cmd_train_csr)

    p = sub.add_parser(
        "train-pa", help="train the alignment projector and prototype bank"
    )
    p.add_argument("--train", required=True, help="training embeddings (EMB1)")
    p.add_argument("--train-labels")
    p.add_argument("--out", required=True, help="projector file")
    p.add_argument("--bank", required=True, help="prototype bank (EMB1)")
    p.add_argument("--log", help="training log JSON")
    _add_config_flags(
        p,
        [
            "lr_main", "batch_size", "weight_decay", "epochs",
            "lr_decay_epoch", "lr_decay_factor", "mixup_alpha", "seed",
        ],
    )
    p.set_defaults(func=cmd_train_pa)

    def add_eval_inputs(p):
        p.add_argument("--test", required=True, help="test embeddings (EMB1)")
        p.add_argument("--test-labels")
        p.add_argument("--dict", required=True)
        p.add_argument("--head", required=True)
        p.add_argument("--projector", required=True)
        p.add_argument("--bank", required=True)
        p.add_argument("--fallback", help="fallback prototype embeddings (EMB1)")
        p.add_argument(
            "--comparator", choices=COMPARATORS, default=COMPARATORS[0]
        )
        p.add_argument(
            "--open-metric", choices=OPEN_METRICS, default=OPEN_METRICS[0]
        )

    p = sub.add_parser("eval", help="run the open-set recognizer on a test set")
    add_eval_inputs(p)
    p.add_argument("--out", required=True, help="evaluation report JSON")
    p.add_argument(
        "--decisions", action="store_true",
        help="include per-sample decisions in the report",
    )
    _add_config_flags(p, ["threshold", "seed"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "sweep-threshold", help="evaluate across a list of gate thresholds"
    )
    add_eval_inputs(p)
    p.add_argument(
        "--thresholds", required=True, help="comma-separated threshold values"
    )
    p.add_argument("--out", required=True, help="sweep table CSV")
    _add_config_flags(p, ["seed"])
    p.set_defaults(func=cmd_sweep_threshold)

    p = sub.add_parser(
        "selfcheck", help="verify analytic gradients against finite differences"
    )
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_selfcheck)

    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("PROTOGATE_LOG", "warning").lower()
    levels = {
        "quiet": logging.CRITICAL,
        "warning": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }
    logging.basicConfig(
        stream=sys.stderr,
        level=levels.get(level_name, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProtogateError as e:
        print(f"{e.category}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
