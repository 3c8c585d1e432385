"""Command-line front end: gen, train, protocol, noise, ablate, embed.

Exit codes: 0 success, 2 usage/config error, 3 data or I/O error,
4 numeric failure (non-finite loss).  Every command is deterministic
given identical flags, seed, and inputs; wall-clock timing therefore
goes to the log, never into an artifact.

Heavy imports happen inside the handlers so `--threads` can pin the
BLAS thread-count environment variables before numpy first loads.
`PAA_LOG_LEVEL` (error|info|debug) controls verbosity on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import Optional, Tuple

log = logging.getLogger("paalign.cli")

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)
_LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}
_BUILTIN_MAPS = ("seed", "seed_iv", "seed_v")


def _set_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


class _LiveStderr(logging.StreamHandler):
    """Always writes to the current sys.stderr, which callers may swap."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _setup_logging() -> None:
    raw = os.environ.get("PAA_LOG_LEVEL", "info").strip().lower()
    handler = _LiveStderr()
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg = logging.getLogger("paalign")
    pkg.handlers[:] = [handler]
    pkg.propagate = False
    pkg.setLevel(_LOG_LEVELS.get(raw, logging.INFO))
    if raw and raw not in _LOG_LEVELS:
        log.warning("unknown PAA_LOG_LEVEL %r, using info", raw)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _resource_text(*parts: str) -> Optional[str]:
    from importlib import resources

    node = resources.files("paalign")
    for part in parts:
        node = node.joinpath(part)
    if not node.is_file():
        return None
    return node.read_text(encoding="utf-8")


def _schema(name: str) -> dict:
    text = _resource_text("schemas", name)
    if text is None:
        raise RuntimeError(f"packaged schema {name!r} is missing")
    return json.loads(text)


def _write_json(obj: dict, schema_name: str, path: str) -> None:
    import jsonschema

    jsonschema.validate(obj, _schema(schema_name))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %s", path)


def _label_map(arg: Optional[str]):
    """A label map from a file path or a packaged name (seed, seed_iv, ...)."""
    if arg is None:
        return None
    from .data import DataError, LabelMap

    if os.path.exists(arg):
        return LabelMap.from_json(arg)
    text = _resource_text("labelmaps", f"{arg}.json")
    if text is None:
        raise DataError(
            f"label map {arg!r} is neither a readable file nor one of the "
            f"builtin maps {', '.join(_BUILTIN_MAPS)}"
        )
    obj = json.loads(text)
    return LabelMap(mapping={str(k): str(v) for k, v in obj.items()})


def _load_corpus(manifest: str, map_arg: Optional[str]):
    from .data import load_export

    corpus = load_export(manifest, _label_map(map_arg))
    log.debug("loaded %s: %d rows, dim %d", corpus.name, len(corpus), corpus.dim)
    return corpus


def _load_config(path: str, seed_override: Optional[int]):
    from dataclasses import replace

    from .trainer import parse_config, validate_config

    with open(path, "r", encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    if seed_override is not None:
        cfg = validate_config(replace(cfg, seed=int(seed_override)))
    return cfg


def _out_path(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _cell_report(cfg, source, target, test) -> dict:
    from .trainer import Trainer

    return Trainer(cfg, source, target, test).run()


def _run_cells(cells, workers: int) -> dict:
    """Run isolated training cells, serially or in worker processes.

    Results are keyed, so aggregation downstream is independent of
    completion order.
    """
    if workers <= 1:
        return {key: _cell_report(*payload) for key, payload in cells}
    import concurrent.futures as cf

    out = {}
    with cf.ProcessPoolExecutor(max_workers=workers) as pool:
        pending = {pool.submit(_cell_report, *payload): key for key, payload in cells}
        for fut in cf.as_completed(pending):
            out[pending[fut]] = fut.result()
    return out


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def _parse_floats(text: str, flag: str) -> Tuple[float, ...]:
    from .trainer import ConfigError

    try:
        return tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"{flag} expects comma-separated numbers: {exc}") from exc


def cmd_gen(args) -> None:
    from .trainer import ConfigError

    from .data import STANDARD_BENCHMARK, ShiftSpec, gen_synthetic_pair, write_export

    b = STANDARD_BENCHMARK

    def pick(value, key):
        return b[key] if value is None else value

    dim = pick(args.dim, "d")
    classes = pick(args.classes, "classes")
    n_source = pick(args.n_source, "n_source")
    n_target = pick(args.n_target, "n_target")
    subjects = pick(args.subjects, "subjects")
    sessions = pick(args.sessions, "sessions")
    if dim < 2:
        raise ConfigError(f"--dim must be >= 2, got {dim}")
    if classes < 2:
        raise ConfigError(f"--classes must be >= 2, got {classes}")
    if n_source < classes or n_target < classes:
        raise ConfigError("--n-source/--n-target must be >= --classes")
    if subjects < 1:
        raise ConfigError(f"--subjects must be >= 1, got {subjects}")
    if not 1 <= sessions <= 3:
        raise ConfigError(f"--sessions must lie in 1..3, got {sessions}")

    prior = (
        b["prior_shift"] if args.prior is None else _parse_floats(args.prior, "--prior")
    )
    if len(prior) != classes:
        raise ConfigError(f"--prior has {len(prior)} entries for {classes} classes")
    if any(p < 0.0 for p in prior):
        raise ConfigError("--prior entries must be >= 0")
    if abs(sum(prior) - 1.0) > 1e-9:
        raise ConfigError(f"--prior sums to {sum(prior)!r}, expected 1")
    noise = pick(args.noise_scale, "noise_scale")
    if noise < 0.0:
        raise ConfigError(f"--noise-scale must be >= 0, got {noise}")

    shift = ShiftSpec(
        mean_shift=pick(args.shift, "mean_shift"),
        rotation_angle=pick(args.rotation, "rotation_angle"),
        prior_shift=tuple(prior),
        noise_scale=noise,
    )
    seed = 0 if args.seed is None else args.seed
    source, target = gen_synthetic_pair(
        seed, dim, classes, n_source, n_target, shift,
        subjects=subjects, sessions=sessions,
    )
    write_export(source, _out_path(args, "source.json"))
    write_export(target, _out_path(args, "target.json"))
    log.info(
        "generated %d source / %d target rows (dim %d, %d classes) in %s",
        n_source, n_target, dim, classes, args.out,
    )


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> None:
    from .trainer import (
        ConfigError,
        Trainer,
        config_hash,
        resume_trainer,
        save_checkpoint,
    )

    source = _load_corpus(args.source, args.source_label_map)
    target = _load_corpus(args.target, args.target_label_map)
    test = (
        _load_corpus(args.test, args.target_label_map) if args.test else None
    )

    if args.resume:
        trainer = resume_trainer(args.resume, source, target, test)
        if args.config:
            cfg = _load_config(args.config, args.seed)
            if config_hash(cfg) != config_hash(trainer.cfg):
                raise ConfigError(
                    "--config disagrees with the checkpoint configuration"
                )
        log.info("resumed at epoch %d from %s", trainer.epochs_done, args.resume)
    else:
        if not args.config:
            raise ConfigError("train needs --config unless --resume is given")
        cfg = _load_config(args.config, args.seed)
        trainer = Trainer(cfg, source, target, test)

    report = trainer.run(stop_epoch=args.stop_epoch)
    seconds = report.pop("timing")["seconds_total"]
    log.info(
        "trained to epoch %d in %.1fs (final accuracy %s)",
        report["epochs_run"], seconds, report["final"]["accuracy"],
    )
    _write_json(report, "run_report.schema.json", _out_path(args, "run_report.json"))
    ckpt = _out_path(args, "final.ckpt")
    save_checkpoint(trainer, ckpt)
    log.info("wrote %s", ckpt)


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------


def _write_confusion_csv(confusion, class_names, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\predicted", *class_names])
        for name, row in zip(class_names, confusion):
            writer.writerow([name, *[int(v) for v in row]])
    log.info("wrote %s", path)


def cmd_protocol(args) -> None:
    import numpy as np

    from .data import protocol_splits
    from .trainer import config_dict, config_hash

    cfg = _load_config(args.config, args.seed)
    source = _load_corpus(args.source, args.source_label_map)
    target = _load_corpus(args.target, args.target_label_map)
    folds = protocol_splits(source, target, args.protocol)
    log.info("protocol %d: %d fold(s)", args.protocol, len(folds))

    cells = [
        (f.fold_id, (cfg, f.train_source, f.train_target, f.test)) for f in folds
    ]
    reports = _run_cells(cells, args.workers)

    fold_rows = []
    accuracies = []
    confusion_total = np.zeros((target.classes, target.classes), dtype=np.int64)
    for f in folds:
        final = reports[f.fold_id]["final"]
        accuracies.append(final["accuracy"])
        confusion_total += np.asarray(final["confusion"], dtype=np.int64)
        fold_rows.append({
            "fold_id": f.fold_id,
            "n_train_source": len(f.train_source),
            "n_train_target": len(f.train_target),
            "n_test": len(f.test),
            "accuracy": final["accuracy"],
            "per_class_recall": final["per_class_recall"],
            "confusion": final["confusion"],
        })
        log.info("fold %d: accuracy %.4f", f.fold_id, final["accuracy"])

    acc = np.asarray(accuracies, dtype=np.float64)
    result = {
        "schema": "paalign.protocol_result.v1",
        "protocol": args.protocol,
        "source_name": source.name,
        "target_name": target.name,
        "config": config_dict(cfg),
        "config_hash": config_hash(cfg),
        "folds": fold_rows,
        "mean_accuracy": float(acc.mean()),
        # population std over folds, matching "(Acc% +/- Std%)" reporting
        "std_accuracy": float(acc.std(ddof=0)),
        "pooled_accuracy": float(
            np.trace(confusion_total) / confusion_total.sum()
        ),
        "confusion_total": confusion_total.tolist(),
    }
    _write_json(
        result, "protocol_result.schema.json", _out_path(args, "protocol_result.json")
    )
    _write_confusion_csv(
        confusion_total, target.class_names, _out_path(args, "confusion.csv")
    )
    log.info(
        "protocol %d accuracy %.4f +/- %.4f over %d fold(s)",
        args.protocol, result["mean_accuracy"], result["std_accuracy"], len(folds),
    )


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def cmd_noise(args) -> None:
    from dataclasses import replace

    from .data import inject_label_noise
    from .trainer import ConfigError, config_dict, config_hash, validate_config

    cfg = _load_config(args.config, args.seed)
    if cfg.ablation != "none":
        raise ConfigError(
            "noise sweeps compare the pairwise loss against its cross-entropy "
            "replacement; the base config must keep ablation none"
        )
    ratios = sorted(set(_parse_floats(args.ratios, "--ratios")))
    if len(ratios) < 2:
        raise ConfigError("--ratios needs at least two distinct values")
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ConfigError("--ratios entries must lie in [0, 1]")

    source = _load_corpus(args.source, args.source_label_map)
    target = _load_corpus(args.target, args.target_label_map)

    strategies = {
        "ral": cfg,
        "ssl": validate_config(replace(cfg, ablation="no-ral-both")),
    }
    cells = []
    for strategy in sorted(strategies):
        for ratio in ratios:
            # same corruption draw for both strategies: paired comparison
            noisy = inject_label_noise(source, ratio, cfg.seed)
            cells.append(
                ((strategy, ratio), (strategies[strategy], noisy, target, target))
            )
    reports = _run_cells(cells, args.workers)

    runs = [
        {
            "strategy": strategy,
            "ratio": ratio,
            "accuracy": reports[(strategy, ratio)]["final"]["accuracy"],
        }
        for (strategy, ratio) in sorted(reports)
    ]

    def gap(strategy: str) -> Optional[float]:
        by_ratio = {
            ratio: reports[(strategy, ratio)]["final"]["accuracy"]
            for ratio in ratios
        }
        if 0.1 not in by_ratio or 0.4 not in by_ratio:
            return None
        return by_ratio[0.1] - by_ratio[0.4]

    result = {
        "schema": "paalign.noise_sweep.v1",
        "config": config_dict(cfg),
        "config_hash": config_hash(cfg),
        "ratios": list(ratios),
        "runs": runs,
        "gaps": {"ral": gap("ral"), "ssl": gap("ssl")},
    }
    _write_json(result, "noise_sweep.schema.json", _out_path(args, "noise_sweep.json"))
    log.info("noise gaps: ral=%s ssl=%s", result["gaps"]["ral"], result["gaps"]["ssl"])


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(args) -> None:
    from dataclasses import replace

    from .trainer import (
        ABLATIONS,
        STAGE_ABLATIONS,
        ConfigError,
        config_dict,
        config_hash,
        validate_config,
    )

    cfg = _load_config(args.config, args.seed)
    if cfg.ablation != "none":
        raise ConfigError("ablation sweeps start from a config with ablation none")

    if args.switch:
        requested = list(args.switch)
    elif cfg.variant == "M":
        requested = list(ABLATIONS)
    else:
        requested = [a for a in ABLATIONS if a not in STAGE_ABLATIONS]

    variants = {}
    wanted = []
    for raw in requested:
        scfg = validate_config(replace(cfg, ablation=raw))
        if scfg.ablation not in variants:
            wanted.append(scfg.ablation)
            variants[scfg.ablation] = scfg
    if "none" not in variants:  # the baseline always runs; deltas need it
        variants["none"] = cfg

    source = _load_corpus(args.source, args.source_label_map)
    target = _load_corpus(args.target, args.target_label_map)
    order = [name for name in ABLATIONS if name in variants]
    cells = [(name, (variants[name], source, target, target)) for name in order]
    reports = _run_cells(cells, args.workers)

    baseline = reports["none"]["final"]["accuracy"]
    results = []
    for name in (n for n in ABLATIONS if n in wanted):
        accuracy = reports[name]["final"]["accuracy"]
        results.append({
            "ablation": name,
            "accuracy": accuracy,
            "delta_vs_none": accuracy - baseline,
        })
        log.info("ablation %s: accuracy %.4f", name, accuracy)

    result = {
        "schema": "paalign.ablation.v1",
        "config": config_dict(cfg),
        "config_hash": config_hash(cfg),
        "baseline_accuracy": baseline,
        "results": results,
    }
    _write_json(result, "ablation.schema.json", _out_path(args, "ablation.json"))


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------


def cmd_embed(args) -> None:
    from .trainer import resume_trainer

    source = _load_corpus(args.source, args.source_label_map)
    target = _load_corpus(args.target, args.target_label_map)
    trainer = resume_trainer(args.checkpoint, source, target)

    z_s = trainer.model.embed_np(trainer.transform_source(source.features))
    z_t = trainer.model.embed_np(trainer.transform_target(target.features))
    pred_s = trainer.predict_source(source.features)
    pred_t = trainer.predict_target(target.features)

    path = _out_path(args, "embeddings.csv")
    width = z_s.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sample_id", "domain", "true_label", "predicted_label"]
            + [f"z_{i + 1}" for i in range(width)]
        )
        sample_id = 0
        for domain, z, pred, labels in (
            ("source", z_s, pred_s, source.labels),
            ("target", z_t, pred_t, target.labels),
        ):
            for i in range(z.shape[0]):
                writer.writerow(
                    [sample_id, domain, int(labels[i]), int(pred[i])]
                    + [repr(float(v)) for v in z[i]]
                )
                sample_id += 1
    log.info("wrote %s (%d rows)", path, sample_id)


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def _corpus_flags(p: argparse.ArgumentParser, with_test: bool = False) -> None:
    p.add_argument("--source", required=True, metavar="MANIFEST",
                   help="source corpus manifest JSON")
    p.add_argument("--target", required=True, metavar="MANIFEST",
                   help="target corpus manifest JSON")
    p.add_argument("--source-label-map", default=None, metavar="NAME|PATH",
                   help="label map for the source corpus (builtin name or file)")
    p.add_argument("--target-label-map", default=None, metavar="NAME|PATH",
                   help="label map for the target (and test) corpus")
    if with_test:
        p.add_argument("--test", default=None, metavar="MANIFEST",
                       help="held-out corpus for the final evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paalign",
        description="Prototype-driven adversarial alignment experiments.",
    )
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config/generation seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread count (default 1, keeps runs bit-reproducible)")
    parser.add_argument("--out", default=".", metavar="DIR",
                        help="output directory (default: current)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic cross-corpus pair")
    p.add_argument("--dim", type=int, default=None, help="feature dimension (default 16)")
    p.add_argument("--classes", type=int, default=None, help="class count (default 3)")
    p.add_argument("--n-source", type=int, default=None, help="source rows (default 3000)")
    p.add_argument("--n-target", type=int, default=None, help="target rows (default 3000)")
    p.add_argument("--shift", type=float, default=None,
                   help="target mean translation (default 1.5)")
    p.add_argument("--rotation", type=float, default=None,
                   help="target noise rotation in radians (default 0.5)")
    p.add_argument("--prior", default=None, metavar="P1,P2,...",
                   help="target class prior (default 0.4,0.35,0.25)")
    p.add_argument("--noise-scale", type=float, default=None,
                   help="extra isotropic target noise (default: benchmark value)")
    p.add_argument("--subjects", type=int, default=None,
                   help="pseudo-subjects per corpus (default 15)")
    p.add_argument("--sessions", type=int, default=None,
                   help="pseudo-sessions per corpus (default 3)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model and emit report + checkpoint")
    p.add_argument("--config", default=None, metavar="FILE", help="key = value config")
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="checkpoint to continue from (requires the original corpora)")
    p.add_argument("--stop-epoch", type=int, default=None, metavar="N",
                   help="pause after epoch N instead of the configured horizon")
    _corpus_flags(p, with_test=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protocol", help="run a cross-validation protocol")
    p.add_argument("--protocol", type=int, required=True, choices=(1, 2, 3, 4))
    p.add_argument("--config", required=True, metavar="FILE")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel fold runners (default 1)")
    _corpus_flags(p)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("noise", help="label-noise sweep, pairwise vs cross-entropy")
    p.add_argument("--config", required=True, metavar="FILE")
    p.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4", metavar="R1,R2,...",
                   help="noise ratios (default 0,0.1,0.2,0.3,0.4)")
    p.add_argument("--workers", type=int, default=1)
    _corpus_flags(p)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("ablate", help="accuracy per ablation switch")
    p.add_argument("--config", required=True, metavar="FILE")
    p.add_argument("--switch", action="append", default=None, metavar="NAME",
                   help="ablation to run (repeatable; default: all that apply)")
    p.add_argument("--workers", type=int, default=1)
    _corpus_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("embed", help="dump embeddings for both corpora")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    _corpus_flags(p)
    p.set_defaults(func=cmd_embed)

    return parser


def _exit_code(exc: Exception) -> int:
    from .data import DataError
    from .model import ModelError
    from .trainer import ConfigError, NumericError, TrainerError

    if isinstance(exc, NumericError):
        code = 4
    elif isinstance(exc, (DataError, ModelError, OSError)):
        code = 3
    elif isinstance(exc, (ConfigError, TrainerError)):
        code = 2
    else:
        raise exc
    log.error("%s", exc)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _set_threads(max(args.threads, 1))
    _setup_logging()
    try:
        if args.threads < 1:
            from .trainer import ConfigError

            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        if getattr(args, "workers", 1) < 1:
            from .trainer import ConfigError

            raise ConfigError(f"--workers must be >= 1, got {args.workers}")
        args.func(args)
        return 0
    except Exception as exc:  # mapped to the documented exit codes
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
