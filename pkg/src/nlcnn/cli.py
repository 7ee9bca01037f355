"""``nlcnn`` command line: features, train, evaluate, verify, param-count.

Exit codes: 0 ok, 1 check or I/O failure, 2 input error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, load_config, parse_config
from .evaluation import TrialList, evaluate
from .frontend import TooShortError, WavError, extract_lfbe, load_wav
from .network import PRESET_NAMES, ConfigurationError, build_model, count_parameters, preset_spec
from .nonlocal_block import Variant
from .training import DatasetManifest, ManifestError, TrainingAbort, restore, train
from .verification import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
RUN_CONFIG_NAME = "run.cfg"

log = logging.getLogger("nlcnn")


class InputError(Exception):
    pass


def thread_count() -> int:
    raw = os.environ.get("NLCNN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"NLCNN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise InputError("NLCNN_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


@contextlib.contextmanager
def thread_limit() -> Iterator[int]:
    """Cap BLAS pools when NLCNN_THREADS is set to a positive value."""
    n = thread_count()
    if int(os.environ.get("NLCNN_THREADS", "0") or 0) > 0:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=n):
            yield n
    else:
        yield n


# ---------------------------------------------------------------------------
# subcommands


def cmd_features(args) -> int:
    try:
        audio = load_wav(args.wav)
        lfbe = extract_lfbe(audio)
    except (WavError, TooShortError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: cannot read {args.wav}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    try:
        ckpt.save(args.out, {"lfbe": lfbe.frames})
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"frames={lfbe.num_frames}")
    return EXIT_OK


def _resolved_run_config(args) -> RunConfig:
    """Config file (paths made absolute) with command-line flags layered on top."""
    entries = {}
    if args.config is not None:
        cfg = load_config(args.config)
        base = Path(args.config).resolve().parent
        entries = {"preset": cfg.preset, "variant": cfg.variant, "loss": cfg.loss, "seed": cfg.seed}
        entries.update({f"paths.{k}": cfg.path(k, base) for k in cfg.paths})
        entries.update({f"train.{k}": v for k, v in cfg.train.items()})
    for key, attr in (("preset", "preset"), ("variant", "variant"), ("loss", "loss"), ("seed", "seed"),
                      ("train.epochs", "epochs")):
        if getattr(args, attr, None) is not None:
            entries[key] = getattr(args, attr)
    for key, attr in (("paths.manifest", "manifest"), ("paths.checkpoint_dir", "checkpoint_dir"),
                      ("paths.validation", "validation")):
        if getattr(args, attr, None) is not None:
            entries[key] = Path(getattr(args, attr)).resolve()
    return parse_config("\n".join(f"{k} = {v}" for k, v in entries.items()), "<command line>")


def cmd_train(args) -> int:
    try:
        cfg = _resolved_run_config(args)
        manifest_path = cfg.paths.get("manifest")
        if manifest_path is None:
            raise InputError("no manifest: set paths.manifest or pass --manifest")
        out_dir = Path(cfg.paths.get("checkpoint_dir", "checkpoints"))
        manifest = DatasetManifest.load(manifest_path, strict=bool(cfg.train.get("strict_manifest", False)))
        validation = TrialList.load(cfg.paths["validation"]) if "validation" in cfg.paths else None
        tcfg = cfg.train_config()
        spec = preset_spec(cfg.preset, cfg.variant)
    except (ConfigError, InputError, ManifestError, ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    freeze = ("z_w",) if cfg.train.get("freeze_nonlocal_output") else ()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / RUN_CONFIG_NAME).write_text(cfg.to_text())
        result = train(manifest, spec, tcfg, out_dir=out_dir, validation=validation,
                       resume=cfg.paths.get("resume"), freeze=freeze, log_path=cfg.paths.get("log"))
    except TrainingAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"checkpoints={len(result.checkpoints)} best_epoch={result.best_epoch} dir={out_dir}")
    return EXIT_OK


def load_model_from_checkpoint(path, preset: Optional[str] = None, variant: Optional[str] = None):
    """Rebuild the embedder recorded in ``path``; architecture from flags or the sidecar ``run.cfg``."""
    path = Path(path)
    records = ckpt.load(path)
    sidecar = path.parent / RUN_CONFIG_NAME
    if (preset is None or variant is None) and sidecar.exists():
        saved = load_config(sidecar)
        preset = preset or saved.preset
        variant = variant or saved.variant
    if preset is None:
        raise InputError(f"cannot tell the architecture of {path}: pass --preset (no {RUN_CONFIG_NAME} beside it)")
    dtypes = {v.dtype for k, v in records.items() if k.startswith("param/")}
    dtype = np.float64 if np.dtype(np.float64) in dtypes else np.float32
    model = build_model(preset_spec(preset, variant or Variant.TIME_FREQUENCY.value), seed=0, dtype=dtype)
    restore(records, model)
    model.eval()
    return model


def cmd_evaluate(args) -> int:
    if not Path(args.checkpoint).exists():
        print(f"error: checkpoint {args.checkpoint} not found", file=sys.stderr)
        return EXIT_INPUT
    try:
        model = load_model_from_checkpoint(args.checkpoint, args.preset, args.variant)
        trials = TrialList.load(args.trials)
    except (InputError, ConfigError, ConfigurationError, ckpt.ContainerError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT if isinstance(exc, FileNotFoundError) else EXIT_FAIL
    try:
        report = evaluate(model, trials, use_cache=not args.no_cache, threads=args.threads,
                          keep_scores=args.scores is not None)
    except (WavError, TooShortError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if report.skipped:
        print(f"skipped={report.skipped} missing={' '.join(report.missing)}", file=sys.stderr)
    print(report.summary())
    if args.scores is not None:
        try:
            Path(args.scores).write_text(report.score_dump())
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAIL
    return EXIT_OK


def cmd_verify(args) -> int:
    return EXIT_OK if run_suite(args.suite) else EXIT_FAIL


def cmd_param_count(args) -> int:
    names = [args.preset] if args.preset else list(PRESET_NAMES)
    try:
        base = count_parameters(build_model("baseline"))
        for name in names:
            n = count_parameters(build_model(preset_spec(name, args.variant)))
            print(f"{name} params={n} delta={n - base:+d} millions={n / 1e6:.3f}")
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlcnn", description="Non-local CNN speaker embeddings.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("features", help="write the 40-band LFBE of one WAV")
    f.add_argument("--wav", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_features)

    t = sub.add_parser("train", help="train an embedder from a config file")
    t.add_argument("--config")
    t.add_argument("--preset", choices=PRESET_NAMES)
    t.add_argument("--variant")
    t.add_argument("--loss", choices=("ams", "ap"))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--manifest")
    t.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    t.add_argument("--validation", help="trial list for best-checkpoint selection")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a trial list and report the EER")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--trials", required=True)
    e.add_argument("--preset", choices=PRESET_NAMES)
    e.add_argument("--variant")
    e.add_argument("--scores", help="write per-trial scores here")
    e.add_argument("--no-cache", action="store_true")
    e.add_argument("--threads", type=int, default=None)
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("verify", help="run a self-check suite")
    v.add_argument("--suite", required=True, choices=tuple(SUITES))
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("param-count", help="print parameter counts of the presets")
    c.add_argument("--preset", choices=PRESET_NAMES)
    c.add_argument("--variant", default=Variant.TIME_FREQUENCY.value)
    c.set_defaults(func=cmd_param_count)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit() as n:
            if getattr(args, "threads", "absent") is None:
                args.threads = n
            return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
