"""Command-line entry point: synth, train, eval, predict, score, selftest.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigValidationError, RunConfig
from .datasynth import build_dataset, load_image
from .records import RecordError, read_manifest
from .training import SCENARIOS, TrainingDiverged, train
from .transformer import HTRNERModel
from .vocab import VocabError

log = logging.getLogger("htrner")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.training.seed = args.seed
    if args.threads is not None:
        cfg.training.threads = args.threads
    return cfg


def _write_json(path: str | None, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if args.records is not None:
        cfg.data.n_records = args.records
    cfg.validate()
    manifest = build_dataset(cfg.data, args.out)
    counts = {s: len(manifest.split(s)) for s in cfg.data.splits}
    print(f"wrote {len(manifest.rows)} records to {manifest.path} {counts}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.scenario:
        cfg.training.scenario = args.scenario
    if args.steps is not None:
        cfg.training.steps = args.steps
    manifest = args.manifest or cfg.paths.get("manifest")
    cfg.validate()
    if manifest:
        _require_file(manifest, "manifest")
    resume = load_checkpoint(_require_file(args.resume, "checkpoint")) if args.resume else None
    vocab = cfg.vocab()
    if resume is not None and resume.vocab.fingerprint() != vocab.fingerprint():
        raise UsageError("resume checkpoint vocabulary does not match the configuration")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not manifest:
        manifest = build_dataset(cfg.data, out / "data").path
    rows = read_manifest(manifest, args.split)
    if not rows:
        raise UsageError(f"split {args.split!r} of {manifest} is empty")
    if any(r.line_boxes is None for r in rows) and cfg.training.scenario != "one_stage":
        raise UsageError("manifest rows lack line_boxes; block-level scenarios need them")
    root = Path(manifest).parent
    items = [(r.record, load_image(root / r.image, r.line_boxes)) for r in rows]

    torch.set_num_threads(cfg.training.threads)
    torch.manual_seed(cfg.training.seed)
    if resume is not None:
        model = resume.build_model()
    else:
        model = HTRNERModel(cfg.model, vocab.nb_class)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = train(model, vocab, items, cfg.training, out, resume)
    final = result.loss_trace[-1][2] if result.loss_trace else float("nan")
    print(f"{cfg.training.scenario}: {len(result.loss_trace)} steps, final loss {final:.4f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    ckpt = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    manifest = _require_file(args.manifest, "manifest")
    torch.set_num_threads(args.threads or 1)
    report = evaluate(ckpt, manifest, args.split, args.batch_size)
    _write_json(args.out, report.to_dict())
    print(
        f"basic {report.mean_basic:.2f}  complete {report.mean_complete:.2f}  "
        f"cer {report.corpus_cer:.4f}  exact {report.exact_matches}/{len(report.records)}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    from .evaluation import predict

    ckpt = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    if bool(args.image) == bool(args.manifest):
        raise UsageError("give exactly one of --image or --manifest")
    torch.set_num_threads(args.threads or 1)
    if args.image:
        path = _require_file(args.image, "image")
        entries = [(path.stem, str(path), "", load_image(path))]
    else:
        manifest = _require_file(args.manifest, "manifest")
        root = manifest.parent
        entries = [
            (r.record.id, r.image, r.split, load_image(root / r.image, r.line_boxes))
            for r in read_manifest(manifest, args.split)
        ]
    model = ckpt.build_model()
    preds = predict(model, ckpt.vocab, [e[3] for e in entries], [e[0] for e in entries], args.batch_size)
    lines = [p.to_json(e[1], e[2]) for p, e in zip(preds, entries)]
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_score(args) -> int:
    from .evaluation import score_files

    report = score_files(_require_file(args.pred, "predictions"), _require_file(args.ref, "reference manifest"), args.split)
    _write_json(args.out, report.to_dict())
    print(f"basic {report.mean_basic:.2f}  complete {report.mean_complete:.2f}  cer {report.corpus_cer:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .checks import run_all

    torch.set_num_threads(args.threads or 1)
    ok = run_all()
    print("selftest passed" if ok else "selftest FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--threads", type=int, default=None, help="torch intra-op threads (fix for determinism)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="htrner", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic record dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--records", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model under one learning scenario")
    p.add_argument("--config")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="train")
    p.add_argument("--steps", type=int, default=None, help="steps per phase")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="decode images into tagged transcriptions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image")
    p.add_argument("--manifest")
    p.add_argument("--split", default=None)
    p.add_argument("--out")
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score", parents=[common], help="score a predictions JSONL against a manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("selftest", parents=[common], help="run the fast invariant suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigValidationError, CheckpointError, RecordError, VocabError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure exit code
        log.debug("unhandled failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
