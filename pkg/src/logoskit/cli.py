"""``logoskit`` command line.

Exit status: 0 success, 1 usage error, 2 data or contract error. Data goes
to stdout or files; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .corpus import Dataset, NoiseProfile, OcrLine, _read_jsonl, _req, gen_grounding, gen_splits, load_dataset, \
    load_ocr, load_qa, load_saved, save_dataset
from .errors import ConfigError, LogosError, UsageError
from .geometry import DEFAULT_EPSILON, ClusterAssignment, cluster_lines
from .metrics import evaluate
from .model import LogosModel, ModelConfig
from .phoc import phoc_encode

log = logging.getLogger("logoskit")

SVG_SIZE = 1000
PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4",
           "#46f0f0", "#f032e6", "#bcf60c", "#008080", "#9a6324")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- svg

def emit_cluster_svg(lines: Sequence[OcrLine], assignment: ClusterAssignment | None, out_path) -> Path:
    """One rectangle per OCR line, stroked with the palette colour of its cluster."""
    if assignment is not None and len(assignment) != len(lines):
        raise ConfigError(f"assignment covers {len(assignment)} lines, expected {len(lines)}")
    rows = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" '
            f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
            f'<rect x="0" y="0" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>']
    for i, ln in enumerate(lines):
        b = ln.box
        c = assignment[i]
        rows.append(
            f'<rect x="{b.x1 * SVG_SIZE:.3f}" y="{b.y1 * SVG_SIZE:.3f}" '
            f'width="{(b.x2 - b.x1) * SVG_SIZE:.3f}" height="{(b.y2 - b.y1) * SVG_SIZE:.3f}" '
            f'fill="none" stroke="{PALETTE[c % len(PALETTE)]}" stroke-width="2" '
            f'data-line="{ln.line_id}" data-cluster="{c}"/>')
    rows.append("</svg>")
    path = Path(out_path)
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- helpers

def _seed_override(default: int) -> int:
    env = os.environ.get("LOGOSKIT_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError as e:
        raise ConfigError(f"LOGOSKIT_SEED must be an integer, got {env!r}") from e


def _read_config(path: str) -> dict:
    p = Path(path)
    raw = p.read_bytes()
    try:
        if p.suffix == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode("utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _split_config(path: str | None, data: Dataset, stage: str):
    """(TrainConfig, ModelConfig, grounding options) from a config file.

    Top-level keys are TrainConfig fields; optional ``[model]`` and
    ``[grounding]`` tables hold ModelConfig fields and grounding corpus sizes.
    A config giving ``total_iters`` without a schedule gets the compressed
    default schedule. Without a config file the desk recipe for ``stage``
    applies.
    """
    from .trainer import TrainConfig, _feature_width, desk_finetune_config, desk_model_config, desk_pretrain_config

    if path is None:
        cfg = desk_pretrain_config() if stage == "pretrain" else desk_finetune_config()
        cfg.seed = _seed_override(cfg.seed)
        return cfg, desk_model_config(_feature_width(data)), {}
    raw = _read_config(path)
    model_over = dict(raw.pop("model", {}))
    grounding = dict(raw.pop("grounding", {}))
    if "total_iters" in raw and "warmup_iters" not in raw and "decay_points" not in raw:
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        cfg = TrainConfig.desk(**raw)
    else:
        cfg = TrainConfig.from_dict(raw)
    cfg.seed = _seed_override(cfg.seed)
    model_over.setdefault("feature_width", _feature_width(data))
    try:
        mcfg = ModelConfig(**model_over)
    except TypeError as e:
        raise ConfigError(f"bad [model] table: {e}") from e
    return cfg, mcfg, grounding


def _parse_sources(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for s in items:
        name, sep, path = s.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--ocr expects SOURCE=PATH, got {s!r}")
        if name in out:
            raise UsageError(f"OCR source {name!r} given twice")
        out[name] = path
    return out


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_gen_synth(a) -> int:
    seed = a.seed if a.seed is not None else _seed_override(7)
    noise = {"A": NoiseProfile(p_del=a.p_del), "B": NoiseProfile(p_sub=a.p_sub)}
    train, val = gen_splits(seed, a.n_train, a.n_val, noise, a.feature_width)
    out = Path(a.out)
    save_dataset(train, out / "train")
    save_dataset(val, out / "val")
    log.info("wrote %d train / %d val items to %s", len(train.items), len(val.items), out)
    return 0


def cmd_cluster(a) -> int:
    table = load_ocr(a.ocr)
    records, svg_lines, svg_assign = [], None, None
    for image_id in sorted(table):
        lines = table[image_id]
        if not lines:
            continue
        assign = cluster_lines([ln.box for ln in lines], a.epsilon)
        for ln, c in zip(lines, assign.cluster_of_line):
            records.append({"image_id": image_id, "line_id": ln.line_id, "cluster": c})
        if svg_lines is None and (a.image is None or a.image == image_id):
            svg_lines, svg_assign = lines, assign
    if a.image is not None and a.image not in table:
        raise ConfigError(f"image {a.image!r} not in {a.ocr}")
    for r in records:
        sys.stdout.write(json.dumps(r, sort_keys=True) + "\n")
    if a.svg:
        emit_cluster_svg(svg_lines or [], svg_assign, a.svg)
    return 0


def cmd_phoc(a) -> int:
    bits = [int(i) for i, v in enumerate(phoc_encode(a.word)) if v]
    sys.stdout.write(json.dumps({"word": a.word, "bits": bits, "count": len(bits)}) + "\n")
    return 0


def cmd_pretrain(a) -> int:
    from .trainer import (DESK_CANDIDATES, DESK_GROUNDING_TRAIN, DESK_GROUNDING_VAL, TrainLog, grounding_accuracy,
                          make_model, pretrain_grounding)

    train = load_saved(Path(a.data) / "train", split="train")
    cfg, mcfg, gopt = _split_config(a.config, train, "pretrain")
    model = make_model(train, mcfg, seed=cfg.seed)
    n_train, n_val = int(gopt.get("n_train", DESK_GROUNDING_TRAIN)), int(gopt.get("n_val", DESK_GROUNDING_VAL))
    n_cand = int(gopt.get("n_candidates", DESK_CANDIDATES))
    examples = gen_grounding(cfg.seed, n_train, n_cand, mcfg.feature_width)
    val = gen_grounding(cfg.seed, n_val, n_cand, mcfg.feature_width, start_index=n_train)
    tlog = pretrain_grounding(model, examples, cfg, val, TrainLog())
    model.save(a.out)
    if a.metrics:
        tlog.write(a.metrics)
    log.info("grounding accuracy %.4f", grounding_accuracy(model, val))
    return 0


def cmd_train(a) -> int:
    from .trainer import TrainLog, finetune, make_model

    data = Path(a.data)
    train = load_saved(data / "train", split="train")
    cfg, mcfg, _ = _split_config(a.config, train, "train")
    val = load_saved(data / "val", split="val") if (data / "val").is_dir() else None
    if a.init:
        model = LogosModel.load(a.init)
    else:
        model = make_model(train, mcfg, seed=cfg.seed)
    tlog = finetune(model, train, cfg, val, TrainLog())
    model.save(a.out)
    if a.metrics:
        tlog.write(a.metrics)
    return 0


def cmd_predict(a) -> int:
    from .selector import predict_dataset

    sources = _parse_sources(a.ocr)
    model = LogosModel.load(a.checkpoint)
    ds = load_dataset(a.qa, sources, a.objects, split="predict")
    priority = a.priority.split(",") if a.priority else list(sources)
    unknown = set(priority) - set(sources)
    if unknown:
        raise UsageError(f"--priority names unknown sources {sorted(unknown)}")
    preds = predict_dataset(model, ds, list(sources), priority)
    _write_jsonl(a.out, sorted((p.record() for p in preds), key=lambda r: r["question_id"]))
    return 0


def cmd_eval(a) -> int:
    preds = {}
    for n, rec in _read_jsonl(a.pred):
        qid = _req(rec, "question_id", str, a.pred, n)
        preds[qid] = _req(rec, "answer", str, a.pred, n)
    answers = {it.question_id: it.answers for it in load_qa(a.qa)}
    report = evaluate(preds, answers)
    out = report.to_dict(a.metric)
    text = json.dumps(out, sort_keys=True)
    sys.stdout.write(text + "\n")
    width = max(len(k) for k in out)
    for k, v in out.items():
        sys.stdout.write(f"{k:<{width}}  {v}\n")
    if a.out:
        Path(a.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_gradcheck(a) -> int:
    from .tensor import inject_fault
    from .trainer import grad_check

    seed = a.seed if a.seed is not None else _seed_override(0)
    if a.fault:
        with inject_fault(a.fault):
            err = grad_check(n_probes=a.probes, seed=seed)
    else:
        err = grad_check(n_probes=a.probes, seed=seed)
    err = float(err)
    ok = err < a.tol
    sys.stdout.write(json.dumps({"max_relative_error": err, "tolerance": a.tol, "passed": ok}) + "\n")
    return 0 if ok else 2


# ---------------------------------------------------------------- entry points

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="logoskit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("gen-synth", help="write a seeded synthetic train/val corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-train", type=int, default=200)
    s.add_argument("--n-val", type=int, default=50)
    s.add_argument("--p-del", type=float, default=0.15)
    s.add_argument("--p-sub", type=float, default=0.15)
    s.add_argument("--feature-width", type=int, default=32)
    s.set_defaults(fn=cmd_gen_synth)

    s = sub.add_parser("cluster", help="cluster OCR lines; JSONL cluster ids on stdout")
    s.add_argument("--ocr", required=True)
    s.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    s.add_argument("--svg")
    s.add_argument("--image", help="image drawn in the SVG (default: first image id)")
    s.set_defaults(fn=cmd_cluster)

    s = sub.add_parser("phoc", help="print the set PHOC bits of a word")
    s.add_argument("word")
    s.set_defaults(fn=cmd_phoc)

    s = sub.add_parser("pretrain", help="grounding pretraining")
    s.add_argument("--data", required=True, help="gen-synth output directory")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--config")
    s.add_argument("--metrics", help="JSONL training log")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("train", help="Text-VQA fine-tuning")
    s.add_argument("--data", required=True, help="gen-synth output directory")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--init", help="checkpoint to start from")
    s.add_argument("--config")
    s.add_argument("--metrics", help="JSONL training log")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="decode each OCR source and select an answer")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--qa", required=True)
    s.add_argument("--ocr", action="append", required=True, metavar="SOURCE=PATH")
    s.add_argument("--objects", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--priority", help="comma-separated tie-break order (default: --ocr order)")
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("eval", help="score predictions")
    s.add_argument("--pred", required=True)
    s.add_argument("--qa", required=True)
    s.add_argument("--metric", choices=("acc", "anls", "both"), default="both")
    s.add_argument("--out", help="also write the JSON report here")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    s.add_argument("--probes", type=int, default=200)
    s.add_argument("--seed", type=int)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--fault", choices=("gelu",), help="corrupt a derivative on purpose")
    s.set_defaults(fn=cmd_gradcheck)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
        if args.command is None:
            raise UsageError("no subcommand given (see --help)")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        return args.fn(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        sys.stderr.write(f"usage error: {e}\n")
        return 1
    except (LogosError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2


def main():
    sys.exit(run())
