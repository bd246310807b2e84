"""``docmamba`` command line.

Every command takes ``--config FILE`` (JSON) and repeated ``--set key=value``
overrides; dotted keys reach nested sections (``--set train.lr=0.001``).
Values are parsed as JSON when possible, else kept as strings.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict
from pathlib import Path

from docmamba.errors import ContractError, ParseError

COMMANDS = ("synth", "scan-order", "pretrain", "finetune", "eval", "infer", "gradcheck", "bench")


class UsageError(Exception):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


# -- configuration -------------------------------------------------------------------

def _defaults(command: str) -> dict:
    from docmamba.datapipe import GrammarConfig
    from docmamba.doc_model import ModelConfig
    from docmamba.training import GRADCHECK_CONFIG, TrainConfig

    tiny = ModelConfig.tiny().to_dict()
    grammar = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(GrammarConfig()).items()}
    if command == "synth":
        return {"seed": 0, "n_docs": 100, "grammar": grammar}
    if command == "scan-order":
        return {"order": "sfbs"}
    if command == "pretrain":
        return {"model": tiny, "train": TrainConfig(total_steps=1000, lr=3e-3, batch_tokens=1024).to_dict(),
                "synth": {"seed": 0, "n_docs": 200, "grammar": {**grammar, "max_tokens": 128}}}
    if command == "finetune":
        return {"train": TrainConfig(total_steps=1000, lr=3e-3, batch_tokens=1024, eval_every=50).to_dict()}
    if command in ("eval", "infer"):
        return {"order": "sfbs"}
    if command == "gradcheck":
        return {"model": GRADCHECK_CONFIG.to_dict(), "seed": 11, "n_samples": 240, "threshold": 1e-4}
    if command == "bench":
        return {"model": tiny, "lengths": [512, 1024, 2048, 4096], "reps": 3, "seed": 0,
                "models": ["docmamba", "attention_baseline"], "streaming_lengths": [1024, 2048, 4096],
                "parallel": False}
    raise UsageError(f"unknown command {command!r}")


def _merge(base: dict, update: dict, where: str):
    for key, value in update.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and not isinstance(value, dict):
            raise UsageError(f"config key {where}{key!r} must be an object")
        if isinstance(base[key], dict):
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(command: str, path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(_defaults(command))
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}", path=str(p))
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}", path=str(p)) from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object", path=str(p))
        _merge(cfg, data, "")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override must look like key=value, got {item!r}")
        *parents, leaf = key.split(".")
        nested = {leaf: _parse_value(raw)}
        for parent in reversed(parents):
            nested = {parent: nested}
        _merge(cfg, nested, "")
    return cfg


# -- argument parsing --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="docmamba", description="Layout-aware selective-scan document encoder.")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="FILE", help="JSON configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration value (repeatable)")
        return p

    p = add("synth", "generate a synthetic tagged corpus")
    p.add_argument("--out", required=True, metavar="DIR", help="corpus directory to write")

    p = add("scan-order", "serialise a document's words into scan order")
    p.add_argument("input", metavar="DOC", help="document JSON file")
    p.add_argument("--out", metavar="FILE", help="ordering JSON (default: stdout)")
    p.add_argument("--svg", metavar="FILE", help="also write a scan-order picture")

    p = add("pretrain", "masked-token pre-training")
    p.add_argument("--out", required=True, metavar="DIR", help="checkpoint and metrics directory")
    p.add_argument("--corpus", metavar="DIR", help="corpus directory (default: synthesise one)")

    p = add("finetune", "train the BIO tagging head")
    p.add_argument("--checkpoint", required=True, metavar="FILE", help="starting checkpoint")
    p.add_argument("--corpus", required=True, metavar="DIR", help="tagged training corpus")
    p.add_argument("--eval-corpus", metavar="DIR", help="held-out tagged corpus")
    p.add_argument("--out", required=True, metavar="DIR", help="checkpoint and metrics directory")

    p = add("eval", "entity precision, recall and F1 on a tagged corpus")
    p.add_argument("--checkpoint", required=True, metavar="FILE", help="model checkpoint")
    p.add_argument("--corpus", required=True, metavar="DIR", help="tagged corpus")

    p = add("infer", "tag the words of one document")
    p.add_argument("input", metavar="DOC", help="document JSON file")
    p.add_argument("--checkpoint", required=True, metavar="FILE", help="model checkpoint")

    p = add("gradcheck", "compare analytic and finite-difference gradients")

    p = add("bench", "time and memory scaling against an attention baseline")
    p.add_argument("--out", required=True, metavar="DIR", help="report directory")
    return ap


def help_text() -> str:
    """Top-level help followed by every command's help, as printed by ``--help``."""
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    parts = [parser.format_help()]
    parts += [f"$ docmamba {name} --help\n" + sub.choices[name].format_help() for name in COMMANDS]
    return "\n".join(parts)


# -- helpers -----------------------------------------------------------------------

def _section(factory, data, name):
    """Build a config object, turning bad values into usage errors."""
    try:
        if factory.__name__ == "GrammarConfig":
            data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
            return factory(**data)
        return factory.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {name} configuration: {exc}") from None


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}", path=str(p))
    return p


def read_corpus(directory):
    from docmamba.datapipe import read_document

    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"corpus directory not found: {d}", path=str(d))
    manifest = d / "manifest.json"
    if manifest.is_file():
        names = [f"{doc_id}.json" for doc_id in json.loads(manifest.read_text())["documents"]]
    else:
        names = sorted(p.name for p in d.glob("*.json"))
    if not names:
        raise UsageError(f"corpus directory has no documents: {d}", path=str(d))
    return [read_document(d / n) for n in names]


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _load_model(path):
    from docmamba.doc_model import load_checkpoint

    model, _ = load_checkpoint(_require_file(path, "checkpoint"))
    return model


# -- commands -----------------------------------------------------------------------

def cmd_synth(args, cfg):
    from docmamba.datapipe import GrammarConfig, synth_corpus, write_document

    grammar = _section(GrammarConfig, cfg["grammar"], "grammar")
    docs = synth_corpus(int(cfg["seed"]), int(cfg["n_docs"]), grammar)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for doc in docs:
        write_document(out / f"{doc.doc_id}.json", doc)
    _emit({"documents": [d.doc_id for d in docs], "seed": cfg["seed"], "grammar": cfg["grammar"]},
          out / "manifest.json")
    _emit({"written": len(docs), "out": str(out)})


def cmd_scan_order(args, cfg):
    from docmamba.datapipe import read_document
    from docmamba.sfbs import ORDERINGS, LayoutToken, render_scan_svg

    if cfg["order"] not in ORDERINGS:
        raise UsageError(f"order must be one of {sorted(ORDERINGS)}")
    doc = read_document(_require_file(args.input, "document"))
    tokens = [LayoutToken.from_poly(i, w.quad, w.segment_id) for i, w in enumerate(doc.words)]
    seq = ORDERINGS[cfg["order"]](tokens)
    _emit({"doc_id": doc.doc_id, "scan": cfg["order"], "order": list(seq.order), "inverse": list(seq.inverse),
           "words": [doc.words[i].text for i in seq.order]}, args.out)
    if args.svg:
        Path(args.svg).write_text(render_scan_svg(tokens, seq, doc.page_w, doc.page_h))


def cmd_pretrain(args, cfg):
    from docmamba.datapipe import GrammarConfig, synth_corpus
    from docmamba.doc_model import ModelConfig
    from docmamba.training import TrainConfig, train_mlm

    model_cfg = _section(ModelConfig, cfg["model"], "model")
    train_cfg = _section(TrainConfig, cfg["train"], "train")
    if args.corpus:
        docs = read_corpus(args.corpus)
    else:
        s = cfg["synth"]
        grammar = _section(GrammarConfig, s["grammar"], "grammar")
        docs = synth_corpus(int(s["seed"]), int(s["n_docs"]), grammar)
    res = train_mlm(docs, model_cfg, train_cfg, out_dir=args.out)
    _emit({"steps": res.steps, "first_loss": res.losses[0] if res.losses else None,
           "final_loss": res.losses[-1] if res.losses else None, "rejected": res.rejected,
           "skipped": res.skipped, "checkpoints": res.checkpoints})


def cmd_finetune(args, cfg):
    from docmamba.training import TrainConfig, finetune_tagging

    train_cfg = _section(TrainConfig, cfg["train"], "train")
    model = _load_model(args.checkpoint)
    docs = read_corpus(args.corpus)
    eval_docs = read_corpus(args.eval_corpus) if args.eval_corpus else None
    res = finetune_tagging(docs, model, train_cfg, eval_docs=eval_docs,
                           out_dir=args.out)
    _emit({"steps": res.steps, "f1_curve": res.f1_curve, "rejected": res.rejected,
           "checkpoints": res.checkpoints})
    Path(args.out, "f1_curve.json").write_text(json.dumps(res.f1_curve, indent=2) + "\n")


def cmd_eval(args, cfg):
    from docmamba.training import _as_sequences, evaluate_tagging
    from docmamba.datapipe import TagSet

    model = _load_model(args.checkpoint)
    docs = read_corpus(args.corpus)
    tagset = TagSet()
    seqs = _as_sequences(docs, cfg["order"], 2048, tagset=tagset)
    _emit({**evaluate_tagging(model, seqs, tagset), "n_docs": len(docs)})


def cmd_infer(args, cfg):
    from docmamba.datapipe import TagSet, read_document, tokenize_document

    model = _load_model(args.checkpoint)
    doc = read_document(_require_file(args.input, "document"))
    tagset = TagSet()
    seq = tokenize_document(doc, tagset=tagset, order=cfg["order"])
    if len(seq) > 2048:
        raise ContractError(f"document has {len(seq)} tokens; infer handles at most 2048")
    tags = model.predict_tags(seq.token_ids, seq.polys)
    by_word = {}
    for pos in range(1, len(seq)):
        by_word.setdefault(int(seq.word_ids[pos]), tagset.decode([tags[pos]])[0])
    _emit({"doc_id": doc.doc_id,
           "words": [{"text": w.text, "tag": by_word.get(i, "O")} for i, w in enumerate(doc.words)]})


def cmd_gradcheck(args, cfg):
    from docmamba.doc_model import ModelConfig
    from docmamba.training import gradcheck

    report = gradcheck(_section(ModelConfig, cfg["model"], "model"), int(cfg["seed"]), int(cfg["n_samples"]))
    report["threshold"] = cfg["threshold"]
    report["passed"] = report["max_rel_err"] < cfg["threshold"]
    _emit(report)
    return 0 if report["passed"] else 1


def cmd_bench(args, cfg):
    from docmamba.bench import bench_scaling, streaming_peak_bytes, write_reports
    from docmamba.doc_model import DocMamba, ModelConfig
    from docmamba.training import single_threaded

    model_cfg = _section(ModelConfig, cfg["model"], "model")
    reports = [bench_scaling(tag, cfg["lengths"], int(cfg["reps"]), model_cfg, int(cfg["seed"]),
                             parallel=bool(cfg["parallel"])) for tag in cfg["models"]]
    paths = write_reports(reports, args.out)
    model = DocMamba.init(model_cfg, int(cfg["seed"]))
    with single_threaded():
        streaming = [{"length": n, "peak_bytes": streaming_peak_bytes(model, int(n))}
                     for n in cfg["streaming_lengths"]]
    peaks = [s["peak_bytes"] for s in streaming]
    summary = {
        "exponents": {r.model_tag: {"time": r.fitted_time_exponent, "memory": r.fitted_mem_exponent}
                      for r in reports},
        "streaming": streaming,
        "streaming_spread": (max(peaks) / min(peaks) - 1) if peaks else None,
        "files": [str(p) for p in paths],
    }
    _emit(summary, Path(args.out) / "summary.json")
    _emit(summary)


HANDLERS = {
    "synth": cmd_synth, "scan-order": cmd_scan_order, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "eval": cmd_eval, "infer": cmd_infer, "gradcheck": cmd_gradcheck, "bench": cmd_bench,
}


def _fail(kind, exc, code, path=None):
    err = {"error": kind, "message": str(exc), "exit_code": code}
    if path is not None:
        err["path"] = path
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required: one of {', '.join(COMMANDS)}")
        cfg = load_config(args.command, args.config, args.overrides)
        code = HANDLERS[args.command](args, cfg)
        return code or 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail("usage", exc, 2, exc.path)
    except ParseError as exc:
        return _fail("parse", exc, 1, exc.path)
    except KeyboardInterrupt:
        return _fail("interrupted", "interrupted", 1)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        return _fail(type(exc).__name__, exc, 1, getattr(exc, "last_checkpoint", None))


if __name__ == "__main__":
    sys.exit(main())
