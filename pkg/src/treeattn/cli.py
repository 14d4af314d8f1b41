"""Command-line entry point: train, eval, attend, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .attention import SOURCE_ALIASES, ConfigurationError
from .model import ModelConfig, TreeAttnModel, evaluate, substream, train
from .treebank import (
    DataError,
    EmbeddingFormatError,
    ParseError,
    StructureError,
    Vocabulary,
    iter_tokens,
    load_embeddings,
    read_manifest,
)

log = logging.getLogger("treeattn")

OK, USAGE, DATA, VERIFY = 0, 1, 2, 3
PATH_KEYS = ("train", "dev", "test", "embeddings")
CHECKPOINT = "model.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration -----------------------------------------------------------------------

def _scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path: Path) -> dict:
    """JSON object, or ``key = value`` lines with ``#`` comments."""
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(values, dict):
            raise UsageError(f"{path}: expected a JSON object")
        return values
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        values[key.strip()] = _scalar(value.strip())
    return values


@dataclasses.dataclass
class RunManifest:
    config: ModelConfig
    paths: dict
    out: Path | None

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(),
                "paths": {k: str(v) for k, v in self.paths.items()},
                "out": None if self.out is None else str(self.out)}


def resolve(args) -> RunManifest:
    """Config file values, then command-line flags on top."""
    values: dict = {}
    base = Path.cwd()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        values = read_config_file(path)
        base = path.resolve().parent
    paths = {}
    for key in PATH_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            paths[key] = Path(flag)
        elif values.get(key) is not None:
            p = Path(values[key])
            paths[key] = p if p.is_absolute() else base / p
        values.pop(key, None)
    out = values.pop("out", None)
    if getattr(args, "out", None):
        out = args.out
    overrides = {"seed": args.seed, "cell": args.cell, "attention": args.attn,
                 "normalization": args.norm, "epochs": getattr(args, "epochs", None)}
    if args.query is not None:
        overrides["query_source"] = SOURCE_ALIASES.get(args.query, args.query)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "query_source" in values:
        values["query_source"] = SOURCE_ALIASES.get(values["query_source"], values["query_source"])
    try:
        config = ModelConfig.from_dict(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return RunManifest(config, paths, None if out is None else Path(out))


def _require(paths: dict, keys) -> None:
    for key in keys:
        if key not in paths:
            raise UsageError(f"no {key} path given (config key or --{key})")
    for key, p in paths.items():
        if not Path(p).is_file():
            raise FileNotFoundError(f"{key} file not found: {p}")


# -- commands --------------------------------------------------------------------------------

def cmd_train(args) -> int:
    run = resolve(args)
    _require(run.paths, ("train", "dev"))
    if run.out is None:
        raise UsageError("train needs an output directory (--out or config key 'out')")
    cfg = run.config
    splits = {k: read_manifest(run.paths[k]) for k in ("train", "dev", "test") if k in run.paths}
    print("loaded " + " ".join(f"{k}={len(v)}" for k, v in splits.items()), flush=True)
    vocab = Vocabulary(w for split in splits.values() for s in iter_tokens(split) for w in s)
    embeddings = None
    if "embeddings" in run.paths:
        embeddings = load_embeddings(run.paths["embeddings"], vocab, substream(cfg.seed, "embed-fill"),
                                     dim=cfg.embed_dim)
        embeddings.trainable = cfg.embed_trainable
        log.info("embedding coverage %.4f", embeddings.coverage)
    model = TreeAttnModel(cfg, vocab, embeddings)
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2) + "\n", encoding="utf-8")
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        def on_epoch(record):
            fh.write(json.dumps(record) + "\n")
            fh.flush()

        result = train(cfg, splits["train"], splits["dev"], model=model, on_epoch=on_epoch)
    result.model.save(out / CHECKPOINT)
    summary = {"best_epoch": result.best_epoch, "checkpoint": str(out / CHECKPOINT),
               "dev": evaluate(result.model, splits["dev"]).to_dict()}
    if "test" in splits:
        summary["test"] = evaluate(result.model, splits["test"]).to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return OK


def _load_checkpoint(path) -> TreeAttnModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return TreeAttnModel.load(path)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from None


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    data = read_manifest(args.manifest)
    if not data:
        raise DataError(f"{args.manifest}: no examples")
    print(json.dumps(evaluate(model, data).to_dict()))
    return OK


def _trace_nodes(records: list[dict], normalization: str) -> list[dict]:
    parent = {c: r["id"] for r in records for c in r["children"]}
    nodes = []
    for r in sorted(records, key=lambda r: r["id"]):
        node = {"id": r["id"], "label": r["label"], "word": r["word"],
                "parent": parent.get(r["id"]), "children": r["children"],
                "alpha": r.get("alpha", []),
                "normalization": normalization}
        if "alpha_matrix" in r:
            node["alpha_matrix"] = r["alpha_matrix"]
        nodes.append(node)
    return nodes


def attention_trace(model: TreeAttnModel, ex) -> dict:
    cfg = model.config
    tr_a, tr_b, y = model.trace(ex)
    kind = "dependency" if cfg.cell == "child_sum" else "binary"
    norm = "ratio" if cfg.attention.kind == "soft" else cfg.attention.normalization
    return {
        "id": ex.id,
        "config": cfg.to_dict(),
        "prediction": y,
        "gold": ex.gold,
        "sentences": [
            {"side": side, "tokens": toks, "tree": kind, "nodes": _trace_nodes(tr, norm)}
            for side, toks, tr in (("a", ex.sentence_a, tr_a), ("b", ex.sentence_b, tr_b))
        ],
    }


def trace_dot(trace: dict) -> str:
    lines = ["digraph attention {", "  node [shape=box, fontname=Helvetica];"]
    for s in trace["sentences"]:
        lines.append(f"  subgraph cluster_{s['side']} {{")
        lines.append(f"    label=\"sentence {s['side']}\";")
        for n in s["nodes"]:
            text = n["label"] if n["word"] is None else f"{n['label']}\\n{n['word']}"
            text = text.replace('"', '\\"')
            lines.append(f"    {s['side']}{n['id']} [label=\"{text}\"];")
        for n in s["nodes"]:
            for c, p in zip(n["children"], n["alpha"]):
                lines.append(f"    {s['side']}{n['id']} -> {s['side']}{c} [label=\"{p:.2f}\"];")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_attend(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    if model.config.attention.kind == "none":
        raise UsageError("checkpoint was trained with attention=none: no attention trace exists")
    data = read_manifest(args.manifest)
    if args.id is not None:
        chosen = [ex for ex in data if ex.id == args.id or ex.id.endswith(f":{args.id}")]
        if not chosen:
            raise DataError(f"no example with id {args.id!r} in {args.manifest}")
        ex = chosen[0]
    else:
        if not 0 <= args.index < len(data):
            raise DataError(f"index {args.index} outside 0..{len(data) - 1}")
        ex = data[args.index]
    trace = attention_trace(model, ex)
    text = json.dumps(trace, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.json").write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    if args.dot:
        Path(args.dot).write_text(trace_dot(trace), encoding="utf-8")
    return OK


def cmd_gradcheck(args) -> int:
    from . import verify

    query = SOURCE_ALIASES.get(args.query, args.query) if args.query else None
    configs = [
        (cell, spec) for cell, spec in verify.grid(args.norm or "softmax")
        if (args.cell is None or cell == args.cell)
        and (args.attn is None or spec.kind == args.attn)
        and (query is None or spec.kind == "none" or spec.query_source == query)
    ]
    if not configs:
        raise UsageError("no configuration matches the given filters")
    seed = 0 if args.seed is None else args.seed
    results = []
    for cell, spec in configs:
        r = verify.check(cell, spec, d=args.d, seed=seed, batched=not args.looped)
        results.append(r)
        flag = "" if r.in_domain else "  (no in-domain seed)"
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<40} max_rel_err={r.max_error:.3e}  "
              f"params={r.n_params}  seed={r.seed}{flag}", flush=True)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} configurations within {verify.TOLERANCE:g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps([r.to_dict() for r in results], indent=2) + "\n",
                                            encoding="utf-8")
    return VERIFY if failed else OK


# -- parser ------------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--cell", choices=("child_sum", "binary"))
    p.add_argument("--attn", choices=("none", "soft", "model1", "model2"))
    p.add_argument("--query", choices=("self", "own", "other", "phrase"))
    p.add_argument("--norm", choices=("softmax", "plain"))
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="treeattn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write checkpoint, history and config echo")
    _common(p)
    for key in PATH_KEYS:
        p.add_argument(f"--{key}", help=f"{key} path (overrides the config file)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print an evaluation report as one JSON record")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attend", help="dump per-node attention weights for one sentence pair")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--index", type=int, default=0, help="row of the manifest (0-based)")
    p.add_argument("--id", help="example id instead of --index")
    p.add_argument("--out", help="directory for trace.json (default: stdout)")
    p.add_argument("--dot", help="also write a DOT rendering here")
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("gradcheck", help="finite-difference check of every configuration")
    _common(p)
    p.add_argument("--d", type=int, default=8, help="memory, embedding and hidden width")
    p.add_argument("--looped", action="store_true",
                   help="one forward pass per perturbation instead of batched passes")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE
    except (FileNotFoundError, DataError, ParseError, StructureError, EmbeddingFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA


if __name__ == "__main__":
    sys.exit(main())
