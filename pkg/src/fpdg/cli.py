"""Command line entry point: gen-data, train, ablate, generate, evaluate, gradcheck.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

from . import data as D
from .training import PRESETS, TrainConfig, TrainingAborted, train, with_variant

log = logging.getLogger("fpdg")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _need(path, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _schema_for(args, near: Path | None = None) -> D.AttributeSchema:
    if getattr(args, "schema", None):
        return D.load_schema(_need(args.schema, "schema"))
    if near is not None and (near.parent / "schema.json").exists():
        return D.load_schema(near.parent / "schema.json")
    return D.default_schema()


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(args) -> int:
    schema = D.load_schema(_need(args.schema, "schema")) if args.schema else D.default_schema()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = D.generate_corpus(schema, args.n, args.seed, workers=args.workers)
    D.write_corpus(corpus, out / "corpus.jsonl")
    if corpus:
        D.build_vocab(corpus).save(out / "vocab.tsv")
    else:
        D.Vocab().save(out / "vocab.tsv")
    D.save_schema(schema, out / "schema.json")
    manifest = {
        "n": len(corpus), "seed": args.seed,
        "keywords": sum(len(s.keywords) for s in corpus),
        "description_tokens": sum(len(s.description) for s in corpus),
        "entity_word_fraction": D.entity_fraction(corpus),
        "sha256": {name: _sha(out / name) for name in ("corpus.jsonl", "vocab.tsv", "schema.json")},
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    print(f"wrote {len(corpus)} samples to {out} (entity fraction {manifest['entity_word_fraction']:.4f})")
    return EXIT_OK


# --------------------------------------------------------------------- train

_OVERRIDES = {
    "d": int, "batch_size": int, "epochs": int, "lr": float, "lambda_final": float, "lambda_warmup": int,
    "tau": float, "seed": int, "precision": str, "max_steps": int, "val_fraction": float,
    "max_keywords": int, "max_decode_len": int, "clip_norm": float,
}


def build_config(args) -> TrainConfig:
    """Precedence: CLI flag > config file > preset > built-in defaults."""
    values = dict(PRESETS[args.preset])
    if args.config:
        try:
            values.update(json.loads(_need(args.config, "config").read_text()))
        except json.JSONDecodeError as e:
            raise UsageError(f"config {args.config}: {e}") from None
    for key in _OVERRIDES:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.no_kw_mem:
        values["no_kw_mem"] = True
    if args.no_elstm:
        values["no_elstm"] = True
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from None


def _load_corpus(path) -> list:
    corpus = D.read_corpus(_need(path, "corpus"))
    if not corpus:
        raise UsageError(f"corpus {path} is empty")
    return corpus


def _vocab_for(corpus_path: Path, corpus) -> D.Vocab:
    vpath = corpus_path.parent / "vocab.tsv"
    return D.Vocab.load(vpath) if vpath.exists() else D.build_vocab(corpus)


def _train_one(cfg: TrainConfig, corpus, vocab, schema, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.tsv")
    D.save_schema(schema, out / "schema.json")
    result = train(cfg, corpus, vocab, schema.categories, out_dir=out)
    summary = {"variant": result.model.config.variant, "steps": result.steps, "best_val": result.best_val,
               "parameters": result.model.params.census(), "epochs": result.epochs, "config": asdict(cfg)}
    _atomic_write(out / "summary.json", json.dumps(summary, indent=1))
    return summary


def cmd_train(args) -> int:
    cfg = build_config(args)
    corpus_path = Path(args.corpus)
    corpus = _load_corpus(corpus_path)
    schema = _schema_for(args, corpus_path)
    summary = _train_one(cfg, corpus, _vocab_for(corpus_path, corpus), schema, Path(args.out))
    print(json.dumps({k: summary[k] for k in ("variant", "steps", "best_val", "parameters")}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = build_config(args)
    corpus_path = Path(args.corpus)
    corpus = _load_corpus(corpus_path)
    schema = _schema_for(args, corpus_path)
    vocab = _vocab_for(corpus_path, corpus)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        cfgs = {v: with_variant(base, v) for v in variants}
    except ValueError as e:
        raise UsageError(str(e)) from None
    rows = {}
    for name, cfg in cfgs.items():
        rows[name] = _train_one(cfg, corpus, vocab, schema, Path(args.out) / name)
        print(f"{name}: steps={rows[name]['steps']} params={rows[name]['parameters']} best_val={rows[name]['best_val']}")
    _atomic_write(Path(args.out) / "ablation.json", json.dumps(rows, indent=1))
    return EXIT_OK


# ------------------------------------------------------------ generate/evaluate


def _load_model(ckpt: Path, vocab_path=None):
    from .model import FPDG, vocab_digest

    model, meta = FPDG.load(_need(ckpt, "checkpoint"))
    vpath = Path(vocab_path) if vocab_path else ckpt.parent / "vocab.tsv"
    vocab = D.Vocab.load(_need(vpath, "vocab"))
    if meta.get("vocab_digest") not in (None, vocab_digest(vocab.itos)) or len(vocab) != model.config.vocab_size:
        raise UsageError(f"vocab {vpath} does not match checkpoint {ckpt}")
    return model, meta, vocab


def cmd_generate(args) -> int:
    from .decoding import batch_generate

    model, meta, vocab = _load_model(Path(args.checkpoint), args.vocab)
    categories = meta.get("categories") or D.default_schema().categories
    corpus = D.read_corpus(_need(args.corpus, "corpus"))
    if args.limit is not None:
        corpus = corpus[:args.limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = "greedy" if args.greedy else "beam"
    batch_generate(model, corpus, vocab, categories, out / "generations.jsonl", mode=mode, beam=args.beam,
                   min_len=args.min_len, max_len=args.max_len,
                   trace_path=out / "trace.jsonl" if args.trace else None)
    print(f"wrote {len(corpus)} generations to {out / 'generations.jsonl'}")
    return EXIT_OK


def read_generations(path) -> list[dict]:
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise UsageError(f"{path}:{ln}: {e}") from None
    return rows


def cmd_evaluate(args) -> int:
    from .metrics import evaluate, label_recall

    rows = read_generations(_need(args.generations, "generations"))
    corpus = D.read_corpus(_need(args.corpus, "corpus"))[:len(rows)]
    if len(corpus) != len(rows):
        raise UsageError(f"{len(rows)} generations but only {len(corpus)} corpus samples")
    for i, (row, s) in enumerate(zip(rows, corpus)):
        if row.get("keywords") != s.keywords:
            raise UsageError(f"generation {i} keywords do not match corpus sample {i}")
    if not rows:
        raise UsageError("no generations to evaluate")
    schema = _schema_for(args, Path(args.corpus))
    recall = {}
    if args.checkpoint:
        model, meta, vocab = _load_model(Path(args.checkpoint), args.vocab)
        if model.has_label_head:
            ks = [int(k) for k in args.k.split(",")]
            recall = label_recall(model, corpus, vocab, meta.get("categories") or schema.categories, ks)
    report = evaluate(corpus, [r["generated"] for r in rows], schema, recall)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "report.json", json.dumps(report.to_json(), indent=1))
    _atomic_write(out / "report.txt", report.to_text() + "\n")
    report.write_violations(out / "violations.jsonl")
    print(report.to_text())
    return EXIT_OK


# ------------------------------------------------------------------ gradcheck


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    res = run_gradcheck(d=args.dims, vocab=args.vocab_size, n_kw=args.keywords, seed=args.seed)
    for name, err in res.errors.items():
        flag = "ok" if err <= res.tolerance else "FAIL"
        print(f"{name:18s} max_rel_err={err:.3e}  {flag}")
    print(f"gradcheck finished in {res.seconds:.1f}s")
    if res.failing:
        print("failing components: " + ", ".join(res.failing))
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------- main


def _train_flags(p):
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema")
    p.add_argument("--out", required=True)
    for key, typ in _OVERRIDES.items():
        p.add_argument("--" + key.replace("_", "-"), type=typ, dest=key)
    p.add_argument("--no-kw-mem", action="store_true")
    p.add_argument("--no-elstm", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fpdg", description=__doc__.splitlines()[0])
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus, vocab and manifest")
    p.add_argument("--schema")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train several variants with a shared seed")
    _train_flags(p)
    p.add_argument("--variants", default="full,no_mem,no_elstm")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("generate", help="decode descriptions for a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--corpus", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--min-len", type=int, default=15)
    p.add_argument("--max-len", type=int, default=70)
    p.add_argument("--limit", type=int)
    p.add_argument("--trace", action="store_true", help="write per-step diagnostics to trace.jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="BLEU, ROUGE-L, fidelity and optional label recall")
    p.add_argument("--generations", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema")
    p.add_argument("--checkpoint", help="also compute teacher-forced label recall")
    p.add_argument("--vocab")
    p.add_argument("--k", default="1,2,3")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every component")
    p.add_argument("--dims", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=12)
    p.add_argument("--keywords", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, D.SchemaError, D.CorpusParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
