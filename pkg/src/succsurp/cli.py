"""Command-line front end: ``succsurp {train,score,analyze,ksweep,correlate}``.

Every subcommand reads one config file (YAML or JSON) whose values can be
overridden by flags, writes its outputs into ``output_dir`` and leaves a
``manifest.json`` there with the resolved config, model fingerprint and,
where relevant, the sentence partition.

Exit codes: 0 success, 1 ran but a fit did not converge (or another
numerical warning state), 2 usage or input error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .base import load_model
from .corpus import (
    PREDICTORS,
    apply_exclusions,
    build_predictor_table,
    load_corpus,
    load_words,
    split_sentences,
    story_streams,
    story_tokens,
    unigram_frequency,
)
from .exceptions import ConfigurationError, NumericError, SuccsurpError, TrainingError, UsageError
from .lstm import LstmConfig, LstmLM
from .measures import DEFAULT_K, ScoredCorpus, paired, pearson_r, score_corpus, write_scatter
from .mixed import LMMSpec, fit_lmm, lrt
from .ngram import KneserNeyLM
from .vocab import build_vocabulary, encode, tokenize

log = logging.getLogger("succsurp")

DEFAULTS = {
    "seed": 0,
    "output_dir": "succsurp-out",
    "log_base": None,
    "model": {
        "kind": "ngram",
        "vocab_size": 10000,
        "order": 3,
        "discount": 0.75,
        "lstm": {},
        "path": None,
    },
    "data": {
        "train": None,
        "validation": None,
        "validation_fraction": 0.1,
        "corpus": None,
        "words": None,
        "rts": None,
        "freq": None,
        "scored": None,
    },
    "k_list": None,
    "split": {"fraction_exploratory": 1 / 3, "partition": "held_out"},
    "exclude_unk": False,
    "rt_range": None,
    "lmm": {
        "random_intercepts": ["subject", "item"],
        "random_slopes": "all",
        "covariance": "diagonal",
        "max_iter": 500,
    },
    "ksweep": {"random_slopes": ["word_length", "successor_surprisal", "entropy"]},
}

# stage offsets for deriving per-stage seeds from the one top-level seed
STAGE_SEEDS = {"train": 0, "split": 1}


class _Exit(Exception):
    def __init__(self, code, message=""):
        super().__init__(message)
        self.code = code


# -- configuration -------------------------------------------------------------------
def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg, dotted, value):
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot set {dotted}: {p} is not a section")
    node[leaf] = value


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the config file, then ``key.path=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise _Exit(2, f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise _Exit(2, f"{p}: cannot parse config: {exc}") from None
        if not isinstance(loaded, dict):
            raise _Exit(2, f"{p}: config must be a mapping")
        cfg = _merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    return cfg


def stage_seed(cfg, stage) -> int:
    return int(cfg["seed"]) * 1000 + STAGE_SEEDS[stage]


def _require(path, what):
    if path is None:
        raise _Exit(2, f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise _Exit(2, f"{what} not found: {p}")
    return p


def _out_dir(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, command, cfg, **extra):
    manifest = {"command": command, "version": __version__, "config": cfg, **extra}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_jsonable), encoding="utf-8")


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (tuple, set)):
        return list(v)
    return str(v)


# -- corpora -------------------------------------------------------------------------
def read_documents(path) -> list:
    """Token lists, one per document.

    A ``.csv`` path is read as a words file (one document per story);
    anything else as plain text with documents separated by blank lines.
    """
    p = _require(path, "corpus")
    if p.suffix.lower() == ".csv":
        words = load_words(p)
        return [(story, toks) for story, (toks, _) in story_tokens(words).items()]
    text = p.read_text(encoding="utf-8")
    docs, buf = [], []
    for line in text.splitlines():
        if line.strip():
            buf.append(line)
        elif buf:
            docs.append(" ".join(buf))
            buf = []
    if buf:
        docs.append(" ".join(buf))
    out = [(f"{p.stem}-{i}", tokenize(d)) for i, d in enumerate(docs)]
    return [(sid, toks) for sid, toks in out if toks]


def _streams(vocab, docs):
    return [encode(vocab, toks, story_id=sid) for sid, toks in docs]


# -- subcommands ---------------------------------------------------------------------
def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    docs = read_documents(cfg["data"]["train"])
    if not docs:
        raise _Exit(2, f"training corpus {cfg['data']['train']} has no tokens")
    if cfg["data"]["validation"]:
        valid_docs = read_documents(cfg["data"]["validation"])
    elif len(docs) >= 2 and cfg["data"]["validation_fraction"]:
        n_valid = max(1, int(round(len(docs) * float(cfg["data"]["validation_fraction"]))))
        docs, valid_docs = docs[:-n_valid], docs[-n_valid:]
    else:
        valid_docs = []
    m = cfg["model"]
    vocab = build_vocabulary([t for _, toks in docs for t in toks], int(m["vocab_size"]))
    train, valid = _streams(vocab, docs), _streams(vocab, valid_docs)
    if m["kind"] == "ngram":
        model = KneserNeyLM(order=int(m["order"]), discount=float(m["discount"])).fit(train, vocab)
        history = [{"epoch": 0, "valid_xent": _xent(model, valid) if valid else float("nan")}]
    elif m["kind"] == "lstm":
        lcfg = LstmConfig(**{**m.get("lstm", {}), "seed": stage_seed(cfg, "train")})
        model = LstmLM(**asdict(lcfg)).fit(train, vocab, validation=valid or None)
        history = model.history_
    else:
        raise UsageError(f"unknown model kind {m['kind']!r}")
    path = out / "model.npz"
    model.save(path)
    pd.DataFrame(history).to_csv(out / "train_log.csv", index=False)
    _write_manifest(
        out, "train", cfg, model_fingerprint=model.fingerprint_, vocab_size=len(vocab),
        train_tokens=int(sum(len(s) for s in train)), validation_tokens=int(sum(len(s) for s in valid)),
    )
    print(f"model {model.fingerprint_} written to {path}")
    return 0


def _xent(model, streams):
    sc = score_corpus(model, streams)
    return float(sc.column("surprisal").mean())


def _k_list(cfg, vocab_size):
    """Requested K values plus |V|; unset means the defaults that fit |V|."""
    if cfg["k_list"] is None:
        return sorted({k for k in DEFAULT_K if k <= vocab_size} | {vocab_size})
    ks = sorted({int(k) for k in cfg["k_list"]} | {vocab_size})
    bad = [k for k in ks if not 1 <= k <= vocab_size]
    if bad:
        raise UsageError(f"K values {bad} outside [1, {vocab_size}]")
    return ks


def cmd_score(cfg) -> int:
    out = _out_dir(cfg)
    model = load_model(_require(cfg["model"]["path"], "model file"))
    source = cfg["data"]["corpus"] or cfg["data"]["words"]
    src = _require(source, "corpus")
    if src.suffix.lower() == ".csv":
        streams = story_streams(load_words(src), model.vocab_)
    else:
        streams = _streams(model.vocab_, read_documents(src))
    ks = _k_list(cfg, model.vocab_size)
    scored = score_corpus(model, streams, ks)
    base = cfg["log_base"]
    scored.to_csv(out / "scored.csv", log_base=base)
    r = write_scatter(scored, out / "scatter.csv")
    _write_manifest(
        out, "score", cfg, model_fingerprint=model.fingerprint_, vocab_size=model.vocab_size,
        k_list=ks, n_tokens=len(scored), pearson_r=r,
    )
    print(f"scored {len(scored)} tokens; r(successor_surprisal, entropy) = {r:.4f}")
    return 0


def _scored_input(cfg):
    path = _require(cfg["data"]["scored"], "scored corpus")
    manifest = path.parent / "manifest.json"
    fp, V = "", 0
    if manifest.exists():
        info = json.loads(manifest.read_text(encoding="utf-8"))
        fp, V = info.get("model_fingerprint", ""), int(info.get("vocab_size", 0))
    return ScoredCorpus.from_csv(path, fp, V)


def _eligible_words(cfg):
    words, rts = load_corpus(_require(cfg["data"]["words"], "words file"), _require(cfg["data"]["rts"], "RT file"))
    lengths = {s: len(t) for s, (t, _) in story_tokens(words).items()}
    vocab = None
    if cfg["model"].get("path") and Path(cfg["model"]["path"]).exists():
        vocab = load_model(cfg["model"]["path"]).vocab_
    eligible = apply_exclusions(words, vocab, exclude_unk=bool(cfg["exclude_unk"]), story_lengths=lengths)
    part = split_sentences(words, cfg["split"]["fraction_exploratory"], seed=stage_seed(cfg, "split"))
    which = cfg["split"]["partition"]
    if which == "all":
        keep = None
    elif which in ("held_out", "exploratory"):
        keep = set(part.held_out_sentences if which == "held_out" else part.exploratory_sentences)
    else:
        raise UsageError(f"split.partition must be held_out, exploratory or all, got {which!r}")
    if keep is not None:
        eligible = [w for w in eligible if (w.story_id, w.sentence_index) in keep]
    freq = None
    if cfg["data"]["freq"]:
        freq_tokens = [t for _, toks in read_documents(cfg["data"]["freq"]) for t in toks]
        freq = dict(zip((w.key for w in eligible), unigram_frequency(freq_tokens, eligible)))
    return words, rts, eligible, part, freq, vocab


def lmm_spec(cfg, fixed, slopes_key="lmm") -> LMMSpec:
    lm = cfg["lmm"]
    slopes = cfg[slopes_key]["random_slopes"] if slopes_key in cfg else lm["random_slopes"]
    if slopes == "all":
        slopes = list(fixed)
    elif slopes in (None, "none"):
        slopes = []
    return LMMSpec(
        response="rt",
        fixed=tuple(fixed),
        random_intercepts=tuple(lm["random_intercepts"]),
        random_slopes=tuple(("subject", c) for c in slopes),
        covariance=lm["covariance"],
        criterion="ML",
    )


def analyze_table(table, spec, max_iter=500):
    """Full ML fit plus the two single-effect reductions and their LRTs."""
    full = fit_lmm(table, spec, max_iter=max_iter)
    fits, tests = {"full": full}, {}
    for name in ("successor_surprisal", "entropy"):
        reduced = fit_lmm(table, spec.drop_fixed(name), max_iter=max_iter)
        fits[f"minus_{name}"] = reduced
        tests[name] = lrt(full, reduced)
    return fits, tests


def cmd_analyze(cfg) -> int:
    out = _out_dir(cfg)
    scored = _scored_input(cfg)
    words, rts, eligible, part, freq, vocab = _eligible_words(cfg)
    table = build_predictor_table(
        eligible, rts, scored, entropy_kind="total", freq=freq, rt_range=cfg["rt_range"], vocab=vocab
    )
    table.to_csv(out / "predictors.csv")
    spec = lmm_spec(cfg, PREDICTORS)
    fits, tests = analyze_table(table.frame, spec, int(cfg["lmm"]["max_iter"]))
    report = []
    for name, fit in fits.items():
        fit.coef_table().to_csv(out / f"coef_{name}.csv", index=False)
        fit.varcomp_table().to_csv(out / f"varcomp_{name}.csv", index=False)
        report += [f"== {name} ==", fit.report(), ""]
    with open(out / "lrt.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dropped", "chi2", "df", "p", "loglik_full", "loglik_reduced"])
        for name, t in tests.items():
            w.writerow([name, repr(t.chi2), t.df, repr(t.p), repr(t.loglik_full), repr(t.loglik_reduced)])
            report.append(f"LRT {name}: {t.line()}")
    (out / "report.txt").write_text("\n".join(report) + "\n", encoding="utf-8")
    converged = {name: f.converged for name, f in fits.items()}
    _write_manifest(
        out, "analyze", cfg, model_fingerprint=scored.model_fingerprint, partition=part.record(),
        n_rows=len(table), n_words=len(eligible), converged=converged,
        lrt={k: asdict(v) for k, v in tests.items()},
    )
    for name, t in tests.items():
        print(f"{name}: {t.line()}")
    if not all(converged.values()):
        print("warning: some fits did not converge: " + ", ".join(k for k, v in converged.items() if not v), file=sys.stderr)
        return 1
    return 0


def correlation_rows(scored, ks):
    """Best-K entropy against successor surprisal and against total entropy."""
    rows = []
    for k in ks:
        col = f"entropy_top{k}"
        a, b = paired(scored, col, "successor_surprisal")
        c, d = paired(scored, col, "entropy")
        rows.append({"K": k, "r_successor_surprisal": pearson_r(a, b), "r_total_entropy": pearson_r(c, d)})
    return pd.DataFrame(rows)


def cmd_ksweep(cfg) -> int:
    out = _out_dir(cfg)
    scored = _scored_input(cfg)
    available = sorted(scored.k_list)
    if cfg["k_list"] is None:
        ks = available
    else:
        ks = sorted({int(k) for k in cfg["k_list"]} | ({scored.vocab_size} if scored.vocab_size else set()))
    missing = [k for k in ks if k not in available]
    if missing:
        raise ConfigurationError(f"K values {missing} are not in the scored corpus (has {available})")
    words, rts, eligible, part, freq, vocab = _eligible_words(cfg)
    spec = lmm_spec(cfg, PREDICTORS, slopes_key="ksweep")
    rows, converged = [], True
    for k in ks:
        table = build_predictor_table(eligible, rts, scored, entropy_kind=k, freq=freq, rt_range=cfg["rt_range"], vocab=vocab)
        fit = fit_lmm(table.frame, spec, max_iter=int(cfg["lmm"]["max_iter"]))
        converged &= fit.converged
        row = {"K": k, "converged": fit.converged}
        for term in ("entropy", "successor_surprisal"):
            row[f"{term}_beta"] = fit.beta[term]
            row[f"{term}_se"] = fit.se[term]
            row[f"{term}_t"] = fit.t[term]
        rows.append(row)
    coefs = pd.DataFrame(rows)
    corr = correlation_rows(scored, ks)
    coefs.to_csv(out / "ksweep_coefficients.csv", index=False)
    corr.to_csv(out / "ksweep_correlations.csv", index=False)
    _write_manifest(out, "ksweep", cfg, model_fingerprint=scored.model_fingerprint, partition=part.record(), k_list=ks)
    print(corr.to_string(index=False))
    return 0 if converged else 1


def cmd_correlate(cfg) -> int:
    out = _out_dir(cfg)
    scored = _scored_input(cfg)
    r = write_scatter(scored, out / "scatter.csv")
    ks = sorted(scored.k_list)
    corr = correlation_rows(scored, ks) if ks else pd.DataFrame()
    if ks:
        corr.to_csv(out / "correlations.csv", index=False)
    _write_manifest(out, "correlate", cfg, model_fingerprint=scored.model_fingerprint, pearson_r=r)
    print(f"r(successor_surprisal, entropy) = {r:.4f}")
    return 0


COMMANDS = {"train": cmd_train, "score": cmd_score, "analyze": cmd_analyze, "ksweep": cmd_ksweep, "correlate": cmd_correlate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="succsurp", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML or JSON config file")
    common.add_argument("-o", "--output-dir", help="directory for outputs and manifest.json")
    common.add_argument("--seed", type=int, help="top-level seed; stage seeds derive from it")
    common.add_argument("--model", dest="model_path", help="model container file")
    common.add_argument("--scored", help="scored-corpus CSV written by `score`")
    common.add_argument("--words", help="words CSV (story_id, sentence_index, word_index, word)")
    common.add_argument("--rts", help="reading-time CSV (subject_id, story_id, word_index, rt_ms)")
    common.add_argument("--k", dest="k_list", type=int, nargs="+", help="K values for best-K entropy")
    common.add_argument("--base2", action="store_true", help="write information measures in bits")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config entry, e.g. --set model.order=4")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a language model")
    p.add_argument("--train", help="training corpus (text, blank-line separated documents, or words CSV)")
    p.add_argument("--validation", help="validation corpus")
    p.add_argument("--kind", choices=["ngram", "lstm"])
    p.add_argument("--order", type=int)
    p.add_argument("--discount", type=float)
    p.add_argument("--vocab-size", type=int)

    p = sub.add_parser("score", parents=[common], help="per-token surprisal and entropy")
    p.add_argument("--corpus", help="corpus to score (text or words CSV)")

    p = sub.add_parser("analyze", parents=[common], help="mixed-model fits and likelihood-ratio tests")
    p.add_argument("--freq", help="frequency corpus for unigram log frequencies")
    p.add_argument("--partition", choices=["held_out", "exploratory", "all"])
    p.add_argument("--exclude-unk", action="store_true", default=None)

    p = sub.add_parser("ksweep", parents=[common], help="regressions and correlations across K")
    p.add_argument("--freq", help="frequency corpus for unigram log frequencies")
    p.add_argument("--partition", choices=["held_out", "exploratory", "all"])

    sub.add_parser("correlate", parents=[common], help="scatter file and correlations from a scored corpus")
    return parser


def resolve_config(args) -> dict:
    cfg = load_config(args.config, args.overrides)
    flag_map = {
        "output_dir": ("output_dir",),
        "seed": ("seed",),
        "model_path": ("model", "path"),
        "scored": ("data", "scored"),
        "words": ("data", "words"),
        "rts": ("data", "rts"),
        "k_list": ("k_list",),
        "train": ("data", "train"),
        "validation": ("data", "validation"),
        "kind": ("model", "kind"),
        "order": ("model", "order"),
        "discount": ("model", "discount"),
        "vocab_size": ("model", "vocab_size"),
        "corpus": ("data", "corpus"),
        "freq": ("data", "freq"),
        "partition": ("split", "partition"),
        "exclude_unk": ("exclude_unk",),
    }
    for attr, path in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            _set_path(cfg, ".".join(path), value)
    if args.base2:
        cfg["log_base"] = 2
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except _Exit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SuccsurpError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
