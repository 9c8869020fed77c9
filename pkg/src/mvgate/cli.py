"""``mvgate`` command line: gen, featurize, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 validation or tolerance failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import checkpoint as ckpt_io
from .config import EXAMPLE_YAML, RunConfig
from .datagen import events_of, gen_dataset
from .features import featurize_tokens, read_features, write_features
from .gradcheck import grad_check
from .logs import event_record, parse_events, sessionize_all, build_vocab, tokenize_session, TokenVocab
from .model import Batch, ModelConfig, ParamStore, bce_loss, forward, init_params
from .tensor import Tensor
from .training import (ablation_csv, ablation_run, metrics, score, split, train)

log = logging.getLogger("mvgate")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _write_text(path: str, text: str) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _featurization_meta(cfg: RunConfig) -> dict:
    return {
        "status_windows": list(cfg.status_config().windows),
        "freq": asdict(cfg.freq_config()),
        "bucketing": dict(cfg.tree["pipeline"]["bucketing"]),
        "gap_seconds": int(cfg.tree["pipeline"]["gap_seconds"]),
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> int:
    """Generate a synthetic events file plus per-session labels."""
    sessions, _, kinds = gen_dataset(cfg.gen_spec())
    lines = [json.dumps(event_record(e), sort_keys=True) for e in events_of(sessions)]
    _write_text(cfg["paths.events_in"], "\n".join(lines) + "\n")
    labels = [json.dumps({"user": s.user_id, "start": s.start, "label": int(s.label), "kind": k},
                         sort_keys=True) for s, k in zip(sessions, kinds)]
    _write_text(cfg["paths.labels"], "\n".join(labels) + "\n")
    print(json.dumps({"events": len(lines), "sessions": len(sessions),
                      "anomalous": sum(k is not None for k in kinds)}))
    return EXIT_OK


def _read_labels(path) -> dict:
    if not path or not os.path.exists(path):
        return {}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[(rec["user"], int(rec["start"]))] = (rec.get("label"), rec.get("kind"))
    return out


def cmd_featurize(cfg: RunConfig) -> int:
    """Parse, sessionize, tokenize, split and derive status/frequency views."""
    p = cfg.tree["pipeline"]
    with open(cfg["paths.events_in"], encoding="utf-8") as fh:
        parsed = parse_events(fh, p["event_format"], p["max_malformed_fraction"])
    sessions = sessionize_all(parsed.events, p["gap_seconds"])
    labels = _read_labels(cfg["paths.labels"])
    bucketing = cfg.bucketing()
    toks = [tokenize_session(s, bucketing) for s in sessions]
    lab = [labels.get((s.user_id, s.start), (None, None)) for s in sessions]
    idx = list(range(len(sessions)))
    if lab and all(lb is not None for lb, _ in lab) and len({lb for lb, _ in lab}) == 2:

        class _Row:
            def __init__(self, i):
                self.i, self.label = i, lab[i][0]

        tr, te = split([_Row(i) for i in idx], 1.0 - float(p["test_ratio"]), seed=cfg.seed)
        which = {r.i: "train" for r in tr}
        which.update({r.i: "test" for r in te})
    else:
        # unlabeled or single-class input: everything is scored, vocab from all of it
        which = {i: "all" for i in idx}
    train_idx = [i for i in idx if which[i] in ("train", "all")]
    vocab = build_vocab([toks[i] for i in train_idx]) if train_idx else TokenVocab()
    digest = vocab.digest()
    records = []
    for i in idx:
        meta = {"split": which[i], "vocab": digest, "start": sessions[i].start}
        if lab[i][1] is not None:
            meta["kind"] = lab[i][1]
        records.append(featurize_tokens(toks[i], vocab, cfg.status_config(), cfg.freq_config(),
                                        user=sessions[i].user_id, label=lab[i][0], meta=meta))
    _ensure_parent(cfg["paths.features_out"])
    with open(cfg["paths.features_out"], "w", encoding="utf-8", newline="\n") as fh:
        write_features(records, fh)
    _write_text(cfg["paths.vocab"], json.dumps(vocab.to_json(), sort_keys=True) + "\n")
    print(json.dumps({"sessions": len(records), "malformed_lines": parsed.malformed,
                      "vocab_size": len(vocab), "vocab": digest,
                      "splits": {k: sum(v == k for v in which.values()) for k in sorted(set(which.values()))}}))
    return EXIT_OK


def _load_features(cfg: RunConfig) -> list:
    with open(cfg["paths.features_out"], encoding="utf-8") as fh:
        return read_features(fh)


def _splits(cfg: RunConfig, records: list):
    """(train, val, test) from a featurized file, deterministic under the seed."""
    pool = [r for r in records if r.meta.get("split") in ("train", "all")]
    test = [r for r in records if r.meta.get("split") in ("test", "all")]
    tcfg = cfg.train_config()
    train_set, val_set = split(pool, 1.0 - tcfg.val_ratio, seed=cfg.seed + 1)
    return train_set, val_set, test


def _vocab_size(cfg: RunConfig) -> tuple:
    with open(cfg["paths.vocab"], encoding="utf-8") as fh:
        vocab = TokenVocab.from_json(json.load(fh))
    return vocab, len(vocab)


def cmd_train(cfg: RunConfig) -> int:
    """Train on the train split; write the checkpoint and per-epoch log."""
    records = _load_features(cfg)
    vocab, vsize = _vocab_size(cfg)
    train_set, val_set, _ = _splits(cfg, records)
    meta = {"vocab_digest": vocab.digest(), "vocab": vocab.to_json(), **_featurization_meta(cfg)}
    epochs = []
    res = train(train_set, val_set, cfg.model_config(vsize), cfg.train_config(), meta=meta,
                on_epoch=epochs.append)
    _ensure_parent(cfg["paths.checkpoint"])
    ckpt_io.save(res.checkpoint, cfg["paths.checkpoint"])
    reports = cfg["paths.reports_dir"]
    os.makedirs(reports, exist_ok=True)
    _write_text(os.path.join(reports, "epochs.jsonl"),
                "".join(json.dumps(e, sort_keys=True) + "\n" for e in epochs))
    print(json.dumps({"best_epoch": res.best_epoch, "epochs": len(epochs),
                      "best_val_f1": max((e.get("val_f1", 0.0) for e in epochs), default=0.0)}))
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    """Score the test split (or a scores file) and report metrics."""
    threshold = cfg.train_config().threshold
    if cfg["paths.scores"]:
        with open(cfg["paths.scores"], encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        scores = np.array([r["score"] for r in rows], dtype=float)
        labels = np.array([r["label"] for r in rows], dtype=np.int64)
    else:
        ck = ckpt_io.load(cfg["paths.checkpoint"])
        test = [r for r in _load_features(cfg) if r.meta.get("split") in ("test", "all")]
        if any(r.label is None for r in test):
            raise ValueError("evaluation needs labeled sessions")
        expect = {k: v for k, v in _featurization_meta(cfg).items() if k != "gap_seconds"}
        scores = score(test, ck, expect=expect)
        labels = np.array([r.label for r in test], dtype=np.int64)
        threshold = float(ck.meta.get("threshold", threshold))
    report = metrics(scores, labels, threshold).to_dict()
    text = json.dumps(report, sort_keys=True)
    os.makedirs(cfg["paths.reports_dir"], exist_ok=True)
    _write_text(os.path.join(cfg["paths.reports_dir"], "eval.json"), text + "\n")
    print(text)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    """Train and evaluate every ablation variant; write a CSV table."""
    records = _load_features(cfg)
    _, vsize = _vocab_size(cfg)
    train_set, val_set, test = _splits(cfg, records)
    rows = ablation_run(train_set, val_set, test, cfg.model_config(vsize), cfg.train_config())
    csv_text = ablation_csv(rows)
    os.makedirs(cfg["paths.reports_dir"], exist_ok=True)
    _write_text(os.path.join(cfg["paths.reports_dir"], "ablation.csv"), csv_text)
    sys.stdout.write(csv_text)
    return EXIT_OK


def gradcheck_report(cfg: RunConfig):
    """Finite-difference check of the full model in float64, dropout off."""
    g = cfg.tree["gradcheck"]
    rng = np.random.default_rng(cfg.seed)
    T, B = int(g["seq_len"]), int(g["batch"])
    V = 10
    mcfg = ModelConfig(vocab_size=V, max_len=T + 1, d_model=g["d_model"], n_heads=g["n_heads"],
                       n_layers=g["n_layers"], mlp_layers=g["mlp_layers"], dropout=0.0)
    base = init_params(mcfg, rng, dtype=np.float64)
    # move away from the zero biases / unit gains of a fresh init
    params = ParamStore({k: Tensor(v.data + rng.normal(0.0, 0.3, v.shape), requires_grad=True, name=k)
                         for k, v in base.items()})
    tokens = np.zeros((B, T + 1), dtype=np.int64)
    tokens[:, 0] = 1
    mask = np.zeros((B, T + 1), dtype=bool)
    mask[:, 0] = True
    for b in range(B):
        n = T - b  # later rows are shorter, so padding is exercised
        tokens[b, 1:n + 1] = rng.integers(3, V, size=n)
        mask[b, 1:n + 1] = True
    ev = mask.copy()
    ev[:, 0] = False
    status = rng.integers(0, 4, size=(B, T + 1)) * ev
    freq = rng.uniform(-1.0, 3.0, size=(B, T + 1)) * ev
    batch = Batch(tokens, status, freq, mask, (np.arange(B) % 2).astype(np.int64))
    rep = grad_check(lambda: bce_loss(forward(batch, params, mcfg), batch.labels), dict(params.items()),
                     step=float(g["step"]))
    return rep, float(g["tolerance"])


def cmd_gradcheck(cfg: RunConfig) -> int:
    """Compare analytic and finite-difference gradients of the full model."""
    rep, tol = gradcheck_report(cfg)
    ok = rep.passed(tol)
    print(json.dumps({"max_rel_err": rep.max_rel_err, "worst_param": rep.worst_param,
                      "tolerance": tol, "passed": ok}, sort_keys=True))
    return EXIT_OK if ok else EXIT_INVALID


COMMANDS = {
    "gen": cmd_gen,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvgate", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__)
        sp.add_argument("-c", "--config", help="YAML run config (defaults apply when omitted)")
        sp.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf by dotted path; repeatable")
    sub.add_parser("example-config", help="print a commented example config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "example-config":
        sys.stdout.write(EXAMPLE_YAML)
        return EXIT_OK
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(args.set)
        return COMMANDS[args.command](cfg)
    except OSError as exc:
        print(f"mvgate {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, IndexError) as exc:
        print(f"mvgate {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
