"""Command-line orchestration for the two-stage training pipeline.

Subcommands: gen-data, train-align, train-rrg, extract-saliency, generate,
evaluate, ablate-phi.  Every command is reproducible: (config, seed) fully
determines all outputs.  The SISR_SEED environment variable overrides the
config seed.  Exit codes: 0 success, 2 config error, 3 numeric divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from collections import OrderedDict

import numpy as np

from . import backbones as bb
from . import corpus as cs
from . import metrics as mx
from . import serialization
from .align import (IdentificationNet, NumericDivergenceError, saliency_map,
                    select_salient, train_identification)
from .config import ConfigError, RunConfig
from .rrg import ReportGenerator, generate, train_rrg

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    field_types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key not in field_types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = field_types[key]
        if kind == "int":
            overrides[key] = int(value)
        elif kind == "float":
            overrides[key] = float(value)
        else:
            overrides[key] = value
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    env_seed = os.environ.get("SISR_SEED")
    if env_seed is not None:
        cfg = cfg.with_overrides(seed=int(env_seed))
    return cfg.validate()


def _echo_config(cfg: RunConfig, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.json"))


def _fmt(x: float) -> str:
    return f"{x:.12g}"


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = _load_config(args)
    samples = cs.generate_corpus(cfg)
    cs.write_corpus(samples, args.out)
    _echo_config(cfg, args.out)
    abnormal = sum(1 for s in samples if s.labels)
    print(f"wrote {len(samples)} samples to {args.out} "
          f"({abnormal} abnormal, {len(samples) - abnormal} normal)")
    return 0


def cmd_train_align(args):
    cfg = _load_config(args)
    samples = cs.read_corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)

    def progress(epoch, means):
        print(f"epoch {epoch}: L_v={means[0]:.4f} L_t={means[1]:.4f} "
              f"L_bi={means[2]:.4f} L1={means[3]:.4f}")

    try:
        net, vocab, history = train_identification(samples, cfg, progress=progress)
    except NumericDivergenceError as exc:
        if exc.snapshot is not None:
            serialization.save_tensors(
                os.path.join(args.out, "ident.lastgood.ckpt"), exc.snapshot,
                {"kind": "identification-lastgood", "config": cfg.to_dict()})
        raise
    net.save(os.path.join(args.out, "ident.ckpt"))
    vocab.save(os.path.join(args.out, "vocab.txt"))
    with open(os.path.join(args.out, "align_log.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,L_v,L_t,L_bi,L1\n")
        for row in history:
            fh.write(f"{row[0]}," + ",".join(_fmt(v) for v in row[1:]) + "\n")
    print(f"wrote identification checkpoint to {args.out}")
    return 0


def cmd_train_rrg(args):
    cfg = _load_config(args)
    samples = cs.read_corpus(args.corpus)
    ident = IdentificationNet.load(args.ident)
    vocab = bb.Vocabulary.load(args.vocab)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)

    def progress(epoch, means):
        print(f"epoch {epoch}: L_I={means[0]:.4f} L_R={means[1]:.4f} L2={means[2]:.4f}")

    try:
        net, history = train_rrg(samples, ident, cfg, vocab,
                                 no_sisr_masking=args.no_sisr_masking,
                                 no_sisr_lm=args.no_sisr_lm, progress=progress)
    except NumericDivergenceError as exc:
        if exc.snapshot is not None:
            serialization.save_tensors(
                os.path.join(args.out, "rrg.lastgood.ckpt"), exc.snapshot,
                {"kind": "rrg-lastgood", "config": cfg.to_dict()})
        raise
    net.save(os.path.join(args.out, "rrg.ckpt"))
    with open(os.path.join(args.out, "rrg_log.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,L_I,L_R,L2\n")
        for row in history:
            fh.write(f"{row[0]}," + ",".join(_fmt(v) for v in row[1:]) + "\n")
    print(f"wrote report-generator checkpoint to {args.out}")
    return 0


def _corpus_image_ids(corpus_dir):
    ids = []
    with open(os.path.join(corpus_dir, "manifest.tsv"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                ids.append(line.split("\t")[0])
    return ids


def cmd_extract_saliency(args):
    ident = IdentificationNet.load(args.ident)
    cfg = ident.cfg
    samples = cs.read_corpus(args.corpus)
    image_ids = _corpus_image_ids(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    records = OrderedDict()
    csv_lines = ["image_id,patch_index,score"]
    set_lines = ["image_id,patch_index"]
    for image_id, sample in zip(image_ids, samples):
        scores = saliency_map(sample.image, ident)
        records[image_id] = scores
        for i, score in enumerate(scores):
            csv_lines.append(f"{image_id},{i},{_fmt(score)}")
        for i in select_salient(scores, cfg.k_percent):
            set_lines.append(f"{image_id},{i}")
    serialization.save_tensors(os.path.join(args.out, "saliency.sisr"), records)
    with open(os.path.join(args.out, "saliency.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(csv_lines) + "\n")
    with open(os.path.join(args.out, "salient_sets.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(set_lines) + "\n")
    print(f"wrote saliency for {len(records)} images to {args.out}")
    return 0


def cmd_generate(args):
    ident = IdentificationNet.load(args.ident)
    net = ReportGenerator.load(args.rrg)
    vocab = bb.Vocabulary.load(args.vocab)
    samples = cs.read_corpus(args.corpus)
    image_ids = _corpus_image_ids(args.corpus)
    mode = "greedy" if args.beam <= 1 else "beam"
    lines = []
    for image_id, sample in zip(image_ids, samples):
        rep = generate(sample.image, ident, net, mode=mode, beam_width=args.beam,
                       no_sisr_lm=args.no_sisr_lm)
        lines.append(f"{image_id}\t{bb.detokenize(rep.token_ids, vocab)}")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} reports to {args.out}")
    return 0


def _read_reports(path):
    out = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            image_id, _, text = line.partition("\t")
            out[image_id] = text
    return out


def _read_salient_sets(path):
    sets = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            line = line.strip()
            if not line:
                continue
            image_id, idx = line.split(",")
            sets.setdefault(image_id, set()).add(int(idx))
    return sets


def evaluate_against_corpus(reports: "OrderedDict[str, str]", corpus_dir,
                            salient_sets=None) -> mx.MetricReport:
    samples = cs.read_corpus(corpus_dir)
    image_ids = _corpus_image_ids(corpus_dir)
    by_id = dict(zip(image_ids, samples))
    candidates, references, pred_labels, ref_labels, sal_pairs = [], [], [], [], []
    for image_id, text in reports.items():
        sample = by_id[image_id]
        candidates.append(text.split())
        references.append(sample.report.split())
        pred_labels.append(cs.extract_labels(text))
        ref_labels.append(sample.labels)
        if salient_sets is not None and sample.lesion_patches:
            sal_pairs.append((salient_sets.get(image_id, set()),
                              set(sample.lesion_patches)))
    return mx.evaluate_reports(candidates, references, pred_labels, ref_labels,
                               sal_pairs or None)


def cmd_evaluate(args):
    reports = _read_reports(args.reports)
    salient_sets = _read_salient_sets(args.salient_sets) if args.salient_sets else None
    report = evaluate_against_corpus(reports, args.corpus, salient_sets)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_ablate_phi(args):
    cfg = _load_config(args)
    grid = [float(x) for x in args.phi_grid.split(",") if x != ""]
    if not grid:
        raise ConfigError("phi grid must be non-empty")
    train_samples = cs.read_corpus(args.corpus)
    eval_dir = args.eval_corpus or args.corpus
    ident = IdentificationNet.load(args.ident)
    vocab = bb.Vocabulary.load(args.vocab)
    eval_samples = cs.read_corpus(eval_dir)
    eval_ids = _corpus_image_ids(eval_dir)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)
    rows = ["phi,precision,recall,f1"]
    for phi in grid:
        run_cfg = cfg.with_overrides(phi=phi)
        net, _ = train_rrg(train_samples, ident, run_cfg, vocab)
        pred_labels, ref_labels = [], []
        for sample in eval_samples:
            rep = generate(sample.image, ident, net, mode="greedy")
            pred_labels.append(cs.extract_labels(bb.detokenize(rep.token_ids, vocab)))
            ref_labels.append(sample.labels)
        p, r, f1 = mx.micro_ce(pred_labels, ref_labels)
        rows.append(f"{_fmt(phi)},{_fmt(p)},{_fmt(r)},{_fmt(f1)}")
        print(rows[-1])
    with open(os.path.join(args.out, "ablate_phi.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sisr", description="salient-regions-guided report generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config field")

    p = sub.add_parser("gen-data", help="generate the synthetic paired corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-align", help="stage 1: train the identification network")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_align)

    p = sub.add_parser("train-rrg", help="stage 2: train the report generator")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ident", required=True, help="identification checkpoint")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-sisr-masking", action="store_true",
                   help="random masking (probability increment 0)")
    p.add_argument("--no-sisr-lm", action="store_true",
                   help="replace the saliency token by zeros")
    p.set_defaults(func=cmd_train_rrg)

    p = sub.add_parser("extract-saliency", help="export saliency maps and salient sets")
    p.add_argument("--ident", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_saliency)

    p = sub.add_parser("generate", help="decode reports for a corpus")
    p.add_argument("--ident", required=True)
    p.add_argument("--rrg", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--no-sisr-lm", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated reports against references")
    p.add_argument("--reports", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--salient-sets", help="optional salient_sets.csv for localization")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-phi", help="sweep the masking probability increment")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--eval-corpus", help="held-out corpus (defaults to --corpus)")
    p.add_argument("--ident", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--phi-grid", default="0,0.25,0.3,0.35,0.4,0.5")
    p.set_defaults(func=cmd_ablate_phi)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericDivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_script():
    sys.exit(main())


if __name__ == "__main__":
    main_script()
