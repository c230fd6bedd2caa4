"""Command-line interface: corpus generation, training, evaluation, ablations.

Config files are flat ``key = value`` text where each value is a JSON
literal (so types are explicit): ``mask_rate = 0.2``, ``ablation_mode =
"full"``, ``composition_rules = [[0, 1, 6]]``.  ``remir print-config`` dumps
every default.  Every command writes a manifest (config, seed, input
digests) sufficient to reproduce its outputs; no command mutates its inputs.
The ``REMIR_THREADS`` environment variable caps torch worker threads
(default 1, which also pins run-to-run determinism).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import torch

from .corpus import (
    Corpus,
    CorpusFormatError,
    SynthConfig,
    SynthConfigError,
    generate_synthetic,
    parse_docred,
    write_corpus,
)
from .metrics import (
    collect_facts,
    gold_predictions,
    infer_subset,
    predictions_to_json,
    report_to_json_str,
)
from .trainer import (
    ABLATION_MODES,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

SPLIT_KEYS = ("num_train", "num_dev", "num_test")
DEFAULT_SPLITS = (200, 50, 50)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def parse_config_file(path: str | Path) -> dict:
    """Parse ``key = <json literal>`` lines; '#' starts a comment."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        try:
            out[key] = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ValueError(
                f"{path}:{lineno}: value for {key!r} is not a JSON literal: {value.strip()!r}"
            ) from exc
    return out


def format_config(values: dict) -> str:
    return "\n".join(f"{k} = {json.dumps(v)}" for k, v in values.items()) + "\n"


def build_train_config(values: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown train config keys: {unknown}")
    return TrainConfig(**values)


def build_synth_config(values: dict) -> tuple[SynthConfig, tuple[int, int, int]]:
    values = dict(values)
    splits = tuple(int(values.pop(k, d)) for k, d in zip(SPLIT_KEYS, DEFAULT_SPLITS))
    if "num_docs" in values:
        raise ValueError("set num_train/num_dev/num_test instead of num_docs")
    known = {f.name for f in fields(SynthConfig)} - {"num_docs"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown synth config keys: {unknown}")
    if "entities_per_doc" in values:
        values["entities_per_doc"] = tuple(values["entities_per_doc"])
    if "composition_rules" in values:
        values["composition_rules"] = tuple(tuple(r) for r in values["composition_rules"])
    cfg = SynthConfig(num_docs=sum(splits), **values)
    return cfg, splits


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, manifest: dict) -> None:
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def _split_corpus(corpus: Corpus, splits: tuple[int, int, int]) -> list[Corpus]:
    out = []
    start = 0
    for count in splits:
        out.append(replace(corpus, documents=corpus.documents[start : start + count]))
        start += count
    return out


def _gold_stats(corpus: Corpus) -> dict:
    provenance: dict[str, int] = {}
    subset_size = 0
    for doc in corpus.documents:
        for tr in doc.triples:
            key = tr.provenance or "unknown"
            provenance[key] = provenance.get(key, 0) + 1
        subset_size += len(infer_subset(tr.key() for tr in doc.triples))
    return {
        "documents": len(corpus.documents),
        "triples": sum(len(d.triples) for d in corpus.documents),
        "provenance_counts": provenance,
        "infer_subset_size": subset_size,
    }


def cmd_gen(args: argparse.Namespace) -> int:
    values = parse_config_file(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        cfg, splits = build_synth_config(values)
        corpus = generate_synthetic(cfg)
    except SynthConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = ("train.json", "dev.json", "test.json")
    parts = _split_corpus(corpus, splits)
    stats = {}
    for name, part in zip(names, parts):
        write_corpus(part, out_dir / name)
        stats[name] = _gold_stats(part)
    manifest = {
        "command": "gen",
        "config": {**asdict(cfg), "composition_rules": [list(r) for r in cfg.composition_rules],
                   "entities_per_doc": list(cfg.entities_per_doc)},
        "seed": cfg.seed,
        "splits": dict(zip(SPLIT_KEYS, splits)),
        "relation_names": list(corpus.relation_names),
        "stats": stats,
        "outputs": {name: _sha256(out_dir / name) for name in names},
    }
    _write_manifest(out_dir, manifest)
    print(f"wrote {', '.join(names)} and manifest.json to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_SMOKE_OVERRIDES = dict(
    epochs=2,
    hidden_size=32,
    encoder_layers=1,
    pair_in_width=32,
    pair_dim=32,
    batch_size=8,
)


def _apply_train_flags(cfg: TrainConfig, args: argparse.Namespace) -> TrainConfig:
    overrides = {}
    if args.smoke:
        overrides.update(_SMOKE_OVERRIDES)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mask_rate is not None:
        overrides["mask_rate"] = args.mask_rate
    if args.depth is not None:
        overrides["inference_depth"] = args.depth
    if args.ablation is not None:
        overrides["ablation_mode"] = args.ablation
    if args.precision is not None:
        overrides["precision"] = args.precision
    return replace(cfg, **overrides) if overrides else cfg


def _load_split(data_dir: Path, ckpt_names=None) -> tuple[Corpus, Corpus | None]:
    train_path = data_dir / "train.json"
    dev_path = data_dir / "dev.json"
    if not train_path.exists():
        raise FileNotFoundError(f"no train.json in {data_dir}")
    if ckpt_names is not None:
        train_corpus = parse_docred(train_path, relation_names=ckpt_names)
        dev_corpus = parse_docred(dev_path, relation_names=ckpt_names) if dev_path.exists() else None
        return train_corpus, dev_corpus
    if dev_path.exists():
        from .corpus import load_dataset

        train_corpus, dev_corpus = load_dataset([train_path, dev_path])
        return train_corpus, dev_corpus
    return parse_docred(train_path), None


def cmd_train(args: argparse.Namespace) -> int:
    data_dir = Path(args.data_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    resume_ckpt = None
    if args.resume:
        resume_ckpt = load_checkpoint(args.resume)
        cfg = resume_ckpt.config
        train_corpus, dev_corpus = _load_split(data_dir, ckpt_names=resume_ckpt.relation_names)
    else:
        values = parse_config_file(args.config) if args.config else {}
        cfg = _apply_train_flags(build_train_config(values), args)
        train_corpus, dev_corpus = _load_split(data_dir)

    try:
        result = train(train_corpus, cfg, dev_corpus=dev_corpus, resume_from=resume_ckpt)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2

    save_checkpoint(result.checkpoint, out_dir / "checkpoint.pkl")
    (out_dir / "history.json").write_text(json.dumps(result.history, indent=2))
    inputs = {
        p.name: _sha256(p) for p in (data_dir / "train.json", data_dir / "dev.json") if p.exists()
    }
    _write_manifest(
        out_dir,
        {
            "command": "train",
            "config": asdict(cfg),
            "seed": cfg.seed,
            "inputs": inputs,
            "resumed_from_epoch": resume_ckpt.epoch if resume_ckpt else None,
            "best_epoch": result.best_epoch,
            "best_dev_f1": result.checkpoint.best_dev_f1,
            "skipped_docs": result.skipped_docs,
        },
    )
    print(
        f"trained {cfg.epochs} epoch(s); best dev F1 {result.checkpoint.best_dev_f1:.4f} "
        f"at epoch {result.best_epoch}; outputs in {out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _parse_sweep(spec: str) -> list[float]:
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ValueError(f"sweep spec must be start:stop:step, got {spec!r}") from None
    if step <= 0:
        raise ValueError("sweep step must be positive")
    count = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(count)]


def _rate_tag(rate: float) -> str:
    return f"{rate:g}".replace(".", "p")


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    corpus = parse_docred(args.data, relation_names=ckpt.relation_names)
    train_facts = frozenset()
    if args.train_data:
        train_facts = collect_facts(parse_docred(args.train_data, relation_names=ckpt.relation_names))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rates = _parse_sweep(args.sweep) if args.sweep else [args.mask_rate]
    rows = []
    for rate in rates:
        report = evaluate(ckpt, corpus, eval_mask_rate=rate, train_facts=train_facts)
        tag = _rate_tag(rate)
        (out_dir / f"report_rate{tag}.json").write_text(report_to_json_str(report))
        (out_dir / f"report_rate{tag}.txt").write_text(report.table() + "\n")
        rows.append((rate, report.f1, report.ign_f1))
        print(f"rate {rate:g}: F1={report.f1:.4f} IgnF1={report.ign_f1:.4f}")
    if args.sweep:
        with (out_dir / "sweep.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rate", "f1", "ign_f1"])
            writer.writerows(rows)

    # Prediction dump (original path) in the submission schema.
    from .trainer import model_from_checkpoint, prepare_corpus, predict_document

    model, cfg, vocab = model_from_checkpoint(ckpt)
    preds = set()
    for prep in prepare_corpus(corpus, vocab, ckpt.entity_types, cfg):
        keys = predict_document(model, prep)
        preds.update((prep.doc.doc_id, h, t, r) for h, t, r in keys)
    (out_dir / "predictions.json").write_text(json.dumps(predictions_to_json(preds, corpus), indent=2))

    _write_manifest(
        out_dir,
        {
            "command": "eval",
            "checkpoint": _sha256(Path(args.ckpt)),
            "data": _sha256(Path(args.data)),
            "rates": rates,
            "seed": ckpt.config.seed,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(args: argparse.Namespace) -> int:
    values = parse_config_file(args.config) if args.config else {}
    base_cfg = build_train_config(values)
    data_dir = Path(args.data_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_corpus, dev_corpus = _load_split(data_dir)
    test_path = data_dir / "test.json"
    eval_name = "test.json" if test_path.exists() else "dev.json"

    modes = [m.strip() for m in args.modes.split(",")] if args.modes else ["full"]
    for mode in modes:
        if mode not in ABLATION_MODES:
            print(f"error: unknown ablation mode {mode!r}", file=sys.stderr)
            return 1
    depths = [int(d) for d in args.depths.split(",")] if args.depths else [None]
    seeds = [base_cfg.seed + i for i in range(args.num_seeds)]

    variants = []
    for mode in modes:
        for depth in depths:
            label = mode if depth is None else f"{mode}@depth{depth}"
            cfg = replace(base_cfg, ablation_mode=mode)
            if depth is not None:
                cfg = replace(cfg, inference_depth=depth)
            variants.append((label, cfg))

    rows = []
    runs = []
    for label, cfg in variants:
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            result = train(train_corpus, run_cfg, dev_corpus=dev_corpus)
            eval_corpus = (
                parse_docred(test_path, relation_names=train_corpus.relation_names)
                if test_path.exists()
                else dev_corpus
            )
            report = evaluate(
                result.checkpoint,
                eval_corpus,
                train_facts=collect_facts(train_corpus),
            )
            rows.append(
                {
                    "variant": label,
                    "seed": seed,
                    "f1": report.f1,
                    "ign_f1": report.ign_f1,
                    "inter_f1": report.inter_f1,
                    "infer_f1": report.infer_f1,
                }
            )
            runs.append({"variant": label, "seed": seed, "eval_split": eval_name})
            print(
                f"{label} seed={seed}: F1={report.f1:.4f} InferF1={report.infer_f1:.4f}"
            )

    with (out_dir / "ablation.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "seed", "f1", "ign_f1", "inter_f1", "infer_f1"])
        writer.writeheader()
        writer.writerows(rows)

    summary_lines = [f"{'variant':<28} {'F1':>16} {'InferF1':>16}  (mean +/- sd over {len(seeds)} seeds)"]
    summary_rows = []
    for label, _ in variants:
        sub = [r for r in rows if r["variant"] == label]
        stats = {}
        for key in ("f1", "ign_f1", "inter_f1", "infer_f1"):
            vals = np.array([r[key] for r in sub])
            stats[key] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=0))}
        summary_rows.append({"variant": label, **{k: v["mean"] for k, v in stats.items()}})
        summary_lines.append(
            f"{label:<28} {stats['f1']['mean']:7.4f}+/-{stats['f1']['sd']:6.4f} "
            f"{stats['infer_f1']['mean']:7.4f}+/-{stats['infer_f1']['sd']:6.4f}"
        )
    with (out_dir / "ablation_summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "f1", "ign_f1", "inter_f1", "infer_f1"])
        writer.writeheader()
        writer.writerows(summary_rows)
    (out_dir / "ablation_summary.txt").write_text("\n".join(summary_lines) + "\n")
    print("\n".join(summary_lines))

    inputs = {
        p.name: _sha256(p)
        for p in (data_dir / "train.json", data_dir / "dev.json", test_path)
        if p.exists()
    }
    _write_manifest(
        out_dir,
        {
            "command": "ablate",
            "config": asdict(base_cfg),
            "modes": modes,
            "depths": [d for d in depths if d is not None],
            "seeds": seeds,
            "inputs": inputs,
            "runs": runs,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# print-config
# ---------------------------------------------------------------------------


def cmd_print_config(args: argparse.Namespace) -> int:
    if args.kind == "train":
        print(format_config(asdict(TrainConfig())), end="")
    else:
        cfg = SynthConfig()
        values = asdict(cfg)
        del values["num_docs"]
        values["entities_per_doc"] = list(cfg.entities_per_doc)
        values["composition_rules"] = [list(r) for r in cfg.composition_rules]
        splits = dict(zip(SPLIT_KEYS, DEFAULT_SPLITS))
        print(format_config({**splits, **values}), end="")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="remir",
        description="Masked-reconstruction relation extraction: data generation, "
        "training, evaluation, and ablation sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic corpus (train/dev/test + manifest)")
    p_gen.add_argument("--config", help="synth config file (see print-config --kind synth)")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train a model on a data directory")
    p_train.add_argument("--config", help="train config file (see print-config --kind train)")
    p_train.add_argument("--data-dir", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--mask-rate", type=float, default=None)
    p_train.add_argument("--depth", type=int, default=None)
    p_train.add_argument("--ablation", choices=ABLATION_MODES, default=None)
    p_train.add_argument("--precision", choices=["float32", "float64"], default=None)
    p_train.add_argument("--smoke", action="store_true", help="tiny sizes, 2 epochs")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True, help="corpus JSON file")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--mask-rate", type=float, default=0.0)
    p_eval.add_argument("--sweep", help="rate sweep start:stop:step, e.g. 0:0.8:0.1")
    p_eval.add_argument("--train-data", help="training corpus for the ignore-train score")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="train mode/seed grids and tabulate results")
    p_abl.add_argument("--config", help="base train config file")
    p_abl.add_argument("--data-dir", required=True)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--modes", help=f"comma list from {','.join(ABLATION_MODES)}")
    p_abl.add_argument("--depths", help="comma list of inference depths (depth sweep)")
    p_abl.add_argument("--num-seeds", type=int, default=3, help="seeds base_seed..base_seed+n-1")
    p_abl.set_defaults(func=cmd_ablate)

    p_cfg = sub.add_parser("print-config", help="dump default configs in config-file form")
    p_cfg.add_argument("--kind", choices=["train", "synth"], default="train")
    p_cfg.set_defaults(func=cmd_print_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(max(1, int(os.environ.get("REMIR_THREADS", "1"))))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CorpusFormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
