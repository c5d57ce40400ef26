"""Command-line entry point: build-groups, train, predict, evaluate, synth.

All commands are deterministic given identical inputs and seed. Every
output directory receives a config.json echo of the effective run
configuration for provenance. Log level comes from PITA_LOG
(error|warn|info|debug). Nonzero exits print one machine-parsable line to
stderr: ``error: <Code>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import groups as groups_mod
from .core import Vocabulary, load_dataset, read_matrix
from .errors import (
    ConfigError,
    DimensionMismatch,
    DuplicateIngredient,
    EmptyDataset,
    EmptyDistribution,
    EmptyRecipe,
    InvalidK,
    InvalidVerdict,
    MissingCheckpoint,
    NumericalBlowup,
    ParseError,
    PitaError,
    UndefinedMetric,
    VocabularyMismatch,
    ZeroNormCentroid,
    ZeroNormEmbedding,
)
from .nn import load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, TrainedPipeline, evaluate, predict_batch, train_ap, train_id
from .retrieval import PairedFeatures, project, train_projection
from .rng import stage_rng
from .synth import SynthSpec, generate
from .transport import SinkhornConfig

log = logging.getLogger("pita.cli")

EXIT_PARSE = 2
EXIT_NUMERIC = 3
EXIT_MISSING_STAGE = 4

_PARSE_ERRORS = (
    ParseError,
    VocabularyMismatch,
    DimensionMismatch,
    InvalidVerdict,
    ConfigError,
    EmptyRecipe,
    DuplicateIngredient,
    EmptyDataset,
    InvalidK,
    FileNotFoundError,
    IsADirectoryError,
    NotADirectoryError,
    ValueError,
)
_NUMERIC_ERRORS = (
    ZeroNormEmbedding,
    ZeroNormCentroid,
    NumericalBlowup,
    EmptyDistribution,
    UndefinedMetric,
)

CONFIG_DEFAULTS = {
    "pipeline.mode": "full",
    "pipeline.loss": "wasserstein",
    "pipeline.detection_threshold": 0.5,
    "pipeline.top_k": 10,
    "pipeline.batch_size": 64,
    "pipeline.epochs": 30,
    "pipeline.seed": 0,
    "pipeline.lr": 1e-4,
    "pipeline.hidden_dims": [1024, 1024],
    "pipeline.amount_constant": 1000.0,
    "pipeline.pos_weight_clamp": 4.0,
    "pipeline.ce_eps": 1e-6,
    "sinkhorn.lambda": 200.0,
    "sinkhorn.max_iters": 2000,
    "sinkhorn.tol": 1e-8,
    "sinkhorn.p": 1.0,
    "retrieval.margin": 0.3,
    "retrieval.epochs": 10,
    "retrieval.out_dim": None,
}


def load_config(path=None, overrides=None) -> dict:
    """Defaults < config file < --set overrides; unknown keys rejected."""
    cfg = dict(CONFIG_DEFAULTS)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path=path) from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a flat JSON object")
        for key, value in file_cfg.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = value
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    return cfg


def pipeline_config(cfg: dict, seed: int | None = None) -> PipelineConfig:
    sk = SinkhornConfig(
        lam=float(cfg["sinkhorn.lambda"]),
        max_iters=int(cfg["sinkhorn.max_iters"]),
        tol=float(cfg["sinkhorn.tol"]),
        p=float(cfg["sinkhorn.p"]),
    )
    return PipelineConfig(
        mode=cfg["pipeline.mode"],
        loss=cfg["pipeline.loss"],
        detection_threshold=float(cfg["pipeline.detection_threshold"]),
        top_k=int(cfg["pipeline.top_k"]),
        batch_size=int(cfg["pipeline.batch_size"]),
        epochs=int(cfg["pipeline.epochs"]),
        seed=int(cfg["pipeline.seed"] if seed is None else seed),
        lr=float(cfg["pipeline.lr"]),
        hidden_dims=tuple(int(h) for h in cfg["pipeline.hidden_dims"]),
        amount_constant=float(cfg["pipeline.amount_constant"]),
        pos_weight_clamp=float(cfg["pipeline.pos_weight_clamp"]),
        ce_eps=float(cfg["pipeline.ce_eps"]),
        sinkhorn=sk,
    )


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _split_paths(data_dir: Path, split: str):
    return (
        data_dir / f"recipes_{split}.jsonl",
        data_dir / f"embeddings_{split}.bin",
        data_dir / "vocab.txt",
    )


def _load_split(data_dir: Path, split: str):
    recipes, embeddings, vocab = _split_paths(data_dir, split)
    for p in (recipes, embeddings, vocab):
        if not p.exists():
            raise FileNotFoundError(f"missing input file: {p}")
    return load_dataset(recipes, embeddings, vocab, split=split)


def _require_checkpoint(path: Path, stage: str):
    if not path.exists():
        raise MissingCheckpoint(f"stage {stage!r} needs checkpoint {path}")
    return load_checkpoint(path)


def _projected(dataset, retrieval_model):
    return dataset.with_embeddings(project(retrieval_model, dataset.embeddings))


def _write_log(history, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_ingredients=args.ingredients,
        n_groups=args.groups,
        n_recipes=args.recipes,
        seed=args.seed,
        noise=args.noise,
    )
    out = Path(args.out)
    summary = generate(out, spec)
    _echo_config(
        {
            "synth.ingredients": spec.n_ingredients,
            "synth.groups": spec.n_groups,
            "synth.recipes": spec.n_recipes,
            "synth.seed": spec.seed,
            "synth.noise": spec.noise,
            "synth.embedding_dim": spec.embedding_dim,
        },
        out,
    )
    print(json.dumps(summary))
    return 0


def cmd_build_groups(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    em = read_matrix(args.embeddings)
    if em.shape[0] != vocab.size:
        raise DimensionMismatch(
            f"embeddings rows {em.shape[0]} != vocabulary size {vocab.size}"
        )
    proposed = groups_mod.propose_pairs(em, args.threshold)
    verdicts = groups_mod.load_verdicts(args.verdicts, vocab)
    edges = groups_mod.apply_verdicts(proposed, verdicts)
    partition = groups_mod.connected_components(vocab.size, edges)
    model = groups_mod.build_substitution_model(partition, em)
    out = Path(args.out)
    groups_mod.save_substitution(model, out)
    _echo_config({"build_groups.threshold": args.threshold}, out)
    sizes = Counter(len(g) for g in model.groups)
    print(f"groups: {model.n_groups}")
    for size in sorted(sizes):
        print(f"size {size}: {sizes[size]}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg["pipeline.seed"] = args.seed
    config = pipeline_config(cfg)
    data_dir = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.seed

    if args.stage == "retrieval":
        train = _load_split(data_dir, "train")
        text_path = data_dir / "text_features_train.bin"
        if not text_path.exists():
            raise FileNotFoundError(f"missing input file: {text_path}")
        features = PairedFeatures(z_r=read_matrix(text_path), z_i=train.embeddings)
        model, history = train_projection(
            features,
            margin=float(cfg["retrieval.margin"]),
            epochs=int(cfg["retrieval.epochs"]),
            batch_size=config.batch_size,
            lr=config.lr,
            out_dim=cfg["retrieval.out_dim"],
            rng=stage_rng(seed, "retrieval"),
        )
        save_checkpoint(model, out / "retrieval.ckpt")
        _write_log(history, out / "train_log_retrieval.jsonl")
    elif args.stage == "id":
        retrieval = _require_checkpoint(out / "retrieval.ckpt", "id")
        train = _projected(_load_split(data_dir, "train"), retrieval)
        val = _try_projected_split(data_dir, "val", retrieval)
        model, history = train_id(train, config, val=val, rng=stage_rng(seed, "train_id"))
        save_checkpoint(model, out / "id.ckpt")
        _write_log(history, out / "train_log_id.jsonl")
    elif args.stage == "ap":
        retrieval = _require_checkpoint(out / "retrieval.ckpt", "ap")
        id_model = None
        if config.mode == "full":
            id_model = _require_checkpoint(out / "id.ckpt", "ap")
        if args.groups is None:
            raise ConfigError("stage ap needs --groups (substitution model directory)")
        substitution = groups_mod.load_substitution(args.groups)
        train = _projected(_load_split(data_dir, "train"), retrieval)
        val = _try_projected_split(data_dir, "val", retrieval)
        model, history = train_ap(
            train, id_model, substitution, config, val=val, rng=stage_rng(seed, "train_ap")
        )
        save_checkpoint(model, out / "ap.ckpt")
        _write_log(history, out / "train_log_ap.jsonl")
    else:
        raise ConfigError(f"unknown stage {args.stage!r}")
    _echo_config(cfg, out)
    print(f"stage {args.stage} done -> {out}")
    return 0


def _try_projected_split(data_dir, split, retrieval):
    try:
        ds = _load_split(data_dir, split)
    except FileNotFoundError:
        return None
    return _projected(ds, retrieval)


def _load_pipeline(model_dir: Path, groups_dir=None):
    cfg_path = model_dir / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"missing config echo: {cfg_path}")
    cfg = load_config(cfg_path)
    config = pipeline_config(cfg)
    retrieval = _require_checkpoint(model_dir / "retrieval.ckpt", "predict")
    id_model = None
    if config.mode == "full":
        id_model = _require_checkpoint(model_dir / "id.ckpt", "predict")
    ap_model = _require_checkpoint(model_dir / "ap.ckpt", "predict")
    substitution = None
    if groups_dir is not None:
        substitution = groups_mod.load_substitution(groups_dir)
    pipeline = TrainedPipeline(
        id_model=id_model, ap_model=ap_model, substitution=substitution, config=config
    )
    return pipeline, cfg, retrieval


def cmd_predict(args) -> int:
    model_dir = Path(args.model_dir)
    pipeline, cfg, retrieval = _load_pipeline(model_dir)
    raw = read_matrix(args.embeddings)
    Q = project(retrieval, raw)
    ids = [str(i) for i in range(Q.shape[0])]
    if args.recipes is not None:
        vocab_size = pipeline.ap_model.output_dim
        ids = _recipe_ids(args.recipes, Q.shape[0], vocab_size)
    amounts = predict_batch(pipeline, Q)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for rid, row in zip(ids, amounts):
            sparse = [[int(i), float(row[i])] for i in np.flatnonzero(row > 0)]
            fh.write(json.dumps({"id": rid, "amounts": sparse}, separators=(",", ":")) + "\n")
    _echo_config(cfg, out)
    print(f"predictions -> {out / 'predictions.jsonl'}")
    return 0


def _recipe_ids(recipes_path, n_rows, vocab_size):
    ids = [None] * n_rows
    with open(recipes_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path=recipes_path, line=line_no) from None
            emb = obj.get("emb")
            if not isinstance(emb, int) or emb < 0 or emb >= n_rows:
                raise ParseError(f"emb row {emb!r} outside embeddings", path=recipes_path, line=line_no)
            ids[emb] = str(obj.get("id", emb))
    return [rid if rid is not None else str(i) for i, rid in enumerate(ids)]


def cmd_evaluate(args) -> int:
    model_dir = Path(args.model_dir)
    pipeline, cfg, retrieval = _load_pipeline(model_dir, groups_dir=args.groups)
    dataset = _projected(_load_split(Path(args.data), args.split), retrieval)
    report = evaluate(pipeline, dataset, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(cfg, out)
    summary = {k: report[k] for k in ("n", "cvg", "iou", "emd", "cvg_group", "iou_group", "emd_group")}
    print(json.dumps(summary, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pita", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--ingredients", type=int, default=50)
    p.add_argument("--groups", type=int, default=10)
    p.add_argument("--recipes", type=int, default=5000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-groups", help="build substitution groups and matrices")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--verdicts", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--threshold", type=float, default=0.6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_groups)

    p = sub.add_parser("train", help="train one stage into a model directory")
    p.add_argument("--stage", choices=("retrieval", "id", "ap"), required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--groups", default=None, help="substitution model directory (stage ap)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict amounts for an embeddings file")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--recipes", default=None, help="optional recipes file providing ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate a trained model on a split")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _setup_logging():
    level = os.environ.get("PITA_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingCheckpoint as exc:
        print(f"error: MissingCheckpoint: {exc}", file=sys.stderr)
        return EXIT_MISSING_STAGE
    except _NUMERIC_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _PARSE_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except PitaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
