"""Command-line pipeline: synth, prepare, train, eval, attention, map,
holdout-city, replay.

Every artifact-producing run writes a manifest (resolved configuration plus
input digests) next to its outputs; ``replay`` re-runs a manifest and
reproduces the outputs bitwise. All randomness flows from the --seed flag.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .errors import ConfigError, TractMILError
from .geodata import (
    assign_to_tracts,
    build_bags,
    holdout_city_split,
    load_atlas,
    load_boundaries,
    load_embeddings,
    load_income,
    load_split,
    save_split,
    stratified_split,
)
from .metrics import dump_attention, emit_prediction_map, evaluate, write_attention_csv
from .synth import SynthConfig, generate, write_dataset
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_USAGE = 2


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(subcommand: str, config: dict, input_keys: list[str], outputs: list[str]) -> None:
    inputs = {}
    for key in input_keys:
        path = config.get(key)
        if path:
            inputs[key] = {"path": path, "sha256": _sha256(path)}
    manifest = {
        "tool": "tractmil",
        "version": __version__,
        "subcommand": subcommand,
        "seed": config.get("seed"),
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
    }
    path = os.path.join(config["out"], "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _train_config(config: dict) -> TrainConfig:
    pos_weight = config["pos_weight"]
    if pos_weight != "auto":
        try:
            pos_weight = float(pos_weight)
        except ValueError as exc:
            raise ConfigError(f"--pos-weight must be 'auto' or a number, got {pos_weight!r}") from exc
    return TrainConfig(
        learning_rate=config["learning_rate"],
        weight_decay=config["weight_decay"],
        dropout_rate=config["dropout"],
        batch_size=config["batch_size"],
        label_smoothing=config["label_smoothing"],
        max_epochs=config["epochs"],
        patience=config["patience"],
        seed=config["seed"],
        pos_weight=pos_weight,
        l_dim=config["l_dim"],
        use_income=bool(config.get("income_csv")),
        freeze_attention=config.get("freeze_attention", False),
        freeze_income_weight=config.get("freeze_income_weight", False),
        threads=config.get("threads", 1),
    )


def _ingest(config: dict):
    """Shared ingestion path: embeddings + boundaries (+ atlas, + income) -> bags."""
    instances = load_embeddings(config["embeddings"])
    boundaries = load_boundaries(config["boundaries"])
    labels = load_atlas(config["atlas"]) if config.get("atlas") else None
    incomes = load_income(config["income_csv"]) if config.get("income_csv") else None
    assignment = assign_to_tracts(instances, boundaries)
    bags = build_bags(instances, assignment, labels=labels, incomes=incomes)
    return bags, boundaries


def _history_dict(record) -> dict:
    return {
        "epoch": record.epoch,
        "train_loss": record.train_loss,
        "train_accuracy": record.train_accuracy,
        "val_accuracy": record.val_accuracy,
        "val_macro_f1": record.val_macro_f1,
    }


def _write_history(history, best_epoch: int, path: str) -> None:
    doc = {"best_epoch": best_epoch, "epochs": [_history_dict(r) for r in history]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _write_report(report, extra: dict, path: str | None) -> None:
    doc = dict(extra)
    doc.update(report.to_dict())
    text = json.dumps(doc, indent=2)
    print(text)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def run_synth(config: dict) -> None:
    synth_config = SynthConfig(
        n_tracts=config["n_tracts"],
        k_min=config["k_min"],
        k_max=config["k_max"],
        m=config["m"],
        positive_rate=config["positive_rate"],
        witness_rate=config["witness_rate"],
        separation=config["separation"],
        noise_std=config["noise_std"],
        n_cities=config["n_cities"],
        seed=config["seed"],
    )
    dataset = generate(synth_config)
    os.makedirs(config["out"], exist_ok=True)
    paths = write_dataset(dataset, config["out"])
    _write_manifest("synth", config, [], [os.path.basename(p) for p in paths.values()])
    logger.info("wrote synthetic dataset with %d tracts to %s", synth_config.n_tracts, config["out"])


def run_prepare(config: dict) -> None:
    bags, _ = _ingest(config)
    plan = stratified_split(
        bags,
        ratios=tuple(config["ratios"]),
        seed=config["seed"],
    )
    os.makedirs(config["out"], exist_ok=True)
    save_split(plan, os.path.join(config["out"], "split.json"))
    _write_manifest("prepare", config, ["embeddings", "atlas", "boundaries"], ["split.json"])
    logger.info(
        "split %d labeled tracts into %d/%d/%d",
        len(plan.all_ids), len(plan.train), len(plan.validation), len(plan.test),
    )


def run_train(config: dict) -> None:
    bags, _ = _ingest(config)
    plan = load_split(config["split"])
    cfg = _train_config(config)
    result = train(bags, plan, cfg)
    os.makedirs(config["out"], exist_ok=True)
    save_checkpoint(result.model, cfg, os.path.join(config["out"], "checkpoint.json"))
    _write_history(result.history, result.best_epoch, os.path.join(config["out"], "history.json"))
    _write_manifest(
        "train",
        config,
        ["embeddings", "atlas", "boundaries", "split", "income_csv"],
        ["checkpoint.json", "history.json"],
    )
    logger.info("best epoch %d of %d", result.best_epoch, len(result.history))


def run_eval(config: dict) -> None:
    bags, _ = _ingest(config)
    plan = load_split(config["split"])
    model = load_checkpoint(config["checkpoint"])
    wanted = plan.partition(config["partition"])
    selected = [b for b in sorted(bags, key=lambda b: b.tract_id) if b.tract_id in wanted]
    report = evaluate(model, selected, threshold=config["threshold"])
    out = config.get("out")
    report_path = None
    if out:
        os.makedirs(out, exist_ok=True)
        report_path = os.path.join(out, "report.json")
    _write_report(report, {"partition": config["partition"], "n_bags": len(selected)}, report_path)
    if out:
        _write_manifest(
            "eval",
            config,
            ["checkpoint", "embeddings", "atlas", "boundaries", "split", "income_csv"],
            ["report.json"],
        )


def run_attention(config: dict) -> None:
    bags, _ = _ingest(config)
    model = load_checkpoint(config["checkpoint"])
    records = dump_attention(
        model, sorted(bags, key=lambda b: b.tract_id), top_k=config.get("top_k")
    )
    os.makedirs(config["out"], exist_ok=True)
    write_attention_csv(records, os.path.join(config["out"], "attention.csv"))
    _write_manifest(
        "attention", config, ["checkpoint", "embeddings", "boundaries"], ["attention.csv"]
    )
    logger.info("wrote %d attention records", len(records))


def run_map(config: dict) -> None:
    bags, boundaries = _ingest(config)
    model = load_checkpoint(config["checkpoint"])
    os.makedirs(config["out"], exist_ok=True)
    counts = emit_prediction_map(
        model,
        sorted(bags, key=lambda b: b.tract_id),
        boundaries,
        os.path.join(config["out"], "predictions.geojson"),
        threshold=config["threshold"],
    )
    _write_manifest(
        "map",
        config,
        ["checkpoint", "embeddings", "atlas", "boundaries", "income_csv"],
        ["predictions.geojson"],
    )
    logger.info("map: %d features written, %d bags skipped", counts["written"], counts["skipped"])


def run_holdout_city(config: dict) -> None:
    bags, _ = _ingest(config)
    plan = holdout_city_split(
        bags, config["city"], val_fraction=config["val_fraction"], seed=config["seed"]
    )
    cfg = _train_config(config)
    result = train(bags, plan, cfg)
    by_id = {b.tract_id: b for b in bags}
    test_bags = [by_id[t] for t in sorted(plan.test)]
    report = evaluate(result.model, test_bags, threshold=config["threshold"])
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    save_split(plan, os.path.join(out, "split.json"))
    save_checkpoint(result.model, cfg, os.path.join(out, "checkpoint.json"))
    _write_history(result.history, result.best_epoch, os.path.join(out, "history.json"))
    _write_report(
        report,
        {"partition": "test", "city": config["city"], "n_bags": len(test_bags)},
        os.path.join(out, "report.json"),
    )
    _write_manifest(
        "holdout-city",
        config,
        ["embeddings", "atlas", "boundaries", "income_csv"],
        ["split.json", "checkpoint.json", "history.json", "report.json"],
    )


HANDLERS = {
    "synth": run_synth,
    "prepare": run_prepare,
    "train": run_train,
    "eval": run_eval,
    "attention": run_attention,
    "map": run_map,
    "holdout-city": run_holdout_city,
}


def run_replay(config: dict) -> None:
    with open(config["manifest"], encoding="utf-8") as fh:
        manifest = json.load(fh)
    subcommand = manifest.get("subcommand")
    if subcommand not in HANDLERS:
        raise ConfigError(f"manifest names unknown subcommand {subcommand!r}")
    for name, entry in (manifest.get("inputs") or {}).items():
        current = _sha256(entry["path"])
        if current != entry["sha256"]:
            logger.warning("input %s (%s) changed since the manifest was written", name, entry["path"])
    HANDLERS[subcommand](manifest["config"])


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--learning-rate", type=float, default=1e-5)
    parser.add_argument("--weight-decay", type=float, default=1e-4)
    parser.add_argument("--dropout", type=float, default=0.9)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--label-smoothing", type=float, default=0.1)
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--patience", type=int, default=10)
    parser.add_argument("--pos-weight", default="auto", help="'auto' or an explicit positive real")
    parser.add_argument("--l-dim", type=int, default=128, help="attention hidden dimension")
    parser.add_argument("--threads", type=int, default=1, help="workers for bag-parallel sections")
    parser.add_argument("--freeze-attention", action="store_true",
                        help="freeze V=U=0 (mean-pooling ablation)")
    parser.add_argument("--freeze-income-weight", action="store_true",
                        help="keep the income fusion weight at 0 (fusion ablation)")


def _add_ingest_flags(parser: argparse.ArgumentParser, atlas_required: bool = True) -> None:
    parser.add_argument("--embeddings", required=True, help="embeddings JSONL file")
    parser.add_argument("--boundaries", required=True, help="tract boundaries GeoJSON file")
    if atlas_required:
        parser.add_argument("--atlas", required=True, help="atlas CSV with the four flag columns")
    else:
        parser.add_argument("--atlas", default=None, help="atlas CSV with the four flag columns")
    parser.add_argument("--income-csv", default=None, help="optional tract income CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tractmil",
        description="Classify census tracts as food-insecure from bags of street-view image embeddings.",
    )
    parser.add_argument("--version", action="version", version=f"tractmil {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-tracts", type=int, default=600)
    p.add_argument("--k-min", type=int, default=5)
    p.add_argument("--k-max", type=int, default=20)
    p.add_argument("--m", type=int, default=32)
    p.add_argument("--positive-rate", type=float, default=0.28)
    p.add_argument("--witness-rate", type=float, default=0.2)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--noise-std", type=float, default=0.75)
    p.add_argument("--n-cities", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("prepare", help="ingest inputs and write a stratified split plan")
    _add_ingest_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", type=float, nargs=3, default=[0.6, 0.2, 0.2],
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on a prepared split")
    _add_ingest_flags(p)
    p.add_argument("--split", required=True, help="split plan JSON from prepare")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split partition")
    _add_ingest_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--partition", choices=["train", "validation", "test"], default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None, help="directory for report.json (stdout only if omitted)")

    p = sub.add_parser("attention", help="dump per-image attention weights")
    _add_ingest_flags(p, atlas_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("map", help="write a GeoJSON prediction map")
    _add_ingest_flags(p, atlas_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("holdout-city", help="leave-one-city-out: split, train, evaluate")
    _add_ingest_flags(p)
    p.add_argument("--city", required=True)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)

    p = sub.add_parser("replay", help="re-run a subcommand from its manifest")
    p.add_argument("manifest", help="path to a manifest.json written by a previous run")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else int(exc.code)

    config = {k: v for k, v in vars(args).items() if k != "command"}
    handler = run_replay if args.command == "replay" else HANDLERS[args.command]
    try:
        handler(config)
    except TractMILError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except OSError as exc:
        name = getattr(exc, "filename", None)
        print(f"error: {exc.strerror or exc}: {name or ''}".rstrip(), file=sys.stderr)
        return EXIT_DATA_ERROR
    return EXIT_OK


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
