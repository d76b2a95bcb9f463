"""Batch feature extraction: images listed in a manifest become one JSONL
embedding record each, using a backbone's penultimate-layer activations.

Inference is deterministic: eval mode, no gradients, a fixed center crop (no
augmentation), and per-path caching so the same image always yields the same
vector. Without a weights file the backbone falls back to a seeded random
initialization, a documented stand-in for environments where pretrained
scene-recognition weights are unavailable; the output format and determinism
guarantees do not depend on the weights' origin.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass

import torch
from PIL import Image
from torchvision import models, transforms

logger = logging.getLogger(__name__)

# backbone identifier -> (constructor, penultimate width)
BACKBONES = {
    "resnet18": (models.resnet18, 512),
    "resnet34": (models.resnet34, 512),
    "resnet50": (models.resnet50, 2048),
}

# standard ImageNet-style preprocessing: resize, deterministic center crop, normalize
PREPROCESS = transforms.Compose(
    [
        transforms.Resize(256),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
        transforms.Normalize(mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]),
    ]
)

MANIFEST_COLUMNS = ("path", "image_id", "lat", "lon", "city")


class ExtractError(Exception):
    """Manifest or configuration problems that abort the run."""


@dataclass
class ManifestRow:
    path: str
    image_id: str
    lat: float
    lon: float
    city: str


def load_manifest(path) -> list[ManifestRow]:
    """Parse the CSV manifest; image ids must be unique and coordinates valid."""
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        available = reader.fieldnames or []
        for column in MANIFEST_COLUMNS:
            if column not in available:
                raise ExtractError(
                    f"{path}: missing manifest column {column!r}; available: {available}"
                )
        for lineno, record in enumerate(reader, start=2):
            try:
                row = ManifestRow(
                    path=record["path"].strip(),
                    image_id=record["image_id"].strip(),
                    lat=float(record["lat"]),
                    lon=float(record["lon"]),
                    city=record["city"].strip(),
                )
            except (TypeError, ValueError) as exc:
                raise ExtractError(f"{path}: line {lineno}: {exc}") from exc
            if not row.image_id:
                raise ExtractError(f"{path}: line {lineno}: empty image_id")
            if row.image_id in seen:
                raise ExtractError(f"{path}: line {lineno}: duplicate image_id {row.image_id!r}")
            if not (-90.0 <= row.lat <= 90.0) or not (-180.0 <= row.lon <= 180.0):
                raise ExtractError(f"{path}: line {lineno}: coordinates out of range")
            seen.add(row.image_id)
            rows.append(row)
    if not rows:
        raise ExtractError(f"{path}: manifest has no rows")
    return rows


def build_backbone(name: str, weights_path: str | None, seed: int):
    """Construct the backbone with its classification head removed.

    With ``weights_path`` the state dict is loaded from disk; otherwise the
    network is randomly initialized from ``seed`` (deterministic stand-in).
    """
    if name not in BACKBONES:
        raise ExtractError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}")
    constructor, dim = BACKBONES[name]
    torch.manual_seed(seed)
    model = constructor(weights=None)
    if weights_path:
        state = torch.load(weights_path, map_location="cpu")
        model.load_state_dict(state)
    else:
        logger.warning(
            "no --weights given; using seeded random initialization for %s (stand-in mode)",
            name,
        )
    model.fc = torch.nn.Identity()  # expose the penultimate pooled features
    model.eval()
    return model, dim


def _load_image_tensor(path: str) -> torch.Tensor | None:
    try:
        with Image.open(path) as img:
            return PREPROCESS(img.convert("RGB"))
    except (OSError, ValueError) as exc:
        logger.warning("skipping unreadable image %s (%s)", path, exc)
        return None


def extract(
    manifest_path,
    output_path,
    backbone: str = "resnet18",
    weights: str | None = None,
    batch_size: int = 8,
    seed: int = 0,
) -> dict:
    """Embed every readable manifest image and write the JSONL embeddings file.

    Records are written in manifest order regardless of batching, and each
    distinct image path is embedded exactly once (duplicates share the vector
    bit for bit). The embedding dimension goes to a ``.meta.json`` sidecar.
    Returns {"written": n, "skipped": k}.
    """
    if batch_size < 1:
        raise ExtractError("batch_size must be >= 1")
    rows = load_manifest(manifest_path)
    model, dim = build_backbone(backbone, weights, seed)

    unique_paths: list[str] = []
    for row in rows:
        if row.path not in unique_paths:
            unique_paths.append(row.path)

    vectors: dict[str, list[float] | None] = {}
    pending: list[tuple[str, torch.Tensor]] = []

    def flush():
        if not pending:
            return
        batch = torch.stack([tensor for _, tensor in pending])
        with torch.no_grad():
            features = model(batch)
        for (path, _), vector in zip(pending, features):
            vectors[path] = [float(v) for v in vector]
        pending.clear()

    for path in unique_paths:
        tensor = _load_image_tensor(path)
        if tensor is None:
            vectors[path] = None
            continue
        pending.append((path, tensor))
        if len(pending) == batch_size:
            flush()
    flush()

    written = skipped = 0
    with open(output_path, "w", encoding="utf-8") as fh:
        for row in rows:
            vector = vectors[row.path]
            if vector is None:
                skipped += 1
                continue
            record = {
                "image_id": row.image_id,
                "lat": row.lat,
                "lon": row.lon,
                "city": row.city,
                "embedding": vector,
            }
            fh.write(json.dumps(record) + "\n")
            written += 1

    meta = {
        "embedding_dim": dim,
        "backbone": backbone,
        "weights": weights,
        "records": written,
        "skipped": skipped,
    }
    with open(str(output_path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")

    logger.info("wrote %d embedding records (M=%d), skipped %d", written, dim, skipped)
    return {"written": written, "skipped": skipped}


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    parser = argparse.ArgumentParser(
        prog="embed-extractor",
        description="Embed manifest-listed images with a backbone's penultimate layer.",
    )
    parser.add_argument("--manifest", required=True, help="CSV with path,image_id,lat,lon,city")
    parser.add_argument("--output", required=True, help="embeddings JSONL to write")
    parser.add_argument("--backbone", default="resnet18", choices=sorted(BACKBONES))
    parser.add_argument("--weights", default=None, help="optional state-dict file for the backbone")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0,
                        help="initialization seed used when no weights file is given")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        stats = extract(
            args.manifest,
            args.output,
            backbone=args.backbone,
            weights=args.weights,
            batch_size=args.batch_size,
            seed=args.seed,
        )
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if stats["written"] == 0:
        print("error: no manifest row produced an embedding", file=sys.stderr)
        return 1
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
