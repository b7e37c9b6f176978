"""Synthetic signed corpora and ready-to-run workspaces for demos and tests."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .codec import canonical_json
from .field import encode_int
from .manifest import manifest_sign, public_key_bytes
from .train import LOGISTIC
from .transform import Normalize, Quantize, Split, TransformSpec

ALLOW_TRAINING = {"ai_training": "allow"}


@dataclass
class Workspace:
    root: Path
    config: Path
    corpus_dir: Path
    signing_key: Ed25519PrivateKey
    rows: list[dict]
    true_weights: list[float]


def synthetic_rows(n: int, d: int, seed: int = 0, kind: str = LOGISTIC) -> tuple[list[dict], list[float]]:
    """Gaussian features; labels from a fixed linear rule (thresholded for classification)."""
    rnd = random.Random(seed)
    true_w = [round(rnd.uniform(-1.5, 1.5), 3) for _ in range(d)]
    rows = []
    for _ in range(n):
        x = [round(rnd.gauss(0.0, 1.0), 4) for _ in range(d)]
        s = sum(w * v for w, v in zip(true_w, x)) + rnd.gauss(0.0, 0.3)
        y = (1 if s > 0 else 0) if kind == LOGISTIC else round(s, 4)
        rows.append({"features": x, "label": y})
    return rows, true_w


def row_payload(row: dict) -> bytes:
    return json.dumps(row, sort_keys=True, separators=(",", ":")).encode()


def signing_key_from_seed(seed: int) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(seed.to_bytes(32, "little"))


def write_corpus(corpus_dir: Path, rows: list[dict], key: Ed25519PrivateKey,
                 assertions: dict[str, str] | None = None) -> None:
    corpus_dir.mkdir(parents=True, exist_ok=True)
    for i, row in enumerate(rows):
        asset_id = f"row{i:05d}"
        payload = row_payload(row)
        m = manifest_sign(payload, assertions or ALLOW_TRAINING, (), key, asset_id)
        (corpus_dir / f"{asset_id}.row.json").write_bytes(payload)
        (corpus_dir / f"{asset_id}.manifest.json").write_bytes(m.to_json())


def make_workspace(root: str | Path, n: int = 256, d: int = 8, iterations: int = 50, batch_size: int = 32,
                   learning_rate: float = 0.1, kind: str = LOGISTIC, challenges: dict[str, int] | None = None,
                   mode: str = "audit", seed: int = 7, blinding_seed: str | None = "demo",
                   train_fraction: float = 0.75) -> Workspace:
    """Write a corpus, key file, specs and config under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    key = signing_key_from_seed(seed + 1)
    rows, true_w = synthetic_rows(n, d, seed, kind)
    write_corpus(root / "corpus", rows, key)
    (root / "trusted_keys.txt").write_text("# accepted manifest signers\n" + public_key_bytes(key).hex() + "\n")

    # features are already roughly standard normal; normalise with the sample statistics anyway
    means = [sum(r["features"][j] for r in rows) / n for j in range(d)]
    stds = [max((sum((r["features"][j] - means[j]) ** 2 for r in rows) / n) ** 0.5, 1e-3) for j in range(d)]
    tspec = TransformSpec((Normalize.from_reals(means, [1 / s for s in stds]), Quantize(12),
                           Split(encode_int(train_fraction), seed)))
    (root / "transform.json").write_bytes(tspec.to_json())
    (root / "model.json").write_bytes(canonical_json({
        "kind": kind, "d": d, "learning_rate": encode_int(learning_rate), "batch_size": batch_size,
        "iterations": iterations, "shuffle_seed": seed,
    }))
    cfg = {
        "corpus_dir": "corpus",
        "work_dir": "work",
        "trusted_keys": "trusted_keys.txt",
        "policy": {"required_assertions": ALLOW_TRAINING},
        "transform_spec": "transform.json",
        "model_spec": "model.json",
        "challenges": challenges or {"transform": 8, "train": 10, "infer": 4},
        "mode": mode,
    }
    if blinding_seed is not None:
        cfg["blinding_seed"] = blinding_seed
    (root / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")
    query = {"features": rows[0]["features"]}
    (root / "query.json").write_text(json.dumps(query) + "\n")
    return Workspace(root, root / "config.json", root / "corpus", key, rows, true_w)


def main(argv: list[str] | None = None) -> int:
    import argparse

    p = argparse.ArgumentParser(prog="python -m pipeline_attest.synthetic",
                                description="write a signed synthetic corpus plus specs and a config")
    p.add_argument("root", help="directory to create")
    p.add_argument("--rows", type=int, default=256)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--mode", choices=["audit", "spotcheck"], default="audit")
    p.add_argument("--seed", type=int, default=7)
    args = p.parse_args(argv)
    ws = make_workspace(args.root, n=args.rows, d=args.dim, iterations=args.iterations,
                        batch_size=args.batch_size, mode=args.mode, seed=args.seed)
    print(f"config: {ws.config}")
    print(f"query:  {ws.root / 'query.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
