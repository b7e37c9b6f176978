"""Command-line driver: one subcommand per pipeline stage plus verify and trace."""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .chain import ChainReport, PipelineChain, ProofStore, StageRecord, VerificationContext, chain_append, chain_trace, chain_verify, open_stage_blob
from .codec import canonical_json, parse_json
from .commit import BlindingSource, sha256
from .errors import ConfigInvalid, ExistingStage, MissingPrerequisiteStage, PipelineError, RecordNotFound
from .field import encode_int
from .infer_eval import AUDIT, SPOTCHECK, InferenceProof, evaluate, infer, load_benchmark, prove_inference
from .manifest import CorpusCommitment, Manifest, Policy, RawAsset, corpus_verify, load_trusted_keys
from .stages import StageDraft, make_corpus, make_evaluate, make_infer, make_train, make_transform, make_unlearn
from .train import ModelSpec, WeightsCommitment, fine_tune, load_weights, save_weights, train, unlearn
from .transform import DatasetCommitment, Filter, Record, Split, TransformSpec, transform_apply, transform_prove

log = logging.getLogger("pipeline_attest")

REPORT_VERSION = 1
ROW_SUFFIX = ".row.json"
MANIFEST_SUFFIX = ".manifest.json"


# --------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    corpus_dir: Path
    work_dir: Path
    chain_log: Path
    proof_store: Path
    trusted_keys: Path
    required_assertions: dict[str, str]
    transform_spec: Path
    model_spec: Path
    challenges: dict[str, int] = field(default_factory=lambda: {"transform": 1, "train": 1, "infer": 1})
    mode: str = AUDIT
    blinding_seed: bytes | None = None

    @property
    def artifacts(self) -> Path:
        return self.work_dir / "artifacts"

    @property
    def secrets(self) -> Path:
        return self.work_dir / "secrets"

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        base = path.parent

        def resolve(key: str, default: str | None = None) -> Path:
            value = doc.get(key, default)
            if value is None:
                raise ConfigInvalid(f"config lacks {key!r}")
            p = Path(value)
            return p if p.is_absolute() else base / p

        work = Path(os.environ["PIPELINE_ATTEST_HOME"]) if os.environ.get("PIPELINE_ATTEST_HOME") else resolve("work_dir", "work")
        chain_log = resolve("chain_log") if "chain_log" in doc else work / "chain.jsonl"
        proof_store = resolve("proof_store") if "proof_store" in doc else work / "proofs"
        challenges = {"transform": 1, "train": 1, "infer": 1}
        challenges.update({k: int(v) for k, v in doc.get("challenges", {}).items()})
        if any(v < 1 for v in challenges.values()):
            raise ConfigInvalid("challenge counts must be at least 1")
        mode = doc.get("mode", AUDIT)
        if mode not in (AUDIT, SPOTCHECK):
            raise ConfigInvalid(f"mode must be audit or spotcheck, got {mode!r}")
        seed = doc.get("blinding_seed")
        policy = doc.get("policy", {})
        cfg = cls(resolve("corpus_dir"), work, chain_log, proof_store, resolve("trusted_keys"),
                  dict(policy.get("required_assertions", {})), resolve("transform_spec"), resolve("model_spec"),
                  challenges, mode, seed.encode() if isinstance(seed, str) else None)
        for p in (cfg.corpus_dir, cfg.trusted_keys, cfg.transform_spec, cfg.model_spec):
            if not p.exists():
                raise ConfigInvalid(f"path does not exist: {p}")
        return cfg

    def policy(self) -> Policy:
        return Policy(self.required_assertions, load_trusted_keys(self.trusted_keys))

    def load_transform_spec(self) -> TransformSpec:
        return TransformSpec.from_json(self.transform_spec.read_bytes())

    def load_model_spec(self) -> ModelSpec:
        try:
            return ModelSpec.from_json(self.model_spec.read_bytes())
        except (KeyError, ValueError) as exc:
            raise ConfigInvalid(f"bad model spec: {exc}") from exc


def _write_secret(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True, mode=0o700)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.chmod(path, 0o600)


def load_assets(corpus_dir: Path) -> list[RawAsset]:
    """Pairs ``<id>.row.json`` with ``<id>.manifest.json``; sorted by id."""
    assets = []
    for row in sorted(corpus_dir.glob("*" + ROW_SUFFIX)):
        asset_id = row.name[: -len(ROW_SUFFIX)]
        mpath = corpus_dir / (asset_id + MANIFEST_SUFFIX)
        if not mpath.exists():
            log.warning("asset %s has no manifest; skipped", asset_id)
            continue
        assets.append(RawAsset(row.read_bytes(), Manifest.from_json(mpath.read_bytes())))
    return assets


def asset_store(corpus_dir: Path) -> dict[bytes, bytes]:
    out = {}
    for row in corpus_dir.glob("*" + ROW_SUFFIX):
        payload = row.read_bytes()
        out[sha256(payload)] = payload
    return out


# --------------------------------------------------------------------------
# session: chain, store, lock, rng


class Session:
    def __init__(self, cfg: PipelineConfig, force_new: bool = False):
        self.cfg = cfg
        self.force_new = force_new
        self.store = ProofStore(cfg.proof_store)
        self.chain = PipelineChain.load(cfg.chain_log)

    def rng(self, label: str) -> BlindingSource:
        if self.cfg.blinding_seed is None:
            return BlindingSource()
        return BlindingSource(self.cfg.blinding_seed).child(f"{label}/{len(self.chain)}")

    def latest(self, label: str, stage: str) -> tuple[StageRecord, bytes]:
        found = self.chain.latest_output(label)
        if found is None:
            raise MissingPrerequisiteStage(f"{stage} needs a prior stage emitting {label!r}")
        return found

    def _request(self, rec: StageRecord) -> bytes | None:
        # what distinguishes two otherwise identical requests
        if rec.stage_type == "infer":
            _, _, proof = open_stage_blob(self.store.get(rec.proof_digest))
            return canonical_json(list(InferenceProof.from_bytes(proof).x))
        if rec.stage_type == "evaluate":
            return rec.output("benchmark_root")
        return None

    def append(self, draft: StageDraft, request: bytes | None = None) -> StageRecord:
        if not self.force_new:
            for rec in self.chain.records:
                if (rec is not None and rec.stage_type == draft.stage_type and rec.inputs == draft.inputs
                        and rec.spec_hash == draft.spec_hash and self._request(rec) == request):
                    raise ExistingStage(f"record {rec.index} already ran {draft.stage_type} on these inputs; "
                                        "use --force-new to append another")
        self.cfg.chain_log.parent.mkdir(parents=True, exist_ok=True)
        return chain_append(self.chain, draft.stage_type, draft.inputs, draft.outputs, draft.spec_hash, draft.blob,
                            self.store)

    def context(self) -> VerificationContext:
        return VerificationContext(self.store, self.cfg.policy().trusted_keys, asset_store(self.cfg.corpus_dir),
                                   min_challenges=dict(self.cfg.challenges))


@contextlib.contextmanager
def chain_lock(cfg: PipelineConfig):
    cfg.chain_log.parent.mkdir(parents=True, exist_ok=True)
    with open(str(cfg.chain_log) + ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


# --------------------------------------------------------------------------
# artifacts


def _weights_paths(cfg: PipelineConfig, root: bytes) -> tuple[Path, Path]:
    return cfg.artifacts / f"weights-{root.hex()}.bin", cfg.secrets / f"weights-{root.hex()}.json"


def store_weights(cfg: PipelineConfig, wc: WeightsCommitment) -> None:
    pub, sec = _weights_paths(cfg, wc.root)
    cfg.artifacts.mkdir(parents=True, exist_ok=True)
    cfg.secrets.mkdir(parents=True, exist_ok=True, mode=0o700)
    save_weights(wc, pub, sec)
    os.chmod(sec, 0o600)


def fetch_weights(cfg: PipelineConfig, root: bytes) -> WeightsCommitment:
    pub, sec = _weights_paths(cfg, root)
    if not pub.exists() or not sec.exists():
        raise MissingPrerequisiteStage(f"no stored weights for root {root.hex()}")
    wc = load_weights(pub, sec)
    if wc.root != root:
        raise ConfigInvalid(f"stored weights do not reproduce root {root.hex()}")
    return wc


def _dataset_paths(cfg: PipelineConfig, root: bytes) -> tuple[Path, Path]:
    return cfg.artifacts / f"dataset-{root.hex()}.jsonl", cfg.secrets / f"dataset-{root.hex()}.json"


def store_dataset(cfg: PipelineConfig, ds: DatasetCommitment) -> None:
    pub, sec = _dataset_paths(cfg, ds.root)
    cfg.artifacts.mkdir(parents=True, exist_ok=True)
    cfg.secrets.mkdir(parents=True, exist_ok=True, mode=0o700)
    ds.write(pub, sec)
    os.chmod(sec, 0o600)


def fetch_dataset(cfg: PipelineConfig, root: bytes) -> DatasetCommitment:
    pub, sec = _dataset_paths(cfg, root)
    if not pub.exists() or not sec.exists():
        raise MissingPrerequisiteStage(f"no stored dataset for root {root.hex()}")
    ds = DatasetCommitment.load(pub, sec)
    if ds.root != root:
        raise ConfigInvalid(f"stored dataset does not reproduce root {root.hex()}")
    return ds


# --------------------------------------------------------------------------
# commands


def cmd_ingest(s: Session, args) -> StageRecord:
    cfg = s.cfg
    policy = cfg.policy()
    result = corpus_verify(load_assets(cfg.corpus_dir), policy, s.rng("corpus"))
    for idx, asset_id, reason in result.rejections:
        log.info("rejected %s (%s)", asset_id, reason)
    draft = make_corpus(result, policy)
    rec = s.append(draft)
    cfg.artifacts.mkdir(parents=True, exist_ok=True)
    root = result.commitment.root.hex()
    (cfg.artifacts / f"corpus-{root}.json").write_bytes(
        canonical_json({"asset_hashes": [h.hex() for h in result.commitment.asset_hashes]}))
    _write_secret(cfg.secrets / f"corpus-{root}.json",
                  canonical_json({"blindings": [b.hex() for b in result.commitment.blindings]}))
    return rec


def fetch_corpus(cfg: PipelineConfig, root: bytes) -> CorpusCommitment:
    pub, sec = cfg.artifacts / f"corpus-{root.hex()}.json", cfg.secrets / f"corpus-{root.hex()}.json"
    if not pub.exists() or not sec.exists():
        raise MissingPrerequisiteStage(f"no stored corpus for root {root.hex()}")
    store = asset_store(cfg.corpus_dir)
    try:
        payloads = [store[bytes.fromhex(h)] for h in parse_json(pub.read_bytes())["asset_hashes"]]
    except KeyError as exc:
        raise ConfigInvalid(f"corpus asset missing from {cfg.corpus_dir}: {exc}") from exc
    blindings = [bytes.fromhex(b) for b in parse_json(sec.read_bytes())["blindings"]]
    cc = CorpusCommitment.build(payloads, blindings)
    if cc.root != root:
        raise ConfigInvalid("corpus directory no longer reproduces the committed root")
    return cc


def cmd_transform(s: Session, args) -> StageRecord:
    cfg = s.cfg
    _, root = s.latest("corpus_root", "transform")
    corpus = fetch_corpus(cfg, root)
    spec = cfg.load_transform_spec()
    result = transform_apply(corpus.payloads, spec, s.rng("transform"))
    c = min(args.challenges or cfg.challenges["transform"], len(result.dataset))
    proof = transform_prove(corpus, result.dataset, spec, c)
    rec = s.append(make_transform(corpus.root, result.dataset.root, spec, proof, c))
    store_dataset(cfg, result.dataset)
    held = cfg.artifacts / f"held_out-{result.dataset.root.hex()}.jsonl"
    held.write_text("".join(canonical_json(r.to_json()).decode() + "\n" for r in result.held_out))
    return rec


def cmd_train(s: Session, args) -> StageRecord:
    cfg = s.cfg
    _, ds_root = s.latest("dataset_root", "train")
    dataset = fetch_dataset(cfg, ds_root)
    spec = cfg.load_model_spec()
    rng = s.rng("train")
    prior_root = None
    if args.prior_weights:
        if args.prior_weights == "latest":
            _, prior_root = s.latest("weights_root", "fine-tune")
        else:
            prior_root = bytes.fromhex(args.prior_weights)
            if ("weights_root", prior_root) not in s.chain.emitted():
                raise MissingPrerequisiteStage(f"no stage emitted weights root {args.prior_weights}")
        _, trace = fine_tune(dataset, spec, prior_root, fetch_weights(cfg, prior_root).opening(), rng)
    else:
        _, trace = train(dataset, spec, None, rng)
    c = min(args.challenges or cfg.challenges["train"], spec.iterations)
    draft = make_train(trace, dataset, spec, c, audit=(args.mode or cfg.mode) == AUDIT, prior_root=prior_root)
    rec = s.append(draft)
    store_weights(cfg, trace.init_commitment)
    store_weights(cfg, trace.final_commitment)
    return rec


def cmd_evaluate(s: Session, args) -> StageRecord:
    cfg = s.cfg
    _, w_root = s.latest("weights_root", "evaluate")
    wc = fetch_weights(cfg, w_root)
    if args.benchmark == "held-out":
        _, ds_root = s.latest("dataset_root", "evaluate")
        found = sorted(cfg.artifacts.glob("held_out-*.jsonl"), key=lambda p: p.stat().st_mtime)
        if not found:
            raise MissingPrerequisiteStage("no held-out split available; pass --benchmark PATH")
        bench = load_benchmark(found[-1])
    else:
        bench = load_benchmark(args.benchmark)
    if not bench:
        raise ConfigInvalid("benchmark is empty")
    spec = cfg.load_model_spec()
    tolerance = encode_int(args.tolerance) if args.tolerance is not None else 0
    report, opening = evaluate(wc, bench, spec.kind, args.group_column, tolerance, s.rng("evaluate"))
    rec = s.append(make_evaluate(report, opening, bench), report.benchmark_root)
    (cfg.artifacts / f"evaluation-{rec.index}.json").write_bytes(report.to_json())
    return rec


def _model_space(spec: TransformSpec, features: list) -> tuple[int, ...]:
    """Encode a raw query and apply the value-changing transform ops (not filters or the split)."""
    rec = Record(tuple(encode_int(v) for v in features), 0, b"\x00" * 32)
    for op in spec.ops:
        if not isinstance(op, (Filter, Split)):
            rec = op.apply(rec)
    return rec.features


def cmd_infer(s: Session, args) -> StageRecord:
    cfg = s.cfg
    _, w_root = s.latest("weights_root", "infer")
    wc = fetch_weights(cfg, w_root)
    doc = json.loads(Path(args.input).read_text())
    feats = doc["features"] if isinstance(doc, dict) else doc
    x = _model_space(cfg.load_transform_spec(), feats)
    spec = cfg.load_model_spec()
    mode = args.mode or cfg.mode
    c = args.challenges or cfg.challenges["infer"]
    result = infer(wc.weights, x, spec.kind, wc.root)
    proof = prove_inference(result, wc, mode, c, s.rng("infer"))
    rec = s.append(make_infer(proof, min(c, len(x))), canonical_json(list(proof.x)))
    out = {"z": result.z, "score": result.score, "output": result.output,
           "z_real": result.z / 65536, "score_real": result.score / 65536}
    (cfg.artifacts / f"inference-{rec.index}.json").write_bytes(canonical_json({k: v for k, v in out.items()
                                                                               if not isinstance(v, float)}))
    args._inference = out
    return rec


def _find_leaf(dataset: DatasetCommitment, ref: str) -> bytes:
    if ref.isdigit() and len(ref) < 16:
        i = int(ref)
        if i >= len(dataset):
            raise RecordNotFound(f"dataset has {len(dataset)} records")
        return dataset.leaves[i]
    hits = [leaf for leaf in dataset.leaves if leaf.hex().startswith(ref.lower())]
    if len(hits) != 1:
        raise RecordNotFound(f"{ref!r} matches {len(hits)} dataset leaves")
    return hits[0]


def cmd_unlearn(s: Session, args) -> StageRecord:
    cfg = s.cfg
    _, ds_root = s.latest("dataset_root", "unlearn")
    dataset = fetch_dataset(cfg, ds_root)
    spec = cfg.load_model_spec()
    trained = [r for r in s.chain.records if r is not None and r.stage_type in ("train", "fine_tune", "unlearn")
               and r.output("weights_root") is not None and ("dataset_root", ds_root) in r.inputs + r.outputs]
    init_root = None
    for r in reversed(trained):
        init_root = r.output("init_root") if r.stage_type != "unlearn" else r.input("init_root")
        if init_root is not None:
            break
    if init_root is None:
        raise MissingPrerequisiteStage("unlearn needs a training stage on the current dataset")
    init = fetch_weights(cfg, init_root)
    leaf = _find_leaf(dataset, args.record)
    c = min(args.challenges or cfg.challenges["train"], spec.iterations)
    result = unlearn(dataset, leaf, spec, init, c, s.rng("unlearn"), audit=(args.mode or cfg.mode) == AUDIT)
    rec = s.append(make_unlearn(result, spec, init_root, c))
    store_dataset(cfg, result.dataset)
    store_weights(cfg, result.trace.final_commitment)
    return rec


MUTATING = {
    "ingest": cmd_ingest,
    "transform": cmd_transform,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "unlearn": cmd_unlearn,
}


# --------------------------------------------------------------------------
# output


def _print_report(report: ChainReport, as_json: bool, extra: dict | None = None) -> None:
    if as_json:
        doc = report.to_dict()
        doc.update(extra or {})
        print(json.dumps(doc, indent=2, sort_keys=True))
        return
    for r in report.records:
        if r.proof_valid is None and r.ok:
            status = "linked"
        else:
            status = "ok" if r.ok else "FAIL"
        notes = f" ({'; '.join(r.notes)})" if r.notes else ""
        print(f"record {r.index} [{r.stage_type}]: {status}{notes}")
    if report.ok:
        print("verification passed")
    else:
        print(f"verification FAILED at record(s) {', '.join(map(str, report.failing))}")
    print(f"note: {report.scope_note}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config JSON")
    common.add_argument("--json", action="store_true", help="machine-readable report")
    common.add_argument("--force-new", action="store_true", help="append even if an identical stage exists")
    common.add_argument("--mode", choices=[AUDIT, SPOTCHECK], help="override the configured proof mode")
    common.add_argument("--challenges", type=int, help="override the configured challenge count")
    common.add_argument("--stage", type=int, help="record index to verify")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pipeline-attest", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="verify manifests and commit the accepted corpus")
    sub.add_parser("transform", parents=[common], help="apply the transform spec and prove sampled rows")
    p = sub.add_parser("train", parents=[common], help="train (or fine-tune) and prove sampled iterations")
    p.add_argument("--prior-weights", help="weights root hex, or 'latest', to fine-tune from")
    p = sub.add_parser("evaluate", parents=[common], help="score a benchmark and commit the report")
    p.add_argument("--benchmark", default="held-out", help="records JSONL, or 'held-out' (default)")
    p.add_argument("--group-column", type=int, help="feature index to group accuracy by")
    p.add_argument("--tolerance", type=float, help="regression tolerance (real units)")
    p = sub.add_parser("infer", parents=[common], help="run one prediction and prove it")
    p.add_argument("--input", required=True, help='JSON file: {"features": [...]}')
    p = sub.add_parser("unlearn", parents=[common], help="delete one record, retrain and prove it")
    p.add_argument("--record", required=True, help="dataset leaf hex (or unique prefix) or index")
    p = sub.add_parser("verify", parents=[common], help="verify the chain")
    p.add_argument("--all", action="store_true", help="verify every record (default)")
    p = sub.add_parser("trace", parents=[common], help="print the provenance tree of an output label")
    p.add_argument("label", help="output label, optionally label:hexprefix")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.challenges is not None and args.challenges < 1:
        print("error: ConfigInvalid: --challenges must be at least 1", file=sys.stderr)
        return 2
    try:
        cfg = PipelineConfig.load(args.config)
        if args.command in MUTATING:
            with chain_lock(cfg):
                s = Session(cfg, args.force_new)
                rec = MUTATING[args.command](s, args)
                report = chain_verify(s.chain, s.context(), stage=rec.index)
            extra = {"appended": rec.index, "stage_type": rec.stage_type,
                     "outputs": {label: d.hex() for label, d in rec.outputs}}
            if getattr(args, "_inference", None):
                extra["inference"] = args._inference
            if not args.json:
                print(f"appended record {rec.index} [{rec.stage_type}]")
                for label, d in rec.outputs:
                    print(f"  {label} = {d.hex()}")
                if "inference" in extra:
                    print(f"  prediction = {extra['inference']['output']} (score {extra['inference']['score_real']:.4f})")
            _print_report(report, args.json, extra)
            return 0 if report.ok else 1
        s = Session(cfg)
        if args.command == "verify":
            report = chain_verify(s.chain, s.context(), stage=args.stage)
            _print_report(report, args.json)
            return 0 if report.ok else 1
        if args.command == "trace":
            tree = chain_trace(s.chain, args.label)
            if args.json:
                print(json.dumps({"report_version": REPORT_VERSION, "trace": tree.to_dict()}, indent=2))
            else:
                print(tree.render())
            return 0
    except PipelineError as exc:
        if args.json:
            print(json.dumps({"report_version": REPORT_VERSION, "ok": False,
                              "error": type(exc).__name__, "message": str(exc)}))
        else:
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
