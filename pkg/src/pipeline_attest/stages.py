"""Per-stage glue between the owning modules and the chain log.

A ``make_*`` function turns a stage's artifacts into a ``StageDraft``
(inputs, outputs, spec hash and proof blob) ready for ``chain_append``.
A ``verify_*`` function re-checks a stored blob against the record that
references it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .chain import StageRecord, stage_blob
from .codec import Reader, Writer, canonical_json
from .commit import sha256
from .manifest import (CorpusEvidence, CorpusResult, Policy, corpus_evidence, corpus_evidence_verify,
                       signature_valid)
from .train import (ModelSpec, ModelWeights, TrainingProof, TrainingTrace, UnlearningResult, UnlearningProof,
                    prove_training, verify_training, verify_unlearning)
from .transform import Record, TransformProof, TransformSpec, transform_verify
from .infer_eval import (EvaluationOpening, EvaluationReport, InferenceProof, verify_evaluation, verify_inference)


@dataclass(frozen=True)
class StageDraft:
    stage_type: str
    inputs: tuple[tuple[str, bytes], ...]
    outputs: tuple[tuple[str, bytes], ...]
    spec_hash: bytes
    blob: bytes


def _min_challenges(ctx, stage: str, context: dict) -> int:
    floor = (getattr(ctx, "min_challenges", None) or {}).get(stage, 1)
    return max(int(floor), int(context.get("min_challenges", 1)))


def _need(rec: StageRecord, label: str, output: bool = False) -> bytes:
    d = rec.output(label) if output else rec.input(label)
    if d is None:
        raise KeyError(f"record {rec.index} lacks {'output' if output else 'input'} {label!r}")
    return d


# --------------------------------------------------------------------------
# corpus


def make_corpus(result: CorpusResult, policy: Policy, ingredient_store=None) -> StageDraft:
    ev = corpus_evidence(result, policy, ingredient_store)
    context = {"accepted": len(result.accepted), "rejected": len(result.rejections)}
    return StageDraft("corpus", (), (("corpus_root", result.commitment.root),), policy.digest,
                      stage_blob("corpus", context, ev.to_bytes()))


def verify_corpus(rec: StageRecord, context: dict, proof: bytes, ctx) -> tuple[bool, str]:
    ev = CorpusEvidence.from_bytes(proof)
    if ev.policy.digest != rec.spec_hash:
        return False, "policy digest differs from spec hash"
    if ctx.trusted_keys is not None and not ev.policy.trusted_keys <= ctx.trusted_keys:
        return False, "policy trusts keys the verifier does not"
    if not ctx.asset_payloads:
        return False, "raw asset store unavailable"
    if not corpus_evidence_verify(ev, _need(rec, "corpus_root", True), ctx.asset_payloads):
        unsigned = [m.asset_id for m in ev.manifests if not signature_valid(m)]
        missing = [m.asset_id for m in ev.manifests if m.asset_hash not in ctx.asset_payloads]
        detail = "".join(f"; {what}: {', '.join(ids[:5])}" for what, ids in
                         (("bad signatures", unsigned), ("assets not found", missing)) if ids)
        return False, "ingestion does not reproduce the corpus root" + detail
    return True, f"{len(ev.manifests)} manifests re-verified"


# --------------------------------------------------------------------------
# transform


def make_transform(input_root: bytes, output_root: bytes, spec: TransformSpec, proof: TransformProof,
                   min_challenges: int) -> StageDraft:
    context = {"transform_spec": spec.to_dict(), "min_challenges": min_challenges}
    return StageDraft("transform", (("corpus_root", input_root),), (("dataset_root", output_root),), spec.digest,
                      stage_blob("transform", context, proof.to_bytes()))


def verify_transform_stage(rec: StageRecord, context: dict, proof: bytes, ctx) -> tuple[bool, str]:
    spec = TransformSpec.from_dict(context["transform_spec"])
    if spec.digest != rec.spec_hash:
        return False, "transform spec differs from spec hash"
    p = TransformProof.from_bytes(proof)
    ok = transform_verify(_need(rec, "corpus_root"), _need(rec, "dataset_root", True), spec, p,
                          _min_challenges(ctx, "transform", context))
    return ok, f"{len(p.challenges)} rows re-executed" if ok else "row re-execution failed"


# --------------------------------------------------------------------------
# training


def _train_outputs(proof: TrainingProof) -> tuple[tuple[str, bytes], ...]:
    return (("weights_root", proof.weights_root), ("trace_root", proof.trace_root),
            ("trace_head", proof.trace_head), ("init_root", proof.init_root))


def make_train(trace: TrainingTrace, dataset, spec: ModelSpec, c: int, audit: bool,
               prior_root: bytes | None = None) -> StageDraft:
    proof = prove_training(trace, dataset, spec, c, audit=audit)
    stage = "train" if prior_root is None else "fine_tune"
    inputs = (("dataset_root", dataset.root),)
    if prior_root is not None:
        inputs += (("weights_root", prior_root),)
    context = {"model_spec": spec.to_dict(), "audit": audit, "min_challenges": c}
    return StageDraft(stage, inputs, _train_outputs(proof), spec.digest, stage_blob(stage, context, proof.to_bytes()))


def verify_train_stage(rec: StageRecord, context: dict, proof: bytes, ctx) -> tuple[bool, str]:
    spec = ModelSpec.from_dict(context["model_spec"])
    if spec.digest != rec.spec_hash:
        return False, "model spec differs from spec hash"
    p = TrainingProof.from_bytes(proof)
    if tuple(rec.outputs) != _train_outputs(p):
        return False, "record outputs differ from the proof's commitments"
    if rec.stage_type == "fine_tune":
        init_root = _need(rec, "weights_root")
    else:
        init_root = p.init_root
        if p.init_opening.weights != ModelWeights.zeros(spec.d):
            return False, "fresh training must start from zero weights"
    ok = verify_training(p, _need(rec, "dataset_root"), spec, init_root, p.weights_root,
                         _min_challenges(ctx, "train", context))
    mode = "audit" if p.final_opening is not None else "spotcheck"
    return ok, f"{p.challenges}/{spec.iterations} iterations replayed, {mode} mode" if ok else "training replay failed"


# --------------------------------------------------------------------------
# evaluation


def _evaluation_spec_hash(report: EvaluationReport) -> bytes:
    return sha256(canonical_json({"kind": report.kind, "tolerance": report.tolerance,
                                  "group_column": -1 if report.group_column is None else report.group_column}))


def _records_blob(records: Sequence[Record]) -> bytes:
    w = Writer().u32(len(records))
    for r in records:
        w.blob(r.to_bytes())
    return w.getvalue()


def make_evaluate(report: EvaluationReport, opening: EvaluationOpening, benchmark: Sequence[Record]) -> StageDraft:
    report_json = report.to_json()
    proof = Writer().blob(report_json).blob(opening.to_bytes()).blob(_records_blob(benchmark)).getvalue()
    outputs = (("benchmark_root", report.benchmark_root), ("evaluation_report", sha256(report_json)))
    context = {"accuracy_count": report.accuracy_count, "n": report.n}
    return StageDraft("evaluate", (("weights_root", report.weights_root),), outputs, _evaluation_spec_hash(report),
                      stage_blob("evaluate", context, proof))


def verify_evaluate_stage(rec: StageRecord, context: dict, proof: bytes, ctx) -> tuple[bool, str]:
    r = Reader(proof)
    report_json, opening, bench = r.blob(), EvaluationOpening.from_bytes(r.blob()), r.blob()
    r.done()
    report = EvaluationReport.from_json(report_json)
    br = Reader(bench)
    records = [Record.from_bytes(br.blob()) for _ in range(br.count())]
    br.done()
    if sha256(report_json) != _need(rec, "evaluation_report", True):
        return False, "report digest mismatch"
    if report.benchmark_root != _need(rec, "benchmark_root", True) or report.weights_root != _need(rec, "weights_root"):
        return False, "report commitments differ from the record"
    if _evaluation_spec_hash(report) != rec.spec_hash:
        return False, "evaluation settings differ from spec hash"
    ok = verify_evaluation(report, opening, records)
    return ok, f"accuracy {report.accuracy_count}/{report.n} recounted" if ok else "evaluation recount failed"


# --------------------------------------------------------------------------
# inference


def _inference_spec_hash(mode: str, kind: str) -> bytes:
    return sha256(canonical_json({"mode": mode, "kind": kind}))


def make_infer(proof: InferenceProof, min_challenges: int) -> StageDraft:
    outputs = (("input_commitment", proof.input_commitment), ("output_commitment", proof.output_commitment))
    context = {"mode": proof.mode, "min_challenges": min_challenges}
    return StageDraft("infer", (("weights_root", proof.weights_root),), outputs,
                      _inference_spec_hash(proof.mode, proof.kind), stage_blob("infer", context, proof.to_bytes()))


def verify_infer_stage(rec: StageRecord, context: dict, proof: bytes, ctx) -> tuple[bool, str]:
    p = InferenceProof.from_bytes(proof)
    if _inference_spec_hash(p.mode, p.kind) != rec.spec_hash:
        return False, "inference mode differs from spec hash"
    res = verify_inference(p, _need(rec, "weights_root"), input_commitment=_need(rec, "input_commitment", True),
                           output_commitment=_need(rec, "output_commitment", True),
                           min_challenges=_min_challenges(ctx, "infer", context))
    return res.ok, "; ".join(res.notes)


# --------------------------------------------------------------------------
# unlearning


def unlearn_spec_hash(spec: ModelSpec, leaf: bytes) -> bytes:
    return sha256(spec.digest, leaf)


def _unlearn_outputs(proof: UnlearningProof) -> tuple[tuple[str, bytes], ...]:
    t = proof.retraining
    return (("dataset_root", proof.new_root), ("weights_root", t.weights_root), ("trace_root", t.trace_root),
            ("trace_head", t.trace_head))


def make_unlearn(result: UnlearningResult, spec: ModelSpec, init_root: bytes, c: int) -> StageDraft:
    p = result.proof
    inputs = (("dataset_root", p.old_root), ("init_root", init_root))
    context = {"model_spec": spec.to_dict(), "min_challenges": c, "deleted_leaf": p.deleted_leaf.hex()}
    return StageDraft("unlearn", inputs, _unlearn_outputs(p), unlearn_spec_hash(spec, p.deleted_leaf),
                      stage_blob("unlearn", context, p.to_bytes()))


def verify_unlearn_stage(rec: StageRecord, context: dict, proof: bytes, ctx) -> tuple[bool, str]:
    spec = ModelSpec.from_dict(context["model_spec"])
    p = UnlearningProof.from_bytes(proof)
    if unlearn_spec_hash(spec, p.deleted_leaf) != rec.spec_hash:
        return False, "model spec or deleted leaf differs from spec hash"
    if tuple(rec.outputs) != _unlearn_outputs(p):
        return False, "record outputs differ from the proof's commitments"
    if p.retraining.challenges < min(_min_challenges(ctx, "train", context), spec.iterations):
        return False, "too few retraining challenges"
    ok = verify_unlearning(p, _need(rec, "dataset_root"), p.new_root, spec, _need(rec, "init_root"),
                           p.retraining.weights_root)
    return ok, "deletion and retraining verified" if ok else "unlearning evidence rejected"


STAGE_VERIFIERS = {
    "corpus": verify_corpus,
    "transform": verify_transform_stage,
    "train": verify_train_stage,
    "fine_tune": verify_train_stage,
    "evaluate": verify_evaluate_stage,
    "infer": verify_infer_stage,
    "unlearn": verify_unlearn_stage,
}

