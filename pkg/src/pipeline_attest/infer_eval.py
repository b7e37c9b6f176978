"""Inference bound to a committed model, and evaluation on a public benchmark.

Two proof modes.  ``audit`` hands the verifier every weight opening and
recomputes the output exactly; ``spotcheck`` opens ``c`` random weight
coordinates together with committed per-coordinate products, so a single
bad product is caught with probability c/d.  The final sum is only
checked when every coordinate is opened.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .codec import Reader, Writer, canonical_json, parse_json
from .commit import (TAG_VALUE, BlindingSource, MerklePath, Transcript, commit_create, commit_verify_opening,
                     merkle_build, merkle_prove, merkle_verify)
from .errors import DecodeError, DimensionMismatch, GroupColumnOutOfRange, PipelineError
from .field import check_fits, lift
from .train import HALF, LOGISTIC, ModelWeights, WeightsCommitment, WeightsOpening, activate, forward, \
    pre_activation, weight_leaf
from .transform import Record, load_records

AUDIT = "audit"
SPOTCHECK = "spotcheck"


def _class_of(score: int) -> int:
    # ties go to class 1
    return 1 if score >= HALF else 0


@dataclass(frozen=True)
class InferenceRecord:
    x: tuple[int, ...]
    kind: str
    weights_root: bytes
    products: tuple[int, ...]  # u_j = w_j * x_j, unreduced
    z: int
    score: int

    @property
    def output(self) -> int:
        """Regression value, or the class bit for logistic models."""
        return _class_of(self.score) if self.kind == LOGISTIC else self.z

    def input_bytes(self) -> bytes:
        return Writer().fes(self.x).getvalue()

    def output_bytes(self) -> bytes:
        return output_bytes(self.z, self.score, self.output)


def output_bytes(z: int, score: int, output: int) -> bytes:
    return Writer().fe(z).fe(score).fe(output).getvalue()


def infer(weights: ModelWeights, x: Sequence[int], kind: str, weights_root: bytes = b"\x00" * 32) -> InferenceRecord:
    """Forward pass shared with training."""
    x = tuple(int(v) for v in x)
    if len(x) != weights.d:
        raise DimensionMismatch(f"input has {len(x)} features, model expects {weights.d}")
    _, z, score = forward(weights, x, kind)
    products = tuple(check_fits(w * xi) for w, xi in zip(weights.w, x))
    return InferenceRecord(x, kind, weights_root, products, z, score)


@dataclass(frozen=True)
class CoordinateOpening:
    index: int
    w_value: int
    w_blinding: bytes
    w_path: MerklePath
    u_value: int
    u_blinding: bytes
    u_path: MerklePath

    def write(self, w: Writer) -> None:
        w.u32(self.index).fe(self.w_value).digest(self.w_blinding)
        self.w_path.write(w)
        w.fe(self.u_value).digest(self.u_blinding)
        self.u_path.write(w)

    @classmethod
    def read(cls, r: Reader) -> "CoordinateOpening":
        j, wv, wb = r.u32(), lift(r.fe()), r.digest()
        wp = MerklePath.read(r)
        uv, ub = lift(r.fe()), r.digest()
        return cls(j, wv, wb, wp, uv, ub, MerklePath.read(r))


@dataclass(frozen=True)
class InferenceProof:
    mode: str
    kind: str
    weights_root: bytes
    x: tuple[int, ...]
    input_blinding: bytes
    z: int
    score: int
    output: int
    output_blinding: bytes
    weights_opening: WeightsOpening | None = None            # audit
    products_root: bytes | None = None                       # spotcheck
    coordinates: tuple[CoordinateOpening, ...] = ()          # spotcheck
    bias_opening: tuple[int, bytes, MerklePath] | None = None  # spotcheck with c = d

    @property
    def input_commitment(self) -> bytes:
        return commit_create(Writer().fes(self.x).getvalue(), self.input_blinding, TAG_VALUE).digest

    @property
    def output_commitment(self) -> bytes:
        return commit_create(output_bytes(self.z, self.score, self.output), self.output_blinding, TAG_VALUE).digest

    def to_bytes(self) -> bytes:
        w = Writer().blob(self.mode.encode()).blob(self.kind.encode()).digest(self.weights_root)
        w.fes(self.x).digest(self.input_blinding).fe(self.z).fe(self.score).fe(self.output).digest(self.output_blinding)
        if self.mode == AUDIT:
            self.weights_opening.write(w)
        else:
            w.digest(self.products_root).u32(len(self.coordinates))
            for co in self.coordinates:
                co.write(w)
            if self.bias_opening is None:
                w.u8(0)
            else:
                v, b, p = self.bias_opening
                w.u8(1).fe(v).digest(b)
                p.write(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "InferenceProof":
        r = Reader(data)
        mode, kind, root = r.blob().decode(), r.blob().decode(), r.digest()
        x = tuple(lift(v) for v in r.fes())
        ib, z, score, out, ob = r.digest(), lift(r.fe()), lift(r.fe()), lift(r.fe()), r.digest()
        if mode == AUDIT:
            proof = cls(mode, kind, root, x, ib, z, score, out, ob, weights_opening=WeightsOpening.read(r))
        elif mode == SPOTCHECK:
            pr = r.digest()
            coords = tuple(CoordinateOpening.read(r) for _ in range(r.count()))
            bias = None
            if r.u8():
                v, b = lift(r.fe()), r.digest()
                bias = (v, b, MerklePath.read(r))
            proof = cls(mode, kind, root, x, ib, z, score, out, ob, products_root=pr, coordinates=coords,
                        bias_opening=bias)
        else:
            raise DecodeError(f"unknown inference proof mode {mode!r}")
        r.done()
        return proof


def _inference_challenges(weights_root: bytes, input_c: bytes, output_c: bytes, products_root: bytes,
                          c: int, d: int) -> list[int]:
    t = Transcript("pipeline-attest/infer")
    t.absorb("weights_root", weights_root).absorb("input", input_c).absorb("output", output_c)
    t.absorb("products_root", products_root).absorb_int("challenges", c)
    return t.challenge_indices(c, d)


def prove_inference(record: InferenceRecord, weights: WeightsCommitment, mode: str = AUDIT, c: int = 0,
                    rng: BlindingSource | None = None) -> InferenceProof:
    rng = rng or BlindingSource()
    ib, ob = rng(), rng()
    base = dict(mode=mode, kind=record.kind, weights_root=weights.root, x=record.x, input_blinding=ib,
                z=record.z, score=record.score, output=record.output, output_blinding=ob)
    if mode == AUDIT:
        return InferenceProof(**base, weights_opening=weights.opening())
    if mode != SPOTCHECK:
        raise ValueError(f"unknown mode {mode!r}")
    d = len(record.x)
    c = min(c, d)
    u_blind = [rng() for _ in range(d)]
    u_tree = merkle_build(weight_leaf(j, u, b) for j, (u, b) in enumerate(zip(record.products, u_blind)))
    draft = InferenceProof(**base)
    idx = _inference_challenges(weights.root, draft.input_commitment, draft.output_commitment, u_tree.root, c, d)
    coords = []
    for j in idx:
        wv, wb, wp = weights.coordinate(j)
        coords.append(CoordinateOpening(j, wv, wb, wp, record.products[j], u_blind[j], merkle_prove(u_tree, j)))
    bias = weights.coordinate(d) if c == d else None
    return InferenceProof(**base, products_root=u_tree.root, coordinates=tuple(coords), bias_opening=bias)


@dataclass
class InferenceVerification:
    ok: bool
    mode: str
    sum_checked: bool
    notes: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def verify_inference(proof: InferenceProof, weights_root: bytes, x: Sequence[int] | None = None,
                     input_commitment: bytes | None = None, output_commitment: bytes | None = None,
                     min_challenges: int = 1) -> InferenceVerification:
    def fail(note: str) -> InferenceVerification:
        return InferenceVerification(False, proof.mode, False, [note])

    try:
        if proof.weights_root != weights_root:
            return fail("weights root mismatch")
        if x is not None and tuple(x) != proof.x:
            return fail("input differs from the queried x")
        if input_commitment is not None and proof.input_commitment != input_commitment:
            return fail("input commitment mismatch")
        if output_commitment is not None and proof.output_commitment != output_commitment:
            return fail("output commitment mismatch")
        d = len(proof.x)
        if proof.kind == LOGISTIC:
            if proof.output != _class_of(proof.score):
                return fail("class bit disagrees with score")
        elif proof.output != proof.z:
            return fail("regression output differs from z")

        if proof.mode == AUDIT:
            op = proof.weights_opening
            if op is None or op.weights.d != d or not op.verify(weights_root):
                return fail("weights do not open against the root")
            _, z, score = forward(op.weights, proof.x, proof.kind)
            if (z, score) != (proof.z, proof.score):
                return fail("recomputed output differs")
            return InferenceVerification(True, AUDIT, True, ["full recomputation"])

        if proof.mode != SPOTCHECK or proof.products_root is None:
            return fail("unknown proof mode")
        c = len(proof.coordinates)
        if c < min(min_challenges, d):
            return fail("too few challenges")
        idx = _inference_challenges(weights_root, proof.input_commitment, proof.output_commitment,
                                    proof.products_root, c, d)
        if [co.index for co in proof.coordinates] != idx:
            return fail("challenge derivation mismatch")
        for co in proof.coordinates:
            j = co.index
            if co.w_path.leaf_index != j or co.w_path.leaf_count != d + 1:
                return fail(f"weight path {j} malformed")
            if not merkle_verify(weights_root, weight_leaf(j, co.w_value, co.w_blinding), co.w_path):
                return fail(f"weight {j} does not open")
            if co.u_path.leaf_index != j or co.u_path.leaf_count != d:
                return fail(f"product path {j} malformed")
            if not merkle_verify(proof.products_root, weight_leaf(j, co.u_value, co.u_blinding), co.u_path):
                return fail(f"product {j} does not open")
            if co.u_value != co.w_value * proof.x[j]:
                return fail(f"product {j} is not w_j * x_j")
        if c < d:
            return InferenceVerification(True, SPOTCHECK, False,
                                         [f"{c}/{d} products checked; sum not checked (needs c = d)"])
        if proof.bias_opening is None:
            return fail("bias opening missing for full spotcheck")
        bv, bb, bp = proof.bias_opening
        if bp.leaf_index != d or bp.leaf_count != d + 1 or not merkle_verify(weights_root, weight_leaf(d, bv, bb), bp):
            return fail("bias does not open")
        w = ModelWeights(tuple(co.w_value for co in proof.coordinates), bv)
        z = pre_activation(w, check_fits(sum(co.u_value for co in proof.coordinates)))
        if (z, activate(z, proof.kind)) != (proof.z, proof.score):
            return fail("products do not sum to the committed output")
        return InferenceVerification(True, SPOTCHECK, True, ["all products and the sum checked"])
    except (PipelineError, DecodeError, ValueError, TypeError) as exc:
        return fail(f"malformed proof: {exc}")


# --------------------------------------------------------------------------
# evaluation


def benchmark_tree(records: Sequence[Record]):
    """Public benchmark commitment: unblinded leaves over canonical record bytes."""
    return merkle_build(r.to_bytes() for r in records)


def prediction_bytes(index: int, z: int, score: int, output: int) -> bytes:
    return Writer().u32(index).fe(z).fe(score).fe(output).getvalue()


def is_correct(kind: str, z: int, score: int, label: int, tolerance: int) -> bool:
    if kind == LOGISTIC:
        return _class_of(score) == _class_of(label)
    return abs(z - label) <= tolerance


@dataclass(frozen=True)
class EvaluationReport:
    benchmark_root: bytes
    n: int
    prediction_commitments: tuple[bytes, ...]
    accuracy_count: int
    group_column: int | None
    group_counts: Mapping[str, int]
    weights_root: bytes
    kind: str
    tolerance: int = 0

    def to_dict(self) -> dict:
        return {
            "benchmark_root": self.benchmark_root.hex(),
            "n": self.n,
            "prediction_commitments": [p.hex() for p in self.prediction_commitments],
            "accuracy_count": self.accuracy_count,
            "group_column": -1 if self.group_column is None else self.group_column,
            "group_counts": dict(self.group_counts),
            "weights_root": self.weights_root.hex(),
            "kind": self.kind,
            "tolerance": self.tolerance,
        }

    def to_json(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, data: bytes | str) -> "EvaluationReport":
        doc = parse_json(data)
        try:
            gc = doc["group_column"]
            return cls(bytes.fromhex(doc["benchmark_root"]), int(doc["n"]),
                       tuple(bytes.fromhex(p) for p in doc["prediction_commitments"]), int(doc["accuracy_count"]),
                       None if gc < 0 else int(gc), {str(k): int(v) for k, v in doc["group_counts"].items()},
                       bytes.fromhex(doc["weights_root"]), str(doc["kind"]), int(doc.get("tolerance", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DecodeError(f"malformed evaluation report: {exc}") from exc


@dataclass(frozen=True)
class EvaluationOpening:
    weights: WeightsOpening
    prediction_blindings: tuple[bytes, ...]

    def to_bytes(self) -> bytes:
        w = Writer()
        self.weights.write(w)
        w.u32(len(self.prediction_blindings))
        for b in self.prediction_blindings:
            w.digest(b)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EvaluationOpening":
        r = Reader(data)
        weights = WeightsOpening.read(r)
        blindings = tuple(r.digest() for _ in range(r.count()))
        r.done()
        return cls(weights, blindings)


def _score_benchmark(weights: ModelWeights, records: Sequence[Record], kind: str, group_column: int | None,
                     tolerance: int) -> tuple[list[tuple[int, int, int]], int, dict[str, int]]:
    preds, correct, groups = [], 0, {}
    for rec in records:
        _, z, score = forward(weights, rec.features, kind)
        out = _class_of(score) if kind == LOGISTIC else z
        preds.append((z, score, out))
        if group_column is not None:
            groups.setdefault(str(rec.features[group_column]), 0)
        if is_correct(kind, z, score, rec.label, tolerance):
            correct += 1
            if group_column is not None:
                groups[str(rec.features[group_column])] += 1
    return preds, correct, groups


def evaluate(weights: WeightsCommitment, benchmark: Sequence[Record], kind: str, group_column: int | None = None,
             tolerance: int = 0, rng: BlindingSource | None = None) -> tuple[EvaluationReport, EvaluationOpening]:
    rng = rng or BlindingSource()
    if not benchmark:
        raise ValueError("benchmark is empty")
    d = weights.weights.d
    if group_column is not None and not 0 <= group_column < d:
        raise GroupColumnOutOfRange(f"group column {group_column} outside [0, {d})")
    preds, correct, groups = _score_benchmark(weights.weights, benchmark, kind, group_column, tolerance)
    blindings = tuple(rng() for _ in preds)
    commits = tuple(commit_create(prediction_bytes(i, *p), b, TAG_VALUE).digest
                    for i, (p, b) in enumerate(zip(preds, blindings)))
    report = EvaluationReport(benchmark_tree(benchmark).root, len(benchmark), commits, correct, group_column, groups,
                              weights.root, kind, tolerance)
    return report, EvaluationOpening(weights.opening(), blindings)


def verify_evaluation(report: EvaluationReport, opening: EvaluationOpening, benchmark: Sequence[Record]) -> bool:
    """Audit-mode check: reopen the weights, redo every prediction, recount exactly."""
    try:
        if report.accuracy_count > report.n or report.accuracy_count < 0:
            return False
        if report.group_column is not None and sum(report.group_counts.values()) != report.accuracy_count:
            return False
        if len(benchmark) != report.n or len(report.prediction_commitments) != report.n:
            return False
        if len(opening.prediction_blindings) != report.n:
            return False
        if benchmark_tree(benchmark).root != report.benchmark_root:
            return False
        if not opening.weights.verify(report.weights_root):
            return False
        weights = opening.weights.weights
        if report.group_column is not None and not 0 <= report.group_column < weights.d:
            return False
        preds, correct, groups = _score_benchmark(weights, benchmark, report.kind, report.group_column,
                                                  report.tolerance)
        for i, (p, b, c) in enumerate(zip(preds, opening.prediction_blindings, report.prediction_commitments)):
            if not commit_verify_opening(c, prediction_bytes(i, *p), b, TAG_VALUE):
                return False
        return correct == report.accuracy_count and groups == dict(report.group_counts)
    except (PipelineError, DecodeError, ValueError):
        return False


def load_benchmark(path: str | Path) -> list[Record]:
    return load_records(path)
