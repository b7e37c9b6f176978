"""Append-only, hash-linked log of pipeline stages and the end-to-end verifier.

Each record names the commitments it consumed and produced.  A record may
only consume ``(label, digest)`` pairs that an earlier record produced,
which is what ties one stage's proof to the next.  Proof blobs live in a
content-addressed side directory keyed by their SHA-256.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .codec import Reader, Writer, canonical_json, parse_json
from .commit import TAG_RECORD, ZERO_DIGEST, sha256
from .errors import DecodeError, MissingProofBlob, NonContiguousIndex, PipelineError, UnknownLabel, UnlinkedInput

log = logging.getLogger(__name__)

STAGE_TYPES = ("corpus", "transform", "train", "fine_tune", "evaluate", "infer", "unlearn")

Commitments = tuple[tuple[str, bytes], ...]


@dataclass(frozen=True)
class StageRecord:
    index: int
    stage_type: str
    prev_record_hash: bytes
    inputs: Commitments
    outputs: Commitments
    spec_hash: bytes
    proof_digest: bytes
    record_hash: bytes = b""

    def body(self) -> dict:
        return {
            "index": self.index,
            "stage_type": self.stage_type,
            "prev_record_hash": self.prev_record_hash.hex(),
            "inputs": [[label, d.hex()] for label, d in self.inputs],
            "outputs": [[label, d.hex()] for label, d in self.outputs],
            "spec_hash": self.spec_hash.hex(),
            "proof_digest": self.proof_digest.hex(),
        }

    def compute_hash(self) -> bytes:
        return sha256(TAG_RECORD, canonical_json(self.body()))

    def sealed(self) -> "StageRecord":
        return StageRecord(self.index, self.stage_type, self.prev_record_hash, self.inputs, self.outputs,
                           self.spec_hash, self.proof_digest, self.compute_hash())

    def to_json(self) -> bytes:
        doc = self.body()
        doc["record_hash"] = self.record_hash.hex()
        return canonical_json(doc)

    @classmethod
    def from_json(cls, data: bytes | str) -> "StageRecord":
        doc = parse_json(data)
        try:
            def pairs(xs):
                return tuple((str(label), bytes.fromhex(d)) for label, d in xs)
            return cls(int(doc["index"]), str(doc["stage_type"]), bytes.fromhex(doc["prev_record_hash"]),
                       pairs(doc["inputs"]), pairs(doc["outputs"]), bytes.fromhex(doc["spec_hash"]),
                       bytes.fromhex(doc["proof_digest"]), bytes.fromhex(doc["record_hash"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DecodeError(f"malformed stage record: {exc}") from exc

    def output(self, label: str) -> bytes | None:
        for lb, d in self.outputs:
            if lb == label:
                return d
        return None

    def input(self, label: str) -> bytes | None:
        for lb, d in self.inputs:
            if lb == label:
                return d
        return None


class ProofStore:
    """Proof blobs as files named by the lowercase hex SHA-256 of their bytes."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def put(self, blob: bytes) -> bytes:
        digest = sha256(blob)
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / digest.hex()
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(blob)
            os.replace(tmp, path)
        return digest

    def get(self, digest: bytes) -> bytes:
        path = self.directory / digest.hex()
        if not path.exists():
            raise MissingProofBlob(f"no proof blob {digest.hex()} under {self.directory}")
        return path.read_bytes()


class MemoryProofStore:
    def __init__(self):
        self.blobs: dict[bytes, bytes] = {}

    def put(self, blob: bytes) -> bytes:
        digest = sha256(blob)
        self.blobs[digest] = bytes(blob)
        return digest

    def get(self, digest: bytes) -> bytes:
        try:
            return self.blobs[digest]
        except KeyError:
            raise MissingProofBlob(f"no proof blob {digest.hex()}") from None


def stage_blob(stage_type: str, context: Mapping, proof: bytes) -> bytes:
    """Container stored in the proof store: stage type, canonical JSON context, proof bytes."""
    return Writer().blob(stage_type.encode()).blob(canonical_json(dict(context))).blob(proof).getvalue()


def open_stage_blob(blob: bytes) -> tuple[str, dict, bytes]:
    r = Reader(blob)
    stage_type = r.blob().decode()
    context = parse_json(r.blob())
    proof = r.blob()
    r.done()
    return stage_type, context, proof


@dataclass
class PipelineChain:
    """Ordered records.  ``raw_lines`` keeps the exact log text for records that failed to parse."""

    records: list[StageRecord | None] = field(default_factory=list)
    raw_lines: list[str] = field(default_factory=list)
    path: Path | None = None

    @property
    def head(self) -> bytes:
        if not self.records or self.records[-1] is None:
            return ZERO_DIGEST
        return self.records[-1].record_hash

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineChain":
        path = Path(path)
        chain = cls(path=path)
        if not path.exists():
            return chain
        for line in path.read_text(encoding="utf-8", errors="replace").splitlines():
            if not line.strip():
                continue
            chain.raw_lines.append(line)
            try:
                chain.records.append(StageRecord.from_json(line))
            except (DecodeError, PipelineError):
                chain.records.append(None)
        return chain

    def emitted(self, upto: int | None = None) -> set[tuple[str, bytes]]:
        out = set()
        for rec in self.records[:upto]:
            if rec is not None:
                out.update(rec.outputs)
        return out

    def latest_output(self, label: str) -> tuple[StageRecord, bytes] | None:
        for rec in reversed(self.records):
            if rec is not None and rec.output(label) is not None:
                return rec, rec.output(label)
        return None


def chain_append(chain: PipelineChain, stage_type: str, inputs: Iterable[tuple[str, bytes]],
                 outputs: Iterable[tuple[str, bytes]], spec_hash: bytes, proof_blob: bytes, store,
                 index: int | None = None) -> StageRecord:
    if stage_type not in STAGE_TYPES:
        raise ValueError(f"unknown stage type {stage_type!r}")
    expected = len(chain.records)
    if index is not None and index != expected:
        raise NonContiguousIndex(f"next index is {expected}, got {index}")
    if any(r is None for r in chain.records):
        raise DecodeError("chain log contains unparseable records; refusing to append")
    inputs, outputs = tuple(inputs), tuple(outputs)
    if stage_type == "corpus":
        if inputs:
            raise ValueError("a corpus record takes no inputs")
    else:
        emitted = chain.emitted()
        for label, digest in inputs:
            if (label, digest) not in emitted:
                raise UnlinkedInput(label, digest.hex())
    digest = store.put(proof_blob)
    rec = StageRecord(expected, stage_type, chain.head, inputs, outputs, spec_hash, digest).sealed()
    chain.records.append(rec)
    line = rec.to_json().decode()
    chain.raw_lines.append(line)
    if chain.path is not None:
        with open(chain.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    return rec


# --------------------------------------------------------------------------
# verification


@dataclass
class RecordReport:
    index: int
    stage_type: str = "?"
    parsed: bool = True
    hash_link: bool = False
    linkage: bool = False
    proof_digest: bool = False
    proof_valid: bool | None = None  # None: not checked (e.g. --stage selected another record)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (self.parsed and self.hash_link and self.linkage and self.proof_digest
                and self.proof_valid is not False)

    def to_dict(self) -> dict:
        return {"index": self.index, "stage_type": self.stage_type, "ok": self.ok, "parsed": self.parsed,
                "hash_link": self.hash_link, "linkage": self.linkage, "proof_digest": self.proof_digest,
                "proof_valid": self.proof_valid, "notes": list(self.notes)}


@dataclass
class ChainReport:
    records: list[RecordReport]
    scope_note: str = ("stages are linked by hash-chained records plus per-stage proofs; "
                       "no recursive (IVC) proof composes them")

    @property
    def ok(self) -> bool:
        return bool(self.records) and all(r.ok for r in self.records)

    @property
    def failing(self) -> list[int]:
        return [r.index for r in self.records if not r.ok]

    def to_dict(self) -> dict:
        return {"report_version": 1, "ok": self.ok, "failing_records": self.failing,
                "records": [r.to_dict() for r in self.records], "scope": self.scope_note}


# stage verifier: (record, context, proof bytes, verification context) -> (ok, note)
StageVerifier = Callable[[StageRecord, dict, bytes, "VerificationContext"], tuple[bool, str]]


@dataclass
class VerificationContext:
    store: object
    trusted_keys: frozenset[bytes] | None = None
    asset_payloads: Mapping[bytes, bytes] = field(default_factory=dict)
    verifiers: Mapping[str, StageVerifier] | None = None
    # verifier-side floor on challenge counts per stage ("transform", "train", "infer")
    min_challenges: Mapping[str, int] = field(default_factory=dict)


def chain_verify(chain: PipelineChain, ctx: VerificationContext, stage: int | None = None) -> ChainReport:
    """Check every hash link and linkage; run stage proofs for all records or just ``stage``.

    Read-only and idempotent.  Raises MissingProofBlob if a referenced blob is absent.
    """
    from .stages import STAGE_VERIFIERS

    verifiers = ctx.verifiers or STAGE_VERIFIERS
    reports = []
    prev_hash = ZERO_DIGEST
    emitted: set[tuple[str, bytes]] = set()
    for pos, rec in enumerate(chain.records):
        rep = RecordReport(pos)
        reports.append(rep)
        if rec is None:
            rep.parsed = False
            rep.notes.append("record does not parse")
            prev_hash = None
            continue
        rep.stage_type = rec.stage_type
        recomputed = rec.compute_hash()
        rep.hash_link = (rec.index == pos and rec.record_hash == recomputed and prev_hash is not None
                         and rec.prev_record_hash == prev_hash)
        if not rep.hash_link:
            rep.notes.append("index, record hash or prev link mismatch")
        prev_hash = rec.record_hash
        if rec.stage_type == "corpus":
            # corpus records are roots of provenance: they consume nothing
            rep.linkage = not rec.inputs
            if rec.inputs:
                rep.notes.append("corpus record declares inputs")
        else:
            missing = [label for label, d in rec.inputs if (label, d) not in emitted]
            rep.linkage = rec.stage_type in STAGE_TYPES and not missing
            if missing:
                rep.notes.append(f"unlinked inputs: {', '.join(missing)}")
        emitted.update(rec.outputs)

        try:
            blob = ctx.store.get(rec.proof_digest)
        except MissingProofBlob:
            if rec.record_hash == recomputed:
                raise
            # the record itself was altered, so a dangling digest is just another symptom
            rep.notes.append("proof blob not found")
            continue
        rep.proof_digest = sha256(blob) == rec.proof_digest
        if not rep.proof_digest:
            rep.notes.append("proof blob digest mismatch")
        if stage is not None and pos != stage:
            continue
        try:
            stype, context, proof = open_stage_blob(blob)
            verifier = verifiers.get(rec.stage_type)
            if stype != rec.stage_type or verifier is None:
                rep.proof_valid = False
                rep.notes.append("blob stage type does not match record")
                continue
            ok, note = verifier(rec, context, proof, ctx)
        except (PipelineError, DecodeError, ValueError, KeyError, TypeError, IndexError) as exc:
            ok, note = False, f"stage proof malformed: {exc}"
        rep.proof_valid = ok
        if note:
            rep.notes.append(note)
    if stage is not None and not 0 <= stage < len(chain.records):
        reports.append(RecordReport(stage, parsed=False, notes=["no such record"]))
    return ChainReport(reports)


# --------------------------------------------------------------------------
# provenance


@dataclass
class ProvenanceNode:
    record: StageRecord
    via: tuple[str, bytes] | None
    children: list["ProvenanceNode"] = field(default_factory=list)

    def render(self, indent: str = "") -> str:
        rec = self.record
        via = f" via {self.via[0]}={self.via[1].hex()[:16]}" if self.via else ""
        lines = [f"{indent}[{rec.index}] {rec.stage_type}{via}"]
        for label, d in rec.inputs:
            lines.append(f"{indent}    in  {label}={d.hex()}")
        for label, d in rec.outputs:
            lines.append(f"{indent}    out {label}={d.hex()}")
        for child in self.children:
            lines.append(child.render(indent + "  "))
        return "\n".join(lines)

    def indices(self) -> set[int]:
        out = {self.record.index}
        for c in self.children:
            out |= c.indices()
        return out

    def to_dict(self) -> dict:
        return {"index": self.record.index, "stage_type": self.record.stage_type,
                "inputs": [[lb, d.hex()] for lb, d in self.record.inputs],
                "outputs": [[lb, d.hex()] for lb, d in self.record.outputs],
                "parents": [c.to_dict() for c in self.children]}


def chain_trace(chain: PipelineChain, label: str) -> ProvenanceNode:
    """Provenance tree for the latest record emitting ``label`` (``label:hexprefix`` selects a digest)."""
    name, _, prefix = label.partition(":")
    start = None
    for rec in reversed(chain.records):
        if rec is None:
            continue
        for lb, d in rec.outputs:
            if lb == name and d.hex().startswith(prefix.lower()):
                start = rec
                break
        if start is not None:
            break
    if start is None:
        raise UnknownLabel(f"no record outputs {label!r}")

    def build(rec: StageRecord, via) -> ProvenanceNode:
        node = ProvenanceNode(rec, via)
        for pair in rec.inputs:
            for earlier in reversed(chain.records[:rec.index]):
                if earlier is not None and pair in earlier.outputs:
                    node.children.append(build(earlier, pair))
                    break
        return node

    return build(start, None)
