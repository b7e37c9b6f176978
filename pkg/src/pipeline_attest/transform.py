"""Deterministic row transforms from committed raw assets to committed training records.

Every op acts on one row at a time (split only looks at the row's input
index), so a verifier can re-run the transform ops on any opened input row and
compare against the opened output row bit-for-bit.
"""

from __future__ import annotations

import bisect
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence, Union

from .codec import Reader, Writer, canonical_json, parse_json
from .commit import (TAG_LEAF, BlindingSource, MerklePath, MerkleTree, Transcript, commit_create,
                     fisher_yates, merkle_build, merkle_prove, merkle_verify, sha256)
from .errors import ChallengeCountExceedsRows, DecodeError, EmptyOutput, PipelineError, SchemaMismatch
from .field import SCALE_BITS, check_fits, encode_int, lift, mul_rescale_int
from .manifest import CorpusCommitment, corpus_leaf


@dataclass(frozen=True)
class Record:
    """One training row.  ``features`` and ``label`` are fixed-point centered lifts."""

    features: tuple[int, ...]
    label: int
    source: bytes  # SHA-256 of the raw asset the row came from

    @property
    def d(self) -> int:
        return len(self.features)

    def to_bytes(self) -> bytes:
        return Writer().fes(self.features).fe(self.label).digest(self.source).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Record":
        r = Reader(data)
        feats = tuple(lift(v) for v in r.fes())
        label = lift(r.fe())
        source = r.digest()
        r.done()
        return cls(feats, label, source)

    def to_json(self) -> dict:
        return {"features": list(self.features), "label": self.label, "source": self.source.hex()}

    @classmethod
    def from_json(cls, doc: dict) -> "Record":
        try:
            return cls(tuple(int(v) for v in doc["features"]), int(doc["label"]), bytes.fromhex(doc["source"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"bad record: {exc}") from exc


def parse_row(payload: bytes) -> Record:
    """Raw asset payload (JSON ``{"features": [...], "label": y}``) to a Record."""
    try:
        doc = json.loads(payload)
        feats = doc["features"]
        label = doc["label"]
        if not isinstance(feats, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in feats):
            raise SchemaMismatch("features must be a list of numbers")
        if isinstance(label, bool) or not isinstance(label, (int, float)):
            raise SchemaMismatch("label must be a number")
        return Record(tuple(encode_int(v) for v in feats), encode_int(label), sha256(payload))
    except SchemaMismatch:
        raise
    except (ValueError, KeyError, TypeError, UnicodeDecodeError, PipelineError) as exc:
        raise SchemaMismatch(f"row does not parse: {exc}") from exc


# --------------------------------------------------------------------------
# transform ops


_CMP = {
    "ge": lambda a, b: a >= b,
    "gt": lambda a, b: a > b,
    "le": lambda a, b: a <= b,
    "lt": lambda a, b: a < b,
}


@dataclass(frozen=True)
class Filter:
    """Keep rows with floor((c . x + c_y * y) / 2^16) <cmp> threshold."""

    coefficients: tuple[int, ...] = ()
    label_coefficient: int = 0
    threshold: int = 0
    cmp: str = "ge"

    @classmethod
    def label(cls, cmp: str, threshold: float) -> "Filter":
        return cls((), 1 << SCALE_BITS, encode_int(threshold), cmp)

    @classmethod
    def feature(cls, index: int, d: int, cmp: str, threshold: float) -> "Filter":
        coef = [0] * d
        coef[index] = 1 << SCALE_BITS
        return cls(tuple(coef), 0, encode_int(threshold), cmp)

    def keep(self, rec: Record) -> bool:
        if self.coefficients and len(self.coefficients) != rec.d:
            raise SchemaMismatch("filter coefficient count differs from feature count")
        acc = sum(c * x for c, x in zip(self.coefficients, rec.features)) + self.label_coefficient * rec.label
        return _CMP[self.cmp](check_fits(acc) >> SCALE_BITS, self.threshold)

    def to_dict(self) -> dict:
        return {"op": "filter", "coefficients": list(self.coefficients),
                "label_coefficient": self.label_coefficient, "threshold": self.threshold, "cmp": self.cmp}


@dataclass(frozen=True)
class Normalize:
    """x_j <- (x_j - mean_j) * inv_std_j with the usual floor rescale."""

    mean: tuple[int, ...]
    inv_std: tuple[int, ...]

    @classmethod
    def from_reals(cls, mean: Sequence[float], inv_std: Sequence[float]) -> "Normalize":
        return cls(tuple(encode_int(m) for m in mean), tuple(encode_int(s) for s in inv_std))

    def apply(self, rec: Record) -> Record:
        if len(self.mean) != rec.d or len(self.inv_std) != rec.d:
            raise SchemaMismatch("normalize statistics do not match feature count")
        feats = tuple(mul_rescale_int(check_fits(x - m), s) for x, m, s in zip(rec.features, self.mean, self.inv_std))
        return Record(feats, rec.label, rec.source)

    def to_dict(self) -> dict:
        return {"op": "normalize", "mean": list(self.mean), "inv_std": list(self.inv_std)}


@dataclass(frozen=True)
class Quantize:
    """Floor features onto a grid of 2^-frac_bits."""

    frac_bits: int

    def apply(self, rec: Record) -> Record:
        shift = SCALE_BITS - self.frac_bits
        return Record(tuple((x >> shift) << shift for x in rec.features), rec.label, rec.source)

    def to_dict(self) -> dict:
        return {"op": "quantize", "frac_bits": self.frac_bits}


@dataclass(frozen=True)
class Split:
    """Keep the first floor(n * fraction) input indices of a seeded Fisher-Yates shuffle."""

    train_fraction: int  # fixed-point
    seed: int

    def train_indices(self, n_in: int) -> frozenset[int]:
        return _split_partition(n_in, self.train_fraction, self.seed)

    def to_dict(self) -> dict:
        return {"op": "split", "train_fraction": self.train_fraction, "seed": self.seed}


@lru_cache(maxsize=64)
def _split_partition(n_in: int, fraction: int, seed: int) -> frozenset[int]:
    perm = fisher_yates(n_in, b"split" + struct.pack("<Q", seed))
    k = (n_in * fraction) >> SCALE_BITS
    return frozenset(perm[:k])


Op = Union[Filter, Normalize, Quantize, Split]


@dataclass(frozen=True)
class TransformSpec:
    ops: tuple[Op, ...] = ()

    def to_dict(self) -> dict:
        return {"ops": [op.to_dict() for op in self.ops]}

    def to_json(self) -> bytes:
        return canonical_json(self.to_dict())

    @property
    def digest(self) -> bytes:
        return sha256(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "TransformSpec":
        ops = []
        for o in doc.get("ops", []):
            kind = o.get("op")
            if kind == "filter":
                if o.get("cmp", "ge") not in _CMP:
                    raise SchemaMismatch(f"unknown comparison {o.get('cmp')!r}")
                ops.append(Filter(tuple(o.get("coefficients", ())), int(o.get("label_coefficient", 0)),
                                  int(o["threshold"]), o.get("cmp", "ge")))
            elif kind == "normalize":
                ops.append(Normalize(tuple(o["mean"]), tuple(o["inv_std"])))
            elif kind == "quantize":
                if not 0 <= int(o["frac_bits"]) <= SCALE_BITS:
                    raise SchemaMismatch("frac_bits must be within [0, 16]")
                ops.append(Quantize(int(o["frac_bits"])))
            elif kind == "split":
                ops.append(Split(int(o["train_fraction"]), int(o["seed"])))
            else:
                raise SchemaMismatch(f"unknown transform op {kind!r}")
        return cls(tuple(ops))

    @classmethod
    def from_json(cls, data: bytes | str) -> "TransformSpec":
        return cls.from_dict(parse_json(data))

    def apply_row(self, index: int, n_in: int, rec: Record) -> tuple[Record | None, bool]:
        """Return (transformed row or None if filtered, in_train_split)."""
        in_train = True
        for op in self.ops:
            if isinstance(op, Filter):
                if not op.keep(rec):
                    return None, False
            elif isinstance(op, Split):
                in_train = in_train and index in op.train_indices(n_in)
            else:
                rec = op.apply(rec)
        return rec, in_train


# --------------------------------------------------------------------------
# committed datasets


def record_leaf(rec: Record, blinding: bytes) -> bytes:
    return commit_create(rec.to_bytes(), blinding, TAG_LEAF).digest


@dataclass
class DatasetCommitment:
    """Records stored in sorted-leaf order; the order training consumes them in."""

    records: list[Record]
    blindings: list[bytes]
    leaves: list[bytes]
    source_indices: list[int]
    tree: MerkleTree = field(repr=False)

    @property
    def root(self) -> bytes:
        return self.tree.root

    def __len__(self) -> int:
        return len(self.records)

    @property
    def d(self) -> int:
        return self.records[0].d

    @classmethod
    def build(cls, records: Sequence[Record], blindings: Sequence[bytes],
              source_indices: Sequence[int] | None = None) -> "DatasetCommitment":
        if not records:
            raise EmptyOutput("dataset has no records")
        if source_indices is None:
            source_indices = [-1] * len(records)
        leaves = [record_leaf(r, b) for r, b in zip(records, blindings)]
        order = sorted(range(len(records)), key=lambda i: leaves[i])
        if len(set(leaves)) != len(leaves):
            raise ValueError("duplicate dataset leaves")
        leaves_sorted = [leaves[i] for i in order]
        return cls([records[i] for i in order], [blindings[i] for i in order], leaves_sorted,
                   [source_indices[i] for i in order], merkle_build(leaves_sorted))

    def opening(self, i: int) -> tuple[bytes, bytes, MerklePath]:
        return self.records[i].to_bytes(), self.blindings[i], merkle_prove(self.tree, i)

    def index_of(self, leaf: bytes) -> int:
        i = bisect.bisect_left(self.leaves, leaf)
        if i < len(self.leaves) and self.leaves[i] == leaf:
            return i
        return -1

    def without(self, i: int) -> "DatasetCommitment":
        keep = [k for k in range(len(self)) if k != i]
        return DatasetCommitment.build([self.records[k] for k in keep], [self.blindings[k] for k in keep],
                                       [self.source_indices[k] for k in keep])

    def write(self, public_path: str | Path, secret_path: str | Path) -> None:
        Path(public_path).write_text("".join(canonical_json(r.to_json()).decode() + "\n" for r in self.records))
        secret = {"blindings": [b.hex() for b in self.blindings], "source_indices": list(self.source_indices)}
        Path(secret_path).write_bytes(canonical_json(secret))

    @classmethod
    def load(cls, public_path: str | Path, secret_path: str | Path) -> "DatasetCommitment":
        records = load_records(public_path)
        secret = parse_json(Path(secret_path).read_bytes())
        return cls.build(records, [bytes.fromhex(b) for b in secret["blindings"]], secret["source_indices"])


def load_records(path: str | Path) -> list[Record]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(Record.from_json(parse_json(line)))
    return out


@dataclass
class TransformResult:
    dataset: DatasetCommitment
    held_out: list[Record]  # rows that passed filters but fell outside the train split


def transform_apply(inputs: Sequence[bytes], spec: TransformSpec, rng: BlindingSource | None = None) -> TransformResult:
    """Run ``spec`` over raw asset payloads given in committed input order."""
    rng = rng or BlindingSource()
    n_in = len(inputs)
    out, src, held = [], [], []
    d = None
    for i, payload in enumerate(inputs):
        rec = parse_row(payload)
        if d is None:
            d = rec.d
        elif rec.d != d:
            raise SchemaMismatch(f"row {i} has {rec.d} features, expected {d}")
        new, in_train = spec.apply_row(i, n_in, rec)
        if new is None:
            continue
        if in_train:
            out.append(new)
            src.append(i)
        else:
            held.append(new)
    if not out:
        raise EmptyOutput("transform left no rows")
    blindings = [rng() for _ in out]
    return TransformResult(DatasetCommitment.build(out, blindings, src), held)


# --------------------------------------------------------------------------
# proofs


@dataclass(frozen=True)
class RowChallenge:
    output_index: int
    record_bytes: bytes
    output_blinding: bytes
    output_path: MerklePath
    input_index: int
    input_payload: bytes
    input_blinding: bytes
    input_path: MerklePath

    def write(self, w: Writer) -> None:
        w.u32(self.output_index).blob(self.record_bytes).digest(self.output_blinding)
        self.output_path.write(w)
        w.u32(self.input_index).blob(self.input_payload).digest(self.input_blinding)
        self.input_path.write(w)

    @classmethod
    def read(cls, r: Reader) -> "RowChallenge":
        oi, rb, ob = r.u32(), r.blob(), r.digest()
        op = MerklePath.read(r)
        ii, ip, ib = r.u32(), r.blob(), r.digest()
        return cls(oi, rb, ob, op, ii, ip, ib, MerklePath.read(r))


@dataclass(frozen=True)
class TransformProof:
    input_root: bytes
    output_root: bytes
    spec_hash: bytes
    n_in: int
    n_out: int
    challenges: tuple[RowChallenge, ...]

    def to_bytes(self) -> bytes:
        w = Writer().digest(self.input_root).digest(self.output_root).digest(self.spec_hash)
        w.u32(self.n_in).u32(self.n_out).u32(len(self.challenges))
        for ch in self.challenges:
            ch.write(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TransformProof":
        r = Reader(data)
        ir, orr, sh = r.digest(), r.digest(), r.digest()
        n_in, n_out = r.u32(), r.u32()
        chs = tuple(RowChallenge.read(r) for _ in range(r.count()))
        r.done()
        return cls(ir, orr, sh, n_in, n_out, chs)


def _transform_challenges(input_root, output_root, spec_hash, n_in, n_out, c) -> list[int]:
    t = Transcript("pipeline-attest/transform")
    t.absorb("input_root", input_root).absorb("output_root", output_root).absorb("spec_hash", spec_hash)
    t.absorb_int("n_in", n_in).absorb_int("n_out", n_out).absorb_int("challenges", c)
    return t.challenge_indices(c, n_out)


def transform_prove(inputs: CorpusCommitment, output: DatasetCommitment, spec: TransformSpec, c: int) -> TransformProof:
    n_out = len(output)
    if c > n_out:
        raise ChallengeCountExceedsRows(f"{c} challenges requested for {n_out} rows")
    idx = _transform_challenges(inputs.root, output.root, spec.digest, len(inputs), n_out, c)
    chs = []
    for i in idx:
        rb, ob, op = output.opening(i)
        src = output.source_indices[i]
        payload, ib, ip = inputs.opening(src)
        chs.append(RowChallenge(i, rb, ob, op, src, payload, ib, ip))
    return TransformProof(inputs.root, output.root, spec.digest, len(inputs), n_out, tuple(chs))


def transform_verify(input_root: bytes, output_root: bytes, spec: TransformSpec, proof: TransformProof,
                     min_challenges: int = 1) -> bool:
    if (proof.input_root, proof.output_root, proof.spec_hash) != (input_root, output_root, spec.digest):
        return False
    c = len(proof.challenges)
    if c < min(min_challenges, proof.n_out) or c > proof.n_out:
        return False
    expected = _transform_challenges(input_root, output_root, spec.digest, proof.n_in, proof.n_out, c)
    if [ch.output_index for ch in proof.challenges] != expected:
        return False
    for ch in proof.challenges:
        out_leaf = commit_create(ch.record_bytes, ch.output_blinding, TAG_LEAF).digest
        if ch.output_path.leaf_index != ch.output_index or ch.output_path.leaf_count != proof.n_out:
            return False
        if not merkle_verify(output_root, out_leaf, ch.output_path):
            return False
        asset_hash = sha256(ch.input_payload)
        in_leaf = corpus_leaf(asset_hash, ch.input_payload, ch.input_blinding)
        if ch.input_path.leaf_index != ch.input_index or ch.input_path.leaf_count != proof.n_in:
            return False
        if not merkle_verify(input_root, in_leaf, ch.input_path):
            return False
        try:
            claimed = Record.from_bytes(ch.record_bytes)
            rec = parse_row(ch.input_payload)
            redone, in_train = spec.apply_row(ch.input_index, proof.n_in, rec)
        except (PipelineError, DecodeError):
            return False
        # a row the predicates reject (or the split excludes) must not appear in the output
        if redone is None or not in_train or redone != claimed:
            return False
    return True
