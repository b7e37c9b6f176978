from __future__ import annotations

import random
from dataclasses import replace

import pytest

from pipeline_attest.chain import (
    MemoryProofStore, PipelineChain, ProofStore, StageRecord, VerificationContext, chain_append, chain_trace,
    chain_verify, open_stage_blob, stage_blob,
)
from pipeline_attest.commit import ZERO_DIGEST, sha256
from pipeline_attest.errors import MissingProofBlob, NonContiguousIndex, UnknownLabel, UnlinkedInput

from pipeline_fixture import build_pipeline


@pytest.fixture(scope="module")
def pipeline():
    return build_pipeline()


def fresh(p):
    """Deep-enough copy so a test can tamper without touching the shared fixture."""
    store = MemoryProofStore()
    store.blobs = dict(p.store.blobs)
    chain = PipelineChain(list(p.chain.records), list(p.chain.raw_lines))
    return chain, store, replace(p.ctx, store=store)


def test_append_basics():
    chain, store = PipelineChain(), MemoryProofStore()
    rec = chain_append(chain, "corpus", (), (("corpus_root", b"\x01" * 32),), b"\x02" * 32, b"blob", store)
    assert rec.index == 0 and rec.prev_record_hash == ZERO_DIGEST
    assert rec.record_hash == rec.compute_hash() and chain.head == rec.record_hash
    assert store.get(rec.proof_digest) == b"blob" and rec.proof_digest == sha256(b"blob")
    nxt = chain_append(chain, "transform", (("corpus_root", b"\x01" * 32),), (("dataset_root", b"\x03" * 32),),
                       b"\x04" * 32, b"b2", store)
    assert nxt.prev_record_hash == rec.record_hash
    with pytest.raises(UnlinkedInput) as err:
        chain_append(chain, "train", (("dataset_root", b"\x09" * 32),), (), b"\x00" * 32, b"b3", store)
    assert err.value.label == "dataset_root"
    with pytest.raises(NonContiguousIndex):
        chain_append(chain, "train", (("dataset_root", b"\x03" * 32),), (), b"\x00" * 32, b"b3", store, index=5)
    with pytest.raises(ValueError):
        chain_append(chain, "mystery", (), (), b"\x00" * 32, b"", store)


def test_record_json_round_trip():
    rec = StageRecord(0, "corpus", ZERO_DIGEST, (), (("corpus_root", b"\x01" * 32),), b"\x02" * 32,
                      b"\x03" * 32).sealed()
    assert StageRecord.from_json(rec.to_json()) == rec


def test_stage_blob_round_trip():
    blob = stage_blob("infer", {"b": 1, "a": [1, 2]}, b"\x00proof")
    assert open_stage_blob(blob) == ("infer", {"a": [1, 2], "b": 1}, b"\x00proof")


def test_honest_pipeline_verifies(pipeline):
    report = chain_verify(pipeline.chain, pipeline.ctx)
    assert report.ok, report.to_dict()
    assert [r.stage_type for r in report.records] == ["corpus", "transform", "train", "evaluate", "infer", "unlearn"]
    assert report.to_dict()["report_version"] == 1
    # idempotent and read-only
    assert chain_verify(pipeline.chain, pipeline.ctx).to_dict() == report.to_dict()


def test_single_stage_selection(pipeline):
    report = chain_verify(pipeline.chain, pipeline.ctx, stage=2)
    assert report.ok
    assert [r.proof_valid for r in report.records] == [None, None, True, None, None, None]


def test_delete_middle_record(pipeline):
    chain, store, ctx = fresh(pipeline)
    del chain.records[2]
    report = chain_verify(chain, ctx)
    assert not report.ok and report.failing[0] == 2


def test_reorder_records(pipeline):
    chain, store, ctx = fresh(pipeline)
    chain.records[3], chain.records[4] = chain.records[4], chain.records[3]
    report = chain_verify(chain, ctx)
    assert not report.ok and 3 in report.failing


def test_substituted_valid_blob(pipeline):
    chain, store, ctx = fresh(pipeline)
    other = build_pipeline(seed=b"another run")
    train_rec = chain.records[2]
    # store the other run's (valid) training blob under this record's digest
    store.blobs[train_rec.proof_digest] = other.store.get(other.chain.records[2].proof_digest)
    report = chain_verify(chain, ctx)
    assert not report.records[2].proof_digest and not report.ok


def test_missing_blob_raises(pipeline):
    chain, store, ctx = fresh(pipeline)
    del store.blobs[chain.records[1].proof_digest]
    with pytest.raises(MissingProofBlob):
        chain_verify(chain, ctx)


def test_every_single_byte_mutation_of_records_fails(pipeline):
    rnd = random.Random(1)
    for line_no, line in enumerate(pipeline.chain.raw_lines):
        for _ in range(25):
            pos = rnd.randrange(len(line))
            repl = rnd.choice([c for c in "0123456789abcdef{}\",:x" if c != line[pos]])
            mutated = line[:pos] + repl + line[pos + 1:]
            lines = list(pipeline.chain.raw_lines)
            lines[line_no] = mutated
            chain = PipelineChain()
            for ln in lines:
                try:
                    chain.records.append(StageRecord.from_json(ln))
                except Exception:
                    chain.records.append(None)
            _, _, ctx = fresh(pipeline)
            try:
                report = chain_verify(chain, ctx)
            except MissingProofBlob:
                pytest.fail("mutated record should be reported, not raise")
            assert not report.ok, (line_no, pos)


def test_blob_mutations_fail(pipeline):
    rnd = random.Random(2)
    for rec in pipeline.chain.records:
        for _ in range(10):
            chain, store, ctx = fresh(pipeline)
            blob = bytearray(store.blobs[rec.proof_digest])
            blob[rnd.randrange(len(blob))] ^= 1 << rnd.randrange(8)
            store.blobs[rec.proof_digest] = bytes(blob)
            assert not chain_verify(chain, ctx).ok


def test_trace(pipeline):
    out = chain_trace(pipeline.chain, "output_commitment")
    assert out.indices() == {4, 2, 1, 0}
    assert "train" in out.render() and "corpus" in out.render()
    assert chain_trace(pipeline.chain, "corpus_root").indices() == {0}
    un = chain_trace(pipeline.chain, "dataset_root")
    assert un.record.stage_type == "unlearn"
    text = un.render()
    old, new = pipeline.chain.records[1].output("dataset_root"), pipeline.chain.records[5].output("dataset_root")
    assert old.hex() in text and new.hex() in text
    first = chain_trace(pipeline.chain, "dataset_root:" + old.hex()[:10])
    assert first.record.index == 1
    with pytest.raises(UnknownLabel):
        chain_trace(pipeline.chain, "no_such_label")


def test_file_backed_chain_and_store(tmp_path, pipeline):
    store = ProofStore(tmp_path / "proofs")
    chain = PipelineChain(path=tmp_path / "chain.jsonl")
    for rec in pipeline.chain.records:
        chain_append(chain, rec.stage_type, rec.inputs, rec.outputs, rec.spec_hash,
                     pipeline.store.get(rec.proof_digest), store)
    loaded = PipelineChain.load(tmp_path / "chain.jsonl")
    assert [r.record_hash for r in loaded.records] == [r.record_hash for r in pipeline.chain.records]
    assert sorted(p.name for p in (tmp_path / "proofs").iterdir()) == sorted(
        r.proof_digest.hex() for r in loaded.records)
    ctx = VerificationContext(store, pipeline.ctx.trusted_keys, pipeline.payloads)
    assert chain_verify(loaded, ctx).ok
    with pytest.raises(MissingProofBlob):
        store.get(b"\x00" * 32)


def test_malformed_line_is_a_failure(tmp_path, pipeline):
    lines = list(pipeline.chain.raw_lines)
    lines[3] = lines[3][: len(lines[3]) // 2]
    (tmp_path / "chain.jsonl").write_text("\n".join(lines) + "\n")
    chain = PipelineChain.load(tmp_path / "chain.jsonl")
    assert chain.records[3] is None
    report = chain_verify(chain, pipeline.ctx)
    assert not report.ok and 3 in report.failing and not report.records[3].parsed


def test_verifier_challenge_floor(pipeline):
    ctx = replace(pipeline.ctx, min_challenges={"train": 6})
    report = chain_verify(pipeline.chain, ctx)
    assert not report.records[2].ok


def test_untrusted_policy_key(pipeline):
    ctx = replace(pipeline.ctx, trusted_keys=frozenset())
    assert not chain_verify(pipeline.chain, ctx).records[0].ok
