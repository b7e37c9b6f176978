from __future__ import annotations

import hashlib
import itertools
import random
from collections import Counter

import pytest
from scipy.stats import chisquare

from pipeline_attest.codec import Reader, Writer
from pipeline_attest.commit import (
    MAX_DIGEST, ZERO_DIGEST, BlindingSource, MerklePath, NonMembershipProof, Neighbor, Transcript, commit_create,
    commit_verify_opening, fisher_yates, merkle_build, merkle_prove, merkle_verify, non_membership_prove,
    non_membership_verify, sorted_leaf_tree, transcript_absorb, transcript_challenge_field,
    transcript_challenge_indices,
)
from pipeline_attest.errors import EmptyLeafSet, IndexOutOfRange, TargetPresent, TooManyIndices
from pipeline_attest.field import P


def H(*parts: bytes) -> bytes:
    return hashlib.sha256(b"".join(parts)).digest()


def oracle_root(leaves: list[bytes]) -> bytes:
    """Recursive re-derivation: pad odd levels by repeating the last node."""
    level = [H(b"\x00", x) for x in leaves]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [H(b"\x01", level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def payloads(n: int, seed: int = 0) -> list[bytes]:
    rnd = random.Random(seed)
    return [rnd.randbytes(rnd.randrange(0, 40)) for _ in range(n)]


# commitments

def test_commit_definition():
    c = commit_create(b"", bytes(32), 0x02)
    assert c.digest == H(b"\x02", bytes(32))


def test_commit_hiding_and_binding_smoke():
    a = commit_create(b"payload", b"\x01" * 32)
    b = commit_create(b"payload", b"\x02" * 32)
    assert a.digest != b.digest
    assert commit_verify_opening(a.digest, b"payload", b"\x01" * 32)
    assert not commit_verify_opening(a.digest, b"payloae", b"\x01" * 32)
    assert not commit_verify_opening(a.digest, b"payload", b"\x02" * 32)
    assert not commit_verify_opening(a.digest, b"payload", b"\x01" * 32, 0x00)


def test_commit_golden_vector():
    c = commit_create(b"pipeline-attest", bytes(range(32)), 0x02)
    # frozen from hashlib over 0x02 || blinding || payload
    assert c.digest.hex() == "9b71db74c7c62973c1f0eb04fd341c67054a022de4bfc8dcde8b8e9a5e067da3"


def test_binding_search_finds_no_collision():
    rnd = random.Random(5)
    seen = {}
    for _ in range(10_000):
        payload, blinding = rnd.randbytes(rnd.randrange(1, 24)), rnd.randbytes(32)
        d = commit_create(payload, blinding).digest
        assert seen.setdefault(d, (payload, blinding)) == (payload, blinding)


def test_blinding_source_seeded_and_random():
    a, b = BlindingSource(b"s"), BlindingSource(b"s")
    assert [a() for _ in range(3)] == [b() for _ in range(3)]
    assert a.child("x")() == b.child("x")()
    assert a.child("x")() != a.child("y")()
    r = BlindingSource()
    assert r() != r() and len(r()) == 32


# Merkle trees

def test_merkle_small_examples():
    with pytest.raises(EmptyLeafSet):
        merkle_build([])
    assert merkle_build([b"a"]).root == H(b"\x00", b"a")
    four = [b"a", b"b", b"c", b"d"]
    assert merkle_build(four).root == oracle_root(four)
    three = [b"a", b"b", b"c"]
    l0 = [H(b"\x00", x) for x in three]
    expected = H(b"\x01", H(b"\x01", l0[0], l0[1]), H(b"\x01", l0[2], l0[2]))
    assert merkle_build(three).root == expected


def test_merkle_prove_range():
    tree = merkle_build([b"x", b"y"])
    with pytest.raises(IndexOutOfRange):
        merkle_prove(tree, 2)


def test_path_checked_against_wrong_leaf_fails():
    leaves = payloads(8, 1)
    tree = merkle_build(leaves)
    for i, j in itertools.product(range(8), range(8)):
        assert merkle_verify(tree.root, leaves[j], merkle_prove(tree, i)) == (i == j)


def _corruptions(path: MerklePath):
    for k, (digest, is_left) in enumerate(path.siblings):
        for bit in range(len(digest) * 8):
            flipped = bytearray(digest)
            flipped[bit // 8] ^= 1 << (bit % 8)
            sibs = list(path.siblings)
            sibs[k] = (bytes(flipped), is_left)
            yield MerklePath(path.leaf_index, path.leaf_count, tuple(sibs))
    for bit in range(max(path.leaf_count.bit_length(), 1) + 1):
        yield MerklePath(path.leaf_index ^ (1 << bit), path.leaf_count, path.siblings)


def test_merkle_exhaustive_up_to_16_leaves():
    for n in range(1, 17):
        leaves = payloads(n, n)
        tree = merkle_build(leaves)
        assert tree.root == oracle_root(leaves)
        for i in range(n):
            path = merkle_prove(tree, i)
            assert merkle_verify(tree.root, leaves[i], path)
            leaf = leaves[i] or b"\x00"
            for bit in range(len(leaf) * 8):
                bad = bytearray(leaf)
                bad[bit // 8] ^= 1 << (bit % 8)
                assert not merkle_verify(tree.root, bytes(bad), path)
            for bad_path in _corruptions(path):
                assert not merkle_verify(tree.root, leaves[i], bad_path)


def test_merkle_path_codec_round_trip():
    tree = merkle_build(payloads(5))
    path = merkle_prove(tree, 3)
    assert MerklePath.read(Reader(path.to_bytes())) == path


# non-membership

def _digests(n: int, seed: int) -> list[bytes]:
    rnd = random.Random(seed)
    return sorted({rnd.randbytes(32) for _ in range(n)})


def test_non_membership_between_neighbours():
    leaves = _digests(6, 3)
    tree = sorted_leaf_tree(leaves)
    lo = int.from_bytes(leaves[2], "big")
    hi = int.from_bytes(leaves[3], "big")
    target = ((lo + hi) // 2).to_bytes(32, "big")
    assert target not in leaves
    proof = non_membership_prove(tree, target)
    assert proof.left.digest == leaves[2] and proof.right.digest == leaves[3]
    assert non_membership_verify(tree.root, proof)


def test_non_membership_target_present():
    leaves = _digests(6, 3)
    with pytest.raises(TargetPresent):
        non_membership_prove(sorted_leaf_tree(leaves), leaves[4])


def test_non_membership_rejects_non_adjacent_neighbours():
    leaves = _digests(8, 9)
    tree = sorted_leaf_tree(leaves)
    lo, hi = int.from_bytes(leaves[2], "big"), int.from_bytes(leaves[3], "big")
    target = ((lo + hi) // 2).to_bytes(32, "big")
    forged = NonMembershipProof(target, Neighbor(leaves[1], merkle_prove(tree, 1)),
                                Neighbor(leaves[3], merkle_prove(tree, 3)))
    assert not non_membership_verify(tree.root, forged)
    # hiding a present leaf by skipping over it
    forged = NonMembershipProof(leaves[2], Neighbor(leaves[1], merkle_prove(tree, 1)),
                                Neighbor(leaves[3], merkle_prove(tree, 3)))
    assert not non_membership_verify(tree.root, forged)


def _boundary_targets(leaves: list[bytes]) -> list[bytes]:
    ints = [int.from_bytes(x, "big") for x in leaves]
    out = {ZERO_DIGEST[:-1] + b"\x01", MAX_DIGEST[:-1] + b"\xfe"}
    for v in ints:
        for delta in (-1, 0, 1):
            w = v + delta
            if 0 < w < 2**256 - 1:
                out.add(w.to_bytes(32, "big"))
    return sorted(out)


def _forgeries(tree, leaves, target):
    """Every (left, right) neighbour pairing an adversary could assemble from honest paths."""
    n = len(leaves)
    options = [None] + [Neighbor(leaves[i], merkle_prove(tree, i)) for i in range(n)]
    for left, right in itertools.product(options, options):
        yield NonMembershipProof(target, left, right)


def test_non_membership_exhaustive_eight_leaves():
    for n in range(1, 9):
        leaves = _digests(n, 100 + n)
        tree = sorted_leaf_tree(leaves)
        for target in _boundary_targets(leaves):
            member = target in leaves
            if member:
                with pytest.raises(TargetPresent):
                    non_membership_prove(tree, target)
            else:
                assert non_membership_verify(tree.root, non_membership_prove(tree, target))
            accepted = any(non_membership_verify(tree.root, p) for p in _forgeries(tree, leaves, target))
            assert accepted == (not member)


def test_non_membership_codec_round_trip():
    leaves = _digests(5, 2)
    tree = sorted_leaf_tree(leaves)
    proof = non_membership_prove(tree, MAX_DIGEST[:-1] + b"\xfe")
    w = Writer()
    proof.write(w)
    assert NonMembershipProof.read(Reader(w.getvalue())) == proof


# transcripts

def test_transcript_determinism_and_sensitivity():
    a = Transcript("d").absorb("x", b"abc")
    b = Transcript("d").absorb("x", b"abc")
    c = Transcript("d").absorb("x", b"abd")
    assert [a.challenge_int() for _ in range(4)] == [b.challenge_int() for _ in range(4)]
    assert Transcript("d").absorb("x", b"abc").challenge_int() != c.challenge_int()
    assert Transcript("d").absorb("y", b"abc").challenge_int() != Transcript("d").absorb("x", b"abc").challenge_int()


def test_transcript_wrappers_and_indices():
    t = transcript_absorb(Transcript("w"), "m", b"1")
    assert 0 <= transcript_challenge_field(t).value < P
    assert transcript_challenge_indices(Transcript("w"), 7, 7) == list(range(7))
    idx = Transcript("w").challenge_indices(5, 100)
    assert len(set(idx)) == 5 and all(0 <= i < 100 for i in idx)
    with pytest.raises(TooManyIndices):
        Transcript("w").challenge_indices(8, 7)


def test_field_challenges_are_uniform():
    # top 4 bits of 10^5 field challenges, chi-square at alpha = 0.001
    t = Transcript("uniformity")
    buckets = Counter(t.challenge_int() * 16 // P for _ in range(100_000))
    assert chisquare([buckets[k] for k in range(16)]).pvalue > 0.001


def test_index_challenges_are_uniform():
    counts = Counter()
    for i in range(20_000):
        counts.update(Transcript("idx").absorb_int("trial", i).challenge_indices(3, 10))
    assert chisquare([counts[k] for k in range(10)]).pvalue > 0.001


def test_fisher_yates_is_a_deterministic_permutation():
    p1 = fisher_yates(50, b"seed")
    assert sorted(p1) == list(range(50))
    assert p1 == fisher_yates(50, b"seed")
    assert p1 != fisher_yates(50, b"seee")
    assert fisher_yates(0, b"x") == [] and fisher_yates(1, b"x") == [0]


def test_fisher_yates_first_position_uniform():
    counts = Counter(fisher_yates(6, i.to_bytes(4, "little"))[0] for i in range(12_000))
    assert chisquare([counts[k] for k in range(6)]).pvalue > 0.001
