"""Tagged SHA-256 commitments, Merkle trees, non-membership proofs and the Fiat-Shamir transcript.

Domain tags (first byte of every hashed message):

    0x00  Merkle leaf / blinded dataset leaf
    0x01  Merkle internal node
    0x02  value commitment
    0x03  transcript
    0x04  stage record
"""

from __future__ import annotations

import bisect
import hashlib
import secrets
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .codec import DIGEST_SIZE, Reader, Writer
from .errors import EmptyLeafSet, IndexOutOfRange, TargetPresent, TooManyIndices
from .field import P, FieldElement

TAG_LEAF = b"\x00"
TAG_NODE = b"\x01"
TAG_VALUE = b"\x02"
TAG_TRANSCRIPT = b"\x03"
TAG_RECORD = b"\x04"

BLINDING_SIZE = 32
ZERO_DIGEST = b"\x00" * DIGEST_SIZE
MAX_DIGEST = b"\xff" * DIGEST_SIZE


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return h.digest()


def _tag(tag: bytes | int) -> bytes:
    return bytes([tag]) if isinstance(tag, int) else tag


# --------------------------------------------------------------------------
# commitments


@dataclass(frozen=True)
class Commitment:
    """``digest`` is public; ``blinding`` and ``payload`` stay with the committer."""

    digest: bytes
    blinding: bytes = field(repr=False)
    payload: bytes = field(repr=False)
    tag: bytes = TAG_VALUE


def commit_create(payload: bytes, blinding: bytes, tag: bytes | int = TAG_VALUE) -> Commitment:
    if len(blinding) != BLINDING_SIZE:
        raise ValueError(f"blinding must be {BLINDING_SIZE} bytes")
    tag = _tag(tag)
    return Commitment(sha256(tag, blinding, payload), bytes(blinding), bytes(payload), tag)


def commit_verify_opening(digest: bytes, payload: bytes, blinding: bytes, tag: bytes | int = TAG_VALUE) -> bool:
    if len(blinding) != BLINDING_SIZE:
        return False
    return sha256(_tag(tag), blinding, payload) == digest


class BlindingSource:
    """Source of 32-byte blindings.

    Without a seed it draws from the OS CSPRNG.  With a seed it yields a
    reproducible stream, which is what test vectors and byte-identical
    reruns need.
    """

    def __init__(self, seed: bytes | None = None):
        self.seed = seed
        self._counter = 0

    def __call__(self) -> bytes:
        if self.seed is None:
            return secrets.token_bytes(BLINDING_SIZE)
        out = sha256(b"pipeline-attest/blinding", self.seed, struct.pack("<Q", self._counter))
        self._counter += 1
        return out

    def child(self, label: str) -> "BlindingSource":
        if self.seed is None:
            return BlindingSource()
        return BlindingSource(sha256(b"pipeline-attest/child", self.seed, label.encode()))


# --------------------------------------------------------------------------
# Merkle trees


def leaf_hash(payload: bytes) -> bytes:
    return sha256(TAG_LEAF, payload)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(TAG_NODE, left, right)


@dataclass(frozen=True)
class MerkleTree:
    leaves: tuple[bytes, ...]          # leaf payloads as given
    levels: tuple[tuple[bytes, ...], ...]  # levels[0] = hashed leaves, levels[-1] = (root,)

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    def __len__(self) -> int:
        return len(self.leaves)


def merkle_build(leaf_payloads: Iterable[bytes]) -> MerkleTree:
    leaves = tuple(bytes(x) for x in leaf_payloads)
    if not leaves:
        raise EmptyLeafSet("a Merkle tree needs at least one leaf")
    level = [leaf_hash(x) for x in leaves]
    levels = [tuple(level)]
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
        level = [node_hash(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(tuple(level))
    return MerkleTree(leaves, tuple(levels))


@dataclass(frozen=True)
class MerklePath:
    """Authentication path.  ``siblings[k] = (digest, sibling_is_left)`` from the leaf level upward."""

    leaf_index: int
    leaf_count: int
    siblings: tuple[tuple[bytes, bool], ...]

    def write(self, w: Writer) -> None:
        w.u32(self.leaf_index).u32(self.leaf_count).u32(len(self.siblings))
        for digest, is_left in self.siblings:
            w.digest(digest).u8(1 if is_left else 0)

    @classmethod
    def read(cls, r: Reader) -> "MerklePath":
        index, count, n = r.u32(), r.u32(), r.count(64)
        sibs = []
        for _ in range(n):
            d = r.digest()
            flag = r.u8()
            sibs.append((d, flag == 1))
        return cls(index, count, tuple(sibs))

    def to_bytes(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()


def tree_depth(leaf_count: int) -> int:
    return (leaf_count - 1).bit_length() if leaf_count > 1 else 0


def merkle_prove(tree: MerkleTree, index: int) -> MerklePath:
    if not 0 <= index < tree.leaf_count:
        raise IndexOutOfRange(f"leaf index {index} outside [0, {tree.leaf_count})")
    siblings = []
    idx = index
    for level in tree.levels[:-1]:
        sib = idx ^ 1
        digest = level[sib] if sib < len(level) else level[idx]
        siblings.append((digest, bool(idx & 1)))
        idx >>= 1
    return MerklePath(index, tree.leaf_count, tuple(siblings))


def _path_root(leaf_node: bytes, path: MerklePath) -> bytes | None:
    h = leaf_node
    idx = path.leaf_index
    for digest, is_left in path.siblings:
        if is_left != bool(idx & 1) or len(digest) != DIGEST_SIZE:
            return None
        h = node_hash(digest, h) if is_left else node_hash(h, digest)
        idx >>= 1
    return h


def merkle_verify(root: bytes, leaf_payload: bytes, path: MerklePath) -> bool:
    if not 0 <= path.leaf_index < path.leaf_count:
        return False
    if len(path.siblings) != tree_depth(path.leaf_count):
        return False
    return _path_root(leaf_hash(leaf_payload), path) == root


def is_rightmost(leaf_payload: bytes, path: MerklePath) -> bool:
    """True iff the path shows a last leaf: every left-child step pairs with its own duplicate.

    Under the duplicate-last rule this holds exactly for the final leaf, so
    it does not rely on the (unbound) ``leaf_count`` claim.
    """
    h = leaf_hash(leaf_payload)
    for digest, is_left in path.siblings:
        if not is_left and digest != h:
            return False
        h = node_hash(digest, h) if is_left else node_hash(h, digest)
    return path.leaf_index == path.leaf_count - 1


# --------------------------------------------------------------------------
# sorted-leaf trees and non-membership


def sorted_leaf_tree(digests: Iterable[bytes]) -> MerkleTree:
    """Merkle tree over strictly increasing, deduplicated 32-byte digests."""
    leaves = sorted(set(bytes(d) for d in digests))
    for d in leaves:
        if len(d) != DIGEST_SIZE:
            raise ValueError("sorted-leaf trees hold 32-byte digests")
    return merkle_build(leaves)


@dataclass(frozen=True)
class Neighbor:
    digest: bytes
    path: MerklePath


@dataclass(frozen=True)
class NonMembershipProof:
    """``left``/``right`` of None stand for the all-0x00 / all-0xFF virtual sentinels."""

    target: bytes
    left: Neighbor | None
    right: Neighbor | None

    def write(self, w: Writer) -> None:
        w.digest(self.target)
        for nb in (self.left, self.right):
            if nb is None:
                w.u8(0)
            else:
                w.u8(1).digest(nb.digest)
                nb.path.write(w)

    @classmethod
    def read(cls, r: Reader) -> "NonMembershipProof":
        target = r.digest()
        sides = []
        for _ in range(2):
            if r.u8():
                d = r.digest()
                sides.append(Neighbor(d, MerklePath.read(r)))
            else:
                sides.append(None)
        return cls(target, sides[0], sides[1])


def non_membership_prove(tree: MerkleTree, target: bytes) -> NonMembershipProof:
    leaves = tree.leaves
    if any(leaves[i] >= leaves[i + 1] for i in range(len(leaves) - 1)):
        raise ValueError("tree leaves are not strictly sorted")
    pos = bisect.bisect_left(leaves, target)
    if pos < len(leaves) and leaves[pos] == target:
        raise TargetPresent(f"{target.hex()} is a leaf of the tree")
    left = Neighbor(leaves[pos - 1], merkle_prove(tree, pos - 1)) if pos > 0 else None
    right = Neighbor(leaves[pos], merkle_prove(tree, pos)) if pos < len(leaves) else None
    return NonMembershipProof(bytes(target), left, right)


def non_membership_verify(root: bytes, proof: NonMembershipProof) -> bool:
    t = proof.target
    if len(t) != DIGEST_SIZE:
        return False
    left, right = proof.left, proof.right
    if left is None and right is None:
        return False
    lo = left.digest if left is not None else ZERO_DIGEST
    hi = right.digest if right is not None else MAX_DIGEST
    if not lo < t < hi:
        return False
    if left is not None and not merkle_verify(root, left.digest, left.path):
        return False
    if right is not None and not merkle_verify(root, right.digest, right.path):
        return False
    if left is None:
        return right.path.leaf_index == 0
    if right is None:
        return is_rightmost(left.digest, left.path)
    return (right.path.leaf_index == left.path.leaf_index + 1
            and right.path.leaf_count == left.path.leaf_count)


# --------------------------------------------------------------------------
# Fiat-Shamir transcript


class Transcript:
    """Running SHA-256 state over domain-separated messages.

    Absorb order is the whole protocol: two transcripts fed the same
    sequence produce the same challenges.  Not thread-safe.
    """

    def __init__(self, domain: bytes | str = b""):
        if isinstance(domain, str):
            domain = domain.encode()
        self.state = sha256(TAG_TRANSCRIPT, b"init", struct.pack("<I", len(domain)), domain)
        self.counter = 0

    def absorb(self, label: str, message: bytes) -> "Transcript":
        lb = label.encode()
        self.state = sha256(TAG_TRANSCRIPT, self.state,
                            struct.pack("<I", len(lb)), lb,
                            struct.pack("<I", len(message)), message)
        return self

    def absorb_int(self, label: str, value: int) -> "Transcript":
        return self.absorb(label, struct.pack("<Q", value))

    def absorb_fes(self, label: str, values: Sequence) -> "Transcript":
        w = Writer()
        for v in values:
            w.fe(v)
        return self.absorb(label, w.getvalue())

    def _squeeze_u64(self) -> int:
        h = sha256(TAG_TRANSCRIPT, self.state, struct.pack("<Q", self.counter))
        self.counter += 1
        return int.from_bytes(h[:8], "little")

    def challenge_int(self) -> int:
        """Uniform integer in [0, p) by rejection sampling."""
        while True:
            v = self._squeeze_u64()
            if v < P:
                return v

    def challenge_field(self) -> FieldElement:
        return FieldElement(self.challenge_int())

    def challenge_indices(self, count: int, n: int) -> list[int]:
        """``count`` distinct indices in [0, n), returned sorted."""
        if count > n:
            raise TooManyIndices(f"cannot draw {count} distinct indices from {n}")
        if count < 0:
            raise ValueError("count must be non-negative")
        chosen: set[int] = set()
        while len(chosen) < count:
            chosen.add(self._squeeze_u64() % n)
        return sorted(chosen)


def transcript_absorb(t: Transcript, label: str, message: bytes) -> Transcript:
    return t.absorb(label, message)


def transcript_challenge_field(t: Transcript) -> FieldElement:
    return t.challenge_field()


def transcript_challenge_indices(t: Transcript, count: int, n: int) -> list[int]:
    return t.challenge_indices(count, n)


# --------------------------------------------------------------------------
# deterministic shuffles


def hash_stream_u64(seed: bytes):
    """Endless stream of 64-bit words: SHA-256(seed || counter) blocks split into 4 words."""
    counter = 0
    while True:
        block = sha256(seed, struct.pack("<Q", counter))
        counter += 1
        for k in range(0, DIGEST_SIZE, 8):
            yield int.from_bytes(block[k:k + 8], "little")


def fisher_yates(n: int, seed: bytes) -> list[int]:
    """Permutation of range(n) driven by the SHA-256 stream; uniform draws via rejection."""
    perm = list(range(n))
    stream = hash_stream_u64(seed)
    for i in range(n - 1, 0, -1):
        bound = i + 1
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            v = next(stream)
            if v < limit:
                break
        j = v % bound
        perm[i], perm[j] = perm[j], perm[i]
    return perm
