"""Signed provenance manifests for raw assets and the corpus ingestion gate.

A manifest is a small C2PA-style claim: a hard binding (SHA-256 of the
asset bytes), a set of allow/deny assertions, ingredient manifest digests
and an Ed25519 signature over the canonical JSON claim.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .codec import Reader, Writer, canonical_json, parse_json
from .commit import TAG_LEAF, BlindingSource, MerklePath, MerkleTree, commit_create, merkle_build, merkle_prove, sha256
from .errors import DecodeError, EmptyAcceptedSet

log = logging.getLogger(__name__)

ASSERTION_FLAGS = ("data_mining", "ai_inference", "ai_training")
ASSERTION_VALUES = ("allow", "deny")
MAX_INGREDIENT_DEPTH = 8

REASON_HASH = "hash_binding"
REASON_SIGNATURE = "signature"
REASON_TRUST = "signer_trust"
REASON_INGREDIENTS = "ingredients"
REASON_DEPTH = "depth_exceeded"
REASON_POLICY = "assertion_policy"
REASON_MALFORMED = "malformed"


def _signing_key(key) -> Ed25519PrivateKey:
    if isinstance(key, Ed25519PrivateKey):
        return key
    return Ed25519PrivateKey.from_private_bytes(bytes(key))


def public_key_bytes(key) -> bytes:
    if isinstance(key, Ed25519PrivateKey):
        key = key.public_key()
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


@dataclass(frozen=True)
class Manifest:
    asset_id: str
    asset_hash: bytes
    assertions: Mapping[str, str]
    ingredients: tuple[bytes, ...]
    signer_public_key: bytes
    signature: bytes = field(default=b"", repr=False)

    def claim(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "asset_hash": self.asset_hash.hex(),
            "assertions": dict(self.assertions),
            "ingredients": [d.hex() for d in self.ingredients],
            "signer_public_key": self.signer_public_key.hex(),
        }

    def claim_bytes(self) -> bytes:
        return canonical_json(self.claim())

    def to_json(self) -> bytes:
        doc = self.claim()
        doc["signature"] = self.signature.hex()
        return canonical_json(doc)

    @property
    def digest(self) -> bytes:
        """Identifier used when this manifest is cited as an ingredient."""
        return sha256(self.to_json())

    @classmethod
    def from_json(cls, data: bytes | str) -> "Manifest":
        doc = parse_json(data)
        try:
            return cls(
                asset_id=str(doc["asset_id"]),
                asset_hash=bytes.fromhex(doc["asset_hash"]),
                assertions={str(k): str(v) for k, v in doc["assertions"].items()},
                ingredients=tuple(bytes.fromhex(h) for h in doc["ingredients"]),
                signer_public_key=bytes.fromhex(doc["signer_public_key"]),
                signature=bytes.fromhex(doc["signature"]),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise DecodeError(f"malformed manifest: {exc}") from exc


@dataclass(frozen=True)
class RawAsset:
    payload: bytes
    manifest: Manifest


@dataclass
class VerificationReport:
    checks: dict[str, bool] = field(default_factory=dict)
    reasons: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.checks) and all(self.checks.values())

    def __bool__(self) -> bool:
        return self.ok

    def fail(self, check: str, reason: str | None = None) -> None:
        self.checks[check] = False
        self.reasons.append(reason or check)


def manifest_sign(payload: bytes, assertions: Mapping[str, str], ingredients: Iterable, signing_key,
                  asset_id: str = "") -> Manifest:
    """Build and sign a manifest.  ``ingredients`` may be Manifests or raw digests."""
    sk = _signing_key(signing_key)
    ingr = tuple(i.digest if isinstance(i, Manifest) else bytes(i) for i in ingredients)
    asset_hash = sha256(payload)
    unsigned = Manifest(asset_id or asset_hash.hex()[:16], asset_hash, dict(assertions), ingr,
                        public_key_bytes(sk))
    sig = sk.sign(unsigned.claim_bytes())
    return Manifest(unsigned.asset_id, asset_hash, unsigned.assertions, ingr, unsigned.signer_public_key, sig)


def signature_valid(m: Manifest) -> bool:
    if len(m.signer_public_key) != 32 or len(m.signature) != 64:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(m.signer_public_key).verify(m.signature, m.claim_bytes())
    except (InvalidSignature, ValueError):
        return False
    return True


def _assertions_wellformed(m: Manifest) -> bool:
    return all(m.assertions.get(f, "allow") in ASSERTION_VALUES for f in ASSERTION_FLAGS)


def _ingredients_valid(m: Manifest, trusted: set[bytes], store: Mapping[bytes, Manifest], depth: int,
                       report: VerificationReport) -> bool:
    for d in m.ingredients:
        if depth >= MAX_INGREDIENT_DEPTH:
            report.reasons.append(REASON_DEPTH)
            return False
        ing = store.get(d)
        if ing is None or ing.digest != d:
            report.reasons.append(f"ingredient_missing:{d.hex()[:16]}")
            return False
        if not signature_valid(ing) or ing.signer_public_key not in trusted:
            report.reasons.append(f"ingredient_invalid:{d.hex()[:16]}")
            return False
        if not _ingredients_valid(ing, trusted, store, depth + 1, report):
            return False
    return True


def manifest_verify(payload: bytes, m: Manifest, trusted_keys: Iterable[bytes],
                    ingredient_store: Mapping[bytes, Manifest] | None = None) -> VerificationReport:
    """Check hard binding, signature, signer trust and (recursively) ingredients.

    Failures are report entries; nothing here raises.
    """
    trusted = set(trusted_keys)
    report = VerificationReport()
    report.checks[REASON_HASH] = sha256(payload) == m.asset_hash
    report.checks[REASON_SIGNATURE] = signature_valid(m) and _assertions_wellformed(m)
    report.checks[REASON_TRUST] = m.signer_public_key in trusted
    report.checks[REASON_INGREDIENTS] = _ingredients_valid(m, trusted, ingredient_store or {}, 0, report)
    report.reasons.extend(k for k, v in report.checks.items() if not v and k not in report.reasons)
    return report


# --------------------------------------------------------------------------
# corpus ingestion


@dataclass(frozen=True)
class Policy:
    required_assertions: Mapping[str, str]
    trusted_keys: frozenset[bytes]

    def to_json(self) -> bytes:
        return canonical_json({
            "required_assertions": dict(self.required_assertions),
            "trusted_keys": sorted(k.hex() for k in self.trusted_keys),
        })

    @classmethod
    def from_json(cls, data: bytes | str) -> "Policy":
        doc = parse_json(data)
        return cls(dict(doc["required_assertions"]), frozenset(bytes.fromhex(k) for k in doc["trusted_keys"]))

    @property
    def digest(self) -> bytes:
        return sha256(self.to_json())


@dataclass
class CorpusCommitment:
    """Accepted assets, in input order, committed as blinded Merkle leaves."""

    payloads: list[bytes]
    asset_hashes: list[bytes]
    blindings: list[bytes]
    leaves: list[bytes]
    tree: MerkleTree

    @property
    def root(self) -> bytes:
        return self.tree.root

    def __len__(self) -> int:
        return len(self.payloads)

    def opening(self, i: int) -> tuple[bytes, bytes, MerklePath]:
        return self.payloads[i], self.blindings[i], merkle_prove(self.tree, i)

    @classmethod
    def build(cls, payloads: Sequence[bytes], blindings: Sequence[bytes]) -> "CorpusCommitment":
        hashes = [sha256(p) for p in payloads]
        leaves = [corpus_leaf(h, p, b) for h, p, b in zip(hashes, payloads, blindings)]
        return cls(list(payloads), hashes, list(blindings), leaves, merkle_build(leaves))


def corpus_leaf(asset_hash: bytes, payload: bytes, blinding: bytes) -> bytes:
    return commit_create(asset_hash + payload, blinding, TAG_LEAF).digest


@dataclass
class CorpusResult:
    accepted: list[RawAsset]
    commitment: CorpusCommitment
    rejections: list[tuple[int, str, str]]  # (input index, asset_id, reason)


def _judge(asset: RawAsset, policy: Policy, store: Mapping[bytes, Manifest]) -> str | None:
    report = manifest_verify(asset.payload, asset.manifest, policy.trusted_keys, store)
    if not report.ok:
        for reason in (REASON_HASH, REASON_SIGNATURE, REASON_TRUST):
            if not report.checks[reason]:
                return reason
        return REASON_DEPTH if REASON_DEPTH in report.reasons else REASON_INGREDIENTS
    for flag, required in policy.required_assertions.items():
        if asset.manifest.assertions.get(flag) != required:
            return REASON_POLICY
    return None


def corpus_verify(assets: Sequence[RawAsset], policy: Policy, rng: BlindingSource | None = None,
                  ingredient_store: Mapping[bytes, Manifest] | None = None,
                  workers: int = 1) -> CorpusResult:
    """Filter assets through manifest checks and policy, then commit to the accepted ones.

    The accepted list and the root follow the input order.
    """
    rng = rng or BlindingSource()
    store = ingredient_store or {}
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            verdicts = list(pool.map(lambda a: _judge(a, policy, store), assets))
    else:
        verdicts = [_judge(a, policy, store) for a in assets]
    accepted, rejections = [], []
    for i, (asset, reason) in enumerate(zip(assets, verdicts)):
        if reason is None:
            accepted.append(asset)
        else:
            rejections.append((i, asset.manifest.asset_id, reason))
            log.info("rejected asset %s: %s", asset.manifest.asset_id, reason)
    if not accepted:
        raise EmptyAcceptedSet("no asset passed manifest verification and policy")
    blindings = [rng() for _ in accepted]
    commitment = CorpusCommitment.build([a.payload for a in accepted], blindings)
    return CorpusResult(accepted, commitment, rejections)


@dataclass
class CorpusEvidence:
    """What a verifier needs to re-run ingestion: policy, accepted manifests and leaf blindings."""

    policy: Policy
    manifests: list[Manifest]
    blindings: list[bytes]
    rejections: list[tuple[int, str, str]]
    ingredients: list[Manifest] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        w = Writer().blob(self.policy.to_json()).u32(len(self.manifests))
        for m, b in zip(self.manifests, self.blindings):
            w.blob(m.to_json()).digest(b)
        w.blob(canonical_json([list(r) for r in self.rejections]))
        w.u32(len(self.ingredients))
        for m in self.ingredients:
            w.blob(m.to_json())
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CorpusEvidence":
        r = Reader(data)
        policy = Policy.from_json(r.blob())
        manifests, blindings = [], []
        for _ in range(r.count()):
            manifests.append(Manifest.from_json(r.blob()))
            blindings.append(r.digest())
        rejections = [tuple(x) for x in parse_json(r.blob())]
        ingredients = [Manifest.from_json(r.blob()) for _ in range(r.count())]
        r.done()
        return cls(policy, manifests, blindings, rejections, ingredients)


def corpus_evidence(result: CorpusResult, policy: Policy, ingredient_store: Mapping[bytes, Manifest] | None = None
                    ) -> CorpusEvidence:
    ingredients = sorted((ingredient_store or {}).values(), key=lambda m: m.digest)
    return CorpusEvidence(policy, [a.manifest for a in result.accepted], list(result.commitment.blindings),
                          list(result.rejections), list(ingredients))


def corpus_evidence_verify(evidence: CorpusEvidence, root: bytes, payload_by_hash: Mapping[bytes, bytes]) -> bool:
    """Re-run the accepted half of ingestion against the raw asset store and compare roots."""
    store = {m.digest: m for m in evidence.ingredients}
    payloads = []
    for m in evidence.manifests:
        payload = payload_by_hash.get(m.asset_hash)
        if payload is None:
            return False
        if _judge(RawAsset(payload, m), evidence.policy, store) is not None:
            return False
        payloads.append(payload)
    if not payloads or len(evidence.blindings) != len(payloads):
        return False
    return CorpusCommitment.build(payloads, evidence.blindings).root == root


# --------------------------------------------------------------------------
# files


def load_trusted_keys(path: str | Path) -> frozenset[bytes]:
    keys = set()
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            keys.add(bytes.fromhex(line))
    return frozenset(keys)


def load_manifest(path: str | Path) -> Manifest:
    return Manifest.from_json(Path(path).read_bytes())
