"""Fixed-point SGD with a committed per-iteration trace, challenge-response training proofs,
fine-tuning from committed weights, and exact unlearning.

All arithmetic works on centered lifts of field elements.  Every product
is checked to fit the centered range, so the integer results coincide
with the field computation that the commitments and sum-checks see.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Sequence

from .codec import Reader, Writer, canonical_json, parse_json
from .commit import (TAG_LEAF, TAG_VALUE, BlindingSource, MerklePath, MerkleTree, NonMembershipProof, Transcript,
                     commit_create, fisher_yates, merkle_build, merkle_prove, merkle_verify,
                     non_membership_prove, non_membership_verify, sha256, sorted_leaf_tree)
from .errors import (ChallengeCountExceedsRows, DecodeError, DimensionMismatch, InvalidPriorOpening, Overflow,
                     PipelineError, RecordNotFound)
from .field import INPUT_GUARD, SCALE_BITS, check_fits, encode_int, lift, mul_rescale_int, saturate_int
from .sumcheck import verify_matmul
from .transform import DatasetCommitment, Record

LINEAR = "linear_regression"
LOGISTIC = "logistic_regression"

SATURATION = encode_int(4)
HALF = encode_int(Fraction(1, 2))
QUARTER = encode_int(Fraction(1, 4))
INV_48 = encode_int(Fraction(1, 48))
# batch_size * d at or above this uses sum-check for the batch products
MATMUL_THRESHOLD = 64


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    d: int
    learning_rate: int  # fixed-point
    batch_size: int
    iterations: int
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.kind not in (LINEAR, LOGISTIC):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.d < 1 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("d and batch_size must be positive, iterations non-negative")

    @property
    def activation(self) -> str:
        return "cubic_sigmoid_saturate_4" if self.kind == LOGISTIC else "identity"

    @property
    def inv_batch(self) -> int:
        return encode_int(Fraction(1, self.batch_size))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "shuffle_seed": self.shuffle_seed,
            "activation": self.activation,
            "scale_bits": SCALE_BITS,
            "retrain_from": "declared_init",
        }

    def to_json(self) -> bytes:
        return canonical_json(self.to_dict())

    @property
    def digest(self) -> bytes:
        return sha256(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        lr = doc["learning_rate"] if "learning_rate" in doc else encode_int(doc["learning_rate_real"])
        return cls(doc["kind"], int(doc["d"]), int(lr), int(doc["batch_size"]), int(doc["iterations"]),
                   int(doc.get("shuffle_seed", 0)))

    @classmethod
    def from_json(cls, data: bytes | str) -> "ModelSpec":
        return cls.from_dict(parse_json(data))


# --------------------------------------------------------------------------
# weights and their commitments


@dataclass(frozen=True)
class ModelWeights:
    w: tuple[int, ...]
    bias: int = 0

    @property
    def d(self) -> int:
        return len(self.w)

    @classmethod
    def zeros(cls, d: int) -> "ModelWeights":
        return cls((0,) * d, 0)

    @classmethod
    def from_reals(cls, w: Sequence[float], bias: float = 0.0) -> "ModelWeights":
        return cls(tuple(encode_int(x) for x in w), encode_int(bias))

    def to_floats(self) -> tuple[list[float], float]:
        return [x / (1 << SCALE_BITS) for x in self.w], self.bias / (1 << SCALE_BITS)

    def values(self) -> list[int]:
        return list(self.w) + [self.bias]

    def write(self, w: Writer) -> None:
        w.fes(self.w).fe(self.bias)

    @classmethod
    def read(cls, r: Reader) -> "ModelWeights":
        w = tuple(lift(v) for v in r.fes())
        return cls(w, lift(r.fe()))

    def to_bytes(self) -> bytes:
        wr = Writer()
        self.write(wr)
        return wr.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelWeights":
        r = Reader(data)
        out = cls.read(r)
        r.done()
        return out


def weight_leaf(index: int, value: int, blinding: bytes) -> bytes:
    return commit_create(Writer().u32(index).fe(value).getvalue(), blinding, TAG_VALUE).digest


@dataclass(frozen=True)
class WeightsOpening:
    weights: ModelWeights
    blindings: tuple[bytes, ...]

    def root(self) -> bytes | None:
        vals = self.weights.values()
        if len(self.blindings) != len(vals):
            return None
        return merkle_build(weight_leaf(i, v, b) for i, (v, b) in enumerate(zip(vals, self.blindings))).root

    def verify(self, root: bytes) -> bool:
        return self.root() == root

    def write(self, w: Writer) -> None:
        self.weights.write(w)
        w.u32(len(self.blindings))
        for b in self.blindings:
            w.digest(b)

    @classmethod
    def read(cls, r: Reader) -> "WeightsOpening":
        weights = ModelWeights.read(r)
        return cls(weights, tuple(r.digest() for _ in range(r.count())))


@dataclass
class WeightsCommitment:
    """Weights committed coordinate by coordinate; leaf d holds the bias."""

    weights: ModelWeights
    blindings: list[bytes]
    leaves: list[bytes]
    tree: MerkleTree = field(repr=False)

    @property
    def root(self) -> bytes:
        return self.tree.root

    @classmethod
    def commit(cls, weights: ModelWeights, rng: BlindingSource | Sequence[bytes]) -> "WeightsCommitment":
        vals = weights.values()
        blindings = [rng() for _ in vals] if callable(rng) else list(rng)
        leaves = [weight_leaf(i, v, b) for i, (v, b) in enumerate(zip(vals, blindings))]
        return cls(weights, blindings, leaves, merkle_build(leaves))

    def opening(self) -> WeightsOpening:
        return WeightsOpening(self.weights, tuple(self.blindings))

    def coordinate(self, j: int) -> tuple[int, bytes, MerklePath]:
        return self.weights.values()[j], self.blindings[j], merkle_prove(self.tree, j)


def save_weights(commitment: WeightsCommitment, path: str | Path, secret_path: str | Path) -> None:
    Path(path).write_bytes(commitment.weights.to_bytes())
    Path(secret_path).write_bytes(canonical_json({"blindings": [b.hex() for b in commitment.blindings]}))


def load_weights(path: str | Path, secret_path: str | Path) -> WeightsCommitment:
    weights = ModelWeights.from_bytes(Path(path).read_bytes())
    blindings = [bytes.fromhex(b) for b in parse_json(Path(secret_path).read_bytes())["blindings"]]
    return WeightsCommitment.commit(weights, blindings)


# --------------------------------------------------------------------------
# arithmetic shared by training and inference


def sigmoid_hat(z: int) -> int:
    """1/2 + z/4 - z^3/48 on z saturated to [-4, 4], all in fixed point."""
    zs = saturate_int(z, SATURATION)
    z2 = mul_rescale_int(zs, zs)
    z3 = mul_rescale_int(z2, zs)
    return HALF + mul_rescale_int(zs, QUARTER) - mul_rescale_int(z3, INV_48)


def activate(z: int, kind: str) -> int:
    return sigmoid_hat(z) if kind == LOGISTIC else z


def dot_sum(w: Sequence[int], x: Sequence[int]) -> int:
    """Unreduced sum of products; the caller rescales once."""
    return check_fits(sum(a * b for a, b in zip(w, x)))


def pre_activation(weights: ModelWeights, z_sum: int) -> int:
    return check_fits((check_fits(z_sum) >> SCALE_BITS) + weights.bias)


def forward(weights: ModelWeights, x: Sequence[int], kind: str) -> tuple[int, int, int]:
    """Returns (unreduced w.x, z, activated score)."""
    if len(x) != weights.d:
        raise DimensionMismatch(f"input has {len(x)} features, model expects {weights.d}")
    s = dot_sum(weights.w, x)
    z = pre_activation(weights, s)
    return s, z, activate(z, kind)


@dataclass(frozen=True)
class StepWitness:
    z_sums: tuple[int, ...]     # X w per batch row, before rescale
    grad_sums: tuple[int, ...]  # X^T r per feature, before rescale


def residuals(weights: ModelWeights, z_sums: Sequence[int], labels: Sequence[int], kind: str) -> list[int]:
    return [check_fits(activate(pre_activation(weights, s), kind) - y) for s, y in zip(z_sums, labels)]


def apply_update(weights: ModelWeights, grad_sums: Sequence[int], residual_sum: int, spec: ModelSpec) -> ModelWeights:
    eta, inv_b = spec.learning_rate, spec.inv_batch
    new_w = []
    for wj, gs in zip(weights.w, grad_sums):
        g = mul_rescale_int(check_fits(gs) >> SCALE_BITS, inv_b)
        new_w.append(wj - mul_rescale_int(eta, g))
    gb = mul_rescale_int(check_fits(residual_sum), inv_b)
    bias = weights.bias - mul_rescale_int(eta, gb)
    for v in new_w + [bias]:
        if abs(v) >= INPUT_GUARD:
            raise Overflow(f"weight {v} left the guarded range; training diverged")
    return ModelWeights(tuple(new_w), bias)


def sgd_step(weights: ModelWeights, batch: Sequence[Record], spec: ModelSpec) -> tuple[ModelWeights, StepWitness]:
    for rec in batch:
        if rec.d != weights.d:
            raise DimensionMismatch(f"record has {rec.d} features, model has {weights.d}")
    z_sums = [dot_sum(weights.w, rec.features) for rec in batch]
    r = residuals(weights, z_sums, [rec.label for rec in batch], spec.kind)
    grad_sums = [check_fits(sum(rec.features[j] * ri for rec, ri in zip(batch, r))) for j in range(weights.d)]
    return apply_update(weights, grad_sums, sum(r), spec), StepWitness(tuple(z_sums), tuple(grad_sums))


@lru_cache(maxsize=256)
def _epoch_permutation(n: int, seed: int, epoch: int) -> tuple[int, ...]:
    return tuple(fisher_yates(n, struct.pack("<QQ", seed, epoch)))


def batch_schedule(spec: ModelSpec, n: int, iteration: int) -> tuple[int, ...]:
    """Dataset indices used by step ``iteration`` (1-based); drops the ragged tail of each epoch."""
    per_epoch = n // spec.batch_size
    if per_epoch == 0:
        raise DimensionMismatch(f"batch size {spec.batch_size} exceeds dataset size {n}")
    epoch, pos = divmod(iteration - 1, per_epoch)
    perm = _epoch_permutation(n, spec.shuffle_seed, epoch)
    return perm[pos * spec.batch_size:(pos + 1) * spec.batch_size]


# --------------------------------------------------------------------------
# trace


@dataclass(frozen=True)
class TrainingState:
    iteration: int
    weights: ModelWeights
    batch: tuple[int, ...]

    def to_bytes(self) -> bytes:
        w = Writer().u32(self.iteration)
        self.weights.write(w)
        w.u32(len(self.batch))
        for i in self.batch:
            w.u32(i)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrainingState":
        r = Reader(data)
        it = r.u32()
        weights = ModelWeights.read(r)
        batch = tuple(r.u32() for _ in range(r.count()))
        r.done()
        return cls(it, weights, batch)


def state_leaf(state_bytes: bytes, blinding: bytes) -> bytes:
    return commit_create(state_bytes, blinding, TAG_LEAF).digest


def chain_fold(spec_hash: bytes, leaves: Sequence[bytes]) -> list[bytes]:
    out, h = [], spec_hash
    for leaf in leaves:
        h = sha256(h, leaf)
        out.append(h)
    return out


def run_states(records: Sequence[Record], spec: ModelSpec, init: ModelWeights
               ) -> tuple[list[TrainingState], list[StepWitness]]:
    """The pure training loop: states s_0..s_T and per-step product witnesses."""
    if init.d != spec.d:
        raise DimensionMismatch(f"init has {init.d} weights, spec declares {spec.d}")
    if records and records[0].d != spec.d:
        raise DimensionMismatch(f"dataset has {records[0].d} features, spec declares {spec.d}")
    states = [TrainingState(0, init, ())]
    witnesses = []
    weights = init
    for i in range(1, spec.iterations + 1):
        idx = batch_schedule(spec, len(records), i)
        weights, wit = sgd_step(weights, [records[k] for k in idx], spec)
        states.append(TrainingState(i, weights, idx))
        witnesses.append(wit)
    return states, witnesses


@dataclass
class TrainingTrace:
    spec_hash: bytes
    states: list[TrainingState]
    witnesses: list[StepWitness]
    blindings: list[bytes]
    leaves: list[bytes]
    chain: list[bytes]
    tree: MerkleTree = field(repr=False)
    init_commitment: WeightsCommitment = field(repr=False)
    final_commitment: WeightsCommitment = field(repr=False)

    @property
    def root(self) -> bytes:
        return self.tree.root

    @property
    def head(self) -> bytes:
        return self.chain[-1]

    @property
    def weights(self) -> ModelWeights:
        return self.states[-1].weights

    @classmethod
    def from_states(cls, spec: ModelSpec, states: list[TrainingState], witnesses: list[StepWitness],
                    init_commitment: WeightsCommitment, rng: BlindingSource) -> "TrainingTrace":
        blindings = [rng() for _ in states]
        leaves = [state_leaf(s.to_bytes(), b) for s, b in zip(states, blindings)]
        final = WeightsCommitment.commit(states[-1].weights, rng)
        return cls(spec.digest, states, witnesses, blindings, leaves, chain_fold(spec.digest, leaves),
                   merkle_build(leaves), init_commitment, final)


def _init_commitment(init, d: int, rng: BlindingSource) -> WeightsCommitment:
    if isinstance(init, WeightsCommitment):
        return init
    return WeightsCommitment.commit(init if init is not None else ModelWeights.zeros(d), rng)


def train(dataset: DatasetCommitment, spec: ModelSpec, init: ModelWeights | WeightsCommitment | None = None,
          rng: BlindingSource | None = None) -> tuple[ModelWeights, TrainingTrace]:
    rng = rng or BlindingSource()
    init_c = _init_commitment(init, spec.d, rng)
    states, witnesses = run_states(dataset.records, spec, init_c.weights)
    trace = TrainingTrace.from_states(spec, states, witnesses, init_c, rng)
    return trace.weights, trace


def fine_tune(dataset: DatasetCommitment, spec: ModelSpec, prior_root: bytes, prior_opening: WeightsOpening,
              rng: BlindingSource | None = None) -> tuple[ModelWeights, TrainingTrace]:
    """Train starting from weights that must open against an earlier stage's weights root."""
    if not prior_opening.verify(prior_root):
        raise InvalidPriorOpening("prior weights do not open against the declared root")
    init_c = WeightsCommitment.commit(prior_opening.weights, prior_opening.blindings)
    return train(dataset, spec, init_c, rng)


# --------------------------------------------------------------------------
# training proof


@dataclass(frozen=True)
class LeafOpening:
    payload: bytes
    blinding: bytes
    path: MerklePath

    def write(self, w: Writer) -> None:
        w.blob(self.payload).digest(self.blinding)
        self.path.write(w)

    @classmethod
    def read(cls, r: Reader) -> "LeafOpening":
        payload, blinding = r.blob(), r.digest()
        return cls(payload, blinding, MerklePath.read(r))


@dataclass(frozen=True)
class StepOpening:
    iteration: int
    prev: LeafOpening
    cur: LeafOpening
    batch: tuple[LeafOpening, ...]
    z_sums: tuple[int, ...]
    grad_sums: tuple[int, ...]

    def write(self, w: Writer) -> None:
        w.u32(self.iteration)
        self.prev.write(w)
        self.cur.write(w)
        w.u32(len(self.batch))
        for b in self.batch:
            b.write(w)
        w.fes(self.z_sums).fes(self.grad_sums)

    @classmethod
    def read(cls, r: Reader) -> "StepOpening":
        it = r.u32()
        prev, cur = LeafOpening.read(r), LeafOpening.read(r)
        batch = tuple(LeafOpening.read(r) for _ in range(r.count()))
        return cls(it, prev, cur, batch, tuple(lift(v) for v in r.fes()), tuple(lift(v) for v in r.fes()))


@dataclass(frozen=True)
class TrainingProof:
    dataset_root: bytes
    dataset_size: int
    spec_hash: bytes
    init_root: bytes
    trace_root: bytes
    trace_head: bytes
    weights_root: bytes
    trace_leaves: tuple[bytes, ...]
    init_opening: WeightsOpening
    initial_state: LeafOpening
    steps: tuple[StepOpening, ...]
    # audit mode only: opens the final weights and s_T
    final_opening: WeightsOpening | None = None
    final_state: LeafOpening | None = None

    @property
    def challenges(self) -> int:
        return len(self.steps)

    def write(self, w: Writer) -> None:
        w.digest(self.dataset_root).u32(self.dataset_size).digest(self.spec_hash).digest(self.init_root)
        w.digest(self.trace_root).digest(self.trace_head).digest(self.weights_root)
        w.u32(len(self.trace_leaves))
        for leaf in self.trace_leaves:
            w.digest(leaf)
        self.init_opening.write(w)
        self.initial_state.write(w)
        w.u32(len(self.steps))
        for s in self.steps:
            s.write(w)
        if self.final_opening is None or self.final_state is None:
            w.u8(0)
        else:
            w.u8(1)
            self.final_opening.write(w)
            self.final_state.write(w)

    @classmethod
    def read(cls, r: Reader) -> "TrainingProof":
        dr, n, sh, ir = r.digest(), r.u32(), r.digest(), r.digest()
        tr, th, wr = r.digest(), r.digest(), r.digest()
        leaves = tuple(r.digest() for _ in range(r.count()))
        init_opening = WeightsOpening.read(r)
        s0 = LeafOpening.read(r)
        steps = tuple(StepOpening.read(r) for _ in range(r.count()))
        fo = fs = None
        if r.u8():
            fo, fs = WeightsOpening.read(r), LeafOpening.read(r)
        return cls(dr, n, sh, ir, tr, th, wr, leaves, init_opening, s0, steps, fo, fs)

    def to_bytes(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrainingProof":
        r = Reader(data)
        out = cls.read(r)
        r.done()
        return out


def training_challenges(dataset_root: bytes, dataset_size: int, spec_hash: bytes, init_root: bytes,
                        trace_root: bytes, trace_head: bytes, weights_root: bytes, c: int, iterations: int) -> list[int]:
    """Challenged iterations (1-based)."""
    t = Transcript("pipeline-attest/train")
    t.absorb("dataset_root", dataset_root).absorb_int("dataset_size", dataset_size)
    t.absorb("spec_hash", spec_hash).absorb("init_root", init_root).absorb("trace_root", trace_root)
    t.absorb("trace_head", trace_head).absorb("weights_root", weights_root).absorb_int("challenges", c)
    return [i + 1 for i in t.challenge_indices(c, iterations)]


def _state_opening(trace: TrainingTrace, i: int) -> LeafOpening:
    return LeafOpening(trace.states[i].to_bytes(), trace.blindings[i], merkle_prove(trace.tree, i))


def prove_training(trace: TrainingTrace, dataset: DatasetCommitment, spec: ModelSpec, c: int,
                   audit: bool = False) -> TrainingProof:
    T = len(trace.states) - 1
    if c > T:
        raise ChallengeCountExceedsRows(f"{c} challenges requested for {T} iterations")
    iters = training_challenges(dataset.root, len(dataset), spec.digest, trace.init_commitment.root, trace.root,
                                trace.head, trace.final_commitment.root, c, T)
    steps = []
    for i in iters:
        state = trace.states[i]
        batch = tuple(LeafOpening(*dataset.opening(k)) for k in state.batch)
        wit = trace.witnesses[i - 1]
        steps.append(StepOpening(i, _state_opening(trace, i - 1), _state_opening(trace, i), batch,
                                 wit.z_sums, wit.grad_sums))
    final_opening = final_state = None
    if audit:
        final_opening, final_state = trace.final_commitment.opening(), _state_opening(trace, T)
    return TrainingProof(dataset.root, len(dataset), spec.digest, trace.init_commitment.root, trace.root, trace.head,
                         trace.final_commitment.root, tuple(trace.leaves), trace.init_commitment.opening(),
                         _state_opening(trace, 0), tuple(steps), final_opening, final_state)


def _open_state(op: LeafOpening, index: int, leaves: Sequence[bytes], root: bytes) -> TrainingState | None:
    leaf = state_leaf(op.payload, op.blinding)
    if op.path.leaf_index != index or op.path.leaf_count != len(leaves) or leaves[index] != leaf:
        return None
    if not merkle_verify(root, leaf, op.path):
        return None
    state = TrainingState.from_bytes(op.payload)
    return state if state.iteration == index else None


def _column(values: Sequence[int]) -> list[list[int]]:
    return [[v] for v in values]


def _replay_step(spec: ModelSpec, prev: ModelWeights, batch: Sequence[Record], step: StepOpening,
                 trace_root: bytes) -> ModelWeights | None:
    B, d = len(batch), spec.d
    if len(step.z_sums) != B or len(step.grad_sums) != d:
        return None
    X = [list(rec.features) for rec in batch]
    z_sums = [lift(v) for v in step.z_sums]
    grad_sums = [lift(v) for v in step.grad_sums]
    if B * d >= MATMUL_THRESHOLD:
        t = Transcript("pipeline-attest/train/step").absorb("trace_root", trace_root).absorb_int("iteration", step.iteration)
        if not verify_matmul(X, _column(prev.w), _column(z_sums), t):
            return None
        r = residuals(prev, z_sums, [rec.label for rec in batch], spec.kind)
        Xt = [list(col) for col in zip(*X)]
        if not verify_matmul(Xt, _column(r), _column(grad_sums), t):
            return None
    else:
        if z_sums != [dot_sum(prev.w, row) for row in X]:
            return None
        r = residuals(prev, z_sums, [rec.label for rec in batch], spec.kind)
        if grad_sums != [check_fits(sum(row[j] * ri for row, ri in zip(X, r))) for j in range(d)]:
            return None
    return apply_update(prev, grad_sums, sum(r), spec)


def verify_training(proof: TrainingProof, dataset_root: bytes, spec: ModelSpec, init_root: bytes | None = None,
                    weights_root: bytes | None = None, min_challenges: int = 1) -> bool:
    """Check a training proof against public inputs.  Never raises on malformed proofs."""
    try:
        return _verify_training(proof, dataset_root, spec, init_root, weights_root, min_challenges)
    except (PipelineError, DecodeError, ValueError, IndexError):
        return False


def _verify_training(proof, dataset_root, spec, init_root, weights_root, min_challenges) -> bool:
    T = spec.iterations
    if proof.spec_hash != spec.digest or proof.dataset_root != dataset_root:
        return False
    if init_root is not None and proof.init_root != init_root:
        return False
    if weights_root is not None and proof.weights_root != weights_root:
        return False
    leaves = proof.trace_leaves
    if len(leaves) != T + 1 or merkle_build(leaves).root != proof.trace_root:
        return False
    if chain_fold(proof.spec_hash, leaves)[-1] != proof.trace_head:
        return False

    init = proof.init_opening
    if init.weights.d != spec.d or not init.verify(proof.init_root):
        return False
    s0 = _open_state(proof.initial_state, 0, leaves, proof.trace_root)
    if s0 is None or s0.batch or s0.weights != init.weights:
        return False

    c = len(proof.steps)
    if c < min(min_challenges, T):
        return False
    expected = training_challenges(proof.dataset_root, proof.dataset_size, proof.spec_hash, proof.init_root,
                                   proof.trace_root, proof.trace_head, proof.weights_root, c, T)
    if [s.iteration for s in proof.steps] != expected:
        return False

    for step in proof.steps:
        i = step.iteration
        prev = _open_state(step.prev, i - 1, leaves, proof.trace_root)
        cur = _open_state(step.cur, i, leaves, proof.trace_root)
        if prev is None or cur is None:
            return False
        schedule = batch_schedule(spec, proof.dataset_size, i)
        if cur.batch != schedule or len(step.batch) != len(schedule):
            return False
        batch = []
        for k, op in zip(schedule, step.batch):
            leaf = commit_create(op.payload, op.blinding, TAG_LEAF).digest
            if op.path.leaf_index != k or op.path.leaf_count != proof.dataset_size:
                return False
            if not merkle_verify(dataset_root, leaf, op.path):
                return False
            rec = Record.from_bytes(op.payload)
            if rec.d != spec.d:
                return False
            batch.append(rec)
        if prev.weights.d != spec.d:
            return False
        if _replay_step(spec, prev.weights, batch, step, proof.trace_root) != cur.weights:
            return False

    if proof.final_opening is not None:
        sT = _open_state(proof.final_state, T, leaves, proof.trace_root)
        if sT is None or not proof.final_opening.verify(proof.weights_root):
            return False
        if proof.final_opening.weights != sT.weights:
            return False
    return True


# --------------------------------------------------------------------------
# unlearning


@dataclass(frozen=True)
class UnlearningProof:
    old_root: bytes
    deleted_leaf: bytes
    new_root: bytes
    non_membership: NonMembershipProof
    membership: MerklePath
    retraining: TrainingProof
    old_leaves: tuple[bytes, ...] | None = None  # audit mode: full leaf set of the old tree

    def to_bytes(self) -> bytes:
        w = Writer().digest(self.old_root).digest(self.deleted_leaf).digest(self.new_root)
        self.non_membership.write(w)
        self.membership.write(w)
        self.retraining.write(w)
        if self.old_leaves is None:
            w.u8(0)
        else:
            w.u8(1).u32(len(self.old_leaves))
            for leaf in self.old_leaves:
                w.digest(leaf)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "UnlearningProof":
        r = Reader(data)
        old, leaf, new = r.digest(), r.digest(), r.digest()
        nm = NonMembershipProof.read(r)
        mp = MerklePath.read(r)
        tp = TrainingProof.read(r)
        old_leaves = tuple(r.digest() for _ in range(r.count())) if r.u8() else None
        r.done()
        return cls(old, leaf, new, nm, mp, tp, old_leaves)


@dataclass
class UnlearningResult:
    weights: ModelWeights
    proof: UnlearningProof
    dataset: DatasetCommitment
    trace: TrainingTrace


def unlearn(dataset: DatasetCommitment, leaf: bytes, spec: ModelSpec, init: WeightsCommitment | ModelWeights | None,
            c: int, rng: BlindingSource | None = None, audit: bool = False) -> UnlearningResult:
    """Drop one record leaf, retrain from the declared init, and assemble the evidence."""
    rng = rng or BlindingSource()
    i = dataset.index_of(leaf)
    if i < 0:
        raise RecordNotFound(f"leaf {leaf.hex()} is not in the dataset")
    new = dataset.without(i)
    weights, trace = train(new, spec, _init_commitment(init, spec.d, rng), rng)
    tproof = prove_training(trace, new, spec, min(c, spec.iterations), audit=audit)
    proof = UnlearningProof(dataset.root, leaf, new.root, non_membership_prove(new.tree, leaf),
                            merkle_prove(dataset.tree, i), tproof,
                            tuple(dataset.leaves) if audit else None)
    return UnlearningResult(weights, proof, new, trace)


def verify_unlearning(proof: UnlearningProof, old_root: bytes, new_root: bytes, spec: ModelSpec,
                      init_root: bytes | None = None, weights_root: bytes | None = None) -> bool:
    try:
        if (proof.old_root, proof.new_root) != (old_root, new_root):
            return False
        if not merkle_verify(old_root, proof.deleted_leaf, proof.membership):
            return False
        if proof.non_membership.target != proof.deleted_leaf:
            return False
        if not non_membership_verify(new_root, proof.non_membership):
            return False
        if proof.retraining.dataset_size != proof.membership.leaf_count - 1:
            return False
        if proof.old_leaves is not None:
            old = proof.old_leaves
            if proof.deleted_leaf not in old or merkle_build(old).root != old_root:
                return False
            if sorted_leaf_tree(x for x in old if x != proof.deleted_leaf).root != new_root:
                return False
        return verify_training(proof.retraining, new_root, spec, init_root, weights_root)
    except (PipelineError, DecodeError, ValueError):
        return False
