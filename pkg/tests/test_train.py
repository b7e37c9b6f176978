from __future__ import annotations

import random
from dataclasses import replace

import pytest

from forgeries import forged_trace
from oracles import enc, float_sgd, integer_sgd
from pipeline_attest.commit import BlindingSource, merkle_prove, merkle_verify, non_membership_verify
from pipeline_attest.errors import ChallengeCountExceedsRows, InvalidPriorOpening, RecordNotFound
from pipeline_attest.field import SCALE
from pipeline_attest.train import (
    LINEAR, LOGISTIC, ModelSpec, ModelWeights, TrainingProof, UnlearningProof, WeightsCommitment,
    WeightsOpening, batch_schedule, chain_fold, fine_tune, prove_training, sigmoid_hat,
    train, unlearn, verify_training, verify_unlearning,
)
from pipeline_attest.transform import DatasetCommitment, Record


def dataset(rows, seed=b"ds") -> DatasetCommitment:
    rng = BlindingSource(seed)
    recs = [Record(tuple(enc(v) for v in f), enc(y), bytes([i]) * 32) for i, (f, y) in enumerate(rows)]
    return DatasetCommitment.build(recs, [rng() for _ in recs])


def random_rows(n, d, seed, logistic=True):
    rnd = random.Random(seed)
    w = [rnd.uniform(-1, 1) for _ in range(d)]
    rows = []
    for _ in range(n):
        x = [round(rnd.uniform(-1, 1), 3) for _ in range(d)]
        s = sum(a * b for a, b in zip(w, x))
        rows.append((x, (1 if s > 0 else 0) if logistic else round(s, 3)))
    return rows


def test_sigmoid_hat_points():
    assert sigmoid_hat(0) == SCALE // 2
    # 1/2 + 1/4 - 1/48 = 35/48 -> within one grid step
    assert abs(sigmoid_hat(SCALE) - 35 * SCALE // 48) <= 1
    assert sigmoid_hat(10 * SCALE) == sigmoid_hat(4 * SCALE)
    assert sigmoid_hat(-SCALE) + sigmoid_hat(SCALE) in (SCALE - 1, SCALE, SCALE + 1)


def test_zero_iterations_returns_init():
    ds = dataset([([1.0, 0.0], 1.0)] * 1 + [([0.0, 1.0], 2.0)])
    spec = ModelSpec(LINEAR, 2, enc(0.5), 2, 0)
    w, trace = train(ds, spec, rng=BlindingSource(b"t"))
    assert w == ModelWeights.zeros(2) and len(trace.states) == 1


def test_one_step_integer_oracle():
    ds = dataset([([1, 0], 2), ([1, 0], 2), ([0, 1], 1), ([0, 1], 1)])
    spec = ModelSpec(LINEAR, 2, enc(0.5), 4, 1)
    w, _ = train(ds, spec, rng=BlindingSource(b"t"))
    # r = -y; grad = X^T r / 4 = (-1, -0.5); bias grad = -1.5; step 0.5
    assert w.w == (enc(0.5), enc(0.25)) == (32768, 16384)
    assert w.bias == enc(0.75) == 49152


@pytest.mark.parametrize("logistic", [False, True])
def test_matches_integer_oracle(logistic):
    rows = random_rows(40, 3, 5, logistic)
    ds = dataset(rows)
    spec = ModelSpec(LOGISTIC if logistic else LINEAR, 3, enc(0.25), 8, 23, 9)
    w, _ = train(ds, spec, rng=BlindingSource(b"t"))
    X = [list(r.features) for r in ds.records]
    y = [r.label for r in ds.records]
    ow, ob = integer_sgd(X, y, logistic, spec.learning_rate, 8, 23, 9)
    assert list(w.w) == ow and w.bias == ob


def test_close_to_float_reference():
    rows = random_rows(64, 4, 6)
    ds = dataset(rows)
    spec = ModelSpec(LOGISTIC, 4, enc(0.5), 16, 30, 2)
    w, _ = train(ds, spec, rng=BlindingSource(b"t"))
    X = [[v / SCALE for v in r.features] for r in ds.records]
    y = [r.label / SCALE for r in ds.records]
    fw, fb = float_sgd(X, y, True, spec.learning_rate / SCALE, 16, 30, 2)
    got, gb = w.to_floats()
    assert max(abs(a - b) for a, b in zip(got + [gb], fw + [fb])) <= 1e-2


def test_schedule_is_epoch_permutation():
    spec = ModelSpec(LINEAR, 1, enc(0.1), 4, 10, 3)
    seen = [i for t in range(1, 4) for i in batch_schedule(spec, 13, t)]
    assert sorted(seen) == sorted(set(seen)) and len(seen) == 12


def test_determinism():
    ds = dataset(random_rows(32, 2, 7))
    spec = ModelSpec(LOGISTIC, 2, enc(0.3), 8, 12, 1)
    _, t1 = train(ds, spec, rng=BlindingSource(b"same"))
    _, t2 = train(ds, spec, rng=BlindingSource(b"same"))
    assert (t1.root, t1.head, t1.final_commitment.root) == (t2.root, t2.head, t2.final_commitment.root)
    p1 = prove_training(t1, ds, spec, 5).to_bytes()
    assert p1 == prove_training(t2, ds, spec, 5).to_bytes()


def test_spec_json_round_trip():
    spec = ModelSpec(LOGISTIC, 8, enc(0.1), 32, 50, 7)
    assert ModelSpec.from_json(spec.to_json()) == spec
    assert ModelSpec.from_dict({"kind": LINEAR, "d": 2, "learning_rate_real": 0.5, "batch_size": 4,
                                "iterations": 1}).learning_rate == 32768
    with pytest.raises(ValueError):
        ModelSpec("svm", 2, 1, 1, 1)


def test_weights_commitment_and_opening_codec():
    wc = WeightsCommitment.commit(ModelWeights.from_reals([0.5, -1.25], 0.125), BlindingSource(b"w"))
    op = wc.opening()
    assert op.verify(wc.root)
    assert not WeightsOpening(ModelWeights((op.weights.w[0] + 1, op.weights.w[1]), op.weights.bias),
                              op.blindings).verify(wc.root)
    value, blinding, path = wc.coordinate(2)
    assert value == enc(0.125) and path.leaf_index == 2


def _setup(T=20, n=16, d=2, seed=0, B=4):
    ds = dataset(random_rows(n, d, seed), seed=b"d%d" % seed)
    spec = ModelSpec(LOGISTIC, d, enc(0.5), B, T, seed)
    return ds, spec


def test_full_audit_verifies():
    ds, spec = _setup()
    _, trace = train(ds, spec, rng=BlindingSource(b"p"))
    proof = prove_training(trace, ds, spec, spec.iterations, audit=True)
    decoded = TrainingProof.from_bytes(proof.to_bytes())
    assert decoded == proof
    assert verify_training(decoded, ds.root, spec, trace.init_commitment.root, trace.final_commitment.root,
                           min_challenges=spec.iterations)
    assert chain_fold(spec.digest, decoded.trace_leaves)[-1] == trace.head


def test_sumcheck_path_for_large_batches():
    ds, spec = _setup(T=6, n=64, d=8, B=16)
    _, trace = train(ds, spec, rng=BlindingSource(b"p"))
    assert verify_training(prove_training(trace, ds, spec, 6), ds.root, spec)


def test_proof_against_other_dataset_or_spec_fails():
    ds, spec = _setup()
    other, _ = _setup(seed=1)
    _, trace = train(ds, spec, rng=BlindingSource(b"p"))
    proof = prove_training(trace, ds, spec, 5)
    assert verify_training(proof, ds.root, spec)
    assert not verify_training(proof, other.root, spec)
    assert not verify_training(proof, ds.root, replace(spec, learning_rate=spec.learning_rate + 1))
    assert not verify_training(proof, ds.root, spec, min_challenges=6)
    assert not verify_training(proof, ds.root, spec, weights_root=bytes(32))
    with pytest.raises(ChallengeCountExceedsRows):
        prove_training(trace, ds, spec, spec.iterations + 1)


def test_forged_iteration_caught_when_challenged():
    ds, spec = _setup()
    trace = forged_trace(ds, spec, 7, BlindingSource(b"f"))
    assert not verify_training(prove_training(trace, ds, spec, spec.iterations), ds.root, spec)


def test_forged_iteration_detection_rate():
    T, c, trials = 20, 10, 200
    ds, spec = _setup(T=T)
    rnd = random.Random(99)
    caught = 0
    for t in range(trials):
        trace = forged_trace(ds, spec, rnd.randrange(1, T + 1), BlindingSource(b"trial%d" % t))
        caught += not verify_training(prove_training(trace, ds, spec, c), ds.root, spec)
    assert abs(caught / trials - c / T) <= 0.1


def test_fine_tune():
    ds, spec = _setup(T=5)
    _, base = train(ds, spec, rng=BlindingSource(b"b"))
    prior = base.final_commitment
    w, trace = fine_tune(ds, replace(spec, iterations=0), prior.root, prior.opening(), BlindingSource(b"z"))
    assert w == prior.weights and trace.final_commitment.weights == prior.weights
    w1, t1 = fine_tune(ds, spec, prior.root, prior.opening(), BlindingSource(b"x"))
    w2, _ = train(ds, spec, prior.weights, BlindingSource(b"y"))
    assert w1 == w2
    assert verify_training(prove_training(t1, ds, spec, 3), ds.root, spec, init_root=prior.root)
    bad = WeightsOpening(prior.weights, (bytes(32),) + prior.opening().blindings[1:])
    with pytest.raises(InvalidPriorOpening):
        fine_tune(ds, spec, prior.root, bad)


def test_unlearning_exact_and_verified():
    ds, spec = _setup(T=8, n=20)
    init = WeightsCommitment.commit(ModelWeights.zeros(spec.d), BlindingSource(b"i"))
    victim = ds.leaves[3]
    res = unlearn(ds, victim, spec, init, 4, BlindingSource(b"u"), audit=True)
    # independent fresh train on D minus x
    keep = [k for k in range(len(ds)) if ds.leaves[k] != victim]
    fresh_ds = DatasetCommitment.build([ds.records[k] for k in keep], [ds.blindings[k] for k in keep])
    fresh_w, _ = train(fresh_ds, spec, ModelWeights.zeros(spec.d), BlindingSource(b"other"))
    assert res.weights == fresh_w and fresh_ds.root == res.dataset.root
    proof = UnlearningProof.from_bytes(res.proof.to_bytes())
    assert verify_unlearning(proof, ds.root, res.dataset.root, spec, init.root, res.trace.final_commitment.root)
    assert non_membership_verify(res.dataset.root, proof.non_membership)
    assert merkle_verify(ds.root, victim, proof.membership)
    assert not merkle_verify(res.dataset.root, victim, proof.membership)
    for i in range(len(res.dataset)):
        assert not merkle_verify(res.dataset.root, victim, merkle_prove(res.dataset.tree, i))


def test_unlearning_rejections():
    ds, spec = _setup(T=6, n=12)
    init = WeightsCommitment.commit(ModelWeights.zeros(spec.d), BlindingSource(b"i"))
    with pytest.raises(RecordNotFound):
        unlearn(ds, b"\x42" * 32, spec, init, 2)
    res = unlearn(ds, ds.leaves[0], spec, init, 3, BlindingSource(b"u"))
    p = res.proof
    assert verify_unlearning(p, ds.root, res.dataset.root, spec, init.root)
    # non-membership aimed at a different digest
    other = unlearn(ds, ds.leaves[5], spec, init, 3, BlindingSource(b"v"))
    assert not verify_unlearning(replace(p, non_membership=other.proof.non_membership), ds.root,
                                 res.dataset.root, spec)
    # retraining proof over the old dataset smuggled in
    _, old_trace = train(ds, spec, init, BlindingSource(b"w"))
    smuggled = replace(p, retraining=prove_training(old_trace, ds, spec, 3))
    assert not verify_unlearning(smuggled, ds.root, res.dataset.root, spec)
    assert not verify_unlearning(p, ds.root, ds.root, spec)
