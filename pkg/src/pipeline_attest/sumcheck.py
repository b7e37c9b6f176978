"""Sum-check over products of two multilinear polynomials, and a matrix-product check built on it.

Evaluation tables are indexed so that bit ``i`` of the index is variable
``i``; rounds bind variable 0 first.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Sequence

from .codec import Reader, Writer
from .commit import Transcript
from .errors import DimensionMismatch
from .field import P, FieldElement


def _ints(values) -> list[int]:
    return [v.value if isinstance(v, FieldElement) else int(v) % P for v in values]


@dataclass(frozen=True)
class MultilinearPoly:
    num_vars: int
    evaluations: tuple[int, ...]

    def __post_init__(self):
        if len(self.evaluations) != 1 << self.num_vars:
            raise DimensionMismatch(f"need 2^{self.num_vars} evaluations, got {len(self.evaluations)}")

    @classmethod
    def from_evals(cls, evals: Sequence) -> "MultilinearPoly":
        vals = _ints(evals)
        m = max(len(vals) - 1, 0).bit_length()
        return cls(m, tuple(vals))


def _fold(vals: list[int], r: int) -> list[int]:
    return [(a + r * (b - a)) % P for a, b in zip(vals[0::2], vals[1::2])]


def mle_eval(poly: MultilinearPoly, point: Sequence) -> FieldElement:
    if len(point) != poly.num_vars:
        raise DimensionMismatch(f"point has {len(point)} coordinates, polynomial has {poly.num_vars} variables")
    vals = list(poly.evaluations)
    for r in _ints(point):
        vals = _fold(vals, r)
    return FieldElement(vals[0])


def eq_weights(point: Sequence[int]) -> list[int]:
    """eq(point, b) for every hypercube index b (bit j of b pairs with point[j])."""
    w = [1]
    for r in point:
        w = [x * (1 - r) % P for x in w] + [x * r % P for x in w]
    return w


@dataclass(frozen=True)
class SumcheckProof:
    claimed_sum: int
    rounds: tuple[tuple[int, int, int], ...]  # coefficients (c0, c1, c2) of each round polynomial
    final_point: tuple[int, ...]

    def to_bytes(self) -> bytes:
        w = Writer().fe(self.claimed_sum).u32(len(self.rounds))
        for coeffs in self.rounds:
            for c in coeffs:
                w.fe(c)
        for r in self.final_point:
            w.fe(r)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SumcheckProof":
        rd = Reader(data)
        claimed = rd.fe()
        m = rd.count(64)
        rounds = tuple((rd.fe(), rd.fe(), rd.fe()) for _ in range(m))
        point = tuple(rd.fe() for _ in range(m))
        rd.done()
        return cls(claimed, rounds, point)


def _eval_quadratic(coeffs: tuple[int, int, int], t: int) -> int:
    c0, c1, c2 = coeffs
    return (c0 + t * (c1 + t * c2)) % P


def sumcheck_prove(g: MultilinearPoly, h: MultilinearPoly, transcript: Transcript) -> SumcheckProof:
    """Prove sum over the hypercube of g(x) * h(x)."""
    if g.num_vars != h.num_vars:
        raise DimensionMismatch("g and h must have the same number of variables")
    gv, hv = list(g.evaluations), list(h.evaluations)
    claimed = sum(a * b for a, b in zip(gv, hv)) % P
    transcript.absorb_int("sumcheck/num_vars", g.num_vars).absorb_fes("sumcheck/claim", [claimed])
    rounds, point = [], []
    for i in range(g.num_vars):
        c0 = c1 = c2 = 0
        for g0, g1, h0, h1 in zip(gv[0::2], gv[1::2], hv[0::2], hv[1::2]):
            dg, dh = g1 - g0, h1 - h0
            c0 += g0 * h0
            c1 += g0 * dh + h0 * dg
            c2 += dg * dh
        coeffs = (c0 % P, c1 % P, c2 % P)
        transcript.absorb_fes(f"sumcheck/round/{i}", coeffs)
        r = transcript.challenge_int()
        rounds.append(coeffs)
        point.append(r)
        gv, hv = _fold(gv, r), _fold(hv, r)
    return SumcheckProof(claimed, tuple(rounds), tuple(point))


def sumcheck_verify(claimed_sum, proof: SumcheckProof, final_check: Callable[[list[int]], int],
                    transcript: Transcript) -> bool:
    """``final_check(point)`` must return g(point) * h(point)."""
    claimed = _ints([claimed_sum])[0]
    if proof.claimed_sum != claimed or len(proof.final_point) != len(proof.rounds):
        return False
    m = len(proof.rounds)
    transcript.absorb_int("sumcheck/num_vars", m).absorb_fes("sumcheck/claim", [claimed])
    expected = claimed
    point = []
    for i, coeffs in enumerate(proof.rounds):
        if len(coeffs) != 3:
            return False
        c0, c1, c2 = coeffs
        if (2 * c0 + c1 + c2) % P != expected:
            return False
        transcript.absorb_fes(f"sumcheck/round/{i}", coeffs)
        r = transcript.challenge_int()
        if r != proof.final_point[i]:
            return False
        point.append(r)
        expected = _eval_quadratic(coeffs, r)
    return _ints([final_check(point)])[0] == expected


# --------------------------------------------------------------------------
# matrix products


def _pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (n - 1).bit_length()


def _pad(mat: Sequence[Sequence], rows: int, cols: int) -> list[list[int]]:
    out = [_ints(row) + [0] * (cols - len(row)) for row in mat]
    out.extend([0] * cols for _ in range(rows - len(out)))
    return out


def verify_matmul(A: Sequence[Sequence], B: Sequence[Sequence], C: Sequence[Sequence],
                  transcript: Transcript) -> bool:
    """Check C = A.B over F_p with one sum-check over the shared dimension.

    A is n x k, B is k x m, C is n x m; dimensions are zero-padded to
    powers of two.  The random row/column point comes from the transcript
    after it has absorbed all three matrices.
    """
    n, k = len(A), len(A[0]) if A else 0
    if n == 0 or k == 0 or len(B) != k or any(len(row) != k for row in A):
        raise DimensionMismatch("A must be a non-empty n x k matrix matching B's rows")
    m = len(B[0])
    if any(len(row) != m for row in B) or len(C) != n or any(len(row) != m for row in C):
        raise DimensionMismatch("B must be k x m and C must be n x m")
    n2, k2, m2 = _pow2(n), _pow2(k), _pow2(m)
    a, b, c = _pad(A, n2, k2), _pad(B, k2, m2), _pad(C, n2, m2)

    transcript.absorb_int("matmul/n", n).absorb_int("matmul/k", k).absorb_int("matmul/m", m)
    transcript.absorb_fes("matmul/A", [x for row in a for x in row])
    transcript.absorb_fes("matmul/B", [x for row in b for x in row])
    transcript.absorb_fes("matmul/C", [x for row in c for x in row])
    r_rows = [transcript.challenge_int() for _ in range((n2 - 1).bit_length())]
    r_cols = [transcript.challenge_int() for _ in range((m2 - 1).bit_length())]
    eq_r, eq_c = eq_weights(r_rows), eq_weights(r_cols)

    target = sum(eq_r[i] * sum(eq_c[j] * c[i][j] for j in range(m2)) for i in range(n2)) % P
    g = MultilinearPoly.from_evals([sum(eq_r[i] * a[i][x] for i in range(n2)) % P for x in range(k2)])
    h = MultilinearPoly.from_evals([sum(eq_c[j] * b[x][j] for j in range(m2)) % P for x in range(k2)])

    verifier_t = copy.deepcopy(transcript)
    proof = sumcheck_prove(g, h, transcript)
    return sumcheck_verify(target, proof, lambda pt: mle_eval(g, pt).value * mle_eval(h, pt).value, verifier_t)
