"""Mixed linear complementarity problems and a Lemke pivoting solver.

The problem is ``w = M z + b`` where every index ``i`` is either

* complementary: ``0 <= w[i]``, ``0 <= z[i]``, ``w[i] * z[i] = 0``, or
* free: ``w[i] = 0`` with ``z[i]`` unrestricted.

Free indices are removed by a principal pivot on a block that contains them
(plus, when a free row has a zero diagonal, one coupled complementary index
per free index).  The remaining pure LCP is solved by Lemke's method with the
covering vector ``e = (1, ..., 1)`` and lexicographic ratio tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import (
    DimensionMismatch,
    PivotLimitExceeded,
    RayTermination,
    SingularFreeBlock,
    ToleranceNotMet,
)

DEFAULT_TOL = 1e-8


@dataclass(frozen=True)
class Mlcp:
    m: np.ndarray
    b: np.ndarray
    free: frozenset[int] = field(default_factory=frozenset)
    labels: tuple[Hashable, ...] | None = None

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        b = np.array(self.b, dtype=float).reshape(-1)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionMismatch(f"matrix must be square, got shape {m.shape}")
        if b.shape[0] != m.shape[0]:
            raise DimensionMismatch(
                f"vector has length {b.shape[0]} but matrix has dimension {m.shape[0]}"
            )
        free = frozenset(int(i) for i in self.free)
        if any(i < 0 or i >= m.shape[0] for i in free):
            raise DimensionMismatch("free index out of range")
        if self.labels is not None and len(self.labels) > m.shape[0]:
            raise DimensionMismatch("more labels than variables")
        m.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "free", free)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @cached_property
    def index(self) -> dict[Hashable, int]:
        """Label -> position lookup (empty when unlabeled)."""
        if self.labels is None:
            return {}
        return {label: i for i, label in enumerate(self.labels)}


@dataclass(frozen=True)
class LcpSolution:
    z: np.ndarray
    w: np.ndarray
    residual: float
    pivots: int


def residual(problem: Mlcp, z: Sequence[float]) -> float:
    """Largest complementarity violation of ``z`` (see module docstring)."""
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != problem.dim:
        raise DimensionMismatch(f"z has length {z.shape[0]}, problem has {problem.dim}")
    if problem.dim == 0:
        return 0.0
    w = problem.m @ z + problem.b
    viol = np.maximum(np.maximum(-z, -w), np.abs(z * w))
    if problem.free:
        idx = np.fromiter(problem.free, dtype=int)
        viol[idx] = np.abs(w[idx])
    return float(viol.max())


def solve_mlcp(problem: Mlcp, tol: float = DEFAULT_TOL, max_pivots: int | None = None) -> LcpSolution:
    if tol <= 0:
        raise ValueError("tol must be positive")
    d = problem.dim
    if d == 0:
        return LcpSolution(np.zeros(0), np.zeros(0), 0.0, 0)
    m, b = problem.m, problem.b
    free = np.array(sorted(problem.free), dtype=int)

    if free.size == 0:
        z, pivots = _lemke(m, b, max_pivots)
    else:
        msp = sparse.csr_matrix(m)
        try:
            block = _pair_block(msp, free)
            mt, bt = _principal_pivot_sparse(msp, b, block)
        except SingularFreeBlock:
            block = _pivot_block(m, free)
            mt, bt = _principal_pivot_sparse(msp, b, block)
        is_free = np.zeros(d, dtype=bool)
        is_free[free] = True
        swapped = np.zeros(d, dtype=bool)
        swapped[block] = True
        swapped &= ~is_free
        keep = np.flatnonzero(~is_free)

        mt_keep = mt[:, keep]
        zt_keep, pivots = _lemke(mt_keep[keep, :], bt[keep], max_pivots)
        # w~ over every index; on free rows it is the free variable itself
        wt = mt_keep @ zt_keep + bt
        z = np.empty(d)
        z[keep] = zt_keep
        z[swapped] = wt[swapped]
        z[free] = wt[free]

    w = m @ z + b
    res = residual(problem, z)
    if res > tol:
        raise ToleranceNotMet(f"complementarity residual {res:.3e} exceeds tol {tol:.1e}", res)
    return LcpSolution(z=z, w=w, residual=res, pivots=pivots)


# --- free-variable elimination ---------------------------------------------

def principal_pivot(m: np.ndarray, b: np.ndarray, block: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Principal pivot transform of ``(m, b)`` on ``block``.

    The roles of ``w[i]`` and ``z[i]`` are exchanged for every ``i`` in the
    block; the transformed system has the same solution set up to that
    exchange.
    """
    block = np.asarray(block, dtype=int)
    d = m.shape[0]
    rest = np.setdiff1d(np.arange(d), block)
    a = m[np.ix_(block, block)]
    try:
        a_inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise SingularFreeBlock("pivot block is singular") from exc
    m_sr = m[np.ix_(block, rest)]
    m_rs = m[np.ix_(rest, block)]
    rs_ainv = m_rs @ a_inv

    mt = np.empty_like(m)
    bt = np.empty_like(b)
    mt[np.ix_(block, block)] = a_inv
    mt[np.ix_(block, rest)] = -a_inv @ m_sr
    mt[np.ix_(rest, block)] = rs_ainv
    mt[np.ix_(rest, rest)] = m[np.ix_(rest, rest)] - rs_ainv @ m_sr
    bt[block] = -a_inv @ b[block]
    bt[rest] = b[rest] - rs_ainv @ b[block]
    return mt, bt


def _principal_pivot_sparse(m: sparse.csr_matrix, b: np.ndarray, block: Sequence[int], max_cond: float = 1e12):
    """Sparse counterpart of ``principal_pivot``; rejects ill-conditioned blocks."""
    block = np.asarray(block, dtype=int)
    d = m.shape[0]
    rest = np.setdiff1d(np.arange(d), block)
    a = m[block][:, block].toarray()
    try:
        a_inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise SingularFreeBlock("pivot block is singular") from exc
    if np.abs(a).sum(axis=0).max() * np.abs(a_inv).sum(axis=0).max() > max_cond:
        raise SingularFreeBlock("pivot block is numerically singular")
    a_inv_sp = sparse.csr_matrix(a_inv)
    m_sr = m[block][:, rest]
    m_rs = m[rest][:, block]
    rs_ainv = m_rs @ a_inv_sp

    # assemble in the block/rest ordering, then permute back
    top = sparse.hstack([a_inv_sp, -(a_inv_sp @ m_sr)])
    bottom = sparse.hstack([rs_ainv, m[rest][:, rest] - rs_ainv @ m_sr])
    perm = np.concatenate([block, rest])
    inv_perm = np.empty(d, dtype=int)
    inv_perm[perm] = np.arange(d)
    mt = sparse.vstack([top, bottom]).tocsr()[inv_perm][:, inv_perm]
    bt = np.empty(d)
    bt[block] = -a_inv @ b[block]
    bt[rest] = b[rest] - rs_ainv @ b[block]
    return mt.tocsr(), bt


def _pair_block(m: sparse.csr_matrix, free: np.ndarray, rel_tol: float = 1e-9) -> list[int]:
    """Cheap block choice read off the original matrix.

    A free index with a usable diagonal pivots alone; otherwise it is paired
    with the unused coupled index of largest 2x2 determinant. The caller
    checks that the resulting block is well conditioned.
    """
    mc = m.tocsc()
    diag = m.diagonal()
    used = np.zeros(m.shape[0], dtype=bool)
    used[free] = True
    block = []
    for k in free:
        row = m.getrow(k)
        col = mc.getcol(k)
        scale = max(1.0, np.abs(row.data).max(initial=0.0), np.abs(col.data).max(initial=0.0))
        if abs(diag[k]) > rel_tol * scale:
            block.append(int(k))
            continue
        r = dict(zip(row.indices.tolist(), row.data.tolist()))
        best, best_det = -1, rel_tol * scale * scale
        for j, c in zip(col.indices.tolist(), col.data.tolist()):
            if used[j] or j not in r:
                continue
            det = abs(diag[k] * diag[j] - r[j] * c)
            if det > best_det:
                best, best_det = j, det
        if best < 0:
            raise SingularFreeBlock(f"free variable {int(k)} has no partner")
        used[best] = True
        block += [int(k), best]
    return sorted(block)


def _pivot_block(m: np.ndarray, free: np.ndarray, rel_tol: float = 1e-9) -> list[int]:
    """Greedy choice of a nonsingular principal block covering every free index.

    Each free index is pivoted on its own diagonal when that entry is usable;
    otherwise it is paired with the coupled index giving the largest 2x2
    determinant. Only the one-hop neighbourhood of the free set can take
    part, so the search runs on that principal submatrix.
    """
    touched = set(free.tolist())
    for k in free:
        touched.update(np.flatnonzero(m[k]).tolist())
        touched.update(np.flatnonzero(m[:, k]).tolist())
    hood = np.array(sorted(touched), dtype=int)
    pos = {int(u): i for i, u in enumerate(hood)}
    work = m[np.ix_(hood, hood)].copy()
    used = np.zeros(hood.size, dtype=bool)

    for k in free:
        i = pos[int(k)]
        if used[i]:
            continue
        scale = max(1.0, np.abs(work[i]).max(), np.abs(work[:, i]).max())
        if abs(work[i, i]) > rel_tol * scale:
            pair = [i]
        else:
            det = work[i, i] * np.diag(work) - work[i, :] * work[:, i]
            det = np.abs(det)
            det[used] = 0.0
            det[i] = 0.0
            j = int(np.argmax(det))
            if det[j] <= rel_tol * scale * scale:
                raise SingularFreeBlock(f"free variable {int(k)} cannot be eliminated")
            pair = [i, j]
        work, _ = principal_pivot(work, np.zeros(hood.size), pair)
        used[pair] = True
    return sorted(int(u) for u in hood[used])


# --- Lemke ------------------------------------------------------------------

_REFACTOR_EVERY = 64


def _lemke(m, q: np.ndarray, max_pivots: int | None = None) -> tuple[np.ndarray, int]:
    """Solve ``w = m z + q``, ``0 <= w ⊥ z >= 0``; returns ``(z, pivots)``.

    Revised form: the basis is held as a sparse LU factorisation plus a
    short list of eta updates, refactorised every few dozen pivots.
    Variables are numbered ``w_i -> i``, ``z_i -> n + i``, artificial
    ``z0 -> 2n``.
    """
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    if n == 0:
        return np.zeros(0), 0
    if q.min() >= 0.0:
        return np.zeros(n), 0
    if max_pivots is None:
        max_pivots = 100 * (n + 1)
    m = sparse.csc_matrix(m)
    m.sort_indices()
    indptr, indices, data = m.indptr, m.indices, m.data

    artificial = 2 * n
    basis = np.arange(n)
    state = {"lu": None, "etas": []}
    x = q.copy()

    def raw_column(v: int) -> np.ndarray:
        a = np.zeros(n)
        if v < n:
            a[v] = 1.0
        elif v < 2 * n:
            lo, hi = indptr[v - n], indptr[v - n + 1]
            a[indices[lo:hi]] = -data[lo:hi]
        else:
            a[:] = -1.0
        return a

    def ftran(a: np.ndarray) -> np.ndarray:
        y = state["lu"].solve(a) if state["lu"] is not None else a.copy()
        for r, d in state["etas"]:
            yr = y[r] / d[r]
            y -= d * yr
            y[r] = yr
        return y

    def btran_row(r: int) -> np.ndarray:
        """Row ``r`` of the current basis inverse."""
        y = np.zeros(n)
        y[r] = 1.0
        for k, d in reversed(state["etas"]):
            # the transposed eta only changes component k
            y[k] = (y[k] * (1.0 + d[k]) - d @ y) / d[k]
        return state["lu"].solve(y, trans="T") if state["lu"] is not None else y

    def basis_matrix() -> sparse.csc_matrix:
        rows, vals, ptr = [], [], [0]
        for v in basis:
            if v < n:
                rows.append(np.array([v]))
                vals.append(np.array([1.0]))
            elif v < 2 * n:
                lo, hi = indptr[v - n], indptr[v - n + 1]
                rows.append(indices[lo:hi])
                vals.append(-data[lo:hi])
            else:
                rows.append(np.arange(n))
                vals.append(-np.ones(n))
            ptr.append(ptr[-1] + rows[-1].size)
        return sparse.csc_matrix(
            (np.concatenate(vals), np.concatenate(rows), np.array(ptr)), shape=(n, n)
        )

    def refactor() -> sparse.csc_matrix:
        bmat = basis_matrix()
        try:
            state["lu"] = splu(bmat, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise ToleranceNotMet(f"basis became singular: {exc}", float("inf")) from exc
        state["etas"] = []
        x[:] = state["lu"].solve(q)
        return bmat

    def pivot(r: int, d: np.ndarray) -> None:
        xr = x[r] / d[r]
        x[:] -= d * xr
        x[r] = xr
        state["etas"].append((r, d))

    # z0 enters; the lexicographically smallest row (q_r, e_r) leaves, which
    # among tied minima is the one with the largest index.
    qmin = q.min()
    ties = np.flatnonzero(q <= qmin + 1e-12 * max(1.0, abs(qmin)))
    r = int(ties[-1])
    pivot(r, ftran(raw_column(artificial)))
    leaving = int(basis[r])
    basis[r] = artificial
    entering = leaving + n
    pivots = 1

    while True:
        if pivots >= max_pivots:
            raise PivotLimitExceeded(f"no solution after {pivots} pivots")
        if len(state["etas"]) >= _REFACTOR_EVERY:
            refactor()
        d = ftran(raw_column(entering))
        dmax = np.abs(d).max()
        cand = np.flatnonzero(d > 1e-11 * max(1.0, dmax))
        if cand.size == 0:
            raise RayTermination(f"secondary ray after {pivots} pivots")
        ratios = np.maximum(x[cand], 0.0) / d[cand]
        theta = ratios.min()
        tied = cand[ratios <= theta + 1e-11 * max(1.0, theta)]
        art_row = np.flatnonzero(basis[tied] == artificial)
        if art_row.size:
            r = int(tied[art_row[0]])
        elif tied.size == 1:
            r = int(tied[0])
        else:
            r = _lexico_min(btran_row, d, tied)
        pivot(r, d)
        pivots += 1
        leaving = int(basis[r])
        basis[r] = entering
        if leaving == artificial:
            break
        entering = leaving + n if leaving < n else leaving - n

    # fresh factorisation of the final basis, then two refinement rounds
    bmat = refactor()
    for _ in range(2):
        x += state["lu"].solve(q - bmat @ x)
    z = np.zeros(n)
    is_z = (basis >= n) & (basis < 2 * n)
    z[basis[is_z] - n] = x[is_z]
    return z, pivots


def _lexico_min(btran_row, d: np.ndarray, tied: np.ndarray) -> int:
    """Among tied rows, the one whose row of ``B^-1`` divided by ``d`` is lexicographically least."""
    rows = np.array([btran_row(int(r)) / d[r] for r in tied])
    alive = np.arange(tied.size)
    for k in range(rows.shape[1]):
        vals = rows[alive, k]
        low = vals.min()
        alive = alive[vals <= low + 1e-12 * max(1.0, abs(low))]
        if alive.size == 1:
            break
    return int(tied[alive[0]])
