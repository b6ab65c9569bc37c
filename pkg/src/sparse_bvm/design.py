"""Grouped design matrices, supports and design-side constants.

Supports are represented as sorted tuples of 0-based group indices.  The
natural tuple ordering of Python is the lexicographic order used everywhere
in the package, and every enumeration below is produced in that order.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

Support = tuple  # tuple[int, ...], strictly increasing, 0-based

DEFAULT_ENUMERATION_CAP = 2_000_000


class EnumerationBudgetError(RuntimeError):
    """Raised when a support enumeration would exceed the configured cap."""


class SingularBlockError(np.linalg.LinAlgError):
    def __init__(self, support, what="Fisher block"):
        super().__init__(f"{what} is not positive definite on support {tuple(support)}")
        self.support = tuple(support)


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("SPARSE_BVM_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(func, items: Sequence, threads: int | None = None) -> list:
    """Order-preserving map, threaded when ``SPARSE_BVM_THREADS`` > 1."""
    threads = n_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [func(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(func, items))


def count_supports(G: int, s_max: int, exact_size: bool = False) -> int:
    s_max = min(s_max, G)
    if exact_size:
        return math.comb(G, s_max)
    return sum(math.comb(G, k) for k in range(s_max + 1))


def iter_supports(G: int, s_max: int) -> Iterator[Support]:
    """All supports with at most ``s_max`` groups, in lexicographic order."""
    s_max = min(s_max, G)

    def rec(prefix, start):
        yield prefix
        if len(prefix) == s_max:
            return
        for g in range(start, G):
            yield from rec(prefix + (g,), g + 1)

    yield from rec((), 0)


def enumerate_supports(G: int, s_max: int, cap: int = DEFAULT_ENUMERATION_CAP,
                       exact_size: bool = False) -> list[Support]:
    total = count_supports(G, s_max, exact_size)
    if total > cap:
        raise EnumerationBudgetError(
            f"{total} supports exceed the enumeration cap {cap} (G={G}, s={s_max})")
    if exact_size:
        return list(itertools.combinations(range(G), min(s_max, G)))
    return list(iter_supports(G, s_max))


def supersets_of(base: Support, G: int, max_size: int,
                 cap: int = DEFAULT_ENUMERATION_CAP) -> list[Support]:
    """Supports ``S`` with ``base`` contained in ``S`` and ``|S| <= max_size``."""
    base = tuple(sorted(base))
    rest = [g for g in range(G) if g not in base]
    extra = max(0, min(max_size, G) - len(base))
    total = sum(math.comb(len(rest), k) for k in range(extra + 1))
    if total > cap:
        raise EnumerationBudgetError(f"{total} supersets exceed the cap {cap}")
    out = []
    for k in range(extra + 1):
        for add in itertools.combinations(rest, k):
            out.append(tuple(sorted(base + add)))
    out.sort()
    return out


@dataclass(frozen=True)
class PaddedVector:
    """Block values on a support; ``values`` are concatenated group blocks."""

    support: Support
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(int(g) for g in self.support))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).ravel())


class GroupedDesign:
    """An ``n x p`` matrix with a contiguous partition of its columns into groups."""

    def __init__(self, x, group_sizes: Sequence[int]):
        x = np.array(x, dtype=float, copy=True)
        if x.ndim != 2:
            raise ValueError("design must be a 2-d array")
        sizes = [int(m) for m in group_sizes]
        if not sizes or any(m < 1 for m in sizes):
            raise ValueError("group sizes must be positive integers")
        if sum(sizes) != x.shape[1]:
            raise ValueError(f"group sizes sum to {sum(sizes)} but design has {x.shape[1]} columns")
        if x.shape[0] < 1:
            raise ValueError("design needs at least one row")
        if not np.all(np.isfinite(x)):
            raise ValueError("design entries must be finite")
        x.setflags(write=False)
        self.x = x
        self.group_sizes = tuple(sizes)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def G(self) -> int:
        return len(self.group_sizes)

    def __eq__(self, other):
        return (isinstance(other, GroupedDesign) and self.group_sizes == other.group_sizes
                and np.array_equal(self.x, other.x))

    def check_support(self, support) -> Support:
        s = tuple(int(g) for g in support)
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"support {s} must be strictly increasing")
        if s and (s[0] < 0 or s[-1] >= self.G):
            raise ValueError(f"support {s} has groups outside 0..{self.G - 1}")
        return s

    def p_support(self, support) -> int:
        return sum(self.group_sizes[g] for g in support)

    def columns(self, support) -> np.ndarray:
        support = self.check_support(support)
        if not support:
            return np.zeros(0, dtype=int)
        return np.concatenate([np.arange(self.offsets[g], self.offsets[g + 1]) for g in support])

    def block_slices(self, support) -> list[slice]:
        """Slices of each group's block inside the concatenated support vector."""
        out, pos = [], 0
        for g in support:
            m = self.group_sizes[g]
            out.append(slice(pos, pos + m))
            pos += m
        return out

    def sub(self, support) -> np.ndarray:
        return self.x[:, self.columns(support)]

    def embed(self, v: PaddedVector) -> np.ndarray:
        cols = self.columns(v.support)
        if v.values.size != cols.size:
            raise ValueError(f"block length {v.values.size} does not match p_S={cols.size}")
        out = np.zeros(self.p)
        out[cols] = v.values
        return out

    def restrict(self, beta, support) -> PaddedVector:
        beta = np.asarray(beta, dtype=float).ravel()
        if beta.size != self.p:
            raise ValueError(f"ambient vector has length {beta.size}, expected {self.p}")
        support = self.check_support(support)
        return PaddedVector(support, beta[self.columns(support)])

    def group_norms(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return np.array([np.linalg.norm(beta[self.offsets[g]:self.offsets[g + 1]])
                         for g in range(self.G)])

    def support_of(self, beta, tol: float = 0.0) -> Support:
        """Groups of ``beta`` with a nonzero block (``S_beta``)."""
        return tuple(int(g) for g in np.flatnonzero(self.group_norms(beta) > tol))

    def row_block_sq_norms(self) -> np.ndarray:
        """``n x G`` matrix of squared row-block norms."""
        sq = self.x**2
        return np.add.reduceat(sq, self.offsets[:-1], axis=1)


# ---------------------------------------------------------------------------
# design constants
# ---------------------------------------------------------------------------

def sparse_row_envelope(design: GroupedDesign, s: int) -> float:
    """Largest row norm restricted to at most ``s`` groups."""
    if not 1 <= s:
        raise ValueError("s must be at least 1")
    s = min(s, design.G)
    blocks = np.sort(design.row_block_sq_norms(), axis=1)[:, ::-1]
    return float(math.sqrt(blocks[:, :s].sum(axis=1).max()))


def weighted_gram(design: GroupedDesign, weights=None) -> np.ndarray:
    """``X^T W X`` (not scaled by ``n``)."""
    if weights is None:
        return design.x.T @ design.x
    w = np.asarray(weights, dtype=float)
    if w.shape != (design.n,):
        raise ValueError("weights must have length n")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return design.x.T @ (w[:, None] * design.x)


def _support_batches(design: GroupedDesign, s: int, cap: int):
    """Supports of exact size ``min(s, G)`` grouped by ``p_S`` as index arrays."""
    s = min(s, design.G)
    supports = enumerate_supports(design.G, s, cap=cap, exact_size=True)
    by_dim: dict[int, list] = {}
    for sup in supports:
        by_dim.setdefault(design.p_support(sup), []).append(sup)
    for dim, sups in sorted(by_dim.items()):
        idx = np.stack([design.columns(t) for t in sups])
        yield sups, idx


def _chunked(arr_len, size=4096):
    for start in range(0, arr_len, size):
        yield slice(start, min(arr_len, start + size))


def _sub_grams(F, idx):
    return F[idx[:, :, None], idx[:, None, :]]


def sparse_gram_extremes(design: GroupedDesign, weights=None, s: int = 1,
                         cap: int = DEFAULT_ENUMERATION_CAP) -> tuple[float, float]:
    """Minimum and maximum eigenvalue of ``F_T / n`` over ``|T| <= s``."""
    F = weighted_gram(design, weights) / design.n
    lo, hi = math.inf, -math.inf
    for _, idx in _support_batches(design, s, cap):
        for sl in _chunked(len(idx)):
            ev = np.linalg.eigvalsh(_sub_grams(F, idx[sl]))
            lo = min(lo, float(ev[:, 0].min()))
            hi = max(hi, float(ev[:, -1].max()))
    return lo, hi


def compatibility_phi2(design: GroupedDesign, weights=None, s: int = 1,
                       cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """``min_T sqrt(lambda_min(F_T/n))``; eigenvalue interlacing lets us scan ``|T| = s``."""
    lo, _ = sparse_gram_extremes(design, weights, s, cap)
    return math.sqrt(max(lo, 0.0))


def compatibility_phi2_argmin(design: GroupedDesign, weights=None, s: int = 1,
                              cap: int = DEFAULT_ENUMERATION_CAP) -> tuple[float, Support]:
    F = weighted_gram(design, weights) / design.n
    best, arg = math.inf, ()
    for sups, idx in _support_batches(design, s, cap):
        for sl in _chunked(len(idx)):
            ev = np.linalg.eigvalsh(_sub_grams(F, idx[sl]))[:, 0]
            k = int(np.argmin(ev))
            if ev[k] < best:
                best, arg = float(ev[k]), sups[sl][k]
    return math.sqrt(max(best, 0.0)), arg


@dataclass
class Phi1Result:
    value: float
    certificate: str  # "exact" (singleton groups) or "heuristic"
    argmin_support: Support
    direction: np.ndarray = field(repr=False)


def _max_block_quadratic(B: np.ndarray, blocks: list[slice], restarts: int,
                         rng: np.random.Generator, tol: float = 1e-10,
                         max_iter: int = 2000) -> tuple[float, np.ndarray, bool]:
    """``max u^T B u`` over ``||u_g|| <= 1`` for every block.

    Returns the value, maximizer and whether the answer is certified exact.
    """
    k = len(blocks)
    if all(sl.stop - sl.start == 1 for sl in blocks):
        # convex maximization over a cube: the optimum is a sign vertex
        if k <= 20:
            signs = np.array(list(itertools.product((1.0, -1.0), repeat=k - 1)))
            signs = np.hstack([np.ones((len(signs), 1)), signs]) if k > 1 else np.ones((1, 1))
            vals = np.einsum("ij,jk,ik->i", signs, B, signs)
            j = int(np.argmax(vals))
            return float(vals[j]), signs[j], True
    dim = B.shape[0]
    best, best_u = -math.inf, None
    starts = [np.ones(dim)] + [rng.standard_normal(dim) for _ in range(restarts - 1)]
    for u in starts:
        for sl in blocks:
            nrm = np.linalg.norm(u[sl])
            u[sl] = u[sl] / nrm if nrm > 0 else 1.0 / math.sqrt(sl.stop - sl.start)
        val = u @ B @ u
        for _ in range(max_iter):
            v = B @ u
            new = np.empty_like(u)
            for sl in blocks:
                nrm = np.linalg.norm(v[sl])
                new[sl] = v[sl] / nrm if nrm > 0 else u[sl]
            new_val = new @ B @ new
            u = new
            if new_val - val <= tol * max(1.0, abs(new_val)):
                val = max(val, new_val)
                break
            val = new_val
        if val > best:
            best, best_u = val, u.copy()
    return float(best), best_u, False


def compatibility_phi1(design: GroupedDesign, weights=None, s: int = 1,
                       restarts: int = 64, seed: int = 0,
                       cap: int = DEFAULT_ENUMERATION_CAP) -> Phi1Result:
    """``min sqrt(s) ||F^{1/2} d|| / (sqrt(n) ||d||_{2,1})`` over ``s``-group-sparse ``d``.

    Per support, ``min d^T A d`` on the unit ``l_{2,1}`` sphere equals
    ``1 / max u^T A^{-1} u`` over block-unit ``u`` (a dual norm argument).
    The inner maximization is solved exactly for singleton groups by sign
    enumeration and by block power ascent with restarts otherwise.
    """
    s_eff = min(s, design.G)
    A_full = weighted_gram(design, weights) / design.n
    rng = np.random.default_rng(seed)
    best, arg, direction, exact = math.inf, (), np.zeros(0), True
    for sup in enumerate_supports(design.G, s_eff, cap=cap, exact_size=True):
        cols = design.columns(sup)
        A = A_full[np.ix_(cols, cols)]
        blocks = design.block_slices(sup)
        ev = np.linalg.eigvalsh(A)
        if ev[0] <= 1e-14 * max(1.0, ev[-1]):
            best, arg = 0.0, sup
            direction = np.linalg.eigh(A)[1][:, 0]
            break
        Ainv = np.linalg.inv(A)
        Ainv = 0.5 * (Ainv + Ainv.T)
        mx, u, certified = _max_block_quadratic(Ainv, blocks, restarts, rng)
        exact = exact and certified
        val = 1.0 / mx
        if val < best:
            d = Ainv @ u
            d /= sum(np.linalg.norm(d[sl]) for sl in blocks)
            best, arg, direction = val, sup, d
    # phi1 uses s itself in the numerator factor
    return Phi1Result(math.sqrt(s * best), "exact" if exact else "heuristic", arg, direction)


def sparse_influence_leverage(design: GroupedDesign, weights=None, s: int = 1,
                              cap: int = DEFAULT_ENUMERATION_CAP) -> tuple[float, float]:
    """``(q_star, l_star)``: sparse unweighted influence and weighted leverage.

    ``F_T = X_T^T W X_T`` (unscaled).  Both suprema are attained at ``|T| = s``
    since leverages only grow when columns are added.
    """
    w = np.ones(design.n) if weights is None else np.asarray(weights, dtype=float)
    F = weighted_gram(design, w)
    q2, lev = 0.0, 0.0
    x = design.x
    for sups, idx in _support_batches(design, s, cap):
        for sl in _chunked(len(idx), 256):
            Fs = _sub_grams(F, idx[sl])
            try:
                L = np.linalg.cholesky(Fs)
            except np.linalg.LinAlgError:
                for k, t in enumerate(sups[sl]):
                    try:
                        np.linalg.cholesky(Fs[k])
                    except np.linalg.LinAlgError:
                        raise SingularBlockError(t) from None
                raise
            Xs = x[:, idx[sl]].transpose(1, 2, 0)  # batch x p_T x n
            Z = np.linalg.solve(L, Xs)
            h = np.einsum("bkn,bkn->bn", Z, Z)
            q2 = max(q2, float(h.max()))
            lev = max(lev, float((h * w[None, :]).max()))
    return math.sqrt(q2), lev


# ---------------------------------------------------------------------------
# CSV io
# ---------------------------------------------------------------------------

def write_design_csv(design: GroupedDesign, path, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("group_sizes: " + ",".join(str(m) for m in design.group_sizes) + "\n")
        for row in design.x:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def read_design_csv(path) -> GroupedDesign:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        while header.startswith("#"):
            header = fh.readline().strip()
        if not header.startswith("group_sizes:"):
            raise ValueError(f"{path}: first line must be 'group_sizes: m1,m2,...'")
        try:
            sizes = [int(v) for v in header.split(":", 1)[1].split(",") if v.strip()]
        except ValueError:
            raise ValueError(f"{path}: malformed group_sizes header") from None
        rows = [list(map(float, line.split(","))) for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: ragged rows")
    return GroupedDesign(np.array(rows), sizes)


def iter_sparse_directions(design: GroupedDesign, s: int, count: int,
                           rng: np.random.Generator) -> Iterable[np.ndarray]:
    """Random ambient vectors supported on at most ``s`` groups."""
    for _ in range(count):
        k = int(rng.integers(1, min(s, design.G) + 1))
        sup = tuple(sorted(rng.choice(design.G, size=k, replace=False).tolist()))
        d = np.zeros(design.p)
        cols = design.columns(sup)
        d[cols] = rng.standard_normal(cols.size)
        yield d
