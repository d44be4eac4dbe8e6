"""Gaussian matrix-moment identities with sampling oracles.

All identities take x, x_i ~ N(0, I_n) i.i.d., Q = sum_{i<=N} x_i x_i^T
(equivalently X X^T for an n x N standard normal X), a square matrix B and a
vector b.  Identities 28-30 use orthonormal vectors q_i, q_j drawn uniformly
from the unit sphere.

Each catalog entry pairs an exact right-hand side with a per-draw
evaluator of the random left-hand side; :func:`mc_estimate` averages the
latter and :func:`verify` z-tests the two against each other.
"""

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from . import rng
from .errors import InputError, RegimeError
from .mc import MomentAccumulator, merge, parallel_map, tree_reduce

CHUNK = 20_000
_KIND_CODES = {"x": 1, "Q": 2, "sphere": 3}


@dataclass(frozen=True)
class IdentityContext:
    n: int
    N: int
    B: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n < 1 or self.N < 1:
            raise ValueError("n and N must be >= 1")
        if self.B is not None and np.shape(self.B) != (self.n, self.n):
            raise ValueError(f"B must be {self.n}x{self.n}")
        if self.b is not None and np.shape(self.b) != (self.n,):
            raise ValueError(f"b must have length {self.n}")


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    inputs: frozenset
    output_kind: str
    description: str
    draw_kind: str
    constraint_text: str = "any n, N"
    alias_of: Optional[int] = None
    _constraint: Callable = None
    _analytic: Callable = None
    _sample: Callable = None

    def admits(self, n, N):
        return self._constraint is None or bool(self._constraint(n, N))


# ---------------------------------------------------------------------------
# draws
# ---------------------------------------------------------------------------


def _xbx(x, B):
    return np.einsum("ci,ij,cj->c", x, B, x)


def _tr(M):
    return np.trace(M, axis1=-2, axis2=-1)


def _tr_prod(A, C):
    """Tr[A C] for stacked or broadcast square matrices."""
    return np.einsum("...ij,...ji->...", A, C)


class _GramDraw:
    """One chunk of Q = X X^T draws with lazily computed products."""

    def __init__(self, X):
        self.X = X
        self._cache = {}

    @cached_property
    def Q(self):
        return self.X @ np.swapaxes(self.X, -1, -2)

    @cached_property
    def QQ(self):
        return self.Q @ self.Q

    @cached_property
    def QQQ(self):
        return self.QQ @ self.Q

    @cached_property
    def trQ(self):
        return _tr(self.Q)

    @cached_property
    def inv(self):
        return np.linalg.inv(self.Q)

    def times(self, B, name):
        key = (name, id(B))
        if key not in self._cache:
            self._cache[key] = B @ getattr(self, name)
        return self._cache[key]


class _SphereDraw:
    def __init__(self, g1, g2):
        self.qi = g1 / np.linalg.norm(g1, axis=1, keepdims=True)
        if g1.shape[1] >= 2:
            g2 = g2 - np.sum(self.qi * g2, axis=1, keepdims=True) * self.qi
            self.qj = g2 / np.linalg.norm(g2, axis=1, keepdims=True)
        else:
            self.qj = None


def _draw(kind, n, N, count, g):
    if kind == "x":
        return g.standard_normal((count, n))
    if kind == "Q":
        return _GramDraw(g.standard_normal((count, n, N)))
    return _SphereDraw(g.standard_normal((count, n)), g.standard_normal((count, n)))


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


def _eye(ctx):
    return np.eye(ctx.n)


def _outer(x):
    return x[:, :, None] * x[:, None, :]


def _norm2(b):
    return float(b @ b)


def _trB(ctx):
    return float(np.trace(ctx.B))


def _trB2(ctx):
    return float(np.trace(ctx.B @ ctx.B))


def _invertible_wishart(gap):
    return lambda n, N: N > n + gap


_SYM = frozenset({"B-symmetric"})
_GEN = frozenset({"B-general"})
_VEC = frozenset({"b-vector"})
_SPHERE = frozenset({"b-vector", "sphere-pair"})


def _build_catalog():
    specs = []

    def add(id, inputs, output_kind, draw_kind, description, analytic, sample, **kw):
        specs.append(
            IdentitySpec(
                id=id,
                inputs=frozenset(inputs),
                output_kind=output_kind,
                description=description,
                draw_kind=draw_kind,
                _analytic=analytic,
                _sample=sample,
                **kw,
            )
        )

    add(1, (), "matrix", "x", "E[x x^T x x^T] = (2 + n) I",
        lambda c: (2 + c.n) * _eye(c),
        lambda d, c: np.sum(d * d, 1)[:, None, None] * _outer(d))
    add(2, _GEN, "scalar", "Q", "E[Tr[B Q]] = N Tr[B]",
        lambda c: c.N * _trB(c),
        lambda d, c: _tr_prod(c.B, d.Q))
    add(3, (), "matrix", "x", "E[x x^T x x^T x x^T] = (8 + 6n + n^2) I",
        lambda c: (8 + 6 * c.n + c.n**2) * _eye(c),
        lambda d, c: (np.sum(d * d, 1) ** 2)[:, None, None] * _outer(d))
    add(4, _GEN, "matrix", "x", "E[x x^T B x x^T] = B + B^T + Tr[B] I",
        lambda c: c.B + c.B.T + _trB(c) * _eye(c),
        lambda d, c: _xbx(d, c.B)[:, None, None] * _outer(d))
    add(5, _GEN, "scalar", "x", "E[x^T B x x^T B x] = Tr[B (B + B^T)] + Tr[B]^2",
        lambda c: float(np.trace(c.B @ (c.B + c.B.T))) + _trB(c) ** 2,
        lambda d, c: _xbx(d, c.B) ** 2)
    add(6, (), "scalar", "Q", "E[Tr[Q] Tr[Q]] = N (2n + N n^2)",
        lambda c: c.N * (2 * c.n + c.N * c.n**2),
        lambda d, c: d.trQ**2)
    add(7, (), "scalar", "Q", "E[Tr[Q Q]] = N n (N + n + 1)",
        lambda c: c.N * c.n * (c.N + c.n + 1),
        lambda d, c: np.einsum("cij,cij->c", d.Q, d.Q))
    add(8, (), "scalar", "Q", "E[Tr[(X X^T)^-1]] = n / (N - n - 1)",
        lambda c: c.n / (c.N - c.n - 1),
        lambda d, c: _tr(d.inv),
        constraint_text="N > n + 1", _constraint=_invertible_wishart(1))
    add(9, (), "scalar", "Q",
        "E[Tr[(X X^T)^-2]] = (N - 1) n / ((N - n - 3)(N - n - 1)(N - n))",
        lambda c: (c.N - 1) * c.n / ((c.N - c.n - 3) * (c.N - c.n - 1) * (c.N - c.n)),
        lambda d, c: np.einsum("cij,cji->c", d.inv, d.inv),
        constraint_text="N > n + 3", _constraint=_invertible_wishart(3))
    add(10, (), "scalar", "Q",
        "E[Tr[(X X^T)^-1]^2] = n (n (N - n - 2) + 2) / ((N - n - 3)(N - n - 1)(N - n))",
        lambda c: c.n * (c.n * (c.N - c.n - 2) + 2)
        / ((c.N - c.n - 3) * (c.N - c.n - 1) * (c.N - c.n)),
        lambda d, c: _tr(d.inv) ** 2,
        constraint_text="N > n + 3", _constraint=_invertible_wishart(3))
    add(11, _VEC, "scalar", "x", "E[x^T x b^T x x^T x x^T b] = b^T b (n^2 + 6n + 8)",
        lambda c: _norm2(c.b) * (c.n**2 + 6 * c.n + 8),
        lambda d, c: np.sum(d * d, 1) ** 2 * (d @ c.b) ** 2)

    def id12_lhs(d, c):
        v = d @ c.B.T + c.b
        return np.sum(v * v, 1) ** 2

    def id12_rhs(c):
        S = c.B @ c.B.T
        return float(2 * np.trace(S @ S) + 4 * c.b @ S @ c.b + (np.trace(S) + c.b @ c.b) ** 2)

    add(12, _GEN | _VEC, "scalar", "x",
        "E[((Bx + b)^T (Bx + b))^2] = 2 Tr(B B^T B B^T) + 4 b^T B B^T b + (Tr(B B^T) + b^T b)^2",
        id12_rhs, id12_lhs)

    def id13_rhs(c):
        return _norm2(c.b) * c.N * (1 + c.n + c.N) * (4 + c.n * c.N)

    def id13_lhs(d, c):
        Qb = d.Q @ c.b
        return d.trQ * np.sum(Qb * Qb, 1)

    def id14_rhs(c):
        return c.N * (2 + c.n * c.N) * _norm2(c.b)

    def id14_lhs(d, c):
        return d.trQ * np.einsum("i,cij,j->c", c.b, d.Q, c.b)

    add(13, _VEC, "scalar", "Q", "E[Tr[Q] b^T Q Q b] = b^T b N (1 + n + N)(4 + n N)",
        id13_rhs, id13_lhs)
    add(14, _VEC, "scalar", "Q", "E[Tr[Q] b^T Q b] = b^T b N (2 + n N)", id14_rhs, id14_lhs)
    add(15, (), "matrix", "Q", "E[Q Q Q] = N (4 + n^2 + 3n (1 + N) + N (3 + N)) I",
        lambda c: c.N * (4 + c.n**2 + 3 * c.n * (1 + c.N) + c.N * (3 + c.N)) * _eye(c),
        lambda d, c: d.QQQ)
    add(16, _GEN, "scalar", "Q", "E[Tr[B Q Q]] = Tr[B] N (N + n + 1)",
        lambda c: _trB(c) * c.N * (c.N + c.n + 1),
        lambda d, c: _tr_prod(c.B, d.QQ))
    add(17, _VEC, "scalar", "Q", "E[Tr[Q] b^T Q b] = N (2 + n N) b^T b (repeat of 14)",
        id14_rhs, id14_lhs, alias_of=14)
    add(18, _VEC, "scalar", "Q", "E[Tr[Q] b^T Q Q b] = N (1 + n + N)(4 + n N) b^T b (repeat of 13)",
        id13_rhs, id13_lhs, alias_of=13)
    add(19, _GEN | _VEC, "vector", "x", "E[x^T B x b^T x x^T] = b^T (B + B^T + Tr[B] I)",
        lambda c: c.b @ (c.B + c.B.T + _trB(c) * _eye(c)),
        lambda d, c: (_xbx(d, c.B) * (d @ c.b))[:, None] * d)
    add(20, _SYM, "scalar", "x",
        "E[x^T B x x^T B x x^T x] = (n + 4) Tr[B]^2 + (8 + 2n) Tr[B^2]",
        lambda c: (c.n + 4) * _trB(c) ** 2 + (8 + 2 * c.n) * _trB2(c),
        lambda d, c: _xbx(d, c.B) ** 2 * np.sum(d * d, 1))
    add(21, _SYM, "scalar", "x",
        "E[x^T B x x^T x x^T B x x^T x] = (n^2 + 24 + 10n) Tr[B]^2 + (2n^2 + 20n + 48) Tr[B^2]",
        lambda c: (c.n**2 + 24 + 10 * c.n) * _trB(c) ** 2
        + (2 * c.n**2 + 20 * c.n + 48) * _trB2(c),
        lambda d, c: (_xbx(d, c.B) * np.sum(d * d, 1)) ** 2)
    add(22, _SYM, "scalar", "Q", "E[Tr[B Q B Q]] = N ((N + 1) Tr[B^2] + Tr[B]^2)",
        lambda c: c.N * ((c.N + 1) * _trB2(c) + _trB(c) ** 2),
        lambda d, c: _tr_prod(d.times(c.B, "Q"), d.times(c.B, "Q")))
    add(23, _SYM, "scalar", "Q",
        "E[Tr[B Q B Q Q]] = N ((4 + n + (3 + n) N + N^2) Tr[B^2] + (2 + n + 2N) Tr[B]^2)",
        lambda c: c.N * ((4 + c.n + (3 + c.n) * c.N + c.N**2) * _trB2(c)
                         + (2 + c.n + 2 * c.N) * _trB(c) ** 2),
        lambda d, c: _tr_prod(d.times(c.B, "Q"), d.times(c.B, "QQ")))

    def id24_rhs(c):
        n, N = c.n, c.N
        return N * (
            (20 + n * (11 + n) + 21 * N + n * (7 + n) * N + 2 * (3 + n) * N**2 + N**3) * _trB2(c)
            + (10 + 5 * n + n**2 + 5 * (2 + n) * N + 4 * N**2) * _trB(c) ** 2
        )

    add(24, _SYM, "scalar", "Q", "E[Tr[B Q Q B Q Q]] (quartic in N)", id24_rhs,
        lambda d, c: _tr_prod(d.times(c.B, "QQ"), d.times(c.B, "QQ")))
    add(25, _SYM, "scalar", "Q", "E[Tr[B Q] Tr[B Q]] = (N Tr[B]^2 + 2 Tr[B^2]) N",
        lambda c: (c.N * _trB(c) ** 2 + 2 * _trB2(c)) * c.N,
        lambda d, c: _tr(d.times(c.B, "Q")) ** 2)
    add(26, _SYM, "scalar", "Q",
        "E[Tr[B Q] Tr[B Q Q]] = N (2 (2 + n + 2N) Tr[B^2] + (2 + N (1 + n + N)) Tr[B]^2)",
        lambda c: c.N * (2 * (2 + c.n + 2 * c.N) * _trB2(c)
                         + (2 + c.N * (1 + c.n + c.N)) * _trB(c) ** 2),
        lambda d, c: _tr(d.times(c.B, "Q")) * _tr(d.times(c.B, "QQ")))

    def id27_rhs(c):
        n, N = c.n, c.N
        return N * (
            2 * (10 + 5 * n + n**2 + 5 * (2 + n) * N + 4 * N**2) * _trB2(c)
            + (n**2 * N + 2 * n * (3 + N + N**2) + (1 + N) * (10 + N + N**2)) * _trB(c) ** 2
        )

    add(27, _SYM, "scalar", "Q", "E[Tr[B Q Q] Tr[B Q Q]] (cubic in N)", id27_rhs,
        lambda d, c: _tr(d.times(c.B, "QQ")) ** 2)
    add(28, _SPHERE, "scalar", "sphere", "E[(b^T q_i)^2] = ||b||^2 / n",
        lambda c: _norm2(c.b) / c.n,
        lambda d, c: (d.qi @ c.b) ** 2)
    add(29, _SPHERE, "scalar", "sphere", "E[(b^T q_i)^4] = 3 ||b||^4 / (n (n + 2))",
        lambda c: 3 * _norm2(c.b) ** 2 / (c.n * (c.n + 2)),
        lambda d, c: (d.qi @ c.b) ** 4)
    add(30, _SPHERE, "scalar", "sphere", "E[(b^T q_i)^2 (b^T q_j)^2] = ||b||^4 / (n (n + 2))",
        lambda c: _norm2(c.b) ** 2 / (c.n * (c.n + 2)),
        lambda d, c: (d.qi @ c.b) ** 2 * (d.qj @ c.b) ** 2,
        constraint_text="n >= 2", _constraint=lambda n, N: n >= 2)
    return {s.id: s for s in specs}


_CATALOG = _build_catalog()


def catalog():
    return [_CATALOG[i] for i in sorted(_CATALOG)]


def get(id):
    try:
        return _CATALOG[id]
    except KeyError:
        raise KeyError(f"no identity with id {id!r}") from None


def _check(spec, ctx):
    if not spec.admits(ctx.n, ctx.N):
        raise RegimeError(
            f"identity {spec.id} requires {spec.constraint_text}; got n={ctx.n}, N={ctx.N}"
        )
    needs_B = spec.inputs & {"B-symmetric", "B-general"}
    if needs_B and ctx.B is None:
        raise InputError(f"identity {spec.id} needs a matrix B")
    if "B-symmetric" in spec.inputs and not np.allclose(ctx.B, ctx.B.T, rtol=0, atol=1e-12):
        raise InputError(f"identity {spec.id} needs a symmetric B")
    if "b-vector" in spec.inputs and ctx.b is None:
        raise InputError(f"identity {spec.id} needs a vector b")


def analytic_value(id, ctx):
    spec = get(id)
    _check(spec, ctx)
    value = spec._analytic(ctx)
    return float(value) if spec.output_kind == "scalar" else np.asarray(value, dtype=float)


def _output_shape(spec, n):
    return {"scalar": (), "matrix": (n, n), "vector": (n,)}[spec.output_kind]


def _estimate_chunk(job):
    items, n, N, first, count, seed = job
    draws = {}
    out = []
    for id, ctx in items:
        spec = _CATALOG[id]
        kind = spec.draw_kind
        if kind not in draws:
            g = rng.generator(seed, rng.IDENTITY_DRAW, _KIND_CODES[kind], n, N, first)
            draws[kind] = _draw(kind, n, N, count, g)
        values = spec._sample(draws[kind], ctx)
        out.append(MomentAccumulator(_output_shape(spec, n)).accumulate_batch(values))
    return out


def _estimate_many(items, samples, seed, workers=1):
    """Accumulators for several (id, ctx) pairs sharing one (n, N).

    Draws are keyed by (seed, draw kind, n, N, chunk), so an identity's
    estimate does not depend on which other identities share the run.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n, N = items[0][1].n, items[0][1].N
    for id, ctx in items:
        if (ctx.n, ctx.N) != (n, N):
            raise ValueError("all contexts in one batch must share n and N")
        _check(get(id), ctx)
    jobs = [
        (items, n, N, first, min(CHUNK, samples - first), seed)
        for first in range(0, samples, CHUNK)
    ]
    per_chunk = parallel_map(_estimate_chunk, jobs, workers)
    return [tree_reduce([chunk[k] for chunk in per_chunk], merge) for k in range(len(items))]


def mc_estimate(id, ctx, samples, seed, workers=1):
    """Sample mean of the identity's left-hand side and its per-entry standard error."""
    (acc,) = _estimate_many([(id, ctx)], samples, seed, workers)
    if get(id).output_kind == "scalar":
        return float(acc.mean), float(acc.stderr)
    return acc.mean, acc.stderr


@dataclass(frozen=True)
class VerifyReport:
    passed: bool
    max_z: float
    estimate: object = None
    stderr: object = None
    analytic: object = None


def compare(estimate, stderr, analytic, k_sigma):
    """Entrywise z-test; zero-stderr entries must match to 1e-10."""
    est = np.atleast_1d(np.asarray(estimate, dtype=float))
    se = np.atleast_1d(np.asarray(stderr, dtype=float))
    ref = np.atleast_1d(np.asarray(analytic, dtype=float))
    diff = np.abs(est - ref)
    zero = se == 0
    exact_ok = bool(np.all(diff[zero] <= 1e-10))
    z = np.zeros_like(diff)
    z[~zero] = diff[~zero] / se[~zero]
    z[zero & (diff > 1e-10)] = np.inf
    max_z = float(z.max()) if z.size else 0.0
    return VerifyReport(
        passed=exact_ok and max_z <= k_sigma,
        max_z=max_z,
        estimate=estimate,
        stderr=stderr,
        analytic=analytic,
    )


def verify(id, ctx, samples, seed, k_sigma=5.0, workers=1):
    estimate, stderr = mc_estimate(id, ctx, samples, seed, workers)
    return compare(estimate, stderr, analytic_value(id, ctx), k_sigma)


# ---------------------------------------------------------------------------
# catalog sweep
# ---------------------------------------------------------------------------

DEFAULT_GRID_N = (1, 2, 5, 10)
DEFAULT_GRID_NN = (1, 3, 8, 15)


def random_inputs(n, N, seed):
    """Seeded (symmetric B, general B, b) for one (n, N) grid point."""
    g = rng.generator(seed, rng.IDENTITY_INPUT, n, N)
    G = g.standard_normal((n, n))
    b = g.standard_normal(n)
    return (G + G.T) / 2, G, b


def context_for(spec, n, N, seed):
    B_sym, B_gen, b = random_inputs(n, N, seed)
    B = B_gen if "B-general" in spec.inputs else B_sym
    return IdentityContext(n=n, N=N, B=B, b=b)


@dataclass(frozen=True)
class CatalogRow:
    id: int
    alias_of: Optional[int]
    n: int
    N: int
    samples: int
    passed: bool
    max_z: float


def _verify_point(job):
    n, N, ids, samples, seed, k_sigma = job
    specs = [get(i) for i in ids if get(i).admits(n, N)]
    if not specs:
        return []
    items = [(s.id, context_for(s, n, N, seed)) for s in specs]
    accs = _estimate_many(items, samples, seed)
    rows = []
    for (id, ctx), acc, spec in zip(items, accs, specs):
        report = compare(acc.mean, acc.stderr, analytic_value(id, ctx), k_sigma)
        rows.append(CatalogRow(id, spec.alias_of, n, N, samples, report.passed, report.max_z))
    return rows


def verify_catalog(grid_n=DEFAULT_GRID_N, grid_N=DEFAULT_GRID_NN, samples=1_000_000, seed=0,
                   k_sigma=5.0, ids=None, workers=1):
    """Verify every identity at every admissible grid point; rows sorted by (id, n, N)."""
    ids = sorted(_CATALOG) if ids is None else sorted(ids)
    jobs = [(n, N, ids, samples, seed, k_sigma) for n in grid_n for N in grid_N]
    rows = [row for part in parallel_map(_verify_point, jobs, workers) for row in part]
    return sorted(rows, key=lambda r: (r.id, r.n, r.N))


# ---------------------------------------------------------------------------
# tie to the closed-form second moment
# ---------------------------------------------------------------------------


def gd_second_moment_from_identities(n, N, eta, signal2, sigma2):
    """E[l^2] for one-step GD (m = 1) assembled from catalog right-hand sides."""
    a = eta / N
    v = sigma2
    b = np.zeros(n)
    b[0] = math.sqrt(signal2)
    B = np.outer(b, b)
    B2 = B @ B
    ctx = IdentityContext(n, N, B=B, b=b)
    ctx_B2 = IdentityContext(n, N, B=B2, b=b)
    ctx_I = IdentityContext(n, N, B=np.eye(n), b=b)

    def val(id, c=ctx):
        return analytic_value(id, c)

    trB = float(np.trace(B))
    trB2 = float(np.trace(B2))
    bQb = val(2)                      # E[b^T Q b]
    bQQb = val(16)                    # E[b^T Q Q b]
    bQQQb = float(b @ val(15) @ b)    # E[b^T Q^3 b]
    tr_Q = val(2, ctx_I)

    # M = (I - aQ)^2; u = b^T M b
    tr_BMBM = (trB2 - 4 * a * val(2, ctx_B2) + 2 * a**2 * val(16, ctx_B2)
               + 4 * a**2 * val(22) - 4 * a**3 * val(23) + a**4 * val(24))
    tr_BM_sq = (trB**2 - 4 * a * trB * bQb + 2 * a**2 * trB * bQQb
                + 4 * a**2 * val(25) - 4 * a**3 * val(26) + a**4 * val(27))
    systematic = 2 * tr_BMBM + tr_BM_sq
    u = signal2 - 2 * a * bQb + a**2 * bQQb
    u_trQ = signal2 * tr_Q - 2 * a * val(14) + a**2 * val(13)
    return (
        systematic
        + 12 * a**2 * v * (bQb - 2 * a * bQQb + a**2 * bQQQb)
        + 3 * a**4 * v * v * (2 * val(7) + val(6))
        + 6 * a**2 * v * u_trQ
        + 6 * v * u
        + 6 * a**2 * v * v * tr_Q
        + 3 * v * v
    )
