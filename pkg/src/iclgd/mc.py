"""Seeded, mergeable Monte Carlo statistics for the test loss.

Work is cut into fixed blocks of replicates.  Each block draws from its own
keyed stream and produces private statistics; blocks are merged along a
fixed binary tree in block order.  Block boundaries depend only on the
problem, never on the worker count, so results are bit-identical for any
``workers`` value.
"""

import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import CapacityError, DataError
from .model import check_regime, fit, task_for

# budget of doubles held by one tile of test draws
TILE_FLOATS = 1 << 20
# designs per block are capped so one block of X stays near this many doubles
BLOCK_FLOATS = 1 << 18
MAX_BLOCK_REPLICATES = 64
MAX_LOSSES = 2_000_000_000
EXACT_ECDF_LIMIT = 10_000_000
HISTOGRAM_BINS = 10_000
PILOT_LOSSES = 100_000


def default_workers():
    value = os.environ.get("ICLGD_WORKERS", "1")
    try:
        workers = int(value)
    except ValueError:
        raise ValueError(f"ICLGD_WORKERS must be an integer, got {value!r}") from None
    if workers < 1:
        raise ValueError(f"ICLGD_WORKERS must be >= 1, got {workers}")
    return workers


def parallel_map(fn, tasks, workers=1):
    """Ordered map, in-process for one worker and over forked processes otherwise."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), mp_context=ctx) as pool:
        return list(pool.map(fn, tasks))


def tree_reduce(items, combine):
    """Reduce pairwise along a balanced binary tree in list order."""
    items = list(items)
    if not items:
        raise ValueError("nothing to reduce")
    while len(items) > 1:
        paired = [combine(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0]


# ---------------------------------------------------------------------------
# streaming moments
# ---------------------------------------------------------------------------


@dataclass
class MomentAccumulator:
    """Count, mean, centered and raw sums of squares; scalar or entrywise.

    ``shape`` fixes the shape of each observation (``()`` for scalars).
    """

    shape: tuple = ()
    count: int = 0
    mean: np.ndarray = None
    m2: np.ndarray = None
    m_raw2: np.ndarray = None

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.mean is None:
            self.mean = np.zeros(self.shape)
            self.m2 = np.zeros(self.shape)
            self.m_raw2 = np.zeros(self.shape)

    def accumulate(self, x):
        """Welford update with a single observation."""
        x = np.asarray(x, dtype=float)
        if x.shape != self.shape:
            raise ValueError(f"observation shape {x.shape} != accumulator shape {self.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("cannot accumulate a non-finite value")
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)
        self.m_raw2 = self.m_raw2 + x * x
        return self

    def accumulate_batch(self, xs):
        """Add observations stacked along axis 0."""
        xs = np.asarray(xs, dtype=float)
        if xs.shape[1:] != self.shape:
            raise ValueError(f"batch shape {xs.shape} does not stack {self.shape}")
        if len(xs) == 0:
            return self
        if not np.all(np.isfinite(xs)):
            raise DataError("cannot accumulate a non-finite value")
        # shifting by the first row keeps constant data exact and large offsets harmless
        shifted = xs - xs[0]
        mean_shift = shifted.mean(axis=0)
        part = MomentAccumulator(
            shape=self.shape,
            count=len(xs),
            mean=xs[0] + mean_shift,
            m2=((shifted - mean_shift) ** 2).sum(axis=0),
            m_raw2=(xs * xs).sum(axis=0),
        )
        merged = merge(self, part)
        self.count, self.mean, self.m2, self.m_raw2 = (
            merged.count,
            merged.mean,
            merged.m2,
            merged.m_raw2,
        )
        return self

    @property
    def variance(self):
        """Unbiased sample variance (zero with fewer than two observations)."""
        if self.count < 2:
            return np.zeros(self.shape)
        return self.m2 / (self.count - 1)

    @property
    def stderr(self):
        if self.count == 0:
            return np.full(self.shape, np.nan)
        return np.sqrt(self.variance / self.count)

    @property
    def second_moment(self):
        if self.count == 0:
            return np.full(self.shape, np.nan)
        return self.m_raw2 / self.count


def accumulate(acc, x):
    return acc.accumulate(x)


def merge(a, b):
    """Pairwise combination of two accumulators; returns a new accumulator."""
    if a.shape != b.shape:
        raise ValueError(f"cannot merge shapes {a.shape} and {b.shape}")
    if b.count == 0:
        return MomentAccumulator(a.shape, a.count, a.mean.copy(), a.m2.copy(), a.m_raw2.copy())
    if a.count == 0:
        return MomentAccumulator(b.shape, b.count, b.mean.copy(), b.m2.copy(), b.m_raw2.copy())
    count = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / count)
    m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / count)
    return MomentAccumulator(a.shape, count, mean, m2, a.m_raw2 + b.m_raw2)


# ---------------------------------------------------------------------------
# empirical CDF
# ---------------------------------------------------------------------------


@dataclass
class EcdfSummary:
    """Either every loss (sorted) or a fixed-width histogram with an overflow bin."""

    sorted_losses: np.ndarray = None
    edges: np.ndarray = None
    counts: np.ndarray = None
    overflow: int = 0

    @property
    def exact(self):
        return self.sorted_losses is not None

    @property
    def total(self):
        if self.exact:
            return int(self.sorted_losses.size)
        return int(self.counts.sum()) + self.overflow

    def count_above(self, threshold):
        """Number of recorded losses strictly above ``threshold``.

        In histogram mode the bin holding the threshold is split linearly, so
        the count is approximate to one bin width.
        """
        if self.exact:
            return self.total - int(np.searchsorted(self.sorted_losses, threshold, side="right"))
        edges, counts = self.edges, self.counts
        if threshold < edges[0]:
            return float(self.total)
        if threshold >= edges[-1]:
            return float(self.overflow)
        i = int(np.searchsorted(edges, threshold, side="right")) - 1
        frac = (edges[i + 1] - threshold) / (edges[i + 1] - edges[i])
        return float(counts[i + 1 :].sum() + self.overflow + frac * counts[i])

    def cdf(self, threshold):
        total = self.total
        return (total - self.count_above(threshold)) / total

    def quantile(self, q):
        if self.exact:
            return float(np.quantile(self.sorted_losses, q))
        cum = np.cumsum(self.counts)
        i = int(np.searchsorted(cum, q * self.total))
        return float(self.edges[min(i + 1, len(self.edges) - 1)])


def exceedance_rate(ecdf, threshold):
    """Fraction of recorded losses strictly greater than ``threshold``."""
    return ecdf.count_above(threshold) / ecdf.total


def merge_ecdf(parts):
    parts = list(parts)
    if parts[0].exact:
        return EcdfSummary(sorted_losses=np.sort(np.concatenate([p.sorted_losses for p in parts])))
    return EcdfSummary(
        edges=parts[0].edges,
        counts=np.sum([p.counts for p in parts], axis=0),
        overflow=sum(p.overflow for p in parts),
    )


# ---------------------------------------------------------------------------
# replicate simulation
# ---------------------------------------------------------------------------


@dataclass
class ReplicateSummary:
    """Pooled loss statistics plus per-design averages.

    Losses that share a design are correlated, so standard errors come
    from ``per_replicate``, which holds one observation per design:
    (mean loss, mean squared loss) over that design's test points.
    Unpacks as ``(moments, ecdf)``.
    """

    moments: MomentAccumulator
    ecdf: EcdfSummary
    per_replicate: MomentAccumulator = field(default_factory=lambda: MomentAccumulator((2,)))

    def __iter__(self):
        return iter((self.moments, self.ecdf))

    @property
    def count(self):
        return self.moments.count

    @property
    def mean(self):
        return float(self.moments.mean)

    @property
    def second_moment(self):
        return float(self.moments.second_moment)

    @property
    def mean_stderr(self):
        return float(self.per_replicate.stderr[0])

    @property
    def second_moment_stderr(self):
        return float(self.per_replicate.stderr[1])


def block_size(cfg):
    per_design = cfg.n * cfg.N + cfg.m * cfg.N
    return max(1, min(MAX_BLOCK_REPLICATES, BLOCK_FLOATS // per_design))


def _simulate_block(job):
    cfg, estimator, task, first, count, tests, seed, key, edges = job
    g = rng.generator(seed, key, first)
    n, m, N = cfg.n, cfg.m, cfg.N
    X = g.standard_normal((count, n, N))
    Z = g.standard_normal((count, m, N))
    Y = task.W1 @ X + task.sigma * Z
    W = fit(estimator, task, X, Y, cfg.eta)
    gap_t = np.swapaxes(task.W1 - W, -1, -2)  # (count, n, m)

    sums = np.zeros((count, 2))
    pieces = []
    per_test = n + m
    group = max(1, TILE_FLOATS // (tests * per_test))
    chunk = min(tests, max(1, TILE_FLOATS // per_test))
    for r0 in range(0, count, group):
        r1 = min(count, r0 + group)
        for t0 in range(0, tests, chunk):
            t1 = min(tests, t0 + chunk)
            xhat = g.standard_normal((r1 - r0, t1 - t0, n))
            zhat = g.standard_normal((r1 - r0, t1 - t0, m))
            err = xhat @ gap_t[r0:r1] + task.sigma * zhat
            loss = np.einsum("rtm,rtm->rt", err, err)
            sums[r0:r1, 0] += loss.sum(axis=1)
            sums[r0:r1, 1] += (loss * loss).sum(axis=1)
            pieces.append(loss.ravel())

    losses = np.concatenate(pieces)
    moments = MomentAccumulator().accumulate_batch(losses)
    per_rep = MomentAccumulator((2,)).accumulate_batch(sums / tests)
    if edges is None:
        ecdf = EcdfSummary(sorted_losses=np.sort(losses))
    else:
        counts, _ = np.histogram(losses, bins=edges)
        ecdf = EcdfSummary(edges=edges, counts=counts, overflow=int((losses > edges[-1]).sum()))
    return moments, per_rep, ecdf


def _blocks(cfg, replicates):
    size = block_size(cfg)
    return [(start, min(size, replicates - start)) for start in range(0, replicates, size)]


def _histogram_edges(cfg, estimator, task, tests, seed):
    replicates = max(1, math.ceil(PILOT_LOSSES / tests))
    jobs = [
        (cfg, estimator, task, first, count, tests, seed, rng.PILOT, None)
        for first, count in _blocks(cfg, replicates)
    ]
    pilot = merge_ecdf([r[2] for r in map(_simulate_block, jobs)])
    top = 2 * pilot.quantile(0.9999)
    if not top > 0:
        top = 1.0
    return np.linspace(0.0, top, HISTOGRAM_BINS + 1)


def run_replicates(cfg, estimator, replicates, tests_per_replicate, seed, workers=1, task=None):
    """Simulate ``replicates`` designs with ``tests_per_replicate`` test points each.

    ``estimator`` is one of ``"gd"``, ``"least_norm"``, ``"least_squares"``.
    The task defaults to :func:`iclgd.model.task_for` ``(cfg, seed)``.
    """
    if replicates < 1 or tests_per_replicate < 1:
        raise ValueError("replicates and tests_per_replicate must be >= 1")
    total = replicates * tests_per_replicate
    if total > MAX_LOSSES:
        raise CapacityError(f"{total} losses exceeds the limit of {MAX_LOSSES}")
    if cfg.n * cfg.N > BLOCK_FLOATS * MAX_BLOCK_REPLICATES:
        raise CapacityError(f"design of size {cfg.n}x{cfg.N} is too large to simulate")
    if task is None:
        task = task_for(cfg, seed)
    check_regime(estimator, cfg.n, cfg.N)

    edges = None
    if total > EXACT_ECDF_LIMIT:
        edges = _histogram_edges(cfg, estimator, task, tests_per_replicate, seed)
    jobs = [
        (cfg, estimator, task, first, count, tests_per_replicate, seed, rng.REPLICATE_BLOCK, edges)
        for first, count in _blocks(cfg, replicates)
    ]
    results = parallel_map(_simulate_block, jobs, workers)
    return ReplicateSummary(
        moments=tree_reduce([r[0] for r in results], merge),
        ecdf=merge_ecdf([r[2] for r in results]),
        per_replicate=tree_reduce([r[1] for r in results], merge),
    )
