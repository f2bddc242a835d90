"""Introspection and evaluation of attention mechanisms.

Effective attention weights are recovered by probing: running the forward
pass with one-hot value columns reads the row-stochastic weight matrix a
query effectively applies to the original tokens, coarsening included.
On top of that sit distance histograms (where does attention mass go?),
an approximation report against the dense reference, and a scaling sweep
that measures weight counts against the guaranteed linear bound.
"""

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attention import AttentionInputs, _edge_scores, dense_attention, gha_forward
from .errors import CapacityError, InvalidInputError, InvariantViolation
from .geometry import PointCloud, voxelize
from .hierarchy import VOXEL_WINDOW_K, Hierarchy, build_hierarchy, truncate, with_values
from .seeding import substream

# Probing costs one forward pass per token; beyond this many tokens the
# quadratic cost is refused rather than silently paid.
PROBE_CAP = 4096

MECHANISMS = ("gha", "local", "dense")


def _map_ordered(fn, items, threads: int):
    """Apply fn to items, optionally on a thread pool; order is preserved.

    Each item is computed independently, so the results are identical for
    any thread count.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Effective attention weights via one-hot value probes
# ---------------------------------------------------------------------------

def _check_probe_cap(n: int, probe_cap: int) -> None:
    if n > probe_cap:
        raise CapacityError(
            f"effective-weight probing needs {n} one-hot columns, above the cap "
            f"of {probe_cap}; raise probe_cap explicitly to accept the cost"
        )


def _probe_columns(hierarchy: Hierarchy, lo: int, hi: int, embedding, mode) -> np.ndarray:
    n = hierarchy.levels[0].n_tokens
    probes = np.zeros((n, hi - lo), dtype=np.float64)
    probes[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
    probed = with_values(hierarchy, v=probes)
    return gha_forward(probed, embedding, mode).z


def effective_attention(hierarchy: Hierarchy, embedding=None, embedding_mode: str = "none",
                        *, probe_cap: int = PROBE_CAP, block_size: int = 512,
                        threads: int = 1) -> np.ndarray:
    """(N, N) matrix of effective weights each query puts on each token.

    Column block j of the result is the forward output for one-hot value
    columns e_j, so row i lists the convex weights behind z_i. Rows are
    nonnegative and sum to 1. Blocks are independent, making the result
    invariant to both block_size and thread count.
    """
    n = hierarchy.levels[0].n_tokens
    _check_probe_cap(n, probe_cap)
    if block_size < 1:
        raise InvalidInputError(f"block_size must be >= 1, got {block_size}")
    spans = [(lo, min(n, lo + block_size)) for lo in range(0, n, block_size)]
    blocks = _map_ordered(
        lambda s: _probe_columns(hierarchy, s[0], s[1], embedding, embedding_mode),
        spans, threads,
    )
    return np.hstack(blocks)


def effective_attention_row(hierarchy: Hierarchy, i: int, embedding=None,
                            embedding_mode: str = "none", *, probe_cap: int = PROBE_CAP,
                            block_size: int = 512, threads: int = 1) -> np.ndarray:
    """Effective weights of query i over all N tokens (nonnegative, sum 1)."""
    n = hierarchy.levels[0].n_tokens
    if not 0 <= i < n:
        raise InvalidInputError(f"query index {i} out of range for {n} tokens")
    _check_probe_cap(n, probe_cap)
    spans = [(lo, min(n, lo + block_size)) for lo in range(0, n, block_size)]
    blocks = _map_ordered(
        lambda s: _probe_columns(hierarchy, s[0], s[1], embedding, embedding_mode)[i],
        spans, threads,
    )
    return np.concatenate(blocks)


def _dense_weight_matrix(hierarchy: Hierarchy, embedding, mode: str) -> np.ndarray:
    """Row-stochastic softmax weights of the dense reference on level 0."""
    lv = hierarchy.levels[0]
    q, k, pos = lv.q_tilde, lv.k_tilde, lv.positions
    n, d = q.shape
    scale = math.sqrt(d)
    out = np.empty((n, n), dtype=np.float64)
    cols = np.arange(n, dtype=np.int64)
    chunk = max(1, (1 << 22) // n)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        rows = np.repeat(np.arange(start, stop, dtype=np.int64), n)
        s = _edge_scores(q, k, pos, rows, np.tile(cols, stop - start), embedding, mode, scale)
        s = s.reshape(stop - start, n)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        out[start:stop] = e / e.sum(axis=1, keepdims=True)
    return out


def mechanism_weights(hierarchy: Hierarchy, mechanism: str, embedding=None,
                      embedding_mode: str = "none", *, probe_cap: int = PROBE_CAP,
                      threads: int = 1) -> np.ndarray:
    """Effective (N, N) weights of one mechanism over the level-0 tokens.

    gha probes the full hierarchy, local probes it truncated to level 0
    (weights outside the neighborhood are structurally zero), and dense
    evaluates the reference softmax directly.
    """
    if mechanism not in MECHANISMS:
        raise InvalidInputError(f"mechanism must be one of {MECHANISMS}, got {mechanism!r}")
    if mechanism == "dense":
        _check_probe_cap(hierarchy.levels[0].n_tokens, probe_cap)
        return _dense_weight_matrix(hierarchy, embedding, embedding_mode)
    h = truncate(hierarchy, 0) if mechanism == "local" else hierarchy
    return effective_attention(h, embedding, embedding_mode, probe_cap=probe_cap,
                               threads=threads)


# ---------------------------------------------------------------------------
# Distance histograms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistanceHistogram:
    """Attention mass binned by query-to-token distance.

    Mass in bin b is the sum of effective weights w_ij over pairs whose
    distance (measured between the original level-0 token positions, even
    for weight routed through coarse levels) falls in
    [bin_edges[b], bin_edges[b+1]); the last bin is closed on the right.
    Every row sums to 1, so the total mass equals the number of queries.
    """

    mechanism: str
    bin_edges: np.ndarray  # (n_bins + 1,)
    mass: np.ndarray  # (n_bins,)

    @property
    def n_bins(self) -> int:
        return self.mass.shape[0]

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())


def _pairwise_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def neighborhood_radius(hierarchy: Hierarchy) -> float:
    """Longest level-0 neighborhood edge; local attention cannot move mass
    between tokens farther apart than this."""
    lv = hierarchy.levels[0]
    topo = lv.topology
    rows = np.repeat(np.arange(lv.n_tokens), topo.sizes)
    diff = lv.positions[rows] - lv.positions[topo.indices]
    return float(np.sqrt(np.einsum("ed,ed->e", diff, diff)).max())


def mass_beyond_radius(positions: np.ndarray, weights: np.ndarray, radius: float) -> float:
    """Total weight on pairs strictly farther apart than ``radius``."""
    d = _pairwise_distances(np.asarray(positions, dtype=np.float64))
    return float(weights[d > radius].sum())


def attention_histogram(hierarchy: Hierarchy, mechanism: str = "gha", n_bins: int = 64,
                        embedding=None, embedding_mode: str = "none",
                        *, probe_cap: int = PROBE_CAP, threads: int = 1) -> DistanceHistogram:
    """Histogram of a mechanism's attention mass over pair distances.

    Bins are uniform over [0, max pairwise distance] between the level-0
    token positions.
    """
    if n_bins < 1:
        raise InvalidInputError(f"n_bins must be >= 1, got {n_bins}")
    pos = hierarchy.levels[0].positions
    weights = mechanism_weights(hierarchy, mechanism, embedding, embedding_mode,
                                probe_cap=probe_cap, threads=threads)
    dist = _pairwise_distances(pos)
    span = float(dist.max())
    if span == 0.0:  # all tokens coincide; any positive span bins the zero
        span = 1.0
    edges = np.linspace(0.0, span, n_bins + 1)
    mass, _ = np.histogram(dist.ravel(), bins=edges, weights=weights.ravel())
    return DistanceHistogram(mechanism=mechanism, bin_edges=edges, mass=mass)


# ---------------------------------------------------------------------------
# Approximation quality vs the dense reference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ApproximationReport:
    """How closely hierarchical attention tracks the dense softmax.

    Row errors are relative L2 distances between gha and dense output
    rows. The locality ratio divides the mean effective weight a query
    puts on its 5 nearest other tokens by the mean weight on its 5
    farthest (ratio of means over all queries, self excluded); values
    above 1 mean attention concentrates on nearby geometry.
    """

    n_tokens: int
    flavor: str
    k: int
    r: int
    embedding_mode: str
    max_rel_err: float
    mean_rel_err: float
    locality_ratio: float
    weight_count: int
    dense_weight_count: int


def locality_ratio(positions: np.ndarray, weights: np.ndarray, n_extreme: int = 5) -> float:
    """Mean weight on each query's nearest tokens over mean weight on its
    farthest (self excluded, ties broken by index)."""
    n = positions.shape[0]
    if n < 2:
        raise InvalidInputError("locality ratio needs at least 2 tokens")
    m = min(n_extreme, n - 1)
    d = _pairwise_distances(np.asarray(positions, dtype=np.float64))
    idx = np.arange(n)
    d[idx, idx] = np.inf  # excludes self from "nearest"
    order = np.lexsort((np.broadcast_to(idx, (n, n)), d), axis=1)
    near = np.take_along_axis(weights, order[:, :m], axis=1)
    far = np.take_along_axis(weights, order[:, n - 1 - m:n - 1], axis=1)
    near_mean = float(near.mean())
    far_mean = float(far.mean())
    if far_mean == 0.0:
        return math.inf
    return near_mean / far_mean


def approximation_report(hierarchy: Hierarchy, embedding=None, embedding_mode: str = "none",
                         *, probe_cap: int = PROBE_CAP,
                         threads: int = 1) -> ApproximationReport:
    lv = hierarchy.levels[0]
    n = lv.n_tokens
    _check_probe_cap(n, probe_cap)
    gha = gha_forward(hierarchy, embedding, embedding_mode)
    dense = dense_attention(AttentionInputs(
        q=lv.q_tilde, k=lv.k_tilde, v=lv.v_tilde, positions=lv.positions,
        embedding=embedding, embedding_mode=embedding_mode,
    ))
    diff = np.linalg.norm(gha.z - dense.z, axis=1)
    ref = np.linalg.norm(dense.z, axis=1)
    rel = diff / np.maximum(ref, np.finfo(np.float64).tiny)
    weights = effective_attention(hierarchy, embedding, embedding_mode,
                                  probe_cap=probe_cap, threads=threads)
    return ApproximationReport(
        n_tokens=n,
        flavor=hierarchy.flavor,
        k=hierarchy.neighborhood_k,
        r=hierarchy.coarsen_ratio,
        embedding_mode=embedding_mode,
        max_rel_err=float(rel.max()),
        mean_rel_err=float(rel.mean()),
        locality_ratio=locality_ratio(lv.positions, weights),
        weight_count=gha.weight_count,
        dense_weight_count=n * n,
    )


# ---------------------------------------------------------------------------
# Scaling sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingRow:
    n_points: int
    n_tokens: int
    flavor: str
    k: int
    r: int
    mechanism: str
    weight_count: int
    weight_bound: float  # k * r / (r - 1) * n_tokens; NaN for non-gha rows
    peak_bytes_estimate: int
    wall_time: float  # seconds, hierarchy build + forward


@dataclass(frozen=True)
class ScalingReport:
    """Weight counts over a sweep of sizes with a linear least-squares fit.

    slope/intercept/r_squared fit weight_count against n_tokens; for the
    gha mechanism the count is provably linear, so r_squared approaches 1.
    """

    rows: tuple
    slope: float
    intercept: float
    r_squared: float


def weight_bound(k: int, r: int, n_tokens: int) -> float:
    """Guaranteed cap on total attention weights: the level sizes shrink
    at least geometrically by r, so sum_h k * n_h <= k * n * r / (r - 1)."""
    if r < 2:
        raise InvalidInputError(f"coarsening ratio must be >= 2, got {r}")
    return k * r / (r - 1) * n_tokens


def _check_weight_bound(row: ScalingRow) -> None:
    if row.weight_count > row.weight_bound:
        raise InvariantViolation(
            f"weight count {row.weight_count} exceeds the linear bound "
            f"{row.weight_bound:.1f} at n={row.n_tokens} (k={row.k}, r={row.r})"
        )


def _fit_line(xs: np.ndarray, ys: np.ndarray) -> tuple:
    if xs.shape[0] < 2:
        return math.nan, math.nan, math.nan
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_res = float(resid @ resid)
    centered = ys - ys.mean()
    ss_tot = float(centered @ centered)
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def scaling_sweep(sizes, *, flavor: str = "point", k: int = 8, r: int = 2,
                  mechanism: str = "gha", seed: int = 0, d: int = 8,
                  voxel_size: float = 0.05) -> ScalingReport:
    """Run one mechanism over seeded uniform clouds of the given sizes.

    Each size draws a fresh uniform cloud in the unit cube and N(0, 1)
    q/k/v. gha rows are checked against the linear weight bound and the
    report fits weight_count ~ n_tokens. peak_bytes_estimate is the
    transient footprint of materializing every attention edge at once
    (8 bytes each for score, weight, and d value lanes); the dense path
    streams row blocks, so its resident peak can sit below this figure.
    """
    if mechanism not in MECHANISMS:
        raise InvalidInputError(f"mechanism must be one of {MECHANISMS}, got {mechanism!r}")
    # Voxel hierarchies always use the 3x3x3 window and stride-2 pooling, so
    # their rows report those instead of the point-flavor k/r arguments.
    eff_k, eff_r = (VOXEL_WINDOW_K, 2) if flavor == "voxel" else (k, r)
    rows = []
    for n in sizes:
        n = int(n)
        pts = substream(seed, "cloud-gen", n).uniform(0.0, 1.0, size=(n, 3))
        if flavor == "voxel":
            grid = voxelize(PointCloud(positions=pts), voxel_size)
            token_pos, coords = grid.cell_centroid, grid.occupied
        else:
            token_pos, coords = pts, None
        n_tok = token_pos.shape[0]
        qkv_rng = substream(seed, "qkv", n)
        q, k_mat, v = (qkv_rng.normal(size=(n_tok, d)) for _ in range(3))

        t0 = time.perf_counter()
        if mechanism == "dense":
            res = dense_attention(AttentionInputs(q=q, k=k_mat, v=v, positions=token_pos))
        else:
            h = build_hierarchy(token_pos, q, k_mat, v, flavor=flavor, k=k, r=r, coords=coords)
            if mechanism == "local":
                h = truncate(h, 0)
            res = gha_forward(h)
        wall = time.perf_counter() - t0

        row = ScalingRow(
            n_points=n,
            n_tokens=n_tok,
            flavor=flavor,
            k=eff_k,
            r=eff_r,
            mechanism=mechanism,
            weight_count=res.weight_count,
            weight_bound=weight_bound(eff_k, eff_r, n_tok) if mechanism == "gha" else math.nan,
            peak_bytes_estimate=res.weight_count * 8 * (2 + d),
            wall_time=wall,
        )
        if mechanism == "gha":
            _check_weight_bound(row)
        rows.append(row)

    xs = np.array([row.n_tokens for row in rows], dtype=np.float64)
    ys = np.array([row.weight_count for row in rows], dtype=np.float64)
    slope, intercept, r2 = _fit_line(xs, ys)
    return ScalingReport(rows=tuple(rows), slope=slope, intercept=intercept, r_squared=r2)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def _writer():
    buf = io.StringIO(newline="")
    return buf, csv.writer(buf, lineterminator="\n")


def histogram_csv(hist: DistanceHistogram) -> str:
    """CSV rows (mechanism, bin_lo, bin_hi, mass); mass is the summed
    row-stochastic weight on pairs in [bin_lo, bin_hi), so the column
    totals the number of query tokens."""
    buf, w = _writer()
    buf.write("# attention mass per distance bin; total mass = number of queries\n")
    w.writerow(["mechanism", "bin_lo", "bin_hi", "mass"])
    for b in range(hist.n_bins):
        w.writerow([hist.mechanism, repr(float(hist.bin_edges[b])),
                    repr(float(hist.bin_edges[b + 1])), repr(float(hist.mass[b]))])
    return buf.getvalue()


def approximation_csv(report: ApproximationReport) -> str:
    """One CSV row of approximation metrics; rel errors are row-wise
    relative L2 against the dense reference, locality_ratio is mean
    near-5 weight over mean far-5 weight (self excluded)."""
    buf, w = _writer()
    buf.write("# gha vs dense on one cloud; errors are row-relative L2\n")
    w.writerow(["n_tokens", "flavor", "k", "r", "embedding_mode", "max_rel_err",
                "mean_rel_err", "locality_ratio", "weight_count", "dense_weight_count"])
    w.writerow([report.n_tokens, report.flavor, report.k, report.r, report.embedding_mode,
                repr(report.max_rel_err), repr(report.mean_rel_err),
                repr(report.locality_ratio), report.weight_count, report.dense_weight_count])
    return buf.getvalue()


def scaling_csv(report: ScalingReport) -> str:
    """One CSV row per sweep size.

    weight_count sums attention edges over all levels; weight_bound is
    the guaranteed k*r/(r-1)*n_tokens cap (empty for non-gha rows);
    peak_bytes_estimate = 8*(2+d)*weight_count, the cost of holding every
    edge's score, weight, and value lanes at once; wall_time covers
    hierarchy build plus forward in seconds.
    """
    buf, w = _writer()
    buf.write("# weight_count = attention edges summed over levels; "
              "peak_bytes_estimate = 8*(2+d)*weight_count; wall_time = build+forward seconds\n")
    w.writerow(["n_points", "n_tokens", "flavor", "k", "r", "mechanism", "weight_count",
                "weight_bound", "peak_bytes_estimate", "wall_time"])
    for row in report.rows:
        w.writerow([row.n_points, row.n_tokens, row.flavor, row.k, row.r, row.mechanism,
                    row.weight_count,
                    "" if math.isnan(row.weight_bound) else repr(row.weight_bound),
                    row.peak_bytes_estimate, repr(row.wall_time)])
    buf.write(f"# fit: weight_count ~ {report.slope!r} * n_tokens + {report.intercept!r}, "
              f"r_squared = {report.r_squared!r}\n")
    return buf.getvalue()


def heatmap_csv(positions: np.ndarray, weights: np.ndarray) -> str:
    """CSV rows (x, y, z, weight): one query's effective weight per token."""
    positions = np.asarray(positions, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (positions.shape[0],):
        raise InvalidInputError(
            f"need one weight per token, got {weights.shape} for {positions.shape[0]} tokens"
        )
    buf, w = _writer()
    w.writerow(["x", "y", "z", "weight"])
    for p, wt in zip(positions, weights):
        w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(wt))])
    return buf.getvalue()
