"""Spatial primitives: point clouds, kNN, farthest point sampling, voxel grids.

All geometry is computed in float64. Results are deterministic: every
distance tie is broken by an explicit rule (lower index, or lexicographic
coordinates where stated), and every neighbor list is stored in a canonical
order so downstream floating-point reductions are reproducible.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError

# Packed voxel keys use 21 bits per axis.
_VOXEL_COORD_BOUND = 1 << 20


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """N points in meters with optional per-point feature rows."""

    positions: np.ndarray  # (N, 3) float64
    features: np.ndarray | None = None  # (N, d) float64

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise InvalidInputError(f"positions must be (N, 3) with N >= 1, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise InvalidInputError("positions contain non-finite values")
        object.__setattr__(self, "positions", _freeze(pos))
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != pos.shape[0]:
                raise InvalidInputError(
                    f"features must have {pos.shape[0]} rows, got shape {feats.shape}"
                )
            if not np.all(np.isfinite(feats)):
                raise InvalidInputError("features contain non-finite values")
            object.__setattr__(self, "features", _freeze(feats))

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class NeighborhoodTopology:
    """Per-token neighbor lists in CSR layout.

    ``indices[indptr[i]:indptr[i + 1]]`` lists the neighbors of token i,
    self included, ordered by (squared distance, index) so that summation
    order is canonical.
    """

    kind: str  # "knn" or "kernel_window"
    indptr: np.ndarray  # (n_tokens + 1,) int64
    indices: np.ndarray  # (nnz,) int64
    k: int | None = None  # neighborhood size for kind == "knn"

    def __post_init__(self):
        if self.kind not in ("knn", "kernel_window"):
            raise InvalidInputError(f"unknown topology kind {self.kind!r}")
        object.__setattr__(self, "indptr", _freeze(np.asarray(self.indptr, dtype=np.int64)))
        object.__setattr__(self, "indices", _freeze(np.asarray(self.indices, dtype=np.int64)))

    @property
    def n_tokens(self) -> int:
        return self.indptr.shape[0] - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def total_edges(self) -> int:
        return int(self.indices.shape[0])

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]


@dataclass(frozen=True)
class SparseVoxelGrid:
    """Occupied cells of a uniform grid, lexicographically sorted by (x, y, z)."""

    voxel_size: float
    occupied: np.ndarray  # (M, 3) int64 voxel coordinates
    cell_features: np.ndarray  # (M, d) float64, d may be 0
    cell_centroid: np.ndarray  # (M, 3) float64 mean position of contained points
    cell_count: np.ndarray  # (M,) int64 number of source points

    def __post_init__(self):
        object.__setattr__(self, "occupied", _freeze(np.asarray(self.occupied, dtype=np.int64)))
        object.__setattr__(self, "cell_features", _freeze(np.asarray(self.cell_features, dtype=np.float64)))
        object.__setattr__(self, "cell_centroid", _freeze(np.asarray(self.cell_centroid, dtype=np.float64)))
        object.__setattr__(self, "cell_count", _freeze(np.asarray(self.cell_count, dtype=np.int64)))

    @property
    def n_voxels(self) -> int:
        return self.occupied.shape[0]


def _squared_dist_to(points: np.ndarray, p: np.ndarray) -> np.ndarray:
    d = points - p
    return np.einsum("ij,ij->i", d, d)


def _pick_extremal(values: np.ndarray, positions: np.ndarray, mask: np.ndarray) -> int:
    """Index of the max of ``values`` over ``mask``; ties broken by
    lexicographically smallest coordinates, then lowest index."""
    masked = np.where(mask, values, -np.inf)
    best = masked.max()
    cand = np.flatnonzero(masked == best)
    if cand.shape[0] == 1:
        return int(cand[0])
    p = positions[cand]
    order = np.lexsort((cand, p[:, 2], p[:, 1], p[:, 0]))
    return int(cand[order[0]])


def deterministic_knn(points: np.ndarray, queries: np.ndarray, k: int) -> list[np.ndarray]:
    """Exact k nearest neighbors of each query among ``points``.

    Returns, per query, indices sorted by (squared distance, index). A
    kd-tree provides candidates; selection and ordering always use the
    direct per-pair squared distance so results do not depend on tree
    internals or input order (beyond index relabeling).
    """
    n = points.shape[0]
    k = min(k, n)
    tree = cKDTree(points)
    # One extra neighbor tells us whether a tie straddles the k-th place.
    kq = min(k + 1, n)
    dist, idx = tree.query(queries, k=kq)
    if kq == 1:  # scipy squeezes the neighbor axis for k=1
        dist = dist[:, None]
        idx = idx[:, None]

    if kq > k:
        boundary_tied = dist[:, k] <= dist[:, k - 1] * (1.0 + 1e-12)
    else:
        boundary_tied = np.zeros(queries.shape[0], dtype=bool)

    out: list[np.ndarray] = []
    ambiguous = np.flatnonzero(boundary_tied)
    ball_cands = None
    if ambiguous.size:
        radii = dist[ambiguous, k - 1] * (1.0 + 1e-9)
        ball_cands = tree.query_ball_point(queries[ambiguous], radii)

    amb_pos = {int(q): j for j, q in enumerate(ambiguous)}
    for qi in range(queries.shape[0]):
        if qi in amb_pos:
            cand = np.asarray(ball_cands[amb_pos[qi]], dtype=np.int64)
        else:
            cand = idx[qi, :k].astype(np.int64)
        d2 = _squared_dist_to(points[cand], queries[qi])
        order = np.lexsort((cand, d2))
        out.append(cand[order[:k]])
    return out


def knn(cloud: PointCloud, k: int) -> NeighborhoodTopology:
    """kNN topology: T_i holds i plus the k-1 nearest other points.

    |T_i| = min(k, N); distance ties are broken by lower point index.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    return knn_from_positions(cloud.positions, k)


def knn_from_positions(positions: np.ndarray, k: int) -> NeighborhoodTopology:
    n = positions.shape[0]
    if n < 1:
        raise InvalidInputError("empty point set")
    lists = deterministic_knn(positions, positions, k)
    sizes = np.fromiter((len(l) for l in lists), dtype=np.int64, count=n)
    indptr = np.concatenate(([0], np.cumsum(sizes)))
    indices = np.concatenate(lists) if n else np.empty(0, dtype=np.int64)
    return NeighborhoodTopology(kind="knn", indptr=indptr, indices=indices, k=k)


def farthest_point_sample(cloud: PointCloud, m: int) -> np.ndarray:
    """Greedy min-distance-maximizing subsample of m point indices.

    The first pick maximizes distance to the centroid; each later pick
    maximizes the minimum distance to the already-selected set. Ties go to
    the lexicographically smallest coordinates, then the lowest index.
    Returns indices sorted ascending.
    """
    return fps_from_positions(cloud.positions, m)


def fps_from_positions(positions: np.ndarray, m: int) -> np.ndarray:
    n = positions.shape[0]
    if not 1 <= m <= n:
        raise InvalidInputError(f"m must be in [1, {n}], got {m}")
    unselected = np.ones(n, dtype=bool)

    # Sum rows in lexicographic coordinate order: float addition is not
    # associative, so averaging in input order would make the start pick
    # (and thus the whole sample) depend on how the caller happened to
    # order the points.
    canon = np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0]))
    centroid = positions[canon].mean(axis=0)
    first = _pick_extremal(_squared_dist_to(positions, centroid), positions, unselected)
    selected = [first]
    min_d2 = _squared_dist_to(positions, positions[first])
    # Selected entries are parked at -1, below any real squared distance, so
    # the argmax below never revisits them and no separate mask is needed.
    min_d2[first] = -1.0

    diff = np.empty_like(positions)
    d2 = np.empty(n, dtype=np.float64)
    for _ in range(m - 1):
        nxt = int(np.argmax(min_d2))
        best = min_d2[nxt]
        if np.count_nonzero(min_d2 == best) > 1:
            # argmax already gives the lowest index; the tie rule wants
            # lexicographically smallest coordinates first.
            cand = np.flatnonzero(min_d2 == best)
            p = positions[cand]
            order = np.lexsort((cand, p[:, 2], p[:, 1], p[:, 0]))
            nxt = int(cand[order[0]])
        selected.append(nxt)
        np.subtract(positions, positions[nxt], out=diff)
        np.einsum("ij,ij->i", diff, diff, out=d2)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -1.0

    out = np.array(sorted(selected), dtype=np.int64)
    return out


def pack_voxel_coords(coords: np.ndarray) -> np.ndarray:
    """Pack integer (x, y, z) voxel coordinates into one int64 key whose
    natural order equals lexicographic order on (x, y, z)."""
    if np.any(np.abs(coords) >= _VOXEL_COORD_BOUND):
        raise InvalidInputError(
            f"voxel coordinates exceed supported range +/-{_VOXEL_COORD_BOUND - 1}"
        )
    c = coords + _VOXEL_COORD_BOUND
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def voxelize(cloud: PointCloud, voxel_size: float) -> SparseVoxelGrid:
    """Bin points into cells of side ``voxel_size``; voxel coordinate of a
    point is floor(p / voxel_size) per axis. Cell features and centroid are
    the mean over contained points."""
    if not voxel_size > 0:
        raise InvalidInputError(f"voxel_size must be positive, got {voxel_size}")
    pos = cloud.positions
    coords = np.floor(pos / voxel_size).astype(np.int64)
    keys = pack_voxel_coords(coords)

    # Canonical in-cell aggregation order: position-lex, then index. This
    # keeps cell means bit-reproducible under input permutation.
    n = pos.shape[0]
    order = np.lexsort((np.arange(n), pos[:, 2], pos[:, 1], pos[:, 0], keys))
    keys_s = keys[order]
    uniq_keys, starts, counts = np.unique(keys_s, return_index=True, return_counts=True)

    occ = coords[order[starts]]
    centroid = np.add.reduceat(pos[order], starts) / counts[:, None]
    if cloud.features is not None:
        feats = np.add.reduceat(cloud.features[order], starts) / counts[:, None]
    else:
        feats = np.empty((uniq_keys.shape[0], 0), dtype=np.float64)
    return SparseVoxelGrid(
        voxel_size=float(voxel_size),
        occupied=occ,
        cell_features=feats,
        cell_centroid=centroid,
        cell_count=counts.astype(np.int64),
    )


def kernel_window_topology(occupied: np.ndarray | SparseVoxelGrid) -> NeighborhoodTopology:
    """3x3x3 window topology on occupied voxels: T_i holds every occupied
    voxel within Chebyshev distance 1 of voxel i, self included."""
    if isinstance(occupied, SparseVoxelGrid):
        coords = occupied.occupied
    else:
        coords = np.asarray(occupied, dtype=np.int64)
    m = coords.shape[0]
    if m < 1:
        raise InvalidInputError("empty voxel grid")
    keys = pack_voxel_coords(coords)
    # Cells may arrive in any order; search against a sorted view and map
    # matches back to the caller's token indices.
    order = np.argsort(keys)
    sorted_keys = keys[order]
    if m > 1 and np.any(sorted_keys[1:] == sorted_keys[:-1]):
        raise InvalidInputError("duplicate voxel coordinates")

    offsets = np.array(
        [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
        dtype=np.int64,
    )
    hits = []
    for off in offsets:
        probe = coords + off
        in_range = np.all(np.abs(probe) < _VOXEL_COORD_BOUND, axis=1)
        pk = np.where(in_range, pack_voxel_coords(np.clip(probe, -_VOXEL_COORD_BOUND + 1, _VOXEL_COORD_BOUND - 1)), -1)
        loc = np.searchsorted(sorted_keys, pk)
        loc_c = np.minimum(loc, m - 1)
        found = in_range & (sorted_keys[loc_c] == pk)
        hits.append(np.where(found, order[loc_c], -1))
    hit_mat = np.stack(hits, axis=1)  # (m, 27), -1 marks unoccupied offsets

    counts = (hit_mat >= 0).sum(axis=1)
    indptr = np.concatenate(([0], np.cumsum(counts, dtype=np.int64)))
    # The offsets enumerate the window in lexicographic order, so keeping
    # per-row hits in offset order lists neighbors by ascending cell
    # coordinates — a canonical order that does not depend on how the
    # caller numbered the cells.
    indices = hit_mat[hit_mat >= 0]
    return NeighborhoodTopology(kind="kernel_window", indptr=indptr, indices=indices)


# ---------------------------------------------------------------------------
# Point-cloud file formats.
#
# Text: one point per line, whitespace-separated `x y z [f1 ... fd]`,
# `#` starts a comment. Binary: magic `GPC1`, little-endian u32 N, u32 d,
# then N*(3+d) little-endian f32 values, row-major.
# ---------------------------------------------------------------------------

GPC_MAGIC = b"GPC1"


def load_point_cloud(path) -> PointCloud:
    """Load a point cloud, sniffing binary (`GPC1` magic) vs text."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == GPC_MAGIC:
        return load_point_cloud_binary(path)
    return load_point_cloud_text(path)


def load_point_cloud_text(path) -> PointCloud:
    from .errors import FormatError

    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) < 3:
                raise FormatError(f"{path}:{lineno}: expected at least x y z")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise FormatError(
                    f"{path}:{lineno}: inconsistent column count ({len(parts)} vs {width})"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    if not rows:
        raise FormatError(f"{path}: no points")
    arr = np.asarray(rows, dtype=np.float64)
    feats = arr[:, 3:] if arr.shape[1] > 3 else None
    return PointCloud(positions=arr[:, :3], features=feats)


def load_point_cloud_binary(path) -> PointCloud:
    from .errors import FormatError

    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != GPC_MAGIC:
        raise FormatError(f"{path}: bad magic (expected GPC1)")
    n = int(np.frombuffer(data, dtype="<u4", count=1, offset=4)[0])
    d = int(np.frombuffer(data, dtype="<u4", count=1, offset=8)[0])
    need = 12 + 4 * n * (3 + d)
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes for N={n} d={d}, got {len(data)}")
    vals = np.frombuffer(data, dtype="<f4", count=n * (3 + d), offset=12)
    arr = vals.reshape(n, 3 + d).astype(np.float64)
    feats = arr[:, 3:] if d > 0 else None
    return PointCloud(positions=arr[:, :3], features=feats)


def save_point_cloud_binary(path, positions: np.ndarray, features: np.ndarray | None) -> None:
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if features is None:
        features = np.empty((n, 0))
    features = np.asarray(features, dtype=np.float64)
    d = features.shape[1]
    rows = np.hstack([positions, features]).astype("<f4")
    with open(path, "wb") as f:
        f.write(GPC_MAGIC)
        f.write(np.asarray([n, d], dtype="<u4").tobytes())
        f.write(rows.tobytes())
