"""Multi-level coarsening hierarchies.

A hierarchy carries, per level, the coarsened q/k/v rows, token positions,
the local neighborhood topology, and the parent map that links each token
to the next-coarser level. Structure (topologies, parent maps, positions)
depends only on geometry; values can be swapped out and re-coarsened
through the same structure with ``with_values``.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidCoarsenError, InvalidInputError
from .geometry import (
    NeighborhoodTopology,
    deterministic_knn,
    fps_from_positions,
    kernel_window_topology,
    knn_from_positions,
    pack_voxel_coords,
)

# Max occupancy of the 3x3x3 voxel window; doubles as the voxel-flavor
# stopping threshold (a level this small fits one neighborhood).
VOXEL_WINDOW_K = 27


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def segment_mean(values: np.ndarray, indptr: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Row i of the result is the mean of ``values[indices[indptr[i]:indptr[i+1]]]``.

    Every segment must be non-empty.
    """
    gathered = values[indices]
    sums = np.add.reduceat(gathered, indptr[:-1], axis=0)
    sizes = np.diff(indptr)
    return sums / sizes[:, None]


def _coordinate_ordered_groups(
    indptr: np.ndarray, indices: np.ndarray, positions: np.ndarray
) -> np.ndarray:
    """Reorder each CSR group by member coordinates (lexicographic, then
    index). Neighbor lists are stored in per-query distance order, so two
    tokens with the same neighborhood set would otherwise average it in
    different orders and round to different coarse rows; summing in a
    query-independent order keeps such tokens bitwise identical, which the
    exact-tie rules downstream rely on."""
    gid = np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))
    p = positions[indices]
    order = np.lexsort((indices, p[:, 2], p[:, 1], p[:, 0], gid))
    return indices[order]


@dataclass(frozen=True)
class HierarchyLevel:
    """One resolution of the hierarchy.

    ``parent_of`` maps this level's tokens to the next-coarser level and is
    None at the top. ``selected`` (point flavor) lists the finer-level
    indices this level was subsampled from; ``coords`` (voxel flavor) are
    this level's integer cell coordinates.
    """

    level_index: int
    positions: np.ndarray  # (n_h, 3) float64
    q_tilde: np.ndarray  # (n_h, d)
    k_tilde: np.ndarray  # (n_h, d)
    v_tilde: np.ndarray  # (n_h, d_v)
    topology: NeighborhoodTopology
    parent_of: np.ndarray | None = None  # (n_h,) int64 into level h+1
    selected: np.ndarray | None = None
    coords: np.ndarray | None = None  # (n_h, 3) int64

    def __post_init__(self):
        for name in ("positions", "q_tilde", "k_tilde", "v_tilde"):
            object.__setattr__(self, name, _freeze(np.asarray(getattr(self, name), dtype=np.float64)))
        for name in ("parent_of", "selected", "coords"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _freeze(np.asarray(val, dtype=np.int64)))
        n = self.positions.shape[0]
        for name in ("q_tilde", "k_tilde", "v_tilde"):
            if getattr(self, name).shape[0] != n:
                raise InvalidInputError(f"{name} must have {n} rows")
        if self.topology.n_tokens != n:
            raise InvalidInputError("topology token count does not match level size")

    @property
    def n_tokens(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class Hierarchy:
    flavor: str  # "point" | "voxel"
    neighborhood_k: int
    coarsen_ratio: int
    levels: tuple[HierarchyLevel, ...]

    def __post_init__(self):
        if self.flavor not in ("point", "voxel"):
            raise InvalidInputError(f"unknown flavor {self.flavor!r}")
        if not self.levels:
            raise InvalidInputError("hierarchy has no levels")
        for h in range(len(self.levels) - 1):
            if self.levels[h + 1].n_tokens >= self.levels[h].n_tokens:
                raise InvalidInputError("levels must be strictly coarsening")
            if self.levels[h].parent_of is None:
                raise InvalidInputError(f"level {h} is missing its parent map")

    @property
    def depth(self) -> int:
        """H: index of the top level."""
        return len(self.levels) - 1

    @property
    def n_tokens(self) -> int:
        return self.levels[0].n_tokens

    def level_sizes(self) -> list[int]:
        return [lv.n_tokens for lv in self.levels]


def children_csr(parent_of: np.ndarray, n_parents: int) -> tuple[np.ndarray, np.ndarray]:
    """Invert a parent map into CSR child lists, children ascending."""
    counts = np.bincount(parent_of, minlength=n_parents)
    indptr = np.concatenate(([0], np.cumsum(counts, dtype=np.int64)))
    order = np.argsort(parent_of, kind="stable").astype(np.int64)
    return indptr, order


def _voxel_children_csr(
    child_coords: np.ndarray, parent_of: np.ndarray, n_parents: int
) -> tuple[np.ndarray, np.ndarray]:
    """CSR child lists with each group ordered by child cell coordinates.

    Cell keys are unique, so this order is total and independent of token
    numbering; pooled means then round identically however the caller
    ordered the cells."""
    counts = np.bincount(parent_of, minlength=n_parents)
    indptr = np.concatenate(([0], np.cumsum(counts, dtype=np.int64)))
    order = np.lexsort((pack_voxel_coords(child_coords), parent_of))
    return indptr, order


def children_of(hierarchy: Hierarchy, level: int, parent: int) -> np.ndarray:
    """Tokens at ``level`` whose parent at ``level + 1`` is ``parent``."""
    if not 0 <= level < hierarchy.depth:
        raise InvalidInputError(f"level {level} has no parent level")
    parent_of = hierarchy.levels[level].parent_of
    indptr, idx = children_csr(parent_of, hierarchy.levels[level + 1].n_tokens)
    return idx[indptr[parent] : indptr[parent + 1]]


# ---------------------------------------------------------------------------
# Coarsening
# ---------------------------------------------------------------------------

def coarsen_point(level: HierarchyLevel, r: int) -> tuple[HierarchyLevel, np.ndarray]:
    """One point-flavor coarsening step.

    Smooths q/k/v and positions by the neighborhood mean, keeps the
    ceil(n/r) farthest-point-sampled tokens, and assigns every fine token
    to its nearest selected token (ties to the lower selected index; a
    selected token is always its own parent). Returns the coarse level and
    the fine level's parent map.
    """
    n = level.n_tokens
    if n < 2:
        raise InvalidCoarsenError(f"cannot coarsen a level with {n} token(s)")
    if r < 2:
        raise InvalidInputError(f"coarsen ratio must be >= 2, got {r}")
    topo = level.topology
    canon = _coordinate_ordered_groups(topo.indptr, topo.indices, level.positions)
    smoothed_pos = segment_mean(level.positions, topo.indptr, canon)
    smoothed_q = segment_mean(level.q_tilde, topo.indptr, canon)
    smoothed_k = segment_mean(level.k_tilde, topo.indptr, canon)
    smoothed_v = segment_mean(level.v_tilde, topo.indptr, canon)

    m = -(-n // r)  # ceil
    selected = fps_from_positions(level.positions, m)

    parent_lists = deterministic_knn(level.positions[selected], level.positions, 1)
    parent_of = np.fromiter((int(p[0]) for p in parent_lists), dtype=np.int64, count=n)
    # Keep every parent non-empty even when duplicate positions make several
    # selected tokens equidistant: a selected token parents itself.
    parent_of[selected] = np.arange(m, dtype=np.int64)

    coarse_pos = smoothed_pos[selected]
    k = topo.k if topo.k is not None else n
    coarse = HierarchyLevel(
        level_index=level.level_index + 1,
        positions=coarse_pos,
        q_tilde=smoothed_q[selected],
        k_tilde=smoothed_k[selected],
        v_tilde=smoothed_v[selected],
        topology=knn_from_positions(coarse_pos, k),
        selected=selected,
    )
    return coarse, parent_of


def _coarsen_voxel_by(level: HierarchyLevel, halvings: int) -> tuple[HierarchyLevel, np.ndarray]:
    coords = level.coords
    if coords is None:
        raise InvalidInputError("voxel coarsening requires cell coordinates")
    parent_coords_all = np.floor_divide(coords, 2**halvings)
    keys = pack_voxel_coords(parent_coords_all)
    uniq_keys, first_idx, parent_of = np.unique(keys, return_index=True, return_inverse=True)
    parent_of = parent_of.astype(np.int64)
    m = uniq_keys.shape[0]

    indptr, child_idx = _voxel_children_csr(coords, parent_of, m)
    coarse = HierarchyLevel(
        level_index=level.level_index + 1,
        positions=segment_mean(level.positions, indptr, child_idx),
        q_tilde=segment_mean(level.q_tilde, indptr, child_idx),
        k_tilde=segment_mean(level.k_tilde, indptr, child_idx),
        v_tilde=segment_mean(level.v_tilde, indptr, child_idx),
        topology=kernel_window_topology(parent_coords_all[first_idx]),
        coords=parent_coords_all[first_idx],
    )
    return coarse, parent_of


def coarsen_voxel(level: HierarchyLevel) -> tuple[HierarchyLevel, np.ndarray]:
    """One stride-2 pooling step: parent cell = floor(child / 2) per axis,
    parent rows/positions = unweighted means over children, parents sorted
    lexicographically. Returns the coarse level and the fine parent map.
    May leave the count unchanged when no cells share a parent.
    """
    return _coarsen_voxel_by(level, 1)


def _coarsen_voxel_reducing(level: HierarchyLevel) -> tuple[HierarchyLevel, np.ndarray]:
    """Smallest power-of-two pooling that strictly reduces the cell count.

    Equivalent to repeated ``coarsen_voxel``: a non-reducing step maps each
    cell to its own parent (rows copied unchanged, lex order preserved), so
    composing those steps with the first reducing one equals pooling once
    at the combined stride.
    """
    n = level.n_tokens
    halvings = 1
    while True:
        parents = np.floor_divide(level.coords, 2**halvings)
        if np.unique(pack_voxel_coords(parents)).shape[0] < n:
            break
        halvings += 1
    return _coarsen_voxel_by(level, halvings)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def build_hierarchy(
    positions: np.ndarray,
    q: np.ndarray,
    k_mat: np.ndarray,
    v: np.ndarray,
    *,
    flavor: str = "point",
    k: int = 8,
    r: int = 2,
    coords: np.ndarray | None = None,
) -> Hierarchy:
    """Build the full hierarchy for one attention call.

    Level 0 holds the inputs unchanged; coarsening repeats until the top
    level has at most ``k`` tokens (N <= k gives a single level). Point
    flavor uses kNN topologies and ratio-r farthest-point subsampling;
    voxel flavor (pass occupied-cell ``coords``) uses 3x3x3 window
    topologies and stride-2 pooling, folding consecutive non-reducing
    halvings into one level so every recorded level strictly shrinks.
    """
    positions = np.asarray(positions, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    k_mat = np.asarray(k_mat, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = positions.shape[0]
    if n < 1:
        raise InvalidInputError("need at least one token")
    if q.shape != k_mat.shape:
        raise InvalidInputError(f"q and k shapes differ: {q.shape} vs {k_mat.shape}")
    if q.shape[0] != n or v.shape[0] != n:
        raise InvalidInputError("q/k/v row counts must match positions")

    if flavor == "point":
        if k < 1:
            raise InvalidInputError(f"k must be >= 1, got {k}")
        stop_k = k
        topo = knn_from_positions(positions, k)
        level = HierarchyLevel(
            level_index=0, positions=positions, q_tilde=q, k_tilde=k_mat, v_tilde=v, topology=topo
        )
    elif flavor == "voxel":
        if coords is None:
            raise InvalidInputError("voxel flavor requires occupied-cell coords")
        coords = np.asarray(coords, dtype=np.int64)
        if coords.shape != (n, 3):
            raise InvalidInputError(f"coords must be ({n}, 3), got {coords.shape}")
        stop_k = VOXEL_WINDOW_K
        k = VOXEL_WINDOW_K
        r = 2
        level = HierarchyLevel(
            level_index=0,
            positions=positions,
            q_tilde=q,
            k_tilde=k_mat,
            v_tilde=v,
            topology=kernel_window_topology(coords),
            coords=coords,
        )
    else:
        raise InvalidInputError(f"unknown flavor {flavor!r}")

    levels = []
    while level.n_tokens > stop_k:
        if flavor == "point":
            coarse, parent_of = coarsen_point(level, r)
        else:
            coarse, parent_of = _coarsen_voxel_reducing(level)
        levels.append(replace(level, parent_of=parent_of))
        level = coarse
    levels.append(level)
    return Hierarchy(flavor=flavor, neighborhood_k=k, coarsen_ratio=r, levels=tuple(levels))


def with_values(
    hierarchy: Hierarchy,
    q: np.ndarray | None = None,
    k: np.ndarray | None = None,
    v: np.ndarray | None = None,
) -> Hierarchy:
    """Re-coarsen new level-0 values through the existing structure.

    Only the matrices passed are replaced; geometry, topologies, and parent
    maps are shared with the input hierarchy.
    """
    n = hierarchy.n_tokens
    new_rows = {}
    for name, mat in (("q_tilde", q), ("k_tilde", k), ("v_tilde", v)):
        if mat is not None:
            mat = np.asarray(mat, dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] != n:
                raise InvalidInputError(f"replacement {name} must have {n} rows")
            new_rows[name] = mat

    levels = []
    current = dict(new_rows)
    for h, lv in enumerate(hierarchy.levels):
        levels.append(replace(lv, **current) if current else lv)
        if h == hierarchy.depth or not current:
            # Coarser values are unchanged when nothing is replaced.
            levels.extend(hierarchy.levels[h + 1 :])
            break
        nxt = hierarchy.levels[h + 1]
        if hierarchy.flavor == "point":
            topo = lv.topology
            canon = _coordinate_ordered_groups(topo.indptr, topo.indices, lv.positions)
            current = {
                name: segment_mean(mat, topo.indptr, canon)[nxt.selected]
                for name, mat in current.items()
            }
        else:
            indptr, child_idx = _voxel_children_csr(lv.coords, lv.parent_of, nxt.n_tokens)
            current = {
                name: segment_mean(mat, indptr, child_idx) for name, mat in current.items()
            }
    return Hierarchy(
        flavor=hierarchy.flavor,
        neighborhood_k=hierarchy.neighborhood_k,
        coarsen_ratio=hierarchy.coarsen_ratio,
        levels=tuple(levels),
    )


def truncate(hierarchy: Hierarchy, depth: int) -> Hierarchy:
    """Drop every level above ``depth``; depth 0 keeps only local attention."""
    if not 0 <= depth <= hierarchy.depth:
        raise InvalidInputError(f"depth must be in [0, {hierarchy.depth}], got {depth}")
    kept = list(hierarchy.levels[: depth + 1])
    kept[-1] = replace(kept[-1], parent_of=None)
    return Hierarchy(
        flavor=hierarchy.flavor,
        neighborhood_k=hierarchy.neighborhood_k,
        coarsen_ratio=hierarchy.coarsen_ratio,
        levels=tuple(kept),
    )


def interpolate(values: np.ndarray, from_level: int, hierarchy: Hierarchy) -> np.ndarray:
    """Copy each fine token its parent's row from level ``from_level``."""
    if not 1 <= from_level <= hierarchy.depth:
        raise InvalidInputError(f"from_level must be in [1, {hierarchy.depth}], got {from_level}")
    values = np.asarray(values)
    coarse = hierarchy.levels[from_level]
    fine = hierarchy.levels[from_level - 1]
    if values.shape[0] != coarse.n_tokens:
        raise InvalidInputError(
            f"values has {values.shape[0]} rows, level {from_level} has {coarse.n_tokens}"
        )
    return values[fine.parent_of]


# ---------------------------------------------------------------------------
# Text dump (debugging / golden files)
# ---------------------------------------------------------------------------

def dump_hierarchy(hierarchy: Hierarchy) -> str:
    """Render the hierarchy structure as text.

    Header line, then per level a ``level <h> n=<n_h>`` line followed by one
    token line each: ``tok <i> pos <x> <y> <z> [cell <cx> <cy> <cz>] parent <p>``
    with ``parent -`` at the top level. Floats use repr-exact %.17g.
    """
    out = [
        f"gha-hierarchy v1 flavor={hierarchy.flavor} k={hierarchy.neighborhood_k}"
        f" r={hierarchy.coarsen_ratio} levels={len(hierarchy.levels)}"
    ]
    for lv in hierarchy.levels:
        out.append(f"level {lv.level_index} n={lv.n_tokens}")
        for i in range(lv.n_tokens):
            x, y, z = lv.positions[i]
            line = f"tok {i} pos {x:.17g} {y:.17g} {z:.17g}"
            if lv.coords is not None:
                cx, cy, cz = lv.coords[i]
                line += f" cell {cx} {cy} {cz}"
            parent = "-" if lv.parent_of is None else str(int(lv.parent_of[i]))
            line += f" parent {parent}"
            out.append(line)
    return "\n".join(out) + "\n"
