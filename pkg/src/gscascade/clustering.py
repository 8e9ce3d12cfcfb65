"""Coarse-to-fine cluster hierarchy over Gaussian centers.

The finest layer comes from Lloyd k-means (farthest-point seeded, so a fixed
seed gives a fixed result); every coarser layer merges the finer layer's
clusters with average-linkage agglomeration on their centroids. Assignments
are therefore nested by construction: all members of a fine cluster share one
coarse parent.

k-means is written for general (N, D) data because motion-feature
segmentation reuses it with D = 15*T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_LLOYD_TOL = 1e-7
_LLOYD_MAX_ITERS = 300


def _farthest_point_seeds(points, k, rng):
    """k-means++-style seeding: random first pick, then greedy farthest points."""
    n = points.shape[0]
    seeds = np.empty(k, dtype=np.int64)
    seeds[0] = rng.integers(n)
    d2 = np.sum((points - points[seeds[0]]) ** 2, axis=-1)
    for i in range(1, k):
        seeds[i] = int(np.argmax(d2))
        d2 = np.minimum(d2, np.sum((points - points[seeds[i]]) ** 2, axis=-1))
    return points[seeds].copy()


def _assign(points, centroids):
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1), d2


def kmeans(points, k, seed=0):
    """Lloyd k-means on (N, D) data. Returns (assignments (N,), centroids (k, D)).

    Deterministic for a fixed seed. Empty clusters are repaired by splitting
    the largest cluster (its farthest member becomes the new centroid). Every
    point ends up assigned to its nearest returned centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds number of points ({n})")
    rng = np.random.default_rng(seed)
    centroids = _farthest_point_seeds(points, k, rng)

    for _ in range(_LLOYD_MAX_ITERS):
        assign, d2 = _assign(points, centroids)
        _repair_empty(assign, d2, k)
        new_centroids = np.empty_like(centroids)
        for j in range(k):
            new_centroids[j] = points[assign == j].mean(axis=0)
        shift = np.max(np.linalg.norm(new_centroids - centroids, axis=-1))
        centroids = new_centroids
        if shift <= _LLOYD_TOL:
            break
    # final re-assignment so the nearest-centroid postcondition holds exactly;
    # a converged solution keeps every cluster nonempty, but exact-tie
    # degeneracies still get the repair pass
    assign, d2 = _assign(points, centroids)
    _repair_empty(assign, d2, k)
    return assign, centroids


def _repair_empty(assign, d2, k):
    """Give every empty cluster the farthest member of the largest cluster."""
    for j in range(k):
        if not np.any(assign == j):
            counts = np.bincount(assign, minlength=k)
            big = int(np.argmax(counts))
            members_big = np.nonzero(assign == big)[0]
            far = members_big[int(np.argmax(d2[members_big, big]))]
            assign[far] = j


def agglomerate(points, target_k):
    """Average-linkage agglomeration of (M, D) points down to target_k groups.

    Returns group labels (M,) in [0, target_k). Merges the closest pair of
    groups (mean pairwise member distance, via the Lance-Williams update)
    until target_k remain; distance ties break on the lowest index pair, so
    the result is deterministic. Labels are ordered by each group's smallest
    member index.
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if target_k < 1:
        raise ValueError("target_k must be >= 1")
    if target_k > m:
        raise ValueError(f"target_k={target_k} exceeds number of points ({m})")

    d = np.sqrt(np.maximum(np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1), 0.0))
    np.fill_diagonal(d, np.inf)
    sizes = np.ones(m)
    alive = np.ones(m, dtype=bool)
    parent = np.arange(m)

    for _ in range(m - target_k):
        masked = np.where(alive[:, None] & alive[None, :], d, np.inf)
        flat = int(np.argmin(masked))  # ties: lowest flat index == lowest (i, j)
        i, j = divmod(flat, m)
        if i > j:
            i, j = j, i
        # average linkage: d(i∪j, l) = (n_i d_il + n_j d_jl) / (n_i + n_j)
        ni, nj = sizes[i], sizes[j]
        newd = (ni * d[i] + nj * d[j]) / (ni + nj)
        d[i] = newd
        d[:, i] = newd
        d[i, i] = np.inf
        alive[j] = False
        sizes[i] = ni + nj
        parent[parent == j] = i

    roots = np.unique(parent)  # sorted -> labels ordered by smallest member
    labels = np.searchsorted(roots, parent)
    return labels


@dataclass
class ClusterHierarchy:
    """Nested K-layer partition of one Gaussian set, coarsest layer first.

    centroids hold the arithmetic mean of each cluster's member centers;
    parent_maps[k] sends layer-(k+1) cluster ids to their layer-k parents.
    """

    layer_sizes: tuple  # K ints, coarsest first
    assignments: list  # K arrays (N,) of cluster ids
    centroids: list  # K arrays (layer_sizes[k], 3)
    parent_maps: list  # K-1 arrays, fine id -> coarse id
    seed: int = 0

    @property
    def num_layers(self):
        return len(self.layer_sizes)

    @property
    def n(self):
        return self.assignments[0].shape[0]

    def update_centroids(self, centers):
        """Recompute every layer's centroids as exact member means of `centers`."""
        centers = np.asarray(centers, dtype=np.float64)
        for k in range(self.num_layers):
            self.centroids[k] = _member_means(centers, self.assignments[k], self.layer_sizes[k])

    def to_payload(self):
        return {
            "layer_sizes": [int(s) for s in self.layer_sizes],
            "assignments": [a.tolist() for a in self.assignments],
            "centroids": [c.tolist() for c in self.centroids],
            "parent_maps": [p.tolist() for p in self.parent_maps],
            "seed": int(self.seed),
        }

    @classmethod
    def from_payload(cls, payload):
        return cls(
            layer_sizes=tuple(payload["layer_sizes"]),
            assignments=[np.asarray(a, dtype=np.int64) for a in payload["assignments"]],
            centroids=[np.asarray(c, dtype=np.float64) for c in payload["centroids"]],
            parent_maps=[np.asarray(p, dtype=np.int64) for p in payload["parent_maps"]],
            seed=int(payload.get("seed", 0)),
        )


def _member_means(centers, assign, size):
    sums = np.zeros((size, centers.shape[1]))
    np.add.at(sums, assign, centers)
    counts = np.bincount(assign, minlength=size).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("empty cluster in hierarchy")
    return sums / counts[:, None]


def build_hierarchy(centers, layer_sizes, seed=0):
    """Build the nested hierarchy over (N, 3) centers.

    layer_sizes are coarsest-first and must be non-decreasing (equal adjacent
    sizes are allowed and give identical layers); the finest size must not
    exceed N. The finest layer is k-means; coarser layers agglomerate the
    next-finer layer's centroids.
    """
    centers = np.asarray(centers, dtype=np.float64)
    layer_sizes = tuple(int(s) for s in layer_sizes)
    if not layer_sizes:
        raise ValueError("need at least one layer")
    if any(a > b for a, b in zip(layer_sizes, layer_sizes[1:])):
        raise ValueError("layer_sizes must be non-decreasing (coarsest first)")
    if layer_sizes[-1] > centers.shape[0]:
        raise ValueError("finest layer size exceeds number of points")

    fine_assign, _ = kmeans(centers, layer_sizes[-1], seed=seed)
    assignments = [fine_assign]
    parent_maps = []
    for size in reversed(layer_sizes[:-1]):
        child_assign = assignments[0]
        child_centroids = _member_means(centers, child_assign, child_assign.max() + 1)
        pmap = agglomerate(child_centroids, size).astype(np.int64)
        assignments.insert(0, pmap[child_assign])
        parent_maps.insert(0, pmap)

    hier = ClusterHierarchy(
        layer_sizes=layer_sizes,
        assignments=assignments,
        centroids=[None] * len(layer_sizes),
        parent_maps=parent_maps,
        seed=seed,
    )
    hier.update_centroids(centers)
    return hier


def recluster(centers, hierarchy):
    """Rebuild the hierarchy from current centers, keeping sizes and seed."""
    return build_hierarchy(centers, hierarchy.layer_sizes, seed=hierarchy.seed)
