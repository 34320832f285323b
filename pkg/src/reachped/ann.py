"""Approximate nearest neighbors over pooled embeddings.

A forest of random-hyperplane trees: each split projects onto the
normalized difference of two sampled points, thresholded at their
midpoint. Queries descend every tree to its home leaf, then backtrack
best-first under a node budget. Reported distances are always exact
Euclidean distances; the approximation only affects which candidates
are examined.
"""
from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .rng import named_stream

INDEX_MAGIC = b"RPAN"
INDEX_VERSION = 1


class _Node:
    __slots__ = ("direction", "offset", "left", "right", "items")

    def __init__(self, direction=None, offset=0.0, left=None, right=None, items=None):
        self.direction = direction
        self.offset = offset
        self.left = left
        self.right = right
        self.items = items

    @property
    def is_leaf(self):
        return self.items is not None


def _build_node(vectors, indices, leaf_capacity, rng):
    if len(indices) <= leaf_capacity:
        return _Node(items=indices)
    direction = None
    for _ in range(8):
        a, b = rng.choice(len(indices), size=2, replace=False)
        delta = vectors[indices[a]] - vectors[indices[b]]
        norm = float(np.linalg.norm(delta))
        if norm > 0:
            direction = delta / norm
            offset = float(direction @ (vectors[indices[a]] + vectors[indices[b]]) / 2.0)
            break
    if direction is None:
        return _Node(items=indices)
    side = vectors[indices] @ direction - offset
    left = indices[side < 0]
    right = indices[side >= 0]
    if len(left) == 0 or len(right) == 0:
        return _Node(items=indices)
    return _Node(direction=direction, offset=offset,
                 left=_build_node(vectors, left, leaf_capacity, rng),
                 right=_build_node(vectors, right, leaf_capacity, rng))


@dataclass
class Neighbor:
    index: int
    distance: float
    label: int


@dataclass
class Assignment:
    status: str              # "ok" or "rejected"
    label: int = -1
    distance: float = float("inf")
    neighbor: int = -1
    reason: str = ""         # "no_data" or "too_far" when rejected


class AnnForest:
    """Immutable random-hyperplane tree forest over labeled vectors.

    ``tau`` optionally carries per-label distance thresholds measured in
    the same vector space as the items, for the cluster distance filter.
    """

    def __init__(self, vectors, labels, ids=None, n_trees: int = 10,
                 leaf_capacity: int = 32, seed: int = 0, tau: dict | None = None):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(vectors) == 0:
            raise ContractError("AnnForest needs a non-empty (n, dim) vector table")
        self.vectors = vectors
        self.labels = np.asarray(labels, dtype=np.int32)
        if len(self.labels) != len(vectors):
            raise ContractError("labels and vectors disagree in length")
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(vectors))]
        self.n_trees = n_trees
        self.leaf_capacity = leaf_capacity
        self.seed = seed
        self.tau = dict(tau or {})
        all_idx = np.arange(len(vectors), dtype=np.int64)
        self.trees = [
            _build_node(self.vectors, all_idx, leaf_capacity, named_stream(seed, "tree", t))
            for t in range(n_trees)
        ]

    # -- queries --------------------------------------------------------

    def default_budget(self, k: int) -> int:
        """Backtracking node budget for the fast path."""
        return self.n_trees * k * 8

    def query(self, q, k: int, search_budget: int | None = None):
        """k nearest neighbors, ascending by exact distance.

        With ``search_budget=None`` (the default) the search is
        exhaustive and therefore exact: on concentrated high-dimensional
        data no forest of this kind reaches high recall under a small
        node budget, so exactness is the safe default at this scale.
        Passing a budget enables the approximate fast path: home leaves
        of every tree plus best-first backtracking over at most that
        many node visits.
        """
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.vectors.shape[1]:
            raise ContractError(f"query dim {q.shape[0]} != index dim {self.vectors.shape[1]}")
        n = len(self.vectors)
        if k >= n or search_budget is None:
            candidates = np.arange(n)
        else:
            candidates = self._gather(q, int(search_budget))
        diff = self.vectors[candidates] - q
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        order = np.lexsort((candidates, dist))[:k]
        return [Neighbor(int(candidates[i]), float(dist[i]), int(self.labels[candidates[i]]))
                for i in order]

    def _gather(self, q, budget):
        found = set()
        heap = []
        counter = 0
        for root in self.trees:
            node = root
            while not node.is_leaf:
                margin = float(q @ node.direction - node.offset)
                near, far = (node.left, node.right) if margin < 0 else (node.right, node.left)
                heapq.heappush(heap, (abs(margin), counter, far))
                counter += 1
                node = near
            found.update(node.items.tolist())
        visited = 0
        while heap and visited < budget:
            bound, _, node = heapq.heappop(heap)
            visited += 1
            while not node.is_leaf and visited < budget:
                margin = float(q @ node.direction - node.offset)
                near, far = (node.left, node.right) if margin < 0 else (node.right, node.left)
                heapq.heappush(heap, (max(bound, abs(margin)), counter, far))
                counter += 1
                node = near
                visited += 1
            if node.is_leaf:
                found.update(node.items.tolist())
        return np.fromiter(found, dtype=np.int64)

    def assign_cluster(self, q, tau: dict | None = None, k: int = 10) -> Assignment:
        """Cluster of the nearest non-noise neighbor, distance-filtered.

        Rejections are values: ``no_data`` when every candidate is noise,
        ``too_far`` when the nearest non-noise hit exceeds its cluster's
        distance threshold. Uses the budgeted fast path; clustered
        embeddings are benign for hyperplane trees.
        """
        if tau is None:
            tau = self.tau
        for nb in self.query(q, k, search_budget=self.default_budget(k)):
            if nb.label < 0:
                continue
            if nb.label in tau and nb.distance > tau[nb.label]:
                return Assignment(status="rejected", label=nb.label,
                                  distance=nb.distance, neighbor=nb.index, reason="too_far")
            return Assignment(status="ok", label=nb.label,
                              distance=nb.distance, neighbor=nb.index)
        return Assignment(status="rejected", reason="no_data")


def save_index(path, forest: AnnForest):
    """Persist seeded parameters and the item table; trees are rebuilt
    deterministically on load."""
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<H", INDEX_VERSION))
        n, dim = forest.vectors.shape
        fh.write(struct.pack("<IIqQI", forest.n_trees, forest.leaf_capacity,
                             forest.seed, n, dim))
        fh.write(forest.vectors.astype("<f8").tobytes())
        fh.write(forest.labels.astype("<i4").tobytes())
        for cid in forest.ids:
            raw = cid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


def load_index(path) -> AnnForest:
    with open(path, "rb") as fh:
        if fh.read(4) != INDEX_MAGIC:
            raise FormatError(f"{path}: not an ANN index file")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != INDEX_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        n_trees, leaf_capacity, seed, n, dim = struct.unpack("<IIqQI", fh.read(28))
        vectors = np.frombuffer(fh.read(8 * n * dim), dtype="<f8").reshape(n, dim).copy()
        labels = np.frombuffer(fh.read(4 * n), dtype="<i4").copy()
        ids = []
        for _ in range(n):
            (ln,) = struct.unpack("<H", fh.read(2))
            ids.append(fh.read(ln).decode("utf-8"))
    return AnnForest(vectors, labels, ids=ids, n_trees=n_trees,
                     leaf_capacity=leaf_capacity, seed=seed)
