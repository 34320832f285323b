"""Behavior clustering: mean pooling, HDBSCAN, PCA projection.

HDBSCAN is implemented directly: core distances, mutual reachability,
a dense Prim minimum spanning tree, single-linkage condensation at the
minimum cluster size, and excess-of-mass cluster extraction. Points
that never join a stable cluster are labeled -1.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError


@dataclass
class ClusterParams:
    min_cluster_size: int = 15
    min_samples: int = 5

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ContractError(f"min_cluster_size must be >= 2, got {self.min_cluster_size}")
        if self.min_samples < 1:
            raise ContractError(f"min_samples must be >= 1, got {self.min_samples}")


@dataclass
class ClusterModel:
    """Labels plus the condensed hierarchy and retained pooled vectors."""

    labels: np.ndarray                      # (n,) int32, -1 = noise
    pooled: np.ndarray                      # (n, dim) float32
    chunk_ids: list
    params: ClusterParams
    condensed: np.ndarray                   # rows (parent, child, lambda, size)
    stabilities: dict = field(default_factory=dict)
    selected: list = field(default_factory=list)
    tau: dict = field(default_factory=dict)  # label -> distance threshold

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) and self.labels.max() >= 0 else 0

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def mean_pool(embeddings, padding) -> np.ndarray:
    """Average a (time, dim) embedding over its non-padded rows."""
    emb = np.asarray(embeddings, dtype=np.float64)
    mask = np.asarray(padding).astype(bool)
    if not mask.any():
        raise ContractError("mean_pool: chunk has no real rows")
    return emb[mask].mean(axis=0).astype(np.float32)


def pool_embeddings(embeddings, paddings) -> np.ndarray:
    """Batched mean_pool over (n, time, dim) with (n, time) padding flags."""
    emb = np.asarray(embeddings, dtype=np.float64)
    mask = np.asarray(paddings, dtype=np.float64)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ContractError("pool_embeddings: some chunk has no real rows")
    pooled = (emb * mask[:, :, None]).sum(axis=1) / counts[:, None]
    return pooled.astype(np.float32)


def _distance_row(points, i):
    diff = points - points[i]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def core_distances(points, min_samples: int) -> np.ndarray:
    """Distance from each point to its min_samples-th nearest neighbor."""
    n = len(points)
    k = min(min_samples, n - 1)
    out = np.empty(n)
    for i in range(n):
        row = _distance_row(points, i)
        out[i] = np.partition(row, k)[k]
    return out


def mutual_reachability_mst(points, core) -> np.ndarray:
    """Prim MST over mutual reachability distances; rows (a, b, weight).

    Mutual reachability of two points is the max of their core distances
    and their Euclidean distance. Dense O(n^2) scan, O(n) memory.
    """
    n = len(points)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    edge_from = np.zeros(n, dtype=np.int64)
    edges = np.empty((n - 1, 3))
    current = 0
    in_tree[0] = True
    for step in range(n - 1):
        d = _distance_row(points, current)
        mreach = np.maximum(np.maximum(core[current], core), d)
        closer = (mreach < best) & ~in_tree
        best[closer] = mreach[closer]
        edge_from[closer] = current
        candidates = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(candidates))
        edges[step] = (edge_from[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        best[nxt] = np.inf
        current = nxt
    return edges


def _single_linkage(edges, n):
    """Union MST edges in weight order into a scipy-style merge table."""
    order = np.argsort(edges[:, 2], kind="stable")
    parent = np.arange(2 * n - 1, dtype=np.int64)
    cluster_of = np.arange(2 * n - 1, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    linkage = np.empty((n - 1, 4))
    sizes = {i: 1 for i in range(n)}
    for new_id, ei in enumerate(order, start=n):
        a, b, w = edges[ei]
        ra, rb = find(int(a)), find(int(b))
        ca, cb = cluster_of[ra], cluster_of[rb]
        linkage[new_id - n] = (ca, cb, w, sizes[ca] + sizes[cb])
        parent[ra] = new_id
        parent[rb] = new_id
        cluster_of[new_id] = new_id
        sizes[new_id] = sizes[ca] + sizes[cb]
    return linkage


def _condense(linkage, n, min_cluster_size):
    """Strip sub-minimum splits; rows (parent, child, lambda, child_size).

    Condensed cluster ids start at n (the root). A child below n is a
    point falling out of its parent at the given density level.
    """
    def children(node):
        row = linkage[node - n]
        return int(row[0]), int(row[1]), float(row[2])

    def subtree_size(node):
        return 1 if node < n else int(linkage[node - n][3])

    def leaves(node):
        out, stack = [], [node]
        while stack:
            v = stack.pop()
            if v < n:
                out.append(v)
            else:
                a, b, _ = children(v)
                stack.extend((a, b))
        return out

    root = 2 * n - 2
    rows = []
    next_label = n + 1
    stack = [(root, n)]
    while stack:
        node, cluster = stack.pop()
        while True:
            a, b, w = children(node)
            lam = 1.0 / w if w > 0 else np.inf
            big_a = subtree_size(a) >= min_cluster_size
            big_b = subtree_size(b) >= min_cluster_size
            if big_a and big_b:
                for child in (a, b):
                    rows.append((cluster, next_label, lam, subtree_size(child)))
                    stack.append((child, next_label))
                    next_label += 1
                break
            if not big_a and not big_b:
                for point in leaves(node):
                    rows.append((cluster, point, lam, 1))
                break
            small, node = (b, a) if big_a else (a, b)
            for point in leaves(small):
                rows.append((cluster, point, lam, 1))
            if node < n:  # can only happen when min_cluster_size == 1
                rows.append((cluster, node, lam, 1))
                break
    return np.array(rows, dtype=np.float64)


def _stability(condensed, n):
    births = {n: 0.0}
    for parent, child, lam, _ in condensed:
        if child >= n:
            births[int(child)] = lam
    stability = {c: 0.0 for c in births}
    for parent, child, lam, size in condensed:
        p = int(parent)
        stability[p] += (lam - births[p]) * size
    return stability


def _extract_eom(condensed, stability, n):
    """Excess-of-mass selection; ties keep the parent, the root never wins."""
    cluster_children: dict[int, list] = {c: [] for c in stability}
    cluster_parent = {}
    for parent, child, lam, _ in condensed:
        if child >= n:
            cluster_children[int(parent)].append(int(child))
            cluster_parent[int(child)] = int(parent)

    chosen = {}
    subtree = {}
    for c in sorted(stability, reverse=True):
        kids = cluster_children[c]
        if not kids:
            chosen[c] = c != n
            subtree[c] = stability[c]
            continue
        child_sum = sum(subtree[k] for k in kids)
        if c != n and stability[c] >= child_sum:
            chosen[c] = True
            subtree[c] = stability[c]
        else:
            chosen[c] = False
            subtree[c] = child_sum

    selected = []
    stack = [n]
    while stack:
        c = stack.pop()
        if chosen[c]:
            selected.append(c)
        else:
            stack.extend(cluster_children[c])
    return sorted(selected), cluster_parent


def hdbscan(pooled, params: ClusterParams, chunk_ids=None) -> ClusterModel:
    """Cluster pooled vectors; unstable points get label -1."""
    points = np.asarray(pooled, dtype=np.float64)
    n = len(points)
    chunk_ids = list(chunk_ids) if chunk_ids is not None else [str(i) for i in range(n)]
    if n < params.min_cluster_size:
        warnings.warn(f"only {n} points for min_cluster_size {params.min_cluster_size}; all noise")
        return ClusterModel(
            labels=np.full(n, -1, dtype=np.int32), pooled=points.astype(np.float32),
            chunk_ids=chunk_ids, params=params,
            condensed=np.zeros((0, 4)), stabilities={}, selected=[])

    core = core_distances(points, params.min_samples)
    edges = mutual_reachability_mst(points, core)
    linkage = _single_linkage(edges, n)
    condensed = _condense(linkage, n, params.min_cluster_size)
    stability = _stability(condensed, n)
    selected, cluster_parent = _extract_eom(condensed, stability, n)
    label_of_cluster = {c: i for i, c in enumerate(selected)}

    point_parent = {}
    for parent, child, lam, _ in condensed:
        if child < n:
            point_parent[int(child)] = int(parent)

    labels = np.full(n, -1, dtype=np.int32)
    for point, cluster in point_parent.items():
        c = cluster
        while c is not None:
            if c in label_of_cluster:
                labels[point] = label_of_cluster[c]
                break
            c = cluster_parent.get(c)

    return ClusterModel(
        labels=labels, pooled=points.astype(np.float32), chunk_ids=chunk_ids,
        params=params, condensed=condensed, stabilities=stability, selected=selected)


def cluster_distance_stats(model: ClusterModel, percentile: float = 95.0) -> dict:
    """Per-cluster distance threshold: the given percentile of each
    member's distance to its nearest same-cluster member."""
    if model.n_clusters < 1:
        raise ContractError("cluster_distance_stats: model has no clusters")
    tau = {}
    pts = model.pooled.astype(np.float64)
    for label in range(model.n_clusters):
        members = pts[model.labels == label]
        diff = members[:, None, :] - members[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        np.fill_diagonal(dist, np.inf)
        tau[label] = float(np.percentile(dist.min(axis=1), percentile))
    model.tau = tau
    return tau


@dataclass
class PcaResult:
    projection: np.ndarray
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    rank_deficient: bool

    def back_project(self):
        return self.projection @ self.components + self.mean


def pca_project(points, out_dim: int = 3) -> PcaResult:
    """Center, SVD, keep the top components.

    Component signs follow a fixed convention (largest-magnitude loading
    positive) so projections are reproducible.
    """
    X = np.asarray(points, dtype=np.float64)
    if len(X) <= out_dim:
        raise ContractError(f"pca needs more than {out_dim} points, got {len(X)}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    total = float((s ** 2).sum())
    rank = int((s > max(s[0], 1e-300) * 1e-12).sum()) if len(s) else 0
    k = min(out_dim, rank)
    comps = vt[:k].copy()
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1
    ratios = (s[:k] ** 2) / total if total > 0 else np.zeros(k)
    return PcaResult(
        projection=Xc @ comps.T,
        explained_variance_ratio=ratios,
        components=comps,
        mean=mean,
        rank_deficient=k < out_dim,
    )


# -- persistence ---------------------------------------------------------

MODEL_MAGIC = b"RPCM"
MODEL_VERSION = 1


def save_cluster_model(path, model: ClusterModel):
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<H", MODEL_VERSION))
        n, dim = model.pooled.shape
        fh.write(struct.pack("<QIII", n, dim, model.params.min_cluster_size, model.params.min_samples))
        fh.write(model.pooled.astype("<f4").tobytes())
        fh.write(model.labels.astype("<i4").tobytes())
        for cid in model.chunk_ids:
            raw = cid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<Q", len(model.condensed)))
        fh.write(model.condensed.astype("<f8").tobytes())
        fh.write(struct.pack("<Q", len(model.stabilities)))
        for c in sorted(model.stabilities):
            fh.write(struct.pack("<qd", c, model.stabilities[c]))
        fh.write(struct.pack("<Q", len(model.selected)))
        fh.write(np.asarray(sorted(model.selected), dtype="<i8").tobytes())
        fh.write(struct.pack("<Q", len(model.tau)))
        for label in sorted(model.tau):
            fh.write(struct.pack("<qd", label, model.tau[label]))


def load_cluster_model(path) -> ClusterModel:
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise FormatError(f"{path}: not a cluster model file")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != MODEL_VERSION:
            raise FormatError(f"{path}: unsupported cluster model version {version}")
        n, dim, mcs, ms = struct.unpack("<QIII", fh.read(20))
        pooled = np.frombuffer(fh.read(4 * n * dim), dtype="<f4").reshape(n, dim).copy()
        labels = np.frombuffer(fh.read(4 * n), dtype="<i4").copy()
        chunk_ids = []
        for _ in range(n):
            (ln,) = struct.unpack("<H", fh.read(2))
            chunk_ids.append(fh.read(ln).decode("utf-8"))
        (n_cond,) = struct.unpack("<Q", fh.read(8))
        condensed = np.frombuffer(fh.read(32 * n_cond), dtype="<f8").reshape(n_cond, 4).copy()
        (n_stab,) = struct.unpack("<Q", fh.read(8))
        stabilities = {}
        for _ in range(n_stab):
            c, v = struct.unpack("<qd", fh.read(16))
            stabilities[c] = v
        (n_sel,) = struct.unpack("<Q", fh.read(8))
        selected = np.frombuffer(fh.read(8 * n_sel), dtype="<i8").tolist()
        (n_tau,) = struct.unpack("<Q", fh.read(8))
        tau = {}
        for _ in range(n_tau):
            label, v = struct.unpack("<qd", fh.read(16))
            tau[label] = v
    return ClusterModel(labels=labels, pooled=pooled, chunk_ids=chunk_ids,
                        params=ClusterParams(mcs, ms), condensed=condensed,
                        stabilities=stabilities, selected=selected, tau=tau)


def export_assignments_csv(path, model: ClusterModel):
    with open(path, "w") as fh:
        fh.write("chunk_id,label\n")
        for cid, label in zip(model.chunk_ids, model.labels):
            fh.write(f"{cid},{int(label)}\n")


def export_condensed_csv(path, model: ClusterModel):
    with open(path, "w") as fh:
        fh.write("parent,child,lambda,size\n")
        for parent, child, lam, size in model.condensed:
            fh.write(f"{int(parent)},{int(child)},{repr(float(lam))},{int(size)}\n")


def export_pca_csv(path, model: ClusterModel, out_dim: int = 3):
    res = pca_project(model.pooled, out_dim=out_dim)
    cols = ",".join(f"pc{i + 1}" for i in range(res.projection.shape[1]))
    with open(path, "w") as fh:
        fh.write(f"chunk_id,{cols},label\n")
        for cid, row, label in zip(model.chunk_ids, res.projection, model.labels):
            vals = ",".join(repr(float(v)) for v in row)
            fh.write(f"{cid},{vals},{int(label)}\n")
    return res
