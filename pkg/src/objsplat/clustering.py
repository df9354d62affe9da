"""Density clustering: DBSCAN for point-cloud floater removal and HDBSCAN
(mutual-reachability MST + condensed tree + excess-of-mass extraction) for
grouping-embedding object segmentation. Noise is labeled -1.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Classic DBSCAN. A point is core when its eps-ball holds >= min_pts
    points (itself included). Returns labels, noise = -1."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neighborhoods = tree.query_ball_point(points, eps)
    core = np.array([len(nb) >= min_pts for nb in neighborhoods])
    cluster = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        stack = [seed]
        labels[seed] = cluster
        while stack:
            q = stack.pop()
            if not core[q]:
                continue
            for nb in neighborhoods[q]:
                if labels[nb] == -1:
                    labels[nb] = cluster
                    if core[nb]:
                        stack.append(nb)
        cluster += 1
    return labels


def dbscan_filter(
    points: np.ndarray, eps: float = 0.01, min_pts: int = 8
) -> tuple[np.ndarray, np.ndarray]:
    """Remove DBSCAN noise; returns (inlier points, boolean keep mask)."""
    points = np.asarray(points, dtype=np.float64)
    labels = dbscan(points, eps, min_pts)
    keep = labels >= 0
    return points[keep], keep


def _mutual_reachability_mst(
    points: np.ndarray, core: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Prim's algorithm over the implicit complete mutual-reachability graph.

    Rows are materialized one at a time (O(N) memory, O(N^2 D) time), which
    is what keeps 10k-embedding scenes tractable without a pairwise matrix.
    """
    n = points.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    current = 0
    in_tree[current] = True
    best[current] = 0.0
    edges_a = np.empty(n - 1, dtype=np.int64)
    edges_b = np.empty(n - 1, dtype=np.int64)
    edges_w = np.empty(n - 1)
    for step in range(n - 1):
        d = np.linalg.norm(points - points[current], axis=1)
        mreach = np.maximum(np.maximum(d, core), core[current])
        better = (~in_tree) & (mreach < best)
        best[better] = mreach[better]
        parent[better] = current
        masked = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(masked))
        edges_a[step] = parent[nxt]
        edges_b[step] = nxt
        edges_w[step] = best[nxt]
        in_tree[nxt] = True
        current = nxt
    return edges_a, edges_b, edges_w


class _UnionFind:
    def __init__(self, n: int) -> None:
        self.parent = np.arange(2 * n - 1, dtype=np.int64)
        self.size = np.ones(2 * n - 1, dtype=np.int64)
        self.next_label = n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        label = self.next_label
        self.parent[a] = label
        self.parent[b] = label
        self.size[label] = self.size[a] + self.size[b]
        self.next_label += 1
        return label


def _single_linkage(edges_a, edges_b, edges_w, n: int) -> np.ndarray:
    """Dendrogram rows (left, right, dist, size) from sorted MST edges."""
    order = np.argsort(edges_w, kind="stable")
    uf = _UnionFind(n)
    rows = np.empty((n - 1, 4))
    for i, e in enumerate(order):
        ra = uf.find(int(edges_a[e]))
        rb = uf.find(int(edges_b[e]))
        rows[i] = (ra, rb, edges_w[e], uf.size[ra] + uf.size[rb])
        uf.union(ra, rb)
    return rows


def hdbscan(
    points: np.ndarray,
    min_cluster_size: int = 50,
    min_samples: int = 10,
    allow_single_cluster: bool = True,
) -> np.ndarray:
    """HDBSCAN labels (-1 = noise) via excess-of-mass cluster extraction.

    With ``allow_single_cluster`` the root competes like any other cluster,
    so a lone tight blob comes back as one cluster instead of all noise.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < max(min_cluster_size, min_samples, 2):
        return np.full(n, -1, dtype=np.int64)

    tree = cKDTree(points)
    k = min(min_samples, n)
    dists, _ = tree.query(points, k=k)
    core = dists[:, -1] if k > 1 else np.zeros(n)

    ea, eb, ew = _mutual_reachability_mst(points, core)
    dendro = _single_linkage(ea, eb, ew, n)

    # children lookup for dendrogram nodes n .. 2n-2
    left = dendro[:, 0].astype(np.int64)
    right = dendro[:, 1].astype(np.int64)
    dist = dendro[:, 2]
    sizes = np.concatenate([np.ones(n, dtype=np.int64), dendro[:, 3].astype(np.int64)])

    def node_lambda(i_row: int) -> float:
        d = dist[i_row]
        return 1.0 / max(d, 1e-12)

    # Condensed tree: walk top-down, keeping one condensed cluster per
    # surviving branch; splits where both sides >= min_cluster_size spawn
    # child clusters, smaller sides fall out point by point.
    root_node = 2 * n - 2
    cluster_parent: list[int] = [-1]
    cluster_birth: list[float] = [node_lambda(n - 2)]  # root born at first split
    cluster_stability: list[float] = [0.0]
    cluster_children: list[list[int]] = [[]]
    point_cluster = np.full(n, -1, dtype=np.int64)

    def collect_leaves(node: int) -> list[int]:
        out: list[int] = []
        stack = [node]
        while stack:
            v = stack.pop()
            if v < n:
                out.append(v)
            else:
                stack.append(left[v - n])
                stack.append(right[v - n])
        return out

    stack: list[tuple[int, int]] = [(root_node, 0)]
    while stack:
        node, cid = stack.pop()
        if node < n:
            point_cluster[node] = cid
            continue
        row = node - n
        lam = node_lambda(row)
        l_node, r_node = int(left[row]), int(right[row])
        l_size, r_size = int(sizes[l_node]), int(sizes[r_node])
        big_l = l_size >= min_cluster_size
        big_r = r_size >= min_cluster_size
        if big_l and big_r:
            for child_node in (l_node, r_node):
                new_cid = len(cluster_parent)
                cluster_parent.append(cid)
                cluster_birth.append(lam)
                cluster_stability.append(0.0)
                cluster_children.append([])
                cluster_children[cid].append(new_cid)
                stack.append((child_node, new_cid))
            cluster_stability[cid] += (l_size + r_size) * (lam - cluster_birth[cid])
        else:
            for child_node, big in ((l_node, big_l), (r_node, big_r)):
                if big:
                    stack.append((child_node, cid))
                else:
                    for leaf in collect_leaves(child_node):
                        point_cluster[leaf] = cid
                        cluster_stability[cid] += lam - cluster_birth[cid]

    n_clusters = len(cluster_parent)
    if n_clusters == 1 and not allow_single_cluster:
        return np.full(n, -1, dtype=np.int64)

    # Excess-of-mass selection, children before parents. The root competes
    # only when allow_single_cluster is set.
    selected = np.zeros(n_clusters, dtype=bool)
    subtree_stability = np.array(cluster_stability)
    lowest = 0 if allow_single_cluster else 1
    for cid in range(n_clusters - 1, lowest - 1, -1):
        children = cluster_children[cid]
        if not children:
            selected[cid] = True
            subtree_stability[cid] = cluster_stability[cid]
            continue
        child_sum = sum(subtree_stability[ch] for ch in children)
        if cluster_stability[cid] >= child_sum:
            selected[cid] = True
            subtree_stability[cid] = cluster_stability[cid]
            descend = list(children)
            while descend:
                ch = descend.pop()
                selected[ch] = False
                descend.extend(cluster_children[ch])
        else:
            subtree_stability[cid] = child_sum

    # label = selected ancestor (inclusive) of the cluster each point fell from
    label_of_cluster = np.full(n_clusters, -1, dtype=np.int64)
    next_label = 0
    for cid in range(n_clusters):
        if selected[cid]:
            label_of_cluster[cid] = next_label
            next_label += 1
    resolved = np.full(n_clusters, -1, dtype=np.int64)
    for cid in range(n_clusters):
        walk = cid
        while walk != -1:
            if selected[walk]:
                resolved[cid] = label_of_cluster[walk]
                break
            walk = cluster_parent[walk]

    return resolved[point_cluster]
