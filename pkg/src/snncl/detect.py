"""Attention maps to detections, and precision-recall scoring.

Pipeline per window: bilinear upsampling of the D_x x D_y map to H x W
(corner-aligned), a threshold d_th, DBSCAN on the surviving pixel
coordinates (eps in pixels), then matching of cluster centroids against
the label box.

Matching rule: a cluster is a true positive if its centroid lies inside
the ground-truth box, with at most one true positive per box (nearest
centroid to the box centre wins); every other cluster is a false alarm;
a box without a matching cluster is one false negative.

Points are (row, col) pairs.  DBSCAN visits points in the order given,
which for threshold_map output is row-major.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

D_GRID = np.round(np.linspace(0.0, 1.0, 51), 12)


# -- maps --------------------------------------------------------------------------

def interpolate_map(A, H: int, W: int):
    """Corner-aligned bilinear upsampling: map cell (i, j) lands on pixel
    (i (H-1)/(D_x-1), j (W-1)/(D_y-1))."""
    A = np.asarray(A, dtype=float)
    Dx, Dy = A.shape

    def axis(n_in, n_out):
        if n_in == 1:
            return np.zeros(n_out, np.int64), np.zeros(n_out)
        u = np.linspace(0.0, n_in - 1, n_out)
        i0 = np.minimum(np.floor(u).astype(np.int64), n_in - 2)
        return i0, u - i0

    r0, fr = axis(Dx, H)
    c0, fc = axis(Dy, W)
    r1 = np.minimum(r0 + 1, Dx - 1)
    c1 = np.minimum(c0 + 1, Dy - 1)
    top = A[r0][:, c0] * (1 - fc) + A[r0][:, c1] * fc
    bot = A[r1][:, c0] * (1 - fc) + A[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def threshold_map(m, d_th: float):
    """(n, 2) array of (row, col) with m >= d_th, row-major."""
    if not 0.0 <= d_th <= 1.0:
        raise ValueError("d_th must lie in [0, 1]")
    return np.argwhere(np.asarray(m) >= d_th)


def label_box_pixels(box, H: int, W: int):
    """Normalised label box -> pixel box (col1, row1, col2, row2) on the
    interpolated map."""
    bx1, by1, bx2, by2 = box
    return bx1 * (W - 1), by1 * (H - 1), bx2 * (W - 1), by2 * (H - 1)


# -- clustering ----------------------------------------------------------------------

@dataclass
class ClusterSet:
    labels: np.ndarray              # per point: cluster id or -1 for noise
    clusters: list                  # list of (n_k, 2) point arrays
    centroids: np.ndarray           # (K, 2) (row, col)

    def __len__(self):
        return len(self.clusters)

    def partition(self):
        """Clusters as a set of frozensets of point indices (noise excluded)."""
        return {frozenset(np.flatnonzero(self.labels == k).tolist())
                for k in range(len(self.clusters))}


def _cluster_set(points, labels):
    K = int(labels.max()) + 1 if labels.size else 0
    clusters = [points[labels == k] for k in range(K)]
    cents = np.array([c.mean(axis=0) for c in clusters]) if K else np.zeros((0, 2))
    return ClusterSet(labels, clusters, cents)


def dbscan(points, eps: float = 5.0, min_pts: int = 2) -> ClusterSet:
    """Standard DBSCAN with KD-tree neighbour queries (distance <= eps)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -1, np.int64)
    if n == 0:
        return _cluster_set(pts, labels)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    nbrs = cKDTree(pts).query_ball_point(pts, r=eps + 1e-9)
    visited = np.zeros(n, bool)
    k = -1
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        if len(nbrs[i]) < min_pts:
            continue
        k += 1
        labels[i] = k
        queue = sorted(nbrs[i])
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            if labels[j] == -1:
                labels[j] = k
            if visited[j]:
                continue
            visited[j] = True
            if len(nbrs[j]) >= min_pts:
                queue.extend(sorted(nbrs[j]))
    return _cluster_set(pts, labels)


def dbscan_bruteforce(points, eps: float = 5.0, min_pts: int = 2) -> ClusterSet:
    """Reference DBSCAN from the definitions: core points from the full
    distance matrix, clusters as connected components of the core graph
    numbered by their first core point, border points joined to the
    lowest-numbered cluster among their core neighbours."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -1, np.int64)
    if n == 0:
        return _cluster_set(pts, labels)
    diff = pts[:, None, :] - pts[None, :, :]
    adj = np.sqrt((diff ** 2).sum(-1)) <= eps
    core = adj.sum(1) >= min_pts
    k = -1
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        k += 1
        stack = [i]
        labels[i] = k
        while stack:
            j = stack.pop()
            for m in np.flatnonzero(adj[j] & core):
                if labels[m] == -1:
                    labels[m] = k
                    stack.append(m)
    for i in range(n):
        if core[i]:
            continue
        cl = labels[np.flatnonzero(adj[i] & core)]
        if cl.size:
            labels[i] = cl.min()
    return _cluster_set(pts, labels)


# -- matching ------------------------------------------------------------------------

def match_detections(centroids, box_px):
    """(TP, FP, FN) for one window; box_px is (col1, row1, col2, row2) or None."""
    cents = np.asarray(centroids, dtype=float).reshape(-1, 2)
    if box_px is None:
        return 0, len(cents), 0
    c1, r1, c2, r2 = box_px
    inside = ((cents[:, 0] >= r1) & (cents[:, 0] <= r2)
              & (cents[:, 1] >= c1) & (cents[:, 1] <= c2))
    tp = 1 if inside.any() else 0
    return tp, len(cents) - tp, 1 - tp


def detect_window(A, H, W, d_th, eps=5.0, min_pts=2):
    m = interpolate_map(A, H, W)
    return dbscan(threshold_map(m, d_th), eps, min_pts)


# -- fast sweep ----------------------------------------------------------------------

def disk_offsets(eps: float):
    R = int(math.floor(eps))
    return np.array([(a, b) for a in range(-R, R + 1) for b in range(-R, R + 1)
                     if (a or b) and a * a + b * b <= eps * eps + 1e-9], np.int64)


@njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit(cache=True)
def _sweep_map(m, H, W, order, thresholds, offs, box, has_box, out_tp, out_fp, out_fn):
    """Add pixels from the highest value down; at each threshold (descending)
    count clusters (components of size >= 2) and test their centroids."""
    n = H * W
    parent = np.arange(n)
    size = np.zeros(n, np.int64)
    sr = np.zeros(n)
    sc = np.zeros(n)
    active = np.zeros(n, np.bool_)
    k = 0
    c1, r1, c2, r2 = box[0], box[1], box[2], box[3]
    for ti in range(len(thresholds) - 1, -1, -1):
        d = thresholds[ti]
        while k < n and m[order[k]] >= d:
            p = order[k]
            k += 1
            active[p] = True
            size[p] = 1
            r, c = p // W, p % W
            sr[p] = r
            sc[p] = c
            for q in range(offs.shape[0]):
                rr = r + offs[q, 0]
                cc = c + offs[q, 1]
                if rr < 0 or rr >= H or cc < 0 or cc >= W:
                    continue
                o = rr * W + cc
                if not active[o]:
                    continue
                a = _find(parent, p)
                b = _find(parent, o)
                if a == b:
                    continue
                if size[a] < size[b]:
                    a, b = b, a
                parent[b] = a
                size[a] += size[b]
                sr[a] += sr[b]
                sc[a] += sc[b]
        n_cl = 0
        hit = 0
        for j in range(k):
            p = order[j]
            if parent[p] != p or size[p] < 2:
                continue
            n_cl += 1
            if has_box and hit == 0:
                cr = sr[p] / size[p]
                cc2 = sc[p] / size[p]
                if cr >= r1 and cr <= r2 and cc2 >= c1 and cc2 <= c2:
                    hit = 1
        if has_box:
            out_tp[ti] += hit
            out_fp[ti] += n_cl - hit
            out_fn[ti] += 1 - hit
        else:
            out_fp[ti] += n_cl


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    tp: np.ndarray | None = None
    fp: np.ndarray | None = None
    fn: np.ndarray | None = None

    @property
    def f1(self):
        s = self.precision + self.recall
        return np.where(s > 0, 2 * self.precision * self.recall / np.where(s > 0, s, 1), 0.0)

    @property
    def peak_f1(self):
        return float(self.f1.max()) if len(self.f1) else 0.0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("d_th,precision,recall\n")
            for d, p, r in zip(self.thresholds, self.precision, self.recall):
                fh.write(f"{d:.2f},{float(p)!r},{float(r)!r}\n")

    @classmethod
    def from_csv(cls, path):
        a = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(a[:, 0], a[:, 1], a[:, 2])


def curve_from_counts(thresholds, tp, fp, fn) -> PrCurve:
    tp, fp, fn = (np.asarray(x, dtype=np.int64) for x in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
        rec = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 1.0)
    return PrCurve(np.asarray(thresholds, float), prec, rec, tp, fp, fn)


def sweep_counts(maps, boxes, H: int, W: int, d_grid=D_GRID, eps: float = 5.0,
                 min_pts: int = 2, fast: bool | None = None):
    """Pooled TP/FP/FN per threshold over a sequence of windows.

    maps   iterable of D_x x D_y attention maps
    boxes  matching iterable of normalised label boxes or None
    The fast path (union-find over pixels in descending value order) is
    exact for min_pts = 2, where DBSCAN clusters are the connected
    components of the eps-graph with at least two points.
    """
    d_grid = np.asarray(d_grid, dtype=float)
    if np.any(np.diff(d_grid) <= 0):
        raise ValueError("threshold grid must be strictly increasing")
    if fast is None:
        fast = min_pts == 2
    if fast and min_pts != 2:
        raise ValueError("the fast sweep needs min_pts = 2")
    T = len(d_grid)
    tp = np.zeros(T, np.int64)
    fp = np.zeros(T, np.int64)
    fn = np.zeros(T, np.int64)
    offs = disk_offsets(eps)
    for A, box in zip(maps, boxes):
        m = interpolate_map(A, H, W)
        bp = label_box_pixels(box, H, W) if box is not None else None
        if fast:
            order = np.argsort(-m.ravel(), kind="stable")
            barr = np.array(bp if bp is not None else (0.0, 0.0, 0.0, 0.0), dtype=float)
            _sweep_map(m.ravel(), H, W, order, d_grid, offs, barr, bp is not None, tp, fp, fn)
        else:
            for i, d in enumerate(d_grid):
                cs = dbscan(threshold_map(m, d), eps, min_pts)
                a, b, c = match_detections(cs.centroids, bp)
                tp[i] += a
                fp[i] += b
                fn[i] += c
    return tp, fp, fn


def pr_sweep(maps, boxes, H: int, W: int, d_grid=D_GRID, eps: float = 5.0,
             min_pts: int = 2, fast: bool | None = None) -> PrCurve:
    maps = list(maps)
    boxes = list(boxes)
    if len(maps) != len(boxes):
        raise ValueError(f"misaligned inputs: {len(maps)} maps vs {len(boxes)} labels")
    tp, fp, fn = sweep_counts(maps, boxes, H, W, d_grid, eps, min_pts, fast)
    return curve_from_counts(d_grid, tp, fp, fn)


def peak_f1(curve: PrCurve) -> float:
    return curve.peak_f1


def average_curves(curves) -> PrCurve:
    curves = list(curves)
    if not curves:
        raise ValueError("no curves to average")
    th = curves[0].thresholds
    for c in curves[1:]:
        if not np.array_equal(c.thresholds, th):
            raise ValueError("curves use different threshold grids")
    return PrCurve(th.copy(), np.mean([c.precision for c in curves], axis=0),
                   np.mean([c.recall for c in curves], axis=0))


# -- k-fold harness -------------------------------------------------------------------

@dataclass
class FoldResult:
    train: int
    test: int
    curve: PrCurve

    @property
    def peak_f1(self):
        return self.curve.peak_f1


def kfold_harness(sequences, train_fn, eval_fn, k: int | None = None):
    """Fold i trains on sequence i and tests on sequence (i+1) mod n.

    train_fn(seq) -> model; eval_fn(model, seq) -> PrCurve.
    Returns (fold results, averaged curve, peak F1 of the average).
    """
    seqs = list(sequences)
    n = len(seqs)
    if n < 2:
        raise ValueError("the k-fold harness needs at least two sequences")
    k = n if k is None else k
    folds = []
    for i in range(k):
        model = train_fn(seqs[i % n])
        j = (i + 1) % n
        folds.append(FoldResult(i % n, j, eval_fn(model, seqs[j])))
    avg = average_curves(f.curve for f in folds)
    return folds, avg, avg.peak_f1


def write_summary(path, folds, avg: PrCurve, extra: dict | None = None):
    """JSON lines: one record per fold, then the averaged record."""
    with open(path, "w") as fh:
        for i, f in enumerate(folds):
            fh.write(json.dumps({"fold": i, "train": f.train, "test": f.test,
                                 "peak_f1": f.peak_f1}, sort_keys=True) + "\n")
        rec = {"fold": "average", "peak_f1": avg.peak_f1}
        if extra:
            rec.update(extra)
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
