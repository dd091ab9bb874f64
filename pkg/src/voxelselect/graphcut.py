"""Segmentation energy over the voxel grid and its exact s-t min-cut
solution, the downsample/solve/upsample post-process, and the two
reference baselines (feature-affinity 3D cut, color-model 2D cut).

The energy is the submodular Potts form

    E(y) = sum_p phi_p(y_p) + alpha * sum_{(p,q) in N} w_pq [y_p != y_q]

with 6-connected N, solved exactly by max-flow (Dinic's algorithm,
float capacities). Lifted scribble voxels enter as hard constraints via
a capacity larger than every possible finite cut.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .features import FeatureVolume, appearance_features
from .scribbles import LabeledVoxels, distance_field
from .volume import (DownsampleMap, PlaneVolume, block_reduce_xy,
                     downsample_volume, resample_planes)


class GraphCutError(ValueError):
    pass


@dataclass
class GraphCutParams:
    w1: float = 1.0
    w2: float = 10.0
    alpha: float = 0.1
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise GraphCutError("sigma must be positive")
        if self.alpha < 0:
            raise GraphCutError("alpha must be nonnegative")


@dataclass
class GraphCutProblem:
    n: int
    cost0: np.ndarray      # (n,) label-0 unary
    cost1: np.ndarray      # (n,) label-1 unary
    edges: np.ndarray      # (E, 2) int node pairs
    weights: np.ndarray    # (E,) nonnegative cut penalties
    force0: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    force1: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    shape: tuple | None = None  # original grid shape, for reshaping labels

    def __post_init__(self):
        self.cost0 = np.asarray(self.cost0, dtype=np.float64)
        self.cost1 = np.asarray(self.cost1, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.force0 = np.asarray(self.force0, dtype=np.int64)
        self.force1 = np.asarray(self.force1, dtype=np.int64)
        if self.cost0.shape != (self.n,) or self.cost1.shape != (self.n,):
            raise GraphCutError("unary arrays must have one entry per node")
        if np.any(self.cost0 < 0) or np.any(self.cost1 < 0):
            raise GraphCutError("unary costs must be nonnegative")
        if len(self.weights) != len(self.edges):
            raise GraphCutError("one weight per edge required")
        if np.any(self.weights < 0):
            raise GraphCutError("edge weights must be nonnegative "
                                "(submodularity)")
        if set(self.force0) & set(self.force1):
            raise GraphCutError("a node is hard-constrained to both labels")


def energy_of(problem: GraphCutProblem, labels: np.ndarray) -> float:
    """E(y) for a binary labeling, including hard-constraint unaries."""
    labels = np.asarray(labels).astype(bool).reshape(-1)
    if labels.shape != (problem.n,):
        raise GraphCutError("labeling size mismatch")
    unary = np.where(labels, problem.cost1, problem.cost0).sum()
    p, q = problem.edges[:, 0], problem.edges[:, 1]
    cut = labels[p] != labels[q]
    return float(unary + problem.weights[cut].sum())


# -- Dinic max-flow ----------------------------------------------------------

def _maxflow_kernel(head, nxt, eto, cap, s, t):
    n = head.shape[0]
    level = np.empty(n, np.int64)
    iters = np.empty(n, np.int64)
    queue = np.empty(n, np.int64)
    path = np.empty(n + 1, np.int64)
    total = 0.0
    while True:
        # BFS level graph
        level[:] = -1
        queue[0] = s
        level[s] = 0
        qh, qt = 0, 1
        while qh < qt:
            v = queue[qh]
            qh += 1
            e = head[v]
            while e != -1:
                w = eto[e]
                if cap[e] > 0.0 and level[w] < 0:
                    level[w] = level[v] + 1
                    queue[qt] = w
                    qt += 1
                e = nxt[e]
        if level[t] < 0:
            return total
        iters[:] = head
        # blocking flow: DFS with current-arc pointers
        while True:
            v = s
            pe = 0
            found = False
            while True:
                if v == t:
                    found = True
                    break
                e = iters[v]
                while e != -1:
                    if cap[e] > 0.0 and level[eto[e]] == level[v] + 1:
                        break
                    e = nxt[e]
                iters[v] = e
                if e != -1:
                    path[pe] = e
                    pe += 1
                    v = eto[e]
                else:
                    level[v] = -1
                    if v == s:
                        break
                    pe -= 1
                    back = path[pe]
                    v = eto[back ^ 1]   # tail of the dead edge
                    iters[v] = nxt[back]
            if not found:
                break
            f = cap[path[0]]
            for i in range(1, pe):
                if cap[path[i]] < f:
                    f = cap[path[i]]
            for i in range(pe):
                cap[path[i]] -= f
                cap[path[i] ^ 1] += f
            total += f


try:
    from numba import njit as _njit
    _maxflow_kernel = _njit(cache=True)(_maxflow_kernel)
except ImportError:
    pass


def _residual_reachable(head, nxt, eto, cap, s, n):
    seen = np.zeros(n, dtype=bool)
    seen[s] = True
    stack = [s]
    while stack:
        v = stack.pop()
        e = head[v]
        while e != -1:
            w = eto[e]
            if cap[e] > 0.0 and not seen[w]:
                seen[w] = True
                stack.append(w)
            e = nxt[e]
    return seen


def min_cut(problem: GraphCutProblem):
    """Exact global minimizer of the problem's energy.

    Returns {"labels": (n,) uint8, "energy": E at those labels,
    "flow": max-flow value (= energy minus the normalization offset)}.
    """
    n = problem.n
    big = (problem.cost0.sum() + problem.cost1.sum()
           + problem.weights.sum() + 1.0)
    phi0 = problem.cost0.copy()
    phi1 = problem.cost1.copy()
    phi0[problem.force1] = big   # forcing label 1 makes label 0 unaffordable
    phi1[problem.force0] = big
    m = np.minimum(phi0, phi1)
    offset = float(m.sum())
    cap_s = phi0 - m   # cut when node takes label 0
    cap_t = phi1 - m   # cut when node takes label 1

    s, t = n, n + 1
    n_arcs = 2 * (n * 2 + len(problem.edges))
    head = np.full(n + 2, -1, dtype=np.int64)
    nxt = np.empty(n_arcs, dtype=np.int64)
    eto = np.empty(n_arcs, dtype=np.int64)
    cap = np.empty(n_arcs, dtype=np.float64)
    cnt = 0

    def add_edge(a, b, c_ab, c_ba):
        nonlocal cnt
        eto[cnt] = b
        cap[cnt] = c_ab
        nxt[cnt] = head[a]
        head[a] = cnt
        cnt += 1
        eto[cnt] = a
        cap[cnt] = c_ba
        nxt[cnt] = head[b]
        head[b] = cnt
        cnt += 1

    for p in range(n):
        add_edge(s, p, float(cap_s[p]), 0.0)
        add_edge(p, t, float(cap_t[p]), 0.0)
    for (p, q), w in zip(problem.edges, problem.weights):
        add_edge(int(p), int(q), float(w), float(w))

    flow = _maxflow_kernel(head, nxt, eto, cap, s, t)
    side_s = _residual_reachable(head, nxt, eto, cap, s, n + 2)
    labels = side_s[:n].astype(np.uint8)   # source side = label 1

    if labels[problem.force0].any() or not labels[problem.force1].all():
        raise GraphCutError("hard constraints violated; "
                            "constraint sets are infeasible")
    return {"labels": labels, "energy": energy_of(problem, labels),
            "flow": float(flow)}


# -- energy construction -----------------------------------------------------

def _grid_edges(shape):
    """6-connected edges over a (D, H, W) grid, flat node ids."""
    D, H, W = shape
    ids = np.arange(D * H * W).reshape(D, H, W)
    pairs = []
    pairs.append(np.stack([ids[:, :, :-1].reshape(-1),
                           ids[:, :, 1:].reshape(-1)], axis=1))
    pairs.append(np.stack([ids[:, :-1, :].reshape(-1),
                           ids[:, 1:, :].reshape(-1)], axis=1))
    pairs.append(np.stack([ids[:-1].reshape(-1), ids[1:].reshape(-1)], axis=1))
    return np.concatenate(pairs, axis=0)


def build_energy(prob_volume: np.ndarray, lifted,
                 fv: FeatureVolume, dist_fg: np.ndarray,
                 dist_bg: np.ndarray, vol: PlaneVolume,
                 params: GraphCutParams | None = None) -> GraphCutProblem:
    """Energy over the grid of `vol` (already downsampled by the caller).

    Unaries: phi(1) = w1 (1 - f) + w2 d_fg, phi(0) = w1 f + w2 d_bg.
    Pairwise: alpha * Dist(p,q)^-1 * exp(-|a_p - a_q|^2 / sigma) with a
    the appearance segment of the feature (positional channels excluded,
    Dist already carries the geometry) and Dist the normalized world
    distance. lifted: LabeledVoxels in this grid's coordinates -> hard
    constraints.
    """
    params = params or GraphCutParams()
    feat_app = appearance_features(fv)
    shape = vol.xi.shape
    if prob_volume.shape != shape or dist_fg.shape != shape \
            or dist_bg.shape != shape or feat_app.shape[:3] != shape:
        raise GraphCutError("inputs are not on the volume's grid")
    f = prob_volume.reshape(-1).astype(np.float64)
    cost1 = params.w1 * (1.0 - f) + params.w2 * dist_fg.reshape(-1)
    cost0 = params.w1 * f + params.w2 * dist_bg.reshape(-1)

    edges = _grid_edges(shape)
    pos = vol.all_world_positions().reshape(-1, 3)
    diag = vol.bbox_diagonal()
    dist = np.linalg.norm(pos[edges[:, 0]] - pos[edges[:, 1]], axis=1) / diag
    a = feat_app.reshape(-1, feat_app.shape[-1]).astype(np.float64)
    dfeat = ((a[edges[:, 0]] - a[edges[:, 1]]) ** 2).sum(axis=1)
    weights = params.alpha / dist * np.exp(-dfeat / params.sigma)

    D, H, W = shape
    force1 = np.zeros(0, np.int64)
    force0 = np.zeros(0, np.int64)
    if lifted is not None and len(lifted.voxels):
        flat = (lifted.voxels[:, 2] * H + lifted.voxels[:, 1]) * W \
            + lifted.voxels[:, 0]
        force1 = flat[lifted.labels == 1]
        force0 = flat[lifted.labels == 0]
    return GraphCutProblem(D * H * W, cost0, cost1, edges, weights,
                           force0, force1, shape=shape)


# -- post-process ------------------------------------------------------------

def _map_lifted(lifted: LabeledVoxels, dmap: DownsampleMap) -> LabeledVoxels:
    """Lifted voxels in downsampled coordinates; conflicts dropped."""
    entries = {}
    for (u, v, d), lab in zip(lifted.voxels, lifted.labels):
        z = dmap.map_z[d]
        if z < 0:
            continue
        key = (int(dmap.map_u[u]), int(dmap.map_v[v]), int(z))
        if key in entries and entries[key] != int(lab):
            entries[key] = -1
        elif key not in entries:
            entries[key] = int(lab)
    keys = sorted(k for k, lab in entries.items() if lab >= 0)
    voxels = np.array(keys, dtype=np.int64).reshape(-1, 3)
    labels = np.array([entries[k] for k in keys], dtype=np.uint8)
    return LabeledVoxels(voxels, labels, np.zeros((len(keys), 2), np.int64))


def _downsample_field(arr, keep, factor, out_planes, how_xy, how_z):
    return resample_planes(
        block_reduce_xy(arr[keep].astype(np.float64), factor, how_xy),
        out_planes, how_z)


def _downsample_features(fv: FeatureVolume, keep, factor, out_planes):
    vals = _downsample_field(fv.values, keep, factor, out_planes,
                             "mean", "linear")
    return FeatureVolume(vals.astype(np.float32), fv.layout)


def select_kept_planes(prob_volume, lifted, threshold=0.5):
    """Planes containing a lifted fg voxel or a predicted-fg voxel."""
    keep = set()
    if prob_volume is not None:
        keep |= set(np.flatnonzero((prob_volume > threshold).any(axis=(1, 2))))
    if lifted is not None and len(lifted.voxels):
        keep |= set(int(d) for d in lifted.voxels[lifted.labels == 1][:, 2])
    return sorted(int(k) for k in keep)


def postprocess(prob_volume: np.ndarray, vol: PlaneVolume,
                lifted: LabeledVoxels, fv: FeatureVolume,
                params: GraphCutParams | None = None,
                factor_xy: int = 4, out_planes: int = 20):
    """Downsample, solve the graph cut, upsample labels.

    Kept planes are those holding any lifted fg voxel or any predicted
    fg voxel; probabilities and features downsample by averaging,
    distance fields by min; truncated planes come back as background.
    Returns (full-res bool labels, info dict).
    """
    params = params or GraphCutParams()
    keep = select_kept_planes(prob_volume, lifted)
    if not keep:
        raise GraphCutError("no foreground predictions or fg scribbles; "
                            "nothing to segment")
    out_planes = min(out_planes, len(keep))
    down_vol, dmap = downsample_volume(vol, factor_xy, out_planes, keep)

    fg_vox, bg_vox = lifted.split()
    if len(fg_vox) == 0 or len(bg_vox) == 0:
        raise GraphCutError("need lifted voxels of both classes")
    d_fg = distance_field(vol, fg_vox)
    d_bg = distance_field(vol, bg_vox)

    probs_d = _downsample_field(prob_volume, keep, factor_xy, out_planes,
                                "mean", "linear")
    fv_d = _downsample_features(fv, keep, factor_xy, out_planes)
    dfg_d = _downsample_field(d_fg, keep, factor_xy, out_planes, "min", "min")
    dbg_d = _downsample_field(d_bg, keep, factor_xy, out_planes, "min", "min")
    lifted_d = _map_lifted(lifted, dmap)

    problem = build_energy(probs_d, lifted_d, fv_d, dfg_d, dbg_d,
                           down_vol, params)
    cut = min_cut(problem)
    labels_d = cut["labels"].reshape(down_vol.xi.shape).astype(bool)
    labels = dmap.upsample_labels(labels_d)
    info = {"kept_planes": keep, "energy": cut["energy"],
            "flow": cut["flow"], "down_shape": down_vol.xi.shape,
            "problem": problem, "labels_down": labels_d}
    return labels, info


# -- baselines ---------------------------------------------------------------

def affinity_unaries(fv: FeatureVolume, lifted: LabeledVoxels):
    """Eq.-style nearest-scribble feature distances, normalized to [0,1].

    Returns (aff_fg, aff_bg) over the full grid: the L2 distance from
    each voxel's appearance-model feature (the ibr segment) to the
    nearest lifted fg / bg voxel's feature, divided by the global max
    over both fields.
    """
    ibr = fv.segment("ibr")
    D, H, W, C = ibr.shape
    flat = ibr.reshape(-1, C).astype(np.float64)
    fg_vox, bg_vox = lifted.split()
    if len(fg_vox) == 0 or len(bg_vox) == 0:
        raise GraphCutError("need lifted voxels of both classes")
    out = []
    for vox in (fg_vox, bg_vox):
        ref = ibr[vox[:, 2], vox[:, 1], vox[:, 0]].astype(np.float64)
        d, _ = cKDTree(ref).query(flat)
        out.append(d.reshape(D, H, W))
    top = max(out[0].max(), out[1].max())
    if top > 0:
        out = [o / top for o in out]
    return out[0], out[1]


def graphcut3d_baseline(vol: PlaneVolume, fv: FeatureVolume,
                        lifted: LabeledVoxels,
                        params: GraphCutParams | None = None,
                        factor_xy: int = 4, out_planes: int = 20):
    """Scribble-feature-affinity cut: postprocess with the classifier
    unary replaced by nearest-scribble feature distances."""
    params = params or GraphCutParams()
    aff_fg, aff_bg = affinity_unaries(fv, lifted)
    # pseudo-probability: fg-affinity beats bg-affinity; same [0,1] range
    # and orientation as the classifier term (phi(1) = w1 (1 - f) + ...)
    with np.errstate(invalid="ignore"):
        f = aff_bg / np.maximum(aff_fg + aff_bg, 1e-30)
    f[(aff_fg + aff_bg) == 0] = 0.5
    keep = select_kept_planes(f, lifted)
    out_planes = min(out_planes, len(keep))
    down_vol, dmap = downsample_volume(vol, factor_xy, out_planes, keep)

    fg_vox, bg_vox = lifted.split()
    d_fg = distance_field(vol, fg_vox)
    d_bg = distance_field(vol, bg_vox)
    probs_d = _downsample_field(f, keep, factor_xy, out_planes,
                                "mean", "linear")
    fv_d = _downsample_features(fv, keep, factor_xy, out_planes)
    dfg_d = _downsample_field(d_fg, keep, factor_xy, out_planes, "min", "min")
    dbg_d = _downsample_field(d_bg, keep, factor_xy, out_planes, "min", "min")
    lifted_d = _map_lifted(lifted, dmap)
    problem = build_energy(probs_d, lifted_d, fv_d, dfg_d, dbg_d,
                           down_vol, params)
    cut = min_cut(problem)
    labels_d = cut["labels"].reshape(down_vol.xi.shape).astype(bool)
    labels = dmap.upsample_labels(labels_d)
    info = {"kept_planes": keep, "energy": cut["energy"],
            "down_shape": down_vol.xi.shape}
    return labels, info


def kmeans(points: np.ndarray, k: int, seed: int, restarts: int = 10,
           max_iter: int = 50):
    """Lloyd's algorithm with k-means++ seeding; best of `restarts` runs."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise GraphCutError("k-means on an empty point set")
    k = min(k, n)
    best_centers, best_inertia = None, np.inf
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        centers = np.empty((k, points.shape[1]))
        centers[0] = points[rng.integers(n)]
        d2 = ((points - centers[0]) ** 2).sum(axis=1)
        for j in range(1, k):
            total = d2.sum()
            if total <= 0:
                centers[j:] = centers[0]
                break
            centers[j] = points[rng.choice(n, p=d2 / total)]
            d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
        assign = None
        for _ in range(max_iter):
            dist = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
            new_assign = dist.argmin(axis=1)
            if assign is not None and np.array_equal(new_assign, assign):
                break
            assign = new_assign
            for j in range(k):
                sel = points[assign == j]
                if len(sel):
                    centers[j] = sel.mean(axis=0)
        inertia = ((points - centers[assign]) ** 2).sum()
        if inertia < best_inertia:
            best_inertia, best_centers = inertia, centers.copy()
    return best_centers


def color_model_unaries(image: np.ndarray, fg_px: np.ndarray,
                        bg_px: np.ndarray, k: int = 64, seed: int = 0):
    """Per-pixel (cost0, cost1) from scribble color models.

    K-means per class on scribble colors; d_f and d_b are each pixel's
    distances to the nearest fg / bg cluster center, and the unaries are
    the ratios d_f/(d_f+d_b) for fg, d_b/(d_f+d_b) for bg, both 1/2 when
    d_f = d_b = 0.
    """
    image = np.asarray(image, dtype=np.float64)
    if len(fg_px) == 0 or len(bg_px) == 0:
        raise GraphCutError("need scribble pixels of both classes")
    if k < 1:
        raise GraphCutError("need at least one cluster per class")
    fg_px = np.asarray(fg_px, dtype=np.int64).reshape(-1, 2)
    bg_px = np.asarray(bg_px, dtype=np.int64).reshape(-1, 2)
    cf = kmeans(image[fg_px[:, 1], fg_px[:, 0]], k, seed)
    cb = kmeans(image[bg_px[:, 1], bg_px[:, 0]], k, seed + 1)
    flat = image.reshape(-1, image.shape[-1])
    df, _ = cKDTree(cf).query(flat)
    db, _ = cKDTree(cb).query(flat)
    denom = np.maximum(df + db, 1e-30)
    cost1 = np.where(df + db > 0, df / denom, 0.5)
    cost0 = np.where(df + db > 0, db / denom, 0.5)
    return cost0, cost1


def graphcut2d_baseline(image: np.ndarray, fg_px: np.ndarray,
                        bg_px: np.ndarray, k: int = 64,
                        sigma: float = 10.0, seed: int = 0) -> np.ndarray:
    """Color-model 2D segmentation of a single view.

    Scribble colors are clustered per class (k-means, 10 seeded
    restarts); the unary for non-scribble pixels is the distance ratio
    d_f / (d_f + d_b) (1/2 when both are zero), scribble pixels are hard
    constraints; the pairwise term is exp(-|c_p - c_q|^2 / sigma) on a
    4-connected grid. Returns the boolean foreground mask.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    fg_px = np.asarray(fg_px, dtype=np.int64).reshape(-1, 2)
    bg_px = np.asarray(bg_px, dtype=np.int64).reshape(-1, 2)
    cost0, cost1 = color_model_unaries(image, fg_px, bg_px, k, seed)
    flat = image.reshape(-1, image.shape[-1])

    ids = np.arange(H * W).reshape(H, W)
    e_h = np.stack([ids[:, :-1].reshape(-1), ids[:, 1:].reshape(-1)], axis=1)
    e_v = np.stack([ids[:-1].reshape(-1), ids[1:].reshape(-1)], axis=1)
    edges = np.concatenate([e_h, e_v], axis=0)
    dc = ((flat[edges[:, 0]] - flat[edges[:, 1]]) ** 2).sum(axis=1)
    weights = np.exp(-dc / sigma)

    force1 = fg_px[:, 1] * W + fg_px[:, 0]
    force0 = bg_px[:, 1] * W + bg_px[:, 0]
    problem = GraphCutProblem(H * W, cost0, cost1, edges, weights,
                              force0, force1, shape=(H, W))
    cut = min_cut(problem)
    return cut["labels"].reshape(H, W).astype(bool)


# -- debug dump --------------------------------------------------------------

def dump_problem(path, problem: GraphCutProblem) -> None:
    """Text dump (nodes, unaries, edges) for external verification."""
    with open(path, "w") as f:
        f.write(f"nodes {problem.n}\n")
        for i in range(problem.n):
            f.write(f"unary {i} {problem.cost0[i]:.17g} "
                    f"{problem.cost1[i]:.17g}\n")
        for (p, q), w in zip(problem.edges, problem.weights):
            f.write(f"edge {p} {q} {w:.17g}\n")
        for i in problem.force0:
            f.write(f"force0 {i}\n")
        for i in problem.force1:
            f.write(f"force1 {i}\n")
