"""Scribble handling: rasterization, 2D -> 3D lifting through the
volume's transmittance, 3D -> 2D projection, and scribble distance
fields over the voxel grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import GeometryError, pixel_rays, project_point
from .volume import PlaneVolume, surface_voxels

DEFAULT_GAMMA = 0.01
DEFAULT_BRUSH_RADIUS = 2


class ScribbleError(ValueError):
    pass


@dataclass
class ScribbleSet:
    """Foreground/background polylines in reference-view pixel coordinates.

    Each stroke is a list of (u, v) points; single-point strokes are
    allowed.
    """

    fg_strokes: list
    bg_strokes: list
    view_id: str = "ref"

    def validate_bounds(self, width: int, height: int) -> None:
        for cls, strokes in (("fg", self.fg_strokes), ("bg", self.bg_strokes)):
            for stroke in strokes:
                for (u, v) in stroke:
                    if not (0 <= u < width and 0 <= v < height):
                        raise ScribbleError(
                            f"{cls} stroke point ({u}, {v}) outside "
                            f"{width}x{height} image")


@dataclass
class LabeledVoxels:
    """Lifted scribble supervision: unique voxels with binary labels."""

    voxels: np.ndarray    # (K, 3) int, (u, v, d)
    labels: np.ndarray    # (K,) uint8, 1 = fg
    sources: np.ndarray   # (K, 2) int, origin pixel per entry
    dropped_no_surface: int = 0
    dropped_conflict: int = 0

    def __post_init__(self):
        if len(self.voxels):
            flat = {tuple(v) for v in self.voxels}
            if len(flat) != len(self.voxels):
                raise ScribbleError("duplicate voxels in labeled set")

    def split(self):
        fg = self.voxels[self.labels == 1]
        bg = self.voxels[self.labels == 0]
        return fg, bg


def _bresenham(p0, p1):
    """Integer line pixels from p0 to p1 inclusive."""
    x0, y0 = int(round(p0[0])), int(round(p0[1]))
    x1, y1 = int(round(p1[0])), int(round(p1[1]))
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    pts = []
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
    return pts


def _disk_offsets(radius):
    r = int(radius)
    out = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx * dx + dy * dy <= radius * radius:
                out.append((dx, dy))
    return out


def _raster_class(strokes, width, height, brush_radius):
    offs = _disk_offsets(brush_radius)
    px = set()
    for stroke in strokes:
        if len(stroke) == 0:
            continue
        pts = [stroke[0]] if len(stroke) == 1 else []
        for a, b in zip(stroke[:-1], stroke[1:]):
            pts.extend(_bresenham(a, b))
        if len(stroke) == 1:
            pts = [(int(round(stroke[0][0])), int(round(stroke[0][1])))]
        for (x, y) in pts:
            for (dx, dy) in offs:
                u, v = x + dx, y + dy
                if 0 <= u < width and 0 <= v < height:
                    px.add((u, v))
    if not px:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(px), dtype=np.int64)


def rasterize_scribbles(s: ScribbleSet, width: int, height: int,
                        brush_radius: float = DEFAULT_BRUSH_RADIUS):
    """Rasterize strokes to two (K, 2) pixel-index arrays (fg, bg).

    Bresenham polylines dilated by an L2 disk of the given radius.
    Foreground and background must not overlap.
    """
    s.validate_bounds(width, height)
    fg = _raster_class(s.fg_strokes, width, height, brush_radius)
    bg = _raster_class(s.bg_strokes, width, height, brush_radius)
    if len(fg) and len(bg):
        both = set(map(tuple, fg)) & set(map(tuple, bg))
        if both:
            listing = ", ".join(str(p) for p in sorted(both)[:8])
            raise ScribbleError(
                f"{len(both)} pixels rasterize as both classes: {listing}")
    return fg, bg


def lift_pixels(vol: PlaneVolume, fg_px: np.ndarray, bg_px: np.ndarray,
                gamma: float = DEFAULT_GAMMA) -> LabeledVoxels:
    """Lift labeled reference pixels onto the first opaque-enough voxels.

    Pixels whose rays never drop below gamma are dropped; a voxel hit by
    both classes is dropped as a conflict; within one class the first
    pixel (sorted order, foreground first) wins.
    """
    entries = {}
    dropped_ns = 0
    dropped_cf = 0
    for label, px in ((1, fg_px), (0, bg_px)):
        if len(px) == 0:
            continue
        origin, dirs = pixel_rays(vol.ref_cam, px[:, 0].astype(np.float64),
                                  px[:, 1].astype(np.float64))
        origins = np.broadcast_to(origin, dirs.shape)
        vox, found = surface_voxels(vol, origins, dirs, gamma)
        dropped_ns += int((~found).sum())
        for i in np.flatnonzero(found):
            key = tuple(int(x) for x in vox[i])
            if key in entries:
                if entries[key][0] != label:
                    entries[key] = (None, None)  # conflict marker
            else:
                entries[key] = (label, (int(px[i, 0]), int(px[i, 1])))
    conflicts = [k for k, (lab, _) in entries.items() if lab is None]
    dropped_cf = len(conflicts)
    for k in conflicts:
        del entries[k]
    if not entries:
        raise ScribbleError("no scribble pixel lifted to a voxel "
                            "(volume too transparent under the strokes?)")
    keys = sorted(entries)
    voxels = np.array(keys, dtype=np.int64)
    labels = np.array([entries[k][0] for k in keys], dtype=np.uint8)
    sources = np.array([entries[k][1] for k in keys], dtype=np.int64)
    return LabeledVoxels(voxels, labels, sources, dropped_ns, dropped_cf)


def lift_scribbles(vol: PlaneVolume, s: ScribbleSet,
                   gamma: float = DEFAULT_GAMMA,
                   brush_radius: float = DEFAULT_BRUSH_RADIUS) -> LabeledVoxels:
    if not s.fg_strokes or not s.bg_strokes:
        raise ScribbleError("need at least one stroke of each class")
    fg_px, bg_px = rasterize_scribbles(s, vol.ref_cam.width,
                                       vol.ref_cam.height, brush_radius)
    return lift_pixels(vol, fg_px, bg_px, gamma)


def project_labeled_voxels(lv: LabeledVoxels, vol: PlaneVolume, cam_target):
    """Project lifted voxels into a target view; (fg, bg) pixel arrays.

    Behind-camera and out-of-frame voxels are dropped. Occlusion is not
    tested: a voxel projects even if something covers it in the target.
    """
    out = {1: [], 0: []}
    if len(lv.voxels):
        pos = vol.world_positions(lv.voxels[:, 0], lv.voxels[:, 1],
                                  lv.voxels[:, 2])
        x_cam = (pos - cam_target.t) @ cam_target.R
        depth = x_cam[:, 2]
        ok = depth > 0
        p = x_cam @ cam_target.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            us = np.floor(p[:, 0] / depth - 0.5 + 0.5).astype(np.int64)
            vs = np.floor(p[:, 1] / depth - 0.5 + 0.5).astype(np.int64)
        ok &= (us >= 0) & (us < cam_target.width) \
            & (vs >= 0) & (vs < cam_target.height)
        for i in np.flatnonzero(ok):
            out[int(lv.labels[i])].append((int(us[i]), int(vs[i])))
    fg = np.array(sorted(set(out[1])), dtype=np.int64).reshape(-1, 2)
    bg = np.array(sorted(set(out[0])), dtype=np.int64).reshape(-1, 2)
    return fg, bg


def distance_field(vol: PlaneVolume, voxel_set: np.ndarray,
                   query: np.ndarray | None = None) -> np.ndarray:
    """Min world-space distance from each query voxel to the set.

    Distances are Euclidean between voxel world positions and are
    normalized by the grid's world bounding-box diagonal, so fields are
    comparable across scenes. query = None evaluates the full grid and
    returns a (D, H, W) array; otherwise (Q, 3) -> (Q,).
    """
    voxel_set = np.asarray(voxel_set, dtype=np.int64)
    if voxel_set.size == 0:
        raise ScribbleError("empty voxel set for distance field")
    set_pos = vol.world_positions(voxel_set[:, 0], voxel_set[:, 1],
                                  voxel_set[:, 2])
    tree = cKDTree(set_pos)
    diag = vol.bbox_diagonal()
    if query is None:
        pos = vol.all_world_positions()
        d, _ = tree.query(pos.reshape(-1, 3))
        return (d / diag).reshape(vol.xi.shape)
    query = np.asarray(query, dtype=np.int64)
    pos = vol.world_positions(query[:, 0], query[:, 1], query[:, 2])
    d, _ = tree.query(pos)
    return d / diag


# -- scribble files ----------------------------------------------------------
#
# Text format: one stroke per line,
#   fg u0,v0 u1,v1 ...
#   bg u0,v0 ...
# '#' comments and blank lines ignored. Tags other than fg/bg rejected.

def save_scribbles(path, s: ScribbleSet) -> None:
    lines = [f"# scribbles for view {s.view_id}"]
    for tag, strokes in (("fg", s.fg_strokes), ("bg", s.bg_strokes)):
        for stroke in strokes:
            pts = " ".join(f"{u:g},{v:g}" for u, v in stroke)
            lines.append(f"{tag} {pts}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_scribbles(path, view_id: str = "ref") -> ScribbleSet:
    fg, bg = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag not in ("fg", "bg"):
                raise ScribbleError(f"{path}:{lineno}: unknown tag {tag!r}")
            try:
                stroke = [tuple(float(c) for c in p.split(",")) for p in parts[1:]]
            except ValueError as e:
                raise ScribbleError(f"{path}:{lineno}: {e}") from e
            if not stroke or any(len(pt) != 2 for pt in stroke):
                raise ScribbleError(f"{path}:{lineno}: need u,v point pairs")
            (fg if tag == "fg" else bg).append(stroke)
    return ScribbleSet(fg, bg, view_id)


def scribbles_from_raster(raster: np.ndarray):
    """Pixel sets from a label raster: 0 none, 1 fg, 2 bg."""
    raster = np.asarray(raster)
    bad = set(np.unique(raster)) - {0, 1, 2}
    if bad:
        raise ScribbleError(f"raster contains unknown labels {sorted(bad)}")
    vs, us = np.nonzero(raster == 1)
    fg = np.stack([us, vs], axis=1).astype(np.int64)
    vs, us = np.nonzero(raster == 2)
    bg = np.stack([us, vs], axis=1).astype(np.int64)
    fg = fg[np.lexsort((fg[:, 1], fg[:, 0]))]
    bg = bg[np.lexsort((bg[:, 1], bg[:, 0]))]
    return fg, bg


def raster_from_pixels(fg_px, bg_px, width: int, height: int) -> np.ndarray:
    out = np.zeros((height, width), dtype=np.uint8)
    if len(fg_px):
        out[fg_px[:, 1], fg_px[:, 0]] = 1
    if len(bg_px):
        both = out[bg_px[:, 1], bg_px[:, 0]]
        if (both == 1).any():
            raise ScribbleError("fg/bg pixel sets overlap")
        out[bg_px[:, 1], bg_px[:, 0]] = 2
    return out
