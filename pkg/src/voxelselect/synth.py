"""Procedural desk-scale scenes with exact voxel ground truth.

A scene is a plane volume populated by textured solids (one or more
marked foreground), opaque textured far planes, and lateral clutter,
viewed by a small front-facing camera arc: the reference view, M source
views, and one held-out validation view used only for evaluation.
Everything is a pure function of the spec, so scenes are reproducible
bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import Camera, DepthPlaneSet, project_point, save_cameras, \
    load_cameras
from .scribbles import ScribbleSet, save_scribbles, load_scribbles
from .volume import (BASIS_CONSTANT, PlaneVolume, load_labels, load_volume,
                     render_view, save_labels, save_volume)


class SynthError(ValueError):
    pass


@dataclass
class Texture:
    """Procedural color field evaluated at world positions.

    kinds: constant (base), trig (base + amp * sin of three planar
    waves, one per channel), stripes (base/second square wave along an
    axis).
    """

    kind: str = "constant"
    base: tuple = (0.5, 0.5, 0.5)
    second: tuple = (0.0, 0.0, 0.0)
    freq: tuple = (1.0, 1.0, 1.0)
    phase: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (1.0, 0.0, 0.0)

    def colors(self, pos: np.ndarray) -> np.ndarray:
        base = np.asarray(self.base, dtype=np.float64)
        out = np.broadcast_to(base, pos.shape[:-1] + (3,)).copy()
        if self.kind == "constant":
            return out
        if self.kind == "trig":
            amp = np.asarray(self.second)
            freq = np.asarray(self.freq)
            phase = np.asarray(self.phase)
            for c in range(3):
                wave = np.sin(2.0 * np.pi * freq[c] * (pos @ _TRIG_DIRS[c])
                              + phase[c])
                out[..., c] = base[c] + amp[c] * wave
            return np.clip(out, 0.0, 1.0)
        if self.kind == "stripes":
            t = pos @ np.asarray(self.axis, dtype=np.float64)
            band = np.floor(t * self.freq[0] + self.phase[0]).astype(np.int64)
            odd = (band % 2).astype(bool)
            out[odd] = np.asarray(self.second, dtype=np.float64)
            return out
        raise SynthError(f"unknown texture kind {self.kind!r}")

    def to_json(self):
        return {"kind": self.kind, "base": list(self.base),
                "second": list(self.second), "freq": list(self.freq),
                "phase": list(self.phase), "axis": list(self.axis)}

    @staticmethod
    def from_json(d):
        return Texture(d["kind"], tuple(d["base"]), tuple(d["second"]),
                       tuple(d["freq"]), tuple(d["phase"]), tuple(d["axis"]))


# fixed wave directions for the trig texture, one per channel
_TRIG_DIRS = np.array([[1.0, 0.3, 0.2],
                       [0.2, 1.0, -0.4],
                       [-0.5, 0.4, 1.0]]).T


@dataclass
class SceneObject:
    kind: str                 # ellipsoid | box
    center: tuple
    size: tuple               # semi-axes / half-extents, world units
    texture: Texture
    opacity: float = 0.95
    fg: bool = False

    def inside(self, pos: np.ndarray) -> np.ndarray:
        local = (pos - np.asarray(self.center)) / np.asarray(self.size)
        if self.kind == "ellipsoid":
            return (local ** 2).sum(axis=-1) <= 1.0
        if self.kind == "box":
            return (np.abs(local) <= 1.0).all(axis=-1)
        raise SynthError(f"unknown object kind {self.kind!r}")

    def to_json(self):
        return {"kind": self.kind, "center": list(self.center),
                "size": list(self.size), "texture": self.texture.to_json(),
                "opacity": self.opacity, "fg": self.fg}

    @staticmethod
    def from_json(d):
        return SceneObject(d["kind"], tuple(d["center"]), tuple(d["size"]),
                           Texture.from_json(d["texture"]), d["opacity"],
                           d["fg"])


@dataclass
class SceneSpec:
    width: int = 128
    height: int = 96
    depth: int = 32
    z_near: float = 2.0
    z_far: float = 5.0
    spacing: str = "linear"
    focal: float = 160.0
    objects: list = field(default_factory=list)
    bg_planes: int = 1
    bg_texture: Texture = field(default_factory=Texture)
    m_views: int = 3
    baseline: float = 0.10
    seed: int = 0

    def validate(self):
        if not self.objects:
            raise SynthError("scene needs at least one object")
        if not any(o.fg for o in self.objects):
            raise SynthError("scene needs at least one fg object")
        if self.bg_planes < 1 and all(o.fg for o in self.objects):
            raise SynthError("scene needs at least one bg element")
        if self.m_views < 2:
            raise SynthError("need at least two source views for matching")

    def to_json(self):
        return {"width": self.width, "height": self.height,
                "depth": self.depth, "z_near": self.z_near,
                "z_far": self.z_far, "spacing": self.spacing,
                "focal": self.focal,
                "objects": [o.to_json() for o in self.objects],
                "bg_planes": self.bg_planes,
                "bg_texture": self.bg_texture.to_json(),
                "m_views": self.m_views, "baseline": self.baseline,
                "seed": self.seed}

    @staticmethod
    def from_json(d):
        return SceneSpec(d["width"], d["height"], d["depth"], d["z_near"],
                         d["z_far"], d["spacing"], d["focal"],
                         [SceneObject.from_json(o) for o in d["objects"]],
                         d["bg_planes"], Texture.from_json(d["bg_texture"]),
                         d["m_views"], d["baseline"], d["seed"])


@dataclass
class SyntheticScene:
    spec: SceneSpec
    volume: PlaneVolume
    gt_labels: np.ndarray           # (D, H, W) bool
    cameras: dict                   # ref, src0..src{M-1}, val
    views: dict                     # same keys -> (H, W, 3) float32
    gt_mask_reference: np.ndarray   # (H, W) bool
    gt_mask_validation: np.ndarray  # (H, W) bool

    @property
    def view_keys(self):
        order = ["ref"] + [f"src{i}" for i in range(self.spec.m_views)]
        return order + ["val"]

    def source_keys(self):
        return [f"src{i}" for i in range(self.spec.m_views)]


def _look_at(eye, target):
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross([0.0, 1.0, 0.0], fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def make_rig(spec: SceneSpec):
    """Front-facing arc: reference at the origin, M sources around it,
    one validation camera offset off the arc."""
    K = np.array([[spec.focal, 0.0, spec.width / 2.0],
                  [0.0, spec.focal, spec.height / 2.0],
                  [0.0, 0.0, 1.0]])
    zc = 0.5 * (spec.z_near + spec.z_far)
    b = spec.baseline * zc
    target = np.array([0.0, 0.0, zc])
    cams = {"ref": Camera(K, np.eye(3), np.zeros(3),
                          spec.width, spec.height)}
    offs = np.linspace(-1.0, 1.0, spec.m_views)
    for i, o in enumerate(offs):
        eye = np.array([b * o, -0.3 * b * (1.0 - o * o) - 0.15 * b, 0.0])
        cams[f"src{i}"] = Camera(K, _look_at(eye, target), eye,
                                 spec.width, spec.height)
    eye = np.array([0.45 * b, 0.55 * b, 0.0])
    cams["val"] = Camera(K, _look_at(eye, target), eye,
                         spec.width, spec.height)
    return cams


def make_scene(spec: SceneSpec, seed=None) -> SyntheticScene:
    """Voxelize, label, and render the scene. Deterministic per spec.

    The optional seed overrides spec.seed (kept for parity with scene
    files that carry their own seed).
    """
    spec.validate()
    if seed is not None and seed != spec.seed:
        spec = SceneSpec.from_json(spec.to_json())
        spec.seed = seed
    cams = make_rig(spec)
    ref = cams["ref"]
    planes = DepthPlaneSet.make(spec.z_near, spec.z_far, spec.depth,
                                spec.spacing)
    D, H, W = spec.depth, spec.height, spec.width
    shell = PlaneVolume(ref, planes, np.zeros((D, H, W), np.float32),
                        np.zeros((D, H, W, 1, 3), np.float32),
                        BASIS_CONSTANT)
    pos = shell.all_world_positions()

    xi = np.zeros((D, H, W), np.float64)
    col = np.zeros((D, H, W, 3), np.float64)
    gt = np.zeros((D, H, W), bool)
    for j in range(spec.bg_planes):
        xi[D - 1 - j] = 1.0
        col[D - 1 - j] = spec.bg_texture.colors(pos[D - 1 - j])
    for obj in spec.objects:
        m = obj.inside(pos)
        xi[m] = obj.opacity
        col[m] = obj.texture.colors(pos)[m]
        gt[m] = obj.fg

    vol = PlaneVolume(ref, planes, xi.astype(np.float32),
                      col[..., None, :].astype(np.float32), BASIS_CONSTANT)

    for key, cam in cams.items():
        for obj in spec.objects:
            if not obj.fg:
                continue
            try:
                u, v, _ = project_point(cam,
                                        np.asarray(obj.center, np.float64))
            except Exception:
                u, v = -1.0, -1.0
            if not (0 <= u < W and 0 <= v < H):
                raise SynthError(f"fg object at {obj.center} outside the "
                                 f"{key} camera frustum")

    views = {key: render_view(vol, cam).rgb for key, cam in cams.items()}
    mask_ref = render_view(vol, cams["ref"], selection=gt).alpha > 0.5
    mask_val = render_view(vol, cams["val"], selection=gt).alpha > 0.5
    return SyntheticScene(spec, vol, gt, cams, views, mask_ref, mask_val)


def default_scene_spec(seed: int, width=128, height=96, depth=32,
                       m_views=3) -> SceneSpec:
    """Randomized desk scene: one textured fg ellipsoid, a striped far
    wall, two pieces of lateral clutter (one wearing the fg's colors)."""
    rng = np.random.default_rng(seed)
    focal = 1.3 * width
    z_near, z_far = 2.0, 5.0
    zc = 0.5 * (z_near + z_far)
    hx = zc * width / (2.0 * focal)
    hy = zc * height / (2.0 * focal)
    zr = z_far - z_near

    fg_base = rng.uniform(0.35, 0.75, 3)
    fg_amp = rng.uniform(0.10, 0.22, 3)
    fg = SceneObject(
        "ellipsoid",
        center=(rng.uniform(-0.18, 0.18) * hx, rng.uniform(-0.15, 0.15) * hy,
                zc + rng.uniform(-0.12, 0.06) * zr),
        size=(rng.uniform(0.34, 0.46) * hx, rng.uniform(0.34, 0.46) * hy,
              rng.uniform(0.10, 0.16) * zr),
        texture=Texture("trig", tuple(fg_base), tuple(fg_amp),
                        tuple(rng.uniform(0.8, 1.8, 3)),
                        tuple(rng.uniform(0, 2 * np.pi, 3))),
        opacity=0.95, fg=True)

    side = 1.0 if rng.random() < 0.5 else -1.0
    clutter1 = SceneObject(
        "box",
        center=(side * rng.uniform(0.72, 0.85) * hx,
                rng.uniform(-0.3, 0.3) * hy,
                zc + rng.uniform(0.05, 0.25) * zr),
        size=(0.16 * hx, rng.uniform(0.25, 0.4) * hy, 0.08 * zr),
        texture=Texture("stripes", tuple(rng.uniform(0.2, 0.5, 3)),
                        tuple(rng.uniform(0.55, 0.9, 3)),
                        (rng.uniform(6, 10) / hx, 1.0, 1.0),
                        (rng.uniform(0, 1), 0, 0), (1.0, 0.4, 0.0)),
        opacity=1.0, fg=False)
    # clutter sharing the fg color model, on the opposite side
    clutter2 = SceneObject(
        "ellipsoid",
        center=(-side * rng.uniform(0.70, 0.82) * hx,
                rng.uniform(-0.35, 0.35) * hy,
                zc + rng.uniform(-0.2, 0.0) * zr),
        size=(0.14 * hx, 0.16 * hy, 0.07 * zr),
        texture=Texture("trig", tuple(fg_base), tuple(fg_amp),
                        tuple(rng.uniform(0.8, 1.8, 3)),
                        tuple(rng.uniform(0, 2 * np.pi, 3))),
        opacity=0.95, fg=False)

    wall = Texture("stripes", tuple(rng.uniform(0.25, 0.55, 3)),
                   tuple(rng.uniform(0.5, 0.85, 3)),
                   (rng.uniform(2.2, 3.5) / hx, 1.0, 1.0),
                   (rng.uniform(0, 1), 0, 0),
                   (1.0, rng.uniform(0.15, 0.45), 0.0))
    return SceneSpec(width, height, depth, z_near, z_far, "linear", focal,
                     [fg, clutter1, clutter2], 1, wall, m_views,
                     baseline=0.10, seed=seed)


# -- automatic scribbles ------------------------------------------------------

def _disk_structure(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius ** 2


def _sample_polyline(region: np.ndarray, rng, n_points=4, step=12,
                     tries=25):
    """Random polyline whose rasterized segments stay inside region."""
    from .scribbles import _bresenham
    ys, xs = np.nonzero(region)
    k = rng.integers(len(ys))
    pts = [(int(xs[k]), int(ys[k]))]
    H, W = region.shape
    for _ in range(n_points - 1):
        cur = pts[-1]
        for _ in range(tries):
            ang = rng.uniform(0, 2 * np.pi)
            r = rng.uniform(0.4, 1.0) * step
            nxt = (int(round(cur[0] + r * np.cos(ang))),
                   int(round(cur[1] + r * np.sin(ang))))
            if not (0 <= nxt[0] < W and 0 <= nxt[1] < H):
                continue
            if all(region[y, x] for x, y in _bresenham(cur, nxt)):
                pts.append(nxt)
                break
    return pts


def auto_scribbles(scene: SyntheticScene, n_fg_strokes=2, n_bg_strokes=3,
                   seed=0) -> ScribbleSet:
    """Random strokes at least 3 px inside the gt fg mask / complement
    of the reference view (so the radius-2 brush stays in class)."""
    rng = np.random.default_rng(seed)
    erode = _disk_structure(3)
    fg_region = ndimage.binary_erosion(scene.gt_mask_reference, erode)
    bg_region = ndimage.binary_erosion(~scene.gt_mask_reference, erode)
    if not fg_region.any() or not bg_region.any():
        raise SynthError("gt mask too small to erode for scribbles")
    step = max(6, min(scene.spec.width, scene.spec.height) // 8)
    fg_strokes = [_sample_polyline(fg_region, rng, step=step)
                  for _ in range(n_fg_strokes)]
    bg_strokes = [_sample_polyline(bg_region, rng, step=2 * step)
                  for _ in range(n_bg_strokes)]
    return ScribbleSet(fg_strokes, bg_strokes, view_id="ref")


# -- scene bundles ------------------------------------------------------------

def save_png(path, image: np.ndarray) -> None:
    """uint8 PNG from float [0,1] (RGB) or bool (mask)."""
    if image.dtype == bool:
        arr = image.astype(np.uint8) * 255
    else:
        arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255)
        arr = arr.astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        return arr >= 128
    return (arr[..., :3] / 255.0).astype(np.float32)


def save_scene(outdir, scene: SyntheticScene,
               scribbles: ScribbleSet | None = None) -> None:
    """Bundle layout: scene.json, volume.plv, labels.bin, cameras.txt
    (ref, sources, val order), views/<key>.png, gt_mask_ref.png,
    gt_mask_val.png, optional scribbles.txt."""
    import os
    os.makedirs(os.path.join(outdir, "views"), exist_ok=True)
    with open(os.path.join(outdir, "scene.json"), "w") as f:
        json.dump(scene.spec.to_json(), f, indent=1, sort_keys=True)
    save_volume(os.path.join(outdir, "volume.plv"), scene.volume)
    save_labels(os.path.join(outdir, "labels.bin"), scene.gt_labels)
    keys = scene.view_keys
    save_cameras(os.path.join(outdir, "cameras.txt"),
                 [scene.cameras[k] for k in keys])
    for k in keys:
        save_png(os.path.join(outdir, "views", f"{k}.png"), scene.views[k])
    save_png(os.path.join(outdir, "gt_mask_ref.png"), scene.gt_mask_reference)
    save_png(os.path.join(outdir, "gt_mask_val.png"),
             scene.gt_mask_validation)
    if scribbles is not None:
        save_scribbles(os.path.join(outdir, "scribbles.txt"), scribbles)


def load_scene(outdir) -> SyntheticScene:
    import os
    with open(os.path.join(outdir, "scene.json")) as f:
        spec = SceneSpec.from_json(json.load(f))
    vol = load_volume(os.path.join(outdir, "volume.plv"))
    gt = load_labels(os.path.join(outdir, "labels.bin"))
    cams = load_cameras(os.path.join(outdir, "cameras.txt"))
    keys = ["ref"] + [f"src{i}" for i in range(spec.m_views)] + ["val"]
    if len(cams) != len(keys):
        raise SynthError(f"expected {len(keys)} cameras, found {len(cams)}")
    cameras = dict(zip(keys, cams))
    views = {k: load_png(os.path.join(outdir, "views", f"{k}.png"))
             for k in keys}
    mask_ref = load_png(os.path.join(outdir, "gt_mask_ref.png"))
    mask_val = load_png(os.path.join(outdir, "gt_mask_val.png"))
    return SyntheticScene(spec, vol, gt.astype(bool), cameras, views,
                          mask_ref, mask_val)


def scene_scribbles_path(outdir):
    import os
    p = os.path.join(outdir, "scribbles.txt")
    return p if os.path.exists(p) else None


def load_scene_scribbles(outdir) -> ScribbleSet:
    p = scene_scribbles_path(outdir)
    if p is None:
        raise SynthError("scene bundle has no scribbles.txt")
    return load_scribbles(p)
