"""Per-voxel feature embedding: 2D image features, plane-sweep cost
volume, cost refinement, volume-intrinsic features and positional
encoding, concatenated as v = [mvs; ibr; xyz].

The learned 2D encoder and 3D refinement network are replaced by
deterministic stand-ins with identical tensor shapes (32-channel
quarter-resolution 2D features, 8-channel refined per-voxel features).
The exact channel recipes live here and are frozen by golden-file
tests; everything downstream only sees the (offset, width) layout.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, DepthPlaneSet, bilinear_sample, homography_matrix, warp_feature_map
from .volume import PlaneVolume, VolumeError

FEATURE_CHANNELS = 32
MVS_CHANNELS = 8
POS_CHANNELS = 56
FEATURE_STRIDE = 4


class FeatureError(ValueError):
    pass


@dataclass
class FeatureMap2D:
    values: np.ndarray  # (H_c, W_c, F)

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class CostVolume:
    ref_cam: Camera          # feature-resolution reference camera
    planes: DepthPlaneSet
    values: np.ndarray       # (D, H_c, W_c, F) per-channel variance
    source_ids: tuple


@dataclass(frozen=True)
class FeatureLayout:
    """Named (offset, width) segments of the per-voxel feature vector."""

    segments: tuple  # of (name, offset, width)

    @property
    def total(self) -> int:
        name, off, width = self.segments[-1]
        return off + width

    def slice(self, name: str) -> slice:
        for seg, off, width in self.segments:
            if seg == name:
                return slice(off, off + width)
        raise FeatureError(f"no feature segment named {name!r}")

    @staticmethod
    def default(n_basis: int) -> "FeatureLayout":
        ibr = 1 + 3 * n_basis
        return FeatureLayout((("mvs", 0, MVS_CHANNELS),
                              ("ibr", MVS_CHANNELS, ibr),
                              ("xyz", MVS_CHANNELS + ibr, POS_CHANNELS)))


@dataclass
class FeatureVolume:
    values: np.ndarray  # (D, H, W, C) float32
    layout: FeatureLayout

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def segment(self, name: str) -> np.ndarray:
        return self.values[..., self.layout.slice(name)]

    def flat(self) -> np.ndarray:
        """(num_voxels, C) view in (d, v, u) raster order."""
        return self.values.reshape(-1, self.values.shape[-1])


def _luminance(img):
    return (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])


def _cell_view(arr, stride):
    """(H, W, ...) -> (Hc, Wc, stride*stride, ...) with edge-padded ragged cells."""
    H, W = arr.shape[:2]
    Hc = -(-H // stride)
    Wc = -(-W // stride)
    pad_h = Hc * stride - H
    pad_w = Wc * stride - W
    pads = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (arr.ndim - 2)
    padded = np.pad(arr, pads, mode="edge")
    shaped = padded.reshape((Hc, stride, Wc, stride) + arr.shape[2:])
    shaped = np.moveaxis(shaped, 2, 1)  # (Hc, Wc, s, s, ...)
    return shaped.reshape((Hc, Wc, stride * stride) + arr.shape[2:])


def _tree_mean(cells):
    """Mean over axis 2 via strict pairwise (binary tree) addition.

    The window sizes here are powers of two, so the tree consists only
    of exact doublings when all entries are equal: constant input gives
    a bitwise-exact constant mean, which the flat-input guarantees of
    extract_2d_features rely on.
    """
    n = cells.shape[2]
    acc = cells
    while acc.shape[2] > 1:
        acc = acc[:, :, 0::2] + acc[:, :, 1::2]
    return acc[:, :, 0] / n


def _neighbor_contrast(grid):
    """Max abs difference to the 8 cell neighbors, per channel."""
    H, W = grid.shape[:2]
    out = np.zeros_like(grid)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            ys = slice(max(dy, 0), min(H + dy, H))
            yd = slice(max(-dy, 0), min(H - dy, H))
            xs = slice(max(dx, 0), min(W + dx, W))
            xd = slice(max(-dx, 0), min(W - dx, W))
            out[yd, xd] = np.maximum(out[yd, xd],
                                     np.abs(grid[yd, xd] - grid[ys, xs]))
    return out


def extract_2d_features(image: np.ndarray) -> FeatureMap2D:
    """Deterministic 32-channel features at 1/4 resolution.

    Channel map (frozen by the golden-file test):
      0-2   mean RGB per 4x4 cell
      3-5   per-channel RGB standard deviation within the cell
      6-13  8-orientation gradient histogram of luminance,
            magnitude-weighted, signed orientations over [0, 2pi)
      14-16 mean RGB over 8x8 blocks, nearest-upsampled to the cell grid
      17-19 mean RGB over 16x16 blocks, likewise
      20    luminance Laplacian energy (mean squared 4-neighbor Laplacian)
      21-23 max abs difference of the cell-mean to its 8 cell neighbors,
            per RGB channel
      24-26 per-channel max - min within the cell
      27-29 pairwise channel covariances within the cell (RG, RB, GB)
      30-31 mean |horizontal / vertical luminance difference| in the cell

    All means use strict pairwise summation over power-of-two windows,
    so a constant input yields exactly the constant on channels 0-2 and
    14-19 and exact zeros everywhere else.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if image.size == 0:
        raise FeatureError("empty image")
    if image.min() < 0 or image.max() > 1:
        raise FeatureError("image values must lie in [0, 1]")
    s = FEATURE_STRIDE
    cells = _cell_view(image, s)                      # (Hc, Wc, s*s, 3)
    Hc, Wc = cells.shape[:2]
    out = np.zeros((Hc, Wc, FEATURE_CHANNELS))

    mean_rgb = _tree_mean(cells)
    out[..., 0:3] = mean_rgb
    dev = cells - mean_rgb[:, :, None, :]
    out[..., 3:6] = np.sqrt(_tree_mean(dev ** 2))

    lum = _luminance(image)
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    bins = np.minimum((ang / (2.0 * np.pi) * 8).astype(np.int64), 7)
    bin_cells = _cell_view(bins, s)
    mag_cells = _cell_view(mag, s)
    for b in range(8):
        out[..., 6 + b] = (mag_cells * (bin_cells == b)).sum(axis=2)

    for j, coarse in enumerate((2 * s, 4 * s)):
        m = _tree_mean(_cell_view(image, coarse))
        rep = coarse // s
        up = np.repeat(np.repeat(m, rep, axis=0), rep, axis=1)
        out[..., 14 + 3 * j:17 + 3 * j] = up[:Hc, :Wc]

    lap = np.zeros_like(lum)
    lap[1:-1, 1:-1] = (lum[:-2, 1:-1] + lum[2:, 1:-1] + lum[1:-1, :-2]
                       + lum[1:-1, 2:] - 4.0 * lum[1:-1, 1:-1])
    out[..., 20] = _tree_mean(_cell_view(lap ** 2, s))

    out[..., 21:24] = _neighbor_contrast(mean_rgb)
    out[..., 24:27] = cells.max(axis=2) - cells.min(axis=2)
    for j, (a, b) in enumerate(((0, 1), (0, 2), (1, 2))):
        out[..., 27 + j] = _tree_mean(dev[..., a] * dev[..., b])

    dh = np.zeros_like(lum)
    dh[:, 1:] = np.abs(lum[:, 1:] - lum[:, :-1])
    dv = np.zeros_like(lum)
    dv[1:, :] = np.abs(lum[1:, :] - lum[:-1, :])
    out[..., 30] = _tree_mean(_cell_view(dh, s))
    out[..., 31] = _tree_mean(_cell_view(dv, s))
    return FeatureMap2D(out)


def population_variance(stack: np.ndarray) -> np.ndarray:
    """Variance over axis 0, dividing by the number of observations."""
    mu = stack.mean(axis=0)
    return ((stack - mu) ** 2).mean(axis=0)


def feature_camera(cam: Camera, stride: int = FEATURE_STRIDE) -> Camera:
    """Camera for the quarter-resolution feature grid (ceil division)."""
    S = np.diag([1.0 / stride, 1.0 / stride, 1.0])
    return Camera(S @ cam.K, cam.R, cam.t,
                  -(-cam.width // stride), -(-cam.height // stride))


def build_cost_volume(ref_cam: Camera, views, planes: DepthPlaneSet,
                      workers: int = 1) -> CostVolume:
    """Plane-sweep variance cost volume over M source views.

    views: list of (image, Camera) source pairs, reference excluded.
    Per depth plane, each source's 2D feature map is warped into the
    reference feature grid through the plane-induced homography; the
    per-pixel, per-channel population variance across the M warps is
    the cost. Out-of-view samples contribute zeros.

    Planes are independent, so `workers` threads may sweep them
    concurrently; each writes only its own output slab, which keeps the
    result bit-identical for any worker count.
    """
    if len(views) < 2:
        raise FeatureError("need at least 2 source views for a variance")
    ref_fcam = feature_camera(ref_cam)
    maps = []
    fcams = []
    for img, cam in views:
        maps.append(extract_2d_features(img).values)
        fcams.append(feature_camera(cam))
    Hc, Wc = ref_fcam.height, ref_fcam.width
    D = len(planes)
    M = len(views)
    out = np.zeros((D, Hc, Wc, FEATURE_CHANNELS))

    def sweep(k):
        z = planes.depths[k]
        warped = np.empty((M, Hc, Wc, FEATURE_CHANNELS))
        for i, (G, fc) in enumerate(zip(maps, fcams)):
            Hm = homography_matrix(fc, ref_fcam, float(z))
            warped[i] = warp_feature_map(G, Hm, Wc, Hc)
        out[k] = population_variance(warped)

    if workers <= 1:
        for k in range(D):
            sweep(k)
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(sweep, range(D)))
    return CostVolume(ref_fcam, planes, out, tuple(range(M)))


def _box1d(arr, radius, axis):
    """Partial-window box mean along one axis via padded cumulative sums."""
    arr = np.moveaxis(arr, axis, 0)
    n = arr.shape[0]
    cs = np.concatenate([np.zeros((1,) + arr.shape[1:]), np.cumsum(arr, axis=0)])
    hi = np.minimum(np.arange(n) + radius + 1, n)
    lo = np.maximum(np.arange(n) - radius, 0)
    out = (cs[hi] - cs[lo]) / (hi - lo).reshape((-1,) + (1,) * (arr.ndim - 1))
    return np.moveaxis(out, 0, axis)


def box3d(vol, radius):
    """Separable 3D box mean over the first three axes."""
    out = _box1d(vol, radius, 0)
    out = _box1d(out, radius, 1)
    return _box1d(out, radius, 2)


def mvs_projection(seed: int, in_channels: int = FEATURE_CHANNELS,
                   out_channels: int = MVS_CHANNELS) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((in_channels, out_channels)) / np.sqrt(in_channels)


def refine_cost_volume(cv: CostVolume, vol: PlaneVolume, seed: int = 0) -> np.ndarray:
    """Refined per-voxel MVS features, (D, H, W, 8).

    Stand-in for the learned 3D refinement: a seeded linear projection
    32 -> 8 followed by a cascade of separable 3D box filters (radii 1,
    2, 4) whose octave outputs are averaged, then resampling from the
    cost grid onto the volume grid (bilinear in XY with edge clamping;
    planes matched by index when the plane sets coincide, by linear
    interpolation in depth otherwise).
    """
    P = mvs_projection(seed)
    x = cv.values @ P                           # (D, Hc, Wc, 8)
    y1 = box3d(x, 1)
    y2 = box3d(y1, 2)
    y3 = box3d(y2, 4)
    ref = (y1 + y2 + y3) / 3.0

    if len(cv.planes) == len(vol.planes) and np.allclose(
            cv.planes.depths, vol.planes.depths, rtol=1e-12, atol=0):
        per_plane = ref
    else:
        zq = vol.planes.depths
        zs = cv.planes.depths
        idx = np.searchsorted(zs, zq).clip(1, len(zs) - 1)
        lo, hi = idx - 1, idx
        w = ((zq - zs[lo]) / (zs[hi] - zs[lo])).clip(0, 1)
        per_plane = ref[lo] * (1 - w).reshape(-1, 1, 1, 1) \
            + ref[hi] * w.reshape(-1, 1, 1, 1)

    D, H, W = vol.xi.shape
    Hc, Wc = ref.shape[1], ref.shape[2]
    s = FEATURE_STRIDE
    xs = ((np.arange(W) + 0.5) / s - 0.5).clip(0, Wc - 1)
    ys = ((np.arange(H) + 0.5) / s - 0.5).clip(0, Hc - 1)
    gx, gy = np.meshgrid(xs, ys)
    out = np.empty((D, H, W, MVS_CHANNELS), dtype=np.float32)
    for k in range(D):
        out[k] = bilinear_sample(per_plane[k], gx, gy)
    return out


def ibr_features(vol: PlaneVolume) -> np.ndarray:
    """Per-voxel [xi, k^1 ... k^N] stack, (D, H, W, 1 + 3N)."""
    D, H, W = vol.xi.shape
    return np.concatenate(
        [vol.xi[..., None],
         vol.coeffs.reshape(D, H, W, 3 * vol.n_basis)], axis=-1)


def ibr_feature(vol: PlaneVolume, p) -> np.ndarray:
    """Feature of one voxel p = (u, v, d); view-independent."""
    u, v, d = p
    return ibr_features(vol)[d, v, u].astype(np.float64)


def positional_encode(coord: np.ndarray, n_freqs: int) -> np.ndarray:
    """(sin 2^j pi u, cos 2^j pi u) pairs for j = 0 .. n_freqs-1."""
    coord = np.asarray(coord, dtype=np.float64)
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    phase = coord[..., None] * freqs
    out = np.empty(coord.shape + (2 * n_freqs,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def _norm_axis(idx, size):
    if size <= 1:
        return np.zeros_like(np.asarray(idx, dtype=np.float64))
    return 2.0 * np.asarray(idx, dtype=np.float64) / (size - 1) - 1.0


def positional_features(vol: PlaneVolume) -> np.ndarray:
    """56-dim positional encodings for the whole grid, (D, H, W, 56).

    x and y are normalized to [-1, 1] over the grid and each encoded
    with 10 frequency pairs (40 dims); the plane index z gets 8 pairs
    (16 dims).
    """
    D, H, W = vol.xi.shape
    ex = positional_encode(_norm_axis(np.arange(W), W), 10)   # (W, 20)
    ey = positional_encode(_norm_axis(np.arange(H), H), 10)   # (H, 20)
    ez = positional_encode(_norm_axis(np.arange(D), D), 8)    # (D, 16)
    out = np.empty((D, H, W, POS_CHANNELS))
    out[..., 0:20] = ex[None, None, :, :]
    out[..., 20:40] = ey[None, :, None, :]
    out[..., 40:56] = ez[:, None, None, :]
    return out


def positional_feature(vol: PlaneVolume, p) -> np.ndarray:
    u, v, d = p
    ex = positional_encode(_norm_axis(np.array(u), vol.xi.shape[2]), 10)
    ey = positional_encode(_norm_axis(np.array(v), vol.xi.shape[1]), 10)
    ez = positional_encode(_norm_axis(np.array(d), vol.xi.shape[0]), 8)
    return np.concatenate([ex, ey, ez])


def assemble_features(vol: PlaneVolume, mvs: np.ndarray) -> FeatureVolume:
    """Concatenate [mvs; ibr; xyz] per voxel with its layout record."""
    D, H, W = vol.xi.shape
    if mvs.shape[:3] != (D, H, W):
        raise FeatureError(
            f"mvs grid {mvs.shape[:3]} does not match volume {(D, H, W)}")
    if mvs.shape[3] != MVS_CHANNELS:
        raise FeatureError(f"expected {MVS_CHANNELS} mvs channels")
    layout = FeatureLayout.default(vol.n_basis)
    vals = np.concatenate(
        [mvs.astype(np.float32),
         ibr_features(vol).astype(np.float32),
         positional_features(vol).astype(np.float32)], axis=-1)
    return FeatureVolume(vals, layout)


def appearance_features(fv: FeatureVolume) -> np.ndarray:
    """[mvs; ibr] slice used for appearance affinities, (D, H, W, C_app)."""
    lo = fv.layout.slice("mvs").start
    hi = fv.layout.slice("ibr").stop
    return fv.values[..., lo:hi]


# -- cache envelope ----------------------------------------------------------
#
# Same framing idea as the volume format: little-endian header
#   magic    8s  b"FEATVOL1"
#   version  u32
#   W H D C  u32 x4
#   nseg     u32
# then per segment: name_len u16, ascii name, offset u32, width u32;
# then the (D, H, W, C) float32 payload.

_F_MAGIC = b"FEATVOL1"
_F_HDR = struct.Struct("<8sIIIIII")


def cache_key(*parts) -> str:
    """Content hash for feature caches: bytes, str and ints accepted."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        elif isinstance(p, bytes):
            h.update(p)
        else:
            h.update(str(p).encode())
        h.update(b"|")
    return h.hexdigest()


def save_feature_volume(path, fv: FeatureVolume) -> None:
    D, H, W, C = fv.values.shape
    with open(path, "wb") as f:
        f.write(_F_HDR.pack(_F_MAGIC, 1, W, H, D, C, len(fv.layout.segments)))
        for name, off, width in fv.layout.segments:
            nb = name.encode("ascii")
            f.write(struct.pack("<H", len(nb)) + nb + struct.pack("<II", off, width))
        f.write(fv.values.astype("<f4").tobytes())


def load_feature_volume(path) -> FeatureVolume:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _F_HDR.size or data[:8] != _F_MAGIC:
        raise FeatureError(f"{path}: not a feature volume file")
    _, version, W, H, D, C, nseg = _F_HDR.unpack_from(data, 0)
    if version != 1:
        raise FeatureError(f"{path}: unsupported version {version}")
    off = _F_HDR.size
    segs = []
    for _ in range(nseg):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("ascii")
        off += nlen
        so, sw = struct.unpack_from("<II", data, off)
        off += 8
        segs.append((name, so, sw))
    count = D * H * W * C
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    if payload.size != count:
        raise FeatureError(f"{path}: truncated payload")
    return FeatureVolume(payload.reshape(D, H, W, C).copy(), FeatureLayout(tuple(segs)))
