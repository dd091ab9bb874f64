"""Plane-structured voxel volumes: storage, color basis, rendering,
transmittance queries, downsampling and binary file I/O.

A volume is a W x H x D grid aligned with its reference camera: voxel
(u, v, d) sits on the pixel-center ray of reference pixel (u, v) at the
depth of plane d. Each voxel stores one transparency value xi in [0, 1]
and N RGB coefficient triples for a spherical color basis (N=1 constant,
N=4 adds the three degree-1 real spherical harmonics).

Arrays are indexed [d, v, u] (plane-major); colors in [0, 1].
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import (Camera, DepthPlaneSet, GeometryError, Ray,
                       bilinear_sample, pixel_rays, voxel_positions)

BASIS_CONSTANT = "constant"
BASIS_SH1 = "sh_degree1"
_BASIS_N = {BASIS_CONSTANT: 1, BASIS_SH1: 4}

# degree-1 real spherical harmonic constant: sqrt(3 / (4 pi))
_SH1_C = 0.4886025119029199


class VolumeError(ValueError):
    pass


@dataclass
class PlaneVolume:
    """Reference-aligned voxel grid with transparency and color basis."""

    ref_cam: Camera
    planes: DepthPlaneSet
    xi: np.ndarray        # (D, H, W) float32 in [0, 1]
    coeffs: np.ndarray    # (D, H, W, N, 3) float32
    basis_kind: str = BASIS_CONSTANT

    def __post_init__(self):
        self.xi = np.ascontiguousarray(self.xi, dtype=np.float32)
        self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float32)
        if self.basis_kind not in _BASIS_N:
            raise VolumeError(f"unknown basis kind {self.basis_kind!r}")
        D, H, W = self.xi.shape
        N = _BASIS_N[self.basis_kind]
        if self.coeffs.shape != (D, H, W, N, 3):
            raise VolumeError(
                f"coeffs shape {self.coeffs.shape} does not match grid "
                f"{(D, H, W)} with N={N}")
        if len(self.planes) != D:
            raise VolumeError("plane count does not match grid depth")
        if (self.ref_cam.width, self.ref_cam.height) != (W, H):
            raise VolumeError("reference camera size does not match grid")
        if self.xi.size and (self.xi.min() < 0 or self.xi.max() > 1):
            raise VolumeError("xi outside [0, 1]")

    @property
    def shape(self):
        """(W, H, D) grid dimensions."""
        D, H, W = self.xi.shape
        return (W, H, D)

    @property
    def n_basis(self) -> int:
        return _BASIS_N[self.basis_kind]

    def world_positions(self, u, v, d) -> np.ndarray:
        return voxel_positions(self.ref_cam, self.planes, u, v, d)

    def all_world_positions(self) -> np.ndarray:
        """(D, H, W, 3) world positions of every voxel."""
        D, H, W = self.xi.shape
        d, v, u = np.meshgrid(np.arange(D), np.arange(H), np.arange(W),
                              indexing="ij")
        return self.world_positions(u, v, d)

    def bbox_diagonal(self) -> float:
        from .geometry import grid_bbox_diagonal
        W, H, _ = self.shape
        return grid_bbox_diagonal(self.ref_cam, self.planes, W, H)


@dataclass
class RenderedView:
    rgb: np.ndarray    # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) in [0, 1]


def sh_basis(d: np.ndarray, n_basis: int) -> np.ndarray:
    """Basis values H^l(d) for unit direction(s) d; shape (..., n_basis).

    H^1 is constant 1; for N=4 the remaining entries are the degree-1
    real spherical harmonics in (y, z, x) order.
    """
    d = np.asarray(d, dtype=np.float64)
    ones = np.ones(d.shape[:-1])
    if n_basis == 1:
        return ones[..., None]
    return np.stack([ones,
                     _SH1_C * d[..., 1],
                     _SH1_C * d[..., 2],
                     _SH1_C * d[..., 0]], axis=-1)


def basis_color(coeffs: np.ndarray, d: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Color from basis coefficients for unit view direction d.

    coeffs: (..., N, 3); d: 3-vector or broadcastable (..., 3).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if not np.allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-6):
        raise VolumeError("view direction must be unit length")
    basis = sh_basis(d, coeffs.shape[-2])
    c = np.einsum("...n,...nc->...c", basis, coeffs)
    return np.clip(c, 0.0, 1.0) if clamp else c


def _plane_hits(vol: PlaneVolume, cam: Camera, rows):
    """Ray-plane intersections for output rows [rows.start, rows.stop).

    Returns index-space sample coords (D, h, W) in the reference grid,
    a validity mask, and per-pixel unit view directions.
    """
    H_out, W_out = cam.height, cam.width
    v_idx, u_idx = np.mgrid[rows.start:rows.stop, 0:W_out]
    origin, dirs = pixel_rays(cam, u_idx, v_idx)

    n_r = vol.ref_cam.n
    t_r = vol.ref_cam.t
    denom = dirs @ n_r                       # (h, W)
    base = float((origin - t_r) @ n_r)
    z = vol.planes.depths                    # (D,)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (z[:, None, None] - base) / denom
    pts = origin + lam[..., None] * dirs     # (D, h, W, 3)

    x_cam = np.einsum("...i,ij->...j", pts - t_r, vol.ref_cam.R)
    K = vol.ref_cam.K
    with np.errstate(divide="ignore", invalid="ignore"):
        su = (K[0, 0] * x_cam[..., 0] + K[0, 1] * x_cam[..., 1]
              + K[0, 2] * x_cam[..., 2]) / x_cam[..., 2] - 0.5
        sv = (K[1, 1] * x_cam[..., 1] + K[1, 2] * x_cam[..., 2]) \
            / x_cam[..., 2] - 0.5
    valid = (lam > 0) & np.isfinite(su) & np.isfinite(sv)
    su = np.where(valid, su, -1e9)
    sv = np.where(valid, sv, -1e9)
    return su, sv, dirs


def _render_rows(vol, cam, xi_eff, rows):
    su, sv, dirs = _plane_hits(vol, cam, rows)
    D, Hg, Wg = vol.xi.shape
    N = vol.n_basis
    basis = sh_basis(dirs, N)                       # (h, W, N)
    h, w = su.shape[1], su.shape[2]
    rgb = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    for k in range(D):
        stacked = np.concatenate(
            [xi_eff[k][..., None],
             vol.coeffs[k].reshape(Hg, Wg, 3 * N).astype(np.float64)], axis=-1)
        samp = bilinear_sample(stacked, su[k], sv[k])
        xi_k = np.clip(samp[..., 0], 0.0, 1.0)
        coef = samp[..., 1:].reshape(h, w, N, 3)
        color = np.clip(np.einsum("hwn,hwnc->hwc", basis, coef), 0.0, 1.0)
        rgb += color * (xi_k * trans)[..., None]
        trans = trans * (1.0 - xi_k)
    return rgb, 1.0 - trans


def render_view(vol: PlaneVolume, cam: Camera, selection: np.ndarray | None = None,
                workers: int = 1) -> RenderedView:
    """Alpha-composite the volume into the given camera.

    Per output pixel the ray is intersected with every depth plane
    near-to-far; transparency and coefficients are sampled bilinearly
    in-plane and over-composited. With a selection mask, non-selected
    voxels contribute xi = 0, so a black background emerges.

    Results are bit-identical for any worker count (pixels are
    independent).
    """
    if selection is not None:
        if selection.shape != vol.xi.shape:
            raise VolumeError("selection mask shape does not match grid")
        xi_eff = (vol.xi * selection.astype(np.float32)).astype(np.float64)
    else:
        xi_eff = vol.xi.astype(np.float64)

    H_out = cam.height
    if workers <= 1:
        rgb, alpha = _render_rows(vol, cam, xi_eff, range(0, H_out))
    else:
        chunk = max(1, -(-H_out // workers))
        spans = [range(i, min(i + chunk, H_out)) for i in range(0, H_out, chunk)]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda r: _render_rows(vol, cam, xi_eff, r), spans))
        rgb = np.concatenate([p[0] for p in parts], axis=0)
        alpha = np.concatenate([p[1] for p in parts], axis=0)
    return RenderedView(np.clip(rgb, 0.0, 1.0), np.clip(alpha, 0.0, 1.0))


def transmittance_profile(vol: PlaneVolume, ray: Ray):
    """Per-plane (voxel index or None, xi, T) walking near-to-far.

    Nearest-voxel sampling; T is the inclusive product of (1 - xi) up to
    and including the current plane. Off-grid planes contribute xi = 0.
    """
    us, vs, ok = _nearest_indices(vol, ray.origin[None, :], ray.direction[None, :])
    xi = np.where(ok[0], vol.xi[np.arange(len(vol.planes)),
                                np.clip(vs[0], 0, vol.xi.shape[1] - 1),
                                np.clip(us[0], 0, vol.xi.shape[2] - 1)], 0.0)
    T = np.cumprod(1.0 - xi.astype(np.float64))
    out = []
    for k in range(len(vol.planes)):
        idx = (int(us[0, k]), int(vs[0, k]), k) if ok[0, k] else None
        out.append((idx, float(xi[k]), float(T[k])))
    return out


def _nearest_indices(vol: PlaneVolume, origins, dirs):
    """Nearest reference-grid (u, v) per plane for rays; (P, D) arrays."""
    D, Hg, Wg = vol.xi.shape
    n_r, t_r = vol.ref_cam.n, vol.ref_cam.t
    denom = dirs @ n_r                                 # (P,)
    base = (origins - t_r) @ n_r                       # (P,)
    z = vol.planes.depths
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (z[None, :] - base[:, None]) / denom[:, None]   # (P, D)
    pts = origins[:, None, :] + lam[..., None] * dirs[:, None, :]
    x_cam = np.einsum("pdi,ij->pdj", pts - t_r, vol.ref_cam.R)
    K = vol.ref_cam.K
    with np.errstate(divide="ignore", invalid="ignore"):
        su = (K[0, 0] * x_cam[..., 0] + K[0, 1] * x_cam[..., 1]
              + K[0, 2] * x_cam[..., 2]) / x_cam[..., 2] - 0.5
        sv = (K[1, 1] * x_cam[..., 1] + K[1, 2] * x_cam[..., 2]) \
            / x_cam[..., 2] - 0.5
    us = np.floor(su + 0.5).astype(np.int64)
    vs = np.floor(sv + 0.5).astype(np.int64)
    ok = ((lam > 0) & np.isfinite(su) & np.isfinite(sv)
          & (us >= 0) & (us < Wg) & (vs >= 0) & (vs < Hg))
    return us, vs, ok


def surface_voxels(vol: PlaneVolume, origins, dirs, gamma: float = 0.01):
    """Vectorized surface-voxel query for many rays.

    Returns an (P, 3) int array of (u, v, d) indices and a (P,) found
    mask. The surface voxel is the first along the ray where the
    inclusive accumulated transmittance drops below gamma.
    """
    if not (0 < gamma < 1):
        raise VolumeError("gamma must be in (0, 1)")
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    us, vs, ok = _nearest_indices(vol, origins, dirs)
    D, Hg, Wg = vol.xi.shape
    xi = np.where(ok, vol.xi[np.arange(D)[None, :],
                             np.clip(vs, 0, Hg - 1),
                             np.clip(us, 0, Wg - 1)].astype(np.float64), 0.0)
    T = np.cumprod(1.0 - xi, axis=1)
    below = T < gamma
    found = below.any(axis=1)
    first = np.argmax(below, axis=1)
    out = np.stack([np.take_along_axis(us, first[:, None], 1)[:, 0],
                    np.take_along_axis(vs, first[:, None], 1)[:, 0],
                    first], axis=1)
    return out, found


def surface_voxel(vol: PlaneVolume, ray: Ray, gamma: float = 0.01):
    """First voxel along the ray with accumulated transmittance < gamma.

    Returns an (u, v, d) index triple, or None if the ray never drops
    below gamma.
    """
    out, found = surface_voxels(vol, ray.origin[None, :],
                                ray.direction[None, :], gamma)
    return tuple(int(x) for x in out[0]) if found[0] else None


# -- downsampling ------------------------------------------------------------

@dataclass(frozen=True)
class DownsampleMap:
    """Nearest-cell index maps from a full grid onto its downsampled grid.

    map_u/map_v send full-resolution columns/rows to block indices;
    map_z sends full planes to output plane indices, -1 for planes that
    were truncated away.
    """

    map_u: np.ndarray
    map_v: np.ndarray
    map_z: np.ndarray

    def upsample_labels(self, labels_down: np.ndarray) -> np.ndarray:
        """Nearest-cell label upsampling; truncated planes become False."""
        D = self.map_z.size
        H = self.map_v.size
        W = self.map_u.size
        out = np.zeros((D, H, W), dtype=bool)
        kept = self.map_z >= 0
        zz = self.map_z[kept]
        out[kept] = labels_down[zz][:, self.map_v][:, :, self.map_u]
        return out


def block_reduce_xy(arr: np.ndarray, factor: int, how: str = "mean") -> np.ndarray:
    """Reduce (D, H, W, ...) blocks of factor x factor in H and W.

    Ragged edge blocks are reduced over the pixels they actually contain.
    """
    if factor == 1 and how == "mean":
        return arr.copy()
    D, H, W = arr.shape[:3]
    hb = np.arange(0, H, factor)
    wb = np.arange(0, W, factor)
    if how == "mean":
        s = np.add.reduceat(np.add.reduceat(arr, hb, axis=1), wb, axis=2)
        hc = np.minimum(hb + factor, H) - hb
        wc = np.minimum(wb + factor, W) - wb
        counts = np.multiply.outer(hc, wc).astype(arr.dtype if
                                                  np.issubdtype(arr.dtype, np.floating)
                                                  else np.float64)
        return s / counts.reshape((1,) + counts.shape + (1,) * (arr.ndim - 3))
    if how == "min":
        return np.minimum.reduceat(np.minimum.reduceat(arr, hb, axis=1), wb, axis=2)
    raise VolumeError(f"unknown reduction {how!r}")


def resample_planes(arr: np.ndarray, out_planes: int, how: str = "linear") -> np.ndarray:
    """Resample axis 0 from K entries to out_planes.

    "linear" interpolates; "min" takes the min of the two bracketing
    entries (conservative, for distance fields).
    """
    K = arr.shape[0]
    if out_planes == K:
        return arr.copy()
    pos = np.linspace(0.0, K - 1.0, out_planes) if out_planes > 1 \
        else np.array([(K - 1) / 2.0])
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, K - 1)
    w = (pos - lo).reshape((-1,) + (1,) * (arr.ndim - 1))
    if how == "linear":
        return arr[lo] * (1.0 - w) + arr[hi] * w
    if how == "min":
        return np.where(w > 0, np.minimum(arr[lo], arr[hi]), arr[lo])
    raise VolumeError(f"unknown resampling {how!r}")


def _plane_sample_positions(n_keep: int, out_planes: int) -> np.ndarray:
    if out_planes > 1:
        return np.linspace(0.0, n_keep - 1.0, out_planes)
    return np.array([(n_keep - 1) / 2.0])


def downsample_volume(vol: PlaneVolume, factor_xy: int, out_planes: int,
                      plane_keep) -> tuple[PlaneVolume, DownsampleMap]:
    """Reduce XY by block averaging and resample kept planes.

    plane_keep is the set of full-resolution plane indices to retain
    (order is normalized); the kept planes are linearly resampled to
    out_planes along the plane axis. Returns the reduced volume and the
    nearest-cell index mapping for sending labels back up.
    """
    keep = np.unique(np.asarray(sorted(plane_keep), dtype=np.int64))
    if keep.size == 0:
        raise VolumeError("plane_keep must be nonempty")
    if factor_xy < 1:
        raise VolumeError("factor_xy must be >= 1")
    if out_planes > keep.size:
        raise VolumeError("out_planes exceeds number of kept planes")
    D, H, W = vol.xi.shape

    xi = resample_planes(
        block_reduce_xy(vol.xi[keep].astype(np.float64), factor_xy), out_planes)
    N = vol.n_basis
    co = vol.coeffs[keep].reshape(keep.size, H, W, 3 * N).astype(np.float64)
    co = resample_planes(block_reduce_xy(co, factor_xy), out_planes)

    depths = np.interp(_plane_sample_positions(keep.size, out_planes),
                       np.arange(keep.size), vol.planes.depths[keep])
    Wd, Hd = xi.shape[2], xi.shape[1]
    S = np.diag([1.0 / factor_xy, 1.0 / factor_xy, 1.0])
    cam = Camera(S @ vol.ref_cam.K, vol.ref_cam.R, vol.ref_cam.t, Wd, Hd)
    down = PlaneVolume(cam, DepthPlaneSet(depths, vol.planes.spacing_kind),
                       np.clip(xi, 0.0, 1.0).astype(np.float32),
                       co.reshape(out_planes, Hd, Wd, N, 3).astype(np.float32),
                       vol.basis_kind)

    map_u = np.arange(W) // factor_xy
    map_v = np.arange(H) // factor_xy
    map_z = np.full(D, -1, dtype=np.int64)
    kept_pos = {int(p): j for j, p in enumerate(keep)}
    grid = _plane_sample_positions(keep.size, out_planes)
    for d in range(D):
        j = kept_pos.get(d)
        if j is not None:
            map_z[d] = int(np.argmin(np.abs(grid - j)))
    return down, DownsampleMap(map_u, map_v, map_z)


# -- binary volume format ----------------------------------------------------
#
# Little-endian. Header:
#   magic     8s   b"PLANEVOL"
#   version   u32  1
#   W H D N   u32 x4
#   basis     u8   0 = constant, 1 = sh_degree1
#   spacing   u8   0 = linear, 1 = inverse
#   pad       u16
#   z_near    f32
#   z_far     f32
# Camera record: K (9 f64), R (9 f64), t (3 f64), width u32, height u32.
# Payload: voxels in (d, v, u) order, per voxel xi then k^1..k^N as f32.

_MAGIC = b"PLANEVOL"
_HDR = struct.Struct("<8sIIIIIBBHff")
_CAM = struct.Struct("<21dII")
_BASIS_CODE = {BASIS_CONSTANT: 0, BASIS_SH1: 1}
_SPACING_CODE = {"linear": 0, "inverse": 1}


def _pack_camera(cam: Camera) -> bytes:
    return _CAM.pack(*cam.K.reshape(-1), *cam.R.reshape(-1), *cam.t,
                     cam.width, cam.height)


def _unpack_camera(buf: bytes) -> Camera:
    vals = _CAM.unpack(buf)
    return Camera(np.array(vals[0:9]).reshape(3, 3),
                  np.array(vals[9:18]).reshape(3, 3),
                  np.array(vals[18:21]), vals[21], vals[22])


def save_volume(path, vol: PlaneVolume) -> None:
    D, H, W = vol.xi.shape
    ref = DepthPlaneSet.make(float(vol.planes.depths[0]),
                             float(vol.planes.depths[-1]), D,
                             vol.planes.spacing_kind) if D > 1 else vol.planes
    if D > 1 and not np.allclose(ref.depths, vol.planes.depths,
                                 rtol=1e-9, atol=0):
        raise VolumeError(
            "plane depths do not follow the declared spacing; "
            "only regular spacings are serializable")
    with open(path, "wb") as f:
        f.write(_HDR.pack(_MAGIC, 1, W, H, D, vol.n_basis,
                          _BASIS_CODE[vol.basis_kind],
                          _SPACING_CODE[vol.planes.spacing_kind], 0,
                          float(vol.planes.depths[0]),
                          float(vol.planes.depths[-1])))
        f.write(_pack_camera(vol.ref_cam))
        payload = np.concatenate(
            [vol.xi[..., None], vol.coeffs.reshape(D, H, W, 3 * vol.n_basis)],
            axis=-1).astype("<f4")
        f.write(payload.tobytes())


def load_volume(path) -> PlaneVolume:
    with open(path, "rb") as f:
        data = f.read()
    return loads_volume(data, name=str(path))


def loads_volume(data: bytes, name: str = "<bytes>") -> PlaneVolume:
    if len(data) < _HDR.size or data[:8] != _MAGIC:
        raise VolumeError(f"{name}: not a volume file")
    (_, version, W, H, D, N, basis, spacing, _pad,
     z_near, z_far) = _HDR.unpack_from(data, 0)
    if version != 1:
        raise VolumeError(f"{name}: unsupported version {version}")
    off = _HDR.size
    cam = _unpack_camera(data[off:off + _CAM.size])
    off += _CAM.size
    count = D * H * W * (1 + 3 * N)
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    if payload.size != count:
        raise VolumeError(f"{name}: truncated payload")
    payload = payload.reshape(D, H, W, 1 + 3 * N)
    basis_kind = {v: k for k, v in _BASIS_CODE.items()}[basis]
    spacing_kind = {v: k for k, v in _SPACING_CODE.items()}[spacing]
    planes = DepthPlaneSet.make(float(z_near), float(z_far), D, spacing_kind) \
        if D > 1 else DepthPlaneSet(np.array([z_near]), spacing_kind)
    return PlaneVolume(cam, planes, payload[..., 0].copy(),
                       payload[..., 1:].reshape(D, H, W, N, 3).copy(),
                       basis_kind)


# -- label sidecar -----------------------------------------------------------

_LBL_MAGIC = b"VOLLABEL"
_LBL_HDR = struct.Struct("<8sIIII")


def save_labels(path, labels: np.ndarray) -> None:
    D, H, W = labels.shape
    with open(path, "wb") as f:
        f.write(_LBL_HDR.pack(_LBL_MAGIC, 1, W, H, D))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def load_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _LBL_HDR.size or data[:8] != _LBL_MAGIC:
        raise VolumeError(f"{path}: not a label file")
    _, version, W, H, D = _LBL_HDR.unpack_from(data, 0)
    arr = np.frombuffer(data, dtype=np.uint8, count=D * H * W,
                        offset=_LBL_HDR.size)
    return arr.reshape(D, H, W).astype(bool)
