"""Cameras, depth planes, homographies, rays and projections.

Conventions used throughout the package:

  - R is the camera-to-world rotation, t is the camera center in world
    units. World -> camera is x_cam = R^T (x - t).
  - n, the principal axis in world coordinates, is the third column of R.
    "Depth" always means the coordinate along n, i.e. x_cam[2].
  - Pixel coordinates are index-space: the integer pair (u, v) names the
    center of pixel (u, v). The continuous image-plane coordinate that K
    acts on is therefore (u + 0.5, v + 0.5). All sampling, projection and
    warping round-trips are exact at grid centers under this convention.
  - Homographies map continuous image-plane coordinates (K-space), so
    samplers shift by +-0.5 at the boundary between index space and
    K-space. `warp_feature_map` does this internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics K, camera-to-world rotation R, center t."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise GeometryError("R must be orthonormal with det +1")
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0:
            raise GeometryError("K must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("K must have positive focal entries")
        if abs(K[2, 2] - 1.0) > 1e-12:
            raise GeometryError("K[2,2] must be 1")

    @property
    def n(self) -> np.ndarray:
        """Principal axis (unit) in world coordinates."""
        return self.R[:, 2]

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resampled by 1/factor in both axes."""
        S = np.diag([1.0 / factor, 1.0 / factor, 1.0])
        return Camera(S @ self.K, self.R, self.t,
                      max(1, int(round(self.width / factor))),
                      max(1, int(round(self.height / factor))))


@dataclass(frozen=True)
class DepthPlaneSet:
    """Ordered fronto-parallel plane depths along the reference axis."""

    depths: np.ndarray
    spacing_kind: str = "linear"  # "linear" | "inverse"

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "depths", d)
        if d.size == 0:
            raise GeometryError("empty depth plane set")
        if np.any(d <= 0):
            raise GeometryError("plane depths must be positive")
        if np.any(np.diff(d) <= 0):
            raise GeometryError("plane depths must be strictly increasing")
        if self.spacing_kind not in ("linear", "inverse"):
            raise GeometryError(f"unknown spacing kind {self.spacing_kind!r}")

    def __len__(self):
        return self.depths.size

    @staticmethod
    def make(z_near: float, z_far: float, count: int,
             spacing_kind: str = "linear") -> "DepthPlaneSet":
        if not (0 < z_near < z_far):
            raise GeometryError("need 0 < z_near < z_far")
        if count < 1:
            raise GeometryError("need at least one plane")
        if count == 1:
            depths = np.array([z_near], dtype=np.float64)
        elif spacing_kind == "linear":
            depths = np.linspace(z_near, z_far, count)
        else:
            # uniform in 1/z between 1/z_near and 1/z_far
            depths = 1.0 / np.linspace(1.0 / z_near, 1.0 / z_far, count)
        return DepthPlaneSet(depths, spacing_kind)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit length
    n: np.ndarray = field(repr=False)  # principal axis of the source camera

    def point_at_depth(self, z):
        """Point on the ray whose depth along the camera axis is z."""
        scale = np.asarray(z) / float(self.direction @ self.n)
        return self.origin + np.multiply.outer(scale, self.direction)


def homography_matrix(cam_i: Camera, cam_r: Camera, z: float) -> np.ndarray:
    """Plane-induced homography for the fronto-parallel plane at depth z.

    The returned H satisfies the warp contract: a reference-view pixel
    maps through H^-1 to the view-i pixel observing the same 3D point on
    the plane. H_{r->r}(z) is the identity.
    """
    if z <= 0:
        raise GeometryError(f"invalid plane depth {z}")
    try:
        A = ref_to_view_map(cam_i, cam_r, z)
        return np.linalg.inv(A)
    except np.linalg.LinAlgError as e:
        raise GeometryError(f"invalid camera: {e}") from e


def ref_to_view_map(cam_i: Camera, cam_r: Camera, z: float) -> np.ndarray:
    """H^-1 of `homography_matrix`: reference pixels to view-i pixels.

    A reference pixel p sees the plane point x = t_r + z R_r K_r^-1 p
    (the n_r-component of R_r K_r^-1 p is exactly 1), so folding the
    baseline in as a rank-one term gives

        A = K_i R_i^T (I + (t_r - t_i) n_r^T / z) R_r K_r^-1.

    Note the world-frame normal's outer product multiplies R_r from the
    left; written with the normal in reference-camera coordinates it is
    the familiar (R_r + (t_r - t_i) e_3^T / z) sandwich.
    """
    if z <= 0:
        raise GeometryError(f"invalid plane depth {z}")
    Kr_inv = np.linalg.inv(cam_r.K)
    mid = np.eye(3) + np.outer(cam_r.t - cam_i.t, cam_r.n) / z
    return cam_i.K @ cam_i.R.T @ mid @ cam_r.R @ Kr_inv


def bilinear_sample(values: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sample of values[y, x, ...] at index-space coordinates.

    Taps outside the array contribute zero (zero padding).
    values: (H, W) or (H, W, C); x, y: any matching broadcast shape.
    """
    vals = values if values.ndim == 3 else values[..., None]
    H, W = vals.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0

    out = None
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            xi_c = np.clip(xi, 0, W - 1)
            yi_c = np.clip(yi, 0, H - 1)
            tap = vals[yi_c, xi_c] * np.where(inside, w, 0.0)[..., None]
            out = tap if out is None else out + tap
    if values.ndim == 2:
        out = out[..., 0]
    return out


def warp_feature_map(G_i: np.ndarray, H: np.ndarray,
                     out_width: int, out_height: int) -> np.ndarray:
    """Warp a (H, W) or (H, W, C) map: output(u,v) = G_i(H^-1 [u,v,1]).

    Bilinear sampling with zero padding outside the input domain.
    """
    H = np.asarray(H, dtype=np.float64)
    try:
        H_inv = np.linalg.inv(H)
    except np.linalg.LinAlgError as e:
        raise GeometryError("non-invertible homography") from e
    v_idx, u_idx = np.mgrid[0:out_height, 0:out_width]
    # index space -> continuous image plane, warp, back to index space
    pts = np.stack([u_idx + 0.5, v_idx + 0.5, np.ones_like(u_idx, dtype=np.float64)])
    q = np.einsum("ij,jhw->ihw", H_inv, pts)
    with np.errstate(divide="ignore", invalid="ignore"):
        qx = q[0] / q[2] - 0.5
        qy = q[1] / q[2] - 0.5
    bad = ~np.isfinite(qx) | ~np.isfinite(qy)
    qx = np.where(bad, -1e9, qx)
    qy = np.where(bad, -1e9, qy)
    out = bilinear_sample(np.asarray(G_i, dtype=np.float64), qx, qy)
    return out.astype(G_i.dtype) if isinstance(G_i, np.ndarray) else out


def pixel_ray(cam: Camera, u: float, v: float) -> Ray:
    """Ray through the center of pixel (u, v)."""
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise GeometryError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    d = cam.R @ np.linalg.inv(cam.K) @ np.array([u + 0.5, v + 0.5, 1.0])
    return Ray(cam.t.copy(), d / np.linalg.norm(d), cam.n)


def pixel_rays(cam: Camera, u: np.ndarray, v: np.ndarray):
    """Vectorized pixel_ray: directions for many pixels at once.

    Returns (origin (3,), directions (..., 3) unit length).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    p = np.stack([u + 0.5, v + 0.5, np.ones_like(u)], axis=-1)
    d = p @ np.linalg.inv(cam.K).T @ cam.R.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return cam.t.copy(), d


def project_point(cam: Camera, x: np.ndarray):
    """Project world point(s) to index-space pixel coordinates.

    Returns (u, v, depth); raises for points at or behind the camera.
    Accepts a single 3-vector or an (..., 3) array.
    """
    x = np.asarray(x, dtype=np.float64)
    x_cam = (x - cam.t) @ cam.R
    depth = x_cam[..., 2]
    if np.any(depth <= 0):
        raise GeometryError("point behind camera")
    p = x_cam @ cam.K.T
    u = p[..., 0] / depth - 0.5
    v = p[..., 1] / depth - 0.5
    return u, v, depth


def voxel_positions(cam: Camera, planes: DepthPlaneSet,
                    u: np.ndarray, v: np.ndarray, d: np.ndarray) -> np.ndarray:
    """World positions of grid voxels (u, v, plane index d).

    Position is the pixel-center ray evaluated at the plane's depth:
    t + z_d * R K^-1 [u+0.5, v+0.5, 1]^T  (linear in u, v and z).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = planes.depths[np.asarray(d, dtype=np.int64)]
    p = np.stack([u + 0.5, v + 0.5, np.ones_like(u)], axis=-1)
    dirs = p @ np.linalg.inv(cam.K).T @ cam.R.T  # n-component is exactly 1
    return cam.t + dirs * z[..., None]


def grid_bbox_diagonal(cam: Camera, planes: DepthPlaneSet,
                       width: int, height: int) -> float:
    """Diagonal of the axis-aligned world bbox of a width x height x D grid.

    Voxel positions are linear in (u, v, z), so extremes sit at the 8
    grid corners.
    """
    us, vs = [0, width - 1], [0, height - 1]
    ds = [0, len(planes) - 1]
    corners = np.array([(u, v, d) for u in us for v in vs for d in ds])
    pos = voxel_positions(cam, planes, corners[:, 0], corners[:, 1], corners[:, 2])
    return float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))


# -- camera file I/O ---------------------------------------------------------
#
# One camera per line, 23 whitespace-separated fields:
#   K00 K01 K02 K10 K11 K12 K20 K21 K22   (row-major intrinsics)
#   R00 R01 R02 R10 R11 R12 R20 R21 R22   (row-major camera-to-world rotation)
#   tx ty tz                              (camera center, world units)
#   width height                          (integers, pixels)
# Blank lines and lines starting with '#' are ignored.

def save_cameras(path, cams) -> None:
    lines = ["# K(9) R(9) t(3) width height"]
    for c in cams:
        nums = [*c.K.reshape(-1), *c.R.reshape(-1), *c.t]
        lines.append(" ".join(f"{x:.17g}" for x in nums) + f" {c.width} {c.height}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_cameras(path):
    cams = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 23:
                raise GeometryError(
                    f"{path}:{lineno}: expected 23 fields, got {len(fields)}")
            try:
                vals = [float(x) for x in fields[:21]]
                w, h = int(fields[21]), int(fields[22])
            except ValueError as e:
                raise GeometryError(f"{path}:{lineno}: {e}") from e
            try:
                cams.append(Camera(np.array(vals[0:9]).reshape(3, 3),
                                   np.array(vals[9:18]).reshape(3, 3),
                                   np.array(vals[18:21]), w, h))
            except GeometryError as e:
                raise GeometryError(f"{path}:{lineno}: {e}") from e
    return cams
