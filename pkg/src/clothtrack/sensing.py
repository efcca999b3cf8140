"""Top-down orthographic camera, z-buffer visibility and synthetic point clouds."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .mesh import ClothMesh, ClothState


@dataclass(frozen=True)
class CameraModel:
    """Orthographic camera looking straight down the -z axis.

    ``splat_radius`` is the footprint of each vertex in the z-buffer; it has to
    cover the gap between grid vertices, otherwise lower layers show through
    the holes of a vertex-only rasterization.
    """

    x_bounds: tuple = (-0.3, 0.3)
    y_bounds: tuple = (-0.3, 0.3)
    resolution: tuple = (200, 200)  # (width, height)
    depth_noise_sigma: float = 0.0
    dropout_rate: float = 0.0
    z_epsilon: float = 0.002
    splat_radius: float = 0.005
    height: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x_bounds", tuple(float(v) for v in self.x_bounds))
        object.__setattr__(self, "y_bounds", tuple(float(v) for v in self.y_bounds))
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if not (self.x_bounds[1] > self.x_bounds[0] and self.y_bounds[1] > self.y_bounds[0]):
            raise ValueError("camera bounds are degenerate")
        if self.resolution[0] < 16 or self.resolution[1] < 16:
            raise ValueError("camera resolution must be at least 16x16")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.depth_noise_sigma < 0 or self.z_epsilon < 0 or self.splat_radius < 0:
            raise ValueError("noise sigma, z_epsilon and splat_radius must be non-negative")

    @property
    def pixel_size(self) -> tuple[float, float]:
        w, h = self.resolution
        return (
            (self.x_bounds[1] - self.x_bounds[0]) / w,
            (self.y_bounds[1] - self.y_bounds[0]) / h,
        )

    def pixel_of(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(col, row, in_bounds) for each point."""
        pts = np.asarray(points, float).reshape(-1, 3)
        px, py = self.pixel_size
        col = np.floor((pts[:, 0] - self.x_bounds[0]) / px).astype(np.int64)
        row = np.floor((pts[:, 1] - self.y_bounds[0]) / py).astype(np.int64)
        w, h = self.resolution
        inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        return col, row, inside

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    fully_occluded: bool = False

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point in cloud")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class SphereOccluder:
    center: tuple
    radius: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        d2 = np.sum((np.asarray(points).reshape(-1, 3) - np.asarray(self.center)) ** 2, axis=1)
        return d2 <= self.radius**2


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, ClothState):
        return x.positions
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def _splat_offsets(camera: CameraModel) -> np.ndarray:
    px, py = camera.pixel_size
    rx = int(np.floor(camera.splat_radius / px))
    ry = int(np.floor(camera.splat_radius / py))
    offs = [
        (dc, dr)
        for dr in range(-ry, ry + 1)
        for dc in range(-rx, rx + 1)
        if (dc * px) ** 2 + (dr * py) ** 2 <= camera.splat_radius**2 + 1e-18
    ]
    return np.array(offs, dtype=np.int64).reshape(-1, 2)


def height_buffer(points: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Per-pixel maximum height of ``points`` splatted over their footprint; -inf where empty."""
    pts = _points(points)
    w, h = camera.resolution
    buf = np.full(w * h, -np.inf)
    col, row, inside = camera.pixel_of(pts)
    col, row, z = col[inside], row[inside], pts[inside, 2]
    for dc, dr in _splat_offsets(camera):
        c, r = col + dc, row + dr
        ok = (c >= 0) & (c < w) & (r >= 0) & (r < h)
        np.maximum.at(buf, r[ok] * w + c[ok], z[ok])
    return buf.reshape(h, w)


def visible_vertices(mesh: Optional[ClothMesh], state, camera: CameraModel) -> np.ndarray:
    """Sorted indices of vertices seen by the top-down camera.

    A vertex is visible when its height is within ``camera.z_epsilon`` of the
    z-buffer maximum at its own pixel.  Vertices outside the image are dropped.
    """
    pts = _points(state)
    if mesh is not None and len(pts) != mesh.num_vertices:
        raise ValueError("state does not match mesh")
    buf = height_buffer(pts, camera)
    col, row, inside = camera.pixel_of(pts)
    idx = np.flatnonzero(inside)
    top = buf[row[idx], col[idx]]
    return idx[pts[idx, 2] >= top - camera.z_epsilon]


def render_point_cloud(
    mesh: Optional[ClothMesh],
    state,
    camera: CameraModel,
    occluders: Sequence[SphereOccluder] = (),
    rng_seed: int = 0,
) -> PointCloud:
    """Noisy partial cloud of the visible cloth surface.

    Points lying inside any occluder, before or after noise, are removed so
    that nothing is ever returned from inside the tweezer volume.
    """
    pts = _points(state)
    vis = visible_vertices(mesh, pts, camera)
    clean = pts[vis]
    rng = np.random.default_rng(rng_seed)
    noisy = clean + rng.normal(0.0, camera.depth_noise_sigma, size=clean.shape) if camera.depth_noise_sigma > 0 else clean.copy()
    keep = np.ones(len(clean), dtype=bool)
    for occ in occluders:
        keep &= ~occ.contains(clean)
        keep &= ~occ.contains(noisy)
    if camera.dropout_rate > 0:
        keep &= rng.random(len(clean)) >= camera.dropout_rate
    out = noisy[keep]
    if len(out) == 0:
        warnings.warn("scene fully occluded: empty point cloud", RuntimeWarning, stacklevel=2)
        return PointCloud(out, fully_occluded=True)
    return PointCloud(out)


def depth_image(points, camera: CameraModel) -> np.ndarray:
    """Depth (camera height minus surface height) per pixel; 0 where nothing returns."""
    buf = height_buffer(_points(points), camera)
    return np.where(np.isfinite(buf), camera.height - buf, 0.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Chamfer


def nearest_neighbors(source, target) -> tuple[np.ndarray, np.ndarray]:
    """For each source point: index of the nearest target point and the squared distance."""
    src, tgt = _points(source), _points(target)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("nearest-neighbour query on an empty point set")
    _, idx = cKDTree(tgt).query(src, k=1)
    diff = src - tgt[idx]
    return idx, np.einsum("ij,ij->i", diff, diff)


def chamfer_one_way(source, target, squared: bool = True) -> float:
    """Mean over ``source`` of the (squared) distance to the nearest ``target`` point."""
    _, d2 = nearest_neighbors(source, target)
    return float(np.mean(d2 if squared else np.sqrt(d2)))


def chamfer_bidirectional(a, b, squared: bool = True) -> float:
    return 0.5 * (chamfer_one_way(a, b, squared) + chamfer_one_way(b, a, squared))


# ---------------------------------------------------------------------------
# file formats


def write_ply(path: str | Path, points) -> None:
    pts = _points(points)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    body = [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in pts]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    count = None
    for k, line in enumerate(lines):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        if line.strip() == "end_header":
            body = lines[k + 1 : k + 1 + (count or 0)]
            break
    else:
        raise ValueError(f"{path}: missing end_header")
    pts = np.array([[float(t) for t in l.split()[:3]] for l in body], dtype=np.float64).reshape(-1, 3)
    if len(pts) != count:
        raise ValueError(f"{path}: expected {count} vertices, found {len(pts)}")
    return pts


def write_depth(path: str | Path, depth: np.ndarray, camera: Optional[CameraModel] = None) -> None:
    """Depth as ``.npy`` plus a ``.json`` sidecar describing layout and units."""
    path = Path(path)
    arr = np.ascontiguousarray(depth, dtype=np.float32)
    np.save(path.with_suffix(".npy"), arr)
    meta = {"height": arr.shape[0], "width": arr.shape[1], "dtype": "float32", "order": "row-major", "units": "m"}
    if camera is not None:
        meta["camera"] = camera.to_dict()
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_depth(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    arr = np.load(path.with_suffix(".npy"))
    if arr.shape != (meta["height"], meta["width"]):
        raise ValueError(f"{path}: depth shape {arr.shape} disagrees with sidecar")
    return arr, meta
