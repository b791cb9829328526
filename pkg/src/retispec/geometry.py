"""Triangle meshes, orthographic cameras, software rasterization into
per-pixel geometry buffers, UV flattening, and synthetic test geometry.

The rasterizer produces everything the shading and fitting stages need in
image space: a unit normal per covered pixel, a UV coordinate per covered
pixel, a depth buffer, and the coverage mask.  UV flattening splats covered
pixels back into a pose-normalized texture grid.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .raster import Raster
from .validation import check_unit_vector

__all__ = [
    "GeometryError",
    "Mesh",
    "Camera",
    "GeometryBuffers",
    "load_obj",
    "save_obj",
    "compute_vertex_normals",
    "make_synthetic_face",
    "make_ellipsoid",
    "make_sphere",
    "make_icosphere",
    "icosphere_directions",
    "rasterize",
    "uv_flatten",
]

_DEGENERATE_AREA = 1e-12


class GeometryError(ValueError):
    """Raised for malformed meshes, empty projections, or bad buffers."""


@dataclass
class Mesh:
    vertices: np.ndarray          # (N, 3) float64
    triangles: np.ndarray         # (M, 3) int, 0-based
    uvs: np.ndarray = None        # (N, 2) in [0, 1]^2, optional
    normals: np.ndarray = None    # (N, 3) unit vectors, optional

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        n = len(self.vertices)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= n
        ):
            raise GeometryError("triangle index out of range")

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)


@dataclass
class Camera:
    """Orthographic camera: world -> camera rotation plus a pixel window.

    The camera looks down its -z axis, so the world-space viewer direction
    (surface toward viewer) is the third row of `rotation`.  Pixel mapping:
    x_px = offset_x + scale * x_cam, y_px = offset_y - scale * y_cam, with
    larger camera-space z closer to the viewer.  scale/offset default to
    fitting object coordinates [-1, 1]^2 to the image window.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scale: float = None
    offset: tuple = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        rt = self.rotation @ self.rotation.T
        if not np.allclose(rt, np.eye(3), atol=1e-9):
            raise GeometryError("camera rotation must be orthonormal")

    @property
    def view_dir(self):
        return self.rotation[2].copy()

    @classmethod
    def from_view_dir(cls, view_dir, scale=None, offset=None, up=(0.0, 1.0, 0.0)):
        v = check_unit_vector(view_dir, "view_dir")
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(up, v)
        if np.linalg.norm(right) < 1e-8:
            right = np.cross(np.array([0.0, 0.0, 1.0]), v)
        right /= np.linalg.norm(right)
        true_up = np.cross(v, right)
        return cls(rotation=np.stack([right, true_up, v]), scale=scale, offset=offset)

    def window(self, width, height):
        scale = self.scale if self.scale is not None else min(width, height) / 2.0
        offset = self.offset if self.offset is not None else (width / 2.0, height / 2.0)
        return scale, offset


@dataclass
class GeometryBuffers:
    normal_map: np.ndarray   # (H, W, 3) unit vectors under mask
    mask: np.ndarray         # (H, W) bool
    uv_map: np.ndarray       # (H, W, 2) in [0, 1]^2 under mask
    depth: np.ndarray        # (H, W) camera-space z (-inf where uncovered)
    view_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    @property
    def height(self):
        return self.mask.shape[0]

    @property
    def width(self):
        return self.mask.shape[1]


# ---------------------------------------------------------------------------
# Wavefront OBJ subset (v / vt / vn / f, ASCII)
# ---------------------------------------------------------------------------

def load_obj(path):
    verts, uvs, norms = [], [], []
    face_entries = []
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise GeometryError(f"no such OBJ file: {path}")
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif tag == "vn":
            norms.append([float(x) for x in parts[1:4]])
        elif tag == "f":
            if len(parts) < 4:
                raise GeometryError(f"{path}:{lineno}: face needs >= 3 vertices")
            corner = []
            for tok in parts[1:]:
                fields = tok.split("/")
                try:
                    vi = int(fields[0])
                    ti = int(fields[1]) if len(fields) > 1 and fields[1] else 0
                    ni = int(fields[2]) if len(fields) > 2 and fields[2] else 0
                except ValueError:
                    raise GeometryError(f"{path}:{lineno}: malformed face token {tok!r}")
                corner.append((vi, ti, ni))
            face_entries.append((lineno, corner))

    nv, nt, nn = len(verts), len(uvs), len(norms)

    def resolve(idx, count, what, lineno):
        if idx == 0:
            return -1
        j = idx - 1 if idx > 0 else count + idx
        if not 0 <= j < count:
            raise GeometryError(f"{path}:{lineno}: {what} index {idx} out of range")
        return j

    tris = []
    uv_for_vertex = np.full(nv, -1, dtype=np.int64) if nt else None
    nrm_for_vertex = np.full(nv, -1, dtype=np.int64) if nn else None
    for lineno, corner in face_entries:
        resolved = []
        for vi, ti, ni in corner:
            v = resolve(vi, nv, "vertex", lineno)
            if nt and ti:
                uv_for_vertex[v] = resolve(ti, nt, "uv", lineno)
            if nn and ni:
                nrm_for_vertex[v] = resolve(ni, nn, "normal", lineno)
            resolved.append(v)
        for k in range(1, len(resolved) - 1):  # polygon fan
            tris.append([resolved[0], resolved[k], resolved[k + 1]])

    vertices = np.asarray(verts, dtype=np.float64)
    mesh_uvs = None
    if nt and uv_for_vertex is not None and np.all(uv_for_vertex >= 0):
        mesh_uvs = np.asarray(uvs, dtype=np.float64)[uv_for_vertex]
    mesh_norms = None
    if nn and nrm_for_vertex is not None and np.all(nrm_for_vertex >= 0):
        mesh_norms = np.asarray(norms, dtype=np.float64)[nrm_for_vertex]
        lens = np.linalg.norm(mesh_norms, axis=1, keepdims=True)
        mesh_norms = mesh_norms / np.maximum(lens, 1e-300)

    mesh = Mesh(vertices=vertices, triangles=np.asarray(tris, dtype=np.int64),
                uvs=mesh_uvs, normals=mesh_norms)
    if mesh.normals is None:
        mesh = compute_vertex_normals(mesh)
    if mesh.uvs is None:
        mesh.uvs = _spherical_uvs(mesh.vertices)
    return mesh


def save_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if mesh.uvs is not None:
            for t in mesh.uvs:
                fh.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
        if mesh.normals is not None:
            for n in mesh.normals:
                fh.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        has_t, has_n = mesh.uvs is not None, mesh.normals is not None
        for tri in mesh.triangles:
            toks = []
            for vi in tri:
                i = vi + 1
                if has_t and has_n:
                    toks.append(f"{i}/{i}/{i}")
                elif has_t:
                    toks.append(f"{i}/{i}")
                elif has_n:
                    toks.append(f"{i}//{i}")
                else:
                    toks.append(str(i))
            fh.write("f " + " ".join(toks) + "\n")


# ---------------------------------------------------------------------------
# Normals and synthetic geometry
# ---------------------------------------------------------------------------

def compute_vertex_normals(mesh):
    """Area-weighted average of incident face normals, renormalized."""
    v = mesh.vertices
    t = mesh.triangles
    e1 = v[t[:, 1]] - v[t[:, 0]]
    e2 = v[t[:, 2]] - v[t[:, 0]]
    face = np.cross(e1, e2)  # magnitude = 2 * area, so this is area weighting
    areas = 0.5 * np.linalg.norm(face, axis=1)
    keep = areas > _DEGENERATE_AREA
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, t[keep, k], face[keep])
    lens = np.linalg.norm(acc, axis=1)
    referenced = np.zeros(len(v), dtype=bool)
    referenced[t[keep].ravel()] = True
    if np.any(referenced & (lens < 1e-300)):
        raise GeometryError("vertex with zero accumulated normal")
    safe = np.maximum(lens, 1e-300)
    normals = acc / safe[:, None]
    # unreferenced (isolated) vertices keep a placeholder +z normal
    normals[~referenced] = (0.0, 0.0, 1.0)
    out = Mesh(vertices=v.copy(), triangles=t.copy(),
               uvs=None if mesh.uvs is None else mesh.uvs.copy(),
               normals=normals)
    return out


def _spherical_uvs(vertices):
    center = vertices.mean(axis=0)
    d = vertices - center
    lens = np.linalg.norm(d, axis=1)
    d = d / np.maximum(lens, 1e-300)[:, None]
    u = 0.5 + np.arctan2(d[:, 0], d[:, 2]) / (2.0 * np.pi)
    v = 0.5 + np.arcsin(np.clip(d[:, 1], -1.0, 1.0)) / np.pi
    return np.clip(np.stack([u, v], axis=1), 0.0, 1.0)


def _grid_triangles(n):
    """Two triangles per cell of an (n+1) x (n+1) vertex grid, CCW toward +z."""
    idx = np.arange((n + 1) * (n + 1)).reshape(n + 1, n + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    return np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)], axis=0)


def make_synthetic_face(radii=(0.85, 1.0, 0.55), nose_amplitude=0.18,
                        resolution=48, seed=0):
    """Front-half ellipsoid height field with smooth nose/brow/cheek bumps.

    The grid spans [-1, 1]^2 with (resolution+1)^2 vertices.  Normals come
    from the analytic height gradient, UVs from spherical projection about
    the centroid.  Deterministic for a fixed seed; the seed jitters bump
    placement and strength for corpus variety.
    """
    rx, ry, rz = (float(r) for r in radii)
    if min(rx, ry, rz) <= 0:
        raise GeometryError("ellipsoid radii must be > 0")
    n = int(resolution)
    rng = np.random.default_rng(seed)

    base_bumps = [
        # (cx, cy, amplitude, width)
        (0.0, -0.12, nose_amplitude, 0.16),          # nose
        (-0.34, 0.34, 0.35 * nose_amplitude, 0.20),  # brow L
        (0.34, 0.34, 0.35 * nose_amplitude, 0.20),   # brow R
        (-0.45, -0.18, 0.25 * nose_amplitude, 0.28), # cheek L
        (0.45, -0.18, 0.25 * nose_amplitude, 0.28),  # cheek R
    ]
    bumps = []
    for cx, cy, amp, w in base_bumps:
        jx, jy = rng.uniform(-0.04, 0.04, size=2)
        ja = rng.uniform(0.85, 1.15)
        bumps.append((cx + jx, cy + jy, amp * ja, w))

    ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, n + 1),
                         np.linspace(-1.0, 1.0, n + 1), indexing="ij")
    g = 1.0 - (xs / rx) ** 2 - (ys / ry) ** 2
    s = np.sqrt(np.maximum(g, 0.0))
    z = rz * s
    # analytic gradient of the height field (clamped at the ellipse rim)
    s_safe = np.maximum(s, 1e-6)
    inside = g > 0.0
    dzdx = np.where(inside, -rz * xs / (rx * rx * s_safe), 0.0)
    dzdy = np.where(inside, -rz * ys / (ry * ry * s_safe), 0.0)
    for cx, cy, amp, w in bumps:
        r2 = (xs - cx) ** 2 + (ys - cy) ** 2
        bump = amp * np.exp(-r2 / (2.0 * w * w))
        z += bump
        dzdx += bump * (-(xs - cx) / (w * w))
        dzdy += bump * (-(ys - cy) / (w * w))

    vertices = np.stack([xs.ravel(), ys.ravel(), z.ravel()], axis=1)
    normals = np.stack([-dzdx.ravel(), -dzdy.ravel(),
                        np.ones(vertices.shape[0])], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    mesh = Mesh(vertices=vertices, triangles=_grid_triangles(n), normals=normals)
    mesh.uvs = _spherical_uvs(mesh.vertices)
    return mesh


def make_ellipsoid(radii=(1.0, 1.0, 1.0), n_lat=32, n_lon=64):
    """Latitude/longitude ellipsoid with analytic normals and grid UVs.

    Normals follow the implicit-surface gradient (x/rx^2, y/ry^2, z/rz^2),
    so elongated shapes shade correctly.
    """
    rx, ry, rz = (float(r) for r in radii)
    if min(rx, ry, rz) <= 0:
        raise GeometryError("ellipsoid radii must be > 0")
    thetas = np.linspace(0.0, np.pi, n_lat + 1)
    phis = np.linspace(0.0, 2.0 * np.pi, n_lon + 1)
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    dirs = np.stack([np.sin(tt) * np.cos(pp), np.cos(tt),
                     np.sin(tt) * np.sin(pp)], axis=-1).reshape(-1, 3)
    vertices = dirs * np.array([rx, ry, rz])
    normals = dirs / np.array([rx, ry, rz])
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    uu = (pp / (2.0 * np.pi)).reshape(-1)
    vv = (1.0 - tt / np.pi).reshape(-1)
    uvs = np.stack([uu, vv], axis=1)

    idx = np.arange((n_lat + 1) * (n_lon + 1)).reshape(n_lat + 1, n_lon + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    tris = np.concatenate([np.stack([a, b, d], 1), np.stack([b, c, d], 1)], axis=0)
    return Mesh(vertices=vertices, triangles=tris, uvs=uvs, normals=normals)


def make_sphere(radius=1.0, n_lat=32, n_lon=64):
    """Latitude/longitude sphere: the equal-radii ellipsoid."""
    return make_ellipsoid((radius, radius, radius), n_lat=n_lat, n_lon=n_lon)


_ICO_T = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = [
    (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
    (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
    (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
]
_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def make_icosphere(subdivisions=2, radius=1.0):
    """Subdivided icosahedron; 12 / 42 / 162 vertices for 0 / 1 / 2 levels."""
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = list(_ICO_FACES)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for (i, j, k) in faces:
            a, b, c = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [(i, a, c), (j, b, a), (k, c, b), (a, b, c)]
        faces = new_faces
    vertices = np.asarray(verts) * radius
    normals = np.asarray(verts)
    mesh = Mesh(vertices=vertices, triangles=np.asarray(faces, dtype=np.int64),
                normals=normals)
    mesh.uvs = _spherical_uvs(mesh.vertices)
    return mesh


def icosphere_directions(subdivisions=2):
    """Unit direction grid (162 directions at the default subdivision)."""
    return make_icosphere(subdivisions=subdivisions).normals.copy()


# ---------------------------------------------------------------------------
# Rasterization and UV flattening
# ---------------------------------------------------------------------------

def rasterize(mesh, camera, width, height):
    """Project, z-buffer, and barycentrically interpolate normals and UVs."""
    if mesh.normals is None or mesh.uvs is None:
        raise GeometryError("rasterize requires a mesh with normals and uvs")
    scale, (ox, oy) = camera.window(width, height)
    cam = mesh.vertices @ camera.rotation.T
    px = ox + scale * cam[:, 0]
    py = oy - scale * cam[:, 1]
    pz = cam[:, 2]

    depth = np.full((height, width), -np.inf)
    normal_map = np.zeros((height, width, 3))
    uv_map = np.zeros((height, width, 2))
    mask = np.zeros((height, width), dtype=bool)

    tris = mesh.triangles
    x0, x1, x2 = px[tris[:, 0]], px[tris[:, 1]], px[tris[:, 2]]
    y0, y1, y2 = py[tris[:, 0]], py[tris[:, 1]], py[tris[:, 2]]
    # signed area in pixel xy; pixel y is flipped so front faces come out
    # negative here.  Cull back faces and degenerate slivers.
    area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    front = area2 < -2.0 * _DEGENERATE_AREA

    nrm = mesh.normals
    uv = mesh.uvs
    for t in np.nonzero(front)[0]:
        i0, i1, i2 = tris[t]
        xs = (x0[t], x1[t], x2[t])
        ys = (y0[t], y1[t], y2[t])
        ix0 = max(int(math.floor(min(xs) - 0.5)), 0)
        ix1 = min(int(math.ceil(max(xs) - 0.5)), width - 1)
        iy0 = max(int(math.floor(min(ys) - 0.5)), 0)
        iy1 = min(int(math.ceil(max(ys) - 0.5)), height - 1)
        if ix1 < ix0 or iy1 < iy0:
            continue
        gx = np.arange(ix0, ix1 + 1) + 0.5
        gy = (np.arange(iy0, iy1 + 1) + 0.5)[:, None]
        d = area2[t]
        w0 = ((y1[t] - y2[t]) * (gx - x2[t]) + (x2[t] - x1[t]) * (gy - y2[t])) / d
        w1 = ((y2[t] - y0[t]) * (gx - x0[t]) + (x0[t] - x2[t]) * (gy - y0[t])) / d
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        z = w0 * pz[i0] + w1 * pz[i1] + w2 * pz[i2]
        sub = depth[iy0 : iy1 + 1, ix0 : ix1 + 1]
        win = inside & (z > sub)
        if not win.any():
            continue
        sub[win] = z[win]
        w0w, w1w, w2w = w0[win], w1[win], w2[win]
        nsub = (w0w[:, None] * nrm[i0] + w1w[:, None] * nrm[i1]
                + w2w[:, None] * nrm[i2])
        nsub /= np.maximum(np.linalg.norm(nsub, axis=1, keepdims=True), 1e-300)
        usub = (w0w[:, None] * uv[i0] + w1w[:, None] * uv[i1]
                + w2w[:, None] * uv[i2])
        region_n = normal_map[iy0 : iy1 + 1, ix0 : ix1 + 1]
        region_u = uv_map[iy0 : iy1 + 1, ix0 : ix1 + 1]
        region_m = mask[iy0 : iy1 + 1, ix0 : ix1 + 1]
        region_n[win] = nsub
        region_u[win] = np.clip(usub, 0.0, 1.0)
        region_m[win] = True

    if not mask.any():
        raise GeometryError("mesh projects outside the image window")
    return GeometryBuffers(normal_map=normal_map, mask=mask, uv_map=uv_map,
                           depth=depth, view_dir=camera.view_dir)


def uv_flatten(image, buffers, uv_resolution=128, fill_radius=3.0,
               return_coverage=False):
    """Forward-splat masked pixels into a UV grid; average multiple
    contributors; fill empty cells from the nearest covered cell within
    `fill_radius`, else leave 0."""
    if image.pixels.shape[:2] != buffers.mask.shape:
        raise GeometryError("image and buffers have mismatched shapes")
    res = int(uv_resolution)
    my, mx = np.nonzero(buffers.mask)
    uvs = buffers.uv_map[my, mx]
    cols = np.minimum((uvs[:, 0] * res).astype(np.int64), res - 1)
    rows = np.minimum(((1.0 - uvs[:, 1]) * res).astype(np.int64), res - 1)
    c = image.channels
    acc = np.zeros((res, res, c))
    cnt = np.zeros((res, res))
    np.add.at(acc, (rows, cols), image.pixels[my, mx])
    np.add.at(cnt, (rows, cols), 1.0)
    covered = cnt > 0
    out = np.zeros_like(acc)
    out[covered] = acc[covered] / cnt[covered][:, None]
    if (~covered).any() and covered.any():
        dist, (ir, ic) = distance_transform_edt(~covered, return_indices=True)
        fill = (~covered) & (dist <= fill_radius)
        out[fill] = out[ir[fill], ic[fill]]
    raster = Raster(out)
    if return_coverage:
        return raster, covered
    return raster
