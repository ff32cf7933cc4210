"""Mesh and camera primitives.

Conventions used throughout the package:

* angles are radians; image coordinates are pixels with the origin at the
  top-left corner, +x right, +y down
* the camera looks along -z of camera space, so a larger rotated z means
  closer to the image plane
* rotation order is Rz(roll) @ Ry(yaw) @ Rx(pitch)
* the 6-dim camera parameter vector is (scale, pitch, yaw, roll, tx, ty)
"""

import math
from dataclasses import dataclass

import numpy as np


class DegenerateVertex(ValueError):
    """Vertex sits on the unwarp singularity (x = 0 and z = 0)."""


class ZeroAreaFan(ValueError):
    """A vertex has no incident triangle with usable (nonzero) area."""


class MissingLandmarks(ValueError):
    """The landmark table lacks a configured entry."""


# positions inside the 68-entry landmark table holding the outer eye corners
LEFT_EYE_OUTER = 36
RIGHT_EYE_OUTER = 45


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with an optional 68-entry landmark index table.

    vertices: (Q, 3) float array, model units.
    triangles: (T, 3) int array of vertex indices.
    landmark_indices: (68,) int array of vertex indices, or None.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise ValueError("vertices must be a non-empty (Q, 3) array")
        q = v.shape[0]
        if t.size and (t.min() < 0 or t.max() >= q):
            raise ValueError("triangle index out of range")
        if t.size and (
            (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
        ).any():
            raise ValueError("triangle repeats a vertex index")
        if self.landmark_indices is not None:
            d = np.asarray(self.landmark_indices, dtype=np.int64).ravel()
            object.__setattr__(self, "landmark_indices", d)
            if d.shape != (68,):
                raise ValueError("landmark table must have exactly 68 entries")
            if (d < 0).any() or (d >= q).any():
                raise ValueError("landmark index out of range")

    @property
    def num_vertices(self):
        return self.vertices.shape[0]


@dataclass(frozen=True)
class CameraParams:
    """Weak-perspective camera: scale, three rotation angles, 2D translation."""

    scale: float = 1.0
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        vec = self.as_vector()
        if not np.all(np.isfinite(vec)):
            raise ValueError("camera parameters must be finite")
        if self.scale <= 0:
            raise ValueError("camera scale must be positive")

    def as_vector(self):
        return np.array(
            [self.scale, self.pitch, self.yaw, self.roll, self.tx, self.ty],
            dtype=np.float64,
        )

    @staticmethod
    def from_vector(vec):
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.shape != (6,):
            raise ValueError("camera vector must have 6 entries")
        return CameraParams(*vec)


@dataclass(frozen=True)
class UVCoord:
    """Continuous texel coordinate: u indexes rows, v indexes columns."""

    u: float
    v: float


@dataclass(frozen=True)
class UnwarpConstants:
    """Scale/translation scalars of the cylindrical unwarp, plus the texture
    bounds the results are clamped to (rows x cols texels)."""

    a1: float
    b1: float
    a2: float
    b2: float
    rows: int
    cols: int

    def __post_init__(self):
        if self.a1 == 0 or self.a2 == 0:
            raise ValueError("unwarp scale constants must be nonzero")
        if self.rows < 2 or self.cols < 2:
            raise ValueError("texture bounds must be at least 2x2")


def rotation_from_angles(pitch, yaw, roll):
    """Build Rz(roll) @ Ry(yaw) @ Rx(pitch) as a 3x3 array."""
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    cr, sr = math.cos(roll), math.sin(roll)
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotation_angle_jacobians(pitch, yaw, roll):
    """Derivatives of rotation_from_angles w.r.t. each angle.

    Returns (dR_dpitch, dR_dyaw, dR_droll), each 3x3.
    """
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    cr, sr = math.cos(roll), math.sin(roll)
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -sp, -cp], [0, cp, -sp]])
    dry = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    drz = np.array([[-sr, -cr, 0], [cr, -sr, 0], [0, 0, 0]])
    return rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx


def _vertices_of(mesh):
    if isinstance(mesh, Mesh):
        return mesh.vertices
    return np.asarray(mesh, dtype=np.float64)


def project_points(points, cam):
    """Weak-perspective projection of (N, 3) points.

    Returns (image_xy, depth): image_xy is (N, 2) = scale * (R @ p)_xy + t,
    depth is the camera-space z retained for Z-buffering.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    rot = pts @ rotation_from_angles(cam.pitch, cam.yaw, cam.roll).T
    xy = cam.scale * rot[:, :2] + np.array([cam.tx, cam.ty])
    depth = rot[:, 2]
    if single:
        return xy[0], depth[0]
    return xy, depth


def project(mesh, cam):
    """Project a mesh; returns ((Q, 2) image coordinates, (Q,) depths)."""
    return project_points(_vertices_of(mesh), cam)


def projection_matrix(cam):
    """The constant 2x3 Jacobian of image coordinates w.r.t. a vertex."""
    r = rotation_from_angles(cam.pitch, cam.yaw, cam.roll)
    return cam.scale * r[:2, :]


def project_jacobian_camera(points, cam):
    """Analytic Jacobian of projected image coordinates w.r.t. the camera.

    Returns (N, 2, 6) for the parameter order (scale, pitch, yaw, roll, tx, ty).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = pts.shape[0]
    rot = pts @ rotation_from_angles(cam.pitch, cam.yaw, cam.roll).T
    jac = np.zeros((n, 2, 6))
    jac[:, :, 0] = rot[:, :2]
    for k, dr in enumerate(rotation_angle_jacobians(cam.pitch, cam.yaw, cam.roll)):
        jac[:, :, 1 + k] = cam.scale * (pts @ dr.T)[:, :2]
    jac[:, 0, 4] = 1.0
    jac[:, 1, 5] = 1.0
    return jac


def depth_jacobian_camera(points, cam):
    """Jacobian of camera-space depth w.r.t. the 6 camera parameters, (N, 6)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    jac = np.zeros((pts.shape[0], 6))
    for k, dr in enumerate(rotation_angle_jacobians(cam.pitch, cam.yaw, cam.roll)):
        jac[:, 1 + k] = (pts @ dr.T)[:, 2]
    return jac


def unwarp_vertices(vertices, consts):
    """Cylindrical unwarp of (N, 3) vertices into continuous texel coordinates.

    Row coordinate u = a2 * y + b2; column coordinate v = a1 * arctan(x / z) + b1,
    with the principal arctan branch extended to +/- pi/2 when z = 0 and x != 0.
    Results are clamped to [0, rows-1] x [0, cols-1].

    Raises DegenerateVertex when some vertex has x = 0 and z = 0.
    """
    v = np.atleast_2d(np.asarray(vertices, dtype=np.float64))
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    zero_z = z == 0.0
    if np.any(zero_z & (x == 0.0)):
        raise DegenerateVertex("unwarp undefined where x = 0 and z = 0")
    ang = np.arctan(np.where(zero_z, 0.0, x) / np.where(zero_z, 1.0, z))
    ang = np.where(zero_z, np.sign(x) * (np.pi / 2), ang)
    u = consts.a2 * y + consts.b2
    col = consts.a1 * ang + consts.b1
    u = np.clip(u, 0.0, consts.rows - 1.0)
    col = np.clip(col, 0.0, consts.cols - 1.0)
    return np.stack([u, col], axis=1)


def unwarp_uv(vertex, consts):
    """Unwarp a single vertex; returns a UVCoord clamped to the texture bounds."""
    uv = unwarp_vertices(np.asarray(vertex, dtype=np.float64).reshape(1, 3), consts)
    return UVCoord(float(uv[0, 0]), float(uv[0, 1]))


def unwarp_jacobian(vertices, consts):
    """Jacobian of the unwarp w.r.t. vertex position, (N, 2, 3).

    Rows clamped to the texture boundary get a zero derivative.
    """
    v = np.atleast_2d(np.asarray(vertices, dtype=np.float64))
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    rsq = x * x + z * z
    n = v.shape[0]
    jac = np.zeros((n, 2, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        dv_dx = consts.a1 * z / rsq
        dv_dz = -consts.a1 * x / rsq
    dv_dx = np.where(rsq > 0, dv_dx, 0.0)
    dv_dz = np.where(rsq > 0, dv_dz, 0.0)
    u_raw = consts.a2 * y + consts.b2
    # clamp test must use the same branch as unwarp_vertices
    with np.errstate(divide="ignore", invalid="ignore"):
        ang = np.arctan(x / z)
    ang = np.where(z == 0.0, np.sign(x) * (np.pi / 2), ang)
    col_raw = consts.a1 * ang + consts.b1
    u_live = (u_raw > 0.0) & (u_raw < consts.rows - 1.0)
    c_live = (col_raw > 0.0) & (col_raw < consts.cols - 1.0)
    jac[:, 0, 1] = np.where(u_live, consts.a2, 0.0)
    jac[:, 1, 0] = np.where(c_live, dv_dx, 0.0)
    jac[:, 1, 2] = np.where(c_live, dv_dz, 0.0)
    return jac


def default_unwarp_constants(mesh, rows, cols, margin=4):
    """Unwarp constants placing a mesh into a rows x cols texture.

    a1 = cols / pi fills the column range from the arctan branch (-pi/2, pi/2);
    a2 is negative so the mesh top (largest y) lands on row `margin` and the
    bottom on row rows - margin.  Computed once from the mean/base mesh and
    then reused for the whole family sharing its topology.
    """
    v = _vertices_of(mesh)
    y_min, y_max = float(v[:, 1].min()), float(v[:, 1].max())
    if y_max <= y_min:
        raise ValueError("mesh has no vertical extent")
    if rows <= 2 * margin:
        raise ValueError("texture rows too small for the margin")
    a1 = cols / math.pi
    b1 = cols / 2.0
    a2 = -(rows - 2.0 * margin) / (y_max - y_min)
    b2 = margin - a2 * y_max
    return UnwarpConstants(a1=a1, b1=b1, a2=a2, b2=b2, rows=rows, cols=cols)


def accumulate_vertex_normals(vertices, triangles):
    """Sum of area-weighted face normals at each vertex, unnormalized (Q, 3)."""
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    face = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, t[:, k], face)
    return acc


def vertex_normals(mesh):
    """Per-vertex unit normals: normalized area-weighted incident-face normals.

    Raises ZeroAreaFan when some vertex accumulates a zero normal (all incident
    triangles degenerate, exact cancellation, or no incident triangle at all).
    """
    acc = accumulate_vertex_normals(mesh.vertices, mesh.triangles)
    norms = np.linalg.norm(acc, axis=1)
    if (norms == 0).any():
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ZeroAreaFan(f"vertex {bad} has no usable incident triangle area")
    return acc / norms[:, None]


def inter_ocular_distance(mesh, left_entry=LEFT_EYE_OUTER, right_entry=RIGHT_EYE_OUTER):
    """Distance between the two configured outer-eye-corner landmark vertices.

    Returns 0.0 for coincident landmarks; metric code rejects the zero there.
    Raises MissingLandmarks when the table is absent or lacks the entries.
    """
    table = mesh.landmark_indices
    if table is None or len(table) <= max(left_entry, right_entry):
        raise MissingLandmarks(
            f"landmark table lacks entries {left_entry} and {right_entry}"
        )
    a = mesh.vertices[table[left_entry]]
    b = mesh.vertices[table[right_entry]]
    return float(np.linalg.norm(a - b))


def load_obj(path, landmark_indices=None):
    """Read the v/f subset of a Wavefront OBJ file (triangles, 1-based indices).

    Face entries may carry /vt/vn suffixes; only the vertex index is kept.
    """
    verts = []
    tris = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: malformed vertex record")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: only triangle faces supported")
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
    if not verts:
        raise ValueError(f"{path}: no vertices found")
    return Mesh(
        vertices=np.array(verts, dtype=np.float64),
        triangles=np.array(tris, dtype=np.int64).reshape(-1, 3),
        landmark_indices=landmark_indices,
    )


def save_obj(path, mesh):
    """Write vertices and triangles as v/f records with full float precision."""
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write("v %.17g %.17g %.17g\n" % (x, y, z))
        for a, b, c in mesh.triangles:
            fh.write("f %d %d %d\n" % (a + 1, b + 1, c + 1))


def load_landmark_table(path):
    """Read a landmark table: one 0-based vertex index per line, exactly 68 lines."""
    with open(path, "r") as fh:
        entries = [line.strip() for line in fh if line.strip()]
    if len(entries) != 68:
        raise ValueError(f"{path}: expected 68 landmark entries, found {len(entries)}")
    return np.array([int(e) for e in entries], dtype=np.int64)


def save_landmark_table(path, indices):
    indices = np.asarray(indices, dtype=np.int64).ravel()
    if indices.shape != (68,):
        raise ValueError("landmark table must have exactly 68 entries")
    with open(path, "w") as fh:
        for idx in indices:
            fh.write("%d\n" % idx)
