"""Losses and error metrics for fitting and pretraining.

Reduction conventions (kept deliberately explicit, see the README table):

* reconstruction and texture losses are means over selected pixel-channels
* the shape pretraining loss is the RMS of per-vertex Euclidean errors
* landmark and camera losses are unreduced norms (Frobenius / Euclidean)
"""

from dataclasses import dataclass

import numpy as np

from . import geometry


@dataclass(frozen=True)
class LossWeights:
    """Multipliers applied when loss components are combined."""

    landmark: float = 1.0
    texture: float = 1.0
    camera: float = 1.0


@dataclass
class LandmarkSet:
    """2D landmark targets: points is (2, 68) with x on row 0 and y on row 1;
    visible marks the columns that participate in the loss."""

    points: np.ndarray
    visible: np.ndarray = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.shape != (2, 68):
            raise ValueError("landmark points must be (2, 68)")
        self.points = p
        if self.visible is None:
            self.visible = np.ones(68, dtype=bool)
        else:
            v = np.asarray(self.visible).astype(bool).ravel()
            if v.shape != (68,):
                raise ValueError("visibility mask must have 68 entries")
            self.visible = v


def rec_loss(pred, target, mask=None):
    """Mean absolute error over selected pixels, with its gradient.

    mask: optional (H, W) booleans choosing the pixels that count; the mean
    divides by 3x the number of selected pixels.  Returns (value, d_pred)
    where d_pred is (H, W, 3) and zero outside the mask.  The subgradient at
    exact equality is 0.  Raises ValueError when the selection is empty.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target sizes disagree")
    if mask is None:
        mask = np.ones(pred.shape[:2], dtype=bool)
    else:
        mask = np.asarray(mask).astype(bool)
    count = int(mask.sum()) * pred.shape[2]
    if count == 0:
        raise ValueError("reconstruction loss over an empty pixel selection")
    diff = np.where(mask[:, :, None], pred - target, 0.0)
    value = float(np.abs(diff).sum() / count)
    return value, np.sign(diff) / count


def landmark_loss(mesh, cam, targets):
    """Frobenius distance between projected and target visible landmarks.

    Returns (value, d_camera, d_landmark_vertices): d_camera is (6,);
    d_landmark_vertices is (68, 3) in model space with zero rows for columns
    that are invisible.  At an exact match the gradient is zero.
    """
    table = mesh.landmark_indices
    if table is None:
        raise geometry.MissingLandmarks("mesh carries no landmark table")
    pts = mesh.vertices[table]
    proj, _ = geometry.project_points(pts, cam)
    vis = targets.visible
    diff = np.where(vis[:, None], proj - targets.points.T, 0.0)
    value = float(np.sqrt((diff**2).sum()))
    d_cam = np.zeros(6)
    d_verts = np.zeros((68, 3))
    if value > 0:
        d_proj = diff / value
        jac = geometry.project_jacobian_camera(pts, cam)
        d_cam = np.einsum("qi,qij->j", d_proj, jac)
        d_verts = d_proj @ geometry.projection_matrix(cam)
    return value, d_cam, d_verts


def shape_pretrain_loss(pred_verts, target_verts):
    """RMS over vertices of the per-vertex Euclidean error, with gradient."""
    pred = np.asarray(pred_verts, dtype=np.float64)
    target = np.asarray(target_verts, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("vertex arrays disagree in shape")
    diff = pred - target
    q = pred.shape[0]
    value = float(np.sqrt((diff**2).sum() / q))
    grad = np.zeros_like(diff) if value == 0 else diff / (q * value)
    return value, grad


def texture_pretrain_loss(pred_tex, target_tex, valid=None):
    """Mean absolute texel error over the valid region, with gradient."""
    pred = np.asarray(pred_tex, dtype=np.float64)
    target = np.asarray(target_tex, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("texture arrays disagree in shape")
    if valid is None:
        valid = np.ones(pred.shape[:2], dtype=bool)
    count = int(valid.sum()) * pred.shape[2]
    if count == 0:
        raise ValueError("texture loss over an empty texel selection")
    diff = np.where(np.asarray(valid)[:, :, None], pred - target, 0.0)
    return float(np.abs(diff).sum() / count), np.sign(diff) / count


def camera_pretrain_loss(pred_vec, target_vec):
    """Euclidean distance between 6-dim camera vectors, with gradient."""
    pred = np.asarray(pred_vec, dtype=np.float64).ravel()
    target = np.asarray(target_vec, dtype=np.float64).ravel()
    if pred.shape != (6,) or target.shape != (6,):
        raise ValueError("camera vectors must have 6 entries")
    diff = pred - target
    value = float(np.linalg.norm(diff))
    grad = np.zeros(6) if value == 0 else diff / value
    return value, grad


def total_loss(parts, weights=LossWeights()):
    """Weighted sum of named loss components.

    parts maps any of 'reconstruction', 'shape', 'landmark', 'texture',
    'camera' to scalar values; reconstruction and shape carry weight 1, the
    rest use the configured multipliers.
    """
    scale = {
        "reconstruction": 1.0,
        "shape": 1.0,
        "landmark": weights.landmark,
        "texture": weights.texture,
        "camera": weights.camera,
    }
    unknown = set(parts) - set(scale)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    return float(sum(scale[k] * v for k, v in parts.items()))


def nme_alignment(pred_points, gt_points, visible=None):
    """Mean landmark distance normalized by the ground-truth bounding box.

    Inputs are (2, 68); the normalizer is sqrt(width x height) of the box
    enclosing the visible ground-truth landmarks.
    """
    pred = np.asarray(pred_points, dtype=np.float64)
    gt = np.asarray(gt_points, dtype=np.float64)
    if visible is None:
        visible = np.ones(gt.shape[1], dtype=bool)
    else:
        visible = np.asarray(visible).astype(bool)
    if not visible.any():
        raise ValueError("no visible landmarks to score")
    g = gt[:, visible]
    p = pred[:, visible]
    w = g[0].max() - g[0].min()
    h = g[1].max() - g[1].min()
    norm = np.sqrt(w * h)
    if norm == 0:
        raise ValueError("degenerate landmark bounding box")
    return float(np.linalg.norm(p - g, axis=0).mean() / norm)


def nme_shape(pred_vertices, gt_mesh):
    """Mean per-vertex Euclidean error over the inter-ocular distance."""
    pred = np.asarray(pred_vertices, dtype=np.float64)
    if pred.shape != gt_mesh.vertices.shape:
        raise ValueError("vertex arrays disagree in shape")
    iod = geometry.inter_ocular_distance(gt_mesh)
    if iod == 0:
        raise ValueError("inter-ocular distance is zero")
    err = np.linalg.norm(pred - gt_mesh.vertices, axis=1).mean()
    return float(err / iod)


def save_landmark_csv(path, landmarks):
    """Write 68 lines of 'x,y,visible' with full float precision."""
    pts = landmarks.points
    vis = landmarks.visible
    with open(path, "w") as fh:
        for i in range(68):
            fh.write("%.17g,%.17g,%d\n" % (pts[0, i], pts[1, i], int(vis[i])))


def load_landmark_csv(path):
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'x,y,visible'")
            rows.append((float(fields[0]), float(fields[1]), int(fields[2])))
    if len(rows) != 68:
        raise ValueError(f"{path}: expected 68 landmark rows, found {len(rows)}")
    arr = np.array(rows)
    return LandmarkSet(points=arr[:, :2].T, visible=arr[:, 2] != 0)
