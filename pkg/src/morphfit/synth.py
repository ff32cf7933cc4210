"""Procedural head family and random scenes for tests and demos.

The head is an open ellipsoid shell sampled on a (theta, height) grid, always
facing +z so the cylindrical unwarp is well defined everywhere.  Twelve fixed
Gaussian-bump displacement fields act as deformation modes; instances are
either linear combinations of the modes or points on a 3-parameter nonlinear
manifold embedded in the 12-dim mode space.  Amplitudes are budgeted so any
weights in [-1.2, 1.2] keep every vertex in front of the camera (z > 0.1).
"""

import json

import numpy as np

from . import geometry, imageio, loss, render

N_THETA = 20
N_Y = 22
NUM_MODES = 12

_HALF_WIDTH = 0.85
_HALF_HEIGHT = 1.0
_DEPTH = 0.9
_THETA_MAX = 1.1


def head_grid(n_theta=N_THETA, n_y=N_Y):
    """Vertex grid and triangulation of the base shell.

    Returns (vertices (n_y*n_theta, 3), triangles, theta (Q,), ypar (Q,)).
    Row-major layout: row r spans one height, top row first.
    """
    theta = np.linspace(-_THETA_MAX, _THETA_MAX, n_theta)
    ypar = np.linspace(1.0, -1.0, n_y)
    tg, yg = np.meshgrid(theta, ypar)
    tg, yg = tg.ravel(), yg.ravel()
    rho = np.sqrt(1.0 - 0.68 * yg**2)
    verts = np.stack(
        [
            _HALF_WIDTH * rho * np.sin(tg),
            _HALF_HEIGHT * yg,
            _DEPTH * rho * np.cos(tg),
        ],
        axis=1,
    )
    tris = []
    for r in range(n_y - 1):
        for c in range(n_theta - 1):
            a = r * n_theta + c
            b = a + 1
            d = a + n_theta
            e = d + 1
            tris.append([a, b, d])
            tris.append([b, e, d])
    return verts, np.array(tris, dtype=np.int64), tg, yg


def _bump(tg, yg, t_c, y_c, st, sy):
    return np.exp(-((tg - t_c) ** 2 / (2 * st**2) + (yg - y_c) ** 2 / (2 * sy**2)))


def blend_modes(n_theta=N_THETA, n_y=N_Y):
    """The 12 deformation modes, (12, Q, 3) vertex displacement fields.

    Mostly radial pushes (along the local outward direction) at face-like
    locations: nose, chin, brow, cheeks, eye sockets (inward), jaw, lips,
    forehead.  Mode table is fixed; it defines the family.
    """
    _, _, tg, yg = head_grid(n_theta, n_y)
    radial = np.stack([np.sin(tg), np.zeros_like(tg), np.cos(tg)], axis=1)
    up = np.array([0.0, 1.0, 0.0])

    # (theta center, y center, theta sigma, y sigma, amplitude, direction)
    table = [
        (0.00, -0.10, 0.18, 0.16, 0.120, "radial"),   # nose tip
        (0.00, -0.75, 0.25, 0.14, 0.100, "radial"),   # chin
        (0.00, 0.45, 0.55, 0.14, 0.080, "radial"),    # brow ridge
        (-0.55, -0.25, 0.22, 0.22, 0.090, "radial"),  # right cheek
        (0.55, -0.25, 0.22, 0.22, 0.090, "radial"),   # left cheek
        (-0.45, 0.28, 0.16, 0.10, -0.070, "radial"),  # right eye socket
        (0.45, 0.28, 0.16, 0.10, -0.070, "radial"),   # left eye socket
        (-0.75, -0.55, 0.20, 0.20, 0.080, "radial"),  # right jaw
        (0.75, -0.55, 0.20, 0.20, 0.080, "radial"),   # left jaw
        (0.00, 0.78, 0.50, 0.16, 0.070, "radial"),    # forehead
        (0.00, -0.45, 0.28, 0.09, 0.080, "radial"),   # lips
        (0.00, -0.30, 0.45, 0.35, 0.060, "up"),       # face stretch
    ]
    modes = np.zeros((NUM_MODES, tg.shape[0], 3))
    for i, (t_c, y_c, st, sy, amp, kind) in enumerate(table):
        w = amp * _bump(tg, yg, t_c, y_c, st, sy)
        direction = radial if kind == "radial" else np.broadcast_to(up, radial.shape)
        modes[i] = w[:, None] * direction
    return modes


def head_landmark_table(n_theta=N_THETA, n_y=N_Y):
    """68 vertex indices laid out like a standard annotation: jaw contour,
    brows, nose, eyes, mouth.  Entries 36 and 45 are the outer eye corners,
    placed symmetrically about the face midline."""

    def at(row, col):
        return row * n_theta + col

    idx = []
    # jaw contour, 17 points sweeping left to right near the bottom
    for c in np.round(np.linspace(1, n_theta - 2, 17)).astype(int):
        idx.append(at(n_y - 4, c))
    # brows, 5 + 5
    for c in np.round(np.linspace(3, 7, 5)).astype(int):
        idx.append(at(6, c))
    for c in np.round(np.linspace(12, 16, 5)).astype(int):
        idx.append(at(6, c))
    # nose bridge (4) and base (5)
    for r in (8, 9, 10, 11):
        idx.append(at(r, 9))
    for c in (7, 8, 9, 10, 11):
        idx.append(at(12, c))
    # right eye ring, entry 36 first (outer corner)
    for r, c in ((8, 4), (7, 5), (7, 6), (8, 7), (9, 6), (9, 5)):
        idx.append(at(r, c))
    # left eye ring, entry 45 third (outer corner)
    for r, c in ((8, 12), (7, 13), (7, 14), (8, 15), (9, 14), (9, 13)):
        idx.append(at(r, c))
    # mouth: 12 outer, 8 inner; radii chosen so the two rings quantize to
    # disjoint grid vertices
    for k in range(12):
        ang = 2 * np.pi * k / 12
        r = int(round(15 - 2.0 * np.sin(ang)))
        c = int(round(9.5 - 3.5 * np.cos(ang)))
        idx.append(at(r, c))
    for k in range(8):
        ang = 2 * np.pi * k / 8
        r = int(round(15 - 0.8 * np.sin(ang)))
        c = int(round(9.5 - 1.8 * np.cos(ang)))
        idx.append(at(r, c))
    table = np.array(idx, dtype=np.int64)
    assert table.shape == (68,)
    return table


def base_head():
    """The undeformed head as a Mesh with its landmark table."""
    verts, tris, _, _ = head_grid()
    return geometry.Mesh(
        vertices=verts, triangles=tris, landmark_indices=head_landmark_table()
    )


def make_head(weights):
    """Deform the base head by a 12-vector of mode weights."""
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if weights.shape != (NUM_MODES,):
        raise ValueError(f"expected {NUM_MODES} mode weights")
    verts, tris, _, _ = head_grid()
    verts = verts + np.einsum("m,mqc->qc", weights, blend_modes())
    return geometry.Mesh(
        vertices=verts, triangles=tris, landmark_indices=head_landmark_table()
    )


def sample_linear_weights(rng, scale=0.3):
    """Gaussian mode weights, clipped to the family's safe range."""
    return np.clip(rng.normal(0.0, scale, NUM_MODES), -1.2, 1.2)


def manifold_weights(t):
    """Embed a 3-vector into the 12-dim mode space, smoothly and nonlinearly.

    Instances drawn from t in [-1, 1]^3 lie on a 3-dim manifold that no
    3-component linear model can span exactly.
    """
    t = np.asarray(t, dtype=np.float64).ravel()
    if t.shape != (3,):
        raise ValueError("manifold parameter must have 3 entries")
    t0, t1, t2 = t
    return np.array(
        [
            0.4 * t0,
            0.4 * t1,
            0.4 * t2,
            1.2 * t0**2 - 0.6,
            1.2 * t1 * t2,
            0.9 * np.sin(1.5 * t0 + 0.5 * t1),
            1.2 * t2**2 - 0.6,
            1.0 * t0 * t1,
            0.7 * np.cos(1.2 * t1) - 0.35,
            1.0 * t1**2 - 0.5,
            0.8 * np.sin(1.3 * t2),
            0.8 * t0 * t2,
        ]
    )


def smooth_texture(rng, rows, cols):
    """Low-frequency random texture in [0.05, 0.95], kind to bilinear kinks."""
    u = np.linspace(0.0, 1.0, rows)[:, None, None]
    v = np.linspace(0.0, 1.0, cols)[None, :, None]
    tex = np.empty((rows, cols, 3))
    tex[:] = rng.uniform(0.3, 0.65, 3)
    for _ in range(4):
        fu, fv = rng.uniform(-2.2, 2.2, 2)
        phase = rng.uniform(0, 2 * np.pi)
        color = rng.uniform(-0.09, 0.09, 3)
        tex = tex + color * np.sin(2 * np.pi * (fu * u + fv * v) + phase)
    return np.clip(tex, 0.05, 0.95)


NUM_TEXTURE_MODES = 8


def texture_modes(rows, cols):
    """Eight fixed low-frequency color fields, (8, rows, cols, 3).

    Amplitudes are budgeted so base + any weights in [-1, 1] stay inside
    [0.05, 0.95] without clipping, keeping the family exactly linear.
    """
    u = np.linspace(0.0, 1.0, rows)[:, None, None]
    v = np.linspace(0.0, 1.0, cols)[None, :, None]
    # (freq u, freq v, phase, color direction)
    table = [
        (1.0, 0.0, 0.0, (0.05, 0.03, 0.02)),
        (0.0, 1.0, 0.8, (0.02, 0.05, 0.03)),
        (1.0, 1.0, 1.7, (0.04, -0.03, 0.02)),
        (2.0, 0.5, 0.3, (-0.03, 0.04, 0.03)),
        (0.5, 2.0, 2.4, (0.03, 0.02, -0.05)),
        (1.5, 1.5, 4.0, (0.04, 0.04, 0.04)),
        (2.5, 1.0, 5.1, (-0.02, 0.03, -0.04)),
        (1.0, 2.5, 0.6, (0.03, -0.04, 0.04)),
    ]
    modes = np.zeros((NUM_TEXTURE_MODES, rows, cols, 3))
    for i, (fu, fv, phase, color) in enumerate(table):
        wave = np.sin(2 * np.pi * (fu * u + fv * v) + phase)
        modes[i] = wave * np.asarray(color)
    return modes


def make_texture(weights, rows, cols):
    """Family texture: 0.5 base plus weighted fixed modes, never clipped."""
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if weights.shape != (NUM_TEXTURE_MODES,):
        raise ValueError(f"expected {NUM_TEXTURE_MODES} texture mode weights")
    return 0.5 + np.einsum("m,mrcd->rcd", weights, texture_modes(rows, cols))


def sample_texture_weights(rng, scale=0.45):
    return np.clip(rng.normal(0.0, scale, NUM_TEXTURE_MODES), -1.0, 1.0)


def head_camera(width, height, rng=None, max_angle=0.5):
    """A camera framing the head; random mild pose when rng is given."""
    scale = 0.33 * min(width, height)
    cam = dict(scale=scale, pitch=0.0, yaw=0.0, roll=0.0,
               tx=width / 2.0, ty=height / 2.0)
    if rng is not None:
        cam["scale"] *= rng.uniform(0.9, 1.1)
        cam["pitch"] = rng.uniform(-max_angle, max_angle)
        cam["yaw"] = rng.uniform(-max_angle, max_angle)
        cam["roll"] = rng.uniform(-0.4 * max_angle, 0.4 * max_angle)
        cam["tx"] += rng.uniform(-2.0, 2.0)
        cam["ty"] += rng.uniform(-2.0, 2.0)
    return geometry.CameraParams(**cam)


def random_triangle_soup(rng, n_tris, width, height, allow_degenerate=True):
    """Projected 2D triangles with depths, for rasterizer cross-checks.

    Returns (proj (3n, 2), depth (3n,), triangles (n, 3)).  Coordinates spill
    a little outside the image so clipping paths get exercised; a few exactly
    degenerate triangles (repeated point) are mixed in when allowed.
    """
    n_verts = 3 * n_tris
    proj = np.stack(
        [
            rng.uniform(-2.0, width + 2.0, n_verts),
            rng.uniform(-2.0, height + 2.0, n_verts),
        ],
        axis=1,
    )
    depth = rng.uniform(0.5, 5.0, n_verts)
    tris = np.arange(n_verts, dtype=np.int64).reshape(n_tris, 3)
    if allow_degenerate and n_tris >= 4:
        # collapse one triangle to a point and flatten another to a segment
        proj[tris[0, 1]] = proj[tris[0, 0]]
        proj[tris[0, 2]] = proj[tris[0, 0]]
        proj[tris[1, 2]] = 0.5 * (proj[tris[1, 0]] + proj[tris[1, 1]])
    return proj, depth, tris


def random_scene(rng, n_tris=8, width=32, height=32, tex_rows=16, tex_cols=16):
    """A well-conditioned 3D triangle-soup scene for gradient checking.

    Returns (mesh, texture, cam, consts).  Triangles are resampled until their
    projection has a comfortably nonzero area, and depths are spread so exact
    depth ties are unlikely.
    """
    cam = geometry.CameraParams(
        scale=width / 2.5,
        pitch=rng.uniform(-0.3, 0.3),
        yaw=rng.uniform(-0.3, 0.3),
        roll=rng.uniform(-0.3, 0.3),
        tx=width / 2.0,
        ty=height / 2.0,
    )
    pm = geometry.projection_matrix(cam)
    verts = np.zeros((3 * n_tris, 3))
    for t in range(n_tris):
        for _ in range(60):
            center = np.array(
                [rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7), rng.uniform(2.0, 4.0)]
            )
            corner = center + np.stack(
                [
                    rng.uniform(-0.7, 0.7, 3),
                    rng.uniform(-0.7, 0.7, 3),
                    rng.uniform(-0.12, 0.12, 3),
                ],
                axis=1,
            )
            p = corner @ pm.T
            area2 = abs(
                (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
            )
            if area2 >= 3.0:
                break
        verts[3 * t : 3 * t + 3] = corner
    tris = np.arange(3 * n_tris, dtype=np.int64).reshape(n_tris, 3)
    mesh = geometry.Mesh(vertices=verts, triangles=tris)
    consts = geometry.default_unwarp_constants(mesh, tex_rows, tex_cols, margin=2)
    texture = render.Texture(pixels=smooth_texture(rng, tex_rows, tex_cols))
    return mesh, texture, cam, consts


def landmark_visibility(mesh, cam, frag, tol=None):
    """Which landmark vertices survive the Z-buffer at their own pixel.

    A landmark is visible when its projection lands in the image and its
    depth is within tol of the buffered depth there.
    """
    proj, depth = geometry.project_points(mesh.vertices[mesh.landmark_indices], cam)
    h, w = frag.triangle_ids.shape
    if tol is None:
        finite = np.isfinite(frag.depth)
        spread = frag.depth[finite].max() - frag.depth[finite].min() if finite.any() else 1.0
        tol = max(0.05 * float(spread), 1e-6)
    col = np.floor(proj[:, 0]).astype(np.int64)
    row = np.floor(proj[:, 1]).astype(np.int64)
    ok = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    zb = np.full(proj.shape[0], -np.inf)
    zb[ok] = frag.depth[row[ok], col[ok]]
    return ok & np.isfinite(zb) & (depth >= zb - tol)


def emit_dataset(outdir, count, seed, width=64, height=64, tex_rows=32, tex_cols=32):
    """Write a reproducible synthetic dataset: per sample an OBJ mesh, a
    texture PNG, a rendered image PNG, a landmark CSV with visibility, and a
    camera JSON.  Returns the manifest dict (also written as manifest.json).
    """
    import os

    os.makedirs(outdir, exist_ok=True)
    rng = np.random.default_rng(seed)
    base = base_head()
    consts = geometry.default_unwarp_constants(base, tex_rows, tex_cols)
    geometry.save_landmark_table(
        os.path.join(outdir, "landmark_table.txt"), base.landmark_indices
    )
    samples = []
    for i in range(count):
        name = f"sample_{i:03d}"
        mesh = make_head(sample_linear_weights(rng))
        tex = smooth_texture(rng, tex_rows, tex_cols)
        cam = head_camera(width, height, rng)
        img, frag = render.render(mesh, tex, cam, consts, width, height)
        proj, _ = geometry.project(mesh.vertices[mesh.landmark_indices], cam)
        vis = landmark_visibility(mesh, cam, frag)
        geometry.save_obj(os.path.join(outdir, name + ".obj"), mesh)
        imageio.save_png(os.path.join(outdir, name + "_texture.png"), tex)
        imageio.save_png(os.path.join(outdir, name + ".png"), img.pixels)
        loss.save_landmark_csv(
            os.path.join(outdir, name + "_landmarks.csv"),
            loss.LandmarkSet(points=proj.T, visible=vis),
        )
        with open(os.path.join(outdir, name + "_camera.json"), "w") as fh:
            json.dump(
                {
                    "scale": cam.scale, "pitch": cam.pitch, "yaw": cam.yaw,
                    "roll": cam.roll, "tx": cam.tx, "ty": cam.ty,
                },
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")
        samples.append(name)
    manifest = {
        "count": count, "seed": seed, "width": width, "height": height,
        "texture_rows": tex_rows, "texture_cols": tex_cols, "samples": samples,
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
