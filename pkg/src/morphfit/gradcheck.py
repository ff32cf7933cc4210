"""Finite-difference verification of the analytic gradients.

The renderer's backward pass holds per-pixel visibility fixed, so its gradient
is only claimed away from pixels whose winning triangle could change under an
infinitesimal perturbation.  The harness therefore excludes, before
differencing:

* pixels within one pixel of a winning-id discontinuity (occlusion and
  coverage boundaries), and
* pixels where the two closest candidate triangles are within a small depth
  gap of each other, where a perturbation can flip the Z-buffer winner.

Vertex-coordinate probes additionally skip perturbations that push the
vertex's texture sample across a texel-cell boundary or onto the clamp edge,
where bilinear sampling kinks.
"""

import numpy as np

from . import geometry, loss, model, render, synth


def relative_error(a, b, floor=1e-6):
    """|a - b| / max(|a|, |b|, floor), elementwise on scalars."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def _dense_depths(proj, depth, tris, width, height):
    """All candidate blended depths per pixel, (P, T), -inf where not inside."""
    proj = np.asarray(proj, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int64)
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    px = (cols + 0.5).ravel()[:, None]
    py = (rows + 0.5).ravel()[:, None]
    a = proj[tris[:, 0]][None, :, :]
    e1 = proj[tris[:, 1]][None, :, :] - a
    e2 = proj[tris[:, 2]][None, :, :] - a
    dx = px - a[:, :, 0]
    dy = py - a[:, :, 1]
    det = e1[:, :, 0] * e2[:, :, 1] - e1[:, :, 1] * e2[:, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (dx * e2[:, :, 1] - dy * e2[:, :, 0]) / det
        l2 = (e1[:, :, 0] * dy - e1[:, :, 1] * dx) / det
        l0 = 1.0 - l1 - l2
        inside = (det != 0) & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        z = (
            l0 * depth[tris[:, 0]][None, :]
            + l1 * depth[tris[:, 1]][None, :]
            + l2 * depth[tris[:, 2]][None, :]
        )
    return np.where(inside, z, -np.inf)


def depth_tie_mask(mesh, cam, width, height, gap=1e-2):
    """Pixels whose best two candidate depths are within gap of each other."""
    proj, depth = geometry.project(mesh, cam)
    z = _dense_depths(proj, depth, mesh.triangles, width, height)
    if z.shape[1] < 2:
        return np.zeros((height, width), dtype=bool)
    part = np.partition(z, z.shape[1] - 2, axis=1)
    top1 = part[:, -1]
    top2 = part[:, -2]
    with np.errstate(invalid="ignore"):
        tie = np.isfinite(top1) & np.isfinite(top2) & (top1 - top2 < gap)
    return tie.reshape(height, width)


def id_edge_mask(triangle_ids):
    """Pixels whose 8-neighborhood contains a different winning id.

    Both sides of every id transition are marked, giving a two-pixel band
    around occlusion and coverage boundaries.  Finite-difference steps move
    projected edges by far less than a pixel, so any pixel whose winner can
    flip lies inside this band.
    """
    ids = np.asarray(triangle_ids)
    edge = np.zeros(ids.shape, dtype=bool)
    diff_v = ids[1:, :] != ids[:-1, :]
    edge[1:, :] |= diff_v
    edge[:-1, :] |= diff_v
    diff_h = ids[:, 1:] != ids[:, :-1]
    edge[:, 1:] |= diff_h
    edge[:, :-1] |= diff_h
    diff_d = ids[1:, 1:] != ids[:-1, :-1]
    edge[1:, 1:] |= diff_d
    edge[:-1, :-1] |= diff_d
    diff_a = ids[1:, :-1] != ids[:-1, 1:]
    edge[1:, :-1] |= diff_a
    edge[:-1, 1:] |= diff_a
    return edge


def edge_proximity_mask(mesh, cam, width, height, eps=0.03):
    """Pixels whose center lies within eps of any projected triangle edge.

    The winning-id band cannot see geometry that covers no pixel center (a
    triangle tip poking sub-pixel into a neighborhood), so near-edge pixels
    are excluded by measured distance instead.  eps only needs to exceed the
    edge motion caused by a finite-difference step, which is orders of
    magnitude below a pixel.
    """
    proj, _ = geometry.project(mesh, cam)
    tris = mesh.triangles
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    p = np.stack([(cols + 0.5).ravel(), (rows + 0.5).ravel()], axis=1)
    near = np.zeros(p.shape[0], dtype=bool)
    for k in range(3):
        a = proj[tris[:, k]]
        b = proj[tris[:, (k + 1) % 3]]
        ab = b - a
        denom = (ab**2).sum(axis=1)
        denom = np.where(denom > 0, denom, 1.0)
        # closest point on each segment to each pixel center
        ap = p[:, None, :] - a[None, :, :]
        t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
        closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
        dist2 = ((p[:, None, :] - closest) ** 2).sum(axis=2)
        near |= (dist2 < eps * eps).any(axis=1)
    return near.reshape(height, width)


def exclusion_mask(mesh, cam, frag, depth_gap=1e-2, edge_eps=0.03):
    """Union of the id band, the near-edge pixels, and the depth-tie pixels."""
    h, w = frag.triangle_ids.shape
    return (
        id_edge_mask(frag.triangle_ids)
        | edge_proximity_mask(mesh, cam, w, h, edge_eps)
        | depth_tie_mask(mesh, cam, w, h, depth_gap)
    )


def _weighted_loss(mesh, texture, cam, consts, weights):
    h, w = weights.shape[0], weights.shape[1]
    frag = render.rasterize(mesh, cam, w, h)
    img = render.shade_fragments(mesh, texture, consts, frag, background=0.0)
    return float((weights * img.pixels).sum())


def check_render_gradients(mesh, texture, cam, consts, width, height, rng,
                           step=1e-4, n_vertex_coords=24, n_texels=16):
    """Compare the renderer's analytic gradients against central differences.

    The probe loss is a fixed random weighting of the output pixels, zeroed on
    the exclusion mask.  Returns a report dict with the worst relative error
    per parameter group and the probe counts.
    """
    frag = render.rasterize(mesh, cam, width, height)
    excl = exclusion_mask(mesh, cam, frag, depth_gap=1e-2)
    weights = rng.uniform(-1.0, 1.0, (height, width, 3))
    weights[excl] = 0.0
    grads = render.render_backward(mesh, texture, cam, consts, frag, weights)

    report = {
        "live_pixels": int((frag.coverage & ~excl).sum()),
        "excluded_fraction": float(excl.mean()),
        "camera_max_rel": 0.0,
        "vertex_max_rel": 0.0,
        "texture_max_rel": 0.0,
        "vertex_probes": 0,
        "vertex_skipped": 0,
        "texture_probes": 0,
    }

    # camera parameters
    vec = cam.as_vector()
    for k in range(6):
        delta = np.zeros(6)
        delta[k] = step
        lp = _weighted_loss(
            mesh, texture, geometry.CameraParams.from_vector(vec + delta), consts, weights
        )
        lm = _weighted_loss(
            mesh, texture, geometry.CameraParams.from_vector(vec - delta), consts, weights
        )
        fd = (lp - lm) / (2 * step)
        err = relative_error(fd, grads.d_camera[k])
        report["camera_max_rel"] = max(report["camera_max_rel"], err)

    # vertex coordinates; skip probes whose texture sample crosses a cell edge
    q = mesh.num_vertices
    nrow, ncol = consts.rows, consts.cols
    order = rng.permutation(q * 3)
    probed = 0
    for flat in order:
        if probed >= n_vertex_coords:
            break
        vi, ci = divmod(int(flat), 3)
        vp = mesh.vertices.copy()
        vp[vi, ci] += step
        vm = mesh.vertices.copy()
        vm[vi, ci] -= step
        uv_p = geometry.unwarp_vertices(vp[vi : vi + 1], consts)[0]
        uv_m = geometry.unwarp_vertices(vm[vi : vi + 1], consts)[0]
        cell = lambda uv: (
            int(np.clip(np.floor(uv[0]), 0, nrow - 2)),
            int(np.clip(np.floor(uv[1]), 0, ncol - 2)),
        )
        on_edge = (
            cell(uv_p) != cell(uv_m)
            or uv_p[0] in (0.0, nrow - 1.0) or uv_m[0] in (0.0, nrow - 1.0)
            or uv_p[1] in (0.0, ncol - 1.0) or uv_m[1] in (0.0, ncol - 1.0)
        )
        if on_edge:
            report["vertex_skipped"] += 1
            continue
        mesh_p = geometry.Mesh(vp, mesh.triangles, mesh.landmark_indices)
        mesh_m = geometry.Mesh(vm, mesh.triangles, mesh.landmark_indices)
        lp = _weighted_loss(mesh_p, texture, cam, consts, weights)
        lm = _weighted_loss(mesh_m, texture, cam, consts, weights)
        fd = (lp - lm) / (2 * step)
        err = relative_error(fd, grads.d_vertices[vi, ci])
        report["vertex_max_rel"] = max(report["vertex_max_rel"], err)
        probed += 1
    report["vertex_probes"] = probed

    # texel channels: half from the support of the analytic gradient, half
    # uniform (checking the zeros too)
    tex = texture.pixels
    support = np.argwhere(grads.d_texture != 0)
    flat_all = np.argwhere(np.ones_like(tex, dtype=bool))
    picks = []
    if support.shape[0]:
        sel = rng.choice(support.shape[0], min(n_texels // 2, support.shape[0]), replace=False)
        picks.extend(support[sel])
    sel = rng.choice(flat_all.shape[0], n_texels - len(picks), replace=False)
    picks.extend(flat_all[sel])
    for r, c, ch in picks:
        tp = tex.copy()
        tp[r, c, ch] += step
        tm = tex.copy()
        tm[r, c, ch] -= step
        lp = _weighted_loss(mesh, render.Texture(tp), cam, consts, weights)
        lm = _weighted_loss(mesh, render.Texture(tm), cam, consts, weights)
        fd = (lp - lm) / (2 * step)
        err = relative_error(fd, grads.d_texture[r, c, ch])
        report["texture_max_rel"] = max(report["texture_max_rel"], err)
    report["texture_probes"] = len(picks)
    return report


def check_render_suite(n_scenes=20, seed=0, step=1e-4, width=32, height=32,
                       min_live=12):
    """Run the render check over a batch of random soup scenes.

    Scenes whose exclusion band leaves fewer than min_live scoreable pixels
    prove nothing, so they are redrawn (bounded retries keep it terminating).
    """
    rng = np.random.default_rng(seed)
    worst = {"camera_max_rel": 0.0, "vertex_max_rel": 0.0, "texture_max_rel": 0.0}
    skipped = 0
    probes = 0
    live = 0
    for _ in range(n_scenes):
        for _ in range(20):
            n_tris = int(rng.integers(5, 13))
            mesh, texture, cam, consts = synth.random_scene(
                rng, n_tris=n_tris, width=width, height=height
            )
            rep = check_render_gradients(
                mesh, texture, cam, consts, width, height, rng, step=step
            )
            if rep["live_pixels"] >= min_live:
                break
        for k in worst:
            worst[k] = max(worst[k], rep[k])
        skipped += rep["vertex_skipped"]
        probes += rep["vertex_probes"] + rep["texture_probes"] + 6
        live += rep["live_pixels"]
    worst["scenes"] = n_scenes
    worst["total_probes"] = probes
    worst["vertex_skipped"] = skipped
    worst["live_pixels"] = live
    return worst


def check_mlp_gradients(n_configs=20, seed=0, step=1e-5):
    """FD-check decoder parameter and input gradients on random networks."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(2, 7))]
        for _ in range(depth):
            sizes.append(int(rng.integers(3, 9)))
        dec = model.MlpDecoder.create(sizes, seed=int(rng.integers(0, 2**31)))
        batch = int(rng.integers(1, 4))
        x = rng.normal(0.0, 1.0, (batch, sizes[0]))
        if batch == 1 and rng.random() < 0.5:
            x = x[0]
        w_out = rng.normal(0.0, 1.0, (batch, sizes[-1]) if x.ndim > 1 else sizes[-1])

        out, cache = model.mlp_forward(dec, x)
        grads, d_in = model.mlp_backward(dec, cache, w_out)

        def probe_loss():
            o, _ = model.mlp_forward(dec, x)
            return float((w_out * o).sum())

        # a few weight and bias entries per layer
        for li, (w, b) in enumerate(dec.layers):
            for _ in range(3):
                i = int(rng.integers(w.shape[0]))
                j = int(rng.integers(w.shape[1]))
                orig = w[i, j]
                w[i, j] = orig + step
                lp = probe_loss()
                w[i, j] = orig - step
                lm = probe_loss()
                w[i, j] = orig
                worst = max(worst, relative_error((lp - lm) / (2 * step), grads[li][0][i, j]))
            i = int(rng.integers(b.shape[0]))
            orig = b[i]
            b[i] = orig + step
            lp = probe_loss()
            b[i] = orig - step
            lm = probe_loss()
            b[i] = orig
            worst = max(worst, relative_error((lp - lm) / (2 * step), grads[li][1][i]))

        # input entries
        xf = np.atleast_2d(np.asarray(x, dtype=np.float64))
        din2 = np.atleast_2d(d_in)
        for _ in range(3):
            bi = int(rng.integers(xf.shape[0]))
            j = int(rng.integers(xf.shape[1]))
            xp = xf.copy()
            xp[bi, j] += step
            xm = xf.copy()
            xm[bi, j] -= step
            op, _ = model.mlp_forward(dec, xp if xf.shape[0] > 1 or np.ndim(x) > 1 else xp[0])
            om, _ = model.mlp_forward(dec, xm if xf.shape[0] > 1 or np.ndim(x) > 1 else xm[0])
            lp = float((np.atleast_2d(w_out) * np.atleast_2d(op)).sum())
            lm = float((np.atleast_2d(w_out) * np.atleast_2d(om)).sum())
            worst = max(worst, relative_error((lp - lm) / (2 * step), din2[bi, j]))
    return {"max_rel": worst, "configs": n_configs}


def group_relative_error(fd, analytic, floor=1e-6):
    """Worst component difference over the parameter group's gradient scale.

    Dividing each component by its own magnitude turns central-difference
    roundoff (about eps * |loss| / step in absolute terms) into an arbitrarily
    large ratio whenever one component nearly cancels, so the comparison is
    normalized by the group's largest component instead.
    """
    fd = np.asarray(fd, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = max(np.abs(fd).max(), np.abs(analytic).max(), floor)
    return float(np.abs(fd - analytic).max() / scale)


def check_landmark_gradients(n_configs=20, seed=0, step=1e-5):
    """FD-check the landmark loss gradients w.r.t. camera and vertices."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        q = int(rng.integers(80, 160))
        verts = rng.normal(0.0, 1.0, (q, 3))
        table = rng.choice(q, 68, replace=False).astype(np.int64)
        tris = np.array([[0, 1, 2]], dtype=np.int64)
        mesh = geometry.Mesh(verts, tris, table)
        cam = geometry.CameraParams(
            scale=float(rng.uniform(0.5, 4.0)),
            pitch=float(rng.uniform(-0.8, 0.8)),
            yaw=float(rng.uniform(-0.8, 0.8)),
            roll=float(rng.uniform(-0.8, 0.8)),
            tx=float(rng.uniform(-3, 3)),
            ty=float(rng.uniform(-3, 3)),
        )
        targets = loss.LandmarkSet(
            points=rng.normal(0.0, 3.0, (2, 68)),
            visible=rng.random(68) < 0.8,
        )
        value, d_cam, d_verts = loss.landmark_loss(mesh, cam, targets)
        if value < 1e-6:
            continue

        vec = cam.as_vector()
        fd_cam = np.zeros(6)
        for k in range(6):
            delta = np.zeros(6)
            delta[k] = step
            vp = loss.landmark_loss(
                mesh, geometry.CameraParams.from_vector(vec + delta), targets
            )[0]
            vm = loss.landmark_loss(
                mesh, geometry.CameraParams.from_vector(vec - delta), targets
            )[0]
            fd_cam[k] = (vp - vm) / (2 * step)
        worst = max(worst, group_relative_error(fd_cam, d_cam))

        fd_verts, an_verts = [], []
        for _ in range(6):
            entry = int(rng.integers(68))
            ci = int(rng.integers(3))
            vi = int(table[entry])
            wp = verts.copy()
            wp[vi, ci] += step
            wm = verts.copy()
            wm[vi, ci] -= step
            vp = loss.landmark_loss(
                geometry.Mesh(wp, tris, table), cam, targets
            )[0]
            vm = loss.landmark_loss(
                geometry.Mesh(wm, tris, table), cam, targets
            )[0]
            fd_verts.append((vp - vm) / (2 * step))
            an_verts.append(d_verts[entry, ci])
        worst = max(worst, group_relative_error(fd_verts, an_verts))
    return {"max_rel": worst, "configs": n_configs}


def run_all(seed=0):
    """Every harness at its default size; returns one combined report."""
    return {
        "render": check_render_suite(seed=seed),
        "mlp": check_mlp_gradients(seed=seed),
        "landmark": check_landmark_gradients(seed=seed),
    }
