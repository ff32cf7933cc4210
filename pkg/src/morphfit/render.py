"""Software Z-buffer renderer with an analytic backward pass.

The forward path rasterizes a projected mesh into a fragment buffer (winning
triangle id, barycentric weights, depth per pixel), samples a texture at the
cylindrically unwarped vertex coordinates, and blends the three sampled vertex
colors with the barycentric weights.

The backward path treats per-pixel visibility as fixed: the fragment buffer is
held constant and gradients flow only through the barycentric weights, the
texture samples, and the projection.  That makes the gradient exact everywhere
except across occlusion-boundary pixels, which callers are expected to mask.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry

# triangle id marking a pixel no triangle covers
EMPTY = -1


class StaleFragments(ValueError):
    """Fragment buffer does not match the mesh it is being applied to."""


@dataclass(frozen=True)
class Texture:
    """Texel grid, shape (rows, cols, 3), float values (nominally [0, 1])."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        object.__setattr__(self, "pixels", p)
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 2 or p.shape[1] < 2:
            raise ValueError("texture must be (rows, cols, 3) with rows, cols >= 2")

    @property
    def rows(self):
        return self.pixels.shape[0]

    @property
    def cols(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class FragmentBuffer:
    """Per-pixel rasterization result.

    triangle_ids: (H, W) int32, EMPTY where uncovered.
    bary: (H, W, 3) barycentric weights of the winning triangle.
    depth: (H, W) winning depth, -inf where uncovered.
    """

    triangle_ids: np.ndarray
    bary: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.triangle_ids, dtype=np.int32)
        bary = np.asarray(self.bary, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        object.__setattr__(self, "triangle_ids", ids)
        object.__setattr__(self, "bary", bary)
        object.__setattr__(self, "depth", depth)
        if ids.ndim != 2:
            raise ValueError("triangle_ids must be (H, W)")
        if bary.shape != ids.shape + (3,) or depth.shape != ids.shape:
            raise ValueError("fragment buffer fields disagree on image size")

    @property
    def coverage(self):
        return self.triangle_ids != EMPTY


@dataclass(frozen=True)
class RenderedImage:
    """Shaded output: (H, W, 3) pixels plus the boolean coverage mask."""

    pixels: np.ndarray
    coverage: np.ndarray


@dataclass(frozen=True)
class RenderGradients:
    """Gradients of a scalar loss w.r.t. the renderer inputs.

    d_texture: (rows, cols, 3); d_vertices: (Q, 3) in model space;
    d_camera: (6,) over (scale, pitch, yaw, roll, tx, ty).
    """

    d_texture: np.ndarray
    d_vertices: np.ndarray
    d_camera: np.ndarray


def _empty_fragments(width, height):
    return FragmentBuffer(
        triangle_ids=np.full((height, width), EMPTY, dtype=np.int32),
        bary=np.zeros((height, width, 3)),
        depth=np.full((height, width), -np.inf),
    )


def rasterize_projected(proj, depth, triangles, width, height):
    """Z-buffer rasterization of already-projected geometry.

    proj: (Q, 2) image coordinates; depth: (Q,) with larger = closer;
    triangles: (T, 3) indices.  Pixel centers sit at (col + 0.5, row + 0.5).
    A pixel belongs to a triangle when all three barycentric weights are >= 0,
    so edge and corner pixels are covered.  Zero-area triangles never cover
    anything.  The closest (max blended depth) triangle wins; exact depth ties
    go to the lower triangle id.
    """
    proj = np.asarray(proj, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)
    out = _empty_fragments(width, height)
    if tris.size == 0:
        return out

    p0 = proj[tris[:, 0]]
    p1 = proj[tris[:, 1]]
    p2 = proj[tris[:, 2]]
    xs = np.stack([p0[:, 0], p1[:, 0], p2[:, 0]])
    ys = np.stack([p0[:, 1], p1[:, 1], p2[:, 1]])

    # candidate pixel ranges per triangle: centers at col + 0.5 within the bbox
    col_lo = np.maximum(np.ceil(xs.min(axis=0) - 0.5), 0).astype(np.int64)
    col_hi = np.minimum(np.floor(xs.max(axis=0) - 0.5), width - 1).astype(np.int64)
    row_lo = np.maximum(np.ceil(ys.min(axis=0) - 0.5), 0).astype(np.int64)
    row_hi = np.minimum(np.floor(ys.max(axis=0) - 0.5), height - 1).astype(np.int64)
    ncol = np.maximum(col_hi - col_lo + 1, 0)
    nrow = np.maximum(row_hi - row_lo + 1, 0)
    counts = ncol * nrow
    total = int(counts.sum())
    if total == 0:
        return out

    # flatten every (triangle, candidate pixel) pair into parallel arrays
    tri_of = np.repeat(np.arange(tris.shape[0]), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    nc = ncol[tri_of]
    row = row_lo[tri_of] + local // nc
    col = col_lo[tri_of] + local % nc
    px = col + 0.5
    py = row + 0.5

    a = p0[tri_of]
    e1 = p1[tri_of] - a
    e2 = p2[tri_of] - a
    dx = px - a[:, 0]
    dy = py - a[:, 1]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (dx * e2[:, 1] - dy * e2[:, 0]) / det
        l2 = (e1[:, 0] * dy - e1[:, 1] * dx) / det
        l0 = 1.0 - l1 - l2
    inside = (det != 0) & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    if not inside.any():
        return out

    tri_of = tri_of[inside]
    row, col = row[inside], col[inside]
    l0, l1, l2 = l0[inside], l1[inside], l2[inside]
    z = (
        l0 * depth[tris[tri_of, 0]]
        + l1 * depth[tris[tri_of, 1]]
        + l2 * depth[tris[tri_of, 2]]
    )

    # group by pixel, keep max depth, break exact ties toward the lower id
    pix = row * width + col
    order = np.lexsort((-tri_of, z, pix))
    spix = pix[order]
    last = np.flatnonzero(np.concatenate([spix[1:] != spix[:-1], [True]]))
    win = order[last]

    ids = out.triangle_ids
    bary = out.bary
    zbuf = out.depth
    ids[row[win], col[win]] = tri_of[win].astype(np.int32)
    bary[row[win], col[win], 0] = l0[win]
    bary[row[win], col[win], 1] = l1[win]
    bary[row[win], col[win], 2] = l2[win]
    zbuf[row[win], col[win]] = z[win]
    return FragmentBuffer(triangle_ids=ids, bary=bary, depth=zbuf)


def rasterize(mesh, cam, width, height):
    """Project a mesh with a weak-perspective camera and rasterize it."""
    proj, depth = geometry.project(mesh, cam)
    return rasterize_projected(proj, depth, mesh.triangles, width, height)


def brute_force_rasterize(proj, depth, triangles, width, height):
    """Reference rasterizer: tests every pixel against every triangle.

    Same coverage and tie rules as rasterize_projected, organized as a dense
    (pixels x triangles) scan with an argmax winner per pixel.  Exists to
    cross-check the production path; quadratic cost, tests only.
    """
    proj = np.asarray(proj, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)
    if tris.size == 0:
        return _empty_fragments(width, height)

    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    px = (cols + 0.5).ravel()[:, None]
    py = (rows + 0.5).ravel()[:, None]

    a = proj[tris[:, 0]][None, :, :]
    e1 = proj[tris[:, 1]][None, :, :] - a
    e2 = proj[tris[:, 2]][None, :, :] - a
    dx = px - a[:, :, 0]
    dy = py - a[:, :, 1]
    det = (e1[:, :, 0] * e2[:, :, 1] - e1[:, :, 1] * e2[:, :, 0])
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
    z = np.where(inside, z, -np.inf)

    # argmax returns the first maximum, i.e. the lowest id among depth ties
    best = np.argmax(z, axis=1)
    npix = width * height
    sel = np.arange(npix)
    covered = np.isfinite(z[sel, best])
    ids = np.where(covered, best, EMPTY).astype(np.int32).reshape(height, width)
    bary = np.stack([l0[sel, best], l1[sel, best], l2[sel, best]], axis=1)
    bary[~covered] = 0.0
    zwin = np.where(covered, z[sel, best], -np.inf)
    return FragmentBuffer(
        triangle_ids=ids,
        bary=bary.reshape(height, width, 3),
        depth=zwin.reshape(height, width),
    )


def sample_bilinear(texture, uv):
    """Bilinearly sample a texture at continuous (row, col) coordinates.

    uv: (N, 2) with uv[:, 0] the row coordinate in [0, rows-1] and uv[:, 1]
    the column coordinate in [0, cols-1].  Out-of-range coordinates are
    clamped.  Returns (N, 3) colors.
    """
    pix = texture.pixels if isinstance(texture, Texture) else np.asarray(texture)
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    nrow, ncol = pix.shape[0], pix.shape[1]
    u = np.clip(uv[:, 0], 0.0, nrow - 1.0)
    v = np.clip(uv[:, 1], 0.0, ncol - 1.0)
    u0 = np.clip(np.floor(u), 0, nrow - 2).astype(np.int64)
    v0 = np.clip(np.floor(v), 0, ncol - 2).astype(np.int64)
    du = (u - u0)[:, None]
    dv = (v - v0)[:, None]
    c00 = pix[u0, v0]
    c01 = pix[u0, v0 + 1]
    c10 = pix[u0 + 1, v0]
    c11 = pix[u0 + 1, v0 + 1]
    return (
        c00 * (1 - du) * (1 - dv)
        + c01 * (1 - du) * dv
        + c10 * du * (1 - dv)
        + c11 * du * dv
    )


def _check_fragments(frag, mesh):
    ids = frag.triangle_ids
    covered = ids != EMPTY
    if covered.any() and ids[covered].max() >= mesh.triangles.shape[0]:
        raise StaleFragments("fragment buffer references triangles the mesh lacks")


def _vertex_colors(mesh, texture, consts):
    uv = geometry.unwarp_vertices(mesh.vertices, consts)
    return uv, sample_bilinear(texture, uv)


def shade_fragments(mesh, texture, consts, frag, background=0.0):
    """Color a fragment buffer: blend per-vertex texture samples barycentrically.

    background may be a scalar or a length-3 color for uncovered pixels.
    """
    _check_fragments(frag, mesh)
    _, colors = _vertex_colors(mesh, texture, consts)
    h, w = frag.triangle_ids.shape
    image = np.empty((h, w, 3))
    image[:] = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    covered = frag.coverage
    if covered.any():
        ids = frag.triangle_ids[covered]
        lam = frag.bary[covered]
        corner = mesh.triangles[ids]
        image[covered] = (
            lam[:, 0:1] * colors[corner[:, 0]]
            + lam[:, 1:2] * colors[corner[:, 1]]
            + lam[:, 2:3] * colors[corner[:, 2]]
        )
    return RenderedImage(pixels=image, coverage=covered)


def render(mesh, texture, cam, consts, width, height, background=0.0):
    """Rasterize and shade in one call; returns (RenderedImage, FragmentBuffer)."""
    frag = rasterize(mesh, cam, width, height)
    return shade_fragments(mesh, texture, consts, frag, background), frag


def render_backward(mesh, texture, cam, consts, frag, upstream):
    """Backpropagate an image-space gradient through the renderer.

    upstream: (H, W, 3) gradient of a scalar loss w.r.t. the shaded pixels.
    The fragment buffer is treated as constant (visibility is frozen), so the
    result is exact away from occlusion boundaries.  Returns RenderGradients.
    """
    _check_fragments(frag, mesh)
    upstream = np.asarray(upstream, dtype=np.float64)
    h, w = frag.triangle_ids.shape
    if upstream.shape != (h, w, 3):
        raise ValueError("upstream gradient must match the fragment buffer size")

    verts = mesh.vertices
    tris = mesh.triangles
    q = verts.shape[0]
    tex = texture.pixels if isinstance(texture, Texture) else np.asarray(texture)
    nrow, ncol = tex.shape[0], tex.shape[1]

    d_texture = np.zeros_like(tex)
    d_vertices = np.zeros((q, 3))
    d_camera = np.zeros(6)
    covered = frag.coverage
    if not covered.any():
        return RenderGradients(d_texture, d_vertices, d_camera)

    ids = frag.triangle_ids[covered].astype(np.int64)
    lam = frag.bary[covered]
    up = upstream[covered]
    corner = tris[ids]

    uv, colors = _vertex_colors(mesh, texture, consts)

    # gradient w.r.t. each vertex's sampled color: sum of lambda-weighted
    # upstream over the pixels the vertex participates in
    g_color = np.zeros((q, 3))
    for k in range(3):
        np.add.at(g_color, corner[:, k], lam[:, k : k + 1] * up)

    # push g_color into the texture through the bilinear kernel
    u = np.clip(uv[:, 0], 0.0, nrow - 1.0)
    v = np.clip(uv[:, 1], 0.0, ncol - 1.0)
    u0 = np.clip(np.floor(u), 0, nrow - 2).astype(np.int64)
    v0 = np.clip(np.floor(v), 0, ncol - 2).astype(np.int64)
    du = (u - u0)[:, None]
    dv = (v - v0)[:, None]
    np.add.at(d_texture, (u0, v0), (1 - du) * (1 - dv) * g_color)
    np.add.at(d_texture, (u0, v0 + 1), (1 - du) * dv * g_color)
    np.add.at(d_texture, (u0 + 1, v0), du * (1 - dv) * g_color)
    np.add.at(d_texture, (u0 + 1, v0 + 1), du * dv * g_color)

    # ... and into the uv coordinates through the same kernel
    c00, c01 = tex[u0, v0], tex[u0, v0 + 1]
    c10, c11 = tex[u0 + 1, v0], tex[u0 + 1, v0 + 1]
    dc_du = (1 - dv) * (c10 - c00) + dv * (c11 - c01)
    dc_dv = (1 - du) * (c01 - c00) + du * (c11 - c10)
    g_uv = np.stack(
        [(g_color * dc_du).sum(axis=1), (g_color * dc_dv).sum(axis=1)], axis=1
    )

    # barycentric chain: gradient w.r.t. the projected 2D corner positions.
    # With per-pixel s_k = <upstream, color_k>, the pixel loss is sum_k
    # lambda_k s_k; differentiate lambda_1, lambda_2 (lambda_0 = 1 - l1 - l2)
    # through their ratio-of-determinants form.
    proj, _ = geometry.project(mesh, cam)
    pcen = np.stack(np.nonzero(covered), axis=1)  # (M, 2) row, col
    pxy = np.stack([pcen[:, 1] + 0.5, pcen[:, 0] + 0.5], axis=1)
    a = proj[corner[:, 0]]
    e1 = proj[corner[:, 1]] - a
    e2 = proj[corner[:, 2]] - a
    d = pxy - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]

    s = np.stack(
        [(up * colors[corner[:, k]]).sum(axis=1) for k in range(3)], axis=1
    )
    c1 = s[:, 1] - s[:, 0]
    c2 = s[:, 2] - s[:, 0]

    dn1 = (
        np.stack([-e2[:, 1] + d[:, 1], e2[:, 0] - d[:, 0]], axis=1),
        np.zeros_like(e1),
        np.stack([-d[:, 1], d[:, 0]], axis=1),
    )
    dn2 = (
        np.stack([e1[:, 1] - d[:, 1], d[:, 0] - e1[:, 0]], axis=1),
        np.stack([d[:, 1], -d[:, 0]], axis=1),
        np.zeros_like(e1),
    )
    dden = (
        np.stack([e1[:, 1] - e2[:, 1], e2[:, 0] - e1[:, 0]], axis=1),
        np.stack([e2[:, 1], -e2[:, 0]], axis=1),
        np.stack([-e1[:, 1], e1[:, 0]], axis=1),
    )

    g_proj = np.zeros((q, 2))
    inv_det = 1.0 / det
    for k in range(3):
        dl1 = (dn1[k] - lam[:, 1:2] * dden[k]) * inv_det[:, None]
        dl2 = (dn2[k] - lam[:, 2:3] * dden[k]) * inv_det[:, None]
        contrib = c1[:, None] * dl1 + c2[:, None] * dl2
        np.add.at(g_proj, corner[:, k], contrib)

    pm = geometry.projection_matrix(cam)
    d_vertices = g_proj @ pm + np.einsum(
        "qi,qij->qj", g_uv, geometry.unwarp_jacobian(verts, consts)
    )
    d_camera = np.einsum(
        "qi,qij->j", g_proj, geometry.project_jacobian_camera(verts, cam)
    )
    return RenderGradients(d_texture, d_vertices, d_camera)


def unwarp_image_to_uv(image, mesh, cam, consts, depth_tol=None):
    """Pull image colors back onto the texture grid through the mesh.

    Rasterizes the mesh in unwarp (texture) space, finds the surface point each
    texel sees, projects it into the image, and bilinearly reads the image
    there.  A texel is valid when its surface point is covered in texture
    space, lands inside the image, and is not occluded: its camera depth must
    be within depth_tol of the camera Z-buffer at that pixel.

    Returns (texture_pixels, valid_mask); invalid texels are 0.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[0], image.shape[1]
    verts = mesh.vertices
    _, cam_depth = geometry.project(mesh, cam)
    if depth_tol is None:
        extent = float(cam_depth.max() - cam_depth.min())
        depth_tol = max(0.05 * extent, 1e-6)

    # texture-space rasterization: texel (r, c) maps to pixel center (c+.5, r+.5)
    uv = geometry.unwarp_vertices(verts, consts)
    uvproj = np.stack([uv[:, 1] + 0.5, uv[:, 0] + 0.5], axis=1)
    frag_uv = rasterize_projected(
        uvproj, cam_depth, mesh.triangles, consts.cols, consts.rows
    )

    # camera-space Z-buffer for the occlusion test
    frag_cam = rasterize(mesh, cam, w, h)

    out = np.zeros((consts.rows, consts.cols, 3))
    valid = np.zeros((consts.rows, consts.cols), dtype=bool)
    covered = frag_uv.coverage
    if not covered.any():
        return out, valid

    ids = frag_uv.triangle_ids[covered].astype(np.int64)
    lam = frag_uv.bary[covered]
    corner = mesh.triangles[ids]
    point = (
        lam[:, 0:1] * verts[corner[:, 0]]
        + lam[:, 1:2] * verts[corner[:, 1]]
        + lam[:, 2:3] * verts[corner[:, 2]]
    )
    pxy, pz = geometry.project_points(point, cam)

    inside = (
        (pxy[:, 0] >= 0.5)
        & (pxy[:, 0] <= w - 0.5)
        & (pxy[:, 1] >= 0.5)
        & (pxy[:, 1] <= h - 0.5)
    )
    col_idx = np.clip(np.floor(pxy[:, 0]), 0, w - 1).astype(np.int64)
    row_idx = np.clip(np.floor(pxy[:, 1]), 0, h - 1).astype(np.int64)
    zbuf = frag_cam.depth[row_idx, col_idx]
    unoccluded = np.isfinite(zbuf) & (np.abs(pz - zbuf) <= depth_tol)
    ok = inside & unoccluded

    sample_rc = np.stack([pxy[:, 1] - 0.5, pxy[:, 0] - 0.5], axis=1)
    colors = sample_bilinear(image, sample_rc)

    rr, cc = np.nonzero(covered)
    out[rr[ok], cc[ok]] = colors[ok]
    valid[rr[ok], cc[ok]] = True
    return out, valid


_FRAG_MAGIC = b"FRAG"


def save_fragments(path, frag):
    """Serialize a fragment buffer: magic, u32 dims, ids, bary, depth."""
    h, w = frag.triangle_ids.shape
    with open(path, "wb") as fh:
        fh.write(_FRAG_MAGIC)
        fh.write(np.array([h, w], dtype="<u4").tobytes())
        fh.write(frag.triangle_ids.astype("<i4").tobytes())
        fh.write(frag.bary.astype("<f8").tobytes())
        fh.write(frag.depth.astype("<f8").tobytes())


def load_fragments(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _FRAG_MAGIC:
        raise ValueError(f"{path}: not a fragment buffer file")
    h, w = np.frombuffer(blob, dtype="<u4", count=2, offset=4)
    h, w = int(h), int(w)
    off = 12
    n = h * w
    ids = np.frombuffer(blob, dtype="<i4", count=n, offset=off).reshape(h, w)
    off += 4 * n
    bary = np.frombuffer(blob, dtype="<f8", count=3 * n, offset=off).reshape(h, w, 3)
    off += 24 * n
    depth = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(h, w)
    expected = off + 8 * n
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated or oversized fragment buffer")
    return FragmentBuffer(
        triangle_ids=ids.copy(), bary=bary.copy(), depth=depth.copy()
    )
