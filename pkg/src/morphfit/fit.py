"""Gradient-descent fitting drivers.

Parameters under optimization are grouped into named blocks ('camera',
'shape_w', 'tex_w', 'texture', 'vertices'); the optimizers treat each block as
one flat tensor.  All drivers evaluate before they step, track the best
iterate seen, and return it, so a late divergence cannot destroy a good fit.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry, loss, model, render


class DivergenceError(RuntimeError):
    """Loss exploded past the configured multiple of its initial value."""


@dataclass
class AdamState:
    """First/second moment running averages per parameter block."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(state, params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over every block present in grads, in place.

    Bias-corrected moments; the stabilizer eps is added outside the square
    root, so the very first step moves each coordinate by about lr.
    """
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for k, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        mhat = state.m[k] / bc1
        vhat = state.v[k] / bc2
        params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)


def gd_step(params, grads, lr):
    """Plain gradient descent over every block present in grads, in place."""
    for k, g in grads.items():
        params[k] = params[k] - lr * np.asarray(g, dtype=np.float64)


@dataclass
class FitConfig:
    """Knobs shared by all fitting drivers.

    lr_decay/lr_decay_every give an optional geometric step-size schedule
    (lr * lr_decay^(step // lr_decay_every)); the default is a constant rate.
    tol stops early once the loss is at or below it.  divergence_factor aborts
    a run whose loss exceeds that multiple of the initial loss.
    """

    max_iters: int = 500
    lr: float = 0.001
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    tol: float = 0.0
    optimizer: str = "adam"
    landmark_weight: float = 0.0
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.optimizer not in ("adam", "gd"):
            raise ValueError("optimizer must be 'adam' or 'gd'")
        if self.max_iters < 0 or self.lr <= 0:
            raise ValueError("max_iters must be >= 0 and lr positive")

    def rate_at(self, step):
        if self.lr_decay_every <= 0 or self.lr_decay == 1.0:
            return self.lr
        return self.lr * self.lr_decay ** (step // self.lr_decay_every)


def save_fit_config(path, config):
    with open(path, "w") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_fit_config(path):
    with open(path, "r") as fh:
        doc = json.load(fh)
    return FitConfig(**doc)


@dataclass
class FitResult:
    """Best iterate of a fitting run.

    params holds the best raw parameter blocks (copies); trace records the
    loss at every evaluated step, starting with the initial parameters.
    """

    params: dict
    loss: float
    step: int
    trace: list


def _run_loop(params, step_fn, config):
    """Shared evaluate/step loop.

    step_fn(params) -> (loss value, dict of block gradients); one call per
    iteration, so the forward pass is shared between evaluation and gradient.
    """
    state = AdamState()
    best = {k: np.array(v, copy=True) for k, v in params.items()}
    best_loss = np.inf
    best_step = 0
    initial = None
    trace = []
    for step in range(config.max_iters + 1):
        value, grads = step_fn(params)
        trace.append(value)
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step}")
        if value < best_loss:
            best_loss = value
            best_step = step
            best = {k: np.array(v, copy=True) for k, v in params.items()}
        if step == 0:
            initial = max(value, 1e-12)
        elif value > config.divergence_factor * initial:
            raise DivergenceError(
                f"loss {value:.3g} at step {step} exceeds "
                f"{config.divergence_factor}x the initial {initial:.3g}"
            )
        if value <= config.tol or step == config.max_iters:
            break
        if config.optimizer == "adam":
            adam_step(state, params, grads, config.rate_at(step))
        else:
            gd_step(params, grads, config.rate_at(step))
        if "camera" in params:
            params["camera"][0] = max(params["camera"][0], 1e-6)
    return FitResult(params=best, loss=float(best_loss), step=best_step, trace=trace)


def fit_texture(target, valid=None, *, texture_model=None, w0=None, texture0=None,
                config=None):
    """Fit a texture to a target under mean-absolute texel error.

    With texture_model, optimizes the latent vector (block 'tex_w', started at
    w0 or zero); otherwise optimizes the texel grid itself (block 'texture',
    started at texture0 or the valid-region mean).  Returns a FitResult whose
    params also carry the decoded best 'texture'.
    """
    target = np.asarray(target, dtype=np.float64)
    if config is None:
        config = FitConfig(lr=0.001, max_iters=500)
    if valid is None:
        valid = np.ones(target.shape[:2], dtype=bool)

    if texture_model is not None:
        w_init = np.zeros(texture_model.latent_dim) if w0 is None else np.array(w0, dtype=np.float64)
        params = {"tex_w": w_init}

        def decode(p):
            return model.linear_decode(texture_model, p["tex_w"]).reshape(target.shape)

        def step_fn(p):
            value, d_tex = loss.texture_pretrain_loss(decode(p), target, valid)
            return value, {"tex_w": texture_model.basis.T @ d_tex.ravel()}

        result = _run_loop(params, step_fn, config)
        result.params["texture"] = decode(result.params)
        return result

    if texture0 is None:
        fill = target[valid].mean(axis=0) if valid.any() else np.zeros(3)
        texture0 = np.broadcast_to(fill, target.shape).copy()
    params = {"texture": np.array(texture0, dtype=np.float64)}

    def step_fn(p):
        value, d_tex = loss.texture_pretrain_loss(p["texture"], target, valid)
        return value, {"texture": d_tex}

    return _run_loop(params, step_fn, config)


def _normal_term(vertices, triangles, target_units):
    """Mean (1 - cos angle) between vertex normals and target unit normals,
    with its gradient w.r.t. the vertices."""
    acc = geometry.accumulate_vertex_normals(vertices, triangles)
    nrm = np.linalg.norm(acc, axis=1)
    live = nrm > 1e-12
    q = vertices.shape[0]
    unit = np.zeros_like(acc)
    unit[live] = acc[live] / nrm[live, None]
    dots = (unit * target_units).sum(axis=1)
    value = float((1.0 - np.where(live, dots, 0.0)).mean())
    # d value / d acc, then through the cross products to the corners
    h = np.zeros_like(acc)
    h[live] = -(target_units[live] - dots[live, None] * unit[live]) / (
        nrm[live, None] * q
    )
    tri = triangles
    h_face = h[tri[:, 0]] + h[tri[:, 1]] + h[tri[:, 2]]
    v = vertices
    grad = np.zeros_like(v)
    np.add.at(grad, tri[:, 0], np.cross(v[tri[:, 1]] - v[tri[:, 2]], h_face))
    np.add.at(grad, tri[:, 1], np.cross(v[tri[:, 2]] - v[tri[:, 0]], h_face))
    np.add.at(grad, tri[:, 2], np.cross(v[tri[:, 0]] - v[tri[:, 1]], h_face))
    return value, grad


def fit_shape(target_vertices, *, triangles=None, shape_model=None, decoder=None,
              w0=None, latent0=None, vertices0=None, normal_weight=0.0,
              config=None):
    """Fit vertex positions to a target under RMS vertex error.

    Exactly one parameterization is used: a LinearModel latent ('shape_w'), an
    MlpDecoder latent with frozen weights ('latent'), or the raw vertex array
    ('vertices').  normal_weight > 0 adds mean (1 - cos) disagreement between
    vertex normals and the target's, which needs triangles.
    """
    target = np.asarray(target_vertices, dtype=np.float64)
    if config is None:
        config = FitConfig(lr=0.001, max_iters=500)
    if (shape_model is not None) + (decoder is not None) > 1:
        raise ValueError("pass at most one of shape_model and decoder")
    target_units = None
    if normal_weight > 0:
        if triangles is None:
            raise ValueError("normal term needs triangles")
        acc = geometry.accumulate_vertex_normals(target, triangles)
        nrm = np.linalg.norm(acc, axis=1)
        if (nrm == 0).any():
            raise geometry.ZeroAreaFan("target mesh has a zero vertex normal")
        target_units = acc / nrm[:, None]

    if shape_model is not None:
        w_init = np.zeros(shape_model.latent_dim) if w0 is None else np.array(w0, dtype=np.float64)
        params = {"shape_w": w_init}

        def decode(p):
            return model.linear_decode(shape_model, p["shape_w"]).reshape(target.shape)

        def to_block(d_verts, p):
            return {"shape_w": shape_model.basis.T @ d_verts.ravel()}

    elif decoder is not None:
        l_init = np.zeros(decoder.input_dim) if latent0 is None else np.array(latent0, dtype=np.float64)
        params = {"latent": l_init}
        cache_box = {}

        def decode(p):
            out, cache = model.mlp_forward(decoder, p["latent"])
            cache_box["cache"] = cache
            return out.reshape(target.shape)

        def to_block(d_verts, p):
            _, d_in = model.mlp_backward(decoder, cache_box["cache"], d_verts.ravel())
            return {"latent": d_in}

    else:
        v_init = target * 0.0 if vertices0 is None else np.array(vertices0, dtype=np.float64)
        params = {"vertices": v_init}

        def decode(p):
            return p["vertices"]

        def to_block(d_verts, p):
            return {"vertices": d_verts}

    def step_fn(p):
        verts = decode(p)
        value, d_verts = loss.shape_pretrain_loss(verts, target)
        if normal_weight > 0:
            nval, ngrad = _normal_term(verts, np.asarray(triangles), target_units)
            value += normal_weight * nval
            d_verts = d_verts + normal_weight * ngrad
        return value, to_block(d_verts, p)

    result = _run_loop(params, step_fn, config)
    result.params["vertices"] = decode(result.params)
    return result


def fit_scene(base_mesh, consts, target_image, cam0, *, free=("camera",),
              target_mask=None, texture0=None, shape_model=None,
              texture_model=None, shape_w0=None, tex_w0=None, vertices0=None,
              landmarks=None, background=0.0, config=None):
    """Inverse-render a target image by gradient descent through the renderer.

    free selects the parameter blocks to optimize: 'camera' (6-vector),
    'shape_w' (needs shape_model), 'tex_w' (needs texture_model), 'texture'
    (free texel grid), 'vertices' (free vertex array).  Fixed blocks keep
    their initial values.  The objective is the masked mean-absolute image
    error plus config.landmark_weight times the landmark distance when
    landmark targets are given.

    Returns a FitResult; params holds every block (fixed ones included) plus
    the assembled best 'camera' CameraParams object.
    """
    target_image = np.asarray(target_image, dtype=np.float64)
    h, w = target_image.shape[0], target_image.shape[1]
    if config is None:
        config = FitConfig(lr=0.0002, max_iters=300)
    free = tuple(free)
    known = {"camera", "shape_w", "tex_w", "texture", "vertices"}
    if not set(free) <= known:
        raise ValueError(f"unknown parameter blocks: {sorted(set(free) - known)}")
    if "shape_w" in free and shape_model is None:
        raise ValueError("'shape_w' needs shape_model")
    if "tex_w" in free and texture_model is None:
        raise ValueError("'tex_w' needs texture_model")
    if "shape_w" in free and "vertices" in free:
        raise ValueError("'shape_w' and 'vertices' both control the geometry")
    if "tex_w" in free and "texture" in free:
        raise ValueError("'tex_w' and 'texture' both control the texture")

    q = base_mesh.num_vertices
    tex_shape = None
    if texture0 is not None:
        tex0 = texture0.pixels if isinstance(texture0, render.Texture) else np.asarray(texture0, dtype=np.float64)
        tex_shape = tex0.shape
    elif texture_model is None:
        raise ValueError("need texture0 or texture_model to color the mesh")
    else:
        tex0 = None
    if texture_model is not None:
        tex_shape = (consts.rows, consts.cols, 3)

    params = {"camera": cam0.as_vector()}
    params["shape_w"] = (
        np.zeros(shape_model.latent_dim) if shape_w0 is None else np.array(shape_w0, dtype=np.float64)
    ) if shape_model is not None else None
    params["tex_w"] = (
        np.zeros(texture_model.latent_dim) if tex_w0 is None else np.array(tex_w0, dtype=np.float64)
    ) if texture_model is not None else None
    params["vertices"] = (
        np.array(vertices0, dtype=np.float64) if vertices0 is not None else base_mesh.vertices.copy()
    )
    params["texture"] = tex0
    params = {k: v for k, v in params.items() if v is not None}
    for name in free:
        if name not in params:
            raise ValueError(f"free block '{name}' has no initial value")

    def assemble(p):
        if "vertices" in free or shape_model is None:
            verts = p["vertices"]
        else:
            verts = model.linear_decode(shape_model, p["shape_w"]).reshape(q, 3)
        if "texture" in free or texture_model is None:
            tex = p["texture"]
        else:
            tex = model.linear_decode(texture_model, p["tex_w"]).reshape(tex_shape)
        mesh = geometry.Mesh(
            vertices=verts,
            triangles=base_mesh.triangles,
            landmark_indices=base_mesh.landmark_indices,
        )
        cam = geometry.CameraParams.from_vector(p["camera"])
        return mesh, tex, cam

    def step_fn(p):
        mesh, tex, cam = assemble(p)
        frag = render.rasterize(mesh, cam, w, h)
        img = render.shade_fragments(mesh, tex, consts, frag, background)
        value, d_pred = loss.rec_loss(img.pixels, target_image, target_mask)
        lm = None
        if landmarks is not None and config.landmark_weight > 0:
            lm = loss.landmark_loss(mesh, cam, landmarks)
            value += config.landmark_weight * lm[0]
        rg = render.render_backward(mesh, tex, cam, consts, frag, d_pred)
        d_cam = rg.d_camera
        d_verts = rg.d_vertices
        if lm is not None:
            d_cam = d_cam + config.landmark_weight * lm[1]
            d_verts = d_verts.copy()
            np.add.at(
                d_verts,
                mesh.landmark_indices,
                config.landmark_weight * lm[2],
            )
        grads = {}
        if "camera" in free:
            grads["camera"] = d_cam
        if "vertices" in free:
            grads["vertices"] = d_verts
        if "shape_w" in free:
            grads["shape_w"] = shape_model.basis.T @ d_verts.ravel()
        if "texture" in free:
            grads["texture"] = rg.d_texture
        if "tex_w" in free:
            grads["tex_w"] = texture_model.basis.T @ rg.d_texture.ravel()
        return value, grads

    result = _run_loop(params, step_fn, config)
    result.params["camera"] = geometry.CameraParams.from_vector(
        result.params["camera"]
    )
    return result


def train_decoder(decoder, inputs, targets, epochs=2000, lr=0.003,
                  lr_decay=1.0, lr_decay_every=0):
    """Fit an MlpDecoder's weights to (input, target) pairs under full-batch MSE.

    Mutates the decoder in place and returns the per-epoch loss trace.  Used
    to learn a nonlinear morphable model from a sample family.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    state = AdamState()
    params = {}
    for i, (w, b) in enumerate(decoder.layers):
        params[f"w{i}"] = w
        params[f"b{i}"] = b
    trace = []
    for epoch in range(epochs):
        out, cache = model.mlp_forward(decoder, inputs)
        diff = out - targets
        trace.append(float(np.mean(diff**2)))
        grads_list, _ = model.mlp_backward(decoder, cache, 2.0 * diff / diff.size)
        grads = {f"w{i}": g[0] for i, g in enumerate(grads_list)}
        grads.update({f"b{i}": g[1] for i, g in enumerate(grads_list)})
        rate = lr if lr_decay_every <= 0 else lr * lr_decay ** (epoch // lr_decay_every)
        adam_step(state, params, grads, rate)
        for i in range(len(decoder.layers)):
            decoder.layers[i] = (params[f"w{i}"], params[f"b{i}"])
    return trace


def build_pseudo_groundtruth(image, mesh, cam, consts, depth_tol=None):
    """Lift an image onto the texture grid for use as a pretraining target.

    Returns (Texture, valid_mask); see render.unwarp_image_to_uv for the
    validity rules.
    """
    pixels, valid = render.unwarp_image_to_uv(image, mesh, cam, consts, depth_tol)
    return render.Texture(pixels=pixels), valid
