"""Command-line entry points.

Subcommands: render, fit, gradcheck, pca, metrics, synth.  Scene inputs are
described by a JSON file; see load_scene for the schema.  All commands are
deterministic for a given seed; --threads is accepted for interface
compatibility but execution is serial and results never depend on it.

Exit codes: 0 success, 1 honest failure (fit diverged, gradcheck over
tolerance), 2 bad input or usage.
"""

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import fit, geometry, gradcheck, imageio, loss, model, render, synth


class CliError(Exception):
    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


def _require(cond, message):
    if not cond:
        raise CliError(message)


def _load_json(path):
    try:
        with open(path, "r") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})")


def _camera_from_dict(doc, where):
    fields = ("scale", "pitch", "yaw", "roll", "tx", "ty")
    unknown = set(doc) - set(fields)
    _require(not unknown, f"{where}: unknown camera fields {sorted(unknown)}")
    missing = [f for f in fields if f not in doc]
    _require(not missing, f"{where}: camera lacks fields {missing}")
    try:
        return geometry.CameraParams(**{f: float(doc[f]) for f in fields})
    except (TypeError, ValueError) as exc:
        raise CliError(f"{where}: bad camera ({exc})")


def load_scene(path):
    """Read a scene JSON file.

    Required fields: mesh (OBJ path), camera (object with scale, pitch, yaw,
    roll, tx, ty), width, height.  Optional: texture (image path),
    landmark_table (text path), landmarks_2d (CSV path), unwarp (object with
    a1, b1, a2, b2, rows, cols; default derived from the mesh and texture),
    background (number or [r, g, b]).  Relative paths resolve against the
    scene file's directory.
    """
    doc = _load_json(path)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    for fieldname in ("mesh", "camera", "width", "height"):
        _require(fieldname in doc, f"{path}: scene lacks required field '{fieldname}'")

    table = None
    if "landmark_table" in doc:
        try:
            table = geometry.load_landmark_table(resolve(doc["landmark_table"]))
        except (OSError, ValueError) as exc:
            raise CliError(f"{path}: landmark_table: {exc}")
    try:
        mesh = geometry.load_obj(resolve(doc["mesh"]), landmark_indices=table)
    except (OSError, ValueError) as exc:
        raise CliError(f"{path}: mesh: {exc}")

    cam = _camera_from_dict(doc["camera"], f"{path}: camera")
    width, height = int(doc["width"]), int(doc["height"])
    _require(width > 0 and height > 0, f"{path}: width/height must be positive")

    texture = None
    if "texture" in doc:
        try:
            texture = render.Texture(pixels=imageio.load_image(resolve(doc["texture"])))
        except (OSError, ValueError) as exc:
            raise CliError(f"{path}: texture: {exc}")

    if "unwarp" in doc:
        u = doc["unwarp"]
        need = ("a1", "b1", "a2", "b2", "rows", "cols")
        missing = [f for f in need if f not in u]
        _require(not missing, f"{path}: unwarp lacks fields {missing}")
        consts = geometry.UnwarpConstants(
            a1=float(u["a1"]), b1=float(u["b1"]), a2=float(u["a2"]),
            b2=float(u["b2"]), rows=int(u["rows"]), cols=int(u["cols"]),
        )
    else:
        rows, cols = (texture.rows, texture.cols) if texture is not None else (32, 32)
        consts = geometry.default_unwarp_constants(mesh, rows, cols)

    landmarks = None
    if "landmarks_2d" in doc:
        try:
            landmarks = loss.load_landmark_csv(resolve(doc["landmarks_2d"]))
        except (OSError, ValueError) as exc:
            raise CliError(f"{path}: landmarks_2d: {exc}")

    background = doc.get("background", 0.0)
    if isinstance(background, list):
        _require(len(background) == 3, f"{path}: background list must have 3 entries")
        background = np.array([float(b) for b in background])
    else:
        background = float(background)

    return {
        "mesh": mesh, "camera": cam, "width": width, "height": height,
        "texture": texture, "consts": consts, "landmarks": landmarks,
        "background": background,
    }


def cmd_render(args):
    scene = load_scene(args.scene)
    _require(scene["texture"] is not None, f"{args.scene}: render needs a texture")
    img, frag = render.render(
        scene["mesh"], scene["texture"], scene["camera"], scene["consts"],
        scene["width"], scene["height"], scene["background"],
    )
    imageio.save_image(args.out, img.pixels)
    if args.coverage:
        imageio.save_image(args.coverage, img.coverage.astype(np.float64))
    if args.fragments:
        render.save_fragments(args.fragments, frag)
    print(f"rendered {scene['width']}x{scene['height']} image to {args.out} "
          f"({int(img.coverage.sum())} covered pixels)")
    return 0


def cmd_fit(args):
    scene = load_scene(args.scene)
    try:
        target = imageio.load_image(args.target)
    except (OSError, ValueError) as exc:
        raise CliError(f"target: {exc}")
    _require(
        target.shape[:2] == (scene["height"], scene["width"]),
        f"target size {target.shape[1]}x{target.shape[0]} does not match scene "
        f"{scene['width']}x{scene['height']}",
    )
    config = fit.load_fit_config(args.config) if args.config else fit.FitConfig(
        lr=0.0002, max_iters=300
    )
    shape_model = model.load_linear(args.shape_model) if args.shape_model else None
    texture_model = model.load_linear(args.texture_model) if args.texture_model else None
    free = tuple(args.free) if args.free else ("camera",)
    mask = None
    if args.mask:
        mask = imageio.load_image(args.mask).mean(axis=2) > 0.5
    try:
        result = fit.fit_scene(
            scene["mesh"], scene["consts"], target, scene["camera"],
            free=free, target_mask=mask, texture0=scene["texture"],
            shape_model=shape_model, texture_model=texture_model,
            landmarks=scene["landmarks"], background=scene["background"],
            config=config,
        )
    except fit.DivergenceError as exc:
        raise CliError(f"fit diverged: {exc}", code=1)
    except ValueError as exc:
        raise CliError(f"fit setup: {exc}")

    cam = result.params["camera"]
    out = {
        "loss": result.loss,
        "step": result.step,
        "camera": {
            "scale": cam.scale, "pitch": cam.pitch, "yaw": cam.yaw,
            "roll": cam.roll, "tx": cam.tx, "ty": cam.ty,
        },
    }
    for key in ("shape_w", "tex_w"):
        if key in result.params:
            out[key] = np.asarray(result.params[key]).tolist()
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.trace:
        with open(args.trace, "w") as fh:
            json.dump({"loss": result.trace}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"fit finished: loss {result.loss:.6g} at step {result.step} "
          f"({len(result.trace) - 1} steps run), wrote {args.out}")
    return 0


def cmd_gradcheck(args):
    report = {
        "render": gradcheck.check_render_suite(n_scenes=args.scenes, seed=args.seed),
        "mlp": gradcheck.check_mlp_gradients(seed=args.seed),
        "landmark": gradcheck.check_landmark_gradients(seed=args.seed),
    }
    ok = (
        report["render"]["camera_max_rel"] < args.render_tol
        and report["render"]["vertex_max_rel"] < args.render_tol
        and report["render"]["texture_max_rel"] < args.render_tol
        and report["mlp"]["max_rel"] < args.exact_tol
        and report["landmark"]["max_rel"] < args.exact_tol
    )
    report["ok"] = bool(ok)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0 if ok else 1


def cmd_pca(args):
    if os.path.isdir(args.samples):
        if args.kind == "shape":
            paths = sorted(glob.glob(os.path.join(args.samples, "*.obj")))
            _require(paths, f"{args.samples}: no .obj files found")
            rows = [geometry.load_obj(p).vertices.ravel() for p in paths]
        else:
            paths = sorted(glob.glob(os.path.join(args.samples, "*_texture.png")))
            _require(paths, f"{args.samples}: no *_texture.png files found")
            rows = [imageio.load_image(p).ravel() for p in paths]
        data = np.stack(rows)
    elif args.samples.endswith(".npy"):
        try:
            data = np.load(args.samples)
        except (OSError, ValueError) as exc:
            raise CliError(f"{args.samples}: {exc}")
        _require(data.ndim == 2, f"{args.samples}: expected a 2-dim sample matrix")
    else:
        raise CliError(f"{args.samples}: pass a directory or a .npy matrix")
    try:
        lm = model.pca_fit(data, args.components)
    except model.RankDeficient as exc:
        raise CliError(f"pca: {exc}", code=1)
    model.save_linear(args.out, lm)
    print(json.dumps({
        "samples": int(data.shape[0]),
        "dimension": int(data.shape[1]),
        "components": int(lm.latent_dim),
        "singular_values": lm.singular_values.tolist(),
    }, indent=2, sort_keys=True))
    return 0


def cmd_metrics(args):
    if args.kind == "alignment":
        _require(args.pred and args.gt, "alignment needs --pred and --gt CSVs")
        pred = loss.load_landmark_csv(args.pred)
        gt = loss.load_landmark_csv(args.gt)
        value = loss.nme_alignment(pred.points, gt.points, gt.visible)
    else:
        _require(
            args.pred_mesh and args.gt_mesh and args.landmark_table,
            "shape needs --pred-mesh, --gt-mesh and --landmark-table",
        )
        table = geometry.load_landmark_table(args.landmark_table)
        pred = geometry.load_obj(args.pred_mesh)
        gt = geometry.load_obj(args.gt_mesh, landmark_indices=table)
        value = loss.nme_shape(pred.vertices, gt)
    print(json.dumps({"kind": args.kind, "nme": value}, indent=2, sort_keys=True))
    return 0


def cmd_synth(args):
    try:
        manifest = synth.emit_dataset(
            args.out, args.count, args.seed,
            width=args.width, height=args.height,
            tex_rows=args.tex_rows, tex_cols=args.tex_cols,
        )
    except (OSError, ValueError) as exc:
        raise CliError(f"synth: {exc}")
    print(f"wrote {manifest['count']} samples to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="morphfit",
        description="Differentiable face rendering and inverse rendering.",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="accepted for compatibility; execution is serial")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene JSON to an image")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--coverage", help="also write the coverage mask image")
    p.add_argument("--fragments", help="also write the raw fragment buffer")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="fit scene parameters to a target image")
    p.add_argument("--scene", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--free", action="append",
                   choices=["camera", "shape_w", "tex_w", "texture", "vertices"],
                   help="parameter block to optimize (repeatable); default camera")
    p.add_argument("--config", help="FitConfig JSON file")
    p.add_argument("--shape-model", help="linear shape model (.bin)")
    p.add_argument("--texture-model", help="linear texture model (.bin)")
    p.add_argument("--mask", help="image whose bright pixels select the scored area")
    p.add_argument("--trace", help="write the loss trace JSON here")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--render-tol", type=float, default=1e-4)
    p.add_argument("--exact-tol", type=float, default=1e-6)
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pca", help="fit a linear model to samples")
    p.add_argument("--samples", required=True,
                   help="directory of samples or a (k, n) .npy matrix")
    p.add_argument("--kind", choices=["shape", "texture"], default="shape")
    p.add_argument("--components", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("metrics", help="landmark / shape error metrics")
    p.add_argument("--kind", choices=["alignment", "shape"], default="alignment")
    p.add_argument("--pred", help="predicted landmark CSV")
    p.add_argument("--gt", help="ground-truth landmark CSV")
    p.add_argument("--pred-mesh", help="predicted mesh OBJ")
    p.add_argument("--gt-mesh", help="ground-truth mesh OBJ")
    p.add_argument("--landmark-table", help="landmark table for the gt mesh")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("synth", help="emit a reproducible synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--tex-rows", type=int, default=32)
    p.add_argument("--tex-cols", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
