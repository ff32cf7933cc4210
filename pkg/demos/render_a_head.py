"""Render the synthetic head family from a few viewpoints.

Builds a deformed head, paints it with a smooth texture, and renders it
frontal, turned, and tilted.  Outputs land in demos/out/.
"""

import os

import numpy as np

from morphfit import geometry, imageio, render, synth

OUT = os.path.join(os.path.dirname(__file__), "out")


def main():
    os.makedirs(OUT, exist_ok=True)
    rng = np.random.default_rng(7)
    mesh = synth.make_head(synth.sample_linear_weights(rng))
    consts = geometry.default_unwarp_constants(synth.base_head(), 48, 48)
    texture = render.Texture(pixels=synth.smooth_texture(rng, 48, 48))

    poses = {
        "frontal": geometry.CameraParams(scale=44.0, pitch=0.0, yaw=0.0,
                                         roll=0.0, tx=64.0, ty=64.0),
        "turned": geometry.CameraParams(scale=44.0, pitch=0.05, yaw=0.7,
                                        roll=0.0, tx=64.0, ty=64.0),
        "tilted": geometry.CameraParams(scale=44.0, pitch=-0.35, yaw=0.2,
                                        roll=0.25, tx=64.0, ty=64.0),
    }
    for name, cam in poses.items():
        img, frag = render.render(mesh, texture, cam, consts, 128, 128)
        path = os.path.join(OUT, f"head_{name}.png")
        imageio.save_png(path, img.pixels)
        covered = int(img.coverage.sum())
        print(f"{name:8s} -> {path}  ({covered} covered pixels, "
              f"{frag.coverage.mean():.0%} of frame)")

    # landmarks projected onto the frontal view, for eyeballing alignment
    proj, _ = geometry.project(mesh.vertices[mesh.landmark_indices],
                               poses["frontal"])
    img, _ = render.render(mesh, texture, poses["frontal"], consts, 128, 128)
    marked = img.pixels.copy()
    for x, y in proj:
        c, r = int(round(x)), int(round(y))
        if 0 <= r < 128 and 0 <= c < 128:
            marked[r, c] = [1.0, 0.0, 0.0]
    path = os.path.join(OUT, "head_landmarks.png")
    imageio.save_png(path, marked)
    print(f"landmarks -> {path}")


if __name__ == "__main__":
    main()
