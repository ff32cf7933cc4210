"""Inverse rendering, smallest useful case: recover a camera.

Renders a ground-truth head, perturbs the camera, and descends the image
difference through the renderer until the pose comes back.
"""

import numpy as np

from morphfit import fit, geometry, render, synth

NAMES = ["scale", "pitch", "yaw", "roll", "tx", "ty"]


def main():
    rng = np.random.default_rng(3)
    mesh = synth.make_head(synth.sample_linear_weights(rng))
    consts = geometry.default_unwarp_constants(synth.base_head(), 16, 16)
    texture = render.Texture(pixels=synth.smooth_texture(rng, 16, 16))
    cam_true = synth.head_camera(48, 48, rng)
    target, frag = render.render(mesh, texture, cam_true, consts, 48, 48)

    cam0 = geometry.CameraParams.from_vector(
        cam_true.as_vector() + np.array([1.5, 0.03, -0.05, 0.02, 1.2, -0.9]))
    result = fit.fit_scene(
        mesh, consts, target.pixels, cam0, free=("camera",),
        texture0=texture, target_mask=frag.coverage,
        config=fit.FitConfig(lr=0.01, max_iters=1200, lr_decay=0.5,
                             lr_decay_every=150, tol=1e-7),
    )

    got = result.params["camera"].as_vector()
    print(f"{'':8s}{'true':>12s}{'start':>12s}{'recovered':>14s}{'error':>12s}")
    for i, name in enumerate(NAMES):
        print(f"{name:8s}{cam_true.as_vector()[i]:12.5f}"
              f"{cam0.as_vector()[i]:12.5f}{got[i]:14.8f}"
              f"{abs(got[i] - cam_true.as_vector()[i]):12.2e}")
    print(f"\nloss {result.trace[0]:.4f} -> {result.loss:.2e} "
          f"in {len(result.trace) - 1} steps")


if __name__ == "__main__":
    main()
