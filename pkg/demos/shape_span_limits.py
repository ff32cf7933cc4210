"""Where a low-rank linear shape model stops helping.

The head family here is driven by 3 parameters through a nonlinear embedding
into 12 deformation modes.  A linear model with too few components cannot
span the family; letting the vertices move freely (the stand-in for a
nonlinear decoder) gets arbitrarily close.  Prints the held-out NME per
component count next to the free-vertex fit.
"""

import numpy as np

from morphfit import fit, loss, model, synth


def held_out_nme(linear_model, test_meshes):
    errs = []
    for gt in test_meshes:
        w = model.linear_encode(linear_model, gt.vertices.ravel())
        recon = model.linear_decode(linear_model, w).reshape(-1, 3)
        errs.append(loss.nme_shape(recon, gt))
    return float(np.mean(errs))


def main():
    rng = np.random.default_rng(5)
    train = [synth.make_head(synth.manifold_weights(rng.uniform(-1, 1, 3)))
             for _ in range(60)]
    test = [synth.make_head(synth.manifold_weights(rng.uniform(-1, 1, 3)))
            for _ in range(8)]
    data = np.stack([m.vertices.ravel() for m in train])

    print("components  held-out NME")
    for l in (2, 3, 5, 8, 12):
        print(f"{l:10d}  {held_out_nme(model.pca_fit(data, l), test):12.6f}")

    base = synth.base_head()
    errs = []
    for gt in test:
        result = fit.fit_shape(
            gt.vertices, vertices0=base.vertices,
            config=fit.FitConfig(lr=0.01, max_iters=400, lr_decay=0.5,
                                 lr_decay_every=100),
        )
        errs.append(loss.nme_shape(result.params["vertices"], gt))
    print(f"{'free':>10s}  {float(np.mean(errs)):12.6f}   "
          "(vertices optimized directly)")


if __name__ == "__main__":
    main()
