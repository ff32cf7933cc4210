"""Optimizer steps, fitting drivers, and the decoder trainer.

The scene fits here are small smoke-level versions; the full render-and-
recover precision runs live in the acceptance module.
"""

import numpy as np
import pytest

from morphfit import fit, geometry, loss, model, render, synth
from morphfit.fit import AdamState, DivergenceError, FitConfig


class TestAdam:
    def test_first_step_moves_by_signed_rate(self):
        # bias correction makes step 1 exactly -lr * g / (|g| + eps)
        lr = 0.01
        for g in (3.0, -0.2, 1e-8):
            params = {"x": np.array([1.0])}
            fit.adam_step(AdamState(), params, {"x": np.array([g])}, lr)
            want = 1.0 - lr * g / (abs(g) + 1e-8)
            assert params["x"][0] == pytest.approx(want, rel=1e-12)

    def test_stabilizer_sits_outside_the_root(self):
        # with g = eps the two placements differ by orders of magnitude:
        # outside gives lr/2, inside would give about lr * 3e-5
        params = {"x": np.array([0.0])}
        fit.adam_step(AdamState(), params, {"x": np.array([1e-8])}, lr=1.0)
        assert params["x"][0] == pytest.approx(-0.5, rel=1e-6)

    def test_quadratic_bowl_converges(self):
        x = np.array([0.0])
        state = AdamState()
        params = {"x": x}
        for _ in range(500):
            g = 2.0 * (params["x"] - 3.0)
            fit.adam_step(state, params, {"x": g}, lr=0.1)
        assert abs(params["x"][0] - 3.0) < 1e-3

    def test_state_tracks_blocks_independently(self):
        state = AdamState()
        params = {"a": np.zeros(2), "b": np.zeros(3)}
        fit.adam_step(state, params, {"a": np.ones(2), "b": -np.ones(3)}, lr=0.5)
        assert set(state.m) == {"a", "b"}
        assert (params["a"] < 0).all()
        assert (params["b"] > 0).all()


class TestGd:
    def test_step_is_linear_in_gradient(self):
        params = {"x": np.array([1.0, 2.0])}
        fit.gd_step(params, {"x": np.array([0.5, -1.0])}, lr=0.1)
        np.testing.assert_allclose(params["x"], [0.95, 2.1])


class TestFitConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            FitConfig(optimizer="sgd")
        with pytest.raises(ValueError):
            FitConfig(lr=0.0)
        with pytest.raises(ValueError):
            FitConfig(max_iters=-1)

    def test_rate_schedule(self):
        c = FitConfig(lr=1.0, lr_decay=0.5, lr_decay_every=100)
        assert c.rate_at(0) == 1.0
        assert c.rate_at(99) == 1.0
        assert c.rate_at(100) == 0.5
        assert c.rate_at(250) == 0.25

    def test_constant_rate_by_default(self):
        c = FitConfig(lr=0.3)
        assert c.rate_at(10_000) == 0.3

    def test_json_round_trip(self, tmp_path):
        c = FitConfig(max_iters=77, lr=0.02, lr_decay=0.9, lr_decay_every=25,
                      tol=1e-5, optimizer="gd", landmark_weight=0.4)
        path = tmp_path / "config.json"
        fit.save_fit_config(path, c)
        assert fit.load_fit_config(path) == c


def _texture_family_model(rng, rows=16, cols=16, components=8, draws=30):
    samples = np.stack(
        [
            synth.make_texture(synth.sample_texture_weights(rng), rows, cols).ravel()
            for _ in range(draws)
        ]
    )
    return model.pca_fit(samples, components)


class TestFitTexture:
    def test_latent_fit_reaches_in_span_target(self):
        rng = np.random.default_rng(2)
        tex_model = _texture_family_model(rng)
        target = synth.make_texture(synth.sample_texture_weights(rng), 16, 16)
        result = fit.fit_texture(
            target,
            texture_model=tex_model,
            config=FitConfig(lr=0.05, max_iters=800, lr_decay=0.5,
                             lr_decay_every=200, tol=1e-6),
        )
        assert result.loss < 1e-4
        assert np.abs(result.params["texture"] - target).max() < 1e-3

    def test_free_fit_decreases_loss_and_respects_mask(self):
        rng = np.random.default_rng(3)
        target = synth.smooth_texture(rng, 12, 12)
        valid = np.zeros((12, 12), dtype=bool)
        valid[2:10, 2:10] = True
        result = fit.fit_texture(
            target, valid, config=FitConfig(lr=0.01, max_iters=200)
        )
        assert result.loss < result.trace[0]
        assert result.loss == pytest.approx(min(result.trace))

    def test_nan_target_raises(self):
        target = np.full((4, 4, 3), np.nan)
        with pytest.raises(DivergenceError):
            fit.fit_texture(target, config=FitConfig(max_iters=5))


class TestNormalTerm:
    def test_zero_when_normals_agree(self, rng):
        mesh, _, _, _ = synth.random_scene(rng, n_tris=5)
        units = geometry.vertex_normals(mesh)
        value, grad = fit._normal_term(mesh.vertices, mesh.triangles, units)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_gradient_matches_fd(self, rng):
        mesh, _, _, _ = synth.random_scene(rng, n_tris=5)
        target = geometry.vertex_normals(mesh)
        verts = mesh.vertices + rng.normal(0, 0.05, mesh.vertices.shape)
        _, grad = fit._normal_term(verts, mesh.triangles, target)
        h = 1e-6
        for _ in range(12):
            i = int(rng.integers(verts.shape[0]))
            c = int(rng.integers(3))
            hi = verts.copy()
            lo = verts.copy()
            hi[i, c] += h
            lo[i, c] -= h
            fd = (
                fit._normal_term(hi, mesh.triangles, target)[0]
                - fit._normal_term(lo, mesh.triangles, target)[0]
            ) / (2 * h)
            assert grad[i, c] == pytest.approx(fd, abs=1e-5)


class TestFitShape:
    def _shape_family_model(self, rng, components=12, draws=40):
        samples = np.stack(
            [
                synth.make_head(synth.sample_linear_weights(rng)).vertices.ravel()
                for _ in range(draws)
            ]
        )
        return model.pca_fit(samples, components)

    def test_latent_fit_recovers_in_span_target(self):
        rng = np.random.default_rng(4)
        shape_model = self._shape_family_model(rng)
        target = synth.make_head(synth.sample_linear_weights(rng)).vertices
        result = fit.fit_shape(
            target,
            shape_model=shape_model,
            config=FitConfig(lr=0.01, max_iters=600, lr_decay=0.5,
                             lr_decay_every=150, tol=1e-7),
        )
        assert result.loss < 1e-4
        assert np.abs(result.params["vertices"] - target).max() < 1e-3

    def test_decoder_latent_fit_recovers_own_output(self):
        dec = model.MlpDecoder.create([3, 16, 30], seed=6)
        t_true = np.array([0.4, -0.3, 0.2])
        target, _ = model.mlp_forward(dec, t_true)
        result = fit.fit_shape(
            target.reshape(10, 3),
            decoder=dec,
            config=FitConfig(lr=0.02, max_iters=1000, lr_decay=0.5,
                             lr_decay_every=300, tol=1e-8),
        )
        assert result.loss < 1e-4
        np.testing.assert_allclose(result.params["latent"], t_true, atol=1e-2)

    def test_free_vertices_reach_target(self, rng):
        target = rng.normal(size=(20, 3))
        result = fit.fit_shape(
            target,
            vertices0=target + 0.1,
            config=FitConfig(lr=0.02, max_iters=400, lr_decay=0.5,
                             lr_decay_every=100, tol=1e-9),
        )
        assert result.loss < 1e-3

    def test_perfect_start_stops_immediately(self, rng):
        target = rng.normal(size=(8, 3))
        result = fit.fit_shape(target, vertices0=target.copy(),
                               config=FitConfig(tol=1e-12, max_iters=100))
        assert result.loss == 0.0
        assert len(result.trace) == 1

    def test_normal_weight_needs_triangles(self, rng):
        with pytest.raises(ValueError):
            fit.fit_shape(rng.normal(size=(5, 3)), normal_weight=0.5)

    def test_normal_weight_fit_converges(self, rng):
        mesh, _, _, _ = synth.random_scene(rng, n_tris=6)
        result = fit.fit_shape(
            mesh.vertices,
            triangles=mesh.triangles,
            normal_weight=0.1,
            vertices0=mesh.vertices + rng.normal(0, 0.02, mesh.vertices.shape),
            config=FitConfig(lr=0.005, max_iters=300),
        )
        assert result.loss < result.trace[0]

    def test_model_and_decoder_together_rejected(self, rng):
        lm = model.LinearModel(
            mean=np.zeros(15), basis=np.eye(15)[:, :3], singular_values=np.ones(3)
        )
        dec = model.MlpDecoder.create([3, 15], seed=0)
        with pytest.raises(ValueError):
            fit.fit_shape(rng.normal(size=(5, 3)), shape_model=lm, decoder=dec)

    def test_gd_divergence_detected(self):
        target = np.array([[1.0, 0.0, 0.0]])
        with pytest.raises(DivergenceError):
            fit.fit_shape(
                target,
                vertices0=np.zeros((1, 3)),
                config=FitConfig(optimizer="gd", lr=50.0, max_iters=10),
            )


class TestFitScene:
    def _scene(self, seed=0, size=40):
        rng = np.random.default_rng(seed)
        mesh = synth.make_head(synth.sample_linear_weights(rng))
        consts = geometry.default_unwarp_constants(synth.base_head(), 24, 24)
        tex = synth.make_texture(synth.sample_texture_weights(rng), 24, 24)
        cam = synth.head_camera(size, size, rng, max_angle=0.35)
        img, frag = render.render(mesh, tex, cam, consts, size, size)
        return mesh, consts, tex, cam, img, frag

    def test_camera_recovery_within_tolerance(self):
        mesh, consts, tex, cam, img, frag = self._scene(seed=1)
        start = geometry.CameraParams.from_vector(
            cam.as_vector() + np.array([0.3, 0.04, -0.05, 0.03, 0.8, -0.6])
        )
        result = fit.fit_scene(
            mesh, consts, img.pixels, start,
            texture0=tex,
            target_mask=frag.coverage,
            config=FitConfig(lr=0.01, max_iters=1200, lr_decay=0.5,
                             lr_decay_every=150, tol=1e-7),
        )
        got = result.params["camera"].as_vector()
        assert np.abs(got - cam.as_vector()).max() < 1e-3

    def test_landmark_term_steers_the_camera(self):
        mesh, consts, tex, cam, img, frag = self._scene(seed=2)
        proj, _ = geometry.project_points(mesh.vertices[mesh.landmark_indices], cam)
        lms = loss.LandmarkSet(points=proj.T)
        start = geometry.CameraParams.from_vector(
            cam.as_vector() + np.array([0.0, 0.0, 0.0, 0.0, 2.0, -1.5])
        )
        config = FitConfig(lr=0.01, max_iters=150, landmark_weight=0.002)
        result = fit.fit_scene(
            mesh, consts, img.pixels, start,
            texture0=tex, target_mask=frag.coverage, landmarks=lms, config=config,
        )
        start_err = np.abs(start.as_vector() - cam.as_vector()).max()
        end_err = np.abs(result.params["camera"].as_vector() - cam.as_vector()).max()
        assert end_err < start_err

    def test_unknown_block_rejected(self):
        mesh, consts, tex, cam, img, _ = self._scene(seed=3, size=16)
        with pytest.raises(ValueError):
            fit.fit_scene(mesh, consts, img.pixels, cam, free=("lighting",),
                          texture0=tex)

    def test_latent_blocks_need_models(self):
        mesh, consts, tex, cam, img, _ = self._scene(seed=3, size=16)
        with pytest.raises(ValueError):
            fit.fit_scene(mesh, consts, img.pixels, cam, free=("shape_w",),
                          texture0=tex)
        with pytest.raises(ValueError):
            fit.fit_scene(mesh, consts, img.pixels, cam, free=("tex_w",),
                          texture0=tex)

    def test_conflicting_blocks_rejected(self):
        mesh, consts, tex, cam, img, _ = self._scene(seed=3, size=16)
        lm = model.LinearModel(
            mean=np.zeros(mesh.num_vertices * 3),
            basis=np.eye(mesh.num_vertices * 3)[:, :2],
            singular_values=np.ones(2),
        )
        with pytest.raises(ValueError):
            fit.fit_scene(mesh, consts, img.pixels, cam,
                          free=("shape_w", "vertices"), shape_model=lm,
                          texture0=tex)

    def test_uncolored_mesh_rejected(self):
        mesh, consts, tex, cam, img, _ = self._scene(seed=3, size=16)
        with pytest.raises(ValueError):
            fit.fit_scene(mesh, consts, img.pixels, cam)

    def test_result_tracks_best_iterate(self):
        mesh, consts, tex, cam, img, frag = self._scene(seed=4, size=24)
        start = geometry.CameraParams.from_vector(
            cam.as_vector() + np.array([0.2, 0.02, 0.02, 0.0, 0.5, 0.5])
        )
        result = fit.fit_scene(
            mesh, consts, img.pixels, start, texture0=tex,
            target_mask=frag.coverage,
            config=FitConfig(lr=0.01, max_iters=40),
        )
        assert result.loss == pytest.approx(min(result.trace))
        assert result.trace[0] > result.loss


class TestTrainDecoder:
    def test_loss_decreases_and_fits_linear_map(self, rng):
        inputs = rng.normal(size=(40, 3))
        true_w = rng.normal(size=(3, 5))
        targets = inputs @ true_w + 0.3
        dec = model.MlpDecoder.create([3, 12, 5], seed=8)
        trace = fit.train_decoder(dec, inputs, targets, epochs=800, lr=0.01,
                                  lr_decay=0.5, lr_decay_every=300)
        assert trace[-1] < 0.01 * trace[0]
        out, _ = model.mlp_forward(dec, inputs)
        assert np.abs(out - targets).mean() < 0.1


class TestPseudoGroundtruth:
    def test_returns_texture_and_mask(self, base_head, head_consts):
        cam = synth.head_camera(64, 64)
        tex = np.full((32, 32, 3), 0.5)
        img, _ = render.render(base_head, tex, cam, head_consts, 64, 64)
        texture, valid = fit.build_pseudo_groundtruth(
            img.pixels, base_head, cam, head_consts
        )
        assert isinstance(texture, render.Texture)
        assert valid.shape == (32, 32)
        assert valid.any()
        # near-silhouette texels bilinearly mix a little background into
        # their image read, so only the mean is pinned tightly
        assert np.abs(texture.pixels[valid] - 0.5).mean() < 0.02
