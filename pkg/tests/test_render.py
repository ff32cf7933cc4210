"""Rasterizer, shading, backward-pass, and texel-pullback checks.

The production rasterizer is compared against the dense reference scan on
random triangle soups.  Barycentric weights are independently re-derived per
pixel with a 2x2 linear solve, and shading is re-implemented with the scalar
helpers so the vectorized path has a straight-line oracle.
"""

import numpy as np
import pytest

from morphfit import geometry, gradcheck, render, synth
from morphfit.geometry import CameraParams, Mesh, UnwarpConstants
from morphfit.render import EMPTY, FragmentBuffer, StaleFragments, Texture


def _frontal_camera(width, height, scale=None):
    return CameraParams(
        scale=scale or 0.33 * min(width, height),
        tx=width / 2.0,
        ty=height / 2.0,
    )


class TestRasterizerEquivalence:
    @pytest.mark.parametrize("seed", range(12))
    def test_matches_reference_on_random_soups(self, seed):
        rng = np.random.default_rng(seed)
        width = int(rng.integers(4, 40))
        height = int(rng.integers(4, 40))
        n_tris = int(rng.integers(1, 30))
        proj, depth, tris = synth.random_triangle_soup(rng, n_tris, width, height)
        fast = render.rasterize_projected(proj, depth, tris, width, height)
        slow = render.brute_force_rasterize(proj, depth, tris, width, height)
        np.testing.assert_array_equal(fast.triangle_ids, slow.triangle_ids)
        np.testing.assert_array_equal(fast.bary, slow.bary)
        np.testing.assert_array_equal(fast.depth, slow.depth)

    def test_weights_reconstruct_pixel_centers(self, rng):
        proj, depth, tris = synth.random_triangle_soup(rng, 10, 24, 24)
        frag = render.rasterize_projected(proj, depth, tris, 24, 24)
        rows, cols = np.nonzero(frag.coverage)
        assert rows.size > 0
        for r, c in list(zip(rows, cols))[:60]:
            lam = frag.bary[r, c]
            corners = proj[tris[frag.triangle_ids[r, c]]]
            # independent derivation: solve for the weights directly
            mat = np.stack([corners[1] - corners[0], corners[2] - corners[0]], axis=1)
            rhs = np.array([c + 0.5, r + 0.5]) - corners[0]
            l12 = np.linalg.solve(mat, rhs)
            want = np.array([1.0 - l12.sum(), l12[0], l12[1]])
            np.testing.assert_allclose(lam, want, atol=1e-9)
            assert lam.min() >= 0.0
            assert lam.sum() == pytest.approx(1.0, abs=1e-12)

    def test_depth_is_weight_blend_of_corner_depths(self, rng):
        proj, depth, tris = synth.random_triangle_soup(rng, 10, 24, 24)
        frag = render.rasterize_projected(proj, depth, tris, 24, 24)
        rows, cols = np.nonzero(frag.coverage)
        for r, c in list(zip(rows, cols))[:60]:
            lam = frag.bary[r, c]
            z = lam @ depth[tris[frag.triangle_ids[r, c]]]
            assert frag.depth[r, c] == pytest.approx(z, abs=1e-12)


class TestCoverageRules:
    def test_larger_depth_wins(self):
        proj = np.array(
            [[1.0, 1.0], [9.0, 1.0], [1.0, 9.0], [1.0, 1.0], [9.0, 1.0], [1.0, 9.0]]
        )
        depth = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
        tris = np.array([[0, 1, 2], [3, 4, 5]])
        frag = render.rasterize_projected(proj, depth, tris, 10, 10)
        assert frag.triangle_ids[2, 2] == 1
        assert frag.depth[2, 2] == pytest.approx(2.0)

    def test_exact_depth_tie_prefers_lower_id(self):
        proj = np.array(
            [[1.0, 1.0], [9.0, 1.0], [1.0, 9.0], [1.0, 1.0], [9.0, 1.0], [1.0, 9.0]]
        )
        depth = np.ones(6)
        # list the duplicate first so winning by id is distinguishable from
        # winning by input order
        tris = np.array([[3, 4, 5], [0, 1, 2]])
        frag = render.rasterize_projected(proj, depth, tris, 10, 10)
        covered = frag.coverage
        assert covered.any()
        assert (frag.triangle_ids[covered] == 0).all()

    def test_edge_through_pixel_centers_is_covered(self):
        # vertical edge passes exactly through the centers of column 0
        proj = np.array([[0.5, 0.5], [4.5, 0.5], [0.5, 4.5]])
        depth = np.ones(3)
        tris = np.array([[0, 1, 2]])
        frag = render.rasterize_projected(proj, depth, tris, 6, 6)
        assert frag.triangle_ids[0, 0] == 0  # pixel center on a vertex
        assert frag.triangle_ids[2, 0] == 0  # pixel center on the edge
        assert frag.triangle_ids[0, 2] == 0
        assert frag.triangle_ids[5, 5] == EMPTY

    def test_zero_area_triangles_cover_nothing(self):
        proj = np.array([[3.0, 3.0], [3.0, 3.0], [3.0, 3.0], [1.0, 1.0], [5.0, 5.0], [3.0, 3.0]])
        depth = np.full(6, 9.0)
        tris = np.array([[0, 1, 2], [3, 4, 5]])  # point and segment collapse
        frag = render.rasterize_projected(proj, depth, tris, 8, 8)
        assert not frag.coverage.any()

    def test_offscreen_triangle_covers_nothing(self):
        proj = np.array([[-30.0, -30.0], [-20.0, -30.0], [-30.0, -20.0]])
        frag = render.rasterize_projected(proj, np.ones(3), np.array([[0, 1, 2]]), 8, 8)
        assert not frag.coverage.any()

    def test_empty_triangle_list(self):
        frag = render.rasterize_projected(
            np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3), dtype=int), 4, 4
        )
        assert not frag.coverage.any()
        assert (frag.depth == -np.inf).all()


class TestBilinear:
    def test_exact_at_texel_centers(self, rng):
        tex = rng.uniform(0, 1, (5, 7, 3))
        uv = np.array([[2.0, 3.0], [0.0, 0.0], [4.0, 6.0]])
        got = render.sample_bilinear(tex, uv)
        np.testing.assert_allclose(got[0], tex[2, 3])
        np.testing.assert_allclose(got[1], tex[0, 0])
        np.testing.assert_allclose(got[2], tex[4, 6])

    def test_midpoint_averages_four_texels(self):
        tex = np.zeros((2, 2, 3))
        tex[0, 0] = 1.0
        tex[0, 1] = 0.5
        tex[1, 0] = 0.25
        tex[1, 1] = 0.25
        got = render.sample_bilinear(tex, np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(got[0], [0.5, 0.5, 0.5])

    def test_clamps_out_of_range(self, rng):
        tex = rng.uniform(0, 1, (4, 4, 3))
        got = render.sample_bilinear(tex, np.array([[-3.0, 1.0], [9.0, 9.0]]))
        np.testing.assert_allclose(got[0], tex[0, 1])
        np.testing.assert_allclose(got[1], tex[3, 3])

    def test_matches_manual_interpolation(self, rng):
        tex = rng.uniform(0, 1, (6, 5, 3))
        for _ in range(30):
            u = rng.uniform(0, 5)
            v = rng.uniform(0, 4)
            u0, v0 = int(min(np.floor(u), 4)), int(min(np.floor(v), 3))
            du, dv = u - u0, v - v0
            want = (
                tex[u0, v0] * (1 - du) * (1 - dv)
                + tex[u0, v0 + 1] * (1 - du) * dv
                + tex[u0 + 1, v0] * du * (1 - dv)
                + tex[u0 + 1, v0 + 1] * du * dv
            )
            got = render.sample_bilinear(tex, np.array([[u, v]]))
            np.testing.assert_allclose(got[0], want, atol=1e-12)


class TestShading:
    def test_matches_scalar_reimplementation(self, rng):
        mesh, texture, cam, consts = synth.random_scene(rng, n_tris=6)
        proj, depth = geometry.project(mesh, cam)
        frag = render.brute_force_rasterize(proj, depth, mesh.triangles, 32, 32)
        img = render.shade_fragments(mesh, texture, consts, frag, background=0.25)
        rows, cols = np.nonzero(frag.coverage)
        checked = 0
        for r, c in zip(rows, cols):
            tri = mesh.triangles[frag.triangle_ids[r, c]]
            color = np.zeros(3)
            for k in range(3):
                uv = geometry.unwarp_uv(mesh.vertices[tri[k]], consts)
                sample = render.sample_bilinear(
                    texture, np.array([[uv.u, uv.v]])
                )[0]
                color += frag.bary[r, c, k] * sample
            np.testing.assert_allclose(img.pixels[r, c], color, atol=1e-12)
            checked += 1
            if checked >= 50:
                break
        assert checked > 0
        np.testing.assert_allclose(img.pixels[~frag.coverage], 0.25)

    def test_color_background(self, rng):
        mesh, texture, cam, consts = synth.random_scene(rng, n_tris=3)
        img, frag = render.render(
            mesh, texture, cam, consts, 32, 32, background=(0.1, 0.2, 0.3)
        )
        assert (~frag.coverage).any()
        outside = img.pixels[~frag.coverage]
        np.testing.assert_allclose(
            outside, np.tile([0.1, 0.2, 0.3], (outside.shape[0], 1))
        )

    def test_stale_fragments_rejected(self, rng):
        mesh, texture, cam, consts = synth.random_scene(rng, n_tris=6)
        frag = render.rasterize(mesh, cam, 32, 32)
        small = Mesh(vertices=mesh.vertices, triangles=mesh.triangles[:1])
        with pytest.raises(StaleFragments):
            render.shade_fragments(small, texture, consts, frag)

    def test_rendered_coverage_matches_fragments(self, base_head, head_consts):
        cam = _frontal_camera(48, 48)
        tex = Texture(pixels=np.full((32, 32, 3), 0.6))
        img, frag = render.render(base_head, tex, cam, head_consts, 48, 48)
        np.testing.assert_array_equal(img.coverage, frag.coverage)
        assert img.coverage.sum() > 200


class TestBackward:
    def test_fd_agreement_on_one_scene(self, rng):
        mesh, texture, cam, consts = synth.random_scene(rng, n_tris=7)
        report = gradcheck.check_render_gradients(
            mesh, texture, cam, consts, 32, 32, rng
        )
        assert report["live_pixels"] > 0
        assert report["camera_max_rel"] < 1e-4
        assert report["vertex_max_rel"] < 1e-4
        assert report["texture_max_rel"] < 1e-4

    def test_upstream_shape_rejected(self, rng):
        mesh, texture, cam, consts = synth.random_scene(rng, n_tris=3)
        frag = render.rasterize(mesh, cam, 32, 32)
        with pytest.raises(ValueError):
            render.render_backward(
                mesh, texture, cam, consts, frag, np.zeros((8, 8, 3))
            )

    def test_empty_coverage_gives_zero_grads(self, rng):
        mesh, texture, cam, consts = synth.random_scene(rng, n_tris=3)
        far = CameraParams(scale=cam.scale, tx=-500.0, ty=-500.0)
        frag = render.rasterize(mesh, far, 16, 16)
        assert not frag.coverage.any()
        grads = render.render_backward(
            mesh, texture, far, consts, frag, np.ones((16, 16, 3))
        )
        assert not grads.d_texture.any()
        assert not grads.d_vertices.any()
        assert not grads.d_camera.any()

    def test_texture_gradient_nonzero_only_on_sampled_texels(self, rng):
        mesh, texture, cam, consts = synth.random_scene(rng, n_tris=6)
        frag = render.rasterize(mesh, cam, 32, 32)
        grads = render.render_backward(
            mesh, texture, cam, consts, frag, np.ones((32, 32, 3))
        )
        # support must be contained in the bilinear footprints of vertex samples
        uv = geometry.unwarp_vertices(mesh.vertices, consts)
        allowed = np.zeros(texture.pixels.shape[:2], dtype=bool)
        u0 = np.clip(np.floor(uv[:, 0]), 0, consts.rows - 2).astype(int)
        v0 = np.clip(np.floor(uv[:, 1]), 0, consts.cols - 2).astype(int)
        for du in (0, 1):
            for dv in (0, 1):
                allowed[u0 + du, v0 + dv] = True
        touched = grads.d_texture.any(axis=2)
        assert not (touched & ~allowed).any()


class TestTexelPullback:
    def test_round_trip_recovers_texture(self, base_head):
        consts = geometry.default_unwarp_constants(base_head, 32, 32)
        tex = synth.make_texture(
            synth.sample_texture_weights(np.random.default_rng(3)), 32, 32
        )
        cam = _frontal_camera(96, 96)
        img, _ = render.render(base_head, tex, cam, consts, 96, 96)
        got, valid = render.unwarp_image_to_uv(img.pixels, base_head, cam, consts)
        frac = valid.mean()
        assert frac > 0.3
        err = np.abs(got[valid] - tex[valid]).mean()
        assert err < 0.02

    def test_texels_behind_the_surface_marked_invalid(self, base_head):
        # a posed head self-occludes part of the far cheek
        consts = geometry.default_unwarp_constants(base_head, 32, 32)
        tex = np.full((32, 32, 3), 0.5)
        cam = CameraParams(scale=30.0, yaw=0.9, tx=48.0, ty=48.0)
        img, _ = render.render(base_head, tex, cam, consts, 96, 96)
        _, valid_posed = render.unwarp_image_to_uv(img.pixels, base_head, cam, consts)
        _, valid_front = render.unwarp_image_to_uv(
            img.pixels, base_head, _frontal_camera(96, 96), consts
        )
        assert valid_posed.sum() < valid_front.sum()

    def test_invalid_texels_left_black(self, base_head):
        consts = geometry.default_unwarp_constants(base_head, 16, 16)
        cam = _frontal_camera(48, 48)
        img = np.full((48, 48, 3), 0.7)
        got, valid = render.unwarp_image_to_uv(img, base_head, cam, consts)
        assert (got[~valid] == 0.0).all()


class TestFragmentFiles:
    def test_round_trip(self, tmp_path, rng):
        proj, depth, tris = synth.random_triangle_soup(rng, 6, 16, 16)
        frag = render.rasterize_projected(proj, depth, tris, 16, 16)
        path = tmp_path / "buf.frag"
        render.save_fragments(path, frag)
        back = render.load_fragments(path)
        np.testing.assert_array_equal(back.triangle_ids, frag.triangle_ids)
        np.testing.assert_array_equal(back.bary, frag.bary)
        np.testing.assert_array_equal(back.depth, frag.depth)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "buf.frag"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            render.load_fragments(path)

    def test_truncated_rejected(self, tmp_path, rng):
        proj, depth, tris = synth.random_triangle_soup(rng, 4, 8, 8)
        frag = render.rasterize_projected(proj, depth, tris, 8, 8)
        path = tmp_path / "buf.frag"
        render.save_fragments(path, frag)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            render.load_fragments(path)


class TestValidation:
    def test_texture_shape_rejected(self):
        with pytest.raises(ValueError):
            Texture(pixels=np.zeros((4, 4)))
        with pytest.raises(ValueError):
            Texture(pixels=np.zeros((1, 4, 3)))

    def test_fragment_field_mismatch_rejected(self):
        with pytest.raises(ValueError):
            FragmentBuffer(
                triangle_ids=np.full((4, 4), EMPTY),
                bary=np.zeros((4, 4, 3)),
                depth=np.zeros((5, 4)),
            )
