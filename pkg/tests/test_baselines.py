"""Perturbation baselines: determinism, idempotence, degenerate cases."""

import numpy as np
import pytest

from pointveil import baselines as B
from pointveil.data import FrameGrid
from pointveil.util import seeded_rng


def grid(seed=0, f=4, p=8):
    rng = seeded_rng(seed, "baseline-test")
    return FrameGrid(rng.normal(0, 0.5, size=(f, p, 3)).astype(np.float32), 1, 2)


def test_gaussian_sigma_zero_is_identity():
    g = grid(1)
    out = B.perturb(g, B.BaselineSpec("gaussian", {"sigma": 0.0}, seed=4))
    np.testing.assert_array_equal(out.coords, g.coords)


def test_rotation_full_turn_restores():
    import math
    g = grid(2)
    out = B.perturb(g, B.BaselineSpec("rotation", {"max_degrees": 0.0}, seed=5))
    np.testing.assert_allclose(out.coords, g.coords, atol=1e-9)
    full_turn = B.rotate_about_vertical(g.coords.astype(np.float64), 2 * math.pi)
    np.testing.assert_allclose(full_turn, g.coords, atol=1e-9)


def test_rotation_preserves_z_and_centroid():
    import math
    g = grid(3)
    rotated = B.rotate_about_vertical(g.coords.astype(np.float64), math.radians(15))
    np.testing.assert_allclose(rotated[..., 2], g.coords[..., 2], atol=1e-9)
    np.testing.assert_allclose(rotated.reshape(-1, 3).mean(axis=0),
                               g.coords.reshape(-1, 3).mean(axis=0), atol=1e-6)


def test_k_anonymity_identical_points_unchanged():
    coords = np.tile(np.float32([0.5, -0.25, 1.0]), (1, 4, 1))
    g = FrameGrid(coords, 0, 0)
    out = B.perturb(g, B.BaselineSpec("k_anonymity", {"group_size": 4}, seed=7))
    np.testing.assert_allclose(out.coords, g.coords, atol=1e-7)


def test_k_anonymity_distinct_point_bound():
    for p, k in ((8, 4), (9, 4), (5, 2)):
        g = grid(8, f=3, p=p)
        out = B.perturb(g, B.BaselineSpec("k_anonymity", {"group_size": k}, seed=1))
        for frame in out.coords:
            distinct = len(np.unique(frame.round(6), axis=0))
            assert distinct <= -(-p // k)


def test_quantization_idempotent():
    g = grid(9)
    spec = B.BaselineSpec("quantization", {"cell": 0.1}, seed=0)
    once = B.perturb(g, spec)
    twice = B.perturb(once, spec)
    np.testing.assert_array_equal(once.coords, twice.coords)


def test_every_method_deterministic_and_shape_preserving():
    g = grid(10)
    for method in B.METHODS:
        spec = B.BaselineSpec(method, seed=11)
        a = B.perturb(g, spec)
        b = B.perturb(g, spec)
        np.testing.assert_array_equal(a.coords, b.coords)
        assert a.coords.shape == g.coords.shape
        assert (a.subject, a.gesture) == (g.subject, g.gesture)


def test_methods_actually_perturb():
    g = grid(12)
    for method in B.METHODS:
        out = B.perturb(g, B.BaselineSpec(method, seed=13))
        assert not np.array_equal(out.coords, g.coords), method


def test_random_perturb_has_fixed_magnitude():
    g = grid(14)
    out = B.perturb(g, B.BaselineSpec("random_perturb", {"radius": 0.07}, seed=2))
    shifts = np.linalg.norm(
        out.coords.astype(np.float64) - g.coords.astype(np.float64), axis=-1)
    np.testing.assert_allclose(shifts, 0.07, atol=1e-6)


def test_scale_preserves_centroid():
    g = grid(15)
    out = B.perturb(g, B.BaselineSpec("scale", {"spread": 0.2}, seed=3))
    np.testing.assert_allclose(out.coords.reshape(-1, 3).mean(axis=0),
                               g.coords.reshape(-1, 3).mean(axis=0), atol=1e-5)


def test_feature_obfuscation_replaces_with_frame_centroid():
    g = grid(16, f=2, p=16)
    out = B.perturb(g, B.BaselineSpec("feature_obfuscation", {"rho": 0.5}, seed=4))
    for fi in range(2):
        centroid = g.coords[fi].mean(axis=0)
        changed = ~np.all(np.isclose(out.coords[fi], g.coords[fi], atol=1e-9), axis=1)
        assert changed.any()
        np.testing.assert_allclose(out.coords[fi][changed],
                                   np.tile(centroid, (changed.sum(), 1)), atol=1e-6)


def test_unknown_method_rejected():
    with pytest.raises(ValueError, match="unknown baseline method"):
        B.BaselineSpec("blur", seed=0)
    with pytest.raises(ValueError, match="unknown parameters"):
        B.BaselineSpec("gaussian", {"nope": 1.0}, seed=0)


def test_perturb_dataset_varies_noise_across_grids():
    grids = [grid(17), grid(17)]
    out = B.perturb_dataset(grids, B.BaselineSpec("gaussian", seed=5))
    assert not np.array_equal(out[0].coords, out[1].coords)
    again = B.perturb_dataset(grids, B.BaselineSpec("gaussian", seed=5))
    for a, b in zip(out, again):
        np.testing.assert_array_equal(a.coords, b.coords)
