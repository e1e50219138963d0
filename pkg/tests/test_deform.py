import numpy as np
import pytest

import gradcore as gc
from deform import (
    DeformationField,
    Grid2D,
    VelocityField,
    compose,
    exp_map,
    identity_grid,
    jacobian_det,
    load_field,
    random_smooth_velocity,
    save_field,
    spatial_grad_norm,
    warp,
)
from selftest import run_deformation_suite
from validators import GuardError, IntegrityError, ShapeError, ValidationError


def test_exp_of_zero_is_identity(f64):
    grid = Grid2D(16, 16)
    phi = exp_map(VelocityField(grid, gc.zeros((2, 16, 16))), steps=6)
    assert np.array_equal(phi.displacement.data, np.zeros((2, 16, 16)))


def test_warp_by_identity_returns_image(f64, rng):
    grid = Grid2D(12, 12)
    image = gc.tensor(rng.uniform(0, 1, (1, 12, 12)))
    out = warp(image, identity_grid(grid))
    assert np.array_equal(out.data, image.data)


def test_constant_velocity_translates(f64):
    grid = Grid2D(16, 16)
    shift = np.array([1.7, -2.3])
    v = VelocityField(grid, gc.tensor(np.broadcast_to(shift[:, None, None], (2, 16, 16))))
    u = exp_map(v, steps=6).displacement.data
    assert np.abs(u - shift[:, None, None]).max() <= 1e-3


def test_warp_by_integer_translation_is_a_roll(f64, rng):
    grid = Grid2D(10, 10)
    disp = np.zeros((2, 10, 10))
    disp[0] = 3.0
    image = rng.uniform(0, 1, (1, 10, 10))
    out = warp(gc.tensor(image), DeformationField(grid, gc.tensor(disp))).data
    np.testing.assert_allclose(out, np.roll(image, -3, axis=1), atol=1e-12)


def test_guard_rejects_large_velocity(f64):
    grid = Grid2D(8, 8)
    v = VelocityField(grid, gc.tensor(np.full((2, 8, 8), 30.0)))
    with pytest.raises(GuardError):
        exp_map(v, steps=6)


def test_steps_out_of_range(f64):
    grid = Grid2D(8, 8)
    with pytest.raises(ValidationError):
        exp_map(VelocityField(grid, gc.zeros((2, 8, 8))), steps=3)


def test_field_shape_checked():
    with pytest.raises(ShapeError):
        VelocityField(Grid2D(8, 8), gc.zeros((3, 8, 8)))
    with pytest.raises(ShapeError):
        Grid2D(2, 8)


def test_smooth_velocity_amplitude(f64, rng):
    grid = Grid2D(16, 16)
    v = random_smooth_velocity(grid, 2.0, rng)
    assert v.max_magnitude() == pytest.approx(2.0, rel=1e-12)
    batch = random_smooth_velocity(grid, 1.5, rng, batch=3)
    for b in range(3):
        mag = np.sqrt((batch.values.data[b] ** 2).sum(axis=0)).max()
        assert mag == pytest.approx(1.5, rel=1e-12), f"sample {b}: max |v| = {mag}"


def test_zero_amplitude_gives_zero_field(f64, rng):
    v = random_smooth_velocity(Grid2D(8, 8), 0.0, rng)
    assert not v.values.data.any()


def test_jacobian_of_identity_is_one(f64):
    det = jacobian_det(identity_grid(Grid2D(8, 8))).data
    assert np.array_equal(det, np.ones((8, 8)))


def test_inverse_consistency(f64, rng):
    grid = Grid2D(32, 32)
    for _ in range(5):
        v = random_smooth_velocity(grid, 2.0, rng)
        forward = exp_map(v, 6)
        backward = exp_map(VelocityField(grid, gc.scalar_mul(v.values, -1.0)), 6)
        residual = compose(forward, backward).displacement.data
        mean_err = np.sqrt((residual ** 2).sum(axis=0)).mean()
        assert mean_err <= 0.05, f"mean |u| after round trip = {mean_err:.4f} px"
        assert jacobian_det(forward).data.min() > 0


def test_compose_with_identity(f64, rng):
    grid = Grid2D(16, 16)
    phi = exp_map(random_smooth_velocity(grid, 1.0, rng), 6)
    left = compose(identity_grid(grid), phi).displacement.data
    right = compose(phi, identity_grid(grid)).displacement.data
    np.testing.assert_allclose(left, phi.displacement.data, atol=1e-12)
    np.testing.assert_allclose(right, phi.displacement.data, atol=1e-12)


def test_batched_exp_matches_single(f64, rng):
    grid = Grid2D(16, 16)
    batch = random_smooth_velocity(grid, 2.0, rng, batch=2)
    together = exp_map(batch, 6).displacement.data
    alone = exp_map(VelocityField(grid, gc.tensor(batch.values.data[1])), 6).displacement.data
    np.testing.assert_allclose(together[1], alone, atol=1e-12)


def test_smoothness_of_constant_field_is_zero(f64):
    v = VelocityField(Grid2D(8, 8), gc.tensor(np.full((2, 8, 8), 0.7)))
    assert spatial_grad_norm(v).item() == 0.0


def test_field_save_load(tmp_path, rng):
    values = gc.tensor(rng.standard_normal((2, 8, 12)))
    save_field(tmp_path / "v.f32t", values)
    loaded = load_field(tmp_path / "v.f32t")
    assert loaded.grid == Grid2D(8, 12)
    assert np.array_equal(loaded.values.data, values.data)


def test_field_sidecar_version_checked(tmp_path, rng):
    save_field(tmp_path / "v.f32t", gc.tensor(rng.standard_normal((2, 8, 8))))
    (tmp_path / "v.f32t.grid").write_text("CORLD-FIELD v9 8 8 periodic-pixel-centers\n")
    with pytest.raises(IntegrityError):
        load_field(tmp_path / "v.f32t")


def test_deformation_suite_passes():
    results = run_deformation_suite(trials=10, size=32, seed=0)
    failed = [(r.name, r.value) for r in results if not r.passed]
    assert not failed, f"deformation checks failed: {failed}"


def _constant_field(grid, rows, cols):
    disp = np.empty((2, grid.height, grid.width))
    disp[0], disp[1] = rows, cols
    return DeformationField(grid, gc.tensor(disp))


def test_translations_compose_additively(f64):
    grid = Grid2D(12, 12)
    phi = compose(_constant_field(grid, 0.3, 0.0), _constant_field(grid, 1.45, 0.0)).displacement.data
    np.testing.assert_allclose(phi[0], 1.75, atol=1e-6)
    np.testing.assert_allclose(phi[1], 0.0, atol=1e-6)


def test_compose_is_associative(f64, rng):
    grid = Grid2D(32, 32)
    a, b, c = (
        DeformationField(grid, random_smooth_velocity(grid, 0.5, rng, sigma=4.0).values) for _ in range(3)
    )
    left = compose(compose(a, b), c).displacement.data
    right = compose(a, compose(b, c)).displacement.data
    worst = np.abs(left - right).max()
    assert worst <= 0.02, f"associativity gap {worst:.4f} px"


def test_uniform_dilation_jacobian(f64):
    grid = Grid2D(9, 9)
    rows, cols = np.meshgrid(np.arange(9.0), np.arange(9.0), indexing="ij")
    det = jacobian_det(_constant_field(grid, 0.1 * (rows - 4), 0.1 * (cols - 4))).data
    np.testing.assert_allclose(det[1:-1, 1:-1], 1.21, atol=1e-2)


def test_smoothness_of_sawtooth_field(f64):
    h = w = 8
    values = np.zeros((2, h, w))
    values[0] = np.arange(h, dtype=float)[:, None]
    # row partials: 1 in the interior, (2 - h) / 2 on the two wrap-around rows
    row_sq = ((h - 2) * 1.0 + 2 * ((h - 2) / 2) ** 2) * w
    expected = row_sq / (4 * h * w)
    got = spatial_grad_norm(VelocityField(Grid2D(h, w), gc.tensor(values))).item()
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(0.75, rel=1e-12)


def test_warp_is_linear_in_the_image(f64, rng):
    grid = Grid2D(16, 16)
    phi = exp_map(random_smooth_velocity(grid, 2.0, rng), 6)
    first, second = rng.uniform(0, 1, (2, 1, 16, 16))
    mixed = warp(gc.tensor(0.7 * first - 1.3 * second), phi).data
    separate = 0.7 * warp(gc.tensor(first), phi).data - 1.3 * warp(gc.tensor(second), phi).data
    np.testing.assert_allclose(mixed, separate, atol=1e-6)


def test_delta_image_moves_by_integer_translation(f64):
    grid = Grid2D(10, 10)
    image = np.zeros((1, 10, 10))
    image[0, 2, 5] = 1.0
    out = warp(gc.tensor(image), _constant_field(grid, 3.0, -2.0)).data
    expected = np.zeros((1, 10, 10))
    expected[0, (2 - 3) % 10, 5 + 2] = 1.0
    np.testing.assert_allclose(out, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_exp_map_jacobian_stays_positive(f64, seed):
    grid = Grid2D(32, 32)
    v = random_smooth_velocity(grid, 2.0, np.random.default_rng(seed))
    det = jacobian_det(exp_map(v, 6)).data
    assert det.min() > 0, f"seed {seed}: min det {det.min():.4f}"
