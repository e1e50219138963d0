import numpy as np
import pytest

import gradcore as gc
from selftest import GRAD_TOLERANCE, gradient_cases
from validators import DomainError, ShapeError, ValidationError

with gc.float_mode("f64"):
    CASE_NAMES = sorted(gradient_cases(0))


@pytest.mark.parametrize("name", CASE_NAMES)
def test_gradient_matches_central_differences(name):
    with gc.float_mode("f64"):
        f, leaves = gradient_cases(0)[name]
        err = gc.grad_check(f, leaves, step=1e-6)
    assert err <= GRAD_TOLERANCE, f"{name}: relative error {err:.3e}"


def test_every_primitive_has_a_gradient_case():
    covered = set(CASE_NAMES)
    missing = [kind for kind in gc.PRIMITIVES if kind not in covered]
    assert not missing, f"primitives without a gradient case: {missing}"


def test_default_float_mode_is_f32():
    x = gc.tensor([1.0, 2.0])
    assert x.dtype == np.float32, f"Wrong datatype {x.dtype}"


def test_float_mode_context_restores_previous_mode():
    before = gc.get_float_mode()
    with gc.float_mode("f64"):
        assert gc.tensor([1.0]).dtype == np.float64
    assert gc.get_float_mode() == before


def test_unknown_float_mode_rejected():
    with pytest.raises(ValidationError):
        gc.set_float_mode("f16")


def test_mixed_float_modes_rejected():
    a = gc.tensor([1.0, 2.0], dtype=np.float32)
    b = gc.tensor([1.0, 2.0], dtype=np.float64)
    with pytest.raises(ValidationError, match="mixed float modes"):
        gc.add(a, b)


def test_elementwise_ops_do_not_broadcast():
    a = gc.tensor(np.ones((2, 3)))
    b = gc.tensor(np.ones((1, 3)))
    with pytest.raises(ShapeError):
        gc.mul(a, b)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        gc.matmul(gc.tensor(np.ones((2, 3))), gc.tensor(np.ones((2, 3))))


def test_log_outside_domain():
    with pytest.raises(DomainError):
        gc.log(gc.tensor([1.0, -0.5]))


def test_non_finite_tensor_rejected():
    with pytest.raises(DomainError):
        gc.tensor([1.0, np.nan])


def test_overflowing_primitive_rejected():
    x = gc.tensor([1.0, 100.0], requires_grad=True, dtype=np.float32)
    with gc.Tape() as tape, np.errstate(over="ignore"):
        with pytest.raises(DomainError, match="exp: non-finite"):
            gc.exp(x)
        with pytest.raises(DomainError):
            gc.scalar_mul(gc.tensor([3e38], dtype=np.float32), 10.0)
    assert len(tape) == 0


def test_backward_needs_scalar():
    x = gc.tensor(np.ones((2, 2)), requires_grad=True)
    with gc.Tape() as tape:
        y = gc.square(x)
    with pytest.raises(ValidationError, match="scalar"):
        gc.backward(tape, y)


def test_grad_check_step_range():
    x = gc.tensor([1.0], requires_grad=True)
    with pytest.raises(ValidationError):
        gc.grad_check(lambda: gc.sum(gc.square(x)), [x], step=1e-2)


def test_shared_leaf_accumulates(f64):
    x = gc.tensor([1.5, -2.0, 0.25], requires_grad=True)
    with gc.Tape() as tape:
        loss = gc.sum(gc.mul(x, x))
    gc.backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_tape_is_consumed_by_backward(f64):
    x = gc.tensor([1.0, 2.0], requires_grad=True)
    with gc.Tape() as tape:
        loss = gc.sum(gc.exp(x))
    assert len(tape) == 2
    gc.backward(tape, loss)
    assert len(tape) == 0


def test_tape_replay_is_bit_exact(rng):
    x = gc.tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
    w = gc.tensor(rng.standard_normal((3, 1, 3, 3)), requires_grad=True)
    d = gc.tensor(rng.uniform(-1.5, 1.5, (2, 2, 8, 8)))
    with gc.Tape() as tape:
        h = gc.leaky_relu(gc.conv2d(x, w, padding=1))
        s = gc.grid_sample(h, d)
        gc.mean(gc.square(s))
    assert len(tape) > 0
    assert tape.replay(), "replaying the tape changed an output"


def test_no_tape_records_nothing():
    x = gc.tensor([1.0, 2.0], requires_grad=True)
    with gc.Tape() as tape:
        with gc.no_tape():
            gc.sum(gc.square(x))
        assert len(tape) == 0
        gc.sum(gc.square(x))
    assert len(tape) == 2


def test_constants_are_not_recorded():
    x = gc.tensor([1.0, 2.0])
    with gc.Tape() as tape:
        gc.sum(gc.square(x))
    assert len(tape) == 0


def test_conv2d_output_size(rng):
    x = gc.tensor(rng.standard_normal((2, 3, 5, 5)))
    w = gc.tensor(rng.standard_normal((4, 3, 3, 3)))
    out = gc.conv2d(x, w, stride=2, padding=1)
    assert out.shape == (2, 4, 3, 3), f"Wrong shape {out.shape}"


def test_periodic_padding_wraps(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 0, 1] = 1.0  # picks the pixel one row up
    out = gc.conv2d(gc.tensor(x), gc.tensor(kernel), padding=1, pad_mode="periodic").data
    np.testing.assert_allclose(out, np.roll(x, 1, axis=2), atol=1e-6)


def test_transposed_conv_doubles_resolution(rng):
    x = gc.tensor(rng.standard_normal((2, 4, 3, 5)))
    w = gc.tensor(rng.standard_normal((4, 2, 4, 4)))
    out = gc.transposed_conv2d(x, w, stride=2, padding=1)
    assert out.shape == (2, 2, 6, 10), f"Wrong shape {out.shape}"


def test_grid_sample_integer_shift_is_a_roll(f64, rng):
    image = rng.standard_normal((1, 2, 6, 7))
    disp = np.zeros((1, 2, 6, 7))
    disp[:, 0] = 2.0
    disp[:, 1] = -3.0
    out = gc.grid_sample(gc.tensor(image), gc.tensor(disp)).data
    expected = np.roll(np.roll(image, -2, axis=2), 3, axis=3)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_log_softmax_mask_excludes_entries(f64):
    logits = gc.tensor([[0.0, 1.0, 100.0]])
    mask = np.array([[True, True, False]])
    out = gc.log_softmax(logits, axis=1, mask=mask).data
    expected = np.array([0.0, 1.0]) - np.log(1 + np.e)
    np.testing.assert_allclose(out[0, :2], expected, atol=1e-12)


def test_group_norm_normalizes_groups(f64, rng):
    x = gc.tensor(rng.standard_normal((2, 4, 5, 5)) * 3 + 1)
    out = gc.group_norm(x, 2).data.reshape(2, 2, -1)
    np.testing.assert_allclose(out.mean(axis=2), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=2), 1.0, atol=1e-3)


def test_l2_normalize_unit_rows(f64, rng):
    z = gc.l2_normalize(gc.tensor(rng.standard_normal((5, 3))), axis=1).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)
