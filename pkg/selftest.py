"""
Property suites behind `selftest`: gradient fidelity of every primitive and
composite loss, diffeomorphism properties of the exponential map, and the
contrastive-loss oracles.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

import gradcore as gc
from deform import Grid2D, VelocityField, compose, exp_map, jacobian_det, random_smooth_velocity, warp
from gradcore import Tensor
from logger import logger
from losses import clf_loss, corld_loss, csr_loss, csr_loss_reference, registration_energy, shape_loss, ssd
from models import LossWeights
from validators import DegenerateBatchError

GRAD_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-6


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    limit: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value <= self.limit


def _leaf(rng: np.random.Generator, shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return gc.tensor(rng.uniform(low, high, shape), requires_grad=True)


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalarize a tensor output with a fixed random weighting"""
    return gc.sum(gc.mul(out, Tensor(weights.reshape(out.shape).astype(out.dtype))))


def gradient_cases(seed: int = 0) -> Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]]:
    """Scalar closures over float64 leaves; build inside float_mode('f64')"""
    rng = np.random.default_rng(seed)
    cases: Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]] = {}

    def unary(kind: str, fn, shape=(3, 4), low=-1.0, high=1.0):
        x = _leaf(rng, shape, low, high)
        probe = fn(x)
        w = rng.standard_normal(probe.shape)
        cases[kind] = (lambda: _projected(fn(x), w), [x])

    def binary(kind: str, fn, shape_a=(3, 4), shape_b=(3, 4)):
        a, b = _leaf(rng, shape_a), _leaf(rng, shape_b)
        w = rng.standard_normal(fn(a, b).shape)
        cases[kind] = (lambda: _projected(fn(a, b), w), [a, b])

    binary("add", gc.add)
    binary("sub", gc.sub)
    binary("mul", gc.mul)
    unary("scalar_mul", lambda x: gc.scalar_mul(x, -2.5))
    binary("matmul", gc.matmul, (3, 4), (4, 2))
    unary("transpose", gc.transpose)
    unary("reshape", lambda x: gc.reshape(x, (2, 6)))
    unary("flatten", gc.flatten, (2, 2, 3))
    unary("roll", lambda x: gc.roll(x, 1, axis=1))
    binary("add_bias", gc.add_bias, (2, 3, 2, 2), (3,))
    binary("concat", lambda a, b: gc.concat([a, b], axis=1), (2, 3), (2, 2))
    unary("leaky_relu", lambda x: gc.leaky_relu(x, 0.1))
    unary("tanh", gc.tanh)
    unary("exp", gc.exp)
    unary("square", gc.square)
    unary("sqrt", gc.sqrt, low=0.5, high=1.5)
    unary("log", gc.log, low=0.5, high=1.5)
    drop_rng = np.random.default_rng(seed)
    keep_probe = _leaf(rng, (3, 4))
    drop_w = rng.standard_normal((3, 4))
    keep = drop_rng.random((3, 4)) >= 0.3
    cases["dropout"] = (
        lambda: _projected(gc.apply_primitive("dropout", [keep_probe], {"p": 0.3, "keep": keep}), drop_w),
        [keep_probe],
    )
    unary("sum", lambda x: gc.sum(x, axis=1))
    unary("mean", lambda x: gc.mean(x, axis=0))
    binary("dot", lambda a, b: gc.dot(a, b, axis=1))
    unary("softmax", lambda x: gc.softmax(x, axis=1))
    mask = rng.random((3, 4)) > 0.3
    mask[:, 0] = True
    unary("log_softmax", lambda x: gc.log_softmax(x, axis=1, mask=mask))
    unary("logsumexp", lambda x: gc.logsumexp(x, axis=1, mask=mask))
    unary("l2_normalize", lambda x: gc.l2_normalize(x, axis=1))

    gx, gw, gb = _leaf(rng, (2, 4, 3, 3)), _leaf(rng, (4,), 0.5, 1.5), _leaf(rng, (4,))
    gn_w = rng.standard_normal((2, 4, 3, 3))
    cases["group_norm"] = (lambda: _projected(gc.group_norm(gx, 2, gw, gb), gn_w), [gx, gw, gb])
    unary("avg_pool2d", lambda x: gc.avg_pool2d(x, 2), (1, 2, 4, 4))
    unary("adaptive_avg_pool2d", lambda x: gc.adaptive_avg_pool2d(x, 1), (2, 2, 4, 4))

    cx, cw, cb = _leaf(rng, (2, 2, 5, 5)), _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (3,))
    c_w = rng.standard_normal((2, 3, 3, 3))
    cases["conv2d"] = (lambda: _projected(gc.conv2d(cx, cw, cb, stride=2, padding=1), c_w), [cx, cw, cb])
    px_, pw = _leaf(rng, (1, 2, 4, 4)), _leaf(rng, (2, 2, 3, 3))
    p_w = rng.standard_normal((1, 2, 4, 4))
    cases["conv2d_periodic"] = (
        lambda: _projected(gc.conv2d(px_, pw, padding=1, pad_mode="periodic"), p_w), [px_, pw]
    )
    tx, tw, tb = _leaf(rng, (1, 3, 2, 2)), _leaf(rng, (3, 2, 4, 4)), _leaf(rng, (2,))
    t_w = rng.standard_normal((1, 2, 4, 4))
    cases["transposed_conv2d"] = (
        lambda: _projected(gc.transposed_conv2d(tx, tw, tb, stride=2, padding=1), t_w), [tx, tw, tb]
    )
    img, disp = _leaf(rng, (2, 1, 4, 4)), _leaf(rng, (2, 2, 4, 4), -1.4, 1.4)
    s_w = rng.standard_normal((2, 1, 4, 4))
    cases["grid_sample"] = (lambda: _projected(gc.grid_sample(img, disp), s_w), [img, disp])

    # composite losses
    w = LossWeights(sigma=0.5, delta=0.3)
    grid = Grid2D(4, 4)
    S, T = _leaf(rng, (1, 4, 4), 0, 1), _leaf(rng, (1, 4, 4), 0, 1)
    v = _leaf(rng, (2, 4, 4), -0.6, 0.6)
    cases["ssd"] = (lambda: ssd(S, T), [S, T])
    cases["registration_energy"] = (
        lambda: registration_energy(S, T, VelocityField(grid, v), w, steps=4), [S, T, v]
    )
    images, templates = _leaf(rng, (2, 1, 4, 4), 0, 1), _leaf(rng, (2, 1, 4, 4), 0, 1)
    vb = _leaf(rng, (2, 2, 4, 4), -0.6, 0.6)
    cases["shape_loss"] = (
        lambda: shape_loss(images, templates, VelocityField(grid, vb), w, steps=4), [images, templates, vb]
    )
    feats = _leaf(rng, (6, 5))
    labels = [0, 0, 1, 1, 2, 2]
    cases["csr_loss"] = (lambda: csr_loss(feats, labels, 0.5), [feats])
    cases["csr_loss_different_class_only"] = (
        lambda: csr_loss(feats, labels, 0.5, "different_class_only"), [feats]
    )
    proj = _leaf(rng, (2, 5))
    cases["corld_loss"] = (
        lambda: corld_loss(images, templates, VelocityField(grid, vb), proj, [1, 1], w, steps=4),
        [images, templates, vb, proj],
    )
    logits = _leaf(rng, (4, 3))
    cases["clf_loss"] = (lambda: clf_loss(logits, [0, 2, 1, 2], 0.7), [logits])
    return cases


def run_gradient_suite(seed: int = 0) -> List[CheckResult]:
    results = []
    with gc.float_mode("f64"):
        for name, (f, leaves) in gradient_cases(seed).items():
            err = gc.grad_check(f, leaves, step=1e-6, seed=seed)
            results.append(CheckResult("gradient", name, err, GRAD_TOLERANCE))
    return results


def run_deformation_suite(trials: int = 100, size: int = 32, seed: int = 0, amplitude: float = 2.0,
                          steps: int = 6) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    grid = Grid2D(size, size)
    with gc.float_mode("f64"):
        zero = exp_map(VelocityField(grid, gc.zeros((2, size, size))), steps)
        identity_error = float(np.abs(zero.displacement.data).max())

        min_det, worst_inverse = math.inf, 0.0
        for _ in range(trials):
            v = random_smooth_velocity(grid, amplitude, rng)
            forward = exp_map(v, steps)
            backward = exp_map(VelocityField(grid, gc.scalar_mul(v.values, -1.0)), steps)
            min_det = min(min_det, float(jacobian_det(forward).data.min()))
            roundtrip = compose(forward, backward).displacement.data
            worst_inverse = max(worst_inverse, float(np.sqrt((roundtrip ** 2).sum(axis=0)).mean()))

        shift = np.array([1.7, -2.3])
        constant = gc.tensor(np.broadcast_to(shift[:, None, None], (2, size, size)))
        translated = exp_map(VelocityField(grid, constant), steps).displacement.data
        translation_error = float(np.abs(translated - shift[:, None, None]).max())

        image = gc.tensor(rng.uniform(0, 1, (1, size, size)))
        warp_error = float(np.abs(warp(image, zero).data - image.data).max())

    return [
        CheckResult("deformation", "exp_map(0) == identity", identity_error, 0.0),
        CheckResult("deformation", "warp(I, identity) == I", warp_error, 0.0),
        # a positive determinant everywhere is reported as a margin below 0
        CheckResult("deformation", "min jacobian determinant > 0", -min_det, -1e-12),
        CheckResult("deformation", "inverse consistency mean |u| (px)", worst_inverse, 0.05),
        CheckResult("deformation", "constant-field translation error (px)", translation_error, 1e-3),
    ]


def run_contrastive_suite(batches: int = 50, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_reference, worst_scale = 0.0, 0.0
    with gc.float_mode("f64"):
        for _ in range(batches):
            b = int(rng.integers(4, 17))
            labels = rng.integers(0, 3, b)
            labels[:2] = labels[0]
            feats = rng.standard_normal((b, 8))
            tau = float(rng.uniform(0.1, 2.0))
            for candidate_set in ("all_others", "different_class_only"):
                try:
                    ref = csr_loss_reference(feats, labels, tau, candidate_set)
                except DegenerateBatchError:
                    continue
                got = csr_loss(gc.tensor(feats), labels, tau, candidate_set).item()
                worst_reference = max(worst_reference, abs(got - ref))
            scaled = csr_loss(gc.tensor(feats * 3.7), labels, tau).item()
            worst_scale = max(worst_scale, abs(scaled - csr_loss(gc.tensor(feats), labels, tau).item()))

        pair = gc.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        pair_error = abs(csr_loss(pair, [0, 0, 1], 1.0).item() + math.log(math.e / (math.e + 1)))
        b = 6
        same = gc.tensor(np.ones((b, 3)))
        same_error = abs(csr_loss(same, [0] * b, 0.5).item() - math.log(b - 1))

    return [
        CheckResult("contrastive", "vectorized vs double loop", worst_reference, ORACLE_TOLERANCE),
        CheckResult("contrastive", "closed form -log(e/(e+1))", pair_error, ORACLE_TOLERANCE),
        CheckResult("contrastive", "closed form log(B-1)", same_error, ORACLE_TOLERANCE),
        CheckResult("contrastive", "feature rescaling invariance", worst_scale, ORACLE_TOLERANCE),
    ]


def run_all(seed: int = 0) -> List[CheckResult]:
    results = run_gradient_suite(seed) + run_deformation_suite(seed=seed) + run_contrastive_suite(seed=seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        logger.info(f"[selftest:{r.suite}] {r.name}: {r.value:.3e} (limit {r.limit:.1e}) {status}")
    failed = [r for r in results if not r.passed]
    if failed:
        logger.error(f"{len(failed)} of {len(results)} self-test checks failed")
    return results
