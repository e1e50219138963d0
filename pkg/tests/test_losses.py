import math

import numpy as np
import pytest

import gradcore as gc
from deform import Grid2D, VelocityField, random_smooth_velocity
from losses import (
    clf_loss,
    corld_terms,
    csr_loss,
    csr_loss_reference,
    registration_energy,
    shape_loss,
    ssd,
    weighted_total,
)
from models import LossWeights
from selftest import run_contrastive_suite
from validators import DegenerateBatchError, ShapeError, ValidationError


def test_csr_matches_double_loop(f64, rng):
    for candidate_set in ("all_others", "different_class_only"):
        for _ in range(10):
            labels = rng.integers(0, 3, 9)
            labels[:2] = labels[0]
            feats = rng.standard_normal((9, 6))
            tau = float(rng.uniform(0.1, 2.0))
            try:
                ref = csr_loss_reference(feats, labels, tau, candidate_set)
            except DegenerateBatchError:
                continue
            got = csr_loss(gc.tensor(feats), labels, tau, candidate_set).item()
            assert abs(got - ref) <= 1e-6, f"{candidate_set}: {got} vs {ref}"


def test_csr_closed_form_pair(f64):
    feats = gc.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    got = csr_loss(feats, [0, 0, 1], 1.0).item()
    assert got == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-6)


def test_csr_identical_features(f64):
    b = 5
    got = csr_loss(gc.tensor(np.ones((b, 4))), [2] * b, 0.3).item()
    assert got == pytest.approx(math.log(b - 1), abs=1e-6)


def test_csr_rescaling_invariance(f64, rng):
    feats = rng.standard_normal((8, 5))
    labels = [0, 0, 1, 1, 2, 2, 0, 1]
    a = csr_loss(gc.tensor(feats), labels, 0.5).item()
    b = csr_loss(gc.tensor(feats * 7.3), labels, 0.5).item()
    assert abs(a - b) <= 1e-6


def test_csr_permutation_invariance(f64, rng):
    feats = rng.standard_normal((8, 5))
    labels = np.array([0, 0, 1, 1, 2, 2, 0, 1])
    perm = rng.permutation(8)
    a = csr_loss(gc.tensor(feats), labels, 0.75).item()
    b = csr_loss(gc.tensor(feats[perm]), labels[perm], 0.75).item()
    assert abs(a - b) <= 1e-12


def test_csr_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        csr_loss(gc.tensor(np.eye(3)), [0, 1, 2], 0.5)


def test_csr_skips_anchors_without_positives(f64, rng):
    feats = rng.standard_normal((4, 3))
    full = csr_loss(gc.tensor(feats), [0, 0, 1, 2], 0.5).item()
    only_pair = csr_loss_reference(feats, [0, 0, 1, 2], 0.5)
    assert full == pytest.approx(only_pair, abs=1e-10)


def test_csr_rejects_bad_arguments():
    feats = gc.tensor(np.ones((4, 3)))
    with pytest.raises(ValidationError):
        csr_loss(feats, [0, 0, 1, 1], 0.0)
    with pytest.raises(ValidationError):
        csr_loss(feats, [0, 0, 1, 1], 0.5, candidate_set="everyone")
    with pytest.raises(ShapeError):
        csr_loss(feats, [0, 0, 1], 0.5)


def test_contrastive_suite_passes():
    failed = [(r.name, r.value) for r in run_contrastive_suite(batches=10) if not r.passed]
    assert not failed, f"contrastive checks failed: {failed}"


def test_ssd_is_mean_squared_difference(f64):
    a = gc.tensor([[0.0, 1.0], [2.0, 3.0]])
    b = gc.tensor([[1.0, 1.0], [0.0, 3.0]])
    assert ssd(a, b).item() == pytest.approx(5.0 / 4)


def test_registration_energy_vanishes_at_identity(f64, rng):
    S = gc.tensor(rng.uniform(0, 1, (1, 8, 8)))
    v = VelocityField(Grid2D(8, 8), gc.zeros((2, 8, 8)))
    assert registration_energy(S, S, v, LossWeights()).item() == 0.0


def test_shape_loss_zero_for_exact_templates(f64, rng):
    images = gc.tensor(rng.uniform(0, 1, (3, 1, 8, 8)))
    v = VelocityField(Grid2D(8, 8), gc.zeros((3, 2, 8, 8)))
    assert shape_loss(images, images, v, LossWeights()).item() == 0.0


def test_shape_loss_scales_with_sigma(f64, rng):
    images = gc.tensor(rng.uniform(0, 1, (2, 1, 8, 8)))
    templates = gc.tensor(rng.uniform(0, 1, (2, 1, 8, 8)))
    v = VelocityField(Grid2D(8, 8), gc.zeros((2, 2, 8, 8)))
    coarse = shape_loss(images, templates, v, LossWeights(sigma=1.0)).item()
    fine = shape_loss(images, templates, v, LossWeights(sigma=0.1)).item()
    assert fine == pytest.approx(100 * coarse, rel=1e-12)


def test_shape_loss_misalignment(f64):
    v = VelocityField(Grid2D(8, 8), gc.zeros((2, 2, 8, 8)))
    with pytest.raises(ValidationError, match="misalignment"):
        shape_loss(gc.zeros((2, 1, 8, 8)), gc.zeros((3, 1, 8, 8)), v, LossWeights())


def test_beta_zero_returns_shape_term_itself(f64, rng):
    images = gc.tensor(rng.uniform(0, 1, (4, 1, 8, 8)))
    templates = gc.tensor(rng.uniform(0, 1, (4, 1, 8, 8)))
    v = random_smooth_velocity(Grid2D(8, 8), 1.0, rng, batch=4)
    feats = gc.tensor(rng.standard_normal((4, 3)))
    total, shape_term, csr_term = corld_terms(
        images, templates, v, feats, [0, 0, 1, 1], LossWeights(beta=0.0)
    )
    assert total is shape_term
    assert csr_term is None
    assert weighted_total(shape_term, gc.tensor(1.0), 0.0) is shape_term


def test_total_combines_terms(f64, rng):
    images = gc.tensor(rng.uniform(0, 1, (4, 1, 8, 8)))
    templates = gc.tensor(rng.uniform(0, 1, (4, 1, 8, 8)))
    v = random_smooth_velocity(Grid2D(8, 8), 1.0, rng, batch=4)
    feats = gc.tensor(rng.standard_normal((4, 3)))
    total, shape_term, csr_term = corld_terms(
        images, templates, v, feats, [0, 0, 1, 1], LossWeights(beta=0.3)
    )
    assert total.item() == pytest.approx(shape_term.item() + 0.3 * csr_term.item(), rel=1e-12)


def test_clf_loss_matches_cross_entropy(f64, rng):
    logits = rng.standard_normal((5, 3))
    labels = [0, 2, 1, 1, 0]
    log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expected = -np.mean(log_p[np.arange(5), labels])
    assert clf_loss(gc.tensor(logits), labels, 1.0).item() == pytest.approx(expected, rel=1e-12)
    assert clf_loss(gc.tensor(logits), labels, 0.5).item() == pytest.approx(0.5 * expected, rel=1e-12)


def test_clf_loss_label_range():
    with pytest.raises(ValidationError):
        clf_loss(gc.tensor(np.zeros((2, 3))), [0, 3], 1.0)


def test_registration_energy_of_constant_offset(f64, rng):
    T = gc.tensor(rng.uniform(0, 1, (1, 8, 8)))
    S = gc.tensor(T.data + 0.1)
    v = VelocityField(Grid2D(8, 8), gc.zeros((2, 8, 8)))
    energy = registration_energy(S, T, v, LossWeights(sigma=0.01)).item()
    assert energy == pytest.approx(100.0, rel=1e-9)


def test_weighted_total_of_known_components(f64):
    total = weighted_total(gc.tensor(2.0), gc.tensor(0.5), 0.1)
    assert total.item() == pytest.approx(2.05, rel=1e-12)


def test_csr_loss_falls_as_positive_pair_aligns(f64):
    losses = []
    for angle in (1.2, 0.8, 0.4, 0.1):
        feats = gc.tensor([
            [1.0, 0.0, 0.0],
            [math.cos(angle), math.sin(angle), 0.0],
            [0.0, 0.0, 1.0],
        ])
        losses.append(csr_loss(feats, [0, 0, 1], tau=1.0).item())
    assert all(a > b for a, b in zip(losses, losses[1:])), f"loss not decreasing: {losses}"
