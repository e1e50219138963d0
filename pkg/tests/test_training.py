import math

import numpy as np
import pytest

import gradcore as gc
from losses import clf_loss
from models import ArchSpec, ClassifierSpec, LossWeights, TrainConfig
from networks import BoostedClassifier, CorldNet, classifier_head, shape_feature_dim
from storage import read_csv
from training import (
    _input_templates,
    AdamState,
    adam_step,
    cosine_lr,
    evaluate_corld,
    should_stop,
    train_classifier,
    train_corld,
    write_report_csv,
)
from validators import GuardError, ValidationError


def _reference_adam(x, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_first_adam_step_moves_by_lr(f64):
    for g in (3.0, -0.02, 250.0):
        x = gc.parameter([1.0])
        adam_step({"x": x}, {"x": np.array([g])}, AdamState(), lr=0.1)
        assert abs(abs(x.data[0] - 1.0) - 0.1) <= 1e-6, f"grad {g}: step {x.data[0] - 1.0}"


def test_adam_matches_reference_on_quadratic(f64):
    x = gc.parameter([2.0])
    state = AdamState()
    for _ in range(100):
        adam_step({"x": x}, {"x": 2 * (x.data - 0.5)}, state, lr=0.05)
    expected = _reference_adam(2.0, lambda z: 2 * (z - 0.5), 0.05, 100)
    assert x.data[0] == pytest.approx(expected, abs=1e-12)


def test_decoupled_weight_decay(f64):
    x = gc.parameter([4.0])
    adam_step({"x": x}, {"x": None}, AdamState(), lr=0.1, weight_decay=0.5)
    assert x.data[0] == pytest.approx(4.0 - 0.1 * 0.5 * 4.0, abs=1e-12)


def test_cosine_endpoints():
    assert cosine_lr(1e-3, 0, 20) == 1e-3
    assert cosine_lr(1e-3, 20, 20) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(1e-3, 10, 20) == pytest.approx(5e-4)
    with pytest.raises(ValidationError):
        cosine_lr(1e-3, 0, 0)


def test_should_stop_needs_two_windows():
    flat = [1.0] * 10
    for n in range(1, 6):
        assert not should_stop(flat[:n], eps=1e-4), f"stopped after {n} epochs"
    assert should_stop(flat[:6], eps=1e-4)
    assert not should_stop([5.0, 4.0, 3.0, 2.0, 1.0, 0.0], eps=1e-4)


def test_guard_checked_before_training(tiny_data, tiny_cfg):
    arch = ArchSpec(encoder_channels=[4, 8], decoder_channels=[8, 4], projection_dim=8, groups=2,
                    velocity_bound=30.0)
    with pytest.raises(GuardError):
        train_corld(CorldNet(arch), tiny_data, tiny_cfg)


def test_one_epoch_reduces_shape_loss(tiny_data, tiny_arch):
    cfg = TrainConfig(eta0=1e-3, epochs_corld=1, batch_size=4, contrastive_on=False,
                      weights=LossWeights(sigma=0.1, weight_decay=0.0))
    net = CorldNet(tiny_arch, seed=0)
    train_idx = tiny_data.indices("train")
    before = evaluate_corld(net, tiny_data, train_idx, cfg)
    report = train_corld(net, tiny_data, cfg)
    after = evaluate_corld(net, tiny_data, train_idx, cfg)
    assert len(report.epochs) == 1
    assert after < before, f"shape loss {before:.5f} -> {after:.5f}"


def test_training_is_deterministic(tiny_data, tiny_arch, tiny_cfg):
    cfg = tiny_cfg.model_copy(update={"epochs_corld": 2})
    reports = [train_corld(CorldNet(tiny_arch, seed=0), tiny_data, cfg) for _ in range(2)]
    a = [(r.total, r.shape_loss, r.csr_loss, r.val_metric) for r in reports[0].epochs]
    b = [(r.total, r.shape_loss, r.csr_loss, r.val_metric) for r in reports[1].epochs]
    assert a == b


def test_best_validation_is_monotone(tiny_data, tiny_arch, tiny_cfg):
    cfg = tiny_cfg.model_copy(update={"epochs_corld": 3})
    report = train_corld(CorldNet(tiny_arch), tiny_data, cfg)
    assert all(b <= a for a, b in zip(report.best_val, report.best_val[1:]))


def test_template_conditioned_training_runs(tiny_data, tiny_cfg):
    cfg = tiny_cfg.model_copy(update={"template_in_input": True})
    arch = ArchSpec(in_channels=2, encoder_channels=[4, 8], decoder_channels=[8, 4], projection_dim=8, groups=2)
    report = train_corld(CorldNet(arch), tiny_data, cfg)
    assert np.isfinite(report.epochs[0].total)


def test_conditioned_input_uses_mean_template_for_every_class(tiny_data, tiny_arch):
    idx = [int(np.flatnonzero(tiny_data.labels == c)[0]) for c in (0, 1, 0)]
    arch = tiny_arch.model_copy(update={"in_channels": 2})
    templates = _input_templates(CorldNet(arch), tiny_data, idx).data
    assert templates.shape == (3, 1, 8, 8)
    for row in templates:
        np.testing.assert_array_equal(row, tiny_data.mean_template.data[0])
    assert _input_templates(CorldNet(tiny_arch), tiny_data, idx) is None


def test_checkpoint_written(tmp_path, tiny_data, tiny_arch, tiny_cfg):
    cfg = tiny_cfg.model_copy(update={"out_dir": str(tmp_path)})
    report = train_corld(CorldNet(tiny_arch), tiny_data, cfg)
    assert report.checkpoint_path == str(tmp_path / "corld.ckpt")
    assert (tmp_path / "corld.ckpt").exists()
    write_report_csv(report, tmp_path / "report.csv")
    rows = read_csv(tmp_path / "report.csv")
    assert len(rows) == 1 and rows[0]["epoch"] == "0"


def _fused(net, data):
    spec = ClassifierSpec(num_classes=data.num_classes, shape_dim=shape_feature_dim(net.arch, data.size, "projected"))
    return BoostedClassifier(spec, seed=0)


def test_gamma_zero_leaves_classifier_unchanged(tiny_data, tiny_arch, tiny_cfg):
    net = CorldNet(tiny_arch)
    clf = _fused(net, tiny_data)
    before = clf.state_dict()
    cfg = tiny_cfg.model_copy(update={"weights": LossWeights(gamma=0.0, weight_decay=0.0), "epochs_clf": 2})
    train_classifier(clf, net, tiny_data, cfg)
    after = clf.state_dict()
    for name in before:
        assert np.array_equal(before[name], after[name]), name


def test_frozen_encoder_unchanged_by_classifier_training(tiny_data, tiny_arch, tiny_cfg):
    net = CorldNet(tiny_arch)
    before = net.state_dict()
    train_classifier(_fused(net, tiny_data), net, tiny_data, tiny_cfg)
    assert all(p.grad is None for p in net.parameters().values())
    for name, value in net.state_dict().items():
        assert np.array_equal(value, before[name]), name


def test_finetune_updates_encoder(tiny_data, tiny_arch, tiny_cfg):
    net = CorldNet(tiny_arch)
    before = net.state_dict()
    cfg = tiny_cfg.model_copy(update={"finetune_shape": True})
    train_classifier(_fused(net, tiny_data), net, tiny_data, cfg)
    changed = [n for n, v in net.state_dict().items() if not np.array_equal(v, before[n])]
    assert changed, "fine-tuning left the shape encoder untouched"


def test_missing_training_class(tiny_data, tiny_cfg):
    spec = ClassifierSpec(num_classes=3, use_shape=False)
    with pytest.raises(ValidationError, match="absent"):
        train_classifier(BoostedClassifier(spec), None, _relabel(tiny_data, 3), tiny_cfg)


def _relabel(data, classes):
    from data import Dataset

    templates = np.concatenate([data.templates.data, data.templates.data[:1]])[:classes]
    return Dataset(data.images, data.labels, gc.Tensor(templates), data.split)


def test_head_separates_toy_embedding(f64):
    rng = np.random.default_rng(0)
    feats = np.concatenate([rng.normal(-1.0, 0.3, (20, 4)), rng.normal(1.0, 0.3, (20, 4))])
    labels = np.array([0] * 20 + [1] * 20)
    spec = ClassifierSpec(num_classes=2, use_image=False, shape_dim=4, dropout=0.0)
    clf = BoostedClassifier(spec, seed=0)
    params = clf.parameters()
    state = AdamState()
    for epoch in range(50):
        for p in params.values():
            p.grad = None
        with gc.Tape() as tape:
            loss = clf_loss(classifier_head(clf, None, gc.tensor(feats), training=True), labels, 1.0)
        gc.backward(tape, loss)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, cosine_lr(1e-2, epoch, 50))
    logits = classifier_head(clf, None, gc.tensor(feats)).data
    assert (logits.argmax(axis=1) == labels).mean() == 1.0
