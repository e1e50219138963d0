"""
Two-phase training: CoRLD representation learning, then the boosted
classifier on fused features. Adam with decoupled weight decay and a
cosine-annealed learning rate stepped once per epoch.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence

import numpy as np

import gradcore as gc
from deform import Grid2D, VelocityField
from gradcore import Tensor
from logger import logger
from losses import clf_loss, csr_loss, shape_loss, weighted_total
from models import EpochRecord, TrainConfig, TrainReport
from monitoring import PerformanceMonitor
from storage import write_csv
from validators import DegenerateBatchError, GuardError, ValidationError

if TYPE_CHECKING:
    from data import Dataset
    from networks import BoostedClassifier, CorldNet

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
STOP_WINDOW = 5
EVAL_BATCH = 64


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> AdamState:
    """One Adam update in place; a missing gradient counts as zero"""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1 ** t)
        v_hat = v / (1 - BETA2 ** t)
        updated = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if weight_decay:
            updated = updated - lr * weight_decay * p.data
        p.data = np.ascontiguousarray(updated, dtype=p.dtype)
        state.m[name], state.v[name] = m, v
    return state


def cosine_lr(eta0: float, t: int, total: int) -> float:
    """eta0 * (1 + cos(pi t / T)) / 2"""
    if total <= 0:
        raise ValidationError(f"cosine schedule needs a positive horizon, got {total}")
    return eta0 * (1 + math.cos(math.pi * min(t, total) / total)) / 2


def zero_grad(params: Dict[str, Tensor]) -> None:
    """Drop accumulated gradients before the next tape"""
    for p in params.values():
        p.grad = None


def should_stop(history: Sequence[float], eps: float, window: int = STOP_WINDOW) -> bool:
    """|mean of the last window - mean of the window before it (shifted by one)| < eps"""
    if len(history) < window + 1:
        return False
    current = float(np.mean(history[-window:]))
    previous = float(np.mean(history[-window - 1:-1]))
    return abs(current - previous) < eps


# ---------------------------------------------------------------------------
# CoRLD phase
# ---------------------------------------------------------------------------

def _batches(idx: np.ndarray, size: int) -> List[np.ndarray]:
    return [idx[i:i + size] for i in range(0, len(idx), size)]


def _input_templates(net: "CorldNet", data: "Dataset", idx) -> Optional[Tensor]:
    # template-conditioned nets always see the global mean template, never a label-dependent one
    if net.arch.in_channels == 1:
        return None
    return data.batch_templates(idx, "single")


def _check_guard(net: "CorldNet", steps: int) -> None:
    """Reject nets whose velocity bound could break the exp_map guard"""
    worst = math.sqrt(2) * net.arch.velocity_bound
    if worst / 2 ** steps >= 0.5:
        raise GuardError(
            f"velocity bound {net.arch.velocity_bound} px can reach max|v|={worst:.3g}, "
            f"which violates the exp_map guard at steps={steps}"
        )


def corld_batch_terms(net: "CorldNet", data: "Dataset", idx, cfg: TrainConfig):
    """(total, shape, csr) CoRLD loss terms on one batch; csr is None when skipped"""
    from networks import corld_forward

    images = data.batch_images(idx)
    velocities, _, projected = corld_forward(net, images, _input_templates(net, data, idx))
    field_ = VelocityField(Grid2D.of(images), velocities)
    templates = data.batch_templates(idx, cfg.template_mode)
    shape_term = shape_loss(images, templates, field_, cfg.weights, cfg.steps)
    csr_term = None
    if cfg.contrastive_on and cfg.weights.beta > 0:
        try:
            csr_term = csr_loss(projected, data.labels[idx], cfg.weights.tau, cfg.candidate_set)
        except DegenerateBatchError as e:
            logger.warning(f"Skipping contrastive term for batch of {len(idx)}: {e}")
    return weighted_total(shape_term, csr_term, cfg.weights.beta), shape_term, csr_term


def evaluate_corld(net: "CorldNet", data: "Dataset", idx: np.ndarray, cfg: TrainConfig) -> float:
    """Sample-weighted mean CoRLD loss over idx without recording"""
    if len(idx) == 0:
        return float("nan")
    total, count = 0.0, 0
    with gc.no_tape():
        for batch in _batches(idx, max(cfg.batch_size, 2)):
            loss, _, _ = corld_batch_terms(net, data, batch, cfg)
            total += loss.item() * len(batch)
            count += len(batch)
    return total / count


def train_corld(net: "CorldNet", data: "Dataset", cfg: TrainConfig,
                monitor: Optional[PerformanceMonitor] = None) -> TrainReport:
    """Phase 1: optimize L_shape + beta * L_CSR; restores and saves the best-validation weights"""
    # Velocity bound vs exp_map guard
    _check_guard(net, cfg.steps)
    monitor = monitor or PerformanceMonitor()
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    state = AdamState()
    train_idx, val_idx = data.indices("train"), data.indices("val")
    if len(val_idx) == 0:
        logger.warning("Validation split is empty; selecting on training loss")
        val_idx = train_idx

    report = TrainReport(phase="corld")
    best, best_state, history = math.inf, net.state_dict(), []
    for epoch in range(cfg.epochs_corld):
        monitor.start_epoch()
        lr = cosine_lr(cfg.eta0, epoch, cfg.epochs_corld)
        sums = {"total": 0.0, "shape": 0.0, "csr": 0.0}
        for batch in _batches(rng.permutation(train_idx), cfg.batch_size):
            zero_grad(params)
            with gc.Tape() as tape:
                total, shape_term, csr_term = corld_batch_terms(net, data, batch, cfg)
            gc.backward(tape, total)
            adam_step(params, {k: p.grad for k, p in params.items()}, state, lr, cfg.weights.weight_decay)
            sums["total"] += total.item() * len(batch)
            sums["shape"] += shape_term.item() * len(batch)
            sums["csr"] += (csr_term.item() if csr_term is not None else 0.0) * len(batch)
        zero_grad(params)

        # Validation and best-state tracking
        means = {k: v / len(train_idx) for k, v in sums.items()}
        val_loss = evaluate_corld(net, data, val_idx, cfg)
        if val_loss < best:
            best, best_state = val_loss, net.state_dict()
        timing = monitor.end_epoch()
        report.epochs.append(EpochRecord(
            epoch=epoch, lr=lr, shape_loss=means["shape"], csr_loss=means["csr"], total=means["total"],
            val_metric=val_loss, seconds=timing["seconds"], rss_mb=timing["rss_mb"],
        ))
        report.best_val.append(best)
        history.append(means["total"])
        logger.info(
            f"[corld] epoch {epoch + 1}/{cfg.epochs_corld} lr={lr:.2e} shape={means['shape']:.5f} "
            f"csr={means['csr']:.5f} total={means['total']:.5f} val={val_loss:.5f} ({timing['seconds']:.2f}s)"
        )
        if should_stop(history, cfg.eps_corld):
            logger.info(f"[corld] converged after epoch {epoch + 1}")
            report.stopped_early = True
            break

    net.load_state_dict(best_state)
    if cfg.out_dir:
        from networks import save_corld

        path = Path(cfg.out_dir) / "corld.ckpt"
        save_corld(net, path)
        report.checkpoint_path = str(path)
    return report


# ---------------------------------------------------------------------------
# Classifier phase
# ---------------------------------------------------------------------------

def precompute_shape_features(net: "CorldNet", data: "Dataset", source: str) -> Tensor:
    """Frozen shape features of every sample, [N, D]"""
    from networks import shape_features

    rows = []
    for batch in _batches(np.arange(len(data.labels)), EVAL_BATCH):
        feats = shape_features(net, data.batch_images(batch), source, _input_templates(net, data, batch))
        rows.append(feats.data)
    return Tensor(np.concatenate(rows))


def predict_logits(clf: "BoostedClassifier", net: Optional["CorldNet"], data: "Dataset", idx: np.ndarray,
                   shape_feats: Optional[Tensor] = None, noise: Optional[Tensor] = None,
                   zero_shape: bool = False) -> np.ndarray:
    """Inference-mode logits for idx; noise, if given, is added and clamped before both encoders"""
    from data import apply_noise
    from networks import boosted_forward

    out = []
    with gc.no_tape():
        for batch in _batches(np.asarray(idx), EVAL_BATCH):
            images = data.batch_images(batch)
            feats = None
            if noise is not None:
                images = apply_noise(images, noise)
            elif shape_feats is not None:
                feats = Tensor(shape_feats.data[batch])
            templates = _input_templates(net, data, batch) if net is not None else None
            logits = boosted_forward(clf, net, images, training=False, shape_feats=feats,
                                     zero_shape=zero_shape, templates=templates)
            out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, clf.spec.num_classes))


def train_classifier(clf: "BoostedClassifier", net: Optional["CorldNet"], data: "Dataset", cfg: TrainConfig,
                     monitor: Optional[PerformanceMonitor] = None) -> TrainReport:
    """Phase 2: cross-entropy on fused features; keeps the best-validation-accuracy weights"""
    from networks import boosted_forward

    # Check every class is present in training
    train_idx, val_idx = data.indices("train"), data.indices("val")
    seen = set(data.labels[train_idx].tolist())
    for c in range(clf.spec.num_classes):
        if c not in seen:
            raise ValidationError(f"class {c} is absent from the training split")
    if clf.spec.use_shape and net is None:
        raise ValidationError("shape features requested without a CoRLD network")
    if len(val_idx) == 0:
        logger.warning("Validation split is empty; selecting on training accuracy")
        val_idx = train_idx

    monitor = monitor or PerformanceMonitor()
    rng = np.random.default_rng(cfg.seed)
    finetune = bool(cfg.finetune_shape and clf.spec.use_shape)
    # finetune trains both nets jointly; otherwise shape features are frozen and cached
    params = dict(clf.parameters())
    if finetune:
        params.update({f"corld.{k}": p for k, p in net.parameters().items()})
    elif net is not None:
        net.zero_grad()
    state = AdamState()
    feats = None
    if clf.spec.use_shape and not finetune:
        feats = precompute_shape_features(net, data, clf.spec.fuse_source)

    report = TrainReport(phase="clf")
    best, best_state, history = -math.inf, clf.state_dict(), []
    best_net_state = net.state_dict() if finetune else None
    for epoch in range(cfg.epochs_clf):
        monitor.start_epoch()
        lr = cosine_lr(cfg.eta0, epoch, cfg.epochs_clf)
        running = 0.0
        for batch in _batches(rng.permutation(train_idx), cfg.batch_size):
            zero_grad(params)
            images = data.batch_images(batch)
            batch_feats = Tensor(feats.data[batch]) if feats is not None else None
            templates = _input_templates(net, data, batch) if net is not None else None
            with gc.Tape() as tape:
                logits = boosted_forward(clf, net, images, training=True, shape_feats=batch_feats,
                                         finetune=finetune, templates=templates)
                loss = clf_loss(logits, data.labels[batch], cfg.weights.gamma)
            gc.backward(tape, loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state, lr, cfg.weights.weight_decay)
            running += loss.item() * len(batch)
        zero_grad(params)

        mean_loss = running / len(train_idx)
        # Select on validation accuracy
        val_feats = None if finetune else feats
        logits = predict_logits(clf, net, data, val_idx, shape_feats=val_feats)
        accuracy = float((logits.argmax(axis=1) == data.labels[val_idx]).mean())
        if accuracy > best:
            best, best_state = accuracy, clf.state_dict()
            if finetune:
                best_net_state = net.state_dict()
        timing = monitor.end_epoch()
        report.epochs.append(EpochRecord(
            epoch=epoch, lr=lr, clf_loss=mean_loss, total=mean_loss, val_metric=accuracy,
            seconds=timing["seconds"], rss_mb=timing["rss_mb"],
        ))
        report.best_val.append(best)
        history.append(mean_loss)
        logger.info(
            f"[clf:{clf.arm}] epoch {epoch + 1}/{cfg.epochs_clf} lr={lr:.2e} loss={mean_loss:.5f} "
            f"val_acc={accuracy:.4f} ({timing['seconds']:.2f}s)"
        )
        if should_stop(history, cfg.eps_clf):
            logger.info(f"[clf:{clf.arm}] converged after epoch {epoch + 1}")
            report.stopped_early = True
            break

    clf.load_state_dict(best_state)
    if finetune:
        net.load_state_dict(best_net_state)
    if cfg.out_dir:
        from networks import save_classifier

        path = Path(cfg.out_dir) / f"classifier_{clf.arm}.ckpt"
        save_classifier(clf, path)
        report.checkpoint_path = str(path)
    return report


def write_report_csv(report: TrainReport, path) -> None:
    header = ["epoch", "lr", "shape_loss", "csr_loss", "total", "clf_loss", "val_metric", "seconds"]
    rows = [
        [r.epoch, r.lr, r.shape_loss, r.csr_loss, r.total, r.clf_loss, r.val_metric, r.seconds]
        for r in report.epochs
    ]
    write_csv(path, header, rows, f"train-report phase={report.phase}")
