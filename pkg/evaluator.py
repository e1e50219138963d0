"""
Metrics and experiment harnesses: the template/contrastive ablation grid,
temperature, robustness and template-mode sweeps, and deformation
inspection. Harness arms may run in worker processes (capped by
CORLD_THREADS); rows are always merged in grid order.
"""

from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support, roc_auc_score

import gradcore as gc
from config import Config
from data import Dataset, make_universal_noise
from deform import Grid2D, VelocityField, exp_map, jacobian_det, warp
from logger import logger
from models import ArchSpec, ClassifierSpec, MetricsReport, SweepRow, TrainConfig
from monitoring import monitor_performance
from networks import BoostedClassifier, CorldNet, corld_forward, shape_feature_dim
from storage import write_csv, write_text
from training import predict_logits, train_classifier, train_corld
from validators import ShapeError, ValidationError

TAU_GRID = (0.1, 0.25, 0.5, 0.75, 1.0, 2.0, 5.0)
NOISE_GRID = (0.0, 0.01, 0.02, 0.03, 0.05)
TEMPLATE_MODE_GRID = ("single", "multi")
SWEEP_KINDS = ("tau", "robustness", "template_mode")
ROBUSTNESS_ARMS = ("image_only", "template_guided", "corld")
METRIC_COLUMNS = ["accuracy", "precision", "f1", "sensitivity", "specificity", "auc"]
ROW_HEADER = ["kind", "arm", "param"] + METRIC_COLUMNS + ["seconds_per_epoch"]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def macro_auc(scores: np.ndarray, labels: np.ndarray, classes: Sequence[int]) -> float:
    """One-vs-rest ROC AUC averaged over classes; ties share averaged ranks"""
    values = []
    for c in classes:
        positives = labels == c
        if positives.all() or not positives.any():
            continue
        values.append(roc_auc_score(positives.astype(int), scores[:, c]))
    if not values:
        logger.warning("AUC undefined with a single class present; reporting 0.5")
        return 0.5
    return float(np.mean(values))


def compute_metrics(logits, labels) -> MetricsReport:
    """Accuracy plus macro precision, F1, sensitivity, specificity and one-vs-rest AUC"""
    logits = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != len(labels) or len(labels) < 1:
        raise ShapeError(f"compute_metrics: logits {logits.shape} vs {len(labels)} labels")
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError(f"labels outside [0, {n_classes})")

    preds = logits.argmax(axis=1)
    everything = list(range(n_classes))
    cm = confusion_matrix(labels, preds, labels=everything)
    present = [c for c in everything if cm[c].sum() > 0]
    absent = sorted(set(everything) - set(present))
    if absent:
        logger.warning(f"Classes {absent} have no evaluation samples; excluded from macro averages")

    precision, recall, f1, _ = precision_recall_fscore_support(
        labels, preds, labels=present, average=None, zero_division=0
    )
    total = cm.sum()
    specificity = []
    for c in present:
        fp = cm[:, c].sum() - cm[c, c]
        tn = total - cm[c].sum() - fp
        specificity.append(tn / (tn + fp) if tn + fp else 0.0)

    return MetricsReport(
        accuracy=float(np.trace(cm) / total),
        precision=float(np.mean(precision)),
        f1=float(np.mean(f1)),
        sensitivity=float(np.mean(recall)),
        specificity=float(np.mean(specificity)),
        auc=macro_auc(softmax(logits, axis=1), labels, present),
        confusion=cm.tolist(),
        classes=everything,
    )


def evaluate_classifier(clf: BoostedClassifier, net: Optional[CorldNet], data: Dataset,
                        split: str = "test", noise=None) -> MetricsReport:
    """Metrics of clf on one split, optionally under a fixed input perturbation"""
    idx = data.indices(split)
    if len(idx) == 0:
        raise ValidationError(f"split {split!r} is empty")
    return compute_metrics(predict_logits(clf, net, data, idx, noise=noise), data.labels[idx])


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def write_rows_csv(path, rows: Sequence[SweepRow], note: str = "") -> None:
    body = [
        [r.kind, r.arm, r.param] + [getattr(r.metrics, m) for m in METRIC_COLUMNS] + [r.seconds_per_epoch]
        for r in rows
    ]
    write_csv(path, ROW_HEADER, body, note)


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def line_chart_svg(title: str, x_label: str, y_label: str, series: Dict[str, List[Tuple[float, float]]],
                   log_x: bool = False, width: int = 560, height: int = 380) -> str:
    """Static SVG line chart, one polyline per series"""
    left, right, top, bottom = 64, 150, 40, 56
    xs = [x for points in series.values() for x, _ in points]
    ys = [y for points in series.values() for _, y in points]
    tx = (lambda x: np.log10(x)) if log_x else (lambda x: x)
    x_lo, x_hi = tx(min(xs)), tx(max(xs))
    y_lo, y_hi = min(0.0, min(ys)), max(1.0, max(ys))
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0
    plot_w, plot_h = width - left - right, height - top - bottom

    def px(x):
        return left + (tx(x) - x_lo) / x_span * plot_w

    def py(y):
        return top + (1 - (y - y_lo) / y_span) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 14}" text-anchor="middle">{x_label}</text>',
        f'<text x="16" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + plot_h / 2:.1f})">{y_label}</text>',
    ]
    for x in sorted(set(xs)):
        parts.append(f'<line x1="{px(x):.1f}" y1="{top + plot_h}" x2="{px(x):.1f}" y2="{top + plot_h + 4}" stroke="black"/>')
        parts.append(f'<text x="{px(x):.1f}" y="{top + plot_h + 18}" text-anchor="middle">{x:g}</text>')
    for k in range(6):
        y = y_lo + k * y_span / 5
        parts.append(f'<line x1="{left - 4}" y1="{py(y):.1f}" x2="{left}" y2="{py(y):.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.2f}</text>')
    for i, (name, points) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in sorted(points))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in points:
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 16 + 18 * i
        parts.append(f'<line x1="{left + plot_w + 12}" y1="{ly}" x2="{left + plot_w + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + plot_w + 38}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def error_map_svg(title: str, maps: Sequence[np.ndarray], captions: Sequence[str], cell: int = 4,
                  columns: int = 4) -> str:
    """Grid of heat maps (white = 0, red = largest error in the panel)"""
    h, w = maps[0].shape
    peak = max(float(np.max(m)) for m in maps) or 1.0
    pad = 18
    rows = (len(maps) + columns - 1) // columns
    width = columns * (w * cell + pad) + pad
    height = rows * (h * cell + 2 * pad) + 2 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="10">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{title}</text>',
    ]
    for k, (m, caption) in enumerate(zip(maps, captions)):
        ox = pad + (k % columns) * (w * cell + pad)
        oy = 2 * pad + (k // columns) * (h * cell + 2 * pad)
        shade = np.clip(255 - np.round(255 * m / peak), 0, 255).astype(int)
        for i in range(h):
            for j in range(w):
                g = shade[i, j]
                if g == 255:
                    continue
                parts.append(
                    f'<rect x="{ox + j * cell}" y="{oy + i * cell}" width="{cell}" height="{cell}" '
                    f'fill="rgb(255,{g},{g})"/>'
                )
        parts.append(f'<rect x="{ox}" y="{oy}" width="{w * cell}" height="{h * cell}" fill="none" stroke="#888"/>')
        parts.append(f'<text x="{ox}" y="{oy + h * cell + 12}">{caption}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Grid execution
# ---------------------------------------------------------------------------

def _run_grid(func: Callable, tasks: List[tuple]) -> list:
    """Evaluate func over tasks, in worker processes when CORLD_THREADS > 1; results keep task order"""
    workers = min(Config.threads(), len(tasks))
    if workers <= 1:
        return [func(task) for task in tasks]
    logger.info(f"Running {len(tasks)} arms on {workers} worker processes")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, tasks))


def _arm_config(cfg: TrainConfig, **updates) -> TrainConfig:
    """Copy of cfg for one harness arm; arms never write checkpoints"""
    weights = updates.pop("weights", None)
    data = cfg.model_dump()
    data.update(updates)
    if weights is not None:
        data["weights"] = weights
    data["out_dir"] = None
    return TrainConfig.model_validate(data)


def _train_corld_arm(data: Dataset, cfg: TrainConfig) -> Tuple[CorldNet, float]:
    arch = ArchSpec(in_channels=2 if cfg.template_in_input else 1)
    net = CorldNet(arch, seed=cfg.seed)
    report = train_corld(net, data, cfg)
    return net, report.seconds_per_epoch


def _shape_only_classifier(data: Dataset, net: CorldNet, cfg: TrainConfig) -> BoostedClassifier:
    spec = ClassifierSpec(
        num_classes=data.num_classes, use_image=False, use_shape=True, fuse_source="latent",
        shape_dim=shape_feature_dim(net.arch, data.size, "latent"),
    )
    clf = BoostedClassifier(spec, seed=cfg.seed)
    train_classifier(clf, net, data, cfg)
    return clf


def _shape_pipeline(task) -> Tuple[MetricsReport, float]:
    """CoRLD training, then a shape-feature-only classifier, evaluated on the test split"""
    data, cfg, mode = task
    gc.set_float_mode(mode)
    net, seconds = _train_corld_arm(data, cfg)
    clf = _shape_only_classifier(data, net, cfg)
    return evaluate_classifier(clf, net, data, "test"), seconds


# ---------------------------------------------------------------------------
# Harnesses
# ---------------------------------------------------------------------------

def _yes_no(flag: bool) -> str:
    return "yes" if flag else "no"


@monitor_performance("ablation")
def run_ablation(data: Dataset, cfg: TrainConfig, out_dir=None) -> List[SweepRow]:
    """Template-in-input x contrastive grid with a shape-feature-only classifier"""
    grid = [(template, contrastive) for template in (True, False) for contrastive in (False, True)]
    mode = gc.get_float_mode()
    tasks = [
        (data, _arm_config(cfg, template_in_input=t, contrastive_on=c), mode)
        for t, c in grid
    ]
    results = _run_grid(_shape_pipeline, tasks)
    rows = []
    for (t, c), (metrics, seconds) in zip(grid, results):
        arm = f"template={_yes_no(t)},contrastive={_yes_no(c)}"
        rows.append(SweepRow(kind="ablation", arm=arm, param=arm, metrics=metrics, seconds_per_epoch=seconds))
        logger.info(f"[ablation] {arm}: accuracy={metrics.accuracy:.4f} ({seconds:.2f}s/epoch)")

    # Check for the expected winner
    best = max(rows, key=lambda r: r.metrics.accuracy)
    if best.arm != "template=no,contrastive=yes":
        logger.warning(f"Best ablation arm is {best.arm}, not the template-free contrastive arm")
    if out_dir:
        write_rows_csv(Path(out_dir) / "ablation.csv", rows, "ablation")
    return rows


def _robustness_arm(task) -> List[Tuple[float, MetricsReport, float]]:
    """Train one arm once, then score it at every noise scale"""
    data, cfg, arm, scales, noise_kind, mode = task
    gc.set_float_mode(mode)
    if arm == "image_only":
        # Image encoder only
        net = None
        spec = ClassifierSpec(num_classes=data.num_classes, use_image=True, use_shape=False)
        clf = BoostedClassifier(spec, seed=cfg.seed)
        seconds = train_classifier(clf, None, data, cfg).seconds_per_epoch
    else:
        arm_cfg = _arm_config(cfg, template_in_input=(arm == "template_guided"),
                              contrastive_on=(arm == "corld" and cfg.contrastive_on))
        net, seconds = _train_corld_arm(data, arm_cfg)
        spec = ClassifierSpec(
            num_classes=data.num_classes, use_image=True, use_shape=True, fuse_source=cfg.fuse_source,
            shape_dim=shape_feature_dim(net.arch, data.size, cfg.fuse_source),
        )
        clf = BoostedClassifier(spec, seed=cfg.seed)
        train_classifier(clf, net, data, arm_cfg)

    # Noise is crafted against this arm's own classifier
    results = []
    for scale in scales:
        noise = make_universal_noise(clf, net, data, scale, kind=noise_kind, seed=cfg.seed)
        results.append((scale, evaluate_classifier(clf, net, data, "test", noise=noise), seconds))
    return results


def _check_robustness(rows: List[SweepRow]) -> None:
    by_arm: Dict[str, List[Tuple[float, float]]] = {}
    for r in rows:
        by_arm.setdefault(r.arm, []).append((float(r.param), r.metrics.accuracy))
    for arm, points in by_arm.items():
        accs = [a for _, a in sorted(points)]
        if any(b > a for a, b in zip(accs, accs[1:])):
            logger.warning(f"[robustness] accuracy of {arm} is not non-increasing in noise scale: {accs}")


def _sweep_tau(data: Dataset, cfg: TrainConfig, grid) -> List[SweepRow]:
    mode = gc.get_float_mode()
    grid = list(grid or TAU_GRID)
    tasks = []
    for tau in grid:
        weights = cfg.weights.model_copy(update={"tau": tau}).model_dump()
        tasks.append((data, _arm_config(cfg, weights=weights, template_in_input=False, contrastive_on=True), mode))
    results = _run_grid(_shape_pipeline, tasks)
    return [
        SweepRow(kind="tau", arm="corld", param=f"{tau:g}", metrics=m, seconds_per_epoch=s)
        for tau, (m, s) in zip(grid, results)
    ]


def _sweep_template_mode(data: Dataset, cfg: TrainConfig, grid) -> List[SweepRow]:
    mode = gc.get_float_mode()
    grid = list(grid or TEMPLATE_MODE_GRID)
    tasks = [(data, _arm_config(cfg, template_mode=m, template_in_input=False), mode) for m in grid]
    results = _run_grid(_shape_pipeline, tasks)
    rows = [
        SweepRow(kind="template_mode", arm="corld", param=m, metrics=metrics, seconds_per_epoch=s)
        for m, (metrics, s) in zip(grid, results)
    ]
    # multi should not lose to single
    accuracy = {r.param: r.metrics.accuracy for r in rows}
    if "single" in accuracy and "multi" in accuracy and accuracy["multi"] < accuracy["single"]:
        logger.warning(
            f"[template_mode] multi-template accuracy {accuracy['multi']:.4f} "
            f"below single-template {accuracy['single']:.4f}"
        )
    return rows


def _sweep_robustness(data: Dataset, cfg: TrainConfig, grid, noise_kind: str) -> List[SweepRow]:
    mode = gc.get_float_mode()
    scales = list(grid or NOISE_GRID)
    tasks = [(data, cfg, arm, scales, noise_kind, mode) for arm in ROBUSTNESS_ARMS]
    rows = []
    for arm, results in zip(ROBUSTNESS_ARMS, _run_grid(_robustness_arm, tasks)):
        for scale, metrics, seconds in results:
            rows.append(SweepRow(kind="robustness", arm=arm, param=f"{scale:g}", metrics=metrics,
                                 seconds_per_epoch=seconds))
    _check_robustness(rows)
    return rows


@monitor_performance("sweep")
def run_sweeps(kind: str, data: Dataset, cfg: TrainConfig, out_dir=None, grid: Optional[Sequence] = None,
               noise_kind: str = "fgsm_universal") -> List[SweepRow]:
    """One CSV row per grid point plus a line chart per sweep"""
    if kind not in SWEEP_KINDS:
        raise ValidationError(f"unknown sweep kind {kind!r} (expected one of {', '.join(SWEEP_KINDS)})")
    logger.info(f"Starting {kind} sweep")
    if kind == "tau":
        rows = _sweep_tau(data, cfg, grid)
    elif kind == "template_mode":
        rows = _sweep_template_mode(data, cfg, grid)
    else:
        rows = _sweep_robustness(data, cfg, grid, noise_kind)

    if out_dir:
        out_dir = Path(out_dir)
        write_rows_csv(out_dir / f"sweep_{kind}.csv", rows, f"sweep={kind}")
        write_text(out_dir / f"sweep_{kind}.svg", sweep_chart(kind, rows))
    return rows


def sweep_chart(kind: str, rows: Sequence[SweepRow]) -> str:
    series: Dict[str, List[Tuple[float, float]]] = {}
    for r in rows:
        x = float(TEMPLATE_MODE_GRID.index(r.param) + 1) if kind == "template_mode" else float(r.param)
        series.setdefault(r.arm, []).append((x, r.metrics.accuracy))
    labels = {
        "tau": ("Temperature sweep", "tau", True),
        "robustness": ("Robustness to universal noise", "noise scale", False),
        "template_mode": ("Template mode (1 = single, 2 = multi)", "template mode", False),
    }
    title, x_label, log_x = labels[kind]
    return line_chart_svg(title, x_label, "test accuracy", series, log_x=log_x)


# ---------------------------------------------------------------------------
# Deformation inspection
# ---------------------------------------------------------------------------

def inspect_deformations(nets: Dict[str, CorldNet], data: Dataset, out_dir=None, split: str = "test",
                         max_samples: int = 8, steps: int = 6) -> List[dict]:
    """Per-sample registration quality of each net's predicted deformation.

    Rows carry the SSD between the target and its deformed class template, the
    mean velocity magnitude and the minimum Jacobian determinant.
    """
    idx = data.indices(split)[:max_samples]
    if len(idx) == 0:
        raise ValidationError(f"split {split!r} is empty")
    rows = []
    for arm, net in nets.items():
        images = data.batch_images(idx)
        templates = data.batch_templates(idx, "multi")
        input_templates = data.batch_templates(idx, "single") if net.arch.in_channels > 1 else None
        with gc.no_tape():
            velocities, _, _ = corld_forward(net, images, input_templates)
            v = VelocityField(Grid2D.of(images), velocities)
            phi = exp_map(v, steps)
            deformed = warp(templates, phi).data
        # Per-sample diagnostics
        det = jacobian_det(phi).data
        magnitude = np.sqrt((velocities.data ** 2).sum(axis=1))
        errors = np.abs(images.data - deformed)[:, 0]
        for k, i in enumerate(idx):
            rows.append({
                "arm": arm,
                "index": int(i),
                "label": int(data.labels[i]),
                "ssd": float(((images.data[k] - deformed[k]) ** 2).mean()),
                "mean_v": float(magnitude[k].mean()),
                "min_jacobian": float(det[k].min()),
            })
        if out_dir:
            captions = [f"#{int(i)} c{int(data.labels[i])}" for i in idx]
            write_text(Path(out_dir) / f"inspect_{arm}.svg",
                       error_map_svg(f"|I - T o phi| ({arm})", list(errors), captions))
        # Check for folding
        folded = sum(1 for r in rows if r["arm"] == arm and r["min_jacobian"] <= 0)
        if folded:
            logger.warning(f"[inspect] {arm}: {folded} samples with non-positive Jacobian determinant")

    if out_dir:
        header = ["arm", "index", "label", "ssd", "mean_v", "min_jacobian"]
        write_csv(Path(out_dir) / "inspect.csv", header, [[r[h] for h in header] for r in rows], "inspect")
    return rows
