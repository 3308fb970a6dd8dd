"""Inference, max-flux outcome taxonomy, panels, and test reporting.

"Flux" here is the raw sigmoid output of a predicted mask pixel on its
normalized (0, 1) scale. Classification of a sample's outcome looks only
at per-class maximum fluxes against two thresholds: detect_threshold
decides which classes count as predicted, noise_threshold bounds the
tolerable flux in wrong classes. Min-max scaling is used strictly for
rendering panels, never for classification.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContentError
from .nn import unet_forward, unet_forward_batch
from .train import bce_loss, metrics_from_counts, _count_batch, dataset_arrays

CATEGORIES = ("CORRECT", "CORRECT_WITH_RESIDUALS", "CONFUSED", "SPURIOUS",
              "MISSED")


@dataclass
class EvalConfig:
    detect_threshold: float = 0.5
    noise_threshold: float = 0.1
    histogram_bins: int = 20
    render_scale: int = 4

    def __post_init__(self):
        if not 0.0 < self.noise_threshold <= self.detect_threshold < 1.0:
            raise ValueError(
                f"need 0 < noise_threshold <= detect_threshold < 1, got "
                f"{self.noise_threshold} / {self.detect_threshold}")
        if self.histogram_bins < 2:
            raise ValueError(
                f"histogram_bins must be >= 2, got {self.histogram_bins}")
        if self.render_scale < 1:
            raise ValueError(
                f"render_scale must be >= 1, got {self.render_scale}")


@dataclass
class OutcomeRecord:
    index: int
    truth: tuple          # sorted class indices, size 1 or 2
    max_fluxes: list      # one peak value per class plane
    category: str


@dataclass
class EvalReport:
    n_samples: int
    metrics: object               # MetricsReport
    outcome_counts: dict          # category -> int
    outcome_fractions: dict       # category -> float
    success_rate: float
    histogram: list               # (bin_lo, bin_hi, count)
    records: list                 # OutcomeRecord per sample


def predict(params, config, image):
    """Per-class probability masks for one image (forward pass only)."""
    probs, _ = unet_forward(params, config, image)
    return probs


def mask_max_fluxes(masks):
    """Peak value of each class plane."""
    masks = np.asarray(masks)
    if masks.size == 0:
        raise ValueError("masks must be non-empty")
    return masks.reshape(masks.shape[0], -1).max(axis=1)


def classify_outcome(max_fluxes, truth_set, eval_config):
    """Five-way outcome from per-class peaks, by fixed rule precedence.

    D = classes whose peak >= detect_threshold; R = highest peak among
    classes outside the truth set. Rules in order: D == truth with R
    below noise_threshold is CORRECT; D == truth otherwise is
    CORRECT_WITH_RESIDUALS; right count but wrong membership is
    CONFUSED; D a strict superset of truth, or wrong count with a
    wrong-class peak >= detect_threshold, is SPURIOUS; anything else is
    MISSED.
    """
    fluxes = np.asarray(max_fluxes, dtype=float)
    truth = frozenset(int(c) for c in truth_set)
    if not truth:
        raise ValueError("truth_set must be non-empty")
    theta_det = eval_config.detect_threshold
    theta_noise = eval_config.noise_threshold
    detected = frozenset(
        int(c) for c in range(fluxes.size) if fluxes[c] >= theta_det)
    wrong = [fluxes[c] for c in range(fluxes.size) if c not in truth]
    residual = max(wrong) if wrong else 0.0

    if detected == truth and residual < theta_noise:
        return "CORRECT"
    if detected == truth:
        return "CORRECT_WITH_RESIDUALS"
    if len(detected) == len(truth) and detected != truth:
        return "CONFUSED"
    if detected > truth or (len(detected) != len(truth)
                            and residual >= theta_det):
        return "SPURIOUS"
    return "MISSED"


def minmax_scale(plane):
    """Affine rescale onto [0, 1]; constant input collapses to zeros."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if hi > lo:
        return (plane - lo) / (hi - lo)
    return np.zeros_like(plane)


def flux_histogram(values, bins):
    """Uniform bins over [0,1], right-open except the last (closed at 1)."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    values = np.asarray(list(values), dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i]))
            for i in range(bins)]


def _truth_indices(sample, class_to_index):
    truth = {class_to_index[sample.class_a]}
    if sample.class_b is not None:
        truth.add(class_to_index[sample.class_b])
    return tuple(sorted(truth))


def _class_index_map(dataset):
    if dataset.config is not None:
        return {c: i for i, c in enumerate(dataset.config.class_set)}
    # files carry no class list; fall back to identity (the default
    # class_set 0..n-1 stores ids equal to plane indices)
    n = dataset.n_classes()
    mapping = {c: c for c in range(n)}
    for s in dataset.samples:
        for c in (s.class_a, s.class_b):
            if c is not None and c not in mapping:
                raise ContentError(
                    f"class id {c} cannot be mapped to a mask plane "
                    f"(dataset has {n} planes and no class list)")
    return mapping


def test_report(params, unet_config, dataset, eval_config, batch_size=64):
    """Predict every sample; aggregate metrics, outcomes, and histogram."""
    if not dataset.samples:
        raise ValueError("dataset is empty")
    class_to_index = _class_index_map(dataset)
    images, masks = dataset_arrays(dataset)
    n = images.shape[0]

    tp = fp = tn = fn = 0
    loss_sum = 0.0
    records = []
    all_fluxes = []
    counts = {cat: 0 for cat in CATEGORIES}

    for start in range(0, n, batch_size):
        batch = images[start:start + batch_size]
        targets = masks[start:start + batch_size].transpose(1, 0, 2, 3)
        probs, _ = unet_forward_batch(params, unet_config, batch)
        loss, _ = bce_loss(probs, targets)
        loss_sum += loss * batch.shape[0]
        btp, bfp, btn, bfn = _count_batch(
            probs, targets, eval_config.detect_threshold)
        tp += btp
        fp += bfp
        tn += btn
        fn += bfn
        # probs is [n_classes, N, H, W]; peaks per (sample, class)
        peaks = probs.reshape(probs.shape[0], probs.shape[1], -1).max(axis=2)
        for j in range(batch.shape[0]):
            i = start + j
            fluxes = peaks[:, j]
            truth = _truth_indices(dataset.samples[i], class_to_index)
            category = classify_outcome(fluxes, truth, eval_config)
            counts[category] += 1
            all_fluxes.extend(float(v) for v in fluxes)
            records.append(OutcomeRecord(
                index=i, truth=truth,
                max_fluxes=[float(v) for v in fluxes], category=category))

    background = float(np.mean(~masks.any(axis=1)))
    metrics = metrics_from_counts(tp, fp, tn, fn, loss_sum / n,
                                  background_fraction=background)
    success = (counts["CORRECT"] + counts["CORRECT_WITH_RESIDUALS"]) / n
    fractions = {cat: counts[cat] / n for cat in CATEGORIES}
    histogram = flux_histogram(all_fluxes, eval_config.histogram_bins)
    return EvalReport(
        n_samples=n, metrics=metrics, outcome_counts=counts,
        outcome_fractions=fractions, success_rate=success,
        histogram=histogram, records=records)


def report_to_json(report, eval_config):
    """Serialize an EvalReport with a fixed key order."""
    doc = {
        "n_samples": report.n_samples,
        "metrics": {
            "accuracy": report.metrics.binary_accuracy,
            "precision": report.metrics.precision,
            "recall": report.metrics.recall,
            "tp": report.metrics.tp,
            "fp": report.metrics.fp,
            "tn": report.metrics.tn,
            "fn": report.metrics.fn,
            "loss": report.metrics.loss,
        },
        "outcomes": {cat: report.outcome_counts[cat] for cat in CATEGORIES},
        "success_rate": report.success_rate,
        "histogram": [list(row) for row in report.histogram],
        "samples": [
            {"index": r.index, "truth": list(r.truth),
             "max_fluxes": r.max_fluxes, "category": r.category}
            for r in report.records
        ],
        "config": {
            "detect_threshold": eval_config.detect_threshold,
            "noise_threshold": eval_config.noise_threshold,
            "histogram_bins": eval_config.histogram_bins,
            "render_scale": eval_config.render_scale,
        },
    }
    return json.dumps(doc, indent=2)


def histogram_to_csv(histogram, path_or_stream):
    """Histogram CSV: bin_lo,bin_hi,count."""
    close = False
    if isinstance(path_or_stream, str):
        stream = open(path_or_stream, "w", encoding="utf-8")
        close = True
    else:
        stream = path_or_stream
    try:
        stream.write("bin_lo,bin_hi,count\n")
        for lo, hi, count in histogram:
            stream.write(f"{lo!r},{hi!r},{count}\n")
    finally:
        if close:
            stream.close()


def _upscale(plane, scale):
    return np.repeat(np.repeat(plane, scale, axis=0), scale, axis=1)


def render_panel(sample, predicted, eval_config):
    """One display row: input tile, truth mask tiles, predicted tiles.

    Tiles are nearest-upscaled by render_scale and separated by 2-pixel
    black bars. Intensities are inverted for display (white = zero flux,
    black = peak flux); predicted planes are min-max scaled first.
    """
    scale = eval_config.render_scale
    tiles = [np.asarray(sample.input, dtype=np.float64)]
    for k in range(sample.masks.shape[0]):
        tiles.append(sample.masks[k].astype(np.float64))
    for k in range(predicted.shape[0]):
        tiles.append(minmax_scale(predicted[k]))

    h, w = tiles[0].shape
    sep = 2
    height = h * scale
    width = len(tiles) * w * scale + (len(tiles) - 1) * sep
    panel = np.zeros((height, width), dtype=np.uint8)
    x = 0
    for tile in tiles:
        display = np.floor((1.0 - np.clip(tile, 0.0, 1.0)) * 255.0 + 0.5)
        panel[:, x:x + w * scale] = _upscale(display.astype(np.uint8), scale)
        x += w * scale + sep
    return panel


def panel_filename(index, truth_classes, category):
    labels = "".join(chr(ord("A") + c) for c in truth_classes)
    return f"panel_{index}_{labels}_{category}.pgm"
