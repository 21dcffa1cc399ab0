"""Reconstruction-error anomaly scores, AUC, thresholding and reports.

Scores are novelty-positive: larger means more likely out-of-class. AUC is
therefore P(score(out-of-class) > score(in-class)), ties counted 1/2.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .dataset import OneClassSplit, stack_pixels
from .exceptions import DataError, ShapeError
from .losses import PyramidSpec, laplacian_pyramid_loss, mse_loss
from .trainer import TrainState, encode_images, load_checkpoint, read_metrics_csv

SCORE_METRICS = ("laplacian", "mse")


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    score: float
    label: int  # 1 = in-class
    class_id: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.score) or self.score < 0:
            raise ValueError(f"score for {self.id!r} must be finite and >= 0, got {self.score}")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with novelty (label 0) as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def false_positive_rate(self):
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else float("nan")

    @property
    def true_positive_rate(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")


@dataclass
class EvalReport:
    auc: float
    threshold: float
    confusion: ConfusionMatrix
    per_class_auc: dict = field(default_factory=dict)
    latent_auc: float | None = None
    records: list = field(default_factory=list)
    plots: dict = field(default_factory=dict)
    score_metric: str = "laplacian"

    def to_dict(self):
        return {
            "auc": self.auc,
            "threshold": self.threshold,
            "confusion": asdict(self.confusion),
            "per_class_auc": {str(k): v for k, v in self.per_class_auc.items()},
            "latent_auc": self.latent_auc,
            "score_metric": self.score_metric,
            "plots": dict(self.plots),
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            auc=d["auc"],
            threshold=d["threshold"],
            confusion=ConfusionMatrix(**d["confusion"]),
            per_class_auc={int(k): v for k, v in d["per_class_auc"].items()},
            latent_auc=d["latent_auc"],
            records=[ScoreRecord(**r) for r in d["records"]],
            plots=dict(d["plots"]),
            score_metric=d["score_metric"],
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


class UndefinedMetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# scores


@torch.no_grad()
def reconstruction_scores(model, images, metric="laplacian", pyramid_levels=3, batch_size=256):
    """Per-image reconstruction error of encode -> decode, in inference mode."""
    if metric not in SCORE_METRICS:
        raise ValueError(f"unknown score metric {metric!r}")
    images = torch.as_tensor(images, dtype=torch.float32)
    if tuple(images.shape[1:]) != model.cfg.image_shape:
        raise ShapeError(f"images are {tuple(images.shape[1:])}, model expects {model.cfg.image_shape}")
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = images[i : i + batch_size]
        x_hat = model.decoder(model.encoder(x).z)
        if metric == "laplacian":
            out.append(laplacian_pyramid_loss(x_hat, x, PyramidSpec(pyramid_levels), reduction="none"))
        else:
            out.append(mse_loss(x_hat, x, reduction="none"))
    model.train(was_training)
    return torch.cat(out).clamp_min(0.0).numpy().astype(np.float64)


def _as_state(checkpoint):
    return checkpoint if isinstance(checkpoint, TrainState) else load_checkpoint(checkpoint)


def anomaly_score(x, checkpoint, metric="laplacian"):
    """Score one ImageSample (or (C, H, W) array) against a checkpoint or TrainState."""
    state = _as_state(checkpoint)
    pixels = np.asarray(getattr(x, "pixels", x), dtype=np.float32)
    return float(reconstruction_scores(state.model, pixels[None], metric, state.config.pyramid_levels)[0])


# --------------------------------------------------------------------------
# metrics


def auc(records) -> float:
    """Rank-based AUC with novelty (label 0) as the positive class."""
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records])
    return auc_from_arrays(scores, labels == 0)


def auc_from_arrays(scores, positive):
    """Mann-Whitney AUC: P(score[positive] > score[negative]) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both in-class and out-of-class samples")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classify(records, threshold) -> ConfusionMatrix:
    """Flag novelty when ``score > threshold``."""
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    tp = fp = tn = fn = 0
    for r in records:
        flagged = r.score > threshold
        if r.label == 0:
            tp += flagged
            fn += not flagged
        else:
            fp += flagged
            tn += not flagged
    return ConfusionMatrix(tp, fp, tn, fn)


def latent_centroid_auc(train_latents, test_latents, labels):
    """AUC of distance-to-train-centroid in latent space (novelty-positive)."""
    centroid = np.asarray(train_latents, dtype=np.float64).mean(0)
    dist = np.linalg.norm(np.asarray(test_latents, dtype=np.float64) - centroid, axis=1)
    return auc_from_arrays(dist, np.asarray(labels) == 0)


# --------------------------------------------------------------------------
# plots and files


def _plot_loss_curves(history, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if history:
        epochs = [r["epoch"] for r in history]
        for key in ("L_lap", "L_lat", "L_global", "L_local", "L_prior", "total"):
            ax.plot(epochs, [r[key] for r in history], label=key)
        ax.legend(fontsize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_histogram(records, threshold, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    inl = [r.score for r in records if r.label == 1]
    out = [r.score for r in records if r.label == 0]
    bins = np.histogram_bin_edges(inl + out, bins=40)
    ax.hist(inl, bins=bins, alpha=0.6, label="in-class")
    ax.hist(out, bins=bins, alpha=0.6, label="out-of-class")
    ax.axvline(threshold, color="k", ls="--", lw=1, label="threshold")
    ax.set_xlabel("anomaly score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def latent_projection_2d(latents):
    """Fixed linear 2-D projection (top two principal axes, sign-normalized)."""
    Z = np.asarray(latents, dtype=np.float64)
    Zc = Z - Z.mean(0)
    _, _, vt = np.linalg.svd(Zc, full_matrices=False)
    axes = vt[:2]
    idx = np.argmax(np.abs(axes), axis=1)
    axes = axes * np.sign(axes[np.arange(len(axes)), idx])[:, None]
    proj = Zc @ axes.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def _plot_latents(latents, labels, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    proj = latent_projection_2d(latents)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(*proj[labels == 1].T, s=6, label="in-class")
    ax.scatter(*proj[labels == 0].T, s=6, label="out-of-class")
    ax.legend()
    ax.set_title("test latents (PCA projection)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_scores_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("id", "score", "label"))
        for r in records:
            writer.writerow((r.id, repr(r.score), r.label))
    return path


def evaluate(
    split: OneClassSplit,
    checkpoint,
    out_dir=None,
    plots=True,
    metric=None,
    threshold_percentile=95.0,
    metrics_csv=None,
) -> EvalReport:
    """Score the test set of ``split`` and summarize.

    The default threshold is the given percentile of training-sample scores.
    With ``out_dir`` set, writes ``report.json``, ``scores.csv`` and (if
    ``plots``) three PNG figures.
    """
    state = _as_state(checkpoint)
    metric = metric or "laplacian"
    model = state.model
    levels = state.config.pyramid_levels
    test_images = torch.from_numpy(stack_pixels(split.test_samples))
    labels = split.test_labels
    scores = reconstruction_scores(model, test_images, metric, levels)
    records = [
        ScoreRecord(s.id, float(v), int(y), s.label) for (s, y), v in zip(split.test, scores)
    ]
    train_images = torch.from_numpy(stack_pixels(split.train))
    train_scores = reconstruction_scores(model, train_images, metric, levels)
    threshold = float(np.percentile(train_scores, threshold_percentile))

    inlier = [r for r in records if r.label == 1]
    per_class = {}
    for cls in sorted({r.class_id for r in records if r.label == 0}):
        subset = inlier + [r for r in records if r.label == 0 and r.class_id == cls]
        per_class[int(cls)] = auc(subset)

    test_latents = encode_images(model, test_images).numpy()
    train_latents = encode_images(model, train_images).numpy()
    report = EvalReport(
        auc=auc(records),
        threshold=threshold,
        confusion=classify(records, threshold),
        per_class_auc=per_class,
        latent_auc=latent_centroid_auc(train_latents, test_latents, labels),
        records=records,
        score_metric=metric,
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            if plots:
                history = read_metrics_csv(metrics_csv) if metrics_csv else state.history
                report.plots = {
                    "loss_curves": str(out_dir / "loss_curves.png"),
                    "score_histogram": str(out_dir / "score_histogram.png"),
                    "latent_projection": str(out_dir / "latent_projection.png"),
                }
                _plot_loss_curves(history, report.plots["loss_curves"])
                _plot_histogram(records, threshold, report.plots["score_histogram"])
                _plot_latents(test_latents, labels, report.plots["latent_projection"])
            write_scores_csv(records, out_dir / "scores.csv")
            (out_dir / "report.json").write_text(report.to_json())
        except OSError as exc:
            raise DataError(f"cannot write evaluation outputs to {out_dir}: {exc}") from exc
    return report
