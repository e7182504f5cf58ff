"""Experiment reports: adaptation runs, ablation grids, CSV emission.

Every CSV is byte-deterministic for a fixed invocation: floats are
written with repr (shortest round-trip form), rows come out in a fixed
order, and nothing time- or host-dependent goes into a file. Wall-clock
timings stay on the in-memory report objects only.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import numerics as num
from ..adaptation import AdaptConfig, AdaptReport, run_stream
from ..association import association_map
from ..errors import ConfigError

THREADS_ENV = "SSAM_THREADS"

# the (alpha, beta) grid the ablation sweep defaults to
DEFAULT_GRID = (0.1, 0.2, 0.5, 1.0, 2.0)


def class_average_heatmap(features: np.ndarray, labels: np.ndarray, emb) -> np.ndarray:
    """M x M matrix: row i holds the mean association (row-softmax of
    cosine) of class-i images against each category. A sharp diagonal
    means features sit near their own category."""
    assoc = num.value_of(association_map(features, emb).norm)
    m = emb.num_categories
    out = np.zeros((m, m))
    for j in range(m):
        mask = labels == j
        if mask.any():
            out[j] = assoc[mask].mean(axis=0)
    return out


def pca_projection(features: np.ndarray) -> np.ndarray:
    """Project to the top-2 principal components. Sign convention: the
    first loading of each component with magnitude above 1e-12 is made
    positive, so the projection is deterministic across BLAS builds."""
    x = np.asarray(features, dtype=np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2].copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return centered @ comps.T


def class_dispersion(features: np.ndarray, labels: np.ndarray, m: int) -> float:
    """Mean pairwise distance between class centroids."""
    cents = np.stack(
        [features[labels == j].mean(axis=0) for j in range(m) if (labels == j).any()]
    )
    k = cents.shape[0]
    if k < 2:
        return 0.0
    dists = [
        float(np.linalg.norm(cents[i] - cents[j]))
        for i in range(k)
        for j in range(i + 1, k)
    ]
    return float(np.mean(dists))


@dataclass
class ReportBundle:
    summary: dict
    loss_curve: list  # one dict per optimizer step
    heatmap_pre: np.ndarray
    heatmap_post: np.ndarray
    projection_pre: np.ndarray
    projection_post: np.ndarray
    labels: np.ndarray
    adapt_report: AdaptReport
    association_pre: np.ndarray = None  # per-image rows behind the heatmaps
    association_post: np.ndarray = None


def run_experiment(encoder, dataset, emb, cfg: AdaptConfig) -> ReportBundle:
    report = run_stream(encoder, dataset, emb, cfg)
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    m = emb.num_categories

    feats_pre = num.value_of(encoder.encode_batch(images, encoder.new_adapter()))
    feats_post = num.value_of(encoder.encode_batch(images, report.adapter))

    summary = {
        "encoder_family": encoder.family,
        "num_images": int(labels.size),
        "num_categories": int(m),
        "mode": cfg.mode,
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "steps_per_batch": cfg.steps_per_batch,
        "seed": cfg.seed,
        "pre_accuracy": report.pre_accuracy,
        "post_accuracy": report.post_accuracy,
        "online_accuracy": report.online_accuracy,
        "dispersion_pre": class_dispersion(feats_pre, labels, m),
        "dispersion_post": class_dispersion(feats_post, labels, m),
        "adapter_checksum": report.adapter_checksum,
    }
    curve = [
        {
            "step": i,
            "l_ent": b.l_ent,
            "l_pir": b.l_pir,
            "l_ca": b.l_ca,
            "total": b.total,
        }
        for i, b in enumerate(report.history)
    ]
    return ReportBundle(
        summary=summary,
        loss_curve=curve,
        heatmap_pre=class_average_heatmap(feats_pre, labels, emb),
        heatmap_post=class_average_heatmap(feats_post, labels, emb),
        projection_pre=pca_projection(feats_pre),
        projection_post=pca_projection(feats_post),
        labels=labels,
        adapt_report=report,
        association_pre=num.value_of(association_map(feats_pre, emb).norm),
        association_post=num.value_of(association_map(feats_post, emb).norm),
    )


# ---------------------------------------------------------------------------
# CSV emission


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _fmt(v):
    # repr keeps full float precision and is stable across runs
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_report(bundle: ReportBundle, out_dir, per_image: bool = False) -> list:
    """Emit the full report as CSV files under out_dir; returns paths.

    ``per_image`` additionally writes the raw per-image association rows
    the class-averaged heatmaps were built from.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def dest(name):
        p = os.path.join(out_dir, name)
        paths.append(p)
        return p

    _write_rows(
        dest("summary.csv"),
        ["key", "value"],
        [(k, v) for k, v in bundle.summary.items()],
    )
    _write_rows(
        dest("loss_curve.csv"),
        ["step", "l_ent", "l_pir", "l_ca", "total"],
        [(r["step"], r["l_ent"], r["l_pir"], r["l_ca"], r["total"]) for r in bundle.loss_curve],
    )
    m = bundle.heatmap_pre.shape[0]
    head = ["class"] + [f"category_{j}" for j in range(m)]
    for name, grid in (("heatmap_pre.csv", bundle.heatmap_pre), ("heatmap_post.csv", bundle.heatmap_post)):
        _write_rows(dest(name), head, [(i, *grid[i]) for i in range(m)])
    for name, proj in (
        ("projection_pre.csv", bundle.projection_pre),
        ("projection_post.csv", bundle.projection_post),
    ):
        _write_rows(
            dest(name),
            ["index", "label", "pc1", "pc2"],
            [(i, int(bundle.labels[i]), proj[i, 0], proj[i, 1]) for i in range(len(proj))],
        )
    if per_image:
        cols = ["index", "label"] + [f"category_{j}" for j in range(m)]
        for name, assoc in (
            ("association_pre.csv", bundle.association_pre),
            ("association_post.csv", bundle.association_post),
        ):
            _write_rows(
                dest(name),
                cols,
                [(i, int(bundle.labels[i]), *assoc[i]) for i in range(len(assoc))],
            )
    return paths


# ---------------------------------------------------------------------------
# ablation


def _thread_count(threads) -> int:
    if threads is not None:
        n = int(threads)
    else:
        n = int(os.environ.get(THREADS_ENV, "0") or 0)
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def ablation_cells(base_cfg: AdaptConfig, grid_alpha=None, grid_beta=None) -> list:
    """Loss-mask rows first (which components are live), then the full
    (alpha, beta) grid. Masked rows reuse the base weights."""
    cells = [
        ("ent-only", 0.0, 0.0),
        ("ent+pir", base_cfg.alpha, 0.0),
        ("ent+ca", 0.0, base_cfg.beta),
        ("full", base_cfg.alpha, base_cfg.beta),
    ]
    ga = DEFAULT_GRID if grid_alpha is None else tuple(grid_alpha)
    gb = DEFAULT_GRID if grid_beta is None else tuple(grid_beta)
    for a in ga:
        for b in gb:
            if a < 0 or b < 0:
                raise ConfigError(f"grid weights must be >= 0, got ({a}, {b})")
            cells.append(("grid", float(a), float(b)))
    return cells


def run_ablation(
    encoder,
    dataset,
    emb,
    base_cfg: AdaptConfig,
    grid_alpha=None,
    grid_beta=None,
    seeds: int = 5,
    threads=None,
) -> list:
    """One row per (cell, seed). Every cell runs every seed, so rows with
    equal (alpha, beta, seed) are identical runs regardless of their mask
    label. Execution order never affects results: each task owns its
    config and the encoder is immutable."""
    if seeds < 1:
        raise ConfigError(f"need at least 1 seed, got {seeds}")
    cells = ablation_cells(base_cfg, grid_alpha, grid_beta)
    tasks = [
        (mask, a, b, base_cfg.seed + k)
        for mask, a, b in cells
        for k in range(seeds)
    ]

    def run_one(task):
        mask, a, b, seed = task
        cfg = dataclasses.replace(base_cfg, alpha=a, beta=b, seed=seed)
        rep = run_stream(encoder, dataset, emb, cfg)
        return {
            "mask": mask,
            "alpha": a,
            "beta": b,
            "seed": seed,
            "pre_accuracy": rep.pre_accuracy,
            "post_accuracy": rep.post_accuracy,
            "online_accuracy": rep.online_accuracy,
        }

    with ThreadPoolExecutor(max_workers=_thread_count(threads)) as pool:
        rows = list(pool.map(run_one, tasks))
    return rows


def write_ablation(rows: list, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "ablation.csv")
    _write_rows(
        path,
        ["mask", "alpha", "beta", "seed", "pre_accuracy", "post_accuracy", "online_accuracy"],
        [
            (r["mask"], r["alpha"], r["beta"], r["seed"], r["pre_accuracy"], r["post_accuracy"], r["online_accuracy"])
            for r in rows
        ],
    )
    return path


def summarize_ablation(rows: list) -> dict:
    """Mean post-accuracy per mask label, for the trend check."""
    out: dict = {}
    for r in rows:
        out.setdefault(r["mask"], []).append(r["post_accuracy"])
    return {k: float(np.mean(v)) for k, v in out.items()}
