"""Gradient fidelity verification for every loss component.

Analytic gradients come from the reverse-mode tape; the reference comes
from central finite differences of the same closure evaluated on plain
arrays (no tape involvement), so the two routes share no derivative
code. Each component is checked over seeded instances spread across
both encoder families and three adapter insertion points.

``corrupt`` deliberately perturbs the analytic gradient of one named
component so the failure path (nonzero exit, offending component named)
stays exercised; it exists only for that negative control.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import numerics as num
from ..association import association_map, estimate_prototypes
from ..encoders import ToyConvEncoder, ToyViTEncoder, embed_categories
from ..errors import ConfigError
from ..objectives import loss_ca, loss_entropy, loss_pir, reconstruct, total_objective

TOLERANCE = 1e-4
COMPONENTS = ("ent", "pir", "ca", "total")
INSTANCES_PER_COMPONENT = 20

MAX_BATCH = 16
MAX_CATEGORIES = 8
MAX_DIM = 32


@dataclass
class GradcheckRow:
    component: str
    family: str
    insertion_layer: object  # int for vit, None for conv
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    rows: list
    max_rel_err: float
    passed: bool
    seconds: float


def _rel_err(approx: np.ndarray, reference: np.ndarray) -> float:
    # Symmetric denominator: a spurious large analytic gradient against a
    # tiny finite-difference one (or vice versa) still scores ~1. The
    # 1e-6 floor only engages when both routes are essentially zero,
    # e.g. the D=1 degenerate dimension where cosine rows are locally
    # constant; central-difference cancellation noise (~1e-11) then must
    # not be divided by itself.
    denom = max(float(np.abs(reference).max()), float(np.abs(approx).max()), 1e-6)
    return float(np.abs(approx - reference).max()) / denom


def _component_closure(component, encoder, images, t):
    def f(tokens):
        v = encoder.encode_batch(images, tokens)
        assoc = association_map(v, t)
        if component == "ent":
            return loss_entropy(assoc)
        protos = estimate_prototypes(assoc, v)
        if component == "ca":
            return loss_ca(protos, t)
        if component == "pir":
            return loss_pir(reconstruct(assoc, protos), v)
        return total_objective(v, t).total_node

    return f


def _categories(m: int, d: int, rng) -> np.ndarray:
    if m <= d:
        return embed_categories(m, d, seed=7).matrix
    # more categories than dimensions: orthonormality is impossible, so
    # fall back to normalized random rows (separation is irrelevant here)
    t = rng.normal(size=(m, d))
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def _encoder_cells(d: int, n: int):
    g = int(round(np.sqrt(n)))
    if g * g != n or g < 1:
        raise ConfigError(f"token count must be a perfect square, got {n}")
    shape = (3, 2 * g, 2 * g)
    blocks = 3
    cells = []
    for il in (0, blocks // 2, blocks):
        cells.append(
            (
                "vit",
                il,
                lambda il=il, seed=0: ToyViTEncoder(
                    image_shape=shape,
                    patch_grid=(g, g),
                    dim=d,
                    num_blocks=blocks,
                    insertion_layer=il,
                    seed=seed,
                ),
            )
        )
    cells.append(
        (
            "conv",
            None,
            lambda seed=0: ToyConvEncoder(image_shape=shape, dim=d, patch_side=2, seed=seed),
        )
    )
    return shape, cells


def gradcheck_command(
    seed: int = 0,
    batch: int = 8,
    m: int = 4,
    d: int = 16,
    n: int = 9,
    corrupt=None,
) -> GradcheckReport:
    if not (1 <= batch <= MAX_BATCH):
        raise ConfigError(f"batch must be in [1, {MAX_BATCH}], got {batch}")
    if not (2 <= m <= MAX_CATEGORIES):
        raise ConfigError(f"categories must be in [2, {MAX_CATEGORIES}], got {m}")
    if not (1 <= d <= MAX_DIM):
        raise ConfigError(f"feature dim must be in [1, {MAX_DIM}], got {d}")
    if corrupt is not None and corrupt not in COMPONENTS:
        raise ConfigError(f"corrupt target must be one of {COMPONENTS}, got {corrupt!r}")

    t0 = time.perf_counter()
    image_shape, cells = _encoder_cells(d, n)
    rows = []
    for ci, component in enumerate(COMPONENTS):
        rng = np.random.default_rng([seed, ci])
        t = _categories(m, d, rng)
        worst = {}  # (family, insertion) -> max rel err
        for k in range(INSTANCES_PER_COMPONENT):
            family, il, build = cells[k % len(cells)]
            encoder = build(seed=k)
            images = rng.normal(size=(batch,) + image_shape)
            tokens0 = rng.normal(0.0, 0.2, encoder.adapter_shape)
            f = _component_closure(component, encoder, images, t)
            analytic = num.value_and_gradient(f, tokens0).gradient
            fd = num.finite_difference_gradient(f, tokens0)
            if corrupt == component:
                analytic = analytic + 0.01 * (np.abs(fd).max() + 1.0)
            err = _rel_err(analytic, fd)
            key = (family, il)
            worst[key] = max(worst.get(key, 0.0), err)
        for (family, il), err in worst.items():
            rows.append(
                GradcheckRow(
                    component=component,
                    family=family,
                    insertion_layer=il,
                    max_rel_err=err,
                    passed=err <= TOLERANCE,
                )
            )
    max_err = max(r.max_rel_err for r in rows)
    return GradcheckReport(
        rows=rows,
        max_rel_err=max_err,
        passed=all(r.passed for r in rows),
        seconds=time.perf_counter() - t0,
    )


def format_report(report: GradcheckReport) -> str:
    lines = []
    for r in report.rows:
        il = "-" if r.insertion_layer is None else str(r.insertion_layer)
        status = "ok" if r.passed else "FAIL"
        lines.append(
            f"{r.component:<6s} {r.family:<5s} insertion={il:<2s} "
            f"max_rel_err={r.max_rel_err:.3e} {status}"
        )
    verdict = "pass" if report.passed else "FAIL"
    lines.append(
        f"gradcheck {verdict}: max rel err {report.max_rel_err:.3e} "
        f"(tolerance {TOLERANCE:.0e}) in {report.seconds:.1f}s"
    )
    if not report.passed:
        bad = sorted({r.component for r in report.rows if not r.passed})
        lines.append(f"offending component(s): {', '.join(bad)}")
    return "\n".join(lines)
