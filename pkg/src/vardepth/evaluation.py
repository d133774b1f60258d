"""Affine-invariant depth evaluation.

Predictions are defined only up to an unknown scale and shift, so each one is
least-squares aligned to its ground truth over the valid mask before scoring.
Metrics: AbsRel (mean |a - d| / d, reported x100) and delta1 (percentage of
valid pixels whose larger depth ratio stays under 1.25). Samples whose
alignment is degenerate (too few pixels, constant prediction) are flagged and
excluded from aggregates rather than crashing a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateFitError, ShapeError


@dataclass
class AffineFit:
    s: float
    t: float
    space: str = "linear"


def _masked_pair(m, d, mask):
    a = np.asarray(m, dtype=np.float64)
    b = np.asarray(d, dtype=np.float64)
    mk = np.asarray(mask, dtype=bool)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.shape != b.shape or mk.shape != b.shape:
        raise ShapeError(f"prediction {a.shape}, truth {b.shape}, mask {mk.shape}")
    return a, b, mk


def align_affine(m, d, mask, space: str = "linear") -> AffineFit:
    """Closed-form least squares of s*x + t against y over the valid mask.

    With space="log" the fit runs on log-depths (prediction floored at 1e-9
    first), which corresponds to a power law in linear depth. The centered
    one-dimensional form below is algebraically the 2x2 normal-equation
    solution, just better conditioned.
    """
    if space not in ("linear", "log"):
        raise DataError(f"unknown alignment space '{space}'")
    a, b, mk = _masked_pair(m, d, mask)
    if mk.sum() < 2:
        raise DegenerateFitError(f"{int(mk.sum())} valid pixels, need at least 2")
    x = a[mk]
    y = b[mk]
    if space == "log":
        x = np.log(np.maximum(x, 1e-9))
        y = np.log(y)
    var = float(np.var(x))
    if var < 1e-18:
        raise DegenerateFitError("constant prediction admits no affine fit")
    xm, ym = float(x.mean()), float(y.mean())
    s = float(((x - xm) * (y - ym)).mean()) / var
    t = ym - s * xm
    if not (np.isfinite(s) and np.isfinite(t)):
        raise DegenerateFitError(f"non-finite fit (s={s}, t={t})")
    return AffineFit(s=s, t=t, space=space)


def apply_fit(fit: AffineFit, m) -> np.ndarray:
    """Map a raw prediction into ground-truth units under the fit."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if fit.space == "log":
        return np.exp(fit.s * np.log(np.maximum(a, 1e-9)) + fit.t)
    return fit.s * a + fit.t


def abs_rel(a, d, mask) -> float:
    """Mean over valid pixels of |a - d| / d (unitless)."""
    p, g, mk = _masked_pair(a, d, mask)
    if not mk.any():
        raise DataError("abs_rel: no valid pixels")
    gv = g[mk]
    if not (gv > 0).all():
        raise DataError("abs_rel: non-positive valid ground truth")
    return float(np.mean(np.abs(p[mk] - gv) / gv))


def delta1(a, d, mask) -> float:
    """Percentage of valid pixels with max(a/d, d/a) < 1.25."""
    p, g, mk = _masked_pair(a, d, mask)
    if not mk.any():
        raise DataError("delta1: no valid pixels")
    pv, gv = p[mk], g[mk]
    if not (gv > 0).all() or not (pv > 0).all():
        raise DataError("delta1: non-positive values")
    ratio = np.maximum(pv / gv, gv / pv)
    return float(100.0 * np.mean(ratio < 1.25))


@dataclass
class SampleResult:
    index: int
    abs_rel: float
    delta1: float
    degenerate: bool = False


@dataclass
class EvalReport:
    samples: list[SampleResult] = field(default_factory=list)
    n_evaluated: int = 0
    n_excluded: int = 0
    abs_rel_mean: float = float("nan")
    delta1_mean: float = float("nan")
    stage_ms_mean: list[float] = field(default_factory=list)
    stage_ms_p50: list[float] = field(default_factory=list)
    stage_ms_p90: list[float] = field(default_factory=list)
    decode_ms_mean: float = 0.0
    total_ms_mean: float = 0.0


def evaluate(runner, dataset, *, space: str = "linear",
             clamp_min: float = 1e-6) -> EvalReport:
    """Score a prediction callable over (rgb, depth, mask) triples.

    The runner receives each full triple (oracle runners need the truth; model
    runners ignore it) and returns a depth map plus an optional per-scale
    timing state. AbsRel uses the aligned prediction as-is; delta1 requires
    positivity, so the aligned prediction is floored at clamp_min for it.
    """
    if not dataset:
        raise DataError("evaluate: empty dataset")
    report = EvalReport()
    states = []
    for idx, (rgb, depth, mask) in enumerate(dataset):
        g = np.asarray(depth, dtype=np.float64)
        mk = np.asarray(mask, dtype=bool)
        if mk.any() and not (g[mk] > 0).all():
            raise DataError(f"sample {idx}: non-positive valid ground truth")
        pred, state = runner(rgb, depth, mask)
        if state is not None:
            states.append(state)
        try:
            fit = align_affine(pred, depth, mask, space=space)
        except DegenerateFitError:
            report.samples.append(SampleResult(idx, float("nan"), float("nan"),
                                               degenerate=True))
            report.n_excluded += 1
            continue
        aligned = apply_fit(fit, pred)
        ar = abs_rel(aligned, depth, mask)
        d1 = delta1(np.maximum(aligned, clamp_min), depth, mask)
        report.samples.append(SampleResult(idx, ar, d1))
    scored = [r for r in report.samples if not r.degenerate]
    report.n_evaluated = len(scored)
    if scored:
        report.abs_rel_mean = float(np.mean([r.abs_rel for r in scored]))
        report.delta1_mean = float(np.mean([r.delta1 for r in scored]))
    if states:
        stage = np.array([s.stage_ms for s in states], dtype=np.float64)
        report.stage_ms_mean = [float(v) for v in stage.mean(axis=0)]
        report.stage_ms_p50 = [float(v) for v in np.percentile(stage, 50, axis=0)]
        report.stage_ms_p90 = [float(v) for v in np.percentile(stage, 90, axis=0)]
        report.decode_ms_mean = float(np.mean([s.decode_ms for s in states]))
        report.total_ms_mean = float(np.mean([s.total_ms for s in states]))
    return report


def format_records(report: EvalReport) -> str:
    """Machine-readable lines, one per sample plus an aggregate.

    Deliberately excludes wall-clock fields so reruns of a seeded evaluation
    emit byte-identical records.
    """
    lines = []
    for r in report.samples:
        if r.degenerate:
            lines.append(f"sample {r.index:04d} degenerate=1")
        else:
            lines.append(f"sample {r.index:04d} absrel_x100={100 * r.abs_rel:.6f} "
                         f"delta1={r.delta1:.6f} degenerate=0")
    lines.append(f"aggregate n={report.n_evaluated} excluded={report.n_excluded} "
                 f"absrel_x100={100 * report.abs_rel_mean:.6f} "
                 f"delta1={report.delta1_mean:.6f}")
    return "\n".join(lines) + "\n"


def format_report(report: EvalReport, title: str = "evaluation") -> str:
    """Human-readable summary table, including latency statistics if present."""
    lines = [title,
             f"  samples evaluated: {report.n_evaluated}"
             + (f" (excluded {report.n_excluded} degenerate)" if report.n_excluded else ""),
             f"  AbsRel x100: {100 * report.abs_rel_mean:8.4f}",
             f"  delta1 (%):  {report.delta1_mean:8.4f}"]
    if report.stage_ms_mean:
        lines.append("  per-scale latency ms (mean / p50 / p90):")
        for i, (m, p50, p90) in enumerate(zip(report.stage_ms_mean,
                                              report.stage_ms_p50,
                                              report.stage_ms_p90), start=1):
            lines.append(f"    scale {i:2d}: {m:8.2f} / {p50:8.2f} / {p90:8.2f}")
        lines.append(f"  decode ms mean: {report.decode_ms_mean:8.2f}")
        lines.append(f"  total ms mean:  {report.total_ms_mean:8.2f}")
    return "\n".join(lines) + "\n"
