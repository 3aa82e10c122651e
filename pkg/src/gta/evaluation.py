"""Image and geometry metrics, per-run reports and side-by-side ablation tables."""

from dataclasses import dataclass, field
import io
import time

import numpy as np

from .camera import pose_errors
from .errors import DimMismatch, EmptyMask, LengthMismatch, TooSmall

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
REPORT_COLUMNS = ("view", "psnr", "ssim", "abs_rel")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at PSNR_CAP."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation of a 2-D image with the 1-D window ``g``."""
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=0) @ g


def ssim(a, b):
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise TooSmall(f"images must be at least {SSIM_WINDOW} pixels on each side")
    g = gaussian_window()
    scores = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        scores.append(num / den)
    return float(np.mean(np.stack(scores, axis=-1).mean(axis=-1)))


def depth_abs_rel(est, gt, mask=None):
    """Mean of ``|est - gt| / gt`` over mask = 1 pixels."""
    est, gt = _pair(est, gt)
    m = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if m.shape != gt.shape:
        raise DimMismatch("mask shape differs from depth shape")
    if not m.any():
        raise EmptyMask("depth_abs_rel needs at least one masked pixel")
    if np.any(gt[m] <= 0):
        raise DimMismatch("ground-truth depth must be positive on the mask")
    return float(np.mean(np.abs(est[m] - gt[m]) / gt[m]))


@dataclass
class Report:
    per_view: list
    aggregate: dict
    config: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)
    capped: bool = False

    def to_text(self):
        lines = [f"{k}={_fmt(v)}" for k, v in self.aggregate.items()]
        lines.append(f"psnr_capped={int(self.capped)}")
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        lines += [f"runtime.{k}={_fmt(v)}" for k, v in sorted(self.runtime.items())]
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        buf.write(",".join(REPORT_COLUMNS) + "\n")
        for row in self.per_view:
            buf.write(",".join(_fmt(row[c]) for c in REPORT_COLUMNS) + "\n")
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _aggregate(rows, keys=("psnr", "ssim", "abs_rel")):
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def evaluate_run(output, ground_truth, options=None):
    """Score a SceneOutput against ground-truth target views.

    ``options`` may carry ``estimated_trajectory`` (adds t_err / r_err against
    ``output.trajectory``) and ``config`` (echoed into the report).
    """
    options = dict(options or {})
    start = time.perf_counter()
    if len(ground_truth) != len(output.appearance) or len(output.geometry) != len(output.appearance):
        raise LengthMismatch(
            f"{len(output.appearance)} generated views vs {len(ground_truth)} ground-truth views"
        )
    rows = []
    capped = False
    for k, (rgb, depth, gt) in enumerate(zip(output.appearance, output.geometry, ground_truth)):
        p = psnr(rgb, gt.rgb)
        capped |= p >= PSNR_CAP
        rows.append(
            {
                "view": k + 1,
                "psnr": p,
                "ssim": ssim(rgb, gt.rgb),
                "abs_rel": depth_abs_rel(depth, gt.depth),
            }
        )
    agg = _aggregate(rows)
    if options.get("estimated_trajectory") is not None:
        t_err, r_err = pose_errors(options["estimated_trajectory"], output.trajectory)
        agg.update(t_err=t_err, r_err=r_err)
    runtime = {"seconds": time.perf_counter() - start} if options.get("timing") else {}
    return Report(rows, agg, dict(options.get("config", {})), runtime, capped)


def combine_reports(reports, config=None):
    """Pool per-view rows from several scenes into one report (view ids become scene:view)."""
    rows = []
    for i, r in enumerate(reports):
        for row in r.per_view:
            rows.append(dict(row, view=f"{i}:{row['view']}"))
    return Report(rows, _aggregate(rows), dict(config or {}), {}, any(r.capped for r in reports))


def baseline_report(frames, samples):
    """PSNR/SSIM of hole-filled warps (or any frame lists) against ground truth."""
    reports = []
    for fr, s in zip(frames, samples):
        rows = [
            {"view": k + 1, "psnr": psnr(f, v.rgb), "ssim": ssim(f, v.rgb), "abs_rel": float("nan")}
            for k, (f, v) in enumerate(zip(fr, s.targets))
        ]
        reports.append(Report(rows, _aggregate(rows)))
    return combine_reports(reports)


def ablation_table(report_a, report_b, names=("A", "B")):
    """CSV text with one row per metric: value under A, under B, and B - A."""
    buf = io.StringIO()
    buf.write(f"metric,{names[0]},{names[1]},delta\n")
    for key in report_a.aggregate:
        if key not in report_b.aggregate:
            continue
        a, b = report_a.aggregate[key], report_b.aggregate[key]
        buf.write(f"{key},{a!r},{b!r},{b - a!r}\n")
    return buf.getvalue()
