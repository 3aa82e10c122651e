import math

import numpy as np
import pytest

from gta.camera import Pose, Trajectory, generate_trajectory, pose_errors
from gta.errors import DimMismatch, EmptyMask, LengthMismatch, TooSmall
from gta.evaluation import (
    PSNR_CAP,
    ablation_table,
    baseline_report,
    combine_reports,
    depth_abs_rel,
    evaluate_run,
    psnr,
    ssim,
)
from gta.pipeline import SceneOutput, hole_filled_baseline


def test_psnr_closed_forms():
    a = np.full((8, 8, 3), 0.3)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-6
    with pytest.raises(DimMismatch):
        psnr(a, a[:-1])


def test_psnr_decreases_with_noise(rng):
    img = rng.random((32, 32, 3))
    vals = [psnr(img, img + rng.normal(scale=s, size=img.shape)) for s in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def brute_ssim_channel(x, y, win=11, sigma=1.5, c1=1e-4, c2=9e-4):
    ax = np.arange(win) - (win - 1) / 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    g /= g.sum()
    vals = []
    for i in range(x.shape[0] - win + 1):
        for j in range(x.shape[1] - win + 1):
            px, py = x[i : i + win, j : j + win], y[i : i + win, j : j + win]
            mx, my = (g * px).sum(), (g * py).sum()
            vx = (g * (px - mx) ** 2).sum()
            vy = (g * (py - my) ** 2).sum()
            cxy = (g * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return np.mean(vals)


def test_ssim_identity_and_constant_offset():
    img = np.random.default_rng(0).random((16, 16, 3))
    assert abs(ssim(img, img) - 1.0) < 1e-9
    c = 0.2
    a = np.full((16, 16), c)
    b = np.clip(a + 0.5, 0, 1)
    mx, my = c, c + 0.5
    expected = (2 * mx * my + 1e-4) / (mx**2 + my**2 + 1e-4)
    assert abs(ssim(a, b) - expected) < 1e-6


def test_ssim_matches_brute_force(rng):
    a = rng.random((14, 17, 2))
    b = np.clip(a + rng.normal(scale=0.2, size=a.shape), 0, 1)
    expected = np.mean([brute_ssim_channel(a[:, :, k], b[:, :, k]) for k in range(2)])
    assert abs(ssim(a, b) - expected) < 1e-9


def test_ssim_symmetric_and_bounded(rng):
    for _ in range(10):
        a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
        s = ssim(a, b)
        assert s == ssim(b, a)
        assert -1.0 <= s <= 1.0
    with pytest.raises(TooSmall):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


def test_abs_rel_cases(rng):
    gt = rng.uniform(0.5, 10, size=(6, 6))
    assert depth_abs_rel(gt, gt) == 0.0
    assert abs(depth_abs_rel(1.1 * gt, gt) - 0.1) < 1e-9
    mask = np.zeros_like(gt)
    mask[0, 0] = 1
    est = gt.copy()
    est[0, 0] *= 2
    assert abs(depth_abs_rel(est, gt, mask) - 1.0) < 1e-12
    with pytest.raises(EmptyMask):
        depth_abs_rel(gt, gt, np.zeros_like(gt))


def _perfect(sample):
    return SceneOutput(
        [v.depth for v in sample.targets], [v.rgb for v in sample.targets], sample.trajectory, {}
    )


def test_evaluate_perfect_run(small_samples):
    s = small_samples[0]
    rep = evaluate_run(_perfect(s), s.targets)
    assert rep.aggregate["psnr"] == PSNR_CAP and rep.capped
    assert abs(rep.aggregate["ssim"] - 1.0) < 1e-9
    assert rep.aggregate["abs_rel"] == 0.0
    assert rep.to_csv().splitlines()[0] == "view,psnr,ssim,abs_rel"
    assert "lpips" not in rep.to_text()


def test_evaluate_is_pure(small_samples):
    s = small_samples[1]
    out = _perfect(s)
    out.appearance = [np.clip(f + 0.05, 0, 1) for f in out.appearance]
    a, b = evaluate_run(out, s.targets), evaluate_run(out, s.targets)
    assert a.to_text() == b.to_text() and a.to_csv() == b.to_csv()


def test_evaluate_errors_and_pose_errors(small_samples):
    s = small_samples[2]
    with pytest.raises(LengthMismatch):
        evaluate_run(_perfect(s), s.targets[:-1])
    rep = evaluate_run(_perfect(s), s.targets, {"estimated_trajectory": s.trajectory})
    assert rep.aggregate["t_err"] == 0.0 and rep.aggregate["r_err"] == 0.0


def test_combine_and_ablation_table(small_samples):
    reps = [evaluate_run(_perfect(s), s.targets) for s in small_samples]
    pooled = combine_reports(reps)
    assert len(pooled.per_view) == sum(len(s.targets) for s in small_samples)
    base = baseline_report(hole_filled_baseline(small_samples), small_samples)
    table = ablation_table(base, pooled, ("warp", "oracle")).splitlines()
    assert table[0] == "metric,warp,oracle,delta"
    row = dict(zip(("metric", "a", "b", "d"), table[1].split(",")))
    assert row["metric"] == "psnr"
    assert math.isclose(float(row["d"]), float(row["b"]) - float(row["a"]), rel_tol=1e-12)
    assert float(row["a"]) == base.aggregate["psnr"]


def test_rotation_offset_r_err():
    ref = generate_trajectory("lateral", 5, {"distance": 1.0})
    c, s = math.cos(math.radians(10)), math.sin(math.radians(10))
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    est = Trajectory(tuple(Pose(rz @ p.rotation, p.translation) for p in ref.poses), ref.intrinsics)
    assert abs(pose_errors(est, ref)[1] - math.radians(10)) < 1e-6
