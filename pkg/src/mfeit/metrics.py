"""Image-quality metrics over masked pixels and the evaluation harness.

PSNR uses a fixed peak of 1.0 (the normalized contrast never exceeds 0.995
in magnitude) so numbers are comparable across phantoms.  SSIM is the
standard single-scale form (11x11 Gaussian window, sigma 1.5, K1=0.01,
K2=0.03, dynamic range 1.0) averaged over windows lying fully inside the
disc mask.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from mfeit import admm
from mfeit import network as net_mod

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_PEAK = 1.0


@dataclass
class NoiseSpec:
    snr_db: float
    seed: int = 0


@dataclass
class MetricReport:
    method: str
    per_freq: dict     # metric name -> list over frequencies
    average: dict      # metric name -> float

    def rows(self):
        l = len(self.per_freq["rmse"])
        out = []
        for f in range(l):
            out.append(
                (
                    self.method,
                    str(f + 1),
                    self.per_freq["psnr"][f],
                    self.per_freq["ssim"][f],
                    self.per_freq["rmse"][f],
                )
            )
        out.append(
            (
                self.method,
                "avg",
                self.average["psnr"],
                self.average["ssim"],
                self.average["rmse"],
            )
        )
        return out


def rmse(pred, gt):
    """Per-frequency root mean square error over masked pixels."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"rmse shapes differ: {pred.shape} vs {gt.shape}")
    err = pred - gt
    per = np.sqrt(np.mean(err * err, axis=0))
    return per, float(per.mean())


def psnr(pred, gt, peak=PSNR_PEAK):
    """Per-frequency 10*log10(peak^2 / mse); +inf when the error vanishes."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"psnr shapes differ: {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2, axis=0)
    per = np.where(mse > 0, 10.0 * np.log10(peak * peak / np.maximum(mse, 1e-300)), np.inf)
    return per, float(per.mean())


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred, gt, grid, peak=PSNR_PEAK):
    """Per-frequency single-scale SSIM on the embedded H x W images."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"ssim shapes differ: {pred.shape} vs {gt.shape}")
    if grid.H < SSIM_WINDOW or grid.W < SSIM_WINDOW:
        raise ValueError(
            f"grid {grid.H}x{grid.W} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    window = _gaussian_window()
    inside = (
        convolve2d(
            grid.mask.astype(float), np.ones((SSIM_WINDOW, SSIM_WINDOW)), mode="valid"
        )
        >= SSIM_WINDOW * SSIM_WINDOW - 0.5
    )
    if not inside.any():
        raise ValueError("no SSIM window lies fully inside the mask")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    l = pred.shape[1]
    values = np.empty(l)
    for f in range(l):
        x = grid.to_image(pred[:, f])
        y = grid.to_image(gt[:, f])
        mu_x = convolve2d(x, window, mode="valid")
        mu_y = convolve2d(y, window, mode="valid")
        xx = convolve2d(x * x, window, mode="valid") - mu_x * mu_x
        yy = convolve2d(y * y, window, mode="valid") - mu_y * mu_y
        xy = convolve2d(x * y, window, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        values[f] = float((num[inside] / den[inside]).mean())
    return values, float(values.mean())


def add_noise(B, spec):
    """Additive Gaussian noise per frequency column scaled to the requested
    column SNR: std = ||b|| / sqrt(m) * 10^(-snr/20)."""
    B = np.asarray(B, dtype=float)
    if not np.isfinite(spec.snr_db):
        raise ValueError("snr_db must be finite")
    m = B.shape[0]
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(B.shape)
    std = np.linalg.norm(B, axis=0) / np.sqrt(m) * 10.0 ** (-spec.snr_db / 20.0)
    return B + noise * std[None, :]


# ---------------------------------------------------------------------------
# harness


def _sample_metrics(pred, gt, grid):
    p, _ = psnr(pred, gt)
    s, _ = ssim(pred, gt, grid)
    r, _ = rmse(pred, gt)
    return p, s, r


def predict(
    method,
    B,
    dataset,
    laplace,
    *,
    admm_params=None,
    x_update="closed_form",
    gn_lambda=None,
    net=None,
    K_s=None,
    x_true=None,
    collect=False,
):
    """One reconstruction in the data domain; optionally with per-iteration
    RMSE history (admm) or intermediate images (net)."""
    A = dataset.smat.entries
    if method == "gn":
        lam = gn_lambda if gn_lambda is not None else admm.default_gn_lambda(A, laplace)
        return admm.gn_init(A, B, lam, laplace), None
    if method == "admm":
        params = admm_params if admm_params is not None else admm.AdmmParams()
        _, Z, history = admm.solve(
            admm.LinearizedModel(A, B),
            params,
            x_update=x_update,
            laplace=laplace,
            gn_lambda=gn_lambda,
            x_true=x_true,
        )
        return Z, history.get("rmse")
    if method == "net":
        if net is None:
            raise ValueError("method 'net' needs trained parameters")
        depth = K_s if K_s is not None else 5
        if collect:
            pred, inter = net_mod.reconstruct(
                B, A, laplace, net, depth, gn_lambda=gn_lambda, collect=True
            )
            history = None
            if x_true is not None:
                history = [float(np.sqrt(np.mean((z - x_true) ** 2))) for z in inter]
            return pred, history
        return (
            net_mod.reconstruct(B, A, laplace, net, depth, gn_lambda=gn_lambda),
            None,
        )
    raise ValueError(f"unknown method {method!r}")


def evaluate(
    method,
    dataset,
    split="test",
    *,
    noise=None,
    iter_history=False,
    admm_params=None,
    x_update="closed_form",
    gn_lambda=None,
    net=None,
    K_s=None,
    max_samples=None,
):
    """Average per-frequency metrics over one split.

    Returns (MetricReport, iteration_rmse or None); the history is the mean
    per-iteration RMSE over samples (admm over its K, net over its blocks).
    """
    samples = dataset.split(split)
    if max_samples is not None:
        samples = samples[:max_samples]
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    laplace = admm.laplacian(dataset.grid)
    l = dataset.groups.l
    psnrs = np.zeros((len(samples), l))
    ssims = np.zeros((len(samples), l))
    rmses = np.zeros((len(samples), l))
    histories = []
    for i, sample in enumerate(samples):
        B = sample.B
        if noise is not None:
            B = add_noise(B, NoiseSpec(noise.snr_db, seed=noise.seed + i))
        pred, history = predict(
            method,
            B,
            dataset,
            laplace,
            admm_params=admm_params,
            x_update=x_update,
            gn_lambda=gn_lambda,
            net=net,
            K_s=K_s,
            x_true=sample.X_gt if iter_history else None,
            collect=iter_history and method == "net",
        )
        psnrs[i], ssims[i], rmses[i] = _sample_metrics(pred, sample.X_gt, dataset.grid)
        if iter_history and history is not None:
            histories.append(history)
    report = MetricReport(
        method=method,
        per_freq={
            "psnr": psnrs.mean(axis=0).tolist(),
            "ssim": ssims.mean(axis=0).tolist(),
            "rmse": rmses.mean(axis=0).tolist(),
        },
        average={
            "psnr": float(psnrs.mean()),
            "ssim": float(ssims.mean()),
            "rmse": float(rmses.mean()),
        },
    )
    iter_rmse = None
    if histories:
        iter_rmse = np.asarray(histories, dtype=float).mean(axis=0).tolist()
    return report, iter_rmse


def noise_sweep(method, dataset, split, snr_list, seed=0, **kwargs):
    """Average PSNR per SNR level; rows of (method, snr_db, psnr)."""
    rows = []
    for snr in snr_list:
        report, _ = evaluate(
            method, dataset, split, noise=NoiseSpec(snr, seed=seed), **kwargs
        )
        rows.append((method, float(snr), report.average["psnr"]))
    return rows
