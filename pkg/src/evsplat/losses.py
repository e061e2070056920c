"""Supervision terms and metric kernels, each with an analytic adjoint.

The photometric losses share one kernel: (1 - l_ssim) * L1 + l_ssim * (1 - SSIM).
SSIM uses the standard 11x11 Gaussian window (sigma 1.5, K1 0.01, K2 0.03,
dynamic range 1); windows are evaluated on the valid region only, realized
as a banded-matrix correlation whose transpose gives the exact adjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .events import EventConfig, EventStream, accumulate
from .image import RadianceImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    lambda_blur: float = 1.0
    lambda_ev: float = 0.1
    lambda_edi: float = 1.0
    lambda_ssim: float = 0.2
    theta: float = 0.2

    def __post_init__(self):
        for name in ("lambda_blur", "lambda_ev", "lambda_edi", "lambda_ssim"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.theta <= 0:
            raise ValueError("theta must be positive")


@dataclass
class LossReport:
    total: float
    blur: float
    event: float
    edi: float
    blur_adjoint: np.ndarray | None = None
    event_adjoints: list[np.ndarray] | None = None
    edi_adjoint: np.ndarray | None = None

    def check_decomposition(self, w: LossWeights, tol: float = 1e-9) -> None:
        expect = (w.lambda_blur * self.blur + w.lambda_ev * self.event
                  + w.lambda_edi * self.edi)
        if abs(self.total - expect) > tol:
            raise ValueError(f"loss decomposition broken: {self.total} vs {expect}")

    def to_json(self, iteration: int) -> dict:
        return {"iter": iteration, "total": self.total, "blur": self.blur,
                "event": self.event, "edi": self.edi}


# ---------------------------------------------------------------------------
# L1 and SSIM kernels
# ---------------------------------------------------------------------------

def _check_shapes(a: RadianceImage, b: RadianceImage) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")


def l1(a: RadianceImage, b: RadianceImage) -> float:
    """Mean absolute difference over all pixels and channels."""
    _check_shapes(a, b)
    return float(np.mean(np.abs(a.data - b.data)))


def l1_adjoint(a: RadianceImage, b: RadianceImage) -> np.ndarray:
    _check_shapes(a, b)
    return np.sign(a.data - b.data) / a.data.size


def _gauss_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=float)
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _valid_band(size: int) -> np.ndarray:
    """Banded operator for 1D valid correlation with the Gaussian window."""
    g = _gauss_window()
    rows = size - SSIM_WINDOW + 1
    band = np.zeros((rows, size))
    for i in range(rows):
        band[i, i:i + SSIM_WINDOW] = g
    return band


_band_cache: dict[int, np.ndarray] = {}


def _band(size: int) -> np.ndarray:
    if size not in _band_cache:
        _band_cache[size] = _valid_band(size)
    return _band_cache[size]


def _ssim_channel(a: np.ndarray, b: np.ndarray, with_adjoint: bool):
    bh = _band(a.shape[0])
    bw = _band(a.shape[1])

    def vc(x):
        return bh @ x @ bw.T

    mu_a, mu_b = vc(a), vc(b)
    saa = vc(a * a) - mu_a * mu_a
    sbb = vc(b * b) - mu_b * mu_b
    sab = vc(a * b) - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + SSIM_C1
    n2 = 2.0 * sab + SSIM_C2
    d1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    d2 = saa + sbb + SSIM_C2
    smap = (n1 * n2) / (d1 * d2)
    value = float(np.mean(smap))
    if not with_adjoint:
        return value, None

    # d mean(smap) / d a, spread back through the valid correlation
    wgt = 1.0 / smap.size
    ds_dn1 = wgt * n2 / (d1 * d2)
    ds_dn2 = wgt * n1 / (d1 * d2)
    ds_dd1 = -wgt * smap / d1
    ds_dd2 = -wgt * smap / d2
    p_saa = ds_dd2
    p_sab = 2.0 * ds_dn2
    p_mua = 2.0 * mu_b * ds_dn1 + 2.0 * mu_a * ds_dd1 \
        - 2.0 * mu_a * p_saa - mu_b * p_sab

    def spread(g):
        return bh.T @ g @ bw

    adj = spread(p_mua) + 2.0 * a * spread(p_saa) + b * spread(p_sab)
    return value, adj


def ssim(a: RadianceImage, b: RadianceImage) -> float:
    """Channel-averaged SSIM in [-1, 1]."""
    value, _ = _ssim_with_adjoint(a, b, with_adjoint=False)
    return value


def _ssim_with_adjoint(a: RadianceImage, b: RadianceImage, with_adjoint=True):
    _check_shapes(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}px SSIM window")
    total = 0.0
    adj = np.zeros_like(a.data) if with_adjoint else None
    for c in range(a.channels):
        value, grad = _ssim_channel(a.data[:, :, c], b.data[:, :, c],
                                    with_adjoint)
        total += value
        if with_adjoint:
            adj[:, :, c] = grad
    if with_adjoint:
        adj /= a.channels
    return total / a.channels, adj


def photometric_loss(a: RadianceImage, b: RadianceImage,
                     lambda_ssim: float) -> tuple[float, np.ndarray]:
    """(1 - l) * L1 + l * (1 - SSIM) with its adjoint with respect to a."""
    value_l1 = l1(a, b)
    if lambda_ssim == 0.0:
        return value_l1, l1_adjoint(a, b)
    value_ssim, adj_ssim = _ssim_with_adjoint(a, b)
    value = (1.0 - lambda_ssim) * value_l1 + lambda_ssim * (1.0 - value_ssim)
    adj = (1.0 - lambda_ssim) * l1_adjoint(a, b) - lambda_ssim * adj_ssim
    return value, adj


# ---------------------------------------------------------------------------
# the three supervision terms
# ---------------------------------------------------------------------------

def blur_loss(rendered_blur: RadianceImage, observed_blur: RadianceImage,
              w: LossWeights) -> tuple[float, np.ndarray]:
    """Photometric loss between the synthesized and the captured blur;
    adjoint with respect to the rendered image."""
    return photometric_loss(rendered_blur, observed_blur, w.lambda_ssim)


def event_loss(latent_log_images: list[RadianceImage], stream: EventStream,
               latent_times: list[float], w: LossWeights,
               rng: np.random.Generator,
               cumulative: np.ndarray | None = None,
               ) -> tuple[float, list[np.ndarray]]:
    """Multi-window event consistency.

    For each sub-window ending at latent index i+1, the start index is drawn
    uniformly from {0..i} (start times snap to latent timestamps, where
    rendered log images exist). Observed counts come from the stream over the
    half-open window; predicted counts are the log-brightness difference over
    theta. Returns the mean absolute discrepancy (averaged over windows and
    pixels) and per-latent adjoints on the log images.
    """
    n = len(latent_log_images)
    if n < 2:
        raise ValueError("event loss needs at least two latent images")
    if len(latent_times) != n:
        raise ValueError("latent times and images disagree")
    logs = [im.data[:, :, 0] for im in latent_log_images]
    npix = logs[0].size
    adjoints = [np.zeros_like(logs[0]) for _ in range(n)]
    total = 0.0
    norm = 1.0 / (n - 1)
    for i in range(n - 1):
        s = int(rng.integers(0, i + 1))
        if cumulative is not None:
            observed = cumulative[i + 1] - cumulative[s]
        else:
            observed = accumulate(stream, latent_times[s], latent_times[i + 1])
        predicted = (logs[i + 1] - logs[s]) / w.theta
        resid = observed - predicted
        total += norm * float(np.mean(np.abs(resid)))
        # d|resid|/d predicted = -sign(resid)
        gpred = -np.sign(resid) * (norm / npix)
        adjoints[i + 1] += gpred / w.theta
        adjoints[s] -= gpred / w.theta
    return total, adjoints


def edi_loss(latent_mid: RadianceImage, edi_image: RadianceImage,
             w: LossWeights) -> tuple[float, np.ndarray]:
    """Photometric loss against the fixed EDI prior; gradient flows only into
    the rendered mid-exposure image."""
    return photometric_loss(latent_mid, edi_image, w.lambda_ssim)


def total_loss(blur: float, event: float, edi: float,
               w: LossWeights, blur_adjoint=None, event_adjoints=None,
               edi_adjoint=None) -> LossReport:
    report = LossReport(
        total=w.lambda_blur * blur + w.lambda_ev * event + w.lambda_edi * edi,
        blur=blur, event=event, edi=edi, blur_adjoint=blur_adjoint,
        event_adjoints=event_adjoints, edi_adjoint=edi_adjoint)
    report.check_decomposition(w)
    return report


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(a: RadianceImage, b: RadianceImage) -> float:
    """10 log10(1 / MSE) with peak 1, inputs clamped to [0, 1]; +inf when
    the images agree exactly."""
    _check_shapes(a, b)
    diff = np.clip(a.data, 0.0, 1.0) - np.clip(b.data, 0.0, 1.0)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
