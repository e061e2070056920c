"""Event-based double integral deblurring.

The blurred image is the exposure-time average of exp(L(u, t)); the event
stream gives L(u, t) - L(u, t_ref) up to the contrast threshold, so the
latent image at t_ref follows by dividing the blur by the time average of
the exponentiated event accumulation. The temporal integral is discretized
with a midpoint rule over m uniform bins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventConfig, EventStream
from .geometry import ExposureTrajectory
from .image import RadianceImage

DEFAULT_BINS = 32


@dataclass(frozen=True)
class EdiRequest:
    blurred: RadianceImage
    events: EventStream
    t_start: float
    t_end: float
    t_ref: float
    theta: float
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError("empty exposure window")
        if not (self.t_start <= self.t_ref <= self.t_end):
            raise ValueError("reference time outside the exposure window")
        if self.bins < 2:
            raise ValueError("need at least 2 quadrature bins")
        if self.theta <= 0:
            raise ValueError("contrast threshold must be positive")


def _cumulative_counts(stream: EventStream, eval_times: np.ndarray,
                       shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel signed event counts up to each evaluation time (inclusive)."""
    order = np.argsort(eval_times, kind="stable")
    bounds = np.searchsorted(stream.t, eval_times[order], side="right")
    out = np.zeros((len(eval_times),) + shape)
    acc = np.zeros(shape)
    prev = 0
    for rank, idx in enumerate(order):
        hi = bounds[rank]
        np.add.at(acc, (stream.y[prev:hi], stream.x[prev:hi]), stream.p[prev:hi])
        prev = hi
        out[idx] = acc
    return out


def edi_deblur(req: EdiRequest) -> RadianceImage:
    """Recover the latent sharp image at t_ref from blur plus events.

    All color channels share the per-pixel rescale tau / sum_k exp(theta E_k) dt,
    since the events carry no chromatic information.
    """
    blur = req.blurred.data
    if not np.all(np.isfinite(blur)):
        raise ValueError("blurred image contains non-finite values")
    h, w = blur.shape[:2]
    if (req.events.height, req.events.width) != (h, w):
        raise ValueError("event sensor size does not match the blurred image")

    tau = req.t_end - req.t_start
    dt = tau / req.bins
    centers = req.t_start + (np.arange(req.bins) + 0.5) * dt

    # E_k = C(t_k) - C(t_ref) with C the inclusive cumulative polarity map;
    # this covers both t_k < t_ref and t_k > t_ref with the right sign.
    counts = _cumulative_counts(req.events, np.append(centers, req.t_ref), (h, w))
    e_k = counts[:-1] - counts[-1][None]

    denom = np.exp(req.theta * e_k).sum(axis=0) * dt
    return RadianceImage(np.maximum(tau * blur / denom[:, :, None], 0.0))


def edi_mid_exposure(blurred: RadianceImage, events: EventStream,
                     traj: ExposureTrajectory, cfg: EventConfig,
                     bins: int = DEFAULT_BINS) -> RadianceImage:
    """Latent image at the mid-exposure time, the target of the EDI prior."""
    req = EdiRequest(blurred=blurred, events=events, t_start=traj.t_start,
                     t_end=traj.t_end, t_ref=traj.mid_time, theta=cfg.theta,
                     bins=bins)
    return edi_deblur(req)
