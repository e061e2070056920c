import math

import numpy as np
import pytest

from evsplat.edi import EdiRequest, edi_deblur, edi_mid_exposure
from evsplat.events import EventConfig, EventStream, log_luminance, simulate_events
from evsplat.geometry import ExposureTrajectory, Pose
from evsplat.image import RadianceImage

THETA = 0.2


def empty_stream(w=4, h=4):
    return EventStream(width=w, height=h)


class TestEdiDeblur:
    def test_empty_stream_identity(self, rng):
        blur = RadianceImage(rng.uniform(0.1, 1.0, (4, 4, 3)))
        req = EdiRequest(blurred=blur, events=empty_stream(), t_start=0.0,
                         t_end=1.0, t_ref=0.3, theta=THETA, bins=16)
        out = edi_deblur(req)
        assert np.allclose(out.data, blur.data, atol=1e-12)

    def test_single_event_closed_form(self):
        # one +1 event at mid-exposure, reference at the start:
        # denominator = (tau/2)(1 + e^theta), so I = 2B / (1 + e^theta)
        b = 0.6
        blur = RadianceImage(np.full((1, 1, 3), b))
        stream = EventStream(width=1, height=1, t=[0.5], x=[0], y=[0], p=[1])
        req = EdiRequest(blurred=blur, events=stream, t_start=0.0, t_end=1.0,
                         t_ref=0.0, theta=THETA, bins=16)
        out = edi_deblur(req)
        expect = 2.0 * b / (1.0 + math.exp(THETA))
        assert np.allclose(out.data, expect, rtol=1e-12)

    def test_piecewise_constant_exactness(self, rng):
        # per-bin-constant log brightness, jumps at bin edges by exact
        # multiples of theta: the midpoint quadrature is exact
        bins = 8
        h = w = 3
        jumps = rng.integers(-2, 3, size=(bins - 1, h, w))
        log0 = rng.uniform(-1.0, 0.0, (h, w))
        logs = np.cumsum(np.concatenate([log0[None], jumps * THETA]), axis=0)
        lin = np.exp(logs)  # (bins, h, w) latent brightness per bin
        blur = RadianceImage(np.repeat(np.mean(lin, axis=0)[:, :, None], 3, 2))

        ts, xs, ys, ps = [], [], [], []
        for k in range(bins - 1):
            t_edge = (k + 1) / bins
            for yy in range(h):
                for xx in range(w):
                    for _ in range(abs(int(jumps[k, yy, xx]))):
                        ts.append(t_edge)
                        xs.append(xx)
                        ys.append(yy)
                        ps.append(int(np.sign(jumps[k, yy, xx])))
        stream = EventStream(width=w, height=h, t=ts, x=xs, y=ys, p=ps)

        ref_bin = 3
        t_ref = (ref_bin + 0.5) / bins
        req = EdiRequest(blurred=blur, events=stream, t_start=0.0, t_end=1.0,
                         t_ref=t_ref, theta=THETA, bins=bins)
        out = edi_deblur(req)
        expect = lin[ref_bin]
        rel = np.abs(out.data[:, :, 0] - expect) / expect
        assert rel.max() < 1e-6

    def test_self_consistency_against_simulator(self, rng):
        # smooth per-pixel log ramps: blur, simulate, deblur at mid-exposure
        h = w = 5
        cfg = EventConfig(theta=THETA, log_eps=1e-3)
        start = rng.uniform(-1.2, -0.2, (h, w))
        slope = rng.uniform(-1.0, 1.0, (h, w)) * 4 * THETA
        times = np.linspace(0.0, 1.0, 41)
        logs = [start + slope * t for t in times]
        lin = [np.exp(lg) for lg in logs]
        blur = RadianceImage(np.trapezoid(np.stack(lin), times, axis=0)[:, :, None])
        frames = [(t, RadianceImage(lg[:, :, None])) for t, lg in zip(times, logs)]
        stream = simulate_events(frames, cfg)
        req = EdiRequest(blurred=blur, events=stream, t_start=0.0, t_end=1.0,
                         t_ref=0.5, theta=THETA, bins=64)
        out = edi_deblur(req)
        truth = np.exp(start + slope * 0.5)
        rel = np.abs(out.data[:, :, 0] - truth) / truth
        assert rel.max() < THETA

    def test_monotonicity_event_after_ref(self):
        blur = RadianceImage(np.full((1, 1, 3), 0.5))
        base = EdiRequest(blurred=blur, events=empty_stream(1, 1), t_start=0.0,
                          t_end=1.0, t_ref=0.0, theta=THETA, bins=16)
        with_event = EdiRequest(
            blurred=blur,
            events=EventStream(width=1, height=1, t=[0.7], x=[0], y=[0], p=[1]),
            t_start=0.0, t_end=1.0, t_ref=0.0, theta=THETA, bins=16)
        assert edi_deblur(with_event).data[0, 0, 0] < edi_deblur(base).data[0, 0, 0]

    def test_theta_to_zero_limit(self, rng):
        blur = RadianceImage(rng.uniform(0.2, 0.8, (3, 3, 3)))
        n = 20
        stream = EventStream(width=3, height=3,
                             t=np.sort(rng.uniform(0, 1, n)),
                             x=rng.integers(0, 3, n), y=rng.integers(0, 3, n),
                             p=rng.choice([-1, 1], n))
        prev = None
        for theta in (0.2, 0.02, 0.002, 0.0002):
            req = EdiRequest(blurred=blur, events=stream, t_start=0.0,
                             t_end=1.0, t_ref=0.4, theta=theta, bins=16)
            dev = np.abs(edi_deblur(req).data - blur.data).max()
            if prev is not None:
                assert dev < prev
            prev = dev
        assert prev < 1e-4

    def test_bin_resolution_independence(self, rng):
        # on smooth event streams (the regime of the pipeline fixtures),
        # doubling the quadrature resolution barely moves the output
        h = w = 8
        cfg = EventConfig(theta=THETA, log_eps=1e-3)
        start = rng.uniform(-1.2, -0.2, (h, w))
        slope = rng.uniform(-1.0, 1.0, (h, w)) * 4 * THETA
        slope[rng.uniform(size=(h, w)) < 0.5] = 0.0  # static background pixels
        times = np.linspace(0.0, 1.0, 41)
        logs = [start + slope * t for t in times]
        lin = [np.exp(lg) for lg in logs]
        blur = RadianceImage(np.trapezoid(np.stack(lin), times, axis=0)[:, :, None])
        stream = simulate_events(
            [(t, RadianceImage(lg[:, :, None])) for t, lg in zip(times, logs)],
            cfg)
        out32 = edi_deblur(EdiRequest(blurred=blur, events=stream, t_start=0.0,
                                      t_end=1.0, t_ref=0.5, theta=THETA, bins=32))
        out64 = edi_deblur(EdiRequest(blurred=blur, events=stream, t_start=0.0,
                                      t_end=1.0, t_ref=0.5, theta=THETA, bins=64))
        # mean metric: a single event straddling a bin boundary inherently
        # moves its pixel by (e^theta - 1)/bins of the signal
        assert np.abs(out32.data - out64.data).mean() < 1e-3

    def test_validation(self, rng):
        blur = RadianceImage(rng.uniform(0, 1, (4, 4, 3)))
        with pytest.raises(ValueError):
            EdiRequest(blurred=blur, events=empty_stream(), t_start=1.0,
                       t_end=0.0, t_ref=0.5, theta=THETA)
        with pytest.raises(ValueError):
            EdiRequest(blurred=blur, events=empty_stream(), t_start=0.0,
                       t_end=1.0, t_ref=2.0, theta=THETA)
        with pytest.raises(ValueError):
            EdiRequest(blurred=blur, events=empty_stream(), t_start=0.0,
                       t_end=1.0, t_ref=0.5, theta=THETA, bins=1)
        nan_blur = RadianceImage(np.full((4, 4, 3), np.nan))
        req = EdiRequest(blurred=nan_blur, events=empty_stream(), t_start=0.0,
                         t_end=1.0, t_ref=0.5, theta=THETA)
        with pytest.raises(ValueError):
            edi_deblur(req)

    def test_shared_channel_rescale(self, rng):
        # all channels are scaled by the same per-pixel factor
        blur = RadianceImage(rng.uniform(0.1, 1.0, (3, 3, 3)))
        n = 15
        stream = EventStream(width=3, height=3,
                             t=np.sort(rng.uniform(0, 1, n)),
                             x=rng.integers(0, 3, n), y=rng.integers(0, 3, n),
                             p=rng.choice([-1, 1], n))
        out = edi_deblur(EdiRequest(blurred=blur, events=stream, t_start=0.0,
                                    t_end=1.0, t_ref=0.2, theta=THETA))
        ratio = out.data / blur.data
        assert np.allclose(ratio, ratio[:, :, :1], rtol=1e-12)


class TestEdiMidExposure:
    def test_static_scene_returns_blur(self, rng):
        blur = RadianceImage(rng.uniform(0.1, 1.0, (4, 4, 3)))
        traj = ExposureTrajectory(Pose.identity(), Pose.identity(), 0.0, 1.0)
        out = edi_mid_exposure(blur, empty_stream(), traj,
                               EventConfig(theta=THETA))
        assert np.allclose(out.data, blur.data, atol=1e-12)

    def test_matches_scalar_reference(self, rng):
        # 1-pixel scalar oracle: symmetric brightness ramp around mid-exposure
        cfg = EventConfig(theta=THETA)
        traj = ExposureTrajectory(Pose.identity(), Pose.identity(), 0.0, 1.0)
        ts = [0.25, 0.75]
        stream = EventStream(width=1, height=1, t=ts, x=[0, 0], y=[0, 0],
                             p=[1, -1])
        blur = RadianceImage(np.full((1, 1, 1), 0.5))
        out = edi_mid_exposure(blur, stream, traj, cfg, bins=32)
        # scalar quadrature of exp(theta * E_k) over 32 midpoint bins
        denom = 0.0
        for k in range(32):
            t_k = (k + 0.5) / 32
            count = sum(p for t, p in zip(ts, [1, -1]) if t <= t_k) \
                - sum(p for t, p in zip(ts, [1, -1]) if t <= 0.5)
            denom += math.exp(THETA * count) * (1.0 / 32)
        expect = 0.5 * 1.0 / denom
        assert out.data[0, 0, 0] == pytest.approx(expect, rel=1e-12)

    def test_reference_time_is_mid_exposure(self, rng):
        # target for the prior loss: identical to edi_deblur at t_ref = f
        blur = RadianceImage(rng.uniform(0.1, 1.0, (3, 3, 3)))
        n = 10
        stream = EventStream(width=3, height=3,
                             t=np.sort(rng.uniform(0.2, 0.8, n)),
                             x=rng.integers(0, 3, n), y=rng.integers(0, 3, n),
                             p=rng.choice([-1, 1], n))
        traj = ExposureTrajectory(Pose.identity(), Pose.identity(), 0.2, 0.8)
        via_wrapper = edi_mid_exposure(blur, stream, traj, EventConfig(theta=THETA))
        direct = edi_deblur(EdiRequest(blurred=blur, events=stream, t_start=0.2,
                                       t_end=0.8, t_ref=0.5, theta=THETA,
                                       bins=32))
        assert np.array_equal(via_wrapper.data, direct.data)
