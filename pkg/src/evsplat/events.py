"""Event streams: data model, ideal contrast-threshold simulator, polarity
accumulation, and the predicted-event map used by the event loss.

Events carry luminance semantics; RGB renders are reduced to Rec.709
luminance before entering the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image import RadianceImage

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])

EVT_MAGIC = b"EVT1"
EVT_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"),
                       ("p", "i1"), ("pad", "V7")])


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: float
    p: int

    def __post_init__(self):
        if self.p not in (1, -1):
            raise ValueError(f"polarity must be +1 or -1, got {self.p}")


@dataclass
class EventStream:
    """Events sorted by time (ties broken by (y, x, p)), with sensor size."""

    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.empty(0))
    x: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    y: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    p: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.p)):
            raise ValueError("event field lengths differ")
        order = np.lexsort((self.p, self.x, self.y, self.t))
        self.t, self.x, self.y, self.p = (self.t[order], self.x[order],
                                          self.y[order], self.p[order])
        if len(self.t):
            if self.x.min() < 0 or self.x.max() >= self.width \
                    or self.y.min() < 0 or self.y.max() >= self.height:
                raise ValueError("event coordinates outside sensor bounds")
            if not np.all(np.abs(self.p) == 1):
                raise ValueError("polarities must be +1 or -1")

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield Event(int(self.x[i]), int(self.y[i]), float(self.t[i]),
                        int(self.p[i]))


@dataclass(frozen=True)
class EventConfig:
    theta: float = 0.2      # contrast threshold, log-radiance units
    log_eps: float = 1e-3   # offset inside the logarithm, guards log(0)

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.log_eps <= 0:
            raise ValueError("log offset must be positive")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def log_luminance(img: RadianceImage, cfg: EventConfig) -> RadianceImage:
    """ln(luma + eps); single-channel input skips the luminance weighting."""
    if img.channels == 1:
        lum = img.data[:, :, 0]
    else:
        lum = img.data @ LUMA_WEIGHTS
    return RadianceImage(np.log(lum + cfg.log_eps)[:, :, None])


def log_luminance_vjp(img: RadianceImage, cfg: EventConfig,
                      adjoint_log: np.ndarray) -> np.ndarray:
    """Pull an (H, W) adjoint on the log-luminance back to the input image."""
    if img.channels == 1:
        lum = img.data[:, :, 0]
        return (adjoint_log / (lum + cfg.log_eps))[:, :, None]
    lum = img.data @ LUMA_WEIGHTS
    return (adjoint_log / (lum + cfg.log_eps))[:, :, None] * LUMA_WEIGHTS


def accumulate(stream: EventStream, t_pre: float, t_cur: float) -> np.ndarray:
    """Signed per-pixel polarity sum over the half-open window (t_pre, t_cur]."""
    if t_cur < t_pre:
        raise ValueError(f"reversed accumulation window ({t_pre}, {t_cur}]")
    lo = np.searchsorted(stream.t, t_pre, side="right")
    hi = np.searchsorted(stream.t, t_cur, side="right")
    out = np.zeros((stream.height, stream.width))
    np.add.at(out, (stream.y[lo:hi], stream.x[lo:hi]), stream.p[lo:hi])
    return out


# guards floor() against float dust when a brightness change is an exact
# multiple of the threshold (reaching a level counts as crossing it)
_LEVEL_EPS = 1e-9


def simulate_events(frames: list[tuple[float, RadianceImage]],
                    cfg: EventConfig) -> EventStream:
    """Ideal (noise-free) event camera over a sequence of log-luminance frames.

    Per pixel, trigger levels form a fixed lattice anchored at the first
    frame: L0 + j*theta. One event fires whenever the log brightness crosses
    a level, timestamped by linear interpolation between the bracketing
    frames; the reference level advances to the crossed level, so residuals
    below theta carry over. Anchoring the lattice (rather than re-centering
    it on every event) keeps the accumulated polarity within one count of
    (L(b) - L(a)) / theta between any two frame times.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames to simulate events")
    times = [t for t, _ in frames]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("frames must be strictly time-sorted")
    imgs = [img.data[:, :, 0] for _, img in frames]
    h, w = imgs[0].shape
    if any(im.shape != (h, w) for im in imgs):
        raise ValueError("frame dimensions differ")

    theta = cfg.theta
    anchor = imgs[0]
    idx = np.zeros((h, w), dtype=np.int64)
    chunks_t, chunks_x, chunks_y, chunks_p = [], [], [], []
    for (t_prev, l_prev), (t_new, l_new) in zip(zip(times, imgs),
                                                zip(times[1:], imgs[1:])):
        idx_new = np.floor((l_new - anchor) / theta + _LEVEL_EPS).astype(np.int64)
        k = idx_new - idx
        sign = np.sign(k)
        yy, xx = np.nonzero(k)
        if len(yy):
            reps = np.abs(k[yy, xx])
            total = int(reps.sum())
            # j = 1..|k| per pixel, flattened in pixel order
            j = np.arange(total) - np.repeat(np.cumsum(reps) - reps, reps) + 1
            signs = np.repeat(sign[yy, xx], reps)
            # rising crosses idx+1..idx+k; falling crosses idx, idx-1, ...
            base = np.repeat(idx[yy, xx], reps)
            level_index = np.where(signs > 0, base + j, base + 1 - j)
            levels = np.repeat(anchor[yy, xx], reps) + level_index * theta
            slope = np.repeat(l_new[yy, xx] - l_prev[yy, xx], reps)
            frac = np.divide(levels - np.repeat(l_prev[yy, xx], reps), slope,
                             out=np.ones(total), where=slope != 0.0)
            tc = np.clip(t_prev + (t_new - t_prev) * frac, t_prev, t_new)
            chunks_t.append(tc)
            chunks_x.append(np.repeat(xx, reps))
            chunks_y.append(np.repeat(yy, reps))
            chunks_p.append(signs.astype(np.int64))
        idx = idx_new
    if not chunks_t:
        return EventStream(width=w, height=h)
    return EventStream(width=w, height=h,
                       t=np.concatenate(chunks_t), x=np.concatenate(chunks_x),
                       y=np.concatenate(chunks_y), p=np.concatenate(chunks_p))


def predicted_event_map(latent_log_images: list[RadianceImage], i_start: int,
                        i_end: int, cfg: EventConfig) -> np.ndarray:
    """Model-side counterpart of accumulate: (L_end - L_start) / theta."""
    n = len(latent_log_images)
    if not (0 <= i_start < i_end < n):
        raise IndexError(f"latent indices ({i_start}, {i_end}) out of range for {n}")
    l0 = latent_log_images[i_start].data[:, :, 0]
    l1 = latent_log_images[i_end].data[:, :, 0]
    return (l1 - l0) / cfg.theta


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_events(path, stream: EventStream) -> None:
    """Binary format: magic EVT1, LE u32 width/height, u64 count, then
    20-byte records (f64 t, u16 x, u16 y, i8 p, 7 pad bytes)."""
    rec = np.zeros(len(stream), dtype=EVT_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    with open(path, "wb") as f:
        f.write(EVT_MAGIC)
        f.write(np.array([stream.width, stream.height], dtype="<u4").tobytes())
        f.write(np.array([len(stream)], dtype="<u8").tobytes())
        f.write(rec.tobytes())


def read_events(path) -> EventStream:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EVT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        wh = np.frombuffer(f.read(8), dtype="<u4")
        count = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        raw = f.read(count * EVT_RECORD.itemsize)
        if len(raw) != count * EVT_RECORD.itemsize:
            raise ValueError(f"{path}: truncated event payload "
                             f"({len(raw)} bytes for {count} records)")
        rec = np.frombuffer(raw, dtype=EVT_RECORD)
    return EventStream(width=int(wh[0]), height=int(wh[1]), t=rec["t"].copy(),
                       x=rec["x"].astype(np.int64), y=rec["y"].astype(np.int64),
                       p=rec["p"].astype(np.int64))


def write_events_csv(path, stream: EventStream) -> None:
    with open(path, "w") as f:
        f.write("t,x,y,p\n")
        for i in range(len(stream)):
            f.write(f"{float(stream.t[i])!r},{int(stream.x[i])},"
                    f"{int(stream.y[i])},{int(stream.p[i])}\n")


def read_events_csv(path, width: int, height: int) -> EventStream:
    data = np.genfromtxt(path, delimiter=",", names=True)
    if data.size == 0:
        return EventStream(width=width, height=height)
    data = np.atleast_1d(data)
    return EventStream(width=width, height=height, t=data["t"],
                       x=data["x"].astype(np.int64),
                       y=data["y"].astype(np.int64),
                       p=data["p"].astype(np.int64))
