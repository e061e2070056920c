"""Joint optimization of Gaussian parameters and per-exposure camera
trajectories: Adam over all parameter groups, driven by the blur, event and
EDI losses on one observation per step.

Pose updates are applied as left-multiplied exponentials of the Adam twist
step and re-linearized every iteration; Adam uses the splatting-style
epsilon of 1e-15, which materially changes small-gradient behavior compared
to the textbook 1e-8.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .events import EventConfig, EventStream, log_luminance, log_luminance_vjp
from .geometry import (ExposureTrajectory, Pose, Twist, latent_timestamps,
                       rotation_geodesic_angle, se3_exp)
from .image import RadianceImage
from .losses import (LossReport, LossWeights, blur_loss, edi_loss, event_loss,
                     psnr, ssim, total_loss)
from .renderer import LatentRenderContext, render
from .scene import CameraIntrinsics, Scene


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Observation:
    """One blurred capture: image, its event stream, the optimizable exposure
    trajectory, and the cached EDI prior target."""

    blurred: RadianceImage
    events: EventStream
    trajectory: ExposureTrajectory
    intrinsics: CameraIntrinsics
    edi_target: RadianceImage
    theta: float | None = None  # contrast threshold of the capture

    def __post_init__(self):
        self._cum_counts: np.ndarray | None = None
        self._cum_n: int = 0

    def validate(self) -> "Observation":
        K = self.intrinsics
        for name, img in (("blurred", self.blurred), ("edi_target", self.edi_target)):
            if (img.height, img.width) != (K.height, K.width):
                raise ValueError(f"{name} image does not match intrinsics "
                                 f"({img.height}x{img.width} vs {K.height}x{K.width})")
        if (self.events.height, self.events.width) != (K.height, K.width):
            raise ValueError("event sensor size does not match intrinsics")
        if len(self.events):
            margin = 1e-6 * self.trajectory.duration
            if self.events.t[0] < self.trajectory.t_start - margin \
                    or self.events.t[-1] > self.trajectory.t_end + margin:
                raise ValueError("event timestamps outside the exposure window")
        return self

    def cumulative_counts(self, n_latent: int) -> np.ndarray:
        """Inclusive per-pixel polarity sums at each latent timestamp, so any
        half-open window accumulation is a difference of two slices."""
        if self._cum_counts is None or self._cum_n != n_latent:
            times = latent_timestamps(self.trajectory, n_latent)
            h, w = self.intrinsics.height, self.intrinsics.width
            out = np.zeros((n_latent, h, w))
            acc = np.zeros((h, w))
            prev = 0
            for i, t in enumerate(times):
                hi = int(np.searchsorted(self.events.t, t, side="right"))
                np.add.at(acc, (self.events.y[prev:hi], self.events.x[prev:hi]),
                          self.events.p[prev:hi])
                prev = hi
                out[i] = acc
            self._cum_counts = out
            self._cum_n = n_latent
        return self._cum_counts


@dataclass
class TrainConfig:
    n_latent: int = 5
    iterations: int = 20000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_pose: float = 1e-3
    lr_pose_final: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    rng_seed: int = 0
    pose_warmup: int = 0
    lambda_blur: float = 1.0
    lambda_ev: float = 0.1
    lambda_edi: float = 1.0
    lambda_ssim: float = 0.2
    log_eps: float = 1e-3
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.n_latent % 2 == 0 or self.n_latent < 1:
            raise ValueError("n_latent must be odd and >= 1")
        for name in ("lr_position", "lr_log_scale", "lr_rotation", "lr_opacity",
                     "lr_sh", "lr_pose"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0 (0 freezes the group)")

    def weights(self, theta: float) -> LossWeights:
        return LossWeights(self.lambda_blur, self.lambda_ev, self.lambda_edi,
                           self.lambda_ssim, theta)

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


GAUSSIAN_GROUPS = ("position", "log_scale", "rotation", "opacity_logit", "sh")


@dataclass
class AdamState:
    """First/second moment accumulators per parameter group plus the shared
    step counter and the per-epoch observation order."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch_order: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    @staticmethod
    def initialize(scene: Scene, n_observations: int) -> "AdamState":
        arrays = scene.to_arrays()
        m = {k: np.zeros_like(arrays[k], dtype=float) for k in GAUSSIAN_GROUPS}
        m["pose"] = np.zeros((n_observations, 2, 6))
        v = {k: np.zeros_like(val) for k, val in m.items()}
        return AdamState(m=m, v=v)

    def save(self, path) -> None:
        payload = {f"m_{k}": v for k, v in self.m.items()}
        payload.update({f"v_{k}": v for k, v in self.v.items()})
        payload["step"] = np.array([self.step], dtype=np.int64)
        payload["epoch_order"] = self.epoch_order
        np.savez(path, **payload)

    @staticmethod
    def load(path) -> "AdamState":
        with np.load(path) as data:
            m = {k[2:]: data[k].copy() for k in data.files if k.startswith("m_")}
            v = {k[2:]: data[k].copy() for k in data.files if k.startswith("v_")}
            return AdamState(m=m, v=v, step=int(data["step"][0]),
                             epoch_order=data["epoch_order"].copy())


def _decayed(lr0: float, lr_final: float, step: int, total: int) -> float:
    if lr0 <= 0.0:
        return 0.0
    frac = min(max(step / max(total, 1), 0.0), 1.0)
    return lr0 * (lr_final / lr0) ** frac


def _adam_update(m, v, g, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    return lr * mhat / (np.sqrt(vhat) + eps)


def train_step(scene: Scene, observations: list[Observation],
               config: TrainConfig, adam: AdamState,
               rng: np.random.Generator) -> LossReport:
    """One optimization step on the next round-robin observation. Mutates the
    scene parameters, the chosen observation's trajectory and the Adam state."""
    n_obs = len(observations)
    k = adam.step
    if k % n_obs == 0:
        adam.epoch_order = rng.permutation(n_obs)
    obs_index = int(adam.epoch_order[k % n_obs])
    obs = observations[obs_index]

    theta = obs.theta if obs.theta is not None else LossWeights().theta
    weights = config.weights(theta=theta)
    event_cfg = EventConfig(theta=theta, log_eps=config.log_eps)

    n = config.n_latent
    ctx = LatentRenderContext(scene, obs.trajectory, obs.intrinsics, n)
    latents = ctx.latents
    blurred = RadianceImage(np.mean([im.data for im in latents], axis=0))

    blur_val, blur_adj = blur_loss(blurred, obs.blurred, weights)
    log_images = [log_luminance(im, event_cfg) for im in latents]
    event_val, event_log_adjs = event_loss(
        log_images, obs.events, ctx.times, weights, rng,
        cumulative=obs.cumulative_counts(n))
    mid = (n - 1) // 2
    edi_val, edi_adj = edi_loss(latents[mid], obs.edi_target, weights)
    report = total_loss(blur_val, event_val, edi_val, weights,
                        blur_adjoint=blur_adj, event_adjoints=event_log_adjs,
                        edi_adjoint=edi_adj)
    if not math.isfinite(report.total):
        raise TrainingDiverged(
            f"non-finite loss at step {k} on observation {obs_index}: "
            f"blur={blur_val} event={event_val} edi={edi_val}")

    adjoints = []
    for i in range(n):
        adj = (weights.lambda_blur / n) * blur_adj
        if weights.lambda_ev > 0.0:
            adj = adj + weights.lambda_ev * log_luminance_vjp(
                latents[i], event_cfg, event_log_adjs[i])
        if i == mid and weights.lambda_edi > 0.0:
            adj = adj + weights.lambda_edi * edi_adj
        adjoints.append(adj)
    grad = ctx.backward(adjoints).validate()

    # parameter updates
    t = k + 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    arrays = scene.to_arrays()
    grads = {"position": grad.position, "log_scale": grad.log_scale,
             "rotation": grad.rotation, "opacity_logit": grad.opacity_logit,
             "sh": grad.sh}
    lrs = {"position": _decayed(config.lr_position, config.lr_position_final,
                                k, config.iterations),
           "log_scale": config.lr_log_scale, "rotation": config.lr_rotation,
           "opacity_logit": config.lr_opacity, "sh": config.lr_sh}
    touched = {}
    for name in GAUSSIAN_GROUPS:
        if lrs[name] <= 0.0:
            continue
        step_val = _adam_update(adam.m[name], adam.v[name], grads[name],
                                lrs[name], b1, b2, eps, t)
        touched[name] = arrays[name] - step_val
    if touched:
        if "rotation" in touched:
            q = touched["rotation"]
            touched["rotation"] = q / np.linalg.norm(q, axis=1, keepdims=True)
        for i, g in enumerate(scene.gaussians):
            if "position" in touched:
                g.position = touched["position"][i]
            if "log_scale" in touched:
                g.log_scale = touched["log_scale"][i]
            if "rotation" in touched:
                g.rotation = touched["rotation"][i]
            if "opacity_logit" in touched:
                g.opacity_logit = float(touched["opacity_logit"][i])
            if "sh" in touched:
                g.sh_coeffs = touched["sh"][i]

    lr_pose = _decayed(config.lr_pose, config.lr_pose_final, k, config.iterations)
    if lr_pose > 0.0 and k >= config.pose_warmup:
        g_pose = np.stack([grad.twist_start.as_array(),
                           grad.twist_end.as_array()])
        step_val = _adam_update(adam.m["pose"][obs_index],
                                adam.v["pose"][obs_index], g_pose,
                                lr_pose, b1, b2, eps, t)
        obs.trajectory = ExposureTrajectory(
            se3_exp(Twist.from_array(-step_val[0])).compose(obs.trajectory.pose_start),
            se3_exp(Twist.from_array(-step_val[1])).compose(obs.trajectory.pose_end),
            obs.trajectory.t_start, obs.trajectory.t_end)

    adam.step += 1
    return report


def train(scene: Scene, dataset, config: TrainConfig, out_dir=None,
          resume_from=None) -> tuple[Scene, list[ExposureTrajectory], list[dict]]:
    """Run the full loop: per-step JSON-lines log, checkpoints every
    config.checkpoint_every iterations, resumable from a checkpoint directory."""
    observations = dataset.observations
    for obs in observations:
        obs.validate()
        if obs.theta is None:
            obs.theta = dataset.event_config.theta

    adam = AdamState.initialize(scene, len(observations))
    start_step = 0
    if resume_from is not None:
        resume_from = Path(resume_from)
        scene = Scene.load(resume_from / "scene.json")
        trajectories = _load_trajectories(resume_from / "trajectories.json")
        for obs, traj in zip(observations, trajectories):
            obs.trajectory = traj
        adam = AdamState.load(resume_from / "adam_state.npz")
        start_step = adam.step

    rng = np.random.default_rng(config.rng_seed)
    _replay_rng(rng, observations, config, start_step)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "training_log.jsonl",
                        "a" if resume_from else "w")

    log: list[dict] = []
    try:
        for k in range(start_step, config.iterations):
            try:
                report = train_step(scene, observations, config, adam, rng)
            except TrainingDiverged:
                if out_dir is not None:
                    _dump_state(out_dir / "diverged", scene, observations, adam,
                                config)
                raise
            entry = report.to_json(k)
            log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
            if out_dir is not None and config.checkpoint_every > 0 \
                    and (k + 1) % config.checkpoint_every == 0:
                save_checkpoint(out_dir, scene, observations, adam, config)
        if out_dir is not None:
            save_checkpoint(out_dir, scene, observations, adam, config,
                            name="final")
    finally:
        if log_file is not None:
            log_file.close()
    return scene, [obs.trajectory for obs in observations], log


def _replay_rng(rng: np.random.Generator, observations, config: TrainConfig,
                start_step: int) -> None:
    """Fast-forward the RNG so a resumed run draws the same stream as an
    uninterrupted one."""
    n_obs = len(observations)
    for k in range(start_step):
        if k % n_obs == 0:
            rng.permutation(n_obs)
        for i in range(config.n_latent - 1):
            rng.integers(0, i + 1)


def save_checkpoint(out_dir, scene: Scene, observations, adam: AdamState,
                    config: TrainConfig, name: str | None = None) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    label = name if name is not None else f"{stamp}_iter{adam.step:06d}"
    ckpt = Path(out_dir) / "checkpoints" / label
    ckpt.mkdir(parents=True, exist_ok=True)
    scene.save(ckpt / "scene.json")
    _save_trajectories(ckpt / "trajectories.json",
                       [o.trajectory for o in observations])
    adam.save(ckpt / "adam_state.npz")
    with open(ckpt / "config.json", "w") as f:
        json.dump(config.to_json(), f, indent=1)
    return ckpt


def _dump_state(path, scene, observations, adam, config) -> None:
    Path(path).mkdir(parents=True, exist_ok=True)
    scene.save(Path(path) / "scene.json")
    _save_trajectories(Path(path) / "trajectories.json",
                       [o.trajectory for o in observations])
    adam.save(Path(path) / "adam_state.npz")
    with open(Path(path) / "config.json", "w") as f:
        json.dump(config.to_json(), f, indent=1)


def _save_trajectories(path, trajectories) -> None:
    with open(path, "w") as f:
        json.dump([t.to_json() for t in trajectories], f, indent=1)


def _load_trajectories(path) -> list[ExposureTrajectory]:
    with open(path) as f:
        return [ExposureTrajectory.from_json(d) for d in json.load(f)]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(scene: Scene, eval_views: list[tuple[Pose, RadianceImage]],
             K: CameraIntrinsics) -> dict:
    """Sharp novel-view metrics: per-view and mean PSNR/SSIM."""
    rows = []
    for i, (pose, gt) in enumerate(eval_views):
        img = render(scene, pose, K)
        rows.append({"view": i, "psnr": psnr(img, gt), "ssim": ssim(img, gt)})
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    return {"views": rows, "mean_psnr": mean_psnr, "mean_ssim": mean_ssim}


def pose_error(est: ExposureTrajectory,
               gt: ExposureTrajectory) -> tuple[float, float]:
    """(rotation degrees, translation meters) between corresponding endpoint
    poses, averaged over start and end."""
    rot = 0.5 * (rotation_geodesic_angle(est.pose_start, gt.pose_start)
                 + rotation_geodesic_angle(est.pose_end, gt.pose_end))
    trans = 0.5 * (float(np.linalg.norm(est.pose_start.t - gt.pose_start.t))
                   + float(np.linalg.norm(est.pose_end.t - gt.pose_end.t)))
    return math.degrees(rot), trans
