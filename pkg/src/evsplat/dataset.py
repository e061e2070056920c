"""Synthetic dataset generation and dataset loading/validation.

Generation renders a dense sequence of sharp frames along each exposure
trajectory (far finer than the training-time quadrature, so the inverse
problem never sees its own forward discretization), averages them into the
blurred observation, simulates the event stream from the same frames, and
stores ground truth for evaluation. Blurred images are stored both as PNG
(viewing) and PFM (training; linear, lossless at float32).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .edi import edi_mid_exposure
from .events import (EventConfig, EventStream, log_luminance, read_events,
                     simulate_events, write_events)
from .geometry import ExposureTrajectory, Pose, Twist, se3_exp
from .image import RadianceImage, read_pfm, write_pfm, write_png
from .renderer import render
from .scene import CameraIntrinsics, Scene, init_scene
from .trainer import Observation

MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """Validation failure, annotated with the offending file and field."""

    def __init__(self, file: str, field_name: str, message: str):
        super().__init__(f"{file}: {field_name}: {message}")
        self.file = file
        self.field = field_name


@dataclass
class SceneSpec:
    gaussians: int = 200
    sh_degree: int = 1
    extent: float = 1.0
    background: tuple[float, float, float] = (0.05, 0.05, 0.05)
    scale_range: tuple[float, float] = (0.05, 0.15)  # of extent
    opacity_logit_range: tuple[float, float] = (-0.5, 2.0)
    scene_path: str | None = None  # load instead of randomizing


@dataclass
class TrajectorySpec:
    exposure: float = 0.1
    shake_rot_deg: float = 2.0
    shake_trans_frac: float = 0.02       # of scene extent
    init_rot_noise_deg: float = 1.0      # perturbation fed to the trainer
    init_trans_noise_frac: float = 0.01


@dataclass
class CameraSpec:
    width: int = 64
    height: int = 64
    fov_deg: float = 50.0
    distance: float = 4.0

    def intrinsics(self) -> CameraIntrinsics:
        fx = 0.5 * self.width / math.tan(math.radians(self.fov_deg) / 2.0)
        return CameraIntrinsics(fx=fx, fy=fx, cx=(self.width - 1) / 2.0,
                                cy=(self.height - 1) / 2.0,
                                width=self.width, height=self.height)


@dataclass
class SynthConfig:
    views: int = 10
    eval_views: int = 4
    seed: int = 0
    n_frames: int = 51  # dense forward quadrature per exposure
    theta: float = 0.2
    log_eps: float = 1e-3
    edi_bins: int = 32
    store_latents: bool = False

    def __post_init__(self):
        if self.n_frames < 51:
            raise ValueError("dense quadrature needs n_frames >= 51")


@dataclass
class DatasetManifest:
    version: int
    intrinsics: CameraIntrinsics
    observations: list[dict]
    eval_views: list[dict]
    generation: dict

    def to_json(self) -> dict:
        return {"version": self.version,
                "intrinsics": self.intrinsics.to_json(),
                "observations": self.observations,
                "eval_views": self.eval_views,
                "generation": self.generation}

    @staticmethod
    def from_json(d: dict) -> "DatasetManifest":
        return DatasetManifest(version=int(d["version"]),
                               intrinsics=CameraIntrinsics.from_json(d["intrinsics"]),
                               observations=d["observations"],
                               eval_views=d["eval_views"],
                               generation=d["generation"])


@dataclass
class Dataset:
    """Loaded, validated dataset ready for the trainer."""

    root: Path
    manifest: DatasetManifest
    intrinsics: CameraIntrinsics
    event_config: EventConfig
    observations: list[Observation]
    eval_views: list[tuple[Pose, RadianceImage]]
    init_scene: Scene
    gt_trajectories: list[ExposureTrajectory] | None = None
    gt_scene: Scene | None = None


# ---------------------------------------------------------------------------
# camera placement
# ---------------------------------------------------------------------------

def look_at_pose(camera_center: np.ndarray, target: np.ndarray,
                 up=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose with +z forward, +x right, +y down."""
    forward = np.asarray(target, dtype=float) - np.asarray(camera_center, dtype=float)
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose.from_matrix(np.block([[R, (-R @ camera_center)[:, None]],
                                      [np.zeros((1, 3)), np.ones((1, 1))]]))


def _ring_poses(count: int, distance: float, rng: np.random.Generator,
                phase: float) -> list[Pose]:
    poses = []
    for i in range(count):
        az = phase + 2.0 * math.pi * i / count
        el = math.radians(rng.uniform(-15.0, 25.0))
        center = distance * np.array([math.cos(el) * math.sin(az),
                                      math.sin(el),
                                      math.cos(el) * math.cos(az)])
        poses.append(look_at_pose(center, np.zeros(3)))
    return poses


def random_twist(rng: np.random.Generator, rot_rad: float,
                 trans: float) -> Twist:
    """Fixed-magnitude, random-direction twist (rotation and translation)."""
    def unit(v):
        n = np.linalg.norm(v)
        return v / n if n > 0 else np.array([1.0, 0.0, 0.0])
    return Twist(rot_rad * unit(rng.normal(size=3)),
                 trans * unit(rng.normal(size=3)))


def random_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    """Ground-truth scene: vividly colored anisotropic Gaussians in a box."""
    n = spec.gaussians
    points = rng.uniform(-spec.extent, spec.extent, size=(n, 3))
    colors = rng.uniform(0.1, 0.9, size=(n, 3))
    scene = init_scene(points=points, colors=colors, sh_degree=spec.sh_degree,
                       background_color=spec.background)
    for g in scene.gaussians:
        g.log_scale = np.log(rng.uniform(*spec.scale_range, size=3) * spec.extent)
        g.rotation = rng.normal(size=4)
        g.rotation = g.rotation / np.linalg.norm(g.rotation)
        g.opacity_logit = float(rng.uniform(*spec.opacity_logit_range))
        if spec.sh_degree >= 1:
            g.sh_coeffs[:, 1:4] = rng.uniform(-0.15, 0.15, size=(3, 3))
    return scene


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def synth_dataset(scene_spec: SceneSpec, traj_spec: TrajectorySpec,
                  camera_spec: CameraSpec, cfg: SynthConfig,
                  out_dir) -> Dataset:
    if traj_spec.exposure <= 0.0:
        raise ValueError("exposure duration must be positive")
    if traj_spec.exposure == 0.0 and (traj_spec.shake_rot_deg > 0
                                      or traj_spec.shake_trans_frac > 0):
        raise ValueError("camera shake requires a non-degenerate exposure")

    out = Path(out_dir)
    for sub in ("views", "events", "gt", "init"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    K = camera_spec.intrinsics()
    event_cfg = EventConfig(theta=cfg.theta, log_eps=cfg.log_eps)

    if scene_spec.scene_path is not None:
        gt_scene = Scene.load(scene_spec.scene_path)
    else:
        gt_scene = random_scene(scene_spec, rng)
    gt_scene.save(out / "gt" / "scene.json")

    view_poses = _ring_poses(cfg.views, camera_spec.distance, rng, phase=0.0)
    eval_poses = _ring_poses(cfg.eval_views, camera_spec.distance, rng,
                             phase=math.pi / cfg.views)

    obs_entries = []
    gt_trajectories = []
    for vi, mid_pose in enumerate(view_poses):
        t_start = vi * 2.0 * traj_spec.exposure
        t_end = t_start + traj_spec.exposure
        shake = random_twist(rng, math.radians(traj_spec.shake_rot_deg),
                             traj_spec.shake_trans_frac * scene_spec.extent)
        half = Twist(0.5 * shake.omega, 0.5 * shake.v)
        neg_half = Twist(-0.5 * shake.omega, -0.5 * shake.v)
        traj = ExposureTrajectory(se3_exp(neg_half).compose(mid_pose),
                                  se3_exp(half).compose(mid_pose),
                                  t_start, t_end)
        gt_trajectories.append(traj)

        times = [t_start + traj_spec.exposure * j / (cfg.n_frames - 1)
                 for j in range(cfg.n_frames)]
        frames = [render(gt_scene, _interp(traj, t), K) for t in times]
        blurred = RadianceImage(
            np.mean([f.data for f in frames], axis=0).astype(np.float32))
        stream = simulate_events(
            [(t, log_luminance(f, event_cfg)) for t, f in zip(times, frames)],
            event_cfg)

        write_pfm(out / "views" / f"blur_{vi:04d}.pfm", blurred)
        write_png(out / "views" / f"blur_{vi:04d}.png", blurred)
        write_events(out / "events" / f"view_{vi:04d}.evt", stream)
        sharp_mid = frames[(cfg.n_frames - 1) // 2]
        write_pfm(out / "gt" / f"sharp_{vi:04d}.pfm",
                  RadianceImage(sharp_mid.data.astype(np.float32)))
        if cfg.store_latents:
            latent_dir = out / "gt" / "latents" / f"view_{vi:04d}"
            latent_dir.mkdir(parents=True, exist_ok=True)
            for j, f in enumerate(frames):
                write_pfm(latent_dir / f"frame_{j:03d}.pfm",
                          RadianceImage(f.data.astype(np.float32)))

        # trainer initialization: ground truth corrupted by fixed-magnitude noise
        init_traj = ExposureTrajectory(
            se3_exp(random_twist(rng, math.radians(traj_spec.init_rot_noise_deg),
                                 traj_spec.init_trans_noise_frac * scene_spec.extent)
                    ).compose(traj.pose_start),
            se3_exp(random_twist(rng, math.radians(traj_spec.init_rot_noise_deg),
                                 traj_spec.init_trans_noise_frac * scene_spec.extent)
                    ).compose(traj.pose_end),
            t_start, t_end)
        obs_entries.append({
            "blurred_pfm": f"views/blur_{vi:04d}.pfm",
            "blurred_png": f"views/blur_{vi:04d}.png",
            "events": f"events/view_{vi:04d}.evt",
            "sharp_gt": f"gt/sharp_{vi:04d}.pfm",
            "trajectory_init": init_traj.to_json(),
            "t_start": t_start,
            "t_end": t_end,
        })

    with open(out / "gt" / "trajectories.json", "w") as f:
        json.dump([t.to_json() for t in gt_trajectories], f, indent=1)

    eval_entries = []
    for ei, pose in enumerate(eval_poses):
        img = render(gt_scene, pose, K)
        write_pfm(out / "gt" / f"eval_{ei:04d}.pfm",
                  RadianceImage(img.data.astype(np.float32)))
        eval_entries.append({"pose": pose.to_json(),
                             "sharp": f"gt/eval_{ei:04d}.pfm"})

    # initialization scene: true positions with noise, gray color
    pts = np.array([g.position for g in gt_scene.gaussians])
    pts = pts + rng.normal(size=pts.shape) \
        * (traj_spec.init_trans_noise_frac * scene_spec.extent)
    seed_scene = init_scene(points=pts, sh_degree=scene_spec.sh_degree,
                            background_color=scene_spec.background)
    seed_scene.save(out / "init" / "scene.json")

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        intrinsics=K,
        observations=obs_entries,
        eval_views=eval_entries,
        generation={
            "true_scene": "gt/scene.json",
            "true_trajectories": "gt/trajectories.json",
            "init_scene": "init/scene.json",
            "theta": cfg.theta,
            "log_eps": cfg.log_eps,
            "edi_bins": cfg.edi_bins,
            "n_frames": cfg.n_frames,
            "rng_seed": cfg.seed,
            "scene_spec": asdict(scene_spec),
            "trajectory_spec": asdict(traj_spec),
            "camera_spec": asdict(camera_spec),
            "store_latents": cfg.store_latents,
        })
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest.to_json(), f, indent=1)
    return load_dataset(out)


def _interp(traj: ExposureTrajectory, t: float) -> Pose:
    from .geometry import interpolate_pose
    return interpolate_pose(traj, t)


# ---------------------------------------------------------------------------
# loading and validation
# ---------------------------------------------------------------------------

def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(str(manifest_path), "manifest", "file not found")
    with open(manifest_path) as f:
        raw = json.load(f)
    try:
        manifest = DatasetManifest.from_json(raw)
    except (KeyError, ValueError) as e:
        raise DatasetError(str(manifest_path), "manifest", f"malformed: {e}")

    K = manifest.intrinsics
    gen = manifest.generation
    event_cfg = EventConfig(theta=float(gen.get("theta", 0.2)),
                            log_eps=float(gen.get("log_eps", 1e-3)))
    edi_bins = int(gen.get("edi_bins", 32))

    observations = []
    for i, entry in enumerate(manifest.observations):
        field_name = f"observations[{i}]"
        for key in ("blurred_pfm", "events", "trajectory_init", "t_start", "t_end"):
            if key not in entry:
                raise DatasetError(str(manifest_path), f"{field_name}.{key}",
                                   "missing")
        if not float(entry["t_end"]) > float(entry["t_start"]):
            raise DatasetError(str(manifest_path), f"{field_name}.t_end",
                               "exposure window empty")
        blur_path = root / entry["blurred_pfm"]
        if not blur_path.exists():
            raise DatasetError(str(blur_path), f"{field_name}.blurred_pfm",
                               "file not found")
        try:
            blurred = read_pfm(blur_path)
        except ValueError as e:
            raise DatasetError(str(blur_path), f"{field_name}.blurred_pfm", str(e))
        ev_path = root / entry["events"]
        if not ev_path.exists():
            raise DatasetError(str(ev_path), f"{field_name}.events",
                               "file not found")
        try:
            stream = read_events(ev_path)
        except ValueError as e:
            raise DatasetError(str(ev_path), f"{field_name}.events", str(e))
        try:
            traj = ExposureTrajectory.from_json(entry["trajectory_init"])
        except (KeyError, ValueError) as e:
            raise DatasetError(str(manifest_path),
                               f"{field_name}.trajectory_init", str(e))
        edi_target = edi_mid_exposure(blurred, stream, traj, event_cfg,
                                      bins=edi_bins)
        obs = Observation(blurred=blurred, events=stream, trajectory=traj,
                          intrinsics=K, edi_target=edi_target,
                          theta=event_cfg.theta)
        try:
            obs.validate()
        except ValueError as e:
            raise DatasetError(str(blur_path), field_name, str(e))
        observations.append(obs)

    eval_views = []
    train_centers = [Pose.from_json(e["trajectory_init"]["pose_start"])
                     .camera_center() for e in manifest.observations]
    for i, entry in enumerate(manifest.eval_views):
        field_name = f"eval_views[{i}]"
        try:
            pose = Pose.from_json(entry["pose"])
        except (KeyError, ValueError) as e:
            raise DatasetError(str(manifest_path), f"{field_name}.pose", str(e))
        sharp_path = root / entry["sharp"]
        if not sharp_path.exists():
            raise DatasetError(str(sharp_path), f"{field_name}.sharp",
                               "file not found")
        img = read_pfm(sharp_path)
        for j, center in enumerate(train_centers):
            if np.linalg.norm(pose.camera_center() - center) < 1e-9:
                raise DatasetError(str(manifest_path), f"{field_name}.pose",
                                   f"coincides with training view {j}")
        eval_views.append((pose, img))

    init_path = root / gen.get("init_scene", "init/scene.json")
    if not init_path.exists():
        raise DatasetError(str(init_path), "generation.init_scene",
                           "file not found")
    init = Scene.load(init_path)

    gt_trajs = None
    gt_traj_path = root / gen.get("true_trajectories", "gt/trajectories.json")
    if gt_traj_path.exists():
        with open(gt_traj_path) as f:
            gt_trajs = [ExposureTrajectory.from_json(d) for d in json.load(f)]
    gt_scene = None
    gt_scene_path = root / gen.get("true_scene", "gt/scene.json")
    if gt_scene_path.exists():
        gt_scene = Scene.load(gt_scene_path)

    return Dataset(root=root, manifest=manifest, intrinsics=K,
                   event_config=event_cfg, observations=observations,
                   eval_views=eval_views, init_scene=init,
                   gt_trajectories=gt_trajs, gt_scene=gt_scene)
