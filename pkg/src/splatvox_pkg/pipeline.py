"""
Per-frame mapping loop and the build / render / eval / export / synth commands.
"""
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from splatvox_pkg.config import config_to_dict
from splatvox_pkg.errors import DataError, StageError
from splatvox_pkg.eval_metrics import (
    MeshEvalConfig,
    format_table,
    instance_label_accuracy,
    mesh_metrics,
    render_metrics,
    write_report,
    zero_shot_segmentation,
)
from splatvox_pkg.gaussian_field import (
    GaussianField,
    Keyframe,
    KeyframeBuffer,
    load_splat_ply,
    optimize_frame,
    seed_gaussians,
    select_keyframe,
)
from splatvox_pkg.geometry import Intrinsics, Pose
from splatvox_pkg.instance_fusion import (
    InstanceCodebook,
    associate,
    update_codebook,
    update_voxels,
)
from splatvox_pkg.scene_io import (
    FrameBundle,
    load_dataset,
    postprocess_observation,
    write_color_png,
    write_dataset,
    write_depth_png,
)
from splatvox_pkg.splat_render import normal_from_depth, normal_to_rgb, render
from splatvox_pkg.synthetic import (
    WORLD_BUILDERS,
    SyntheticWorld,
    gt_voxel_classes,
    gt_voxel_labels,
    orbit_poses,
    perturb_depth,
    perturb_segmentation,
    raycast_frame,
)
from splatvox_pkg.voxel_grid import VoxelGrid, load_grid_snapshot

logger = logging.getLogger(__name__)

STAGES = (
    "obtain",
    "integrate",
    "associate",
    "update_voxels",
    "update_codebook",
    "new_voxels",
    "seed",
    "keyframe",
    "optimize",
)
SOURCES = ("synthetic", "replay")

GRID_FILE = "grid.ovxg"
CODEBOOK_FILE = "codebook.ovcb"
SPLAT_FILE = "gaussians.ply"
LOSS_TRACE_FILE = "loss_trace.csv"
ASSOCIATION_FILE = "associations.ndjson"
TIMINGS_FILE = "timings.csv"
REPORT_FILE = "run_report.json"
CONFIG_FILE = "config.json"
POSES_FILE = "poses.json"
INTRINSICS_FILE = "intrinsics.json"
KEYFRAMES_FILE = "keyframes.json"
WORLD_FILE = "world.json"
LOSS_COLUMNS = ["iter", "frame", "rgb", "ssim", "depth", "normal", "total"]

@dataclass
class MapState:
    """Everything the mapping loop carries from frame to frame."""
    grid: VoxelGrid
    field: GaussianField
    buffer: KeyframeBuffer
    codebook: InstanceCodebook = None
    frames_since_kf: int = 0
    warmed_up: bool = False
    n_iters: int = 0
    poses: list = field(default_factory=list)
    keyframe_ids: list = field(default_factory=list)
    loss_rows: list = field(default_factory=list)
    association_records: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    new_voxel_total: int = 0

    @classmethod
    def create(cls, config):
        grid = VoxelGrid(config.grid.resolution, config.grid.truncation)
        return cls(grid=grid, field=GaussianField(), buffer=KeyframeBuffer())

    def ensure_codebook(self, dim):
        if self.codebook is None:
            self.codebook = InstanceCodebook(dim)
        return self.codebook

@dataclass
class RunReport:
    """
    Summary of a build.

    timings holds one dict per frame mapping stage name -> milliseconds, in stage order.
    """
    n_frames: int = 0
    counts: dict = field(default_factory=dict)
    timings: list = field(default_factory=list)
    stage_order: list = field(default_factory=lambda: list(STAGES))
    loss_trace: str = None
    fps: float = 0.0
    model_size_mb: float = 0.0
    final_loss: float = None
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def timings_frame(self):
        """Long-format DataFrame with columns frame, stage, ms."""
        rows = [
            {"frame": i, "stage": stage, "ms": ms}
            for i, frame_timings in enumerate(self.timings)
            for stage, ms in frame_timings.items()
        ]
        return pd.DataFrame(rows, columns=["frame", "stage", "ms"])

@contextmanager
def _stage(frame_index, name, timings):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(frame_index, name, e) from e
    finally:
        timings[name] = (time.perf_counter() - start) * 1000.0

def synthetic_world(config):
    builder = WORLD_BUILDERS[config.synthetic.scene]
    return builder(embedding_dim=config.embedding_dim, seed=config.seed)

def synthetic_camera(config):
    """Intrinsics and orbit poses of the synthetic source."""
    syn = config.synthetic
    intrinsics = Intrinsics.from_fov(syn.width, syn.height, syn.fov_deg)
    poses = orbit_poses(
        syn.n_frames,
        radius=syn.orbit_radius,
        height=syn.camera_height,
        arc_deg=syn.arc_deg,
        start_deg=syn.start_deg,
        loops=syn.loops,
    )
    return intrinsics, poses

# Used to generate frames of a synthetic scene, with optional noise
def synthetic_frames(config, world=None, postprocess=True):
    """
    Yield (FrameBundle, SegObservation) pairs ray-cast along the configured orbit, with
    the configured noise applied. Masks are post-processed first unless postprocess is False
    (ray-cast masks already partition the image).
    """
    world = synthetic_world(config) if world is None else world
    intrinsics, poses = synthetic_camera(config)
    noisy = not config.noise.is_identity
    for t, pose in enumerate(poses):
        frame, obs, _ = raycast_frame(world, pose, intrinsics, timestamp=t)
        if postprocess:
            obs = postprocess_observation(obs, config.grid.erosion_radius)
        if noisy:
            obs = perturb_segmentation(obs, config.noise, frame_index=t)
            frame = perturb_depth(frame, config.noise, frame_index=t)
        yield frame, obs

def replay_frames(config, manifest):
    """Yield post-processed (FrameBundle, SegObservation) pairs of a replay dataset."""
    for frame, obs in load_dataset(manifest):
        yield frame, postprocess_observation(obs, config.grid.erosion_radius)

# One iteration of the mapping loop
def process_frame(state, frame, obs, config, rng, timings, frame_index=None):
    """
    Run the per-frame stages after `obtain` on one frame: integrate, associate, update voxel
    counts and the codebook, find new voxels, seed Gaussians, select a keyframe and optimize.

    Parameters:
        state (MapState): Map carried between frames; updated in place.
        frame (FrameBundle): Incoming frame.
        obs (SegObservation): Its post-processed segmentation.
        config (PipelineConfig): Run configuration.
        rng (np.random.Generator): Keyframe sampling source.
        timings (dict): Receives stage -> milliseconds.
        frame_index (int, optional): Position used in error messages. Defaults to the timestamp.

    Raises:
        StageError: If a stage fails; the original error is chained.
    """
    t = frame.timestamp if frame_index is None else frame_index

    with _stage(t, "integrate", timings):
        touched = state.grid.integrate_tsdf(frame)
        state.poses.append({"t": int(frame.timestamp), "pose": [float(x) for x in frame.pose.matrix().ravel()]})

    with _stage(t, "associate", timings):
        if len(obs):
            state.ensure_codebook(len(obs.embeddings[0]))
        results = associate(obs, frame, state.grid, state.codebook, config.fusion) if len(obs) else []
        state.association_records.extend(r.to_record(frame.timestamp) for r in results)
        state.warnings.extend(r.warning for r in results if r.warning)

    with _stage(t, "update_voxels", timings):
        update_voxels(results, state.grid, config.fusion.counting)

    with _stage(t, "update_codebook", timings):
        if results:
            update_codebook(results, obs, state.codebook)

    with _stage(t, "new_voxels", timings):
        new_voxels = state.grid.new_voxel_set(touched)
        state.new_voxel_total += len(new_voxels)

    with _stage(t, "seed", timings):
        primitives, keys = seed_gaussians(new_voxels, state.grid)
        state.field.extend(primitives, keys)

    with _stage(t, "keyframe", timings):
        state.frames_since_kf += 1
        is_keyframe = select_keyframe(frame, state.grid, config.keyframe, state.frames_since_kf, state.buffer)
        if is_keyframe:
            state.frames_since_kf = 0
            state.keyframe_ids.append(int(frame.timestamp))

    with _stage(t, "optimize", timings):
        if config.optimize and len(state.field) and len(state.buffer):
            current = state.buffer[-1] if is_keyframe else Keyframe(frame)
            reports = optimize_frame(state.field, state.buffer, config.optim, rng, current, warmup=not state.warmed_up)
            state.warmed_up = True
            for report in reports:
                state.loss_rows.append([
                    state.n_iters, int(frame.timestamp),
                    report.l_rgb, report.l_ssim, report.l_depth, report.l_normal, report.total,
                ])
                state.n_iters += 1

    logger.debug(
        "Frame %s: %d masks, %d new voxels, %d Gaussians, keyframe=%s",
        frame.timestamp, len(obs), len(new_voxels), len(state.field), is_keyframe,
    )

def _write_artifacts(state, out_dir, intrinsics, config):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state.grid.save_snapshot(out_dir / GRID_FILE)
    state.ensure_codebook(config.embedding_dim).save(out_dir / CODEBOOK_FILE)
    state.field.write_ply(out_dir / SPLAT_FILE)
    pd.DataFrame(state.loss_rows, columns=LOSS_COLUMNS).to_csv(out_dir / LOSS_TRACE_FILE, index=False)
    with open(out_dir / ASSOCIATION_FILE, "w") as f:
        for record in state.association_records:
            f.write(json.dumps(record) + "\n")
    with open(out_dir / POSES_FILE, "w") as f:
        json.dump(state.poses, f)
    keyframes = [
        {"t": t, "camera": [float(x) for x in kf.camera.as_array()]}
        for t, kf in zip(state.keyframe_ids, state.buffer)
    ]
    with open(out_dir / KEYFRAMES_FILE, "w") as f:
        json.dump(keyframes, f, indent=2)
    if intrinsics is not None:
        with open(out_dir / INTRINSICS_FILE, "w") as f:
            json.dump(intrinsics.to_dict(), f, indent=2)
    with open(out_dir / CONFIG_FILE, "w") as f:
        json.dump(config_to_dict(config), f, indent=2)

# Used by `splatvox build`
def run_build(config, source="synthetic", manifest=None, out_dir=None):
    """
    Build a map from a frame source and persist its artifacts.

    Frames are processed one at a time through the stages listed in STAGES. Artifacts are the
    voxel grid snapshot, the instance codebook, the Gaussian field (splat PLY), the loss trace,
    the association log, camera poses and keyframe cameras, the resolved configuration, stage
    timings and the run report. Synthetic builds also store the ground-truth world.

    Parameters:
        config (PipelineConfig): Run configuration.
        source (str): 'synthetic' or 'replay'.
        manifest (str or Path, optional): Replay manifest, required for 'replay'.
        out_dir (str or Path, optional): Output directory. Defaults to config.out_dir.

    Returns:
        RunReport

    Raises:
        ValueError: If the source is unknown or a replay build has no manifest.
        StageError: If any stage fails, naming the frame index and stage.
    """
    if source not in SOURCES:
        raise ValueError(f"Unknown source '{source}'. Expected one of {SOURCES}.")
    out_dir = Path(config.out_dir if out_dir is None else out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if source == "synthetic":
        world = synthetic_world(config)
        world.save(out_dir / WORLD_FILE)
        intrinsics, _ = synthetic_camera(config)
        frames = synthetic_frames(config, world)
        logger.info("Building synthetic scene '%s' (%d frames)", config.synthetic.scene, config.synthetic.n_frames)
    else:
        if manifest is None:
            raise ValueError("A replay build needs a manifest path.")
        manifest = Path(manifest)
        intrinsics = None
        frames = replay_frames(config, manifest)
        world_path = manifest.parent / WORLD_FILE
        if world_path.exists():
            SyntheticWorld.load(world_path).save(out_dir / WORLD_FILE)
        logger.info("Replaying %s", manifest)

    state = MapState.create(config)
    if source == "synthetic":
        state.ensure_codebook(config.embedding_dim)
    rng = np.random.default_rng(config.seed)
    report = RunReport()

    start = time.perf_counter()
    index = 0
    while True:
        timings = {}
        with _stage(index, "obtain", timings):
            item = next(frames, None)
        if item is None:
            break
        frame, obs = item
        intrinsics = frame.intrinsics if intrinsics is None else intrinsics
        process_frame(state, frame, obs, config, rng, timings, frame_index=index)
        report.timings.append({stage: timings[stage] for stage in STAGES})
        index += 1
    elapsed = time.perf_counter() - start

    _write_artifacts(state, out_dir, intrinsics, config)
    report.n_frames = index
    report.counts = {
        "voxels": state.grid.n_voxels,
        "blocks": state.grid.n_blocks,
        "instances": len(state.codebook) if state.codebook is not None else 0,
        "gaussians": len(state.field),
        "new_voxels": state.new_voxel_total,
        "keyframes": len(state.buffer),
    }
    report.loss_trace = str(out_dir / LOSS_TRACE_FILE)
    report.fps = index / elapsed if index and elapsed > 0 else 0.0
    report.model_size_mb = state.field.model_size_mb
    report.final_loss = float(state.loss_rows[-1][-1]) if state.loss_rows else None
    report.warnings = list(state.warnings)

    report.timings_frame().to_csv(out_dir / TIMINGS_FILE, index=False)
    with open(out_dir / REPORT_FILE, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    logger.info(
        "Built %d frames: %d instances, %d Gaussians, %d keyframes",
        index, report.counts["instances"], report.counts["gaussians"], report.counts["keyframes"],
    )
    return report

def _require(path):
    if not Path(path).exists():
        raise DataError(f"Missing artifact: {path}")
    return path

def load_poses(artifacts_dir):
    """Camera poses recorded by a build, as (timestamp, Pose) pairs."""
    with open(_require(Path(artifacts_dir) / POSES_FILE)) as f:
        records = json.load(f)
    return [(r["t"], Pose.from_matrix(r["pose"])) for r in records]

def load_artifact_intrinsics(artifacts_dir):
    with open(_require(Path(artifacts_dir) / INTRINSICS_FILE)) as f:
        return Intrinsics.from_dict(json.load(f))

@dataclass
class RenderedView:
    index: int
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray

# Used by `splatvox render`
def run_render(artifacts_dir, poses=None, out_dir=None):
    """
    Render color, depth and normals of a built Gaussian field through the identity camera.

    Parameters:
        artifacts_dir (str or Path): Build output directory.
        poses (list of Pose, optional): Views to render. Defaults to the build's camera poses.
        out_dir (str or Path, optional): If given, PNGs are written there as
                                         {i:06d}_color.png, _depth.png and _normal.png.

    Returns:
        list of RenderedView

    Raises:
        DataError: If the Gaussian field or intrinsics are missing.
    """
    artifacts_dir = Path(artifacts_dir)
    gaussians = load_splat_ply(_require(artifacts_dir / SPLAT_FILE))
    intrinsics = load_artifact_intrinsics(artifacts_dir)
    if poses is None:
        poses = [pose for _, pose in load_poses(artifacts_dir)]

    views = []
    for i, pose in enumerate(poses):
        out = render(gaussians, pose, intrinsics)
        views.append(RenderedView(i, out.color, out.depth, normal_from_depth(out.depth, intrinsics), out.alpha))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for view in views:
            write_color_png(out_dir / f"{view.index:06d}_color.png", view.color)
            write_depth_png(out_dir / f"{view.index:06d}_depth.png", view.depth)
            write_color_png(out_dir / f"{view.index:06d}_normal.png", normal_to_rgb(view.normal))
        logger.info("Rendered %d views to %s", len(views), out_dir)
    return views

def expected_depth(view, min_alpha=0.5):
    """Alpha-normalized rendered depth; 0 where accumulated alpha is below min_alpha."""
    covered = view.alpha >= min_alpha
    return np.where(covered, view.depth / np.where(covered, view.alpha, 1.0), 0.0)

def fuse_mesh(frames, resolution):
    """TSDF-fuse frames into a fresh grid and extract its mesh."""
    grid = VoxelGrid(resolution)
    for frame in frames:
        grid.integrate_tsdf(frame)
    return grid.extract_mesh()

# Used by `splatvox eval`
def run_eval(artifacts_dir, manifest=None, out_dir=None):
    """
    Evaluate a build against ground truth.

    Ground truth is the synthetic world stored with the build (or next to the replay manifest),
    or the frames of a replay manifest. Rendering metrics compare identity-camera renders with
    ground-truth color at the build's poses. Mesh metrics compare meshes re-fused at
    eval.fuse_resolution from rendered and ground-truth depth. Semantic metrics (world only)
    score the voxel map with zero-shot segmentation and instance-label accuracy.

    Returns:
        dict: Metric report, also written to metrics.json and metrics.md.

    Raises:
        DataError: If no ground truth is available or an artifact is missing.
    """
    artifacts_dir = Path(artifacts_dir)
    out_dir = artifacts_dir if out_dir is None else Path(out_dir)
    world_path = artifacts_dir / WORLD_FILE
    if not world_path.exists() and manifest is not None:
        world_path = Path(manifest).parent / WORLD_FILE
    world = SyntheticWorld.load(world_path) if world_path.exists() else None
    if world is None and manifest is None:
        raise DataError(f"No ground truth for {artifacts_dir}: no {WORLD_FILE} and no replay manifest.")

    with open(_require(artifacts_dir / CONFIG_FILE)) as f:
        eval_cfg = json.load(f)["eval"]
    mesh_cfg = MeshEvalConfig(**eval_cfg)

    intrinsics = load_artifact_intrinsics(artifacts_dir)
    poses = load_poses(artifacts_dir)
    if world is not None:
        gt_frames = [raycast_frame(world, pose, intrinsics, t)[0] for t, pose in poses]
    else:
        gt_frames = [frame for frame, _ in load_dataset(manifest)]
    views = run_render(artifacts_dir, [frame.pose for frame in gt_frames])

    report = {"rendering": render_metrics([v.color for v in views], [f.color for f in gt_frames])}

    # Mesh from rendered depth against mesh from ground-truth depth
    rendered_frames = [
        FrameBundle(np.clip(v.color, 0, 1), expected_depth(v), f.pose, f.intrinsics, f.timestamp)
        for v, f in zip(views, gt_frames)
    ]
    pred_mesh = fuse_mesh(rendered_frames, mesh_cfg.fuse_resolution)
    gt_mesh = fuse_mesh(gt_frames, mesh_cfg.fuse_resolution)
    if pred_mesh.is_empty or gt_mesh.is_empty:
        report["mesh"] = None
        logger.warning("Mesh metrics skipped: empty %s mesh", "rendered" if pred_mesh.is_empty else "ground-truth")
    else:
        report["mesh"] = mesh_metrics(pred_mesh, gt_mesh, mesh_cfg).to_dict()

    if world is not None:
        grid = load_grid_snapshot(_require(artifacts_dir / GRID_FILE))
        codebook = InstanceCodebook.load(_require(artifacts_dir / CODEBOOK_FILE))
        labels = gt_voxel_labels(world, grid)
        if len(codebook):
            semantic = zero_shot_segmentation(grid, codebook, world.class_embeddings(), gt_voxel_classes(world, labels))
            report["semantic"] = semantic.to_dict()
        else:
            report["semantic"] = None
        report["instances"] = instance_label_accuracy(grid, labels).to_dict()

    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(out_dir / "metrics.json", report)
    scene = artifacts_dir.name or "scene"
    table = {"PSNR [dB]": report["rendering"]["psnr"], "SSIM": report["rendering"]["ssim"]}
    if report.get("mesh"):
        table.update({
            "Acc. [cm]": report["mesh"]["acc_cm"],
            "Comp. [cm]": report["mesh"]["comp_cm"],
            "Comp. Rat. [%]": 100 * report["mesh"]["comp_ratio"],
            "F-score [%]": 100 * report["mesh"]["f_score"],
        })
    if report.get("semantic"):
        table.update({
            "mIoU [%]": 100 * report["semantic"]["mIoU"],
            "fIoU [%]": 100 * report["semantic"]["fIoU"],
            "mAcc [%]": 100 * report["semantic"]["mAcc"],
            "fAcc [%]": 100 * report["semantic"]["fAcc"],
        })
    with open(out_dir / "metrics.md", "w") as f:
        f.write(format_table({scene: table}) + "\n")
    return report

# Used by `splatvox export-mesh`
def export_mesh(artifacts_dir, out_path):
    """Extract the marching-cubes mesh of a built grid and write it as PLY."""
    grid = load_grid_snapshot(_require(Path(artifacts_dir) / GRID_FILE))
    mesh = grid.extract_mesh()
    mesh.write_ply(out_path)
    logger.info("Wrote mesh with %d faces to %s", len(mesh.faces), out_path)
    return mesh

# Used by `splatvox export-splat`
def export_splat(artifacts_dir, out_path):
    """Copy a build's Gaussian field to a splat PLY file."""
    gaussians = load_splat_ply(_require(Path(artifacts_dir) / SPLAT_FILE))
    gaussians.write_ply(out_path)
    logger.info("Wrote %d Gaussians to %s", len(gaussians), out_path)
    return gaussians

# Used by `splatvox synth`
def synth(config, out_dir=None):
    """
    Write the configured synthetic scene as a replay dataset, with world.json next to the manifest.

    Returns:
        Path: Manifest path.
    """
    out_dir = Path(config.out_dir if out_dir is None else out_dir)
    world = synthetic_world(config)
    intrinsics, _ = synthetic_camera(config)
    manifest = write_dataset(out_dir, synthetic_frames(config, world, postprocess=False), intrinsics)
    world.save(out_dir / WORLD_FILE)
    logger.info("Wrote %d synthetic frames to %s", config.synthetic.n_frames, out_dir)
    return manifest
