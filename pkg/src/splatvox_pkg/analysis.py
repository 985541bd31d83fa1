import contextlib
import dataclasses
import tempfile
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

from splatvox_pkg import pipeline
from splatvox_pkg.eval_metrics import instance_label_accuracy, zero_shot_segmentation
from splatvox_pkg.instance_fusion import InstanceCodebook
from splatvox_pkg.synthetic import SyntheticWorld, gt_voxel_classes, gt_voxel_labels
from splatvox_pkg.voxel_grid import load_grid_snapshot

LOSS_COMPONENTS = ["rgb", "ssim", "depth", "normal", "total"]

def load_loss_trace(path):
    """
    Read a loss trace written by a build.

    Raises:
        ValueError: If the file lacks the expected columns.
    """
    df = pd.read_csv(path)
    missing = [c for c in ["iter"] + LOSS_COMPONENTS if c not in df.columns]
    if missing:
        raise ValueError(f"Loss trace {path} is missing columns: {missing}.")
    return df

def summarize_loss_trace(df):
    """
    First, last and minimum value of every loss component.

    Parameters:
        df (pd.DataFrame): Loss trace with columns iter, rgb, ssim, depth, normal, total.

    Returns:
        pd.DataFrame: One row per component with columns 'Component', 'First', 'Last', 'Min'
                      and 'Change' (last - first). Empty when the trace is empty.
    """
    if df.empty:
        return pd.DataFrame(columns=["Component", "First", "Last", "Min", "Change"])
    rows = []
    for component in LOSS_COMPONENTS:
        series = df[component]
        rows.append({
            "Component": component,
            "First": series.iloc[0],
            "Last": series.iloc[-1],
            "Min": series.min(),
            "Change": series.iloc[-1] - series.iloc[0],
        })
    return pd.DataFrame(rows)

def plot_loss_trace(df, components=None, log_scale=False):
    """
    Plot loss components against the iteration number, one line per component.

    Parameters:
        df (pd.DataFrame): Loss trace.
        components (list, optional): Components to draw. Defaults to all five.
        log_scale (bool, optional): Use a logarithmic y axis. Default is False.

    Raises:
        ValueError: If the trace is empty.
    """
    if df.empty:
        raise ValueError("Cannot plot an empty loss trace.")
    components = components or LOSS_COMPONENTS

    # Long format so seaborn draws one line per component
    long_df = df.melt(id_vars="iter", value_vars=components, var_name="Component", value_name="Loss")

    plt.figure(figsize=(12, 8))
    sns.lineplot(data=long_df, x="iter", y="Loss", hue="Component")
    if log_scale:
        plt.yscale("log")
    plt.title("Training loss by component", fontsize=16)
    plt.xlabel("Iteration", fontsize=14)
    plt.ylabel("Loss", fontsize=14)
    plt.grid(True, linestyle="--", alpha=0.6)
    plt.tight_layout()
    plt.show()

def plot_stage_timings(timings_df):
    """
    Bar plot of the mean time per pipeline stage.

    Parameters:
        timings_df (pd.DataFrame): Columns frame, stage, ms (timings.csv of a build).
    """
    if timings_df.empty:
        raise ValueError("Cannot plot empty stage timings.")
    plt.figure(figsize=(12, 6))
    sns.barplot(data=timings_df, x="stage", y="ms", order=list(pipeline.STAGES), errorbar=None)
    plt.title("Mean time per stage", fontsize=16)
    plt.xlabel("Stage", fontsize=14)
    plt.ylabel("Time (ms)", fontsize=14)
    plt.xticks(rotation=30)
    plt.tight_layout()
    plt.show()

def _score_build(out_dir):
    """Instance and semantic scores of a synthetic build directory."""
    out_dir = Path(out_dir)
    world = SyntheticWorld.load(out_dir / pipeline.WORLD_FILE)
    grid = load_grid_snapshot(out_dir / pipeline.GRID_FILE)
    codebook = InstanceCodebook.load(out_dir / pipeline.CODEBOOK_FILE)
    labels = gt_voxel_labels(world, grid)
    instances = instance_label_accuracy(grid, labels)
    miou = 0.0
    if len(codebook):
        miou = zero_shot_segmentation(grid, codebook, world.class_embeddings(), gt_voxel_classes(world, labels)).miou
    return {
        "Instances": len(codebook),
        "Merge rate": instances.merge_rate,
        "Accuracy": instances.accuracy,
        "mIoU": miou,
    }

def _sweep_root(out_root):
    if out_root is None:
        return tempfile.TemporaryDirectory(prefix="splatvox_sweep_")
    Path(out_root).mkdir(parents=True, exist_ok=True)
    return contextlib.nullcontext(str(out_root))

# Used to study the fusion threshold on synthetic scenes
def threshold_sweep(config, xis, out_root=None):
    """
    Run one synthetic mapping build per fusion threshold and tabulate the instance map quality.

    Builds run without Gaussian optimization. Each row holds the threshold, the number of
    instances, the instance-merge rate, voxel-label accuracy and the zero-shot mIoU.

    Parameters:
        config (PipelineConfig): Base configuration (scene, noise, grid).
        xis (list of float): Fusion thresholds.
        out_root (str or Path, optional): Where to keep the builds. Defaults to a temporary directory.

    Returns:
        pd.DataFrame: Columns 'xi', 'Instances', 'Merge rate', 'Accuracy', 'mIoU'.
    """
    rows = []
    with _sweep_root(out_root) as root:
        for xi in xis:
            cfg = dataclasses.replace(
                config, fusion=dataclasses.replace(config.fusion, xi=xi), optimize=False
            )
            out_dir = Path(root) / f"xi_{xi:g}"
            pipeline.run_build(cfg, source="synthetic", out_dir=out_dir)
            rows.append({"xi": xi, **_score_build(out_dir)})
    return pd.DataFrame(rows)

# Used to study map size against voxel resolution
def resolution_sweep(config, resolutions, out_root=None):
    """
    Run one synthetic build per voxel resolution and tabulate Gaussian count, model size,
    final loss and frame rate.

    Returns:
        pd.DataFrame: Columns 'Resolution', 'Gaussians', 'Model size (MB)', 'Final loss', 'FPS'.
    """
    rows = []
    with _sweep_root(out_root) as root:
        for resolution in resolutions:
            cfg = dataclasses.replace(config, grid=dataclasses.replace(config.grid, resolution=resolution))
            report = pipeline.run_build(cfg, source="synthetic", out_dir=Path(root) / f"res_{resolution:g}")
            rows.append({
                "Resolution": resolution,
                "Gaussians": report.counts["gaussians"],
                "Model size (MB)": report.model_size_mb,
                "Final loss": report.final_loss,
                "FPS": report.fps,
            })
    return pd.DataFrame(rows)

def plot_sweep(df, x, y, title=None):
    """
    Line plot of one sweep column against another.

    Raises:
        ValueError: If a column is missing.
    """
    for column in (x, y):
        if column not in df.columns:
            raise ValueError(f"Column '{column}' not in sweep table {list(df.columns)}.")
    plt.figure(figsize=(10, 6))
    sns.lineplot(data=df, x=x, y=y, marker="o")
    plt.title(title or f"{y} vs {x}", fontsize=16)
    plt.xlabel(x, fontsize=14)
    plt.ylabel(y, fontsize=14)
    plt.grid(True, linestyle="--", alpha=0.6)
    plt.tight_layout()
    plt.show()
