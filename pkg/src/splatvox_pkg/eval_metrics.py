import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import trimesh
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from splatvox_pkg.splat_render import ssim

PSNR_CAP = 99.0

@dataclass
class MeshEvalConfig:
    """
    Parameters:
        samples (int): Points sampled per mesh (area-weighted).
        threshold (float): Distance in meters for completion ratio and F-score.
        seed (int): Sampling seed.
        fuse_resolution (float): Voxel size used when re-fusing rendered depth into an evaluation mesh.
    """
    samples: int = 20000
    threshold: float = 0.05
    seed: int = 0
    fuse_resolution: float = 0.01

    def __post_init__(self):
        if not isinstance(self.samples, int) or self.samples <= 0:
            raise ValueError(f"samples must be a positive integer, got {self.samples}.")
        for name in ("threshold", "fuse_resolution"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}.")

@dataclass
class MeshMetrics:
    """Accuracy and completeness in centimeters; completion ratio and F-score in [0, 1]."""
    acc_cm: float
    comp_cm: float
    comp_ratio: float
    f_score: float

    def to_dict(self):
        return asdict(self)

@dataclass
class SemanticEvalReport:
    classes: list
    iou: dict
    acc: dict
    miou: float
    fiou: float
    macc: float
    facc: float
    confusion: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {
            "classes": list(self.classes),
            "iou": dict(self.iou),
            "acc": dict(self.acc),
            "mIoU": self.miou,
            "fIoU": self.fiou,
            "mAcc": self.macc,
            "fAcc": self.facc,
        }

    def to_table(self):
        """Per-class IoU and accuracy plus the four summary scores, as a DataFrame."""
        table = pd.DataFrame({
            "Class": list(self.classes),
            "IoU": [self.iou.get(c, np.nan) for c in self.classes],
            "Acc": [self.acc.get(c, np.nan) for c in self.classes],
        })
        summary = pd.DataFrame({
            "Class": ["mean", "frequency-weighted"],
            "IoU": [self.miou, self.fiou],
            "Acc": [self.macc, self.facc],
        })
        return pd.concat([table, summary], ignore_index=True)

@dataclass
class InstanceEvalReport:
    accuracy: float
    merge_rate: float
    n_instances: int
    mapping: dict

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "merge_rate": self.merge_rate,
            "n_instances": self.n_instances,
            "mapping": {str(k): v for k, v in self.mapping.items()},
        }

# Peak signal-to-noise ratio on [0, 1] images
def psnr(a, b):
    """
    PSNR = 10·log10(1 / MSE) in decibels, capped at 99 dB (identical images).

    Raises:
        ValueError: If the images differ in shape.

    Examples:
        >>> psnr(np.zeros((4, 4)), np.full((4, 4), 0.1))  # doctest: +ELLIPSIS
        20.0...
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"PSNR inputs differ in shape: {a.shape} vs {b.shape}.")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)

def _as_trimesh(mesh):
    if hasattr(mesh, "to_trimesh"):
        mesh = mesh.to_trimesh()
    if mesh is None or len(mesh.faces) == 0 or mesh.area <= 0:
        raise ValueError("Mesh metrics need non-empty meshes.")
    return mesh

# Reconstruction quality of a predicted mesh against ground truth
def mesh_metrics(pred, gt, cfg=None):
    """
    Sample points uniformly by area on both meshes and compare them through nearest neighbours.

    acc is the mean distance from predicted to ground-truth samples and comp the mean distance
    the other way, both in centimeters. comp_ratio is the share of ground-truth samples within
    cfg.threshold of the prediction; the F-score is the harmonic mean of that recall and the
    matching precision.

    Parameters:
        pred, gt (TriangleMesh or trimesh.Trimesh): Meshes in meters.
        cfg (MeshEvalConfig, optional): Sampling settings.

    Returns:
        MeshMetrics

    Raises:
        ValueError: If either mesh is empty.
    """
    cfg = cfg or MeshEvalConfig()
    pred, gt = _as_trimesh(pred), _as_trimesh(gt)

    # The same seed for both meshes makes a self-comparison exact
    pred_points, _ = trimesh.sample.sample_surface(pred, cfg.samples, seed=cfg.seed)
    gt_points, _ = trimesh.sample.sample_surface(gt, cfg.samples, seed=cfg.seed)

    to_gt, _ = cKDTree(gt_points).query(pred_points)
    to_pred, _ = cKDTree(pred_points).query(gt_points)

    precision = float(np.mean(to_gt < cfg.threshold))
    recall = float(np.mean(to_pred < cfg.threshold))
    f_score = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MeshMetrics(
        acc_cm=float(np.mean(to_gt)) * 100.0,
        comp_cm=float(np.mean(to_pred)) * 100.0,
        comp_ratio=recall,
        f_score=f_score,
    )

# Open-vocabulary segmentation of the voxel map
def zero_shot_segmentation(grid, codebook, label_embeddings, gt_labels):
    """
    Label every ground-truth voxel with the class whose embedding is closest to the codebook
    embedding of the voxel's argmax instance, then score against ground truth.

    Voxels with no instance are misses for their ground-truth class. mIoU and mAcc average over
    classes present in the ground truth; fIoU and fAcc weight each class by its voxel share.

    Parameters:
        grid (VoxelGrid): Map.
        codebook (InstanceCodebook): Instance embeddings.
        label_embeddings (dict): Class name -> unit embedding.
        gt_labels (dict): VoxelKey -> ground-truth class name.

    Returns:
        SemanticEvalReport

    Raises:
        ValueError: If the codebook is empty.
    """
    if len(codebook) == 0:
        raise ValueError("Zero-shot segmentation needs a non-empty codebook.")
    classes = sorted(label_embeddings)
    class_index = {c: i for i, c in enumerate(classes)}
    matrix = np.stack([np.asarray(label_embeddings[c], dtype=np.float64) for c in classes])

    # Class of every instance by maximum embedding similarity
    instance_class = {
        gamma: int(np.argmax(matrix @ codebook.embedding(gamma))) for gamma in codebook.ids
    }

    # Last column collects voxels without a prediction
    n = len(classes)
    confusion = np.zeros((n, n + 1), dtype=np.int64)
    for key, gt_class in gt_labels.items():
        if gt_class not in class_index:
            raise ValueError(f"Ground-truth class '{gt_class}' has no label embedding.")
        gamma = grid.label_query(key)
        predicted = instance_class.get(gamma, n)
        confusion[class_index[gt_class], predicted] += 1

    gt_counts = confusion.sum(axis=1)
    pred_counts = confusion[:, :n].sum(axis=0)
    tp = np.diag(confusion[:, :n])
    total = gt_counts.sum()
    present = gt_counts > 0

    iou, acc = {}, {}
    for i, c in enumerate(classes):
        if present[i]:
            iou[c] = float(tp[i] / (gt_counts[i] + pred_counts[i] - tp[i]))
            acc[c] = float(tp[i] / gt_counts[i])
    if total == 0:
        return SemanticEvalReport(classes, iou, acc, 0.0, 0.0, 0.0, 0.0, confusion)

    freq = gt_counts / total
    return SemanticEvalReport(
        classes=classes,
        iou=iou,
        acc=acc,
        miou=float(np.mean([iou[c] for c in iou])),
        fiou=float(sum(freq[class_index[c]] * iou[c] for c in iou)),
        macc=float(np.mean([acc[c] for c in acc])),
        facc=float(tp.sum() / total),
        confusion=confusion,
    )

def instance_label_accuracy(grid, gt_labels):
    """
    Compare argmax voxel labels with ground-truth object IDs.

    Map instances and ground-truth objects are matched one-to-one so that the number of
    voxels shared by matched pairs is maximal. accuracy is the share of ground-truth voxels
    whose instance is matched to their object, so both extra fragments of an object and
    instances spanning two objects count as errors. merge_rate is the share of ground-truth
    objects whose majority instance is also the majority instance of another object.

    Parameters:
        grid (VoxelGrid): Map.
        gt_labels (dict): VoxelKey -> ground-truth object ID.

    Returns:
        InstanceEvalReport
    """
    votes = defaultdict(Counter)
    by_object = defaultdict(Counter)
    predictions = {}
    for key, obj in gt_labels.items():
        gamma = grid.label_query(key)
        predictions[key] = gamma
        if gamma is not None:
            votes[gamma][obj] += 1
            by_object[obj][gamma] += 1

    mapping = {}
    if votes:
        instances = sorted(votes)
        objects_seen = sorted(by_object)
        overlap = np.array([[votes[g][o] for o in objects_seen] for g in instances], dtype=np.int64)
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        mapping = {
            instances[r]: objects_seen[c] for r, c in sorted(zip(rows, cols)) if overlap[r, c] > 0
        }
    correct = sum(1 for key, obj in gt_labels.items() if mapping.get(predictions[key]) == obj)
    accuracy = correct / len(gt_labels) if gt_labels else 0.0

    majority = {
        obj: min(counter, key=lambda g: (-counter[g], g)) for obj, counter in by_object.items()
    }
    shared = Counter(majority.values())
    objects = set(gt_labels.values())
    merged = sum(1 for obj in objects if obj in majority and shared[majority[obj]] > 1)
    merge_rate = merged / len(objects) if objects else 0.0
    return InstanceEvalReport(accuracy, merge_rate, len(grid.label_sizes()), mapping)

# Render quality over a set of views
def render_metrics(rendered_images, target_images):
    """Mean PSNR and SSIM over paired images."""
    if len(rendered_images) != len(target_images):
        raise ValueError("Rendered and target image lists differ in length.")
    if not rendered_images:
        return {"psnr": float("nan"), "ssim": float("nan"), "n_views": 0}
    return {
        "psnr": float(np.mean([psnr(a, b) for a, b in zip(rendered_images, target_images)])),
        "ssim": float(np.mean([ssim(a, b) for a, b in zip(rendered_images, target_images)])),
        "n_views": len(rendered_images),
    }

def format_table(results, decimals=2):
    """
    Metric table with one column per scene plus an average column.

    Parameters:
        results (dict): Scene name -> {metric name -> value}.
        decimals (int): Rounding of the printed values.

    Returns:
        str: Aligned text table.
    """
    table = pd.DataFrame(results)
    if table.empty:
        return ""
    table["Avg."] = table.mean(axis=1, numeric_only=True)
    return table.round(decimals).to_string()

def write_report(path, report):
    """Write a metric report as indented JSON."""
    with open(path, "w") as f:
        json.dump(report, f, indent=2, default=float)
