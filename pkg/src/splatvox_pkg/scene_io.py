import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from splatvox_pkg.errors import DataError
from splatvox_pkg.geometry import Intrinsics, Pose

EMBEDDING_HEADER = struct.Struct("<II")  # count, dim

@dataclass
class FrameBundle:
    """
    One RGB-D frame with its camera.

    Parameters:
        color (np.ndarray): (H, W, 3) float image, channels in [0, 1].
        depth (np.ndarray): (H, W) depth in meters, 0 marks invalid pixels.
        pose (Pose): Camera-to-world pose.
        intrinsics (Intrinsics): Camera intrinsics.
        timestamp (int): Frame index t.

    Raises:
        ValueError: If image sizes disagree with the intrinsics or depth is negative.
    """
    color: np.ndarray
    depth: np.ndarray
    pose: Pose
    intrinsics: Intrinsics
    timestamp: int = 0

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        expected = self.intrinsics.shape
        if self.color.shape != expected + (3,):
            raise ValueError(f"Color image has shape {self.color.shape}, expected {expected + (3,)}.")
        if self.depth.shape != expected:
            raise ValueError(f"Depth image has shape {self.depth.shape}, expected {expected}.")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError(f"Frame {self.timestamp}: depth must be finite and non-negative.")

    @property
    def valid_depth(self):
        return self.depth > 0

@dataclass
class SegObservation:
    """
    Instance masks of one frame with one unit-norm embedding per mask and optional captions.

    Raises:
        ValueError: If mask and embedding counts differ, or an embedding is not unit norm.
    """
    masks: list
    embeddings: list
    captions: list = None

    def __post_init__(self):
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        self.embeddings = [np.asarray(f, dtype=np.float64) for f in self.embeddings]
        if len(self.masks) != len(self.embeddings):
            raise ValueError(
                f"Got {len(self.masks)} masks but {len(self.embeddings)} embeddings."
            )
        for k, f in enumerate(self.embeddings):
            if abs(np.linalg.norm(f) - 1.0) > 1e-6:
                raise ValueError(f"Embedding {k} is not unit norm (|f| = {np.linalg.norm(f):.6f}).")
        if self.captions is not None and len(self.captions) != len(self.masks):
            raise ValueError(f"Got {len(self.captions)} captions for {len(self.masks)} masks.")

    def __len__(self):
        return len(self.masks)

    @classmethod
    def empty(cls):
        return cls(masks=[], embeddings=[], captions=[])

    def is_disjoint(self):
        """True when no pixel belongs to two masks."""
        if not self.masks:
            return True
        return int(np.max(np.sum(self.masks, axis=0))) <= 1

    def label_image(self):
        """
        Encode the masks as one indexed image: 0 for no mask, k for the k-th mask (1-based).

        Raises:
            ValueError: If the masks overlap.
        """
        if not self.is_disjoint():
            raise ValueError("Overlapping masks cannot be encoded as a single label image.")
        if not self.masks:
            raise ValueError("An observation without masks has no image size.")
        labels = np.zeros(self.masks[0].shape, dtype=np.uint16)
        for k, mask in enumerate(self.masks, start=1):
            labels[mask] = k
        return labels

# Normalize a set of embedding vectors to unit length
def normalize_embeddings(embeddings):
    """
    Renormalize embedding rows to unit L2 norm.

    Raises:
        ValueError: If a row has zero norm.
    """
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("Cannot normalize a zero embedding vector.")
    return embeddings / norms

# Used to resolve overlaps between raw segmentation masks and shave their edges
def postprocess_masks(raw_masks, erosion_radius=1):
    """
    Make raw masks pairwise disjoint and erode their edges.

    Overlapping pixels go to the smaller-area mask. Each mask is then eroded with a disk
    of the given radius; masks that end up empty are dropped.

    Parameters:
        raw_masks (list of np.ndarray): Boolean masks of one image size.
        erosion_radius (int): Erosion radius in pixels. 0 disables erosion.

    Returns:
        list of np.ndarray: Disjoint masks, in input order, empty ones removed.

    Raises:
        ValueError: If the masks have different sizes or the radius is negative.

    Examples:
        >>> big = np.ones((5, 5), bool); small = np.zeros((5, 5), bool); small[2, 2] = True
        >>> out = postprocess_masks([big, small], erosion_radius=0)
        >>> bool(out[0][2, 2]), bool(out[1][2, 2])
        (False, True)
    """
    masks, _ = _postprocess_with_index(raw_masks, erosion_radius)
    return masks

def _disk(radius):
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (xx ** 2 + yy ** 2) <= radius ** 2

def _postprocess_with_index(raw_masks, erosion_radius):
    if erosion_radius < 0:
        raise ValueError(f"Erosion radius must be non-negative, got {erosion_radius}.")
    if not raw_masks:
        return [], []
    masks = [np.asarray(m, dtype=bool) for m in raw_masks]
    shape = masks[0].shape
    for k, m in enumerate(masks):
        if m.shape != shape:
            raise ValueError(f"Mask {k} has shape {m.shape}, expected {shape}.")

    # Smaller masks claim their pixels first; stable sort keeps input order for equal areas
    areas = np.array([m.sum() for m in masks])
    claimed = np.zeros(shape, dtype=bool)
    resolved = [None] * len(masks)
    for k in np.argsort(areas, kind="stable"):
        resolved[k] = masks[k] & ~claimed
        claimed |= resolved[k]

    footprint = _disk(erosion_radius) if erosion_radius > 0 else None
    kept, indices = [], []
    for k, m in enumerate(resolved):
        if footprint is not None:
            m = ndimage.binary_erosion(m, structure=footprint, border_value=0)
        if m.any():
            kept.append(m)
            indices.append(k)
    return kept, indices

# Apply mask post-processing to a full observation, keeping embeddings aligned
def postprocess_observation(obs, erosion_radius=1):
    """
    Run postprocess_masks on an observation and drop the embeddings and captions
    of masks that vanished.

    Returns:
        SegObservation: The disjoint, eroded observation.
    """
    masks, indices = _postprocess_with_index(obs.masks, erosion_radius)
    captions = None if obs.captions is None else [obs.captions[i] for i in indices]
    return SegObservation(masks, [obs.embeddings[i] for i in indices], captions)

# Codecs for the replay format
def read_color_png(path):
    """Read an 8-bit RGB PNG into a float image in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0

def write_color_png(path, color):
    """Write a float image in [0, 1] as an 8-bit RGB PNG."""
    data = np.round(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)

def read_depth_png(path):
    """Read a 16-bit millimeter depth PNG into meters."""
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 1000.0

def write_depth_png(path, depth):
    """Write depth in meters as a 16-bit millimeter PNG."""
    data = np.clip(np.round(np.asarray(depth) * 1000.0), 0, np.iinfo(np.uint16).max).astype(np.uint16)
    Image.fromarray(data).save(path)

def read_label_png(path):
    """Read a 16-bit indexed mask PNG."""
    with Image.open(path) as img:
        return np.asarray(img).astype(np.int64)

def write_label_png(path, labels):
    Image.fromarray(np.asarray(labels, dtype=np.uint16)).save(path)

def read_embeddings(path):
    """
    Read an embedding file: little-endian [u32 count, u32 dim] then count x dim float32.

    Returns:
        tuple: (header count, header dim, (n, dim) float64 array of the complete records).
        A truncated file yields n < count.
    """
    raw = Path(path).read_bytes()
    if len(raw) < EMBEDDING_HEADER.size:
        raise DataError(f"Embedding file {path} is shorter than its header.")
    count, dim = EMBEDDING_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f4", offset=EMBEDDING_HEADER.size)
    complete = len(body) // dim if dim > 0 else 0
    complete = min(complete, count)
    values = body[:complete * dim].reshape(complete, dim).astype(np.float64)
    return count, dim, values

def write_embeddings(path, embeddings, dim=None):
    embeddings = np.asarray(embeddings, dtype="<f4")
    if embeddings.ndim != 2:
        embeddings = embeddings.reshape(0, dim or 0)
    header = EMBEDDING_HEADER.pack(embeddings.shape[0], embeddings.shape[1])
    Path(path).write_bytes(header + embeddings.tobytes())

# Intrinsics live in a JSON file next to the manifest
def load_intrinsics(path):
    """
    Read {fx, fy, cx, cy, width, height} from a JSON file.

    Raises:
        DataError: If the file is missing or malformed.
    """
    try:
        with open(path) as f:
            return Intrinsics.from_dict(json.load(f))
    except FileNotFoundError as e:
        raise DataError(f"Intrinsics file not found: {path}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Malformed intrinsics file {path}: {e}") from e

def _read_manifest(manifest_path):
    records = []
    with open(manifest_path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"Manifest line {line_no} is not valid JSON: {e}") from e
            missing = {"t", "color", "depth", "pose", "masks", "embeddings"} - set(record)
            if missing:
                raise DataError(f"Manifest line {line_no} is missing fields {sorted(missing)}.")
            records.append(record)
    return sorted(records, key=lambda r: int(r["t"]))

def _load_frame(record, root, intrinsics, expected_dim):
    t = int(record["t"])
    paths = {key: root / record[key] for key in ("color", "depth", "masks", "embeddings")}
    for key, path in paths.items():
        if not path.exists():
            raise DataError(f"Frame {t}: {key} file not found: {path}")

    try:
        color = read_color_png(paths["color"])
        depth = read_depth_png(paths["depth"])
        labels = read_label_png(paths["masks"])
    except OSError as e:
        raise DataError(f"Frame {t}: unreadable image: {e}") from e

    for name, image in (("color", color[..., 0]), ("depth", depth), ("masks", labels)):
        if image.shape != intrinsics.shape:
            raise DataError(
                f"Frame {t}: {name} image is {image.shape[1]}x{image.shape[0]}, "
                f"intrinsics say {intrinsics.width}x{intrinsics.height}."
            )

    if len(record["pose"]) != 16:
        raise DataError(f"Frame {t}: pose must have 16 values, got {len(record['pose'])}.")
    try:
        pose = Pose.from_matrix(record["pose"])
    except ValueError as e:
        raise DataError(f"Frame {t}: invalid pose: {e}") from e

    count, dim, values = read_embeddings(paths["embeddings"])
    if count and expected_dim is not None and dim != expected_dim:
        # The header length applies to every record; name the first mask the image uses
        used = np.unique(labels[labels > 0])
        first = int(used[0]) - 1 if len(used) else 0
        raise DataError(f"Frame {t}, mask {first}: embedding length {dim}, expected {expected_dim}.")
    if values.shape[0] < count:
        raise DataError(
            f"Frame {t}, mask {values.shape[0]}: embedding record truncated (length < {dim})."
        )
    if labels.max(initial=0) > count:
        raise DataError(
            f"Frame {t}, mask {int(labels.max()) - 1}: mask label {int(labels.max())} has no embedding "
            f"({count} records)."
        )
    try:
        embeddings = normalize_embeddings(values) if count else np.zeros((0, dim))
    except ValueError as e:
        raise DataError(f"Frame {t}: {e}") from e

    masks = [labels == k for k in range(1, count + 1)]
    obs = SegObservation(masks, list(embeddings))
    frame = FrameBundle(color=color, depth=depth, pose=pose, intrinsics=intrinsics, timestamp=t)
    return frame, obs, dim

# Used to replay a recorded RGB-D + segmentation sequence
def load_dataset(manifest_path, embedding_dim=None):
    """
    Stream frames of a replay dataset in ascending timestamp order.

    The manifest holds one JSON record per frame with fields t, color, depth, pose,
    masks and embeddings; paths are relative to the manifest. Intrinsics are read from
    `intrinsics.json` next to the manifest. Mask label k (1-based) pairs with embedding
    row k - 1.

    Parameters:
        manifest_path (str or Path): Path to the newline-delimited JSON manifest.
        embedding_dim (int, optional): Expected embedding length. Defaults to the length
                                       found in the first frame.

    Yields:
        tuple: (FrameBundle, SegObservation) with embeddings renormalized to unit norm.

    Raises:
        DataError: If the manifest or a referenced file is missing, or a record is malformed.
                   Messages name the frame and, for embeddings, the mask index.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"Manifest not found: {manifest_path}")
    root = manifest_path.parent
    intrinsics = load_intrinsics(root / "intrinsics.json")
    records = _read_manifest(manifest_path)

    dim = embedding_dim
    for record in records:
        frame, obs, frame_dim = _load_frame(record, root, intrinsics, dim)
        if dim is None and len(obs):
            dim = frame_dim
        yield frame, obs

# Used by the `synth` command and tests to write frames in the replay format
def write_dataset(out_dir, frames, intrinsics):
    """
    Write (FrameBundle, SegObservation) pairs as a replay dataset.

    Parameters:
        out_dir (str or Path): Target directory, created if needed.
        frames (iterable of tuple): (FrameBundle, SegObservation) pairs.
        intrinsics (Intrinsics): Shared intrinsics, written to intrinsics.json.

    Returns:
        Path: Path of the written manifest.
    """
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "intrinsics.json", "w") as f:
        json.dump(intrinsics.to_dict(), f, indent=2)

    manifest_path = out_dir / "manifest.ndjson"
    with open(manifest_path, "w") as manifest:
        for frame, obs in frames:
            stem = f"frames/{frame.timestamp:06d}"
            write_color_png(out_dir / f"{stem}_color.png", frame.color)
            write_depth_png(out_dir / f"{stem}_depth.png", frame.depth)
            labels = obs.label_image() if len(obs) else np.zeros(intrinsics.shape, dtype=np.uint16)
            write_label_png(out_dir / f"{stem}_masks.png", labels)
            dim = len(obs.embeddings[0]) if len(obs) else 0
            write_embeddings(out_dir / f"{stem}_emb.bin", np.array(obs.embeddings).reshape(len(obs), dim))
            record = {
                "t": int(frame.timestamp),
                "color": f"{stem}_color.png",
                "depth": f"{stem}_depth.png",
                "pose": [float(x) for x in frame.pose.matrix().ravel()],
                "masks": f"{stem}_masks.png",
                "embeddings": f"{stem}_emb.bin",
            }
            manifest.write(json.dumps(record) + "\n")
    return manifest_path
