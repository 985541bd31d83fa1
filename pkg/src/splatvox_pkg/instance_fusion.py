import json
import struct
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

COUNTING_MODES = ("dirichlet", "last_write")

CODEBOOK_MAGIC = b"OVCB"
CODEBOOK_VERSION = 1
_CODEBOOK_HEADER = struct.Struct("<4sIII")

@dataclass
class FusionConfig:
    """
    Instance association parameters.

    Parameters:
        xi (float): Fusion threshold; a mask joins an existing instance only when its score exceeds xi.
        lambda_geo (float): Weight of geometric similarity; embeddings get 1 - lambda_geo.
        counting (str): 'dirichlet' accumulates per-voxel label counts, 'last_write' keeps
                        only the latest label of each voxel.
        neighbour_radius (int): Voxels around a mask region whose argmax labels also become
                                association candidates; 0 restricts candidates to the region.

    Raises:
        ValueError: If xi or lambda_geo is outside [0, 1], the counting mode is unknown or
                    neighbour_radius is negative.
    """
    xi: float = 0.25
    lambda_geo: float = 0.5
    counting: str = "dirichlet"
    neighbour_radius: int = 1

    def __post_init__(self):
        for name in ("xi", "lambda_geo"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}.")
        if self.counting not in COUNTING_MODES:
            raise ValueError(f"Unknown counting mode '{self.counting}'. Expected one of {COUNTING_MODES}.")
        if not isinstance(self.neighbour_radius, int) or self.neighbour_radius < 0:
            raise ValueError(f"neighbour_radius must be a non-negative integer, got {self.neighbour_radius}.")

@dataclass
class AssociationResult:
    """Outcome of associating one mask. Skipped masks carry instance_id None."""
    mask_index: int
    instance_id: int
    score: float
    is_new: bool
    voxels: set = field(default_factory=set)
    visibility: float = 1.0
    skipped: bool = False
    warning: str = None

    def to_record(self, t):
        """Association log record {t, k, id, score, new, n_voxels}."""
        return {
            "t": int(t),
            "k": int(self.mask_index),
            "id": None if self.instance_id is None else int(self.instance_id),
            "score": float(self.score),
            "new": bool(self.is_new),
            "n_voxels": len(self.voxels),
        }

class InstanceCodebook:
    """
    Global instance ID -> (unit embedding, accumulated credibility weight) table.

    IDs are allocated from a monotonically increasing counter starting at 1 and are never reused.

    Parameters:
        dim (int): Embedding dimension.
    """

    def __init__(self, dim):
        if dim <= 0:
            raise ValueError(f"Embedding dimension must be positive, got {dim}.")
        self.dim = int(dim)
        self.entries = {}
        self.next_id = 1

    def __len__(self):
        return len(self.entries)

    def __contains__(self, gamma):
        return gamma in self.entries

    @property
    def ids(self):
        return sorted(self.entries)

    def allocate_id(self):
        gamma = self.next_id
        self.next_id += 1
        return gamma

    def embedding(self, gamma):
        return self.entries[gamma][0]

    def weight(self, gamma):
        return self.entries[gamma][1]

    def _check(self, f, w):
        f = np.asarray(f, dtype=np.float64)
        if f.shape != (self.dim,):
            raise ValueError(f"Embedding has shape {f.shape}, codebook dimension is {self.dim}.")
        if w < 0:
            raise ValueError(f"Credibility weight must be non-negative, got {w}.")
        return f

    def seed(self, gamma, f, w):
        """Create entry gamma with embedding f and weight w."""
        f = self._check(f, w)
        self.entries[gamma] = (f / np.linalg.norm(f), float(w))
        self.next_id = max(self.next_id, gamma + 1)

    def fuse(self, gamma, f_obs, w):
        """
        Credibility-weighted embedding update: f ← normalize((W·f + w·f_obs) / (W + w)), W ← W + w.
        """
        f_obs = self._check(f_obs, w)
        f, total = self.entries[gamma]
        if total + w == 0:
            return
        fused = (total * f + w * f_obs) / (total + w)
        norm = np.linalg.norm(fused)
        if norm > 1e-12:
            f = fused / norm
        self.entries[gamma] = (f, total + w)

    def save(self, path):
        """
        Write [b"OVCB", u32 version, u32 dim, u32 count] then per entry [u64 id, f32 weight,
        dim x f32 embedding], in ascending ID order.
        """
        record = np.dtype([("id", "<u8"), ("weight", "<f4"), ("embedding", "<f4", (self.dim,))])
        entries = np.array(
            [(gamma, self.entries[gamma][1], self.entries[gamma][0]) for gamma in self.ids], dtype=record
        )
        with open(path, "wb") as f:
            f.write(_CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, self.dim, len(entries)))
            f.write(entries.tobytes())

    @classmethod
    def load(cls, path):
        """
        Read a codebook written by save. Embeddings are renormalized after the float32 round trip.

        Raises:
            ValueError: If the file is not an OVCB codebook of a supported version.
        """
        with open(path, "rb") as f:
            data = f.read()
        magic, version, dim, count = _CODEBOOK_HEADER.unpack_from(data)
        if magic != CODEBOOK_MAGIC:
            raise ValueError(f"{path} is not an instance codebook (magic {magic!r}).")
        if version != CODEBOOK_VERSION:
            raise ValueError(f"Unsupported codebook version {version}.")
        record = np.dtype([("id", "<u8"), ("weight", "<f4"), ("embedding", "<f4", (dim,))])
        entries = np.frombuffer(data, dtype=record, count=count, offset=_CODEBOOK_HEADER.size)
        codebook = cls(dim)
        for entry in entries:
            codebook.seed(int(entry["id"]), entry["embedding"].astype(np.float64), float(entry["weight"]))
        return codebook

# Used to measure how much of a mask region already belongs to an instance
def geometric_similarity(voxels, gamma, grid):
    """
    Mean probability of instance gamma over a voxel region (0 for voxels without gamma).

    Parameters:
        voxels (set of VoxelKey): Non-empty voxel region.
        gamma (int): Instance ID.
        grid (VoxelGrid): Map holding the instance counts.

    Returns:
        float: Similarity in [0, 1].

    Raises:
        ValueError: If the region is empty.
    """
    if not voxels:
        raise ValueError("Geometric similarity is undefined for an empty voxel region.")
    return sum(grid.instance_tuple(key).get(gamma, 0.0) for key in sorted(voxels)) / len(voxels)

def _region_evidence(voxels, grid):
    """Geometric similarity of every instance with evidence in the region, in one pass."""
    sums = defaultdict(float)
    for key in sorted(voxels):
        for gamma, theta in grid.instance_tuple(key).items():
            sums[gamma] += theta
    return {gamma: total / len(voxels) for gamma, total in sums.items()}

# Cosine similarity of unit embeddings
def embedding_similarity(f_map, f_obs):
    """
    Dot product of two unit embeddings.

    Raises:
        ValueError: If either vector is zero.
    """
    f_map = np.asarray(f_map, dtype=np.float64)
    f_obs = np.asarray(f_obs, dtype=np.float64)
    if not np.any(f_map) or not np.any(f_obs):
        raise ValueError("Embedding similarity is undefined for a zero vector.")
    return float(np.dot(f_map, f_obs))

def visibility_ratio(result, grid, label_sizes=None):
    """
    Share of an instance's argmax-labeled voxels covered by the mask region, clamped to
    [0, 1]. Defined as 1 when the instance labels no voxel yet.

    Parameters:
        result (AssociationResult): Association of one mask.
        grid (VoxelGrid): Map in its state before this frame's count update.
        label_sizes (Counter, optional): Precomputed grid.label_sizes().
    """
    sizes = grid.label_sizes() if label_sizes is None else label_sizes
    denominator = sizes.get(result.instance_id, 0)
    if denominator == 0:
        return 1.0
    return min(len(result.voxels) / denominator, 1.0)

# Associate the masks of one frame with map instances
def associate(obs, frame, grid, codebook, cfg):
    """
    Match every mask of a frame to an existing instance or create a new one.

    For each mask the voxel region is found with grid.mask_to_voxels. Candidates are the
    instances with evidence in the region plus the argmax labels within cfg.neighbour_radius
    voxels of it, so a grazing view of a known object can still match it. A region with no
    candidate starts a new instance. Otherwise every candidate gets
    A = lambda_geo·S_geo + (1 - lambda_geo)·max(S_emb, 0) (S_geo is 0 for neighbour-only
    candidates); the best one (smallest ID on ties) is taken when A > xi, else a new instance
    is created. Masks are associated independently against the map state before this frame's
    updates. The visibility ratio of each result is computed here, against the same state.

    Parameters:
        obs (SegObservation): Disjoint masks and embeddings of the frame.
        frame (FrameBundle): The frame, already TSDF-integrated.
        grid (VoxelGrid): Map.
        codebook (InstanceCodebook): Instance embeddings.
        cfg (FusionConfig): Association parameters.

    Returns:
        list of AssociationResult: One per mask, in mask order. Masks with no valid depth
        are returned with skipped = True and a warning message.
    """
    results = []
    sizes = None
    for k, (mask, f_obs) in enumerate(zip(obs.masks, obs.embeddings)):
        region = grid.mask_to_voxels(mask, frame.depth, frame.pose, frame.intrinsics)
        if not region:
            message = f"Frame {frame.timestamp}, mask {k}: no voxels with valid depth; mask skipped."
            warnings.warn(message)
            results.append(AssociationResult(k, None, 0.0, False, set(), skipped=True, warning=message))
            continue

        evidence = _region_evidence(region, grid)
        candidates = set(evidence)
        if cfg.neighbour_radius:
            candidates |= grid.neighbour_labels(region, cfg.neighbour_radius)
        best_gamma, best_score = None, -1.0
        for gamma in sorted(candidates):
            s_emb = embedding_similarity(codebook.embedding(gamma), f_obs) if gamma in codebook else 0.0
            score = cfg.lambda_geo * evidence.get(gamma, 0.0) + (1.0 - cfg.lambda_geo) * max(s_emb, 0.0)
            if score > best_score:
                best_gamma, best_score = gamma, score

        if best_gamma is not None and best_score > cfg.xi:
            if sizes is None:
                sizes = grid.label_sizes()
            result = AssociationResult(k, best_gamma, best_score, False, region)
            result.visibility = visibility_ratio(result, grid, sizes)
        else:
            result = AssociationResult(k, codebook.allocate_id(), 1.0, True, region)
        results.append(result)
    return results

# Live map evolution: per-voxel label counting
def update_voxels(results, grid, counting="dirichlet"):
    """
    Add one count of the assigned instance to every voxel of every associated region.
    With counting='last_write' the voxel's counts are replaced by the new label instead.
    """
    if counting not in COUNTING_MODES:
        raise ValueError(f"Unknown counting mode '{counting}'. Expected one of {COUNTING_MODES}.")
    for result in results:
        if result.skipped:
            continue
        for key in sorted(result.voxels):
            if counting == "dirichlet":
                grid.add_count(key, result.instance_id)
            else:
                grid.set_label(key, result.instance_id)

# Live map evolution: credibility-weighted embedding fusion
def update_codebook(results, obs, codebook):
    """
    Fuse each mask's embedding into its instance with credibility w = score x visibility.
    New instances are seeded with the observed embedding and weight w.
    """
    for result in results:
        if result.skipped:
            continue
        w = result.score * result.visibility
        f_obs = obs.embeddings[result.mask_index]
        if result.is_new or result.instance_id not in codebook:
            codebook.seed(result.instance_id, f_obs, w)
        else:
            codebook.fuse(result.instance_id, f_obs, w)

# Open-vocabulary lookup: find the instance closest to a query embedding
def retrieve_instance(query_embedding, codebook):
    """
    Instance whose embedding is most similar to the query (smallest ID on ties).

    Returns:
        tuple: (instance ID, cosine similarity).

    Raises:
        ValueError: If the codebook is empty.
    """
    if len(codebook) == 0:
        raise ValueError("Cannot retrieve from an empty codebook.")
    best = None
    for gamma in codebook.ids:
        sim = embedding_similarity(codebook.embedding(gamma), query_embedding)
        if best is None or sim > best[1]:
            best = (gamma, sim)
    return best

def instance_voxels(gamma, grid):
    """All voxels whose argmax label is gamma, sorted."""
    return sorted(key for key in grid.labeled_keys() if grid.label_query(key) == gamma)

def write_association_log(path, records):
    """Append association records to a newline-delimited JSON file."""
    with open(path, "a") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
