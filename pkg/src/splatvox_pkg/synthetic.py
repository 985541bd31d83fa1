import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from splatvox_pkg.geometry import Pose, backproject, look_at, pixel_rays
from splatvox_pkg.scene_io import FrameBundle, SegObservation

SHAPE_KINDS = ("sphere", "box", "cylinder")
RAY_EPS = 1e-9

@dataclass
class Primitive:
    """
    Analytic solid placed in the world.

    Parameters:
        kind (str): 'sphere', 'box' or 'cylinder'.
        dims (tuple): Sphere (radius,), box (size_x, size_y, size_z), cylinder (radius, height),
                      all in meters. Cylinders are aligned with their local z axis.
        center (np.ndarray): World position of the primitive's centre.
        rotation (np.ndarray): Local-to-world rotation.

    Raises:
        ValueError: For an unknown kind, a wrong number of dimensions or non-positive dimensions.
    """
    kind: str
    dims: tuple
    center: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"Unknown primitive kind '{self.kind}'. Expected one of {SHAPE_KINDS}.")
        expected = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        self.dims = tuple(float(d) for d in np.atleast_1d(self.dims))
        if len(self.dims) != expected:
            raise ValueError(f"A {self.kind} takes {expected} dimensions, got {len(self.dims)}.")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"Primitive dimensions must be positive, got {self.dims}.")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.rotation = Pose(self.rotation).rotation

    def to_local(self, points):
        return (np.asarray(points) - self.center) @ self.rotation

    def signed_distance(self, points):
        """Exact signed distance of world points to the primitive surface (negative inside)."""
        p = self.to_local(points)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.dims[0]
        if self.kind == "box":
            q = np.abs(p) - np.array(self.dims) / 2
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(np.max(q, axis=-1), 0.0)
        radius, height = self.dims
        d = np.stack([np.linalg.norm(p[..., :2], axis=-1) - radius, np.abs(p[..., 2]) - height / 2], axis=-1)
        return np.minimum(np.max(d, axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)

    def intersect(self, origin, directions):
        """
        First positive hit of rays origin + t·d.

        Returns:
            tuple: (t, normals) with t = inf for misses and world-frame outward normals.
        """
        o = self.to_local(origin[None, :])[0]
        d = directions @ self.rotation
        if self.kind == "sphere":
            t, n = _intersect_sphere(o, d, self.dims[0])
        elif self.kind == "box":
            t, n = _intersect_box(o, d, np.array(self.dims) / 2)
        else:
            t, n = _intersect_cylinder(o, d, *self.dims)
        return t, n @ self.rotation.T

    def to_dict(self):
        return {
            "kind": self.kind,
            "dims": list(self.dims),
            "center": self.center.tolist(),
            "rotation": self.rotation.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["kind"], tuple(data["dims"]), data["center"], data.get("rotation", np.eye(3)))

def _nearest_root(a, b, c):
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
    t = np.where(t1 > RAY_EPS, t1, np.where(t2 > RAY_EPS, t2, np.inf))
    return np.where(hit & (a > 0), t, np.inf)

def _intersect_sphere(o, d, radius):
    a = np.einsum("ij,ij->i", d, d)
    b = 2 * d @ o
    c = o @ o - radius ** 2
    t = _nearest_root(a, b, c)
    points = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, points / radius

def _intersect_box(o, d, half):
    safe = np.where(np.abs(d) < 1e-30, 1e-30, d)
    t_lo = (-half - o) / safe
    t_hi = (half - o) / safe
    t_near = np.max(np.minimum(t_lo, t_hi), axis=1)
    t_far = np.min(np.maximum(t_lo, t_hi), axis=1)
    hit = t_far >= np.maximum(t_near, RAY_EPS)
    t = np.where(hit, np.where(t_near > RAY_EPS, t_near, t_far), np.inf)
    points = o + np.where(hit, t, 0.0)[:, None] * d
    axis = np.argmax(np.abs(points) / half, axis=1)
    normals = np.zeros_like(points)
    rows = np.arange(len(points))
    normals[rows, axis] = np.sign(points[rows, axis])
    return t, normals

def _intersect_cylinder(o, d, radius, height):
    hz = height / 2
    # Side surface
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[0] * d[:, 0] + o[1] * d[:, 1])
    c = o[0] ** 2 + o[1] ** 2 - radius ** 2
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_side = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for root in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = o[2] + root * d[:, 2]
            ok = (disc >= 0) & (a > 0) & (root > RAY_EPS) & (np.abs(z) <= hz)
            t_side = np.where(ok & (root < t_side), root, t_side)
        # Caps
        t_cap = np.full(len(d), np.inf)
        cap_sign = np.zeros(len(d))
        for sign in (-1.0, 1.0):
            root = (sign * hz - o[2]) / d[:, 2]
            xy = o[:2] + root[:, None] * d[:, :2]
            ok = np.isfinite(root) & (root > RAY_EPS) & (np.sum(xy ** 2, axis=1) <= radius ** 2)
            better = ok & (root < t_cap)
            t_cap = np.where(better, root, t_cap)
            cap_sign = np.where(better, sign, cap_sign)

    use_cap = t_cap < t_side
    t = np.where(use_cap, t_cap, t_side)
    points = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    normals = np.zeros_like(points)
    normals[:, :2] = points[:, :2] / radius
    normals[use_cap] = 0.0
    normals[use_cap, 2] = cap_sign[use_cap]
    return t, normals

@dataclass
class SceneObject:
    instance_id: int
    shape: Primitive
    albedo: np.ndarray
    embedding: np.ndarray
    class_name: str = "object"

    def __post_init__(self):
        self.albedo = np.clip(np.asarray(self.albedo, dtype=np.float64).reshape(3), 0.0, 1.0)
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        norm = np.linalg.norm(self.embedding)
        if norm == 0:
            raise ValueError(f"Object {self.instance_id} has a zero embedding.")
        self.embedding = self.embedding / norm

    def to_dict(self):
        return {
            "instance_id": int(self.instance_id),
            "class_name": self.class_name,
            "shape": self.shape.to_dict(),
            "albedo": self.albedo.tolist(),
            "embedding": self.embedding.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            instance_id=int(data["instance_id"]),
            shape=Primitive.from_dict(data["shape"]),
            albedo=data["albedo"],
            embedding=data["embedding"],
            class_name=data.get("class_name", "object"),
        )

@dataclass
class Plane:
    """Infinite background plane through `point` with unit `normal`."""
    point: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.6, 0.6, 0.6]))

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.normal = self.normal / np.linalg.norm(self.normal)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)

    def intersect(self, origin, directions):
        denom = directions @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origin) @ self.normal) / denom
        t = np.where(np.isfinite(t) & (t > RAY_EPS), t, np.inf)
        return t, np.broadcast_to(self.normal, directions.shape)

    def to_dict(self):
        return {"point": self.point.tolist(), "normal": self.normal.tolist(), "albedo": self.albedo.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["point"], data["normal"], data["albedo"])

@dataclass
class SyntheticWorld:
    """
    Analytic scene used as a data source and as ground truth.

    Parameters:
        objects (list of SceneObject): Instances with unique IDs (ID 0 is reserved for background).
        planes (list of Plane): Background ground/wall planes.
        light_dir (np.ndarray): Direction the directional light travels.
        ambient (float): Ambient shading term in [0, 1].

    Raises:
        ValueError: If instance IDs repeat or use the reserved value 0.
    """
    objects: list = field(default_factory=list)
    planes: list = field(default_factory=list)
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.5, -1.0]))
    ambient: float = 0.3

    def __post_init__(self):
        ids = [obj.instance_id for obj in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError(f"Instance IDs must be unique, got {ids}.")
        if 0 in ids:
            raise ValueError("Instance ID 0 is reserved for background.")
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)

    def object_by_id(self, instance_id):
        for obj in self.objects:
            if obj.instance_id == instance_id:
                return obj
        raise KeyError(f"No object with instance ID {instance_id}.")

    def class_embeddings(self):
        """Map each class name to the embedding of its first object."""
        table = {}
        for obj in self.objects:
            table.setdefault(obj.class_name, obj.embedding)
        return table

    def signed_distances(self, points):
        """(N, n_objects) signed distances of points to every object surface."""
        points = np.atleast_2d(points)
        if not self.objects:
            return np.zeros((len(points), 0))
        return np.stack([obj.shape.signed_distance(points) for obj in self.objects], axis=1)

    def surface_ids(self, points, tolerance):
        """
        Instance ID of the object surface nearest to each point, 0 when no object
        surface lies within `tolerance` meters.
        """
        points = np.atleast_2d(points)
        ids = np.zeros(len(points), dtype=np.int64)
        if not self.objects:
            return ids
        dist = np.abs(self.signed_distances(points))
        nearest = np.argmin(dist, axis=1)
        close = dist[np.arange(len(points)), nearest] <= tolerance
        object_ids = np.array([obj.instance_id for obj in self.objects])
        ids[close] = object_ids[nearest[close]]
        return ids

    def to_dict(self):
        return {
            "objects": [obj.to_dict() for obj in self.objects],
            "planes": [plane.to_dict() for plane in self.planes],
            "light_dir": self.light_dir.tolist(),
            "ambient": self.ambient,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            objects=[SceneObject.from_dict(o) for o in data.get("objects", [])],
            planes=[Plane.from_dict(p) for p in data.get("planes", [])],
            light_dir=data.get("light_dir", [0.3, 0.5, -1.0]),
            ambient=data.get("ambient", 0.3),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

@dataclass
class NoiseConfig:
    """
    Controlled segmentation and depth corruption.

    Raises:
        ValueError: If a probability is outside [0, 1] or a sigma is negative.
    """
    p_drop: float = 0.0
    p_split: float = 0.0
    p_merge: float = 0.0
    embed_sigma: float = 0.0
    depth_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("p_drop", "p_split", "p_merge"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}.")
        for name in ("embed_sigma", "depth_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}.")

    @property
    def is_identity(self):
        return not any((self.p_drop, self.p_split, self.p_merge, self.embed_sigma, self.depth_sigma))

# Used to render ground-truth frames from an analytic world
def raycast_frame(world, pose, intrinsics, timestamp=0):
    """
    Ray-cast a world from a camera.

    Depth is the camera-frame z of the nearest hit (0 where nothing is hit). Color is the
    hit albedo with Lambertian shading from the world's directional light. Ground-truth
    masks partition the pixels of every visible object, in world object order.

    Parameters:
        world (SyntheticWorld): Scene to render.
        pose (Pose): Camera-to-world pose.
        intrinsics (Intrinsics): Camera intrinsics.
        timestamp (int): Frame index stored in the bundle.

    Returns:
        tuple: (FrameBundle, SegObservation, (H, W) int array of instance IDs, 0 for background).
    """
    h, w = intrinsics.shape
    rays = pixel_rays(intrinsics).reshape(-1, 3)
    directions = rays @ pose.rotation.T  # camera z = 1, so t equals depth
    origin = pose.translation

    best_t = np.full(len(rays), np.inf)
    best_id = np.zeros(len(rays), dtype=np.int64)
    normals = np.zeros_like(rays)
    albedo = np.zeros_like(rays)

    surfaces = [(0, plane, plane.albedo) for plane in world.planes]
    surfaces += [(obj.instance_id, obj.shape, obj.albedo) for obj in world.objects]
    for instance_id, surface, color in surfaces:
        t, n = surface.intersect(origin, directions)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = instance_id
        normals[closer] = n[closer]
        albedo[closer] = color

    hit = np.isfinite(best_t)
    depth = np.where(hit, best_t, 0.0)

    # Face normals towards the camera before shading
    facing = np.sign(-np.einsum("ij,ij->i", normals, directions))
    normals = normals * np.where(facing == 0, 1.0, facing)[:, None]
    lambert = np.clip(normals @ -world.light_dir, 0.0, None)
    shading = world.ambient + (1.0 - world.ambient) * lambert
    color = np.where(hit[:, None], albedo * shading[:, None], 0.0)

    ids = np.where(hit, best_id, 0).reshape(h, w)
    frame = FrameBundle(
        color=np.clip(color, 0.0, 1.0).reshape(h, w, 3),
        depth=depth.reshape(h, w),
        pose=pose,
        intrinsics=intrinsics,
        timestamp=timestamp,
    )

    masks, embeddings, captions = [], [], []
    for obj in world.objects:
        mask = ids == obj.instance_id
        if mask.any():
            masks.append(mask)
            embeddings.append(obj.embedding)
            captions.append(obj.class_name)
    return frame, SegObservation(masks, embeddings, captions), ids

def _frame_rng(cfg, frame_index):
    return np.random.default_rng([cfg.rng_seed, frame_index])

def _unit(v, fallback):
    norm = np.linalg.norm(v)
    return v / norm if norm > 1e-12 else fallback

def _bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1], cols[0], cols[-1]

def _bisect(mask):
    r0, r1, c0, c1 = _bbox(mask)
    height, width = r1 - r0 + 1, c1 - c0 + 1
    if width >= height:
        cut = c0 + width // 2
        first = mask.copy()
        first[:, cut:] = False
    else:
        cut = r0 + height // 2
        first = mask.copy()
        first[cut:, :] = False
    return first, mask & ~first

def _boxes_intersect(a, b):
    ar0, ar1, ac0, ac1 = _bbox(a)
    br0, br1, bc0, bc1 = _bbox(b)
    return ar0 <= br1 and br0 <= ar1 and ac0 <= bc1 and bc0 <= ac1

# Used to stress instance fusion with missing, over- and under-segmentation
def perturb_segmentation(obs, cfg, frame_index=0):
    """
    Corrupt a post-processed observation.

    Each mask is dropped with p_drop, otherwise split in two along its longer bounding-box
    axis with p_split (both halves inherit the embedding). Pairs of surviving masks whose
    bounding boxes intersect are then merged with p_merge, averaging their embeddings.
    Finally every embedding gets Gaussian jitter of std embed_sigma and is renormalized.
    The random stream depends only on (cfg.rng_seed, frame_index).

    Parameters:
        obs (SegObservation): Disjoint masks.
        cfg (NoiseConfig): Noise levels.
        frame_index (int): Frame index mixed into the seed.

    Returns:
        SegObservation: A new observation satisfying the same invariants.
    """
    if cfg.is_identity:
        return obs
    rng = _frame_rng(cfg, frame_index)
    captions = obs.captions if obs.captions is not None else [""] * len(obs)

    items = []
    for mask, f, caption in zip(obs.masks, obs.embeddings, captions):
        drop, split = rng.random(), rng.random()
        if drop < cfg.p_drop:
            continue
        if split < cfg.p_split:
            first, second = _bisect(mask)
            if first.any() and second.any():
                items.append([first, f.copy(), caption])
                items.append([second, f.copy(), caption])
                continue
        items.append([mask, f.copy(), caption])

    merged = [False] * len(items)
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            if merged[i] or merged[j]:
                continue
            if rng.random() < cfg.p_merge and _boxes_intersect(items[i][0], items[j][0]):
                items[i][0] = items[i][0] | items[j][0]
                items[i][1] = _unit(items[i][1] + items[j][1], items[i][1])
                items[i][2] = f"{items[i][2]} + {items[j][2]}".strip(" +")
                merged[j] = True
    items = [item for item, gone in zip(items, merged) if not gone]

    masks, embeddings, new_captions = [], [], []
    for mask, f, caption in items:
        if cfg.embed_sigma > 0:
            f = _unit(f + rng.normal(0.0, cfg.embed_sigma, size=f.shape), f)
        masks.append(mask)
        embeddings.append(f)
        new_captions.append(caption)
    return SegObservation(masks, embeddings, new_captions if obs.captions is not None else None)

# Used to add multiplicative sensor noise to depth
def perturb_depth(frame, cfg, frame_index=0):
    """
    Multiply valid depth by (1 + N(0, depth_sigma)). Returns the frame unchanged when
    depth_sigma is 0.
    """
    if cfg.depth_sigma == 0:
        return frame
    rng = np.random.default_rng([cfg.rng_seed, frame_index, 1])
    noise = 1.0 + rng.normal(0.0, cfg.depth_sigma, size=frame.depth.shape)
    depth = np.where(frame.depth > 0, np.maximum(frame.depth * noise, 0.0), 0.0)
    return FrameBundle(frame.color, depth, frame.pose, frame.intrinsics, frame.timestamp)

# Deterministic embeddings for ground-truth classes
def make_embeddings(n, dim, seed=0):
    """
    Draw n unit d-vectors from a seeded RNG. When n <= dim the vectors are mutually
    orthogonal (rows of an orthonormal basis from a QR factorization).
    """
    rng = np.random.default_rng(seed)
    if n <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, n)))
        return q.T.copy()
    vectors = rng.normal(size=(n, dim))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)

def _ground():
    return Plane(point=[0.0, 0.0, 0.0], normal=[0.0, 0.0, 1.0], albedo=[0.55, 0.55, 0.5])

def two_object_world(embedding_dim=64, seed=0):
    """A ball and a crate standing on a ground plane."""
    emb = make_embeddings(2, embedding_dim, seed)
    return SyntheticWorld(
        objects=[
            SceneObject(1, Primitive("sphere", (0.25,), [-0.4, 0.0, 0.25]), [0.85, 0.2, 0.2], emb[0], "ball"),
            SceneObject(2, Primitive("box", (0.4, 0.4, 0.4), [0.4, 0.05, 0.2]), [0.2, 0.3, 0.85], emb[1], "crate"),
        ],
        planes=[_ground()],
    )

def four_object_world(embedding_dim=64, seed=0):
    """Four objects of four classes spread on a ground plane."""
    emb = make_embeddings(4, embedding_dim, seed)
    rot = Rotation.from_euler("z", 30, degrees=True).as_matrix()
    return SyntheticWorld(
        objects=[
            SceneObject(1, Primitive("sphere", (0.2,), [-0.45, -0.35, 0.2]), [0.85, 0.2, 0.2], emb[0], "ball"),
            SceneObject(2, Primitive("box", (0.35, 0.35, 0.35), [0.45, -0.35, 0.175]), [0.2, 0.3, 0.85], emb[1], "crate"),
            SceneObject(3, Primitive("cylinder", (0.15, 0.45), [-0.45, 0.45, 0.225]), [0.2, 0.75, 0.3], emb[2], "can"),
            SceneObject(4, Primitive("box", (0.3, 0.2, 0.12), [0.45, 0.45, 0.06], rot), [0.9, 0.75, 0.2], emb[3], "book"),
        ],
        planes=[_ground()],
    )

def abutting_boxes_world(embedding_dim=64, seed=0, similarity=0.6):
    """
    Two boxes sharing a face, with embeddings of the given cosine similarity. A stress
    case for fusion thresholds.
    """
    base = make_embeddings(2, embedding_dim, seed)
    second = similarity * base[0] + np.sqrt(1 - similarity ** 2) * base[1]
    return SyntheticWorld(
        objects=[
            SceneObject(1, Primitive("box", (0.4, 0.4, 0.4), [-0.2, 0.0, 0.2]), [0.8, 0.5, 0.2], base[0], "box_a"),
            SceneObject(2, Primitive("box", (0.4, 0.4, 0.4), [0.2, 0.0, 0.2]), [0.3, 0.5, 0.8], second, "box_b"),
        ],
        planes=[_ground()],
    )

def tilted_plane_world(embedding_dim=64, seed=0, angle_deg=45.0):
    """A thin square panel tilted about the x axis, without background."""
    emb = make_embeddings(1, embedding_dim, seed)
    a = np.deg2rad(angle_deg)
    rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    return SyntheticWorld(
        objects=[SceneObject(1, Primitive("box", (1.6, 1.6, 0.04), [0.0, 0.0, 0.4], rot), [0.7, 0.7, 0.7], emb[0], "panel")],
    )

def sphere_world(embedding_dim=64, seed=0, radius=0.5, center=(0.013, 0.021, 0.517)):
    """A single floating sphere."""
    emb = make_embeddings(1, embedding_dim, seed)
    return SyntheticWorld(
        objects=[SceneObject(1, Primitive("sphere", (radius,), center), [0.8, 0.8, 0.8], emb[0], "ball")],
    )

WORLD_BUILDERS = {
    "two_objects": two_object_world,
    "four_objects": four_object_world,
    "abutting_boxes": abutting_boxes_world,
    "tilted_plane": tilted_plane_world,
    "sphere": sphere_world,
}

# Used to create a camera trajectory around a scene
def orbit_poses(n_frames, radius=1.6, height=1.0, target=(0.0, 0.0, 0.2), arc_deg=90.0, start_deg=-90.0, loops=1):
    """
    Cameras on a horizontal circle looking at `target`. The azimuth sweeps `arc_deg`
    degrees and, for loops > 1, goes back and forth so views are revisited.

    Returns:
        list of Pose
    """
    poses = []
    for i in range(n_frames):
        t = loops * i / max(n_frames - 1, 1)
        phase = 1.0 - abs(1.0 - (t % 2.0)) if loops > 1 else t
        angle = np.deg2rad(start_deg + arc_deg * phase)
        eye = np.asarray(target) + np.array([radius * np.cos(angle), radius * np.sin(angle), 0.0])
        eye[2] = height
        poses.append(look_at(eye, target))
    return poses

# Used to score map voxels against the analytic world
def gt_voxel_labels(world, grid, keys=None, tolerance=None):
    """
    Assign each voxel the ID of the object whose surface passes within `tolerance` of
    the voxel centre. Voxels near no object are left out.

    Parameters:
        world (SyntheticWorld): Ground-truth scene.
        grid (VoxelGrid): Map providing voxel geometry.
        keys (iterable of VoxelKey, optional): Voxels to label. Defaults to every voxel
                                               carrying instance counts.
        tolerance (float, optional): Distance in meters. Defaults to one voxel.

    Returns:
        dict: VoxelKey -> instance ID.
    """
    keys = sorted(grid.labeled_keys() if keys is None else keys)
    if not keys:
        return {}
    tolerance = grid.resolution if tolerance is None else tolerance
    centers = grid.voxel_centers(keys)
    ids = world.surface_ids(centers, tolerance)
    return {key: int(i) for key, i in zip(keys, ids) if i != 0}

def gt_voxel_classes(world, labels):
    """Translate a VoxelKey -> instance ID map into VoxelKey -> class name."""
    names = {obj.instance_id: obj.class_name for obj in world.objects}
    return {key: names[i] for key, i in labels.items()}

# Used as an oracle for depth consistency
def reprojected_ids(world, frame, tolerance=1e-6):
    """Instance IDs found by back-projecting every valid depth pixel onto the world."""
    points = frame.pose.camera_to_world(backproject(frame.depth, frame.intrinsics))
    ids = world.surface_ids(points.reshape(-1, 3), tolerance).reshape(frame.depth.shape)
    return np.where(frame.depth > 0, ids, 0)
