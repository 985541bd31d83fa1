import numpy as np
from dataclasses import dataclass, field
from scipy.spatial.transform import Rotation

@dataclass
class Intrinsics:
    """
    Pinhole camera intrinsics. Pixel (u, v) sits at image coordinate (u, v), so the
    principal point is expressed in the same integer-centred pixel frame.

    Parameters:
        fx, fy (float): Focal lengths in pixels.
        cx, cy (float): Principal point in pixels.
        width, height (int): Image size in pixels.

    Raises:
        ValueError: If a focal length is not positive or the principal point lies outside the image.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}.")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"Image size must be positive, got {self.width}x{self.height}.")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) lies outside a {self.width}x{self.height} image."
            )

    @property
    def matrix(self):
        """3x3 camera matrix K."""
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @property
    def shape(self):
        """Image shape as (height, width)."""
        return (self.height, self.width)

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            width=int(data["width"]), height=int(data["height"]),
        )

    @classmethod
    def from_fov(cls, width, height, fov_deg=60.0):
        """
        Build intrinsics with a horizontal field of view and square pixels,
        principal point at the image centre.
        """
        fx = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(fx=fx, fy=fx, cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height)

@dataclass
class Pose:
    """
    Rigid camera-to-world transform.

    Parameters:
        rotation (np.ndarray): 3x3 orthonormal rotation with determinant +1.
        translation (np.ndarray): Camera centre in world coordinates (meters).

    Raises:
        ValueError: If the rotation is not orthonormal or not right-handed (tolerance 1e-6).
    """
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.rotation)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("Pose contains non-finite values.")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6, rtol=0):
            raise ValueError("Pose rotation is not orthonormal.")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("Pose rotation must have determinant +1.")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, values):
        """Build a pose from a 4x4 matrix or 16 row-major floats."""
        matrix = np.asarray(values, dtype=np.float64).reshape(4, 4)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def matrix(self):
        """4x4 homogeneous camera-to-world matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def camera_to_world(self, points):
        """Transform (..., 3) camera-frame points into the world frame."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def world_to_camera(self, points):
        """Transform (..., 3) world points into the camera frame."""
        return (np.asarray(points) - self.translation) @ self.rotation

def pixel_rays(intrinsics):
    """
    Per-pixel rays K^-1 [u, v, 1] in the camera frame, scaled to unit z so that
    multiplying by a depth value gives the camera-frame point.

    Returns:
        np.ndarray: (H, W, 3) array of rays.
    """
    v, u = np.mgrid[0:intrinsics.height, 0:intrinsics.width].astype(np.float64)
    rays = np.empty((intrinsics.height, intrinsics.width, 3))
    rays[..., 0] = (u - intrinsics.cx) / intrinsics.fx
    rays[..., 1] = (v - intrinsics.cy) / intrinsics.fy
    rays[..., 2] = 1.0
    return rays

def backproject(depth, intrinsics):
    """
    Back-project a depth image into camera-frame points (D · K^-1 · [u, v, 1]).

    Parameters:
        depth (np.ndarray): (H, W) depth in meters.
        intrinsics (Intrinsics): Camera intrinsics matching the depth image.

    Returns:
        np.ndarray: (H, W, 3) camera-frame points; invalid pixels map to the origin.
    """
    return pixel_rays(intrinsics) * np.asarray(depth, dtype=np.float64)[..., None]

def project_points(points_cam, intrinsics):
    """
    Pinhole projection of camera-frame points.

    Returns:
        tuple: (u, v, z) arrays. u and v are undefined where z <= 0.
    """
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * points_cam[..., 0] / z + intrinsics.cx
        v = intrinsics.fy * points_cam[..., 1] / z + intrinsics.cy
    return u, v, z

def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """
    Camera-to-world pose looking from `eye` towards `target`, camera axes
    x right, y down, z forward.

    Raises:
        ValueError: If eye and target coincide.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("Camera eye and target coincide.")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:  # looking along the up axis
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.column_stack([right, down, forward]), eye)

def quaternion_to_rotation(q):
    """
    Rotation matrices from scalar-first unit quaternions (w, x, y, z).

    Parameters:
        q (np.ndarray): (4,) or (N, 4) quaternions.

    Returns:
        np.ndarray: (3, 3) or (N, 3, 3) rotation matrices.
    """
    return Rotation.from_quat(np.asarray(q, dtype=np.float64), scalar_first=True).as_matrix()
