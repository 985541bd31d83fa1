"""
CPU Gaussian splatting with analytic gradients.

Primitives are projected with the EWA approximation, sorted globally by camera depth
(ties by index) and alpha-blended front to back. The forward pass can keep its per-pixel
blend terms so that `backward` returns exact gradients of the training loss with respect
to every primitive's color and opacity and the four camera-model parameters.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from splatvox_pkg.geometry import backproject, pixel_rays, quaternion_to_rotation

ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
COV2D_BLUR = 0.3
SPLAT_NEAR_PLANE = 0.01
ROW_CHUNK = 8

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5, an 11 x 11 window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

@dataclass
class CameraModel:
    """
    Per-keyframe observation model: out = omega_trans·T_{x,y}(image) + omega_raw·image,
    where T shifts the image by (x_trans, y_trans) pixels.

    Raises:
        ValueError: If a weight is outside [0, 1] or a translation is not finite.
    """
    omega_raw: float = 0.5
    omega_trans: float = 0.5
    x_trans: float = 0.0
    y_trans: float = 0.0

    def __post_init__(self):
        for name in ("omega_raw", "omega_trans"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}.")
        if not (np.isfinite(self.x_trans) and np.isfinite(self.y_trans)):
            raise ValueError("Camera translations must be finite.")

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    def as_array(self):
        return np.array([self.omega_raw, self.omega_trans, self.x_trans, self.y_trans])

    @classmethod
    def from_array(cls, values):
        """Build from [omega_raw, omega_trans, x_trans, y_trans], clamping the weights to [0, 1]."""
        w_raw, w_trans, x, y = (float(v) for v in values)
        return cls(min(max(w_raw, 0.0), 1.0), min(max(w_trans, 0.0), 1.0), x, y)

@dataclass
class LossWeights:
    w_rgb: float = 0.8
    w_ssim: float = 0.2
    w_depth: float = 0.5
    w_normal: float = 0.1

    def __post_init__(self):
        for name in ("w_rgb", "w_ssim", "w_depth", "w_normal"):
            if getattr(self, name) < 0:
                raise ValueError(f"Loss weight {name} must be non-negative, got {getattr(self, name)}.")

@dataclass
class LossReport:
    l_rgb: float = 0.0
    l_ssim: float = 0.0
    l_depth: float = 0.0
    l_normal: float = 0.0
    total: float = 0.0

    @classmethod
    def mean(cls, reports):
        """Average of several reports (used across the views of one optimization step)."""
        n = len(reports)
        return cls(*(sum(getattr(r, name) for r in reports) / n for name in
                     ("l_rgb", "l_ssim", "l_depth", "l_normal", "total")))

@dataclass
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    index: int

@dataclass
class _Chunk:
    v0: int
    v1: int
    cand: np.ndarray
    g: np.ndarray
    alpha: np.ndarray
    unclipped: np.ndarray
    T: np.ndarray
    contrib: np.ndarray
    weights: np.ndarray

@dataclass
class RenderState:
    """Blend terms kept by the forward pass, in depth-sorted order."""
    index: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    n_gaussians: int
    chunks: list = field(default_factory=list)

@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    state: RenderState = None

@dataclass
class Gradients:
    color: np.ndarray
    opacity: np.ndarray
    camera: np.ndarray
    report: LossReport

# 3D covariance from rotation and scale
def covariance_3d(q, s):
    """Σ = R S Sᵀ Rᵀ for (N, 4) scalar-first quaternions and (N, 3) scales."""
    rotations = quaternion_to_rotation(np.atleast_2d(q))
    m = rotations * np.atleast_2d(s)[:, None, :]
    return m @ np.transpose(m, (0, 2, 1))

def gaussian_weight_3d(g, x):
    """
    Opacity-weighted density o·exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ)) of one primitive at a point.

    Raises:
        ValueError: If the covariance is singular.
    """
    cov = covariance_3d(g.q, g.s)[0]
    d = np.asarray(x, dtype=np.float64) - np.asarray(g.mu, dtype=np.float64)
    try:
        m = d @ np.linalg.solve(cov, d)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"Singular Gaussian covariance: {e}") from e
    return float(g.o * np.exp(-0.5 * m))

def _project(mu, q, s, pose, intrinsics):
    """Project primitives; returns arrays for the survivors of near-plane and image culling."""
    cam = pose.world_to_camera(np.atleast_2d(mu))
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    front = z > SPLAT_NEAR_PLANE
    zs = np.where(front, z, 1.0)
    fx, fy = intrinsics.fx, intrinsics.fy

    jac = np.zeros((len(cam), 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * x / zs ** 2
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * y / zs ** 2
    t = jac @ pose.rotation.T
    cov2d = t @ covariance_3d(q, s) @ np.transpose(t, (0, 2, 1))
    cov2d[:, 0, 0] += COV2D_BLUR
    cov2d[:, 1, 1] += COV2D_BLUR

    mean2d = np.stack([fx * x / zs + intrinsics.cx, fy * y / zs + intrinsics.cy], axis=1)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    sigma = np.sqrt((a + c) / 2 + np.sqrt(((a - c) / 2) ** 2 + b ** 2))
    inside = (
        (mean2d[:, 0] >= -3 * sigma) & (mean2d[:, 0] <= intrinsics.width - 1 + 3 * sigma)
        & (mean2d[:, 1] >= -3 * sigma) & (mean2d[:, 1] <= intrinsics.height - 1 + 3 * sigma)
    )
    keep = np.flatnonzero(front & inside)
    return {
        "index": keep,
        "mean2d": mean2d[keep],
        "cov2d": cov2d[keep],
        "depth": z[keep],
        "sigma": sigma[keep],
    }

def project_gaussian(g, pose, intrinsics):
    """
    EWA projection of one primitive.

    Returns:
        Projected2D or None: None when the primitive is behind the near plane or more than
        3σ outside the image.
    """
    p = _project(np.atleast_2d(g.mu), np.atleast_2d(g.q), np.atleast_2d(g.s), pose, intrinsics)
    if len(p["index"]) == 0:
        return None
    return Projected2D(p["mean2d"][0], p["cov2d"][0], float(p["depth"][0]), 0)

# Forward splatting
def render(field, pose, intrinsics, keep_state=False):
    """
    Render color, depth and accumulated alpha of a Gaussian field.

    Pixel (u, v) is evaluated at image coordinate (u, v). Per pixel, α = o·exp(-½ dᵀ Σ₂⁻¹ d) is
    clipped to 0.999 and ignored below 1/255; blending stops once transmittance drops below
    1e-4. Depth is the alpha-blended primitive depth.

    Parameters:
        field: Object with (N, 3) mu, (N, 4) q, (N, 3) s, (N, 3) c and (N,) o arrays.
        pose (Pose): Camera-to-world pose.
        intrinsics (Intrinsics): Camera intrinsics.
        keep_state (bool): Keep the blend terms needed by `backward`.

    Returns:
        RenderOutput
    """
    h, w = intrinsics.shape
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    n = len(field)
    if n == 0:
        state = RenderState(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0), 0)
        return RenderOutput(color, depth, alpha, state if keep_state else None)

    p = _project(field.mu, field.q, field.s, pose, intrinsics)
    order = np.lexsort((p["index"], p["depth"]))
    index = p["index"][order]
    mean2d, cov2d, depths, sigma = p["mean2d"][order], p["cov2d"][order], p["depth"][order], p["sigma"][order]
    colors = np.asarray(field.c, dtype=np.float64)[index]
    opacities = np.asarray(field.o, dtype=np.float64)[index]

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    con_a = cov2d[:, 1, 1] / det
    con_b = -cov2d[:, 0, 1] / det
    con_c = cov2d[:, 0, 0] / det

    # Beyond this radius o·g < 1/255 for every pixel
    with np.errstate(divide="ignore", invalid="ignore"):
        reach = np.sqrt(2 * np.log(np.maximum(255.0 * opacities, 1.0))) * sigma
    usable = (255.0 * opacities > 1.0) & (mean2d[:, 0] + reach >= 0) & (mean2d[:, 0] - reach <= w - 1)
    v_lo, v_hi = mean2d[:, 1] - reach, mean2d[:, 1] + reach

    state = RenderState(index, colors, depths, n)
    for v0 in range(0, h, ROW_CHUNK):
        v1 = min(v0 + ROW_CHUNK, h)
        cand = np.flatnonzero(usable & (v_hi >= v0) & (v_lo <= v1 - 1))
        if len(cand) == 0:
            continue
        vv, uu = np.mgrid[v0:v1, 0:w]
        dx = uu.reshape(-1, 1) - mean2d[cand, 0][None, :]
        dy = vv.reshape(-1, 1) - mean2d[cand, 1][None, :]
        g = np.exp(-0.5 * (con_a[cand] * dx ** 2 + 2 * con_b[cand] * dx * dy + con_c[cand] * dy ** 2))
        raw = opacities[cand][None, :] * g
        active = raw >= ALPHA_MIN
        a = np.where(active, np.minimum(raw, ALPHA_MAX), 0.0)
        T = np.ones_like(a)
        T[:, 1:] = np.cumprod(1.0 - a[:, :-1], axis=1)
        contrib = T >= T_MIN
        weights = np.where(contrib, a * T, 0.0)

        color[v0:v1] = (weights @ colors[cand]).reshape(v1 - v0, w, 3)
        depth[v0:v1] = (weights @ depths[cand]).reshape(v1 - v0, w)
        alpha[v0:v1] = weights.sum(axis=1).reshape(v1 - v0, w)
        if keep_state:
            state.chunks.append(_Chunk(v0, v1, cand, g, a, active & (raw < ALPHA_MAX), T, contrib, weights))

    return RenderOutput(color, depth, alpha, state if keep_state else None)

def _backprop_render(state, grad_color, grad_depth):
    """Chain image gradients through alpha blending to per-primitive color and opacity."""
    g_color = np.zeros((state.n_gaussians, 3))
    g_opacity = np.zeros(state.n_gaussians)
    sorted_gc = np.zeros((len(state.index), 3))
    sorted_go = np.zeros(len(state.index))
    for ch in state.chunks:
        gc = grad_color[ch.v0:ch.v1].reshape(-1, 3)
        gd = grad_depth[ch.v0:ch.v1].ravel()
        sorted_gc[ch.cand] += ch.weights.T @ gc
        value = gc @ state.colors[ch.cand].T + gd[:, None] * state.depths[ch.cand][None, :]
        weighted = ch.weights * value
        behind = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1] - weighted
        d_alpha = np.where(ch.contrib, ch.T * value - behind / (1.0 - ch.alpha), 0.0)
        sorted_go[ch.cand] += np.sum(d_alpha * ch.g * ch.unclipped, axis=0)
    g_color[state.index] = sorted_gc
    g_opacity[state.index] = sorted_go
    return g_color, g_opacity

# Camera blur / exposure model
def _shift_terms(h, w, x, y):
    su = np.arange(w) - x
    sv = np.arange(h) - y
    u0, v0 = np.floor(su), np.floor(sv)
    fu, fv = su - u0, sv - v0
    iu0 = np.clip(u0, 0, w - 1).astype(np.int64)
    iu1 = np.clip(u0 + 1, 0, w - 1).astype(np.int64)
    iv0 = np.clip(v0, 0, h - 1).astype(np.int64)
    iv1 = np.clip(v0 + 1, 0, h - 1).astype(np.int64)
    return iu0, iu1, fu, iv0, iv1, fv

def _expand(weights, ndim):
    return weights.reshape(weights.shape + (1,) * (ndim - 2))

def _corners(image, iu0, iu1, iv0, iv1):
    rows0, rows1 = image[iv0], image[iv1]
    return rows0[:, iu0], rows0[:, iu1], rows1[:, iu0], rows1[:, iu1]

def translate_image(image, x, y):
    """
    Shift an image by (x, y) pixels: out(u, v) = image(u - x, v - y), bilinear with edge clamping.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    iu0, iu1, fu, iv0, iv1, fv = _shift_terms(h, w, x, y)
    i00, i01, i10, i11 = _corners(image, iu0, iu1, iv0, iv1)
    fu = _expand(fu[None, :], image.ndim)
    fv = _expand(fv[:, None], image.ndim)
    return (1 - fv) * ((1 - fu) * i00 + fu * i01) + fv * ((1 - fu) * i10 + fu * i11)

def _translate_adjoint(grad, x, y):
    h, w = grad.shape[:2]
    iu0, iu1, fu, iv0, iv1, fv = _shift_terms(h, w, x, y)
    out = np.zeros_like(grad)
    rows0, rows1 = iv0[:, None], iv1[:, None]
    cols0, cols1 = iu0[None, :], iu1[None, :]
    wu, wv = fu[None, :], fv[:, None]
    for rows, cols, weight in (
        (rows0, cols0, (1 - wv) * (1 - wu)),
        (rows0, cols1, (1 - wv) * wu),
        (rows1, cols0, wv * (1 - wu)),
        (rows1, cols1, wv * wu),
    ):
        np.add.at(out, (rows, cols), _expand(weight, grad.ndim) * grad)
    return out

def apply_camera_model(image, cam):
    """omega_trans·translate(image, x_trans, y_trans) + omega_raw·image. Linear in the image."""
    image = np.asarray(image, dtype=np.float64)
    return cam.omega_trans * translate_image(image, cam.x_trans, cam.y_trans) + cam.omega_raw * image

def _camera_backward(image, cam, grad_out):
    """Gradients of a loss w.r.t. the pre-camera image and [omega_raw, omega_trans, x, y]."""
    h, w = image.shape[:2]
    iu0, iu1, fu, iv0, iv1, fv = _shift_terms(h, w, cam.x_trans, cam.y_trans)
    i00, i01, i10, i11 = _corners(image, iu0, iu1, iv0, iv1)
    eu = _expand(fu[None, :], image.ndim)
    ev = _expand(fv[:, None], image.ndim)
    shifted = (1 - ev) * ((1 - eu) * i00 + eu * i01) + ev * ((1 - eu) * i10 + eu * i11)
    d_su = (1 - ev) * (i01 - i00) + ev * (i11 - i10)
    d_sv = (1 - eu) * (i10 - i00) + eu * (i11 - i01)
    g_cam = np.array([
        np.sum(grad_out * image),
        np.sum(grad_out * shifted),
        -cam.omega_trans * np.sum(grad_out * d_su),
        -cam.omega_trans * np.sum(grad_out * d_sv),
    ])
    g_image = cam.omega_raw * grad_out + cam.omega_trans * _translate_adjoint(grad_out, cam.x_trans, cam.y_trans)
    return g_image, g_cam

# Normals computed from depth
def _normal_terms(depth, intrinsics):
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    points = backproject(depth, intrinsics)
    valid = depth > 0
    tu = points[1:-1, 2:] - points[1:-1, :-2]
    tv = points[2:, 1:-1] - points[:-2, 1:-1]
    vec = np.cross(tv, tu)
    norm = np.linalg.norm(vec, axis=-1)
    ok = (
        valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
        & (norm > 1e-12)
    )
    unit = np.where(ok[..., None], vec / np.where(norm > 1e-12, norm, 1.0)[..., None], 0.0)
    normals = np.zeros((h, w, 3))
    normals[1:-1, 1:-1] = unit
    mask = np.zeros((h, w), dtype=bool)
    mask[1:-1, 1:-1] = ok
    return normals, mask, {"tu": tu, "tv": tv, "norm": norm}

def normal_from_depth(depth, intrinsics):
    """
    Unit normals from the cross product of central-difference tangents of the back-projected
    depth. Pixels on the border or next to an invalid pixel get a zero normal.

    Returns:
        np.ndarray: (H, W, 3) normals in the camera frame, facing the camera.
    """
    normals, _, _ = _normal_terms(depth, intrinsics)
    return normals

def normal_to_rgb(normals):
    """Map normal components from [-1, 1] to colors in [0, 1]."""
    return (np.asarray(normals) + 1.0) / 2.0

def _normal_loss(depth_hat, target_normals, target_mask, intrinsics, with_grad):
    normals, mask, cache = _normal_terms(depth_hat, intrinsics)
    both = mask & target_mask
    count = int(both.sum())
    grad = np.zeros_like(depth_hat)
    if count == 0:
        return 0.0, grad
    cosine = np.sum(normals * target_normals, axis=-1)
    loss = float(np.mean(1.0 - cosine[both]))
    if not with_grad:
        return loss, grad

    inner = both[1:-1, 1:-1]
    n_hat = normals[1:-1, 1:-1]
    g_n = np.where(inner[..., None], -target_normals[1:-1, 1:-1] / count, 0.0)
    radial = np.sum(n_hat * g_n, axis=-1, keepdims=True)
    safe_norm = np.where(inner, cache["norm"], 1.0)[..., None]
    g_v = np.where(inner[..., None], (g_n - n_hat * radial) / safe_norm, 0.0)
    g_tv = np.cross(cache["tu"], g_v)
    g_tu = np.cross(g_v, cache["tv"])

    g_points = np.zeros(depth_hat.shape + (3,))
    g_points[1:-1, 2:] += g_tu
    g_points[1:-1, :-2] -= g_tu
    g_points[2:, 1:-1] += g_tv
    g_points[:-2, 1:-1] -= g_tv
    grad = np.sum(g_points * pixel_rays(intrinsics), axis=-1)
    return loss, grad

# Structural similarity
def _window(x):
    sigma = (SSIM_SIGMA, SSIM_SIGMA) + (0.0,) * (x.ndim - 2)
    return ndimage.gaussian_filter(x, sigma=sigma, truncate=SSIM_TRUNCATE, mode="constant")

def _ssim_stats(a, b):
    mu_a, mu_b = _window(a), _window(b)
    var_a = _window(a * a) - mu_a ** 2
    var_b = _window(b * b) - mu_b ** 2
    cov = _window(a * b) - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, a1, a2, b1, b2

def ssim_map(a, b):
    """Per-pixel SSIM with an 11 x 11 Gaussian window (σ = 1.5), zero padding at the border."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}.")
    _, _, a1, a2, b1, b2 = _ssim_stats(a, b)
    return (a1 * a2) / (b1 * b2)

def ssim(a, b):
    """Mean SSIM of two images in [0, 1], averaged over pixels and channels."""
    return float(np.mean(ssim_map(a, b)))

def _ssim_with_grad(a, b):
    """Mean SSIM and its gradient with respect to `a`."""
    mu_a, mu_b, a1, a2, b1, b2 = _ssim_stats(a, b)
    s = (a1 * a2) / (b1 * b2)
    scale = 1.0 / s.size
    d_mu = scale * s * (2 * mu_b / a1 - 2 * mu_b / a2 - 2 * mu_a / b1 + 2 * mu_a / b2)
    d_aa = scale * (-s / b2)
    d_ab = scale * (2 * s / a2)
    grad = _window(d_mu) + 2 * a * _window(d_aa) + b * _window(d_ab)
    return float(np.mean(s)), grad

# Training losses
def _image_terms(rendered, cam, target, weights, with_grad, target_normals=None):
    c_hat = rendered.color
    out = apply_camera_model(c_hat, cam)
    residual = out - target.color
    l_rgb = float(np.mean(np.abs(residual)))

    if with_grad:
        s, g_ssim = _ssim_with_grad(out, target.color)
    else:
        s, g_ssim = ssim(out, target.color), None
    l_ssim = 1.0 - s

    valid = target.depth > 0
    n_valid = int(valid.sum())
    d_residual = rendered.depth - target.depth
    l_depth = float(np.mean(np.abs(d_residual[valid]))) if n_valid else 0.0

    if target_normals is None:
        target_normals = _normal_terms(target.depth, target.intrinsics)[:2]
    l_normal, g_normal = _normal_loss(rendered.depth, target_normals[0], target_normals[1], target.intrinsics, with_grad)

    total = weights.w_rgb * l_rgb + weights.w_ssim * l_ssim + weights.w_depth * l_depth + weights.w_normal * l_normal
    report = LossReport(l_rgb, l_ssim, l_depth, l_normal, float(total))
    if not with_grad:
        return report, None, None, None

    g_out = weights.w_rgb * np.sign(residual) / residual.size - weights.w_ssim * g_ssim
    g_depth = weights.w_normal * g_normal
    if n_valid:
        g_depth = g_depth + np.where(valid, weights.w_depth * np.sign(d_residual) / n_valid, 0.0)
    g_color, g_cam = _camera_backward(c_hat, cam, g_out)
    return report, g_color, g_depth, g_cam

def loss_all(rendered, cam, target, weights):
    """
    Weighted training loss of a render against a target frame.

    l_rgb is the mean absolute error of apply_camera_model(color) over all pixels and channels,
    l_ssim is 1 - SSIM of the same image, l_depth the mean absolute depth error over valid target
    depth and l_normal the mean of 1 - cos between rendered-depth and target-depth normals where
    both are defined.

    Returns:
        LossReport
    """
    return _image_terms(rendered, cam, target, weights, with_grad=False)[0]

def image_loss_gradients(rendered, cam, target, weights, target_normals=None):
    """
    Loss report plus gradients w.r.t. the pre-camera color image, the rendered depth image and
    the camera parameters [omega_raw, omega_trans, x_trans, y_trans].
    """
    return _image_terms(rendered, cam, target, weights, with_grad=True, target_normals=target_normals)

def backward(rendered, cam, target, weights, target_normals=None):
    """
    Exact gradients of the weighted loss w.r.t. every primitive's color and opacity and the
    camera parameters.

    Parameters:
        rendered (RenderOutput): Output of render(..., keep_state=True).
        cam (CameraModel): Camera model applied to the rendered color.
        target (FrameBundle): Target frame.
        weights (LossWeights): Loss weights.
        target_normals (tuple, optional): Cached (normals, mask) of the target depth.

    Returns:
        Gradients

    Raises:
        ValueError: If the render kept no forward state.
    """
    if rendered.state is None:
        raise ValueError("Render state missing; call render(..., keep_state=True) before backward.")
    report, g_color_img, g_depth_img, g_cam = image_loss_gradients(rendered, cam, target, weights, target_normals)
    g_color, g_opacity = _backprop_render(rendered.state, g_color_img, g_depth_img)
    return Gradients(g_color, g_opacity, g_cam, report)
