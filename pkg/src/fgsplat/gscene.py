"""Scene types and projective math for feature-carrying 3D Gaussians.

Storage conventions (raw parameters, activations applied at use):
  scale: pre-activation log-scales, world scale = exp(s)
  opacity: pre-activation logit, opacity = sigmoid(o)
  quaternion: unnormalized (w, x, y, z), normalized on use

3D covariance is R(q) diag(exp(s)^2) R(q)^T. Projection follows the EWA
splatting first-order expansion: Sigma2d = J W Sigma W^T J^T plus an
isotropic 0.3 px^2 low-pass term added on the diagonal.

Pixel coordinates: pixel (i, j) has continuous image coordinates
(x, y) = (j, i), i.e. integer pixel centers; a camera-axis point projects
to exactly (cx, cy).

The projection math is written once against diffcore ops (batched over
Gaussians), so rendering gradients flow through it; numpy conveniences
wrap the tensor path under no_grad.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ops
from .errors import ContractError, NumericError

LOWPASS_PX2 = 0.3     # isotropic screen-space blur added to Sigma2d
DEFAULT_Z_NEAR = 0.01
SPLF_MAGIC = b"SPLF"
SPLF_VERSION = 1

_QUAT_NORM_FLOOR = 1e-8


# -- camera ---------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera: intrinsics K, world-to-camera rotation R and
    translation t (camera axes: x right, y down, z forward)."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.K.shape != (3, 3) or self.R.shape != (3, 3) or self.t.shape != (3,):
            raise ContractError(
                f"camera shapes must be K(3,3), R(3,3), t(3,); got "
                f"{self.K.shape}, {self.R.shape}, {self.t.shape}")
        if not (np.isfinite(self.K).all() and np.isfinite(self.R).all()
                and np.isfinite(self.t).all()):
            raise ContractError("camera contains non-finite values")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ContractError("camera focal lengths must be positive")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-5 or np.linalg.det(self.R) < 0:
            raise ContractError(
                f"camera rotation is not orthonormal with det +1 (err {err:.2e})")
        if self.width <= 0 or self.height <= 0:
            raise ContractError("camera image size must be positive")

    @property
    def fx(self):
        return float(self.K[0, 0])

    @property
    def fy(self):
        return float(self.K[1, 1])

    @property
    def cx(self):
        return float(self.K[0, 2])

    @property
    def cy(self):
        return float(self.K[1, 2])

    def scaled(self, s):
        """Camera for an image downscaled by factor s (e.g. 1/8).

        Principal point follows cx' = s*cx - (1-s)/2 so the low-res integer
        pixel centers sit at the mean position of the full-res pixels they
        cover.
        """
        K = self.K.copy()
        K[0, 0] *= s
        K[1, 1] *= s
        K[0, 2] = s * self.K[0, 2] - (1.0 - s) / 2.0
        K[1, 2] = s * self.K[1, 2] - (1.0 - s) / 2.0
        return Camera(K, self.R.copy(), self.t.copy(),
                      int(round(self.width * s)), int(round(self.height * s)))

    def to_json(self):
        return {"K": self.K.tolist(), "R": self.R.tolist(), "t": self.t.tolist(),
                "width": self.width, "height": self.height}

    @staticmethod
    def from_json(d):
        return Camera(np.array(d["K"]), np.array(d["R"]), np.array(d["t"]),
                      int(d["width"]), int(d["height"]))


def look_at(eye, target, up, fx, fy, cx, cy, width, height):
    """Camera at `eye` looking toward `target` (y-down, z-forward axes)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upn = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upn)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ContractError("look_at: view direction is parallel to up")
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    return Camera(K, R, t, width, height)


# -- primitives and scenes ------------------------------------------------

@dataclass
class GaussianPrimitive:
    """One Gaussian: position, raw log-scales, raw quaternion, raw opacity
    logit, RGB color in [0,1], and a learned feature vector."""

    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity: float
    color: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float32)
        self.scale = np.asarray(self.scale, dtype=np.float32)
        self.quat = np.asarray(self.quat, dtype=np.float32)
        self.color = np.asarray(self.color, dtype=np.float32)
        self.feature = np.asarray(self.feature, dtype=np.float32)
        if self.mu.shape != (3,) or self.scale.shape != (3,) or self.quat.shape != (4,) \
                or self.color.shape != (3,):
            raise ContractError("primitive field shapes must be mu(3,), scale(3,), "
                                "quat(4,), color(3,)")
        for name, arr in (("mu", self.mu), ("scale", self.scale), ("quat", self.quat),
                          ("color", self.color), ("feature", self.feature)):
            if not np.isfinite(arr).all():
                raise ContractError(f"primitive field {name!r} contains non-finite values")
        if not np.isfinite(self.opacity):
            raise ContractError("primitive opacity is non-finite")


@dataclass
class GaussianScene:
    """A list of primitives plus a shared feature dimension and background."""

    primitives: list
    feature_dim: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float32)
        if self.background.shape != (3,):
            raise ContractError("background must be an RGB triple")
        for i, p in enumerate(self.primitives):
            if p.feature.shape != (self.feature_dim,):
                raise ContractError(
                    f"primitive {i} feature dim {p.feature.shape} != scene D={self.feature_dim}")

    def __len__(self):
        return len(self.primitives)

    def to_arrays(self):
        """Pack primitives into flat float32 arrays (N,...)."""
        n = len(self.primitives)
        d = self.feature_dim
        out = {
            "mu": np.zeros((n, 3), np.float32),
            "scale": np.zeros((n, 3), np.float32),
            "quat": np.zeros((n, 4), np.float32),
            "opacity": np.zeros((n,), np.float32),
            "color": np.zeros((n, 3), np.float32),
            "feature": np.zeros((n, d), np.float32),
        }
        for i, p in enumerate(self.primitives):
            out["mu"][i] = p.mu
            out["scale"][i] = p.scale
            out["quat"][i] = p.quat
            out["opacity"][i] = p.opacity
            out["color"][i] = p.color
            out["feature"][i] = p.feature
        return out

    @staticmethod
    def from_arrays(arrays, background=None):
        n = arrays["mu"].shape[0]
        d = arrays["feature"].shape[1]
        prims = [GaussianPrimitive(arrays["mu"][i], arrays["scale"][i], arrays["quat"][i],
                                   float(arrays["opacity"][i]), arrays["color"][i],
                                   arrays["feature"][i])
                 for i in range(n)]
        bg = np.zeros(3, np.float32) if background is None else background
        return GaussianScene(prims, d, bg)


# -- core math (tensor route) --------------------------------------------

def quat_to_rotmat_t(q):
    """Batched unit-quaternion to rotation matrix: (N,4) -> (N,3,3).

    Quaternions are normalized here; a norm below 1e-8 is a numeric error.
    Convention (w, x, y, z), identity = (1, 0, 0, 0).
    """
    q = ops.as_tensor(q)
    if q.ndim != 2 or q.shape[1] != 4:
        raise ContractError(f"quat_to_rotmat expects (N,4), got {q.shape}")
    norms = np.sqrt((q.data.astype(np.float64) ** 2).sum(axis=1))
    if norms.min() < _QUAT_NORM_FLOOR:
        bad = int(np.argmin(norms))
        raise NumericError(
            f"quaternion {bad} has norm {norms.min():.2e} < {_QUAT_NORM_FLOOR}")
    u = ops.l2_normalize(q, axis=1, eps=0.0)
    w, x, y, z = (u[:, 0], u[:, 1], u[:, 2], u[:, 3])
    one = 1.0
    r00 = one - 2.0 * (y * y + z * z)
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r10 = 2.0 * (x * y + w * z)
    r11 = one - 2.0 * (x * x + z * z)
    r12 = 2.0 * (y * z - w * x)
    r20 = 2.0 * (x * z - w * y)
    r21 = 2.0 * (y * z + w * x)
    r22 = one - 2.0 * (x * x + y * y)
    rows = ops.stack([r00, r01, r02, r10, r11, r12, r20, r21, r22], axis=1)
    return ops.reshape(rows, (q.shape[0], 3, 3))


def build_covariance_t(scale_raw, quat):
    """Batched Sigma = R diag(exp(s)^2) R^T: (N,3),(N,4) -> (N,3,3)."""
    scale_raw = ops.as_tensor(scale_raw)
    if scale_raw.ndim != 2 or scale_raw.shape[1] != 3:
        raise ContractError(f"build_covariance expects scales (N,3), got {scale_raw.shape}")
    R = quat_to_rotmat_t(quat)
    s = ops.exp(scale_raw)
    m = ops.mul(R, ops.reshape(s, (s.shape[0], 1, 3)))  # columns scaled
    return ops.matmul(m, ops.transpose(m, (0, 2, 1)))


def quat_to_rotmat(q):
    """Numpy convenience wrapper over the tensor route: (4,) or (N,4)."""
    arr = np.asarray(q, dtype=np.float64)
    single = arr.ndim == 1
    with dc.no_grad():
        out = quat_to_rotmat_t(dc.Tensor(arr.reshape(-1, 4), dtype=np.float64)).data
    return out[0] if single else out


def build_covariance(scale_raw, quat):
    """Numpy convenience wrapper: (3,),(4,) -> (3,3) or batched."""
    s = np.asarray(scale_raw, dtype=np.float64)
    single = s.ndim == 1
    with dc.no_grad():
        out = build_covariance_t(
            dc.Tensor(s.reshape(-1, 3), dtype=np.float64),
            dc.Tensor(np.asarray(quat, np.float64).reshape(-1, 4), dtype=np.float64)).data
    return out[0] if single else out


@dataclass
class ProjectedScene:
    """Differentiable screen-space quantities for the Gaussians kept after
    near-plane and singularity culling, plus bookkeeping for binning."""

    mu2d: dc.Tensor       # (M,2) pixel coords
    conic: dc.Tensor      # (M,3) upper triangle (a,b,c) of inverse Sigma2d
    cov2d: dc.Tensor      # (M,3) upper triangle of Sigma2d (after low-pass)
    depth: dc.Tensor      # (M,) camera z
    kept: np.ndarray      # (M,) indices into the original N
    radii: np.ndarray     # (M,2) conservative 3-sigma extents in px (x, y)
    n_culled: int
    n_singular: int


def project_scene_t(mu, scale_raw, quat, cam, z_near=DEFAULT_Z_NEAR):
    """Project all Gaussians of a scene for one camera (tensor route).

    mu (N,3), scale_raw (N,3), quat (N,4) tensors. Gaussians with camera
    z <= z_near are culled; projected covariances with det <= 1e-12 are
    dropped and counted separately.
    """
    mu = ops.as_tensor(mu)
    n = mu.shape[0]
    dt = mu.data.dtype
    Rw = dc.Tensor(cam.R.astype(dt))
    tw = dc.Tensor(cam.t.astype(dt))
    cam_pts = ops.add(ops.matmul(mu, ops.transpose(Rw, (1, 0))), tw)
    z_all = cam_pts.data[:, 2]
    keep = z_all > z_near
    kept_idx = np.nonzero(keep)[0]
    n_culled = int(n - kept_idx.size)
    if kept_idx.size == 0:
        empty = dc.Tensor(np.zeros((0,), dtype=dt))
        return ProjectedScene(dc.Tensor(np.zeros((0, 2), dt)), dc.Tensor(np.zeros((0, 3), dt)),
                              dc.Tensor(np.zeros((0, 3), dt)), empty,
                              kept_idx, np.zeros((0, 2)), n_culled, 0)

    sigma = build_covariance_t(scale_raw, quat)
    sigma_cam = ops.matmul(Rw, ops.matmul(ops.gather(sigma, kept_idx, axis=0),
                                          ops.transpose(Rw, (1, 0))))
    pts = ops.gather(cam_pts, kept_idx, axis=0)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    iz = ops.pow_const(z, -1.0)
    fx, fy, cx, cy = cam.fx, cam.fy, cam.cx, cam.cy
    px = ops.add(ops.mul(ops.mul(x, iz), fx), cx)
    py = ops.add(ops.mul(ops.mul(y, iz), fy), cy)
    mu2d = ops.stack([px, py], axis=1)

    # EWA Jacobian rows: (fx/z, 0, -fx x/z^2), (0, fy/z, -fy y/z^2)
    iz2 = ops.mul(iz, iz)
    j00 = ops.mul(iz, fx)
    j02 = ops.mul(ops.mul(x, iz2), -fx)
    j11 = ops.mul(iz, fy)
    j12 = ops.mul(ops.mul(y, iz2), -fy)

    s00 = sigma_cam[:, 0, 0]
    s01 = sigma_cam[:, 0, 1]
    s02 = sigma_cam[:, 0, 2]
    s11 = sigma_cam[:, 1, 1]
    s12 = sigma_cam[:, 1, 2]
    s22 = sigma_cam[:, 2, 2]

    a = ops.mul(ops.mul(j00, j00), s00) + 2.0 * (j00 * j02 * s02) + (j02 * j02) * s22
    b = (j00 * j11) * s01 + (j00 * j12) * s02 + (j02 * j11) * s12 + (j02 * j12) * s22
    c = (j11 * j11) * s11 + 2.0 * (j11 * j12 * s12) + (j12 * j12) * s22
    a = ops.add(a, LOWPASS_PX2)
    c = ops.add(c, LOWPASS_PX2)

    det = ops.sub(ops.mul(a, c), ops.mul(b, b))
    good = det.data > 1e-12
    n_singular = int((~good).sum())
    if n_singular:
        sub_idx = np.nonzero(good)[0]
        a, b, c = (ops.gather(v, sub_idx, axis=0) for v in (a, b, c))
        det = ops.gather(det, sub_idx, axis=0)
        mu2d = ops.gather(mu2d, sub_idx, axis=0)
        z = ops.gather(z, sub_idx, axis=0)
        kept_idx = kept_idx[sub_idx]

    inv_det = ops.pow_const(det, -1.0)
    conic = ops.stack([ops.mul(c, inv_det), ops.mul(ops.neg(b), inv_det),
                       ops.mul(a, inv_det)], axis=1)
    cov2d = ops.stack([a, b, c], axis=1)
    radii = 3.0 * np.sqrt(np.maximum(cov2d.data[:, [0, 2]].astype(np.float64), 0.0))
    return ProjectedScene(mu2d, conic, cov2d, z, kept_idx, radii, n_culled, n_singular)


@dataclass
class ProjectedGaussian:
    mu2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    culled: bool


def project_gaussian(g, cam, z_near=DEFAULT_Z_NEAR):
    """Project a single GaussianPrimitive; culled=True if behind z_near."""
    with dc.no_grad():
        proj = project_scene_t(
            dc.Tensor(g.mu.reshape(1, 3), dtype=np.float64),
            dc.Tensor(g.scale.reshape(1, 3), dtype=np.float64),
            dc.Tensor(g.quat.reshape(1, 4), dtype=np.float64),
            cam, z_near=z_near)
    if proj.kept.size == 0:
        return ProjectedGaussian(np.zeros(2), np.zeros((2, 2)), 0.0, True)
    a, b, c = proj.cov2d.data[0]
    return ProjectedGaussian(proj.mu2d.data[0].copy(),
                             np.array([[a, b], [b, c]]),
                             float(proj.depth.data[0]), False)


def unproject_depth(depth, cam):
    """Per-pixel depth map (H,W) -> world-space points (H,W,3).

    Differentiable in depth when a Tensor is supplied. Depth must be
    strictly positive.
    """
    d = ops.as_tensor(depth)
    h, w = d.shape
    if (h, w) != (cam.height, cam.width):
        raise ContractError(
            f"depth map {h}x{w} does not match camera {cam.height}x{cam.width}")
    dmin = d.data.min()
    if not np.isfinite(d.data).all() or dmin <= 0:
        bad = np.unravel_index(int(np.argmin(d.data)), d.data.shape)
        bad = tuple(int(v) for v in bad)
        raise ContractError(
            f"unproject_depth requires positive finite depth; pixel {bad} has {dmin}")
    dt = d.data.dtype
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    dirs = np.stack([(jj - cam.cx) / cam.fx, (ii - cam.cy) / cam.fy,
                     np.ones_like(jj, dtype=np.float64)], axis=-1).astype(dt)
    cam_pts = ops.mul(dc.Tensor(dirs), ops.reshape(d, (h, w, 1)))
    flat = ops.reshape(cam_pts, (h * w, 3))
    world = ops.matmul(ops.sub(flat, dc.Tensor(cam.t.astype(dt))),
                       dc.Tensor(cam.R.astype(dt)))
    return ops.reshape(world, (h, w, 3))


# -- SPLF serialization ---------------------------------------------------

def save_splf(path, scene):
    """Write a scene to the SPLF binary format (little-endian float32)."""
    arrays = scene.to_arrays()
    n = len(scene)
    d = scene.feature_dim
    rec = np.concatenate([
        arrays["mu"], arrays["scale"], arrays["quat"],
        arrays["opacity"][:, None], arrays["color"], arrays["feature"],
    ], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(SPLF_MAGIC)
        fh.write(struct.pack("<III", SPLF_VERSION, n, d))
        fh.write(rec.tobytes())


def load_splf(path, background=None):
    """Read an SPLF file back into a GaussianScene."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != SPLF_MAGIC:
        raise ContractError(f"{path}: not an SPLF file (bad magic)")
    version, n, d = struct.unpack("<III", blob[4:16])
    if version != SPLF_VERSION:
        raise ContractError(f"{path}: unsupported SPLF version {version}")
    width = 14 + d
    expect = 16 + 4 * width * n
    if len(blob) != expect:
        raise ContractError(
            f"{path}: truncated SPLF payload ({len(blob)} bytes, expected {expect})")
    rec = np.frombuffer(blob[16:], dtype="<f4").reshape(n, width)
    arrays = {
        "mu": rec[:, 0:3], "scale": rec[:, 3:6], "quat": rec[:, 6:10],
        "opacity": rec[:, 10], "color": rec[:, 11:14], "feature": rec[:, 14:],
    }
    return GaussianScene.from_arrays(arrays, background)
