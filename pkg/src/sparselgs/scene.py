"""Core scene types: Gaussian primitives, cameras, granularities, configuration.

Everything downstream (rasterizer, alignment, trainer, query) works on the
types defined here.  All math is float64; instances are treated as immutable
values except for GaussianCloud, which the trainer mutates in place through
its arrays and version counter.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

SCALE_EPS = 1e-12


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion; input is normalized first."""
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of a rotation tangent vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = np.array(
        [
            [0.0, -omega[2], omega[1]],
            [omega[2], 0.0, -omega[0]],
            [-omega[1], omega[0], 0.0],
        ]
    )
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


class Granularity(IntEnum):
    """Segmentation scale of a region: a complete object, a half, or a quarter."""

    whole = 1
    subpart = 2
    part = 3


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic Gaussian primitive.

    Scales are stored as logs and opacity as a logit so optimizer steps can
    never leave the valid domain.  ``sem_code`` maps each granularity to a
    low-dimensional semantic code.
    """

    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    sem_code: dict = field(default_factory=dict)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def covariance(g: Gaussian3D) -> np.ndarray:
    """Covariance R S S^T R^T with S = diag(exp(log_scale)).  Symmetric PSD."""
    R = quat_to_rot(g.rotation)
    L = R * np.exp(np.asarray(g.log_scale, dtype=np.float64))[None, :]
    return L @ L.T


def gaussian_density(g: Gaussian3D, x: np.ndarray) -> float:
    """Unnormalized density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)), in (0, 1]."""
    scales = np.exp(np.asarray(g.log_scale, dtype=np.float64))
    if np.any(scales <= SCALE_EPS):
        raise ValueError("singular covariance")
    d = np.asarray(x, dtype=np.float64) - np.asarray(g.mean, dtype=np.float64)
    cov = covariance(g)
    v = np.linalg.solve(cov, d)
    return float(np.exp(-0.5 * d @ v))


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera SE(3) pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # 3x3, world -> camera
    translation: np.ndarray  # 3-vector
    near: float = 0.05

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal (deviation {err:.3e})")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """Project world points; returns ((N,2) pixel xy, (N,) camera depth)."""
        cam = self.to_camera(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def with_pose_delta(self, xi: np.ndarray) -> "Camera":
        """Camera with a left-multiplied tangent perturbation (omega, nu)."""
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        E = so3_exp(xi[:3])
        R = E @ self.rotation
        # re-orthonormalize against accumulated drift
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        t = E @ self.translation + xi[3:]
        return dataclasses.replace(self, rotation=R, translation=t)

    def rotation_error_deg(self, other: "Camera") -> float:
        Rrel = self.rotation @ other.rotation.T
        c = np.clip((np.trace(Rrel) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height, near=0.05):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=0)  # rows: camera axes in world
        t = -R @ eye
        return cls(fx, fy, cx, cy, width, height, R, t, near)

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "near": self.near,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            rotation=np.array(d["rotation"], dtype=np.float64),
            translation=np.array(d["translation"], dtype=np.float64),
            near=float(d.get("near", 0.05)),
        )


class GaussianCloud:
    """Struct-of-arrays collection of Gaussians sharing one semantic layout."""

    def __init__(self, means, log_scales, rotations, opacity_logits, colors, sem_codes=None):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
        self.sem_codes = {}
        sem_codes = sem_codes or {}
        dim = None
        for gran, codes in sorted(sem_codes.items()):
            codes = np.asarray(codes, dtype=np.float64).reshape(n, -1)
            if dim is None:
                dim = codes.shape[1]
            elif codes.shape[1] != dim:
                raise ValueError("semantic codes must share one dimension")
            self.sem_codes[Granularity(gran)] = codes
        self._semantic_dim = dim
        self.version = 0

    def __len__(self) -> int:
        return len(self.means)

    @property
    def semantic_dim(self):
        return self._semantic_dim

    @property
    def granularities(self):
        return tuple(sorted(self.sem_codes))

    def bump_version(self):
        self.version += 1

    def ensure_sem_codes(self, granularity, dim: int):
        """Attach zero-initialized codes for a granularity if absent."""
        granularity = Granularity(granularity)
        if self._semantic_dim is not None and self._semantic_dim != dim:
            raise ValueError("semantic codes must share one dimension")
        if granularity not in self.sem_codes:
            self.sem_codes[granularity] = np.zeros((len(self), dim))
            self._semantic_dim = dim

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i].copy(),
            sem_code={g: c[i].copy() for g, c in self.sem_codes.items()},
        )

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        if not gaussians:
            return cls(
                np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3))
            )
        grans = set(gaussians[0].sem_code)
        for g in gaussians:
            if set(g.sem_code) != grans:
                raise ValueError("all gaussians must carry the same granularities")
        sem = {
            gr: np.stack([np.asarray(g.sem_code[gr], dtype=np.float64) for g in gaussians])
            for gr in grans
        }
        return cls(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            sem,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
            {g: c.copy() for g, c in self.sem_codes.items()},
        )

    def rotation_matrices(self) -> np.ndarray:
        """(N,3,3) rotation matrices from the (normalized) quaternions."""
        q = self.rotations / np.linalg.norm(self.rotations, axis=1, keepdims=True)
        w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        R = np.empty((len(q), 3, 3))
        R[:, 0, 0] = 1 - 2 * (y * y + z * z)
        R[:, 0, 1] = 2 * (x * y - w * z)
        R[:, 0, 2] = 2 * (x * z + w * y)
        R[:, 1, 0] = 2 * (x * y + w * z)
        R[:, 1, 1] = 1 - 2 * (x * x + z * z)
        R[:, 1, 2] = 2 * (y * z - w * x)
        R[:, 2, 0] = 2 * (x * z - w * y)
        R[:, 2, 1] = 2 * (y * z + w * x)
        R[:, 2, 2] = 1 - 2 * (x * x + y * y)
        return R

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        R = self.rotation_matrices()
        L = R * self.scales()[:, None, :]
        return L @ np.transpose(L, (0, 2, 1))


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline, serialized inside the scene manifest."""

    # semantics
    semantic_dim: int = 3
    # alignment
    lang_weight: float = 0.3  # cosine-term weight in the match score
    vote_threshold: float = 0.5  # acceptance threshold after pixel voting
    reproject_threshold: float = 0.5  # acceptance threshold after reprojection
    fusion_levels: tuple = (1,)  # granularity values where mask fusion runs
    min_reproject_points: int = 8
    # training
    l1_weight: float = 0.8
    image_weight_stage_b: float = 0.3
    stage_a_iterations: int = 2000
    stage_b_iterations: int = 1000
    lr_means: float = 1.6e-4  # scaled by scene extent inside the trainer
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity_logits: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_sem_codes: float = 2.5e-3
    lr_geometry_scale_stage_b: float = 0.05  # keep geometry nearly frozen in stage B
    lr_pose: float = 1e-3
    pose_optimization: bool = True
    pose_start_iteration: int = 150  # let appearance settle before poses move
    densify_start: int = 500
    densify_end: int = 2000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    split_scale_fraction: float = 0.05
    prune_opacity: float = 0.005
    max_gaussians: int = 50000
    # querying / evaluation
    relevancy_threshold_lerf: float = 0.6
    relevancy_threshold_ovs: float = 0.8
    smoothing_kernel: int = 11
    area_threshold: int = 2000
    # rasterizer
    tile_size: int = 16
    alpha_clamp: float = 0.99
    transmittance_floor: float = 1e-4
    cutoff_sigma: float = 3.0  # None disables spatial truncation
    cov2d_floor: float = 0.3
    # misc
    seed: int = 0

    def validate(self):
        unit = {
            "lang_weight": self.lang_weight,
            "vote_threshold": self.vote_threshold,
            "reproject_threshold": self.reproject_threshold,
            "l1_weight": self.l1_weight,
            "image_weight_stage_b": self.image_weight_stage_b,
        }
        for name, v in unit.items():
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not (2 <= self.semantic_dim <= 16):
            raise ValueError("semantic_dim must lie in [2, 16]")
        if self.smoothing_kernel < 1 or self.smoothing_kernel % 2 == 0:
            raise ValueError("smoothing_kernel must be odd and positive")
        if self.stage_a_iterations < 1 or self.stage_b_iterations < 1:
            raise ValueError("iteration counts must be positive")
        if self.cutoff_sigma is not None and self.cutoff_sigma <= 0:
            raise ValueError("cutoff_sigma must be positive or None")
        return self

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["fusion_levels"] = list(self.fusion_levels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "fusion_levels" in kwargs:
            kwargs["fusion_levels"] = tuple(kwargs["fusion_levels"])
        return cls(**kwargs)

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        """Apply ``key=value`` string overrides with field-typed coercion."""
        d = self.to_json()
        for key, raw in overrides.items():
            if key not in d:
                raise ValueError(f"unknown config key: {key}")
            cur = d[key]
            if isinstance(cur, bool):
                d[key] = raw.lower() in ("1", "true", "yes", "on") if isinstance(raw, str) else bool(raw)
            elif isinstance(cur, int):
                d[key] = int(raw)
            elif isinstance(cur, float) or cur is None:
                d[key] = None if str(raw).lower() == "none" else float(raw)
            elif isinstance(cur, list):
                d[key] = [int(v) for v in str(raw).split(",") if v != ""]
            else:
                d[key] = raw
        return PipelineConfig.from_json(d).validate()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(json.loads(Path(path).read_text()))
