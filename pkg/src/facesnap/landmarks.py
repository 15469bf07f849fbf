"""Identity-preserving landmark synthesis.

A linear morphable face model on a parametric ellipsoid-grid mesh: vertices
are mean + shape_basis·alpha + expr_basis·beta, posed by Euler rotation,
uniform scale and an in-plane translation, then projected to 72 named 2D
landmarks by a weak-perspective camera (orthographic drop of z plus a fixed
affine viewport from [-1,1]^2 to [0,1]^2). Landmarks rasterize to a control
image of colored discs, one color per landmark group.

Conventions (fixed throughout):
  * canonical mesh coordinates roughly in [-1, 1]; y grows downward so the
    viewport needs no flip
  * rotation R = Rz(roll) @ Rx(pitch) @ Ry(yaw), right-handed axes
  * pose applies as scale * (R @ v) + (tx, ty, 0): translation moves x/y
    only, z is untouched
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeMismatchError

PARAMS_FORMAT_VERSION = 1

MESH_ROWS = 18
MESH_COLS = 26
MESH_VERTICES = MESH_ROWS * MESH_COLS  # 468

GROUP_NAMES = ("contour", "brows", "eyes", "nose", "mouth")

GROUP_COLORS = np.array(
    [
        [1.00, 1.00, 1.00],  # contour
        [1.00, 0.85, 0.10],  # brows
        [0.10, 0.90, 0.20],  # eyes
        [0.20, 0.40, 1.00],  # nose
        [1.00, 0.15, 0.15],  # mouth
    ],
    dtype=np.float64,
)

# (row, col) grid coordinates of the 72 tracked vertices, by group.
_LANDMARK_GRID = {
    "contour": [
        (7, 0), (9, 1), (11, 2), (13, 4), (14, 6), (15, 8), (16, 10), (17, 11),
        (17, 12),
        (17, 14), (16, 15), (15, 17), (14, 19), (13, 21), (11, 23), (9, 24), (7, 25),
    ],
    "brows": [
        (5, 3), (4, 5), (4, 7), (4, 9), (5, 11),
        (5, 14), (4, 16), (4, 18), (4, 20), (5, 22),
    ],
    "eyes": [
        (7, 4), (6, 5), (6, 6), (6, 8), (7, 9), (8, 8), (8, 6), (8, 5),
        (7, 21), (6, 20), (6, 19), (6, 17), (7, 16), (8, 17), (8, 19), (8, 20),
    ],
    "nose": [
        (7, 12), (8, 12), (9, 12), (10, 12),
        (11, 10), (11, 11), (11, 12), (11, 13), (11, 14),
    ],
    "mouth": [
        (14, 8), (13, 9), (13, 10), (13, 12), (13, 13), (13, 15), (13, 16), (14, 17),
        (15, 15), (15, 13), (15, 11), (15, 9),
        (14, 9), (14, 11), (14, 12), (14, 13), (14, 14), (14, 16), (15, 12), (15, 14),
    ],
}

LANDMARK_COUNT = 72

#: group label (0..4) of each landmark position, aligned with the point order above
LANDMARK_GROUP_LABELS = np.concatenate(
    [np.full(len(_LANDMARK_GRID[name]), gi, dtype=np.int64) for gi, name in enumerate(GROUP_NAMES)]
)

LANDMARK_VERTEX_INDICES = np.array(
    [r * MESH_COLS + c for name in GROUP_NAMES for (r, c) in _LANDMARK_GRID[name]],
    dtype=np.int64,
)


@dataclass(frozen=True)
class Pose:
    """Rigid pose: Euler angles in radians, in-plane translation, uniform scale."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        for name in ("yaw", "pitch", "roll"):
            angle = getattr(self, name)
            if not math.isfinite(angle) or not -math.pi <= angle <= math.pi:
                raise ConfigError(f"pose {name} must be finite and in [-pi, pi], got {angle}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ConfigError(f"pose scale must be > 0, got {self.scale}")
        if not (math.isfinite(self.tx) and math.isfinite(self.ty)):
            raise ConfigError(f"pose translation must be finite, got ({self.tx}, {self.ty})")


@dataclass(frozen=True)
class FaceParams:
    """Morphable-model coefficients plus rigid pose for one face."""

    shape: np.ndarray
    pose: Pose = field(default_factory=Pose)
    expression: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "shape", np.asarray(self.shape, dtype=np.float64))
        object.__setattr__(self, "expression", np.asarray(self.expression, dtype=np.float64))
        if self.shape.ndim != 1 or not np.all(np.isfinite(self.shape)):
            raise ConfigError("shape coefficients must be a finite 1-d vector")
        if self.expression.ndim != 1 or not np.all(np.isfinite(self.expression)):
            raise ConfigError("expression coefficients must be a finite 1-d vector")


@dataclass(frozen=True)
class MorphableBasis:
    """Linear face model: mean mesh plus shape/expression deformation bases."""

    mean_mesh: np.ndarray        # [V, 3]
    shape_basis: np.ndarray      # [3V, K_s]
    expr_basis: np.ndarray       # [3V, K_e]
    landmark_indices: np.ndarray = field(
        default_factory=lambda: LANDMARK_VERTEX_INDICES.copy()
    )

    def __post_init__(self):
        v = self.mean_mesh.shape[0]
        if self.mean_mesh.shape != (v, 3):
            raise ShapeMismatchError("mean mesh", "[V, 3]", list(self.mean_mesh.shape))
        for name, basis in (("shape basis", self.shape_basis), ("expression basis", self.expr_basis)):
            if basis.ndim != 2 or basis.shape[0] != 3 * v:
                raise ShapeMismatchError(name, f"[{3 * v}, K]", list(basis.shape))
            if not np.all(np.isfinite(basis)):
                raise ConfigError(f"{name} has non-finite entries")
        idx = self.landmark_indices
        if idx.shape != (LANDMARK_COUNT,):
            raise ShapeMismatchError("landmark indices", f"[{LANDMARK_COUNT}]", list(idx.shape))
        if len(np.unique(idx)) != LANDMARK_COUNT or idx.min() < 0 or idx.max() >= v:
            raise ConfigError("landmark indices must be distinct and within [0, V)")

    @property
    def shape_dim(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def expr_dim(self) -> int:
        return self.expr_basis.shape[1]


@dataclass(frozen=True)
class LandmarkSet72:
    """72 projected points in [0,1]^2 viewport coordinates with in-frame flags."""

    points: np.ndarray       # [72, 2]
    visibility: np.ndarray   # [72] bool

    def __post_init__(self):
        if self.points.shape != (LANDMARK_COUNT, 2):
            raise ShapeMismatchError("landmark points", f"[{LANDMARK_COUNT}, 2]", list(self.points.shape))
        if self.visibility.shape != (LANDMARK_COUNT,):
            raise ShapeMismatchError("landmark visibility", f"[{LANDMARK_COUNT}]", list(self.visibility.shape))


def _ellipsoid_grid_mesh() -> np.ndarray:
    """Half-ellipsoid face dome sampled on the fixed rows x cols grid, y pointing down."""
    rows = np.arange(MESH_ROWS, dtype=np.float64)
    cols = np.arange(MESH_COLS, dtype=np.float64)
    v_f = rows / (MESH_ROWS - 1.0)
    u_f = cols / (MESH_COLS - 1.0)
    azimuth = (u_f - 0.5) * math.pi * 0.9
    elevation = (v_f - 0.5) * math.pi * 0.85
    az, el = np.meshgrid(azimuth, elevation)   # [rows, cols]
    x = 0.75 * np.cos(el) * np.sin(az)
    y = 0.95 * np.sin(el)
    z = 0.55 * np.cos(el) * np.cos(az)
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def default_basis(shape_dim: int = 8, expr_dim: int = 6, seed: int = 0) -> MorphableBasis:
    """Deterministic toy basis: ellipsoid-grid mean mesh and seeded random deformation bases.

    Basis columns are rescaled so each has a per-entry RMS of 0.05 canonical units.
    """
    rng = np.random.default_rng(seed)
    mean = _ellipsoid_grid_mesh()

    def _basis(dim: int) -> np.ndarray:
        basis = rng.standard_normal((3 * MESH_VERTICES, dim))
        rms = np.sqrt(np.mean(basis**2, axis=0, keepdims=True))
        return basis * (0.05 / rms)

    return MorphableBasis(mean_mesh=mean, shape_basis=_basis(shape_dim), expr_basis=_basis(expr_dim))


def mix_params(source: FaceParams, drive: FaceParams) -> FaceParams:
    """Shape from the source face; pose and expression from the driving face."""
    return FaceParams(shape=source.shape, pose=drive.pose, expression=drive.expression)


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rz(roll) @ Rx(pitch) @ Ry(yaw) for right-handed axes with y pointing down."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rz @ rx @ ry


def synthesize_mesh(params: FaceParams, basis: MorphableBasis) -> np.ndarray:
    """Deform the mean mesh by the linear bases, then apply the rigid pose.

    Returns the posed [V, 3] vertex array: scale * R @ (mean + S a + E b) + (tx, ty, 0).
    """
    if params.shape.shape[0] != basis.shape_dim:
        raise ShapeMismatchError("shape coefficients", basis.shape_dim, params.shape.shape[0])
    if params.expression.shape[0] != basis.expr_dim:
        raise ShapeMismatchError("expression coefficients", basis.expr_dim, params.expression.shape[0])
    v = basis.mean_mesh.shape[0]
    offsets = basis.shape_basis @ params.shape + basis.expr_basis @ params.expression
    verts = basis.mean_mesh + offsets.reshape(v, 3)
    pose = params.pose
    rot = rotation_matrix(pose.yaw, pose.pitch, pose.roll)
    verts = pose.scale * (verts @ rot.T)
    verts[:, 0] += pose.tx
    verts[:, 1] += pose.ty
    return verts


def project_landmarks(mesh: np.ndarray, basis: MorphableBasis) -> LandmarkSet72:
    """Weak-perspective projection of the tracked vertices.

    Drops z, then maps (x, y) through the fixed viewport p = (x + 1) / 2. Points
    are not clamped; visibility flags mark which fell inside [0,1]^2.
    """
    if mesh.ndim != 2 or mesh.shape[1] != 3:
        raise ShapeMismatchError("mesh", "[V, 3]", list(mesh.shape))
    tracked = mesh[basis.landmark_indices]
    points = (tracked[:, :2] + 1.0) / 2.0
    visibility = np.all((points >= 0.0) & (points <= 1.0), axis=1)
    return LandmarkSet72(points=points, visibility=visibility)


def rasterize_control(lm: LandmarkSet72, height: int, width: int) -> np.ndarray:
    """Render visible landmarks as filled group-colored discs on black.

    Returns a [height, width, 3] float array in [0, 1]. Disc radius is
    max(1, height // 64) pixels; discs are painted in landmark order, later
    groups overwriting earlier ones where they overlap.
    """
    if height < 8 or width < 8:
        raise ConfigError(f"control image must be at least 8x8, got {height}x{width}")
    image = np.zeros((height, width, 3), dtype=np.float64)
    radius = max(1, height // 64)
    rr, cc = np.mgrid[0:height, 0:width]
    for i in range(LANDMARK_COUNT):
        if not lm.visibility[i]:
            continue
        px = lm.points[i, 0] * (width - 1)
        py = lm.points[i, 1] * (height - 1)
        disc = (rr - py) ** 2 + (cc - px) ** 2 <= radius**2
        image[disc] = GROUP_COLORS[LANDMARK_GROUP_LABELS[i]]
    return image


def predict_landmarks(
    source: FaceParams,
    drive: FaceParams,
    basis: MorphableBasis,
    height: int,
    width: int,
) -> tuple[LandmarkSet72, np.ndarray]:
    """Source-identity landmarks under the driving pose, plus the rasterized control image."""
    mixed = mix_params(source, drive)
    mesh = synthesize_mesh(mixed, basis)
    lm = project_landmarks(mesh, basis)
    return lm, rasterize_control(lm, height, width)


def params_to_dict(params: FaceParams) -> dict:
    return {
        "format_version": PARAMS_FORMAT_VERSION,
        "shape": params.shape.tolist(),
        "pose": {
            "yaw": params.pose.yaw,
            "pitch": params.pose.pitch,
            "roll": params.pose.roll,
            "tx": params.pose.tx,
            "ty": params.pose.ty,
            "scale": params.pose.scale,
        },
        "expression": params.expression.tolist(),
    }


def params_from_dict(doc: dict) -> FaceParams:
    version = doc.get("format_version")
    if version != PARAMS_FORMAT_VERSION:
        raise ConfigError(f"face params format_version must be {PARAMS_FORMAT_VERSION}, got {version!r}")
    missing = {"shape", "pose", "expression"} - doc.keys()
    if missing:
        raise ConfigError(f"face params document missing keys: {sorted(missing)}")
    pose_doc = doc["pose"]
    unknown = set(pose_doc) - {"yaw", "pitch", "roll", "tx", "ty", "scale"}
    if unknown:
        raise ConfigError(f"unknown pose keys: {sorted(unknown)}")
    return FaceParams(
        shape=np.asarray(doc["shape"], dtype=np.float64),
        pose=Pose(**{k: float(v) for k, v in pose_doc.items()}),
        expression=np.asarray(doc["expression"], dtype=np.float64),
    )


def save_params(params: FaceParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params), indent=2, sort_keys=True) + "\n")


def load_params(path: str | Path) -> FaceParams:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read face params from {path}: {exc}") from exc
    return params_from_dict(doc)
