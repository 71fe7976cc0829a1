"""
geometry.py
===========
Core value types shared by every other module: 3D points, point sets, rigid
transformations and the full EMPMR parameter set (transforms + isotropic
variance + outlier ratio).

All arrays are float64 and are frozen (write-protected) once they are wrapped
in one of these types, so instances can be handed to worker threads freely.

Indices are 0-based throughout the code base: set i is `sets[i]`, point l of
that set is `sets[i].points[l]`.

CHANGE LOG
----------
[2026-10-02] Re-orthonormalize instead of reject
  - RigidTransform now projects rotations that drifted by more than 1e-9 (but
    less than 1e-6) back onto SO(3) with a polar decomposition. Long runs were
    accumulating ~1e-10 drift through repeated composition.
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence, Tuple, TypeAlias

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import polar

# --- LOGGER ---
logger = logging.getLogger('geometry')
logger.setLevel(logging.INFO)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - 📐 GEOMETRY - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
logger.propagate = False

Point3: TypeAlias = NDArray[np.float64]   # shape (3,)
Points: TypeAlias = NDArray[np.float64]   # shape (N, 3)
Mat3: TypeAlias = NDArray[np.float64]     # shape (3, 3)

DIM = 3
ORTHONORMAL_TOL = 1e-9
REPAIR_TOL = 1e-6


class GeometryError(ValueError):
    """Raised when a value violates a geometric invariant."""


def _frozen(array: NDArray) -> NDArray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def as_point3(p) -> Point3:
    """Validate and return a finite 3-vector."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape != (DIM,):
        raise GeometryError(f"expected 3 coordinates, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise GeometryError("point has non-finite coordinates")
    return p


def so3_defect(R: Mat3) -> float:
    """Largest of ||R^T R - I||_F and |det(R) - 1|."""
    orth = np.linalg.norm(R.T @ R - np.eye(DIM), ord='fro')
    return float(max(orth, abs(np.linalg.det(R) - 1.0)))


def project_to_so3(R: Mat3) -> Mat3:
    """Closest rotation to R (orthogonal polar factor, determinant forced to +1)."""
    u, _ = polar(R)
    if np.linalg.det(u) < 0:
        U, _, Vt = np.linalg.svd(R)
        U[:, -1] *= -1.0
        u = U @ Vt
    return u


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """The map phi(v) = R v + t with R in SO(3)."""
    rotation: Mat3
    translation: Point3

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (DIM, DIM):
            raise GeometryError(f"rotation must be 3x3, got shape {R.shape}")
        if t.shape != (DIM,):
            raise GeometryError(f"translation must have 3 components, got shape {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("transform has non-finite entries")

        defect = so3_defect(R)
        if defect > REPAIR_TOL:
            raise GeometryError(f"rotation is not in SO(3) (defect {defect:.3e})")
        if defect > ORTHONORMAL_TOL:
            logger.debug(f"Re-orthonormalizing rotation with defect {defect:.3e}")
            R = project_to_so3(R)

        object.__setattr__(self, 'rotation', _frozen(R))
        object.__setattr__(self, 'translation', _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(DIM), np.zeros(DIM))

    @classmethod
    def from_matrix(cls, T: NDArray) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix."""
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise GeometryError(f"homogeneous matrix must be 4x4, got shape {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> NDArray[np.float64]:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __repr__(self) -> str:
        return (f"RigidTransform(rotation={self.rotation.tolist()}, "
                f"translation={self.translation.tolist()})")


def apply_transform(T: RigidTransform, p) -> Point3:
    """R p + t for a single point."""
    return T.rotation @ as_point3(p) + T.translation


def transform_points(T: RigidTransform, points: Points) -> Points:
    """R p + t for every row of an (N, 3) array."""
    return points @ T.rotation.T + T.translation


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """C with C(p) = A(B(p))."""
    return RigidTransform(A.rotation @ B.rotation,
                          A.rotation @ B.translation + A.translation)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


@dataclass(frozen=True, eq=False)
class PointSet:
    """One view: N >= 1 points in the set's own frame. Row order is the point index."""
    index: int
    points: Points
    name: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != DIM:
            if pts.size == 0:
                raise GeometryError("empty point set")
            raise GeometryError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise GeometryError("empty point set")
        if not np.all(np.isfinite(pts)):
            bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
            raise GeometryError(f"point {bad} has non-finite coordinates")
        object.__setattr__(self, 'points', _frozen(pts))
        if not self.name:
            object.__setattr__(self, 'name', f"set_{self.index:02d}")

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: Points) -> "PointSet":
        """Same index and name, new coordinates."""
        return PointSet(self.index, points, self.name)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Theta: one rigid transform per set, shared isotropic variance, fixed outlier ratio."""
    transforms: Tuple[RigidTransform, ...]
    sigma2: float
    w: float = 0.01
    d: int = field(default=DIM, init=False)

    def __post_init__(self):
        object.__setattr__(self, 'transforms', tuple(self.transforms))
        if not self.sigma2 > 0 or not np.isfinite(self.sigma2):
            raise GeometryError(f"degenerate covariance (sigma2={self.sigma2})")
        if not 0.0 <= self.w < 1.0:
            raise GeometryError(f"outlier ratio w must lie in [0, 1), got {self.w}")
        for T in self.transforms:
            if not isinstance(T, RigidTransform):
                raise GeometryError(f"expected RigidTransform, got {type(T).__name__}")

    @property
    def M(self) -> int:
        return len(self.transforms)

    def replace_transform(self, i: int, T: RigidTransform) -> "ModelParams":
        transforms = list(self.transforms)
        transforms[i] = T
        return ModelParams(tuple(transforms), self.sigma2, self.w)

    def with_sigma2(self, sigma2: float) -> "ModelParams":
        return ModelParams(self.transforms, sigma2, self.w)


def identity_transforms(M: int) -> Tuple[RigidTransform, ...]:
    return tuple(RigidTransform.identity() for _ in range(M))


def check_set_indices(sets: Sequence[PointSet]) -> None:
    """Set i must sit at position i."""
    for position, s in enumerate(sets):
        if s.index != position:
            raise GeometryError(f"point set '{s.name}' has index {s.index} but sits at position {position}")
