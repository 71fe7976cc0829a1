"""
em_engine.py
============
Joint rigid registration of M point sets by expectation-maximization. Every
point of set i is modelled as drawn from a mixture of (M-1) equal-weight
isotropic Gaussians centred on its nearest neighbours in the other sets, plus a
uniform outlier component of fixed weight w.

One outer iteration visits the sets in order. Each visit runs
  1. E-Corresponding: NN of every point of set i in every other set,
  2. E-Probability: posteriors alpha (and the outlier posterior),
  3. M-step: weighted SVD rotation, then the closed-form translation,
and after all visits the shared variance sigma^2 is re-estimated.

CHANGE LOG
----------
[2026-10-17] Floor clamp reported, one density path
  - The first time sigma^2 is clamped to its floor, register logs a warning
    and adds it to RegistrationReport.warnings.
  - e_posteriors takes its log densities from gaussian_density(log=True).
  - fields_for moved out of the engine; it was only ever used in tests.

[2026-10-09] Rotation from the J-minimizing SVD factorization
  - The rotation is now taken as U diag(1, 1, det(U V^T)) V^T for
    H = sum alpha q p^T = U S V^T, which minimizes the weighted residual J.
    The transposed product V U^T rotates the wrong way and made every
    registration drift away from the solution.

[2026-10-05] Trees rebuilt once per outer iteration
  - All k-d trees are built at the top of an outer iteration from the
    transforms of the previous one. Inner visits use the latest transforms
    for residuals and targets.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy.special import logsumexp

from geometry import (
    DIM, Mat3, ModelParams, Points, PointSet, RigidTransform,
    check_set_indices, identity_transforms, transform_points,
)
from spatial_index import NnIndex, build_index, nearest_many

# --- LOGGER ---
logger = logging.getLogger('em_engine')
logger.setLevel(logging.INFO)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - 🔵 EM ENGINE - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
logger.propagate = False

MIN_POSTERIOR_MASS = 1e-12
_ABS_SIGMA2_FLOOR = 1e-300


class RegistrationError(ValueError):
    pass


@dataclass
class EmConfig:
    w: float = 0.01
    max_iters: int = 100
    tol: float = 1e-6
    sigma2_floor_rel: float = 1e-12     # times scene_diameter^2
    seed: int = 0
    threads: int = 1
    init_sample_pairs: int = 1000
    sigma2_init: Optional[float] = None  # overrides the sampled sigma2^0

    def __post_init__(self):
        if not 0.0 <= self.w < 1.0:
            raise RegistrationError(f"w must lie in [0, 1), got {self.w}")
        if self.max_iters < 1:
            raise RegistrationError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tol > 0:
            raise RegistrationError(f"tol must be > 0, got {self.tol}")
        if self.threads < 1:
            raise RegistrationError(f"threads must be >= 1, got {self.threads}")
        if self.sigma2_init is not None and not self.sigma2_init > 0:
            raise RegistrationError("degenerate covariance: sigma2_init must be > 0")


@dataclass(frozen=True, eq=False)
class CorrespondenceField:
    """
    E-step result for data set i.

    c[l, j]     NN index of point l in set j (column i holds -1)
    alpha[l, j] posterior of the Gaussian centred on that neighbour (column i holds 0)
    outlier[l]  posterior of the uniform component
    """
    set_index: int
    c: NDArray[np.int64]
    alpha: NDArray[np.float64]
    outlier: NDArray[np.float64]

    @property
    def mass(self) -> float:
        return float(self.alpha.sum())


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    sigma2: float
    max_delta: float
    sigma2_change: float
    wall_time_s: float


@dataclass
class RegistrationReport:
    iterations_run: int = 0
    converged: bool = False
    records: List[IterationRecord] = field(default_factory=list)
    params: Optional[ModelParams] = None
    warnings: List[str] = field(default_factory=list)
    ambiguous_rotations: List[Tuple[int, int]] = field(default_factory=list)
    sigma2_initial: float = float('nan')
    scene_diameter: float = float('nan')

    @property
    def objectives(self) -> List[float]:
        return [r.objective for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        columns = ['iteration', 'objective', 'sigma2', 'max_delta', 'sigma2_change', 'wall_time_s']
        return pd.DataFrame([vars(r) for r in self.records], columns=columns)


class RotationEstimate(NamedTuple):
    rotation: Mat3
    singular_values: NDArray[np.float64]
    ambiguous: bool


# ==============================================================================
# Scene helpers
# ==============================================================================

def scene_diameter(sets: Sequence[PointSet], transforms: Sequence[RigidTransform]) -> float:
    """Bounding-box diagonal of all sets placed in the model frame."""
    lo = np.full(DIM, np.inf)
    hi = np.full(DIM, -np.inf)
    for s, T in zip(sets, transforms):
        moved = transform_points(T, s.points)
        lo = np.minimum(lo, moved.min(axis=0))
        hi = np.maximum(hi, moved.max(axis=0))
    return float(np.linalg.norm(hi - lo))


def initial_sigma2(sets: Sequence[PointSet], transforms: Sequence[RigidTransform],
                   indices: Sequence[NnIndex], pairs: int, rng: np.random.Generator,
                   floor: float) -> float:
    """Mean squared NN residual over random (point, opposite set) pairs, divided by d."""
    M = len(sets)
    set_pick = rng.integers(0, M, size=pairs)
    offset = rng.integers(1, M, size=pairs)
    other = (set_pick + offset) % M
    sizes = np.array([len(s) for s in sets], dtype=np.int64)
    point_pick = np.floor(rng.random(pairs) * sizes[set_pick]).astype(np.int64)

    queries = np.empty((pairs, DIM))
    for i in range(M):
        rows = set_pick == i
        queries[rows] = transform_points(transforms[i], sets[i].points[point_pick[rows]])

    residual2 = np.empty(pairs)
    for j in range(M):
        rows = other == j
        if rows.any():
            _, dist = nearest_many(indices[j], queries[rows])
            residual2[rows] = dist ** 2
    return max(float(residual2.mean()) / DIM, floor)


def merge_point_sets(sets: Sequence[PointSet], params: ModelParams) -> Points:
    """All sets mapped into the model frame and stacked."""
    return np.vstack([transform_points(T, s.points) for s, T in zip(sets, params.transforms)])


# ==============================================================================
# E-step
# ==============================================================================

def e_correspond(i: int, sets: Sequence[PointSet], params: ModelParams,
                 indices: Sequence[NnIndex], workers: int = 1) -> NDArray[np.int64]:
    """c[l, j] = argmin_h ||T_i v_il - T_j v_jh|| for j != i; column i is -1."""
    queries = transform_points(params.transforms[i], sets[i].points)
    c = np.full((len(sets[i]), params.M), -1, dtype=np.int64)
    for j in range(params.M):
        if j == i:
            continue
        c[:, j], _ = nearest_many(indices[j], queries, workers=workers)
    return c


def gaussian_density(dist2, sigma2: float, d: int = DIM, log: bool = False):
    """
    (2 pi sigma^2)^(-d/2) exp(-dist2 / (2 sigma^2)) for scalars or arrays.
    With log=True the logarithm is returned, which stays finite where the
    density itself underflows.
    """
    if not sigma2 > 0:
        raise RegistrationError("degenerate covariance")
    log_density = -0.5 * d * math.log(2.0 * math.pi * sigma2) - np.asarray(dist2, dtype=np.float64) / (2.0 * sigma2)
    return log_density if log else np.exp(log_density)


def outlier_constant(w: float, M: int) -> float:
    """lambda = w M' / ((1 - w) M) with M' = M - 1."""
    return w * (M - 1) / ((1.0 - w) * M)


def _targets(i: int, c: NDArray[np.int64], sets: Sequence[PointSet], params: ModelParams) -> NDArray[np.float64]:
    """Model-frame neighbour coordinates, shape (N_i, M, 3); slot i is zero."""
    out = np.zeros((c.shape[0], params.M, DIM))
    for j in range(params.M):
        if j == i:
            continue
        out[:, j, :] = transform_points(params.transforms[j], sets[j].points[c[:, j]])
    return out


def squared_residuals(i: int, c: NDArray[np.int64], sets: Sequence[PointSet],
                      params: ModelParams) -> NDArray[np.float64]:
    """||T_i v_il - T_j v_j,c(j,l)||^2, shape (N_i, M); column i is zero."""
    moved = transform_points(params.transforms[i], sets[i].points)
    diff = _targets(i, c, sets, params) - moved[:, None, :]
    r2 = np.einsum('ljk,ljk->lj', diff, diff)
    r2[:, i] = 0.0
    return r2


def e_posteriors(i: int, c: NDArray[np.int64], sets: Sequence[PointSet],
                 params: ModelParams) -> CorrespondenceField:
    if not params.sigma2 > 0:
        raise RegistrationError("degenerate covariance")
    M = params.M
    others = [j for j in range(M) if j != i]
    r2 = squared_residuals(i, c, sets, params)

    log_beta = gaussian_density(r2[:, others], params.sigma2, params.d, log=True)

    lam = outlier_constant(params.w, M)
    if lam > 0:
        log_terms = np.column_stack([log_beta, np.full(log_beta.shape[0], math.log(lam))])
    else:
        log_terms = log_beta
    log_z = logsumexp(log_terms, axis=1)

    alpha = np.zeros((c.shape[0], M))
    alpha[:, others] = np.exp(log_beta - log_z[:, None])
    outlier = np.clip(1.0 - alpha.sum(axis=1), 0.0, 1.0)
    return CorrespondenceField(i, c, alpha, outlier)


# ==============================================================================
# M-step
# ==============================================================================

def _weighted_pairs(field: CorrespondenceField, sets: Sequence[PointSet],
                    params: ModelParams) -> Tuple[Points, Points, NDArray[np.float64]]:
    """Stack (v_il, T_j v_j,c(j,l), alpha_ilj) over all l and j != i."""
    i = field.set_index
    others = [j for j in range(params.M) if j != i]
    targets = _targets(i, field.c, sets, params)
    src = np.tile(sets[i].points, (len(others), 1))
    dst = np.concatenate([targets[:, j, :] for j in others], axis=0)
    weights = np.concatenate([field.alpha[:, j] for j in others])
    return src, dst, weights


def weighted_rotation(src: Points, dst: Points, weights: NDArray[np.float64]) -> RotationEstimate:
    """Rotation R in SO(3) minimizing sum w ||R p - q||^2 over centred pairs."""
    total = weights.sum()
    if not total > 0:
        raise RegistrationError("no effective correspondences")
    p = src - (weights @ src) / total
    q = dst - (weights @ dst) / total
    H = (q * weights[:, None]).T @ p          # sum w q p^T
    U, s, Vt = np.linalg.svd(H)
    reflect = np.linalg.det(U @ Vt)
    D = np.diag([1.0, 1.0, 1.0 if reflect >= 0 else -1.0])
    R = U @ D @ Vt

    scale = max(s[0], np.finfo(float).tiny)
    rank_deficient = s[1] <= 1e-12 * scale
    reflection_tie = reflect < 0 and (s[1] - s[2]) <= 1e-12 * scale
    return RotationEstimate(R, s, bool(rank_deficient or reflection_tie))


def weighted_translation(src: Points, dst: Points, weights: NDArray[np.float64], R: Mat3) -> NDArray[np.float64]:
    """t = sum w (q - R p) / sum w, the stationary point of J in t."""
    total = weights.sum()
    if not total > 0:
        raise RegistrationError("no effective correspondences")
    return (weights @ (dst - src @ R.T)) / total


def estimate_rotation(i: int, field: CorrespondenceField, sets: Sequence[PointSet],
                      params: ModelParams) -> RotationEstimate:
    if field.set_index != i:
        raise RegistrationError(f"field belongs to set {field.set_index}, not {i}")
    src, dst, weights = _weighted_pairs(field, sets, params)
    return weighted_rotation(src, dst, weights)


def estimate_translation(i: int, field: CorrespondenceField, sets: Sequence[PointSet],
                         params: ModelParams, R: Mat3) -> NDArray[np.float64]:
    if field.set_index != i:
        raise RegistrationError(f"field belongs to set {field.set_index}, not {i}")
    src, dst, weights = _weighted_pairs(field, sets, params)
    return weighted_translation(src, dst, weights, np.asarray(R, dtype=np.float64))


def alignment_cost(i: int, field: CorrespondenceField, sets: Sequence[PointSet],
                   params: ModelParams, R: Mat3, t) -> float:
    """J(R, t) = sum alpha ||R v_il + t - T_j v_j,c(j,l)||^2 with correspondences frozen."""
    src, dst, weights = _weighted_pairs(field, sets, params)
    diff = src @ np.asarray(R).T + np.asarray(t) - dst
    return float(weights @ np.einsum('nk,nk->n', diff, diff))


def update_sigma(sets: Sequence[PointSet], params: ModelParams,
                 fields: Sequence[CorrespondenceField], sigma2_floor: float = _ABS_SIGMA2_FLOOR) -> float:
    weighted = 0.0
    mass = 0.0
    for f in fields:
        r2 = squared_residuals(f.set_index, f.c, sets, params)
        weighted += float(np.sum(f.alpha * r2))
        mass += f.mass
    if not mass > 0:
        raise RegistrationError("no effective correspondences")
    return max(weighted / (params.d * mass), sigma2_floor)


def objective(sets: Sequence[PointSet], params: ModelParams,
              fields: Sequence[CorrespondenceField]) -> float:
    """f(Theta) = -sum alpha (r^2 / sigma^2 + d log sigma^2)."""
    total = 0.0
    log_s2 = math.log(params.sigma2)
    for f in fields:
        r2 = squared_residuals(f.set_index, f.c, sets, params)
        total += float(np.sum(f.alpha * (r2 / params.sigma2 + params.d * log_s2)))
    return -total


# ==============================================================================
# Algorithm driver
# ==============================================================================

def _build_indices(sets: Sequence[PointSet], transforms: Sequence[RigidTransform],
                   threads: int) -> List[NnIndex]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(build_index, sets, transforms))
    return [build_index(s, T) for s, T in zip(sets, transforms)]


def _transform_delta(a: RigidTransform, b: RigidTransform, diameter: float) -> float:
    return float(np.linalg.norm(a.rotation - b.rotation, ord='fro')
                 + np.linalg.norm(a.translation - b.translation) / diameter)


def register(sets: Sequence[PointSet], init: Optional[Sequence[RigidTransform]] = None,
             cfg: Optional[EmConfig] = None) -> Tuple[ModelParams, RegistrationReport]:
    """Run the EM iteration until Theta stops changing or max_iters is reached."""
    cfg = cfg or EmConfig()
    M = len(sets)
    if M < 2:
        raise RegistrationError("need at least two point sets")
    check_set_indices(sets)
    transforms = list(init) if init is not None else list(identity_transforms(M))
    if len(transforms) != M:
        raise RegistrationError(f"got {len(transforms)} initial transforms for {M} point sets")

    report = RegistrationReport()
    diameter = scene_diameter(sets, transforms)
    if not diameter > 0:
        diameter = 1.0
    floor = max(cfg.sigma2_floor_rel * diameter ** 2, _ABS_SIGMA2_FLOOR)
    workers = cfg.threads

    indices = _build_indices(sets, transforms, cfg.threads)
    if cfg.sigma2_init is not None:
        sigma2 = max(cfg.sigma2_init, floor)
    else:
        rng = np.random.default_rng(cfg.seed)
        sigma2 = initial_sigma2(sets, transforms, indices, cfg.init_sample_pairs, rng, floor)
    report.sigma2_initial = sigma2
    report.scene_diameter = diameter

    logger.info(f"--- Registering {M} point sets ({sum(len(s) for s in sets)} points), "
                f"w={cfg.w}, sigma2_0={sigma2:.6g} ---")

    # the floor warning is reported once per run
    floor_reported = False
    for k in range(1, cfg.max_iters + 1):
        started = time.perf_counter()
        if k > 1:
            indices = _build_indices(sets, transforms, cfg.threads)
        previous = list(transforms)
        previous_sigma2 = sigma2
        fields: List[CorrespondenceField] = []

        for i in range(M):
            params = ModelParams(tuple(transforms), sigma2, cfg.w)
            c = e_correspond(i, sets, params, indices, workers=workers)
            f = e_posteriors(i, c, sets, params)
            fields.append(f)

            if f.mass < MIN_POSTERIOR_MASS:
                msg = f"iteration {k}: set {i} has no posterior mass; transform frozen"
                logger.warning(msg)
                report.warnings.append(msg)
                continue

            rot = estimate_rotation(i, f, sets, params)
            if rot.ambiguous:
                msg = f"iteration {k}: ambiguous rotation optimum for set {i} (singular values {rot.singular_values})"
                logger.warning(msg)
                report.warnings.append(msg)
                report.ambiguous_rotations.append((k, i))
            t = estimate_translation(i, f, sets, params, rot.rotation)
            transforms[i] = RigidTransform(rot.rotation, t)

        params = ModelParams(tuple(transforms), sigma2, cfg.w)
        if sum(f.mass for f in fields) > 0:
            sigma2 = update_sigma(sets, params, fields, floor)
            if sigma2 <= floor and not floor_reported:
                msg = f"iteration {k}: sigma2 clamped to the floor {floor:.3g}"
                logger.warning(msg)
                report.warnings.append(msg)
                floor_reported = True
        params = params.with_sigma2(sigma2)
        value = objective(sets, params, fields)

        max_delta = max(_transform_delta(a, b, diameter) for a, b in zip(transforms, previous))
        sigma2_change = abs(sigma2 - previous_sigma2) / previous_sigma2
        elapsed = time.perf_counter() - started
        report.records.append(IterationRecord(k, value, sigma2, max_delta, sigma2_change, elapsed))
        report.iterations_run = k
        logger.debug(f"iter {k}: f={value:.10g} sigma2={sigma2:.6g} delta={max_delta:.3e}")

        sigma2_settled = sigma2_change < cfg.tol or (sigma2 <= floor and previous_sigma2 <= floor)
        if max_delta < cfg.tol and sigma2_settled:
            report.converged = True
            break

    report.params = ModelParams(tuple(transforms), sigma2, cfg.w)
    status = "converged" if report.converged else "stopped at max_iters"
    logger.info(f"--- Finished after {report.iterations_run} iterations ({status}), sigma2={sigma2:.6g} ---")
    return report.params, report
