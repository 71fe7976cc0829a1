"""
synthesis_eval.py
=================
Evaluation harness for multi-view registration: synthetic scenes with known
ground truth, additive Gaussian noise at a requested SNR, deterministic
down-sampling, outlier injection, the rotation/translation error metrics, and
the experiment drivers built on top of them (w-sensitivity sweep, repeated
noisy trials, runtime scaling benchmark) with their charts.

Synthetic sets are angular sectors cut from one shared surface sample of an
analytic shape. Overlapping sectors therefore contain the very same surface
points, so on noise-free data the ground truth is an exact optimum.

CHANGE LOG
----------
[2026-10-17] Composite is a lobed ellipsoid
  - The composite shape used to be a sphere with a box attached. Rotations
    about the sphere centre leave half of its surface unchanged, and 10 degree
    scenes with five sets stalled short of the truth. It is now an ellipsoid
    carrying seven lobes of different size, with no rotational symmetry.
  - benchmark_scaling takes the best of `repeats` runs per grid cell.

[2026-10-11] Sweep uses the scene as given
  - sweep_w no longer adds its own noise; callers pass a noisy scene when the
    clean one collapses every error to round-off.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

from em_engine import EmConfig, register
from geometry import (
    Points, PointSet, RigidTransform, compose, inverse, transform_points,
)

# --- LOGGER ---
logger = logging.getLogger('synthesis_eval')
logger.setLevel(logging.INFO)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - 🧪 SYNTH/EVAL - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
logger.propagate = False

SHAPES = ("sphere", "box", "composite")
NO_NOISE = math.inf

# composite: ellipsoid semi-axes and (direction, height, angular width^2) of each lobe
_LOBE_AXES = np.array([1.0, 0.8, 0.65])
_LOBES = tuple(
    (np.asarray(d, dtype=float) / np.linalg.norm(d), height, width2)
    for d, height, width2 in (
        ((0.9, 0.3, 0.3), 0.35, 0.10),
        ((-0.5, 0.8, 0.2), 0.25, 0.06),
        ((-0.4, -0.6, 0.7), 0.30, 0.12),
        ((0.2, -0.9, -0.4), 0.20, 0.05),
        ((0.1, 0.2, -1.0), 0.28, 0.08),
        ((-0.9, -0.1, -0.3), 0.15, 0.04),
        ((0.4, 0.6, 0.7), 0.22, 0.07),
    )
)


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GroundTruthScene:
    sets: Tuple[PointSet, ...]
    truth: Tuple[RigidTransform, ...]
    scene_diameter: float
    shape: str = "sphere"
    seed: int = 0

    @property
    def M(self) -> int:
        return len(self.sets)

    def with_sets(self, sets: Sequence[PointSet]) -> "GroundTruthScene":
        return GroundTruthScene(tuple(sets), self.truth, self.scene_diameter, self.shape, self.seed)


@dataclass(frozen=True)
class ErrorMetrics:
    e_R: float
    e_t: float
    per_set_R: Tuple[float, ...]
    per_set_t: Tuple[float, ...]
    gauge_fixed: bool


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float
    seed: Union[int, Tuple[int, ...]] = 0

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise SynthesisError(f"snr_db must be finite or +inf, got {self.snr_db}")

    @property
    def seed_key(self) -> List[int]:
        return list(self.seed) if isinstance(self.seed, tuple) else [self.seed]


@dataclass
class TrialSummary:
    mean_e_R: float
    std_e_R: float
    mean_e_t: float
    std_e_t: float
    mean_runtime_s: float
    table: pd.DataFrame = field(repr=False)


# ==============================================================================
# Surface sampling
# ==============================================================================

def _sample_sphere(n: int, rng: np.random.Generator, radius: float) -> Points:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v


def _sample_box(n: int, rng: np.random.Generator, half: Sequence[float]) -> Points:
    """Area-uniform samples on the surface of an axis-aligned box."""
    a, b, c = half
    # face pairs normal to x, y, z
    areas = np.array([b * c, a * c, a * b])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    side = rng.choice([-1.0, 1.0], size=n)
    pts = (rng.random((n, 3)) * 2.0 - 1.0) * np.asarray(half)
    pts[np.arange(n), axis] = side * np.asarray(half)[axis]
    return pts


def _sample_lobed(n: int, rng: np.random.Generator, radius: float) -> Points:
    """Ellipsoid whose radius is raised by the _LOBES bumps; directions are drawn uniformly."""
    u = _sample_sphere(n, rng, 1.0)
    bumps = np.zeros(n)
    for direction, height, width2 in _LOBES:
        bumps += height * np.exp((u @ direction - 1.0) / width2)
    return radius * (u * _LOBE_AXES) * (1.0 + bumps)[:, None]


def sample_surface(shape: str, n: int, rng: np.random.Generator, radius: float = 1.0) -> Points:
    if shape == "sphere":
        return _sample_sphere(n, rng, radius)
    if shape == "box":
        return _sample_box(n, rng, (radius, 0.7 * radius, 0.5 * radius))
    if shape == "composite":
        return _sample_lobed(n, rng, radius)
    raise SynthesisError(f"unknown shape '{shape}' (expected one of {', '.join(SHAPES)})")


def random_rigid_transform(rng: np.random.Generator, max_angle_deg: float, max_translation: float) -> RigidTransform:
    """Uniform random axis, angle in [0, max_angle], translation direction uniform, length in [0, max_translation]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(max_angle_deg) * rng.random()
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    length = max_translation * rng.random()
    R = Rotation.from_rotvec(axis * angle).as_matrix()
    return RigidTransform(R, direction * length)


def rotation_angle_deg(R) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    return float(np.degrees(np.linalg.norm(Rotation.from_matrix(R).as_rotvec())))


# ==============================================================================
# Scene synthesis and perturbation
# ==============================================================================

def synth_scene(shape: str = "sphere", M: int = 3, points_per_set: int = 1000,
                perturb_deg: float = 10.0, perturb_trans: float = 0.1,
                overlap_fraction: float = 0.5, seed: int = 0, radius: float = 1.0) -> GroundTruthScene:
    """
    Cut M overlapping azimuthal sectors out of one surface sample of `shape`.

    Sectors have width s = pi (1 + overlap) and their centres span (1 - overlap) s,
    so every pair shares at least `overlap_fraction` of a sector. Each set is then
    expressed in its own frame through the inverse of its ground-truth transform.
    """
    if M < 2:
        raise SynthesisError("need at least two point sets")
    if points_per_set < 10:
        raise SynthesisError(f"points_per_set must be >= 10, got {points_per_set}")
    if not 0.0 < overlap_fraction <= 1.0:
        raise SynthesisError(f"overlap_fraction must lie in (0, 1], got {overlap_fraction}")
    if perturb_deg < 0 or perturb_trans < 0:
        raise SynthesisError("perturbation bounds must be non-negative")

    rng = np.random.default_rng(seed)
    width = min(math.pi * (1.0 + overlap_fraction), 2.0 * math.pi)
    spread = (1.0 - overlap_fraction) * width
    n_master = int(math.ceil(points_per_set * 2.0 * math.pi / width))
    master = sample_surface(shape, n_master, rng, radius)
    azimuth = np.arctan2(master[:, 1], master[:, 0])

    centers = np.linspace(-spread / 2.0, spread / 2.0, M)
    truth = [random_rigid_transform(rng, perturb_deg, perturb_trans) for _ in range(M)]

    sets = []
    used = np.zeros(n_master, dtype=bool)
    for i, theta in enumerate(centers):
        gap = np.abs((azimuth - theta + math.pi) % (2.0 * math.pi) - math.pi)
        inside = gap <= width / 2.0 + 1e-12
        if not inside.any():
            raise SynthesisError(f"sector {i} received no points; raise points_per_set")
        used |= inside
        local = transform_points(inverse(truth[i]), master[inside])
        sets.append(PointSet(i, local, f"set_{i:02d}"))

    covered = master[used]
    diameter = float(np.linalg.norm(covered.max(axis=0) - covered.min(axis=0)))
    logger.info(f"Synthesized {shape} scene: M={M}, sizes={[len(s) for s in sets]}, "
                f"perturb={perturb_deg} deg / {perturb_trans}, overlap={overlap_fraction}, seed={seed}")
    return GroundTruthScene(tuple(sets), tuple(truth), diameter, shape, seed)


def add_noise(point_set: PointSet, spec: NoiseSpec) -> PointSet:
    """Isotropic Gaussian noise with power P_s / 10^(snr/10), P_s the centred mean squared norm."""
    if spec.snr_db == math.inf:
        return point_set
    pts = point_set.points
    centred = pts - pts.mean(axis=0)
    signal_power = float(np.mean(np.sum(centred ** 2, axis=1)))
    noise_power = signal_power / 10.0 ** (spec.snr_db / 10.0)
    rng = np.random.default_rng(spec.seed_key + [point_set.index])
    noise = rng.normal(scale=math.sqrt(noise_power / 3.0), size=pts.shape)
    return point_set.with_points(pts + noise)


def add_noise_to_scene(scene: GroundTruthScene, spec: NoiseSpec) -> GroundTruthScene:
    return scene.with_sets([add_noise(s, spec) for s in scene.sets])


def measured_snr_db(clean: Points, noisy: Points) -> float:
    centred = clean - clean.mean(axis=0)
    signal_power = np.mean(np.sum(centred ** 2, axis=1))
    noise_power = np.mean(np.sum((noisy - clean) ** 2, axis=1))
    return float(10.0 * np.log10(signal_power / noise_power))


def downsample_uniform(point_set: PointSet, target: int) -> PointSet:
    """Keep indices round(k N / target), k = 0..target-1, in their original order."""
    if target < 1:
        raise SynthesisError(f"downsample target must be >= 1, got {target}")
    n = len(point_set)
    if target >= n:
        return point_set
    keep = np.unique(np.rint(np.arange(target) * n / target).astype(np.int64))
    return point_set.with_points(point_set.points[keep])


def inject_outliers(point_set: PointSet, fraction: float, seed: int = 0) -> PointSet:
    """Append round(fraction N) points drawn uniformly in the set's bounding box, enlarged by 10 %."""
    if fraction < 0:
        raise SynthesisError("outlier fraction must be non-negative")
    count = int(round(fraction * len(point_set)))
    if count == 0:
        return point_set
    pts = point_set.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 0.05 * (hi - lo)
    rng = np.random.default_rng([seed, point_set.index])
    junk = rng.uniform(lo - pad, hi + pad, size=(count, 3))
    return point_set.with_points(np.vstack([pts, junk]))


# ==============================================================================
# Error metrics
# ==============================================================================

def compute_errors(estimated: Sequence[RigidTransform], truth: Sequence[RigidTransform],
                   gauge_fix: bool = True) -> ErrorMetrics:
    """
    e_R = mean ||R_m - R_g||_F and e_t = mean ||t_m - t_g||.
    With gauge_fix, every estimate is first left-composed with
    G = T_g,1 o inverse(T_m,1) so that set 0 agrees exactly.
    """
    if len(estimated) != len(truth):
        raise SynthesisError(f"got {len(estimated)} estimated transforms for {len(truth)} ground-truth ones")
    if not estimated:
        raise SynthesisError("no transforms to compare")
    if gauge_fix:
        G = compose(truth[0], inverse(estimated[0]))
        estimated = [compose(G, T) for T in estimated]
    per_R = tuple(float(np.linalg.norm(m.rotation - g.rotation, ord='fro')) for m, g in zip(estimated, truth))
    per_t = tuple(float(np.linalg.norm(m.translation - g.translation)) for m, g in zip(estimated, truth))
    return ErrorMetrics(float(np.mean(per_R)), float(np.mean(per_t)), per_R, per_t, gauge_fix)


def evaluate_both(estimated: Sequence[RigidTransform], truth: Sequence[RigidTransform]) -> Dict[str, float]:
    raw = compute_errors(estimated, truth, gauge_fix=False)
    fixed = compute_errors(estimated, truth, gauge_fix=True)
    return {"e_R_raw": raw.e_R, "e_t_raw": raw.e_t, "e_R_fixed": fixed.e_R, "e_t_fixed": fixed.e_t}


# ==============================================================================
# Experiment drivers
# ==============================================================================

def _run(scene: GroundTruthScene, cfg: EmConfig, init=None) -> Dict[str, float]:
    started = time.perf_counter()
    params, report = register(scene.sets, init, cfg)
    runtime = time.perf_counter() - started
    metrics = compute_errors(params.transforms, scene.truth, gauge_fix=True)
    return {"e_R": metrics.e_R, "e_t": metrics.e_t, "runtime_s": runtime,
            "iterations": report.iterations_run}


def sweep_w(scene: GroundTruthScene, w_values: Sequence[float], cfg: Optional[EmConfig] = None,
            init: Optional[Sequence[RigidTransform]] = None) -> pd.DataFrame:
    """One registration per w; gauge-fixed errors."""
    cfg = cfg or EmConfig()
    rows = []
    for w in w_values:
        row = _run(scene, replace(cfg, w=float(w)), init)
        logger.info(f"w={w}: e_R={row['e_R']:.3e}, e_t={row['e_t']:.3e}, {row['iterations']} iterations")
        rows.append({"w": float(w), **row})
    return pd.DataFrame(rows, columns=["w", "e_R", "e_t", "runtime_s", "iterations"])


def trial_statistics(scene: GroundTruthScene, noise: NoiseSpec, trials: int,
                     cfg: Optional[EmConfig] = None, init: Optional[Sequence[RigidTransform]] = None,
                     threads: int = 1) -> TrialSummary:
    """Fresh noise per trial (stream keyed by (seed, trial, set)); mean and sample std of gauge-fixed errors."""
    if trials < 1:
        raise SynthesisError(f"trials must be >= 1, got {trials}")
    cfg = replace(cfg or EmConfig(), threads=1)

    def one_trial(t: int) -> Dict[str, float]:
        spec = NoiseSpec(noise.snr_db, tuple(noise.seed_key) + (t,))
        return {"trial": t, **_run(add_noise_to_scene(scene, spec), cfg, init)}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(one_trial, range(trials)))
    else:
        rows = [one_trial(t) for t in range(trials)]

    table = pd.DataFrame(rows, columns=["trial", "e_R", "e_t", "runtime_s", "iterations"])
    ddof = 1 if trials > 1 else 0
    summary = TrialSummary(
        mean_e_R=float(table["e_R"].mean()), std_e_R=float(table["e_R"].std(ddof=ddof)),
        mean_e_t=float(table["e_t"].mean()), std_e_t=float(table["e_t"].std(ddof=ddof)),
        mean_runtime_s=float(table["runtime_s"].mean()), table=table,
    )
    logger.info(f"{trials} trials at SNR {noise.snr_db} dB: e_R={summary.mean_e_R:.3e} ± {summary.std_e_R:.3e}, "
                f"e_t={summary.mean_e_t:.3e} ± {summary.std_e_t:.3e}")
    return summary


def benchmark_scaling(sizes: Sequence[int], set_counts: Sequence[int], cfg: Optional[EmConfig] = None,
                      seed: int = 0, shape: str = "sphere", repeats: int = 1) -> pd.DataFrame:
    """
    Per-iteration runtime over a grid of (points per set, set count), the
    fastest of `repeats` runs per cell.
    size_ratio compares with the previous size at the same set count,
    sets_ratio with the previous set count at the same size.
    """
    if repeats < 1:
        raise SynthesisError(f"repeats must be >= 1, got {repeats}")
    cfg = cfg or EmConfig(max_iters=10, tol=1e-300)
    rows = []
    for M in set_counts:
        for n in sizes:
            scene = synth_scene(shape, M, n, perturb_deg=5.0, perturb_trans=0.05, overlap_fraction=0.5, seed=seed)
            result = min((_run(scene, cfg) for _ in range(repeats)), key=lambda r: r["runtime_s"])
            rows.append({"points_per_set": n, "sets": M, "iterations": result["iterations"],
                         "runtime_s": result["runtime_s"],
                         "per_iteration_s": result["runtime_s"] / result["iterations"]})
    table = pd.DataFrame(rows, columns=["points_per_set", "sets", "iterations", "runtime_s", "per_iteration_s"])
    if table.empty:
        return table.assign(size_ratio=pd.Series(dtype=float), sets_ratio=pd.Series(dtype=float))
    table["size_ratio"] = table.groupby("sets")["per_iteration_s"].transform(lambda s: s / s.shift(1))
    by_size = table.sort_values(["points_per_set", "sets"]).groupby("points_per_set")["per_iteration_s"]
    table["sets_ratio"] = by_size.transform(lambda s: s / s.shift(1))
    return table


# ==============================================================================
# Charts
# ==============================================================================

def plot_sweep(table: pd.DataFrame, path: str) -> bool:
    """Rotation and translation error against w, log-scaled w axis."""
    try:
        fig, (ax_r, ax_t) = plt.subplots(1, 2, figsize=(12, 5))
        ax_r.plot(table["w"], table["e_R"], marker='o', color='tab:blue')
        ax_r.set_title("Rotation error vs. w", fontsize=14)
        ax_r.set_ylabel("e_R")
        ax_t.plot(table["w"], table["e_t"], marker='s', color='tab:red')
        ax_t.set_title("Translation error vs. w", fontsize=14)
        ax_t.set_ylabel("e_t")
        for ax in (ax_r, ax_t):
            ax.set_xscale('log')
            ax.set_xlabel("w")
            ax.grid(True)
        plt.tight_layout()
        plt.savefig(path, format='png')
        plt.close(fig)
        logger.info(f"Sweep chart written to {path}")
        return True
    except Exception as e:
        logger.error(f"Could not generate sweep chart: {e}")
        plt.close('all')
        return False


def plot_benchmark(table: pd.DataFrame, path: str) -> bool:
    """Per-iteration runtime against points per set, one line per set count."""
    try:
        fig, ax = plt.subplots(figsize=(10, 6))
        for M, group in table.groupby("sets"):
            ax.plot(group["points_per_set"], group["per_iteration_s"], marker='o', label=f"M={M}")
        ax.set_xscale('log', base=2)
        ax.set_yscale('log')
        ax.set_xlabel("points per set")
        ax.set_ylabel("seconds per iteration")
        ax.set_title("Runtime scaling", fontsize=14)
        ax.grid(True)
        ax.legend(title="Sets")
        plt.tight_layout()
        plt.savefig(path, format='png')
        plt.close(fig)
        logger.info(f"Benchmark chart written to {path}")
        return True
    except Exception as e:
        logger.error(f"Could not generate benchmark chart: {e}")
        plt.close('all')
        return False

