"""Perturbation and anonymization baselines over FrameGrids.

Each method is a deterministic-under-seed transform that preserves frame
structure and labels. Default parameters were calibrated once on the
default synthetic dataset so every method produces a visible but
non-destructive perturbation; they are frozen here rather than recomputed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from pointveil.data import FrameGrid
from pointveil.util import seeded_rng

METHODS = ("gaussian", "uniform", "random_perturb", "scale", "rotation",
           "feature_obfuscation", "quantization", "laplacian", "k_anonymity")

DEFAULT_PARAMETERS: dict[str, dict] = {
    "gaussian": {"sigma": 0.05},
    "uniform": {"amplitude": 0.05},
    "random_perturb": {"radius": 0.05},
    "scale": {"spread": 0.1},
    "rotation": {"max_degrees": 15.0},
    "feature_obfuscation": {"rho": 0.2},
    "quantization": {"cell": 0.1},
    "laplacian": {"scale": 0.2},
    "k_anonymity": {"group_size": 4},
}

POINT_LEVEL_METHODS = ("gaussian", "uniform", "random_perturb", "scale", "rotation")


@dataclass(frozen=True)
class BaselineSpec:
    method: str
    parameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline method {self.method!r}; "
                             f"choose from {', '.join(METHODS)}")
        merged = dict(DEFAULT_PARAMETERS[self.method])
        unknown = set(self.parameters) - set(merged)
        if unknown:
            raise ValueError(f"{self.method}: unknown parameters {sorted(unknown)}")
        merged.update(self.parameters)
        object.__setattr__(self, "parameters", merged)


def perturb(grid: FrameGrid, spec: BaselineSpec) -> FrameGrid:
    """Apply one baseline transform; pure in (grid, spec)."""
    coords = grid.coords.astype(np.float64)
    f, p, _ = coords.shape
    rng = seeded_rng(spec.seed, "baseline", spec.method)
    prm = spec.parameters
    if spec.method == "gaussian":
        out = coords + rng.normal(0.0, prm["sigma"], size=coords.shape) \
            if prm["sigma"] > 0 else coords.copy()
    elif spec.method == "uniform":
        a = prm["amplitude"]
        out = coords + rng.uniform(-a, a, size=coords.shape) if a > 0 else coords.copy()
    elif spec.method == "random_perturb":
        direction = rng.normal(size=coords.shape)
        norms = np.linalg.norm(direction, axis=-1, keepdims=True)
        norms[norms == 0] = 1.0
        out = coords + prm["radius"] * direction / norms
    elif spec.method == "scale":
        factor = rng.uniform(1.0 - prm["spread"], 1.0 + prm["spread"])
        centroid = coords.reshape(-1, 3).mean(axis=0)
        out = centroid + factor * (coords - centroid)
    elif spec.method == "rotation":
        theta = math.radians(rng.uniform(-prm["max_degrees"], prm["max_degrees"]))
        out = rotate_about_vertical(coords, theta)
    elif spec.method == "feature_obfuscation":
        mask = rng.random(size=(f, p)) < prm["rho"]
        centroids = coords.mean(axis=1, keepdims=True)
        out = np.where(mask[:, :, None], centroids, coords)
    elif spec.method == "quantization":
        q = prm["cell"]
        out = np.round(coords / q) * q
    elif spec.method == "laplacian":
        out = coords + rng.laplace(0.0, prm["scale"], size=coords.shape)
    else:  # k_anonymity via micro-aggregation
        out = np.empty_like(coords)
        for fi in range(f):
            out[fi] = _micro_aggregate(coords[fi], int(prm["group_size"]))
    return FrameGrid(out.astype(np.float32), grid.subject, grid.gesture,
                     seq_id=grid.seq_id)


def rotate_about_vertical(coords: np.ndarray, theta: float) -> np.ndarray:
    """Rotate a whole sequence about the z axis through its centroid."""
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    centroid = coords.reshape(-1, 3).mean(axis=0)
    return centroid + (coords - centroid) @ rot.T


def _micro_aggregate(frame: np.ndarray, group_size: int) -> np.ndarray:
    """Greedy nearest-neighbor grouping; each group collapses to its centroid.

    The lowest-index unassigned point seeds each group and pulls in its
    group_size - 1 nearest unassigned peers (ties by lower index).
    """
    n = frame.shape[0]
    out = np.empty_like(frame)
    unassigned = np.ones(n, dtype=bool)
    while unassigned.any():
        seed_idx = int(np.flatnonzero(unassigned)[0])
        unassigned[seed_idx] = False
        rest = np.flatnonzero(unassigned)
        take = min(group_size - 1, len(rest))
        if take > 0:
            d2 = np.sum((frame[rest] - frame[seed_idx]) ** 2, axis=1)
            order = np.argsort(d2, kind="stable")[:take]
            members = np.concatenate([[seed_idx], rest[order]])
            unassigned[rest[order]] = False
        else:
            members = np.asarray([seed_idx])
        out[members] = frame[members].mean(axis=0)
    return out


def perturb_dataset(grids: list[FrameGrid], spec: BaselineSpec) -> list[FrameGrid]:
    """Apply a baseline across a dataset with per-grid derived seeds."""
    out = []
    for i, grid in enumerate(grids):
        child = int(seeded_rng(spec.seed, "baseline-grid", i).integers(2**31 - 1))
        out.append(perturb(grid, replace(spec, seed=child)))
    return out
