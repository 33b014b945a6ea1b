"""Charged N-body trajectory generation for three force fields.

ES is softened Coulomb; G_ES adds a uniform downward pull; L_ES adds a
magnetic Lorentz term q v x B with B along z. Integration is semi-implicit
Euler at unit mass. The force constants (softening 0.1, g = 0.5, unit B,
dt = 1e-3) are dataset constants chosen for bounded, non-colliding
trajectories, not tuned quantities.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import geometry as geo

SOFTENING = 0.1
GRAVITY = 0.5
B_FIELD = np.array([0.0, 0.0, 1.0])
FIELDS = ("ES", "G_ES", "L_ES")

MIN_INIT_DIST = 0.2
VEL_SCALE = 0.5


@dataclass
class ParticleSystem:
    positions: np.ndarray
    velocities: np.ndarray
    charges: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.charges = np.asarray(self.charges, dtype=np.float64)
        n = self.positions.shape[0]
        if n < 2:
            raise ValueError(f"need at least 2 particles, got {n}")
        if self.positions.shape != (n, 3) or self.velocities.shape != (n, 3):
            raise ValueError("positions and velocities must be (N, 3)")
        if self.charges.shape != (n,):
            raise ValueError("charges must be (N,)")
        for name, arr in (("positions", self.positions),
                          ("velocities", self.velocities),
                          ("charges", self.charges)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name}")

    @property
    def n(self) -> int:
        return self.positions.shape[0]


def _pair_terms(positions, charges):
    diff = positions[:, None, :] - positions[None, :, :]   # x_i - x_j
    dist_sq = np.sum(diff * diff, axis=-1)
    denom = (dist_sq + SOFTENING ** 2) ** 1.5
    np.fill_diagonal(denom, np.inf)
    qq = charges[:, None] * charges[None, :]
    return (qq / denom)[:, :, None] * diff


def compute_forces(sys: ParticleSystem, field: str) -> np.ndarray:
    if field not in FIELDS:
        raise ValueError(f"unknown field {field!r}, expected one of {FIELDS}")
    forces = _pair_terms(sys.positions, sys.charges).sum(axis=1)
    if field == "G_ES":
        forces = forces + np.array([0.0, 0.0, -GRAVITY])
    elif field == "L_ES":
        forces = forces + sys.charges[:, None] * np.cross(sys.velocities,
                                                          B_FIELD)
    return forces


def lorentz_component(sys: ParticleSystem) -> np.ndarray:
    return sys.charges[:, None] * np.cross(sys.velocities, B_FIELD)


def integrate_step(sys: ParticleSystem, field: str, dt: float) -> ParticleSystem:
    """Semi-implicit Euler at unit mass: kick with F(x, v), then drift."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    v = sys.velocities + dt * compute_forces(sys, field)
    x = sys.positions + dt * v
    return ParticleSystem(x, v, sys.charges)


def integrate(sys: ParticleSystem, field: str, dt: float,
              steps: int) -> ParticleSystem:
    for _ in range(steps):
        sys = integrate_step(sys, field, dt)
    return sys


def total_energy(sys: ParticleSystem, field: str) -> float:
    """Kinetic + softened Coulomb (+ gravitational potential for G_ES).

    The magnetic term does no work, so this is conserved for L_ES too.
    """
    kinetic = 0.5 * float(np.sum(sys.velocities ** 2))
    diff = sys.positions[:, None, :] - sys.positions[None, :, :]
    dist_sq = np.sum(diff * diff, axis=-1)
    inv = 1.0 / np.sqrt(dist_sq + SOFTENING ** 2)
    qq = sys.charges[:, None] * sys.charges[None, :]
    potential = 0.5 * float(np.sum(qq * inv)) \
        - 0.5 * float(np.trace(qq * inv))
    if field == "G_ES":
        potential += GRAVITY * float(np.sum(sys.positions[:, 2]))
    return kinetic + potential


def random_system(rng: np.random.Generator, n_particles: int) -> ParticleSystem:
    """Uniform box positions with a rejection-sampled separation floor."""
    positions = np.empty((n_particles, 3))
    count = 0
    while count < n_particles:
        cand = rng.uniform(-1.0, 1.0, size=3)
        if count == 0 or np.min(
                np.linalg.norm(positions[:count] - cand, axis=1)) >= MIN_INIT_DIST:
            positions[count] = cand
            count += 1
    velocities = rng.normal(0.0, VEL_SCALE, size=(n_particles, 3))
    charges = rng.choice([-1.0, 1.0], size=n_particles)
    return ParticleSystem(positions, velocities, charges)


def make_sample(field: str, n_particles: int, dt: float, steps: int,
                seed: int) -> dict:
    rng = np.random.default_rng(seed)
    sys = random_system(rng, n_particles)
    final = integrate(sys, field, dt, steps)
    return {
        "positions": sys.positions.tolist(),
        "velocities": sys.velocities.tolist(),
        "charges": sys.charges.tolist(),
        "target_positions": final.positions.tolist(),
        "meta": {"field": field, "dt": dt, "steps": steps, "seed": seed},
    }


def _worker_count() -> int:
    env = os.environ.get("SPATEA_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def generate_dataset(n_traj: int, n_particles: int, field: str, dt: float,
                     steps: int, seed: int, out_path: str) -> str:
    """Write one JSON line per trajectory; byte-identical for equal seeds.

    Trajectories are independent (per-trajectory generator seeded
    seed + index) and generated in parallel, collected in index order.
    """
    if field not in FIELDS:
        raise ValueError(f"unknown field {field!r}, expected one of {FIELDS}")
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        samples = pool.map(
            lambda k: make_sample(field, n_particles, dt, steps, seed + k),
            range(n_traj))
        lines = [json.dumps(s, sort_keys=True) for s in samples]
    opener = gzip.open if str(out_path).endswith(".gz") else open
    with opener(out_path, "wt") as fh:
        for line in lines:
            fh.write(line + "\n")
    return out_path


def read_dataset(path: str) -> list:
    """Parse a dataset file; gzip is detected from the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    samples = []
    with opener(path, "rt") as fh:
        for line in fh:
            line = line.strip()
            if line:
                samples.append(json.loads(line))
    return samples


def sample_to_graph(sample: dict) -> tuple:
    """(input graph, target positions) from one parsed JSON record."""
    g = geo.GeometricGraph(np.array(sample["positions"]),
                           np.array(sample["velocities"]),
                           np.array(sample["charges"]))
    return g, np.array(sample["target_positions"])


def split_of(index: int, seed: int) -> str:
    """Stable 5/1/1 train/val/test assignment from (seed, index)."""
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    bucket = int.from_bytes(digest[:8], "big") % 7
    if bucket < 5:
        return "train"
    return "val" if bucket == 5 else "test"


def split_dataset(samples: list, seed: int = None) -> dict:
    """Partition parsed samples by trajectory index under the base seed
    (defaults to the first sample's, which carries base + index 0)."""
    if seed is None and samples:
        seed = int(samples[0]["meta"]["seed"])
    out = {"train": [], "val": [], "test": []}
    for k, s in enumerate(samples):
        out[split_of(k, seed)].append(s)
    return out
