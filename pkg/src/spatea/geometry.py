"""Equivariant frames, scalarization, and neighbor ordering for point clouds.

Conventions: positions are assumed pre-centered (mass center at the origin)
wherever frames are built, so cross products of absolute positions are
well-defined geometric quantities.  Frames use cross products and are
therefore rotation- (not reflection-) equivariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FRAME_EPS = 1e-8      # degeneracy threshold on unnormalized lengths
TIE_TOL = 1e-9        # absolute distance tolerance for neighbor tie groups

_degenerate_events = 0


class DegenerateFrameError(ValueError):
    """Raised when a frame construction hits a (near-)collinear configuration."""


def degenerate_event_count() -> int:
    return _degenerate_events


def reset_degenerate_event_count() -> None:
    global _degenerate_events
    _degenerate_events = 0


def _count_degenerate() -> None:
    global _degenerate_events
    _degenerate_events += 1


@dataclass(frozen=True)
class Frame:
    """Right-handed orthonormal basis (e1, e2, e3)."""

    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray

    def __post_init__(self):
        for v in (self.e1, self.e2, self.e3):
            if v.shape != (3,):
                raise ValueError("frame vectors must be 3-vectors")
            if abs(np.linalg.norm(v) - 1.0) > 1e-10:
                raise ValueError("frame vectors must be unit norm")
        if abs(self.e1 @ self.e2) > 1e-10 or abs(self.e1 @ self.e3) > 1e-10 \
                or abs(self.e2 @ self.e3) > 1e-10:
            raise ValueError("frame vectors must be pairwise orthogonal")
        if np.max(np.abs(np.cross(self.e1, self.e2) - self.e3)) > 1e-10:
            raise ValueError("frame must be right-handed")

    @property
    def rows(self) -> np.ndarray:
        return np.stack([self.e1, self.e2, self.e3])


def _frame_from(u: np.ndarray, w: np.ndarray) -> Frame:
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    diff = u - w
    dn = np.linalg.norm(diff)
    cr = np.cross(u, w)
    cn = np.linalg.norm(cr)
    if dn < FRAME_EPS or cn < FRAME_EPS:
        raise DegenerateFrameError(
            f"degenerate frame: |u-w|={dn:.3e}, |u x w|={cn:.3e} (threshold {FRAME_EPS:.0e})"
        )
    e1 = diff / dn
    e2 = cr / cn
    return Frame(e1, e2, np.cross(e1, e2))


def edge_frame(xi, xj) -> Frame:
    """Frame spanned by the displacement and the plane through the origin."""
    return _frame_from(xi, xj)


def node_frame(xi, neighbors: Sequence) -> Frame:
    """Frame built from a node and its 1-hop neighborhood mean.

    Same construction as edge_frame with xj replaced by the neighbor mean.
    Note: in a fully connected graph with exactly centered positions the
    neighbor mean is anti-parallel to xi, so this is degenerate by
    construction; callers fall back to a zeroed orientation block.
    """
    neighbors = np.asarray(neighbors, dtype=np.float64)
    if neighbors.ndim != 2 or neighbors.shape[0] < 1 or neighbors.shape[1] != 3:
        raise ValueError("need at least one 3-vector neighbor")
    return _frame_from(xi, neighbors.mean(axis=0))


def scalarize(v, f: Frame) -> np.ndarray:
    """Project a vector onto the frame: invariant coefficients."""
    return f.rows @ np.asarray(v, dtype=np.float64)


def vectorize(s, f: Frame) -> np.ndarray:
    """Rebuild an equivariant vector from frame coefficients; inverse of scalarize."""
    return f.rows.T @ np.asarray(s, dtype=np.float64)


def frame_transition(fa: Frame, fb: Frame) -> np.ndarray:
    """Orthogonal matrix m[p][q] = e_p(fa) . e_q(fb); invariant under global rotation."""
    return fa.rows @ fb.rows.T


@dataclass
class NeighborOrder:
    order: list
    tie_groups: list = field(default_factory=list)


def _neighbor_default(i: int, n: int) -> list:
    return [j for j in range(n) if j != i]


def edge_feature(i: int, j: int, positions, neighbors: Sequence[int] | None = None) -> np.ndarray:
    """10 invariants per edge: distance plus the node-to-edge frame transition.

    Raises DegenerateFrameError; use safe_edge_feature for the fallback path.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if neighbors is None:
        neighbors = _neighbor_default(i, len(pos))
    d = np.linalg.norm(pos[i] - pos[j])
    nf = node_frame(pos[i], pos[list(neighbors)])
    ef = edge_frame(pos[i], pos[j])
    return np.concatenate([[d], frame_transition(nf, ef).reshape(-1)])


def safe_edge_feature(
    i: int, j: int, positions, neighbors: Sequence[int] | None = None
) -> tuple[np.ndarray, bool]:
    """edge_feature with the documented degeneracy fallback.

    Degenerate frames yield a zeroed orientation block and a distance-only
    feature; the event is counted for diagnostics.  Returns (feature, ok).
    """
    try:
        return edge_feature(i, j, positions, neighbors), True
    except DegenerateFrameError:
        _count_degenerate()
        pos = np.asarray(positions, dtype=np.float64)
        d = np.linalg.norm(pos[i] - pos[j])
        return np.concatenate([[d], np.zeros(9)]), False


def order_neighbors(i: int, positions, neighbors: Sequence[int] | None = None) -> NeighborOrder:
    """Distance-sorted neighbor order with deterministic tie resolution.

    Primary key: Euclidean distance (ascending).  Neighbors whose distances
    differ by at most TIE_TOL from the first member form a tie group; inside a
    group the order is fixed by lexicographic comparison of the 10-entry edge
    feature, then the raw distance bits, then the neighbor index.  The result
    is independent of the input listing order.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if neighbors is None:
        neighbors = _neighbor_default(i, len(pos))
    neighbors = list(neighbors)
    if not neighbors:
        raise ValueError("neighbor set must be nonempty")
    dist = {j: float(np.linalg.norm(pos[i] - pos[j])) for j in neighbors}
    prelim = sorted(neighbors, key=lambda j: (dist[j], j))
    groups: list[list[int]] = []
    for j in prelim:
        if groups and dist[j] - dist[groups[-1][0]] <= TIE_TOL:
            groups[-1].append(j)
        else:
            groups.append([j])

    def tie_key(j):
        feat, _ = safe_edge_feature(i, j, pos, neighbors)
        return (tuple(feat), np.float64(dist[j]).tobytes(), j)

    order = []
    tie_groups = []
    for g in groups:
        if len(g) > 1:
            g = sorted(g, key=tie_key)
        order.extend(g)
        tie_groups.append(list(g))
    return NeighborOrder(order=order, tie_groups=tie_groups)


@dataclass
class GeometricGraph:
    """A particle snapshot with the fully connected interaction graph."""

    positions: np.ndarray
    velocities: np.ndarray
    charges: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.charges = np.asarray(self.charges, dtype=np.float64)
        n = self.positions.shape[0]
        if n < 2 or self.positions.shape != (n, 3):
            raise ValueError("positions must be (N, 3) with N >= 2")
        if self.velocities.shape != (n, 3) or self.charges.shape != (n,):
            raise ValueError("velocities must be (N, 3) and charges (N,)")
        for a in (self.positions, self.velocities, self.charges):
            if not np.all(np.isfinite(a)):
                raise ValueError("graph fields must be finite")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def neighbors(self, i: int) -> list:
        return _neighbor_default(i, self.n)

    def neighbor_order(self, i: int) -> NeighborOrder:
        return order_neighbors(i, self.positions)

    def centered(self) -> "GeometricGraph":
        return GeometricGraph(
            self.positions - self.positions.mean(axis=0),
            self.velocities.copy(),
            self.charges.copy(),
        )
