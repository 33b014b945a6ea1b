import numpy as np
import pytest


def random_rotation(rng) -> np.ndarray:
    """Uniform-ish proper rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_cloud(rng, n, min_dist=0.2, box=1.0):
    """n points in a box with a minimum pairwise separation."""
    while True:
        pts = rng.uniform(-box, box, size=(n, 3))
        diffs = pts[:, None, :] - pts[None, :, :]
        d = np.linalg.norm(diffs, axis=-1) + np.eye(n) * 1e9
        if d.min() >= min_dist:
            return pts


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
