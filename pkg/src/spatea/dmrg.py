"""One-site DMRG for a transverse-field Ising chain, checked against exact
diagonalization.

H = -J sum Z_i Z_{i+1} - h sum X_i, encoded as a bond-dimension-3 MPO. The
ground-state search keeps the MPS in mixed-canonical gauge, builds each
site's effective Hamiltonian from left/right environments, and solves the
local lowest-eigenpair problem (dense below 64 local dimensions, Lanczos
above). All environment and matvec contractions go through the one
contraction primitive so any bug there surfaces against the dense oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .autodiff import CapabilityError
from .compress import MPSChain
from .tensor import contract

_ID = np.eye(2)
_X = np.array([[0.0, 1.0], [1.0, 0.0]])
_Z = np.array([[1.0, 0.0], [0.0, -1.0]])

MAX_DENSE_SITES = 12
DENSE_LOCAL_DIM = 64
LANCZOS_ITERS = 50
LANCZOS_TOL = 1e-10


@dataclass
class MPO:
    """Site tensors with axes (left bond, phys out, phys in, right bond)."""

    sites: list = field(default_factory=list)

    def __post_init__(self):
        if not self.sites:
            raise ValueError("MPO needs at least one site")
        self.sites = [np.asarray(s, dtype=np.float64) for s in self.sites]
        for k, s in enumerate(self.sites):
            if s.ndim != 4:
                raise ValueError(f"MPO site {k} must be rank 4, got {s.shape}")
        if self.sites[0].shape[0] != 1 or self.sites[-1].shape[3] != 1:
            raise ValueError("MPO boundary bonds must have size 1")
        for k in range(len(self.sites) - 1):
            if self.sites[k].shape[3] != self.sites[k + 1].shape[0]:
                raise ValueError(f"MPO bond mismatch at sites {k},{k + 1}")

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    def to_dense(self) -> np.ndarray:
        """Materialize the full 2^N x 2^N operator (N <= 12 only)."""
        n = self.n_sites
        if n > MAX_DENSE_SITES:
            raise CapabilityError(f"dense operator for N={n} exceeds "
                                  f"{MAX_DENSE_SITES} sites")
        acc = self.sites[0][0]  # (out, in, right)
        for s in self.sites[1:]:
            # (outs..., ins..., r) x (l, out, in, r') over r
            acc = contract(acc, s, [(acc.ndim - 1, 0)])
        acc = acc[..., 0]
        half = acc.ndim // 2
        # interleaved (out0, in0, out1, in1, ...) -> (outs, ins)
        order = list(range(0, acc.ndim, 2)) + list(range(1, acc.ndim, 2))
        return acc.transpose(order).reshape(2 ** half, 2 ** half)


def build_tfim_mpo(n: int, j_coupling: float, h_field: float) -> MPO:
    if n < 2:
        raise ValueError(f"need at least 2 sites, got {n}")
    w = np.zeros((3, 2, 2, 3))
    w[0, :, :, 0] = _ID
    w[1, :, :, 0] = _Z
    w[2, :, :, 0] = -h_field * _X
    w[2, :, :, 1] = -j_coupling * _Z
    w[2, :, :, 2] = _ID
    first = w[2:3]           # row that starts every term
    last = w[:, :, :, 0:1]   # column that closes every term
    return MPO([first] + [w.copy() for _ in range(n - 2)] + [last])


def exact_diag(mpo: MPO):
    """Dense ground-state oracle; returns (energy, eigenvector)."""
    dense = mpo.to_dense()
    if np.max(np.abs(dense - dense.T)) > 1e-10:
        raise ValueError("materialized operator is not symmetric")
    vals, vecs = np.linalg.eigh(dense)
    e0, v0 = float(vals[0]), vecs[:, 0]
    residual = np.linalg.norm(dense @ v0 - e0 * v0)
    if residual > 1e-8:
        raise tensor.NumericalError(f"eigensolve residual {residual:.2e}")
    return e0, v0


@dataclass
class DmrgState:
    mps: MPSChain
    energy: float
    energies: list          # best energy seen after each sweep
    residual: float         # local eigenproblem residual at the last site
    converged: bool


def _env_zero():
    return np.ones((1, 1, 1))


def _extend_left(env, site, w):
    """Grow a left environment (bra bond, MPO bond, ket bond) by one site."""
    e1 = contract(env, site.conj(), [(0, 0)])       # (w, b, s, a')
    e2 = contract(e1, w, [(0, 0), (2, 1)])          # (b, a', t, w')
    return contract(e2, site, [(0, 0), (2, 1)])     # (a', w', b')


def _extend_right(env, site, w):
    """Grow a right environment by one site."""
    e1 = contract(site.conj(), env, [(2, 0)])       # (a, s, w', b')
    e2 = contract(e1, w, [(1, 1), (2, 3)])          # (a, b', w, t)
    return contract(e2, site, [(1, 2), (3, 1)])     # (a, w, b)


def _apply_effective(left, w, right, v):
    """(H_eff v) for v with axes (left bond, phys, right bond)."""
    t1 = contract(left, v, [(2, 0)])                # (a, w, t, b')
    t2 = contract(t1, w, [(1, 0), (2, 2)])          # (a, b', s, w')
    return contract(t2, right, [(1, 2), (3, 1)])    # (a, s, b)


def _dense_effective(left, w, right):
    m1 = contract(left, w, [(1, 0)])                # (a, a', s, t, w')
    m2 = contract(m1, right, [(4, 1)])              # (a, a', s, t, b, b')
    m = m2.transpose(0, 2, 4, 1, 3, 5)
    dim = m.shape[0] * m.shape[1] * m.shape[2]
    return m.reshape(dim, dim)


def _lanczos_lowest(matvec, v0, iters=LANCZOS_ITERS, tol=LANCZOS_TOL):
    """Lowest eigenpair via Lanczos with full reorthogonalization."""
    v = v0 / np.linalg.norm(v0)
    basis = [v]
    alphas, betas = [], []
    for _ in range(iters):
        w = matvec(basis[-1])
        a = float(np.vdot(basis[-1], w).real)
        alphas.append(a)
        w = w - a * basis[-1]
        if len(basis) > 1:
            w = w - betas[-1] * basis[-2]
        for u in basis:  # full reorthogonalization, cheap at these sizes
            w = w - np.vdot(u, w) * u
        b = float(np.linalg.norm(w))
        if b < tol:
            break
        betas.append(b)
        basis.append(w / b)
    t = np.diag(alphas)
    if betas:
        off = np.array(betas[:len(alphas) - 1])
        t = t + np.diag(off, 1) + np.diag(off, -1)
    vals, vecs = np.linalg.eigh(t)
    theta = float(vals[0])
    vec = sum(c * u for c, u in zip(vecs[:, 0], basis))
    return theta, vec / np.linalg.norm(vec)


def _solve_site(left, w, right, v_init):
    dim = v_init.size
    shape = v_init.shape
    if dim <= DENSE_LOCAL_DIM:
        h_eff = _dense_effective(left, w, right)
        vals, vecs = np.linalg.eigh(0.5 * (h_eff + h_eff.conj().T))
        theta, vec = float(vals[0]), vecs[:, 0].reshape(shape)
    else:
        theta, vec = _lanczos_lowest(
            lambda x: _apply_effective(left, w, right, x.reshape(shape)).reshape(-1),
            v_init.reshape(-1))
        vec = vec.reshape(shape)
    residual = float(np.linalg.norm(
        _apply_effective(left, w, right, vec) - theta * vec))
    return theta, vec, residual


def _init_mps(n: int, chi: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    sites = []
    for k in range(n):
        l = min(chi, 2 ** k, 2 ** (n - k))
        r = min(chi, 2 ** (k + 1), 2 ** (n - k - 1))
        sites.append(rng.standard_normal((l, 2, r)))
    return sites


def _shift_right(sites, k):
    l, p, r = sites[k].shape
    res = tensor.svd(sites[k].reshape(l * p, r))
    rank = len(res.s)
    sites[k] = res.u.reshape(l, p, rank)
    carry = res.s[:, None] * res.v
    sites[k + 1] = contract(carry, sites[k + 1], [(1, 0)])


def _shift_left(sites, k):
    l, p, r = sites[k].shape
    res = tensor.svd(sites[k].reshape(l, p * r))
    rank = len(res.s)
    sites[k] = res.v.reshape(rank, p, r)
    sites[k - 1] = contract(sites[k - 1], res.u * res.s, [(2, 0)])


def mps_norm(sites) -> float:
    acc = np.ones((1, 1))
    for s in sites:
        t = contract(acc, s.conj(), [(0, 0)])   # (b, s, a')
        acc = contract(t, s, [(0, 0), (1, 1)])  # (a', b')
    return float(np.sqrt(abs(acc[0, 0])))


def mps_energy(sites, mpo: MPO) -> float:
    """Rayleigh quotient <s|H|s> / <s|s>."""
    env = _env_zero()
    for s, w in zip(sites, mpo.sites):
        env = _extend_left(env, s, w)
    return float(env[0, 0, 0].real) / mps_norm(sites) ** 2


def dmrg_ground_state(mpo: MPO, chi: int, sweeps: int,
                      seed: int = 0) -> DmrgState:
    if chi < 2:
        raise ValueError(f"bond dimension must be >= 2, got {chi}")
    if sweeps < 1:
        raise ValueError(f"need at least one sweep, got {sweeps}")
    n = mpo.n_sites
    sites = _init_mps(n, chi, seed)
    for k in range(n - 1, 0, -1):  # right-canonical start
        _shift_left(sites, k)
    sites[0] = sites[0] / np.linalg.norm(sites[0])

    lefts = [_env_zero()] + [None] * (n - 1)
    rights = [None] * (n - 1) + [_env_zero()]
    for k in range(n - 2, -1, -1):
        rights[k] = _extend_right(rights[k + 1], sites[k + 1], mpo.sites[k + 1])

    energy = np.inf
    energies = []
    residual = np.inf
    for _ in range(sweeps):
        for k in range(n - 1):  # sweep right, center ends at n-1
            energy, sites[k], residual = _solve_site(
                lefts[k], mpo.sites[k], rights[k], sites[k])
            _shift_right(sites, k)
            sites[k + 1] = sites[k + 1] / np.linalg.norm(sites[k + 1])
            lefts[k + 1] = _extend_left(lefts[k], sites[k], mpo.sites[k])
        for k in range(n - 1, 0, -1):  # sweep left, center ends at 0
            energy, sites[k], residual = _solve_site(
                lefts[k], mpo.sites[k], rights[k], sites[k])
            _shift_left(sites, k)
            sites[k - 1] = sites[k - 1] / np.linalg.norm(sites[k - 1])
            rights[k - 1] = _extend_right(rights[k], sites[k], mpo.sites[k])
        energy, sites[0], residual = _solve_site(
            lefts[0], mpo.sites[0], rights[0], sites[0])
        energies.append(float(energy))

    converged = (len(energies) >= 2
                 and abs(energies[-1] - energies[-2]) <= 1e-10)
    return DmrgState(mps=MPSChain([s.copy() for s in sites]),
                     energy=float(energy), energies=energies,
                     residual=residual, converged=converged)
