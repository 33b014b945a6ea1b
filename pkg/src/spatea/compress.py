"""Canonical form and truncation of matrix-product chains via local SVD.

A chain is a list of 3-index site tensors (left bond, physical, right bond)
with boundary bonds of size 1. Canonicalization sweeps SVDs through the
sites so everything left (right) of a chosen center is a left (right)
isometry; truncation then drops small singular values bond by bond and
reports the rounding bound sqrt(sum of discarded s^2), which upper-bounds
the dense contraction error.

All transformations are pure and post-training only; nothing here is
differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import model as mdl
from . import tensor

ISO_TOL = 1e-10


@dataclass
class MPSChain:
    sites: list = field(default_factory=list)

    def __post_init__(self):
        if not self.sites:
            raise ValueError("chain needs at least one site")
        self.sites = [np.asarray(s) for s in self.sites]
        for k, s in enumerate(self.sites):
            if s.ndim != 3:
                raise ValueError(f"site {k} must be rank 3, got shape {s.shape}")
        if self.sites[0].shape[0] != 1 or self.sites[-1].shape[2] != 1:
            raise ValueError("boundary bonds must have size 1")
        for k in range(len(self.sites) - 1):
            if self.sites[k].shape[2] != self.sites[k + 1].shape[0]:
                raise ValueError(
                    f"bond mismatch between sites {k} and {k + 1}: "
                    f"{self.sites[k].shape[2]} vs {self.sites[k + 1].shape[0]}")

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def bond_dims(self) -> list:
        # interior bonds only
        return [s.shape[2] for s in self.sites[:-1]]

    @property
    def physical_dims(self) -> list:
        return [s.shape[1] for s in self.sites]

    def copy(self) -> "MPSChain":
        return MPSChain([s.copy() for s in self.sites])

    def to_dense(self) -> np.ndarray:
        """Contract all bonds; result has one axis per physical index."""
        acc = self.sites[0][0]  # (p0, r0)
        for s in self.sites[1:]:
            acc = np.tensordot(acc, s, axes=([-1], [0]))
        return acc[..., 0]


def from_dense(dense: np.ndarray, max_bond: int = None) -> MPSChain:
    """Tensor-train factorization of a dense array, one SVD per bond."""
    dims = dense.shape
    sites = []
    m = dense.reshape(dims[0], -1)
    left = 1
    for k in range(len(dims) - 1):
        res = tensor.svd(m.reshape(left * dims[k], -1))
        keep = len(res.s)
        if max_bond is not None:
            keep = min(keep, max_bond)
        sites.append(res.u[:, :keep].reshape(left, dims[k], keep))
        m = res.s[:keep, None] * res.v[:keep]
        left = keep
    sites.append(m.reshape(left, dims[-1], 1))
    return MPSChain(sites)


def _push_right(sites, k):
    """Left-orthogonalize site k, absorbing the remainder into site k+1."""
    l, p, r = sites[k].shape
    res = tensor.svd(sites[k].reshape(l * p, r))
    rank = len(res.s)
    sites[k] = res.u.reshape(l, p, rank)
    carry = res.s[:, None] * res.v
    sites[k + 1] = np.tensordot(carry, sites[k + 1], axes=([1], [0]))


def _push_left(sites, k):
    """Right-orthogonalize site k, absorbing the remainder into site k-1."""
    l, p, r = sites[k].shape
    res = tensor.svd(sites[k].reshape(l, p * r))
    rank = len(res.s)
    sites[k] = res.v.reshape(rank, p, r)
    carry = res.u * res.s
    sites[k - 1] = np.tensordot(sites[k - 1], carry, axes=([2], [0]))


def canonicalize(chain: MPSChain, center: int) -> MPSChain:
    """Sweep SVDs so sites < center are left isometries and sites > center
    are right isometries; the dense contraction is unchanged."""
    if not 0 <= center < chain.n_sites:
        raise ValueError(f"center {center} out of range for {chain.n_sites} sites")
    sites = [s.copy() for s in chain.sites]
    for k in range(center):
        _push_right(sites, k)
    for k in range(chain.n_sites - 1, center, -1):
        _push_left(sites, k)
    return MPSChain(sites)


def truncate(chain: MPSChain, max_bond: int = None,
             threshold: float = None) -> tuple:
    """Truncate every bond, returning (new chain, error bound).

    The bound is sqrt(sum over bonds of sum of discarded singular values
    squared); the dense contraction error never exceeds it.
    """
    if max_bond is None and threshold is None:
        raise ValueError("need max_bond or threshold")
    if max_bond is not None and max_bond < 1:
        raise ValueError(f"max_bond must be >= 1, got {max_bond}")
    no_bond_cut = max_bond is None or all(b <= max_bond for b in chain.bond_dims)
    if no_bond_cut and (threshold is None or threshold <= 0.0):
        return chain.copy(), 0.0

    # left-canonicalize, then sweep back truncating each bond with the
    # rest of the chain in mixed-canonical gauge so local errors add in
    # quadrature
    sites = [s.copy() for s in canonicalize(chain, chain.n_sites - 1).sites]
    discarded_sq = 0.0
    for k in range(chain.n_sites - 1, 0, -1):
        l, p, r = sites[k].shape
        res = tensor.svd(sites[k].reshape(l, p * r))
        keep = len(res.s)
        if threshold is not None:
            keep = int(np.sum(res.s >= threshold))
        if max_bond is not None:
            keep = min(keep, max_bond)
        keep = max(keep, 1)
        discarded_sq += float(np.sum(res.s[keep:] ** 2))
        sites[k] = res.v[:keep].reshape(keep, p, r)
        carry = res.u[:, :keep] * res.s[:keep]
        sites[k - 1] = np.tensordot(sites[k - 1], carry, axes=([2], [0]))
    return MPSChain(sites), float(np.sqrt(discarded_sq))


def kernel_chain_export(factors) -> MPSChain:
    """Lay per-neighbor chain factor matrices out as an MPSChain.

    The row index of the first factor and the column index of the last
    become the physical legs (merged for a single factor); interior factors
    ride on the bonds with a trivial physical leg. Contracting the chain
    reproduces the ordered factor product.
    """
    factors = [np.asarray(f) for f in factors]
    if not factors:
        raise ValueError("need at least one factor")
    chi = factors[0].shape[0]
    for f in factors:
        if f.shape != (chi, chi):
            raise ValueError("factors must be square matrices of equal size")
    if len(factors) == 1:
        return MPSChain([factors[0].reshape(1, chi * chi, 1)])
    sites = [factors[0].reshape(1, chi, chi)]
    sites += [f.reshape(f.shape[0], 1, f.shape[1]) for f in factors[1:-1]]
    sites.append(factors[-1].reshape(chi, chi, 1))
    return MPSChain(sites)


def chain_to_matrix(chain: MPSChain) -> np.ndarray:
    """Contract an exported kernel chain back to its renormalized matrix."""
    dense = chain.to_dense()
    if chain.n_sites == 1:
        chi = int(round(np.sqrt(dense.size)))
        return dense.reshape(chi, chi)
    if any(d != 1 for d in dense.shape[1:-1]):
        raise ValueError("not an exported kernel chain: interior physical "
                         f"dims {dense.shape[1:-1]} != 1")
    return dense.reshape(dense.shape[0], dense.shape[-1])


def export_model_chains(graph: geo.GeometricGraph, params: dict,
                        config: mdl.ModelConfig) -> list:
    """Run one forward pass and export every (layer, node) spatial chain.

    Returns a list of records {"layer", "node", "chain", "R"} where R is the
    renormalized matrix the model actually used for that node.
    """
    if config.variant != "spatea":
        raise ValueError("baseline variant has no spatial chains")
    internals = {}
    mdl.reference_forward(graph, params, config, internals=internals)
    out = []
    for l, (layer_f, layer_r) in enumerate(zip(internals["factors"],
                                               internals["R"])):
        for i, (mats, r) in enumerate(zip(layer_f, layer_r)):
            if not mats:
                continue
            out.append({"layer": l, "node": i,
                        "chain": kernel_chain_export(mats), "R": r})
    return out


def truncation_report(record: dict, bond_values) -> list:
    """Measure truncation deviation of one exported chain at each bond cap.

    "deviation" is Frobenius distance to the exact recontraction of the
    untruncated chain (the quantity the rounding bound governs);
    "r_deviation" is distance to the renormalized matrix the model computed,
    which differs from the recontraction only by float noise.
    """
    chain, r_model = record["chain"], record["R"]
    exact = chain_to_matrix(chain)
    rows = []
    for cap in bond_values:
        trunc, bound = truncate(chain, max_bond=cap)
        approx = chain_to_matrix(trunc)
        rows.append({"max_bond": int(cap), "bound": float(bound),
                     "deviation": float(np.linalg.norm(approx - exact)),
                     "r_deviation": float(np.linalg.norm(approx - r_model))})
    return rows
