"""Tensor-network message passing on geometric graphs.

Two code paths on purpose:

* reference ops (`feature_map`, `chain_matrix`, `renormalize`, ...) are plain
  numpy, one node/edge at a time.  They are the readable contract and what
  the unit-test oracles compare against.
* `forward_tape` records the same computation batched over graphs and edges
  on an autodiff tape for training.  A parity test pins the two together.

Node embeddings are complex d-vectors carried as 2d reals (first d = real
part).  Spatial aggregation multiplies per-neighbor chain factors; in the
commuting mode all factors share one unitary, so the product reduces to an
elementwise product of diagonals and neighbor order cannot matter.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import tensor

EDGE_FEATURE_LEN = 10
INVARIANT_INPUTS = 5  # charge, speed, 3 frame-scalarized velocity components


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    chi: int = 8
    sigma: int = 4
    chi_t: int = 8
    layers: int = 4
    kernel_mode: str = "commuting"  # or "general"
    scalar_mode: str = "real"       # "real" sets conj(phi) := phi
    msg_width: int = 32
    msg_hidden: int = 64
    hyper_hidden: int = 64
    variant: str = "spatea"         # or "baseline" (mean-field aggregation)

    def __post_init__(self):
        for name in ("d", "chi", "sigma", "chi_t", "layers", "msg_width",
                     "msg_hidden", "hyper_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kernel_mode not in ("commuting", "general"):
            raise ValueError(f"unknown kernel_mode {self.kernel_mode!r}")
        if self.scalar_mode not in ("real", "complex"):
            raise ValueError(f"unknown scalar_mode {self.scalar_mode!r}")
        if self.variant not in ("spatea", "baseline"):
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def msg_in(self) -> int:
        return 3 + 4 * self.d + EDGE_FEATURE_LEN

    @property
    def hyper_out(self) -> int:
        per_sigma = self.chi if self.kernel_mode == "commuting" else self.chi * self.chi
        return 2 * self.sigma * per_sigma

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(config: ModelConfig, seed: int) -> dict:
    """Gaussian fan-in init; biases zero, layer-norm affine at identity."""
    rng = np.random.default_rng(seed)

    def w(shape, fan_in):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)

    d, chi, sig, chi_t = config.d, config.chi, config.sigma, config.chi_t
    mh, mw, hh = config.msg_hidden, config.msg_width, config.hyper_hidden
    p: dict[str, np.ndarray] = {}
    p["feature_map.w"] = w((2 * d, 2 * INVARIANT_INPUTS), 2 * INVARIANT_INPUTS)
    for l in range(config.layers):
        pre = f"layers.{l}."
        p[pre + "msg.w1"] = w((mh, config.msg_in), config.msg_in)
        p[pre + "msg.b1"] = np.zeros(mh)
        p[pre + "msg.w2"] = w((mh, mh), mh)
        p[pre + "msg.b2"] = np.zeros(mh)
        p[pre + "msg.w3"] = w((mw, mh), mh)
        p[pre + "msg.b3"] = np.zeros(mw)
        p[pre + "node.gamma"] = np.ones(2 * d)
        p[pre + "node.beta"] = np.zeros(2 * d)
        p[pre + "node.w"] = w((2 * d, 2 * d), 2 * d)
        p[pre + "pos.w"] = w((3, mw), mw)
        p[pre + "pos.b"] = np.zeros(3)
        if config.variant == "spatea":
            p[pre + "G_re"] = w((sig, d, d), d)
            p[pre + "G_im"] = w((sig, d, d), d)
            p[pre + "S_re"] = w((chi, chi, d, d), chi * chi * d)
            p[pre + "S_im"] = w((chi, chi, d, d), chi * chi * d)
            p[pre + "U_raw"] = rng.normal(0.0, 0.1, (2, chi, chi))
            p[pre + "hyper.w1"] = w((hh, EDGE_FEATURE_LEN), EDGE_FEATURE_LEN)
            p[pre + "hyper.b1"] = np.zeros(hh)
            p[pre + "hyper.w2"] = w((hh, hh), hh)
            p[pre + "hyper.b2"] = np.zeros(hh)
            p[pre + "hyper.w3"] = w((config.hyper_out, hh), hh)
            p[pre + "hyper.b3"] = np.zeros(config.hyper_out)
        else:
            p[pre + "proj.w"] = w((2 * d, mw), mw)
    if config.variant == "spatea":
        p["temporal.v0_w"] = w((2 * chi_t, 2 * d), 2 * d)
        for l in range(config.layers):
            p[f"temporal.phi{l}_re"] = w((chi_t, 2 * d, chi_t), 2 * d * chi_t)
            p[f"temporal.phi{l}_im"] = w((chi_t, 2 * d, chi_t), 2 * d * chi_t)
            p[f"temporal.b{l}_re"] = np.zeros(chi_t)
            p[f"temporal.b{l}_im"] = np.zeros(chi_t)
        p["head.w"] = w((3, 2 * chi_t), 2 * chi_t)
    else:
        p["head.w"] = w((3, 2 * d), 2 * d)
    p["head.b"] = np.zeros(3)
    return p


def count_params(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


def matched_baseline_config(config: ModelConfig) -> ModelConfig:
    """Baseline config whose parameter count best matches the given model.

    Only the message-MLP hidden width is scanned; everything the two variants
    share (front end, node update, position head) stays identical.
    """
    target = count_params(init_params(config, 0))
    best, best_diff = None, None
    for mh in range(8, 2049, 4):
        cand = ModelConfig(
            d=config.d, chi=config.chi, sigma=config.sigma, chi_t=config.chi_t,
            layers=config.layers, kernel_mode=config.kernel_mode,
            scalar_mode=config.scalar_mode, msg_width=config.msg_width,
            msg_hidden=mh, hyper_hidden=config.hyper_hidden, variant="baseline",
        )
        n = count_params(init_params(cand, 0))
        diff = abs(n - target)
        if best_diff is None or diff < best_diff:
            best, best_diff = cand, diff
    return best


# ---------------------------------------------------------------------------
# reference ops (single node / edge, plain numpy)
# ---------------------------------------------------------------------------


def _mlp3(x, w1, b1, w2, b2, w3, b3):
    h = np.tanh(w1 @ x + b1)
    h = np.tanh(w2 @ h + b2)
    return w3 @ h + b3


def feature_map(scalars: Sequence[float], w: np.ndarray) -> np.ndarray:
    """Lift invariant scalars to a complex embedding, returned as 2d reals.

    Each scalar s maps to (cos(pi*tanh(s)/2), sin(pi*tanh(s)/2)); the lifted
    vector (all cosines, then all sines) is linearly mixed by w.
    """
    s = np.asarray(scalars, dtype=np.float64)
    if s.shape != (INVARIANT_INPUTS,):
        raise ValueError(f"expected {INVARIANT_INPUTS} invariant scalars, got {s.shape}")
    ang = 0.5 * np.pi * np.tanh(s)
    lift = np.concatenate([np.cos(ang), np.sin(ang)])
    return w @ lift


def as_complex(h2d: np.ndarray) -> np.ndarray:
    d = h2d.shape[-1] // 2
    return h2d[..., :d] + 1j * h2d[..., d:]


def edge_message(s_ij, h_i, h_j, e_ij, lp: dict) -> np.ndarray:
    x = np.concatenate([s_ij, h_i, h_j, e_ij])
    return _mlp3(x, lp["msg.w1"], lp["msg.b1"], lp["msg.w2"], lp["msg.b2"],
                 lp["msg.w3"], lp["msg.b3"])


def hypernet_alpha(e_ij, lp: dict, config: ModelConfig) -> np.ndarray:
    """Edge-conditioned kernel coefficients: (sigma, chi) diagonal entries in
    commuting mode, full (sigma, chi, chi) matrices in general mode."""
    out = _mlp3(np.asarray(e_ij, dtype=np.float64), lp["hyper.w1"], lp["hyper.b1"],
                lp["hyper.w2"], lp["hyper.b2"], lp["hyper.w3"], lp["hyper.b3"])
    half = out.size // 2
    z = out[:half] + 1j * out[half:]
    if config.kernel_mode == "commuting":
        return z.reshape(config.sigma, config.chi)
    return z.reshape(config.sigma, config.chi, config.chi)


def _c_factor(phi: np.ndarray, g_re, g_im, scalar_mode: str) -> np.ndarray:
    g = g_re + 1j * g_im
    phibar = phi if scalar_mode == "real" else phi.conj()
    return np.einsum("a,sab,b->s", phi, g, phibar)


def chain_matrix(phi_j: np.ndarray, e_ij, lp: dict, config: ModelConfig) -> np.ndarray:
    """Per-neighbor chain factor: diagonal t (chi,) or full T (chi, chi)."""
    c = _c_factor(phi_j, lp["G_re"], lp["G_im"], config.scalar_mode)
    alpha = hypernet_alpha(e_ij, lp, config)
    if config.kernel_mode == "commuting":
        t = np.einsum("s,sk->k", c, alpha)
        return t / max(np.linalg.norm(t), 1e-8)
    t = np.einsum("s,smn->mn", c, alpha)
    return t / max(np.linalg.norm(t), 1e-8)  # Frobenius norm


def renormalize(chains: Sequence[np.ndarray], unitary: np.ndarray,
                config: ModelConfig) -> np.ndarray:
    """Product of chain factors over an (ordered) neighbor list -> R: chi x chi.

    Commuting mode multiplies diagonals elementwise (order-free by
    construction); general mode takes the ordered matrix product.  Empty
    neighborhoods give the identity.
    """
    chi = config.chi
    if config.kernel_mode == "commuting":
        p = np.ones(chi, dtype=np.complex128)
        for t in chains:
            p = p * t
        return (unitary * p) @ unitary.conj().T
    r = np.eye(chi, dtype=np.complex128)
    for t in chains:
        r = r @ t
    return r


def spatial_update(phi_i: np.ndarray, r: np.ndarray, s_re, s_im) -> np.ndarray:
    """Effective operator applied to the node embedding: x_a = H_ab phi_b."""
    s = s_re + 1j * s_im
    h_eff = np.einsum("mn,nmab->ab", r, s)
    return h_eff @ phi_i


def node_update(h_new: np.ndarray, h_prev: np.ndarray, lp: dict) -> np.ndarray:
    mu = h_new.mean()
    var = ((h_new - mu) ** 2).mean()
    ln = (h_new - mu) / np.sqrt(var + 1e-5) * lp["node.gamma"] + lp["node.beta"]
    return ln + lp["node.w"] @ h_prev


def temporal_aggregate(v0: np.ndarray, history: Sequence[np.ndarray],
                       params: dict) -> np.ndarray:
    """MPO-style recurrence over layer snapshots.

    v^{l+1} = v^l + tanh(v^l M(l) / Z(l) + b^l) with M(l) = sum_s x^l_s phi^l
    and Z(l) = max(||M(l)||_F, 1e-8); tanh acts separately on the real and
    imaginary parts.
    """
    v = np.asarray(v0, dtype=np.complex128)
    for l, x in enumerate(history):
        phi = params[f"temporal.phi{l}_re"] + 1j * params[f"temporal.phi{l}_im"]
        b = params[f"temporal.b{l}_re"] + 1j * params[f"temporal.b{l}_im"]
        m = np.einsum("s,asb->ab", np.asarray(x, dtype=np.float64), phi)
        z = max(np.linalg.norm(m), 1e-8)
        u = v @ m / z + b
        v = v + np.tanh(u.real) + 1j * np.tanh(u.imag)
    return v


def position_update(x_i: np.ndarray, messages: Sequence[np.ndarray],
                    frames: Sequence, lp: dict) -> np.ndarray:
    """Shift a position by the valid-edge mean of vectorized message heads.

    `frames` holds geometry.Frame or None for degenerate edges; degenerate
    edges are skipped from the mean.
    """
    total = np.zeros(3)
    count = 0
    for m, f in zip(messages, frames):
        if f is None:
            continue
        coeff = lp["pos.w"] @ m + lp["pos.b"]
        total += geo.vectorize(coeff, f)
        count += 1
    return x_i + (total / count if count else total)


# ---------------------------------------------------------------------------
# reference forward (slow, per-node; the parity oracle for the tape path)
# ---------------------------------------------------------------------------


def _layer_params(params: dict, l: int) -> dict:
    pre = f"layers.{l}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def _safe_frame(build, *args):
    try:
        return build(*args)
    except geo.DegenerateFrameError:
        return None


def _frame_rows(f) -> np.ndarray:
    return f.rows if f is not None else np.zeros((3, 3))


def reference_forward(graph: geo.GeometricGraph, params: dict,
                      config: ModelConfig, internals: dict = None) -> np.ndarray:
    """Plain-numpy forward for one graph; mirrors forward_tape exactly.

    When `internals` is a dict it is filled with the materialized spatial
    chain factors and renormalized matrices, keyed "factors"/"R", each a
    per-layer list of per-node entries. Used by the compression exporter.
    """
    n = graph.n
    com = graph.positions.mean(axis=0)
    x = graph.positions - com
    vel, chg = graph.velocities, graph.charges
    edges = [(i, j) for i in range(n) for j in range(n) if j != i]

    def node_frames(xs):
        out = []
        for i in range(n):
            xbar = (xs.sum(axis=0) - xs[i]) / (n - 1)
            out.append(_safe_frame(geo.edge_frame, xs[i], xbar))
        return out

    nf = node_frames(x)
    h = np.stack([
        feature_map(
            [chg[i], np.linalg.norm(vel[i]),
             *(geo.scalarize(vel[i], nf[i]) if nf[i] is not None else np.zeros(3))],
            params["feature_map.w"])
        for i in range(n)
    ])
    if config.variant == "spatea":
        v0 = as_complex(h @ params["temporal.v0_w"].T)
    history = []
    if internals is not None:
        internals["factors"] = []
        internals["R"] = []

    for l in range(config.layers):
        lp = _layer_params(params, l)
        nf = node_frames(x)
        ef = {e: _safe_frame(geo.edge_frame, x[e[0]], x[e[1]]) for e in edges}
        feat, sij, msgs = {}, {}, {}
        for (i, j) in edges:
            d = np.linalg.norm(x[i] - x[j])
            if nf[i] is not None and ef[(i, j)] is not None:
                o = geo.frame_transition(nf[i], ef[(i, j)])
            else:
                o = np.zeros((3, 3))
            feat[(i, j)] = np.concatenate([[d], o.reshape(-1)])
            sij[(i, j)] = (geo.scalarize(x[i] - x[j], nf[i])
                           if nf[i] is not None else np.zeros(3))
            msgs[(i, j)] = edge_message(sij[(i, j)], h[i], h[j], feat[(i, j)], lp)
        h_next = np.empty_like(h)
        if config.variant == "spatea":
            u = tensor.materialize_unitary(
                tensor.UnitaryParam(dim=config.chi, raw=lp["U_raw"]))
            if internals is not None:
                internals["factors"].append([])
                internals["R"].append([])
            for i in range(n):
                if config.kernel_mode == "general":
                    order = geo.order_neighbors(i, x).order
                else:
                    order = [j for j in range(n) if j != i]
                chains = [chain_matrix(as_complex(h[j]), feat[(i, j)], lp, config)
                          for j in order]
                r = renormalize(chains, u, config)
                if internals is not None:
                    mats = [(u * t) @ u.conj().T if t.ndim == 1 else t
                            for t in chains]
                    internals["factors"][-1].append(mats)
                    internals["R"][-1].append(r)
                x_emb = spatial_update(as_complex(h[i]), r, lp["S_re"], lp["S_im"])
                h_new = np.concatenate([x_emb.real, x_emb.imag])
                h_next[i] = node_update(h_new, h[i], lp)
        else:
            for i in range(n):
                agg = np.mean([msgs[(i, j)] for j in range(n) if j != i], axis=0)
                h_next[i] = node_update(lp["proj.w"] @ agg, h[i], lp)
        x_next = np.empty_like(x)
        for i in range(n):
            neigh = [j for j in range(n) if j != i]
            x_next[i] = position_update(
                x[i], [msgs[(i, j)] for j in neigh],
                [ef[(i, j)] for j in neigh], lp)
        h, x = h_next, x_next
        history.append(h.copy())

    if config.variant == "spatea":
        rows = []
        for i in range(n):
            vl = temporal_aggregate(v0[i], [hh[i] for hh in history], params)
            rows.append(np.concatenate([vl.real, vl.imag]))
        feats = np.stack(rows)
    else:
        feats = h
    nf = node_frames(x)
    out = np.empty((n, 3))
    for i in range(n):
        coeff = params["head.w"] @ feats[i] + params["head.b"]
        disp = geo.vectorize(coeff, nf[i]) if nf[i] is not None else np.zeros(3)
        out[i] = x[i] + disp + com
    return out


# ---------------------------------------------------------------------------
# tape forward (batched; the trainable path)
# ---------------------------------------------------------------------------


def _edge_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    src = np.array([i for i in range(n) for j in range(n) if j != i], dtype=np.intp)
    dst = np.array([j for i in range(n) for j in range(n) if j != i], dtype=np.intp)
    return src, dst


def _rows_stack(tape, e1, e2, e3):
    b, k, _ = e1.shape
    return ad.concat([ad.reshape(e1, (b, k, 1, 3)), ad.reshape(e2, (b, k, 1, 3)),
                      ad.reshape(e3, (b, k, 1, 3))], axis=2)


def _build_frames(tape, u, w):
    """Batched frame rows (.., 3, 3) plus a validity mask; degenerate rows zeroed."""
    diff = ad.sub(u, w)
    dn = ad.l2norm(diff, axes=(-1,), keepdims=True)
    cr = ad.cross(u, w)
    cn = ad.l2norm(cr, axes=(-1,), keepdims=True)
    ok = ((dn.value >= geo.FRAME_EPS) & (cn.value >= geo.FRAME_EPS))[..., 0]
    mask = tape.constant(ok[..., None].astype(np.float64))
    e1 = ad.mul(ad.div(diff, ad.max_const(dn, geo.FRAME_EPS)), mask)
    e2 = ad.mul(ad.div(cr, ad.max_const(cn, geo.FRAME_EPS)), mask)
    e3 = ad.cross(e1, e2)
    return _rows_stack(tape, e1, e2, e3), ok, dn


def _scalarize_rows(rows, v):
    b, k = v.shape[0], v.shape[1]
    return ad.reshape(ad.matmul(rows, ad.reshape(v, (b, k, 3, 1))), (b, k, 3))


def _vectorize_rows(rows, coeff):
    b, k = coeff.shape[0], coeff.shape[1]
    return ad.reshape(ad.matmul(ad.reshape(coeff, (b, k, 1, 3)), rows), (b, k, 3))


def _mlp3_tape(x, lp, pre):
    h = ad.tanh(ad.add(ad.tensordot(x, lp[pre + ".w1"], ([-1], [1])), lp[pre + ".b1"]))
    h = ad.tanh(ad.add(ad.tensordot(h, lp[pre + ".w2"], ([-1], [1])), lp[pre + ".b2"]))
    return ad.add(ad.tensordot(h, lp[pre + ".w3"], ([-1], [1])), lp[pre + ".b3"])


def _cvar_split(h, d):
    return ad.CVar(h[..., :d], h[..., d:])


def _layer_norm_residual(h_new, h_prev, lp):
    ln = ad.layer_norm(h_new, lp["node.gamma"], lp["node.beta"])
    return ad.add(ln, ad.tensordot(h_prev, lp["node.w"], ([-1], [1])))


def _general_order_indices(x_val: np.ndarray, n: int) -> np.ndarray:
    """Per-(batch, node) canonical neighbor order, as indices into the
    (n-1)-long neighbor slot axis."""
    b = x_val.shape[0]
    out = np.empty((b, n, n - 1), dtype=np.intp)
    for bi in range(b):
        for i in range(n):
            order = geo.order_neighbors(i, x_val[bi]).order
            slot = {j: k for k, j in enumerate(j for j in range(n) if j != i)}
            out[bi, i] = [slot[j] for j in order]
    return out


def forward_tape(tape: ad.Tape, pv: dict, positions, velocities, charges,
                 config: ModelConfig) -> ad.Var:
    """Batched forward; returns predicted positions (B, N, 3) as a Var.

    positions/velocities: (B, N, 3) arrays or Vars; charges: (B, N).
    """
    x = tape.wrap(positions)
    vel = tape.wrap(velocities)
    chg = tape.wrap(charges)
    bsz, n = x.shape[0], x.shape[1]
    src, dst = _edge_index(n)
    ne = n - 1
    d = config.d

    com = ad.mean_(x, axes=(1,), keepdims=True)
    x = ad.sub(x, com)

    def node_frames(xs):
        total = ad.sum_(xs, axes=(1,), keepdims=True)
        xbar = ad.mul(ad.sub(total, xs), 1.0 / (n - 1))
        return _build_frames(tape, xs, xbar)

    def geometry_pass(xs):
        nrows, nok, _ = node_frames(xs)
        xi = ad.take(xs, src, axis=1)
        xj = ad.take(xs, dst, axis=1)
        erows, eok, dn = _build_frames(tape, xi, xj)
        dist = ad.l2norm(ad.sub(xi, xj), axes=(-1,), keepdims=True)
        nrows_e = ad.take(nrows, src, axis=1)
        trans = ad.matmul(nrows_e, ad.permute(erows, (0, 1, 3, 2)))
        efeat = ad.concat([dist, ad.reshape(trans, (bsz, n * ne, 9))], axis=-1)
        sij = _scalarize_rows(nrows_e, ad.sub(xi, xj))
        return nrows, nok, erows, eok, efeat, sij

    # initial invariants: charge, speed, velocity scalarized in the node frame
    nrows, _, _ = node_frames(x)
    speed = ad.l2norm(vel, axes=(-1,), keepdims=True)
    sv = _scalarize_rows(nrows, vel)
    scalars = ad.concat([ad.reshape(chg, (bsz, n, 1)), speed, sv], axis=-1)
    ang = ad.mul(ad.tanh(scalars), 0.5 * np.pi)
    lift = ad.concat([ad.cos(ang), ad.sin(ang)], axis=-1)
    h = ad.tensordot(lift, pv["feature_map.w"], ([-1], [1]))

    if config.variant == "spatea":
        v0 = ad.tensordot(h, pv["temporal.v0_w"], ([-1], [1]))
        v = _cvar_split(v0, config.chi_t)
    history = []

    for l in range(config.layers):
        lp = {k[len(f"layers.{l}."):]: v2 for k, v2 in pv.items()
              if k.startswith(f"layers.{l}.")}
        nrows, nok, erows, eok, efeat, sij = geometry_pass(x)
        hi = ad.take(h, src, axis=1)
        hj = ad.take(h, dst, axis=1)
        m_in = ad.concat([sij, hi, hj, efeat], axis=-1)
        msg = _mlp3_tape(m_in, lp, "msg")

        if config.variant == "spatea":
            phi_j = _cvar_split(hj, d)
            phibar = phi_j if config.scalar_mode == "real" else ad.cconj(phi_j)
            g = ad.CVar(tape.wrap(lp["G_re"]), tape.wrap(lp["G_im"]))
            w_phi = ad.ctensordot(phi_j, g, ([-1], [1]))      # (B,E,sigma,d)
            prod = ad.cmul(w_phi, ad.CVar(phibar.re[:, :, None, :],
                                          phibar.im[:, :, None, :]))
            c = ad.CVar(ad.sum_(prod.re, axes=(-1,)), ad.sum_(prod.im, axes=(-1,)))
            hyper = _mlp3_tape(efeat, lp, "hyper")
            half = config.hyper_out // 2
            if config.kernel_mode == "commuting":
                shp = (bsz, n * ne, config.sigma, config.chi)
                alpha = ad.CVar(ad.reshape(hyper[..., :half], shp),
                                ad.reshape(hyper[..., half:], shp))
                tk = ad.cmul(ad.CVar(c.re[..., None], c.im[..., None]), alpha)
                t = ad.CVar(ad.sum_(tk.re, axes=(2,)), ad.sum_(tk.im, axes=(2,)))
                z = ad.max_const(ad.cnorm(t, axes=(-1,), keepdims=True), 1e-8)
                t = ad.CVar(ad.div(t.re, z), ad.div(t.im, z))
                tre = ad.reshape(t.re, (bsz, n, ne, config.chi))
                tim = ad.reshape(t.im, (bsz, n, ne, config.chi))
                p = ad.CVar(tre[:, :, 0, :], tim[:, :, 0, :])
                for k in range(1, ne):
                    p = ad.cmul(p, ad.CVar(tre[:, :, k, :], tim[:, :, k, :]))
                u = ad.cayley_unitary(lp["U_raw"][0], lp["U_raw"][1])
                s = ad.CVar(tape.wrap(lp["S_re"]), tape.wrap(lp["S_im"]))
                # W[k,a,b] = sum_mn U_mk conj(U)_nk S[n,m,a,b]; then H = sum_k p_k W_k
                us = ad.ctensordot(ad.cconj(u), s, ([0], [0]))   # (k, m, a, b)
                wk_full = ad.ctensordot(u, us, ([0], [1]))       # (k', k, a, b)
                wk = ad.CVar(_diag_k(wk_full.re), _diag_k(wk_full.im))
                h_eff = ad.ctensordot(p, wk, ([2], [0]))         # (B,N,d,d)
            else:
                shp = (bsz, n * ne, config.sigma, config.chi, config.chi)
                alpha = ad.CVar(ad.reshape(hyper[..., :half], shp),
                                ad.reshape(hyper[..., half:], shp))
                tk = ad.cmul(ad.CVar(c.re[..., None, None], c.im[..., None, None]),
                             alpha)
                tmat = ad.CVar(ad.sum_(tk.re, axes=(2,)), ad.sum_(tk.im, axes=(2,)))
                z = ad.max_const(
                    ad.cnorm(tmat, axes=(-2, -1), keepdims=True), 1e-8)
                tmat = ad.CVar(ad.div(tmat.re, z), ad.div(tmat.im, z))
                perm = _general_order_indices(x.value, n)
                base = (np.arange(bsz * n, dtype=np.intp) * ne)[:, None]
                flat_idx = (perm.reshape(bsz * n, ne) + base).reshape(-1)
                c2 = config.chi * config.chi
                tre = ad.take(ad.reshape(tmat.re, (bsz * n * ne, c2)), flat_idx, axis=0)
                tim = ad.take(ad.reshape(tmat.im, (bsz * n * ne, c2)), flat_idx, axis=0)
                shp4 = (bsz, n, ne, config.chi, config.chi)
                tre, tim = ad.reshape(tre, shp4), ad.reshape(tim, shp4)
                r = ad.CVar(tre[:, :, 0], tim[:, :, 0])
                for k in range(1, ne):
                    r = ad.cmatmul(r, ad.CVar(tre[:, :, k], tim[:, :, k]))
                s = ad.CVar(tape.wrap(lp["S_re"]), tape.wrap(lp["S_im"]))
                h_eff = ad.ctensordot(r, s, ([2, 3], [1, 0]))    # (B,N,d,d)
            phi_i = _cvar_split(h, d)
            x_emb = _cmatvec(h_eff, phi_i)
            h_new = ad.concat([x_emb.re, x_emb.im], axis=-1)
        else:
            agg = ad.mean_(ad.reshape(msg, (bsz, n, ne, config.msg_width)), axes=(2,))
            h_new = ad.tensordot(agg, lp["proj.w"], ([-1], [1]))

        h = _layer_norm_residual(h_new, h, lp)

        coeff = ad.add(ad.tensordot(msg, lp["pos.w"], ([-1], [1])), lp["pos.b"])
        disp = _vectorize_rows(erows, coeff)                     # masked edges give 0
        disp = ad.reshape(disp, (bsz, n, ne, 3))
        counts = np.maximum(eok.reshape(bsz, n, ne).sum(axis=2), 1)[..., None]
        x = ad.add(x, ad.div(ad.sum_(disp, axes=(2,)), tape.constant(counts.astype(float))))
        history.append(h)

    if config.variant == "spatea":
        for l in range(config.layers):
            phi = ad.CVar(tape.wrap(pv[f"temporal.phi{l}_re"]),
                          tape.wrap(pv[f"temporal.phi{l}_im"]))
            m = ad.CVar(ad.tensordot(history[l], phi.re, ([2], [1])),
                        ad.tensordot(history[l], phi.im, ([2], [1])))
            z = ad.max_const(ad.cnorm(m, axes=(-2, -1), keepdims=True), 1e-8)
            m = ad.CVar(ad.div(m.re, z), ad.div(m.im, z))
            v4 = ad.CVar(ad.reshape(v.re, (bsz, n, 1, config.chi_t)),
                         ad.reshape(v.im, (bsz, n, 1, config.chi_t)))
            vm = ad.cmatmul(v4, m)
            u_re = ad.add(ad.reshape(vm.re, (bsz, n, config.chi_t)),
                          pv[f"temporal.b{l}_re"])
            u_im = ad.add(ad.reshape(vm.im, (bsz, n, config.chi_t)),
                          pv[f"temporal.b{l}_im"])
            v = ad.CVar(ad.add(v.re, ad.tanh(u_re)), ad.add(v.im, ad.tanh(u_im)))
        feats = ad.concat([v.re, v.im], axis=-1)
    else:
        feats = h

    nrows, _, _ = node_frames(x)
    coeff = ad.add(ad.tensordot(feats, pv["head.w"], ([-1], [1])), pv["head.b"])
    disp = _vectorize_rows(nrows, coeff)
    return ad.add(ad.add(x, disp), com)


def _diag_k(w4):
    """(k, k', a, b) -> (k, a, b) taking the k == k' diagonal."""
    k = w4.shape[0]
    idx = np.arange(k)
    return w4[idx, idx]


def _cmatvec(h_eff: ad.CVar, phi: ad.CVar) -> ad.CVar:
    b, n, d = phi.re.shape
    col = ad.CVar(ad.reshape(phi.re, (b, n, d, 1)), ad.reshape(phi.im, (b, n, d, 1)))
    out = ad.cmatmul(h_eff, col)
    return ad.CVar(ad.reshape(out.re, (b, n, d)), ad.reshape(out.im, (b, n, d)))


def model_forward(graph: geo.GeometricGraph, params: dict,
                  config: ModelConfig) -> np.ndarray:
    """Single-graph prediction (no gradients recorded)."""
    tape = ad.Tape()
    pv = {k: tape.constant(v) for k, v in params.items()}
    out = forward_tape(tape, pv, graph.positions[None], graph.velocities[None],
                       graph.charges[None], config)
    return out.value[0]


def predict_batch(params: dict, config: ModelConfig, positions, velocities,
                  charges) -> np.ndarray:
    tape = ad.Tape()
    pv = {k: tape.constant(v) for k, v in params.items()}
    return forward_tape(tape, pv, positions, velocities, charges, config).value


def mse_loss(tape: ad.Tape, pred: ad.Var, target: np.ndarray) -> ad.Var:
    diff = ad.sub(pred, tape.constant(target))
    return ad.div(ad.sum_(ad.mul(diff, diff)), float(np.asarray(target).size))
