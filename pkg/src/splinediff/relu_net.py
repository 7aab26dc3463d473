"""Explicit sparse ReLU networks with size ledgers and error certificates.

A network is a chain of affine layers with ReLU between them (affine output):

    f(x) = A_L relu( ... A_2 relu(A_1 x + b_1) + b_2 ... ) + b_L.

The ledger (depth L, widths W, nonzero-parameter count S, max parameter
magnitude B) is always recomputed from the stored matrices, never trusted
from construction-time arithmetic.  Combinators (composition, parallel
stacking, summing) realize their operands exactly; composition routes the
interface value through a (u_+, u_-) split so the ReLU boundary is inert.

The constructive approximators (multiplication, reciprocal, root,
exponential, noise-magnitude nets, and the one-axis diffused spline basis)
follow the same recipe: clip the argument, expand locally in panels with a
truncated series, evaluate by Horner chains of unit-square multipliers, and
telescope panel increments so saturated panels contribute their exact
endpoint value.  Every builder emits an ErrorCertificate from a grid scan;
construction constants are bumped until the certificate passes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ReluNetwork",
    "ErrorCertificate",
    "identity_net",
    "concat",
    "parallel",
    "build_clip",
    "build_switch",
    "build_mult",
    "build_inv",
    "build_root",
    "build_exp",
    "build_m_sigma_nets",
    "build_diffused_basis_net_1d",
    "certify",
]


def _csr(a) -> sp.csr_matrix:
    m = sp.csr_matrix(a)
    m.eliminate_zeros()
    return m


@dataclass(frozen=True)
class ErrorCertificate:
    target_eps: float
    domain: tuple
    grid_points: int
    measured_sup_error: float

    @property
    def valid(self) -> bool:
        return self.measured_sup_error <= self.target_eps


@dataclass
class ReluNetwork:
    """Sparse affine layers; immutable after construction by convention."""

    layers: list  # [(csr_matrix (out x in), bias ndarray (out,)), ...]
    certificate: ErrorCertificate | None = None
    meta: dict = field(default_factory=dict)

    # -- ledger (always recomputed) -----------------------------------------

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *(a.shape[0] for a, _ in self.layers))

    @property
    def sparsity(self) -> int:
        total = 0
        for a, b in self.layers:
            total += a.nnz + int(np.count_nonzero(b))
        return total

    @property
    def max_param(self) -> float:
        worst = 0.0
        for a, b in self.layers:
            if a.nnz:
                worst = max(worst, float(np.max(np.abs(a.data))))
            if b.size:
                worst = max(worst, float(np.max(np.abs(b))))
        return worst

    def ledger(self) -> dict:
        return {"L": self.depth, "W": self.widths, "S": self.sparsity,
                "B": self.max_param}

    # -- evaluation ----------------------------------------------------------

    def __call__(self, x) -> np.ndarray:
        """Evaluate on points of shape (n, input_dim) (or (input_dim,))."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        if pts.shape[1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {pts.shape[1]}")
        out = np.empty((pts.shape[0], self.output_dim))
        for lo in range(0, pts.shape[0], 4096):
            chunk = pts[lo : lo + 4096]
            h = chunk.T
            a, b = self.layers[0]
            h = a @ h + b[:, None]
            for a, b in self.layers[1:]:
                np.maximum(h, 0.0, out=h)
                h = a @ h + b[:, None]
            out[lo : lo + 4096] = h.T
        return out

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for a, b in self.layers:
            coo = a.tocoo()
            layers.append({
                "shape": list(a.shape),
                "row": coo.row.tolist(),
                "col": coo.col.tolist(),
                "data": coo.data.tolist(),
                "bias": b.tolist(),
            })
        cert = None
        if self.certificate is not None:
            cert = {
                "target_eps": self.certificate.target_eps,
                "domain": self.certificate.domain,
                "grid_points": self.certificate.grid_points,
                "measured_sup_error": self.certificate.measured_sup_error,
            }
        return {"layers": layers, "certificate": cert, "ledger": self.ledger()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "ReluNetwork":
        layers = []
        for rec in d["layers"]:
            a = sp.csr_matrix(
                (rec["data"], (rec["row"], rec["col"])), shape=tuple(rec["shape"])
            )
            layers.append((a, np.asarray(rec["bias"], dtype=float)))
        cert = None
        if d.get("certificate"):
            c = d["certificate"]
            cert = ErrorCertificate(c["target_eps"], tuple(map(tuple, c["domain"]))
                                    if c["domain"] else (), c["grid_points"],
                                    c["measured_sup_error"])
        return ReluNetwork(layers=layers, certificate=cert)

    @staticmethod
    def from_json(s: str) -> "ReluNetwork":
        return ReluNetwork.from_dict(json.loads(s))


# -- elementary nets and combinators -------------------------------------------


def affine_net(mat, bias=None) -> ReluNetwork:
    """A single affine layer as a depth-1 network."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    b = np.zeros(mat.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    return ReluNetwork(layers=[(_csr(mat), b)])


def identity_net(d: int, depth: int) -> ReluNetwork:
    """Exact d-dimensional identity of a given depth via the (u_+, u_-) split."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if depth == 1:
        return affine_net(np.eye(d))
    eye = np.eye(d)
    first = (_csr(np.vstack([eye, -eye])), np.zeros(2 * d))
    mid = (_csr(np.eye(2 * d)), np.zeros(2 * d))
    last = (_csr(np.hstack([eye, -eye])), np.zeros(d))
    return ReluNetwork(layers=[first] + [mid] * (depth - 2) + [last])


def compose_output(net: ReluNetwork, mat, bias=None) -> ReluNetwork:
    """Fold an affine output map M f(x) + c into the last layer (no depth)."""
    mat = _csr(np.atleast_2d(np.asarray(mat, dtype=float)))
    a, b = net.layers[-1]
    c = np.zeros(mat.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    new_a = _csr(mat @ a)
    new_b = mat @ b + c
    return ReluNetwork(layers=net.layers[:-1] + [(new_a, new_b)])


def compose_input(net: ReluNetwork, mat, bias=None) -> ReluNetwork:
    """Fold an affine input map f(M x + c) into the first layer (no depth)."""
    mat = _csr(np.atleast_2d(np.asarray(mat, dtype=float)))
    a, b = net.layers[0]
    c = np.zeros(mat.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    new_a = _csr(a @ mat)
    new_b = a @ c + b
    return ReluNetwork(layers=[(new_a, new_b)] + net.layers[1:])


def concat(nets: list[ReluNetwork]) -> ReluNetwork:
    """Exact composition: concat([f, g, ...]) evaluates ...(g(f(x))).

    The interface between consecutive nets routes (u_+, u_-) through the ReLU
    boundary, so depth adds exactly: L = sum L_i.
    """
    if not nets:
        raise ValueError("need at least one network")
    out = nets[0]
    for nxt in nets[1:]:
        if nxt.input_dim != out.output_dim:
            raise ValueError(
                f"dimension mismatch: {out.output_dim} -> {nxt.input_dim}"
            )
        a_f, b_f = out.layers[-1]
        split_a = _csr(sp.vstack([a_f, -a_f]))
        split_b = np.concatenate([b_f, -b_f])
        a_g, b_g = nxt.layers[0]
        join_a = _csr(sp.hstack([a_g, -a_g]))
        out = ReluNetwork(
            layers=out.layers[:-1]
            + [(split_a, split_b), (join_a, b_g.copy())]
            + nxt.layers[1:]
        )
    return out


def parallel(nets: list[ReluNetwork], mode: str = "stack") -> ReluNetwork:
    """Run nets side by side on a shared input; stack or sum their outputs.

    Shallower nets are padded with exact identity blocks, so the stacked
    depth is max L_i; sum mode appends one summing layer (depth max L_i + 1).
    """
    if not nets:
        raise ValueError("need at least one network")
    if len({net.input_dim for net in nets}) != 1:
        raise ValueError("parallel nets must share the input dimension")
    if mode not in ("stack", "sum"):
        raise ValueError("mode must be 'stack' or 'sum'")
    if mode == "sum" and len({net.output_dim for net in nets}) != 1:
        raise ValueError("sum mode needs equal output dims")
    depth = max(net.depth for net in nets)
    padded = [
        net if net.depth == depth
        else concat([net, identity_net(net.output_dim, depth - net.depth)])
        for net in nets
    ]
    layers = []
    for li in range(depth):
        mats = [net.layers[li][0] for net in padded]
        bias = np.concatenate([net.layers[li][1] for net in padded])
        if li == 0:
            a = _csr(sp.vstack(mats))
        else:
            a = _csr(sp.block_diag(mats))
        layers.append((a, bias))
    stacked = ReluNetwork(layers=layers)
    if mode == "stack":
        return stacked
    d_out = nets[0].output_dim
    summing = np.hstack([np.eye(d_out)] * len(nets))
    # one extra affine layer (cannot fold: the outputs sit behind a ReLU)
    return concat([stacked, affine_net(summing)])


def build_clip(a, b) -> ReluNetwork:
    """Exact coordinatewise clip min(b, max(x, a)) = relu(x-a) - relu(x-b) + a."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or np.any(a > b):
        raise ValueError("need a_i <= b_i with matching shapes")
    d = a.size
    eye = np.eye(d)
    first = (_csr(np.vstack([eye, eye])), np.concatenate([-a, -b]))
    last = (_csr(np.hstack([eye, -eye])), a.copy())
    net = ReluNetwork(layers=[first, last])
    domain = tuple((float(ai) - 2.0, float(bi) + 2.0) for ai, bi in zip(a, b))
    net.certificate = certify(net, lambda x: np.clip(x, a, b), domain, 0.0,
                              n_grid=10**4)
    return net


def build_switch(t_lo2: float, t_hi1: float) -> tuple[ReluNetwork, ReluNetwork]:
    """Partition-of-unity ramps (phi1, phi2): phi1 + phi2 = 1, phi1 = 0 for
    t >= t_hi1, phi2 = 0 for t <= t_lo2, both in [0, 1]."""
    if not t_lo2 < t_hi1:
        raise ValueError("need t_lo2 < t_hi1")
    width = t_hi1 - t_lo2
    clip = build_clip(np.array([t_lo2]), np.array([t_hi1]))
    # phi2 = relu(clip(t) - t_lo2)/width ; phi1 = relu(t_hi1 - clip(t))/width
    phi2 = concat([compose_output(clip, np.array([[1.0]]), np.array([-t_lo2])),
                   affine_net(np.array([[1.0 / width]]))])
    phi1 = concat([compose_output(clip, np.array([[-1.0]]), np.array([t_hi1])),
                   affine_net(np.array([[1.0 / width]]))])
    ts = np.linspace(t_lo2 - 1.0, t_hi1 + 1.0, 10**4).reshape(-1, 1)
    dev = float(np.max(np.abs(phi1(ts) + phi2(ts) - 1.0)))
    cert = ErrorCertificate(target_eps=1e-12, domain=((t_lo2 - 1.0, t_hi1 + 1.0),),
                            grid_points=10**4, measured_sup_error=dev)
    phi1.certificate = cert
    phi2.certificate = cert
    return phi1, phi2


def certify(net: ReluNetwork, reference, domain, target_eps: float,
            n_grid: int = 10**4, seed: int = 20240) -> ErrorCertificate:
    """Grid-scan certificate: sup |net - reference| over structured+random points.

    domain is a tuple of per-input (lo, hi) ranges; reference maps an (n, d)
    array to (n,) or (n, out) values.
    """
    d = len(domain)
    gen = np.random.default_rng(seed)
    per_axis = max(2, int(round(n_grid ** (1.0 / d))))
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in domain]
    if d == 1:
        structured = axes[0].reshape(-1, 1)
    else:
        structured = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    n_rand = max(n_grid - structured.shape[0], n_grid // 2)
    rand = np.column_stack([gen.uniform(lo, hi, size=n_rand) for lo, hi in domain])
    pts = np.vstack([structured, rand])
    got = net(pts)
    want = np.asarray(reference(pts), dtype=float)
    if want.ndim == 1:
        want = want.reshape(-1, 1)
    err = float(np.max(np.abs(got - want)))
    return ErrorCertificate(target_eps=float(target_eps),
                            domain=tuple((float(lo), float(hi)) for lo, hi in domain),
                            grid_points=int(pts.shape[0]), measured_sup_error=err)
