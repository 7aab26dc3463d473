"""Cardinal B-splines and synthetic ground-truth densities built from them.

A density here is a normalized superposition

    p0(x) = (baseline + sum_i alpha_i * M_{k_i, j_i}(x)) / Z   on [-1, 1]^d,

identically zero outside, where M_{k,j} is a tensor-product cardinal B-spline
of order l at dyadic resolution k and shift j.  The generator only places
atoms whose support lies inside the box and rejects coefficient draws whose
spline part dips negative, so the normalizer Z is available in closed form
and the density is exactly lower-bounded by baseline / Z.  That exactness is
what lets the score oracle integrate the diffusion kernel against p0 without
any boundary fudging.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

__all__ = [
    "cardinal_bspline",
    "SplineAtom",
    "SplineDensity",
    "eval_density",
    "random_density",
    "uniform_density",
]


def cardinal_bspline(order_l: int, x) -> np.ndarray:
    """Cardinal B-spline N_l, the (l+1)-fold convolution of the unit indicator.

    Evaluated through the explicit truncated-power form

        N_l(x) = 1[0 <= x <= l+1] / l! * sum_i (-1)^i C(l+1, i) (x - i)_+^l,

    which is a degree-l piecewise polynomial supported on [0, l+1].
    Total function: any real (or array) x is accepted.
    """
    if order_l < 0:
        raise ValueError("order_l must be >= 0")
    x = np.asarray(x, dtype=float)
    if order_l == 0:
        return ((x >= 0.0) & (x <= 1.0)).astype(float)
    inside = (x >= 0.0) & (x <= order_l + 1.0)
    acc = np.zeros_like(x)
    for i in range(order_l + 2):
        acc += (-1.0) ** i * math.comb(order_l + 1, i) * np.clip(x - i, 0.0, None) ** order_l
    return np.where(inside, acc / math.factorial(order_l), 0.0)


@dataclass(frozen=True)
class SplineAtom:
    """One tensor-product B-spline M_{k,j} of order l.

    Support is the box prod_i [j_i 2^-k_i, (j_i + l + 1) 2^-k_i].
    """

    k: tuple[int, ...]
    j: tuple[int, ...]
    order_l: int = 3

    def __post_init__(self):
        if self.order_l < 0 or any(ki < 0 for ki in self.k):
            raise ValueError("need order_l >= 0 and k_i >= 0")
        if len(self.k) != len(self.j):
            raise ValueError("k and j must have equal length")

    @property
    def dim(self) -> int:
        return len(self.k)

    def support(self) -> list[tuple[float, float]]:
        return [
            (ji * 2.0**-ki, (ji + self.order_l + 1) * 2.0**-ki)
            for ki, ji in zip(self.k, self.j)
        ]

    def mass(self) -> float:
        """integral of M_{k,j} over R^d; each axis factor has unit mass scaled by 2^-k."""
        return 2.0 ** -float(sum(self.k))

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.ones(x.shape[0])
        for i, (ki, ji) in enumerate(zip(self.k, self.j)):
            out *= cardinal_bspline(self.order_l, 2.0**ki * x[:, i] - ji)
        return out


@dataclass(frozen=True)
class SplineDensity:
    """Ground-truth density p0 on [-1,1]^d; immutable, concurrent-read safe."""

    dim: int
    atoms: tuple[SplineAtom, ...]
    alphas: tuple[float, ...]
    baseline: float
    normalizer: float
    domain_halfwidth: float = 1.0
    nominal_smoothness: float = 1.0
    seed_provenance: int | None = None
    upper_bound: float = field(default=0.0)  # recorded sup p0 (grid-measured)
    _clamp_diag: dict = field(default_factory=lambda: {"negative_clamps": 0}, repr=False)

    def __post_init__(self):
        if self.baseline < 0:
            raise ValueError("baseline must be nonnegative")
        if self.baseline == 0 and not self.atoms:
            raise ValueError("nowhere-positive density: no baseline and no atoms")
        if self.normalizer <= 0:
            raise ValueError("normalizer must be positive")
        if len(self.atoms) != len(self.alphas):
            raise ValueError("atoms and alphas must align")

    @property
    def lower_bound(self) -> float:
        """Guaranteed pointwise lower bound on the box: baseline / Z."""
        return self.baseline / self.normalizer

    @property
    def c_f(self) -> float:
        """Single constant with 1/C_f <= p0 <= C_f on the box."""
        up = self.upper_bound if self.upper_bound > 0 else self.baseline / self.normalizer
        return max(up, 1.0 / self.lower_bound) if self.lower_bound > 0 else up

    def rejection_bound(self) -> float:
        """Certified sup bound (sup N_l <= 1): (baseline + sum alpha_+)/Z."""
        pos = sum(a for a in self.alphas if a > 0)
        return (self.baseline + pos) / self.normalizer

    def sample(self, count: int, rng: RngStream | np.random.Generator) -> np.ndarray:
        """Draw count points from p0: inverse CDF in d=1, rejection in d=2."""
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        if count == 0:
            return np.zeros((0, self.dim))
        if self.dim == 1:
            xs, cdf = _cdf_cache(self)
            u = gen.uniform(0.0, 1.0, size=count)
            return np.interp(u, cdf, xs).reshape(-1, 1)
        if self.dim == 2:
            bound = self.rejection_bound() * (1.0 + 1e-12)
            out = np.empty((0, 2))
            while out.shape[0] < count:
                need = count - out.shape[0]
                cand = gen.uniform(-1.0, 1.0, size=(max(2 * need, 64), 2))
                accept = gen.uniform(0.0, bound, size=cand.shape[0]) < eval_density(self, cand)
                out = np.vstack([out, cand[accept]])
            return out[:count]
        raise NotImplementedError("sampling supports d in {1, 2}")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "atoms": [
                {"k": list(a.k), "j": list(a.j), "order_l": a.order_l} for a in self.atoms
            ],
            "alphas": list(self.alphas),
            "baseline": self.baseline,
            "normalizer": self.normalizer,
            "domain_halfwidth": self.domain_halfwidth,
            "nominal_smoothness": self.nominal_smoothness,
            "seed_provenance": self.seed_provenance,
            "upper_bound": self.upper_bound,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "SplineDensity":
        atoms = tuple(
            SplineAtom(k=tuple(a["k"]), j=tuple(a["j"]), order_l=a["order_l"])
            for a in d["atoms"]
        )
        return SplineDensity(
            dim=d["dim"],
            atoms=atoms,
            alphas=tuple(d["alphas"]),
            baseline=d["baseline"],
            normalizer=d["normalizer"],
            domain_halfwidth=d.get("domain_halfwidth", 1.0),
            nominal_smoothness=d.get("nominal_smoothness", 1.0),
            seed_provenance=d.get("seed_provenance"),
            upper_bound=d.get("upper_bound", 0.0),
        )

    @staticmethod
    def from_json(s: str) -> "SplineDensity":
        return SplineDensity.from_dict(json.loads(s))


def eval_density(p0: SplineDensity, x) -> np.ndarray:
    """p0 at points x (shape (n, d) or (d,)); zero outside [-1,1]^d, never negative."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    inside = np.all(np.abs(pts) <= p0.domain_halfwidth, axis=1)
    vals = np.full(pts.shape[0], p0.baseline)
    for atom, alpha in zip(p0.atoms, p0.alphas):
        vals += alpha * atom(pts)
    vals /= p0.normalizer
    neg = vals < 0
    if np.any(neg & inside):
        p0._clamp_diag["negative_clamps"] += int(np.count_nonzero(neg & inside))
        vals = np.clip(vals, 0.0, None)
    return np.where(inside, vals, 0.0)


def uniform_density(d: int) -> SplineDensity:
    """The uniform density on [-1,1]^d (baseline only)."""
    return SplineDensity(
        dim=d, atoms=(), alphas=(), baseline=1.0, normalizer=2.0**d,
        nominal_smoothness=math.inf, upper_bound=2.0**-d,
    )


def _valid_shift_range(k: int, order_l: int) -> tuple[int, int]:
    """Inclusive j range keeping the support of M_{k,j} inside [-1,1]."""
    return -(2**k), 2**k - (order_l + 1)


def _axis_floor(order_l: int, k_parent: int, j_parent: int,
                lo: float, hi: float) -> float:
    """min of N_l(2^k x - j) over [lo, hi]; N_l is unimodal so the min sits
    at an endpoint."""
    vals = cardinal_bspline(order_l, np.array([2.0**k_parent * lo - j_parent,
                                               2.0**k_parent * hi - j_parent]))
    return float(vals.min())


def random_density(seed: int, d: int, n_atoms: int, max_k: int = 3,
                   order_l: int = 3, decay_s: float = 1.0) -> SplineDensity:
    """Seeded generator of spline densities with Besov-style coefficient decay.

    Atom coefficients at resolution k shrink like 2^{-k * decay_s}; a constant
    baseline keeps the density strictly positive.  Negative "dip" atoms are
    only placed strictly inside a positive parent atom, one dyadic level
    finer, with magnitude below the parent's pointwise floor over the dip's
    support; the spline part is therefore provably nonnegative and no
    evaluation-time clipping is ever needed (a coefficient draw that cannot
    satisfy the floor is rejected and the dip dropped rather than clipped).
    Deterministic in seed.
    """
    if d not in (1, 2):
        raise ValueError("d must be 1 or 2")
    if n_atoms < 0:
        raise ValueError("n_atoms must be >= 0")
    k_min = 0
    while 2 ** (k_min + 1) < order_l + 1:
        k_min += 1
    if _valid_shift_range(k_min, order_l)[1] < _valid_shift_range(k_min, order_l)[0]:
        k_min += 1
    max_k = max(max_k, k_min)
    gen = RngStream(seed, (0xB5,)).generator()

    baseline = 1.0
    n_neg = int(0.35 * n_atoms)
    n_pos = n_atoms - n_neg
    atoms: list[SplineAtom] = []
    alphas: list[float] = []
    for _ in range(n_pos):
        ks = tuple(int(gen.integers(k_min, max_k + 1)) for _ in range(d))
        js = []
        for ki in ks:
            j_lo, j_hi = _valid_shift_range(ki, order_l)
            js.append(int(gen.integers(j_lo, j_hi + 1)))
        kbar = float(np.mean(ks))
        atoms.append(SplineAtom(k=ks, j=tuple(js), order_l=order_l))
        alphas.append(2.0 ** (-kbar * decay_s) * gen.uniform(0.5, 1.5))

    # fraction of each parent's pointwise floor still available to dips; with
    # sum_c frac_c <= 0.9 and |alpha_c| <= frac_c * alpha_p * floor_c the
    # parent dominates all its dips pointwise, so the spline part stays >= 0.
    budget = [0.9] * n_pos
    for _ in range(n_neg):
        parent = int(gen.integers(0, n_pos))
        pk, pj, pa = atoms[parent].k, atoms[parent].j, alphas[parent]
        cks, cjs, floor = [], [], 1.0
        ok = True
        for axis in range(d):
            kc = pk[axis] + 1
            # child support strictly interior: one fine cell from each edge
            lo_j = 2 * pj[axis] + 1
            hi_j = 2 * (pj[axis] + order_l + 1) - (order_l + 1) - 1
            if hi_j < lo_j:
                ok = False
                break
            jc = int(gen.integers(lo_j, hi_j + 1))
            cks.append(kc)
            cjs.append(jc)
            floor *= _axis_floor(order_l, pk[axis], pj[axis],
                                 jc * 2.0**-kc, (jc + order_l + 1) * 2.0**-kc)
        if not ok or floor <= 0.0:
            continue
        frac = gen.uniform(0.3, 0.8) * budget[parent]
        budget[parent] -= frac
        kbar = float(np.mean(cks))
        mag = min(frac * pa * floor, 2.0 ** (-kbar * decay_s) * gen.uniform(0.5, 1.5))
        atoms.append(SplineAtom(k=tuple(cks), j=tuple(cjs), order_l=order_l))
        alphas.append(-mag)

    alphas_arr = np.array(alphas) if alphas else np.zeros(0)
    normalizer = baseline * 2.0**d + float(
        sum(a * atom.mass() for atom, a in zip(atoms, alphas_arr))
    )
    density = SplineDensity(
        dim=d,
        atoms=tuple(atoms),
        alphas=tuple(float(a) for a in alphas_arr),
        baseline=baseline,
        normalizer=normalizer,
        nominal_smoothness=decay_s,
        seed_provenance=int(seed),
    )
    # record the measured sup for C_f bookkeeping
    probe = RngStream(seed, (0xB5, 1)).generator().uniform(-1, 1, size=(4096, d))
    up = float(np.max(eval_density(density, probe)))
    object.__setattr__(density, "upper_bound", max(up, density.lower_bound))
    return density


_CDF_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _cdf_cache(p0: SplineDensity) -> tuple[np.ndarray, np.ndarray]:
    key = id(p0)
    hit = _CDF_CACHE.get(key)
    if hit is None:
        xs = np.linspace(-1.0, 1.0, 2**15 + 1)
        dens = eval_density(p0, xs.reshape(-1, 1))
        cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) * 0.5 * np.diff(xs))])
        cdf /= cdf[-1]
        hit = (xs, cdf)
        if len(_CDF_CACHE) > 64:
            _CDF_CACHE.clear()
        _CDF_CACHE[key] = hit
    return hit
