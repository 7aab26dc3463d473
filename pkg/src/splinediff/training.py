"""Denoising score matching: trainable score networks and loss machinery.

The training target is the conditional Gaussian score

    grad log p_t(x_t | x_0) = -(x_t - m_t x_0) / sigma_t^2,

which makes the empirical loss computable to any accuracy.  Three estimators
of the loss are provided: ``expectation_quadrature`` (panel quadrature in t,
Gauss-Hermite over x_t | x_0), ``uniform_t`` (finite sampling of (i, t, x_t)
with t uniform and lambda = 1), and ``weighted_t`` (t drawn from mu(t)
proportional to 1/t with the compensating weight lambda(t) = t log(T_hi/T_lo)
/ (T_hi - T_lo), which keeps the per-draw loss bounded near t = 0).  A
``discrete_grid`` variant restricts t to grid knots with cell-width weights.

Networks are small ReLU MLPs on features (x, t, 1/sqrt(sigma_t^2 + c)),
trained by full-batch gradient descent with a halving-on-increase safeguard
(so the loss trace is monotone), and evaluated with the hypothesis-class
output clipping ||s(.,t)|| <= clip_mult sqrt(log n) / sigma_t.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_hermite, roots_legendre

from .bspline import SplineDensity
from .rng import RngStream
from .schedule import BetaSchedule, TimeGrid, m_sigma, noise_state

__all__ = [
    "TrainConfig",
    "TrainedScore",
    "TrainingError",
    "ScoreMLP",
    "conditional_score",
    "empirical_loss",
    "train",
    "vincent_gap",
]


class TrainingError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass(frozen=True)
class TrainConfig:
    widths: tuple[int, ...] = (64, 64)
    n_data: int = 1024
    scheme: str = "expectation_quadrature"
    m_draws: int = 4096          # M for the sampled schemes
    t_lo: float = 1e-2
    t_hi: float = 1.0
    clip_mult: float = 4.0
    step_size: float = 0.05
    iterations: int = 300
    batch: int = 0               # 0 = full batch (keeps the trace monotone)
    seed: int = 0
    sigma_feature_c: float = 1e-3
    n_time_panels: int = 8
    n_gh: int = 16
    switch_mode: str = "hard"    # or "ramp"

    def __post_init__(self):
        if self.scheme not in (
            "expectation_quadrature", "uniform_t", "weighted_t", "discrete_grid"
        ):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme in ("uniform_t", "weighted_t") and self.m_draws < 1:
            raise ValueError("sampled schemes need m_draws >= 1")
        if self.t_lo <= 0 or self.t_lo >= self.t_hi:
            raise ValueError("need 0 < t_lo < t_hi")


def conditional_score(x_t, x_0, t, schedule: BetaSchedule) -> np.ndarray:
    """Gradient of log N(x_t; m_t x_0, sigma_t^2 I) in x_t.

    t may be a scalar or a per-row array matching x_t's leading dimension.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 1e-300):
        raise ValueError("t below floor")
    m, sigma = m_sigma(schedule, t_arr)
    x_t = np.asarray(x_t, dtype=float)
    x_0 = np.asarray(x_0, dtype=float)
    if t_arr.ndim == 0:
        return -(x_t - m * x_0) / sigma**2
    return -(x_t - m[:, None] * x_0) / sigma[:, None] ** 2


# -- score network -------------------------------------------------------------


class ScoreMLP:
    """Plain ReLU MLP with manual reverse-mode gradients.

    Input features are (x, t, 1/sqrt(sigma_t^2 + c)); the inverse-sigma
    feature matches the known score scale so the head does not have to learn
    the 1/sigma_t blowup itself.
    """

    def __init__(self, dim: int, widths: tuple[int, ...], rng: RngStream,
                 sigma_feature_c: float, schedule: BetaSchedule):
        gen = rng.generator()
        sizes = [dim + 2, *widths, dim]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = gen.normal(size=(fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        # zero output layer: training starts from the prior-mean score s = 0
        self.weights[-1][:] = 0.0
        self.dim = dim
        self.sigma_feature_c = sigma_feature_c
        self.schedule = schedule

    def features(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(x)
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        _, sigma = m_sigma(self.schedule, t_arr)
        inv = 1.0 / np.sqrt(sigma**2 + self.sigma_feature_c)
        return np.column_stack([x, t_arr, inv])

    def forward(self, feats: np.ndarray, keep: bool = False):
        h = feats
        acts = [feats]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            if keep:
                acts.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return (out, acts) if keep else out

    def __call__(self, x: np.ndarray, t) -> np.ndarray:
        return self.forward(self.features(x, t))

    def to_dict(self) -> dict:
        return {
            "widths": [w.shape[1] for w in self.weights[:-1]],
            "dim": self.dim,
            "sigma_feature_c": self.sigma_feature_c,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }


def _clip_radii(schedule: BetaSchedule, t_arr: np.ndarray, clip_mult: float,
                n_data: int) -> np.ndarray:
    _, sigma = m_sigma(schedule, t_arr)
    return clip_mult * math.sqrt(math.log(max(n_data, 3))) / sigma


def _apply_clip(out: np.ndarray, radii: np.ndarray):
    norms = np.linalg.norm(out, axis=1)
    factor = np.minimum(1.0, radii / np.maximum(norms, 1e-300))
    return out * factor[:, None], factor, norms


# -- loss construction ---------------------------------------------------------


@dataclass(frozen=True)
class _LossNodes:
    """A weighted node set: loss(s) = sum_j w_j ||s(x_j, t_j) - y_j||^2."""

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    w: np.ndarray


def _build_nodes(data: np.ndarray, schedule: BetaSchedule, scheme: str,
                 t_lo: float, t_hi: float, rng: RngStream, m_draws: int,
                 n_time_panels: int, n_gh: int,
                 grid_knots=None) -> _LossNodes:
    n, d = data.shape
    if scheme == "expectation_quadrature":
        gx, gw = roots_legendre(4)
        hx, hw = roots_hermite(n_gh)
        hw = hw / math.sqrt(math.pi)
        if d == 1:
            zs = hx.reshape(-1, 1)
            zw = hw
        elif d == 2:
            zs = np.stack(np.meshgrid(hx, hx, indexing="ij"), axis=-1).reshape(-1, 2)
            zw = np.outer(hw, hw).ravel()
        else:
            raise NotImplementedError("d in {1, 2}")
        xs, ts, ys, ws = [], [], [], []
        edges = np.linspace(t_lo, t_hi, n_time_panels + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            for q in range(4):
                t = a + (gx[q] + 1.0) * 0.5 * (b - a)
                wt = gw[q] * 0.5 * (b - a) / (t_hi - t_lo)  # E over Unif[t]
                ns = noise_state(schedule, float(t))
                # x_t = m x0 + sqrt(2) sigma z at Gauss-Hermite nodes
                x_t = (ns.m * data[:, None, :]
                       + math.sqrt(2.0) * ns.sigma * zs[None, :, :]).reshape(-1, d)
                y = -(math.sqrt(2.0) * ns.sigma * np.tile(zs, (n, 1))) / ns.sigma**2
                w = wt * np.repeat(np.full(n, 1.0 / n), zs.shape[0]) * np.tile(zw, n)
                xs.append(x_t)
                ts.append(np.full(x_t.shape[0], t))
                ys.append(y)
                ws.append(w)
        return _LossNodes(np.vstack(xs), np.concatenate(ts), np.vstack(ys),
                          np.concatenate(ws))

    if scheme == "discrete_grid":
        knots = np.asarray(grid_knots if grid_knots is not None
                           else np.linspace(t_lo, t_hi, n_time_panels + 1))
        widths = np.diff(knots)
        gen = rng.generator()
        xs, ts, ys, ws = [], [], [], []
        for t, width in zip(knots[:-1], widths):
            ns = noise_state(schedule, float(t))
            xi = gen.normal(size=data.shape)
            x_t = ns.m * data + ns.sigma * xi
            xs.append(x_t)
            ts.append(np.full(n, t))
            ys.append(-xi / ns.sigma)
            ws.append(np.full(n, width / (knots[-1] - knots[0]) / n))
        return _LossNodes(np.vstack(xs), np.concatenate(ts), np.vstack(ys),
                          np.concatenate(ws))

    gen = rng.generator()
    idx = gen.integers(0, n, size=m_draws)
    if scheme == "uniform_t":
        t_j = gen.uniform(t_lo, t_hi, size=m_draws)
        lam = np.ones(m_draws)
    else:  # weighted_t: t ~ mu(t) prop. 1/t, lambda(t) = t log(hi/lo)/(hi - lo)
        u = gen.uniform(size=m_draws)
        t_j = t_lo * (t_hi / t_lo) ** u
        lam = t_j * math.log(t_hi / t_lo) / (t_hi - t_lo)
    m_arr, s_arr = m_sigma(schedule, t_j)
    xi = gen.normal(size=(m_draws, d))
    x_t = m_arr[:, None] * data[idx] + s_arr[:, None] * xi
    y = -xi / s_arr[:, None]
    w = lam / m_draws
    return _LossNodes(x_t, t_j, y, w)


def empirical_loss(s, data: np.ndarray, scheme: str, rng: RngStream,
                   schedule: BetaSchedule, t_lo: float, t_hi: float,
                   m_draws: int = 4096, n_time_panels: int = 8,
                   n_gh: int = 16) -> float:
    """Evaluate the denoising score matching loss of a callable s(x, t).

    s must accept a per-point time array t of shape (n,); MLPs do, and
    conditional-score closures vectorize naturally.
    """
    if data.shape[0] == 0:
        raise ValueError("data must be nonempty")
    nodes = _build_nodes(data, schedule, scheme, t_lo, t_hi, rng, m_draws,
                         n_time_panels, n_gh)
    diff = np.asarray(s(nodes.x, nodes.t), dtype=float) - nodes.y
    return float(np.sum(nodes.w * np.sum(diff * diff, axis=1)))


# -- trained score -------------------------------------------------------------


@dataclass
class TrainedScore:
    """Piecewise-in-time score: one network per interval plus switching."""

    intervals: list  # (t_lo, t_hi, ScoreMLP)
    clip_mult: float
    n_data: int
    schedule: BetaSchedule
    switch_mode: str = "hard"
    training_loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        for (a0, b0, _), (a1, b1, _) in zip(self.intervals[:-1], self.intervals[1:]):
            if not (a0 < b0 and abs(b0 - a1) < 1e-12):
                raise ValueError("intervals must cover the range with no gaps")

    @property
    def t_lo(self) -> float:
        return self.intervals[0][0]

    @property
    def t_hi(self) -> float:
        return self.intervals[-1][1]

    def _interval_index(self, t: float) -> int:
        starts = [a for a, _, _ in self.intervals]
        i = int(np.searchsorted(starts, t, side="right")) - 1
        return min(max(i, 0), len(self.intervals) - 1)

    def raw(self, x: np.ndarray, t: float) -> np.ndarray:
        t = float(t)
        i = self._interval_index(t)
        out = self.intervals[i][2](x, t)
        if self.switch_mode != "ramp" or len(self.intervals) < 2:
            return out
        # partition-of-unity ramp across each interior knot
        a, b, _ = self.intervals[i]
        if i + 1 < len(self.intervals):
            h = 0.2 * min(b - a, self.intervals[i + 1][1] - b)
            if t > b - h:
                w = (t - (b - h)) / (2.0 * h)
                return (1.0 - w) * out + w * self.intervals[i + 1][2](x, t)
        if i > 0:
            prev_a = self.intervals[i - 1][0]
            h = 0.2 * min(b - a, a - prev_a)
            if t < a + h:
                w = (a + h - t) / (2.0 * h)
                return (1.0 - w) * out + w * self.intervals[i - 1][2](x, t)
        return out

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        out = self.raw(x, t)
        radii = _clip_radii(self.schedule, np.full(out.shape[0], float(t)),
                            self.clip_mult, self.n_data)
        clipped, _, _ = _apply_clip(out, radii)
        return clipped

    def to_json(self) -> str:
        return json.dumps({
            "clip_mult": self.clip_mult,
            "n_data": self.n_data,
            "switch_mode": self.switch_mode,
            "intervals": [
                {"t_lo": a, "t_hi": b, "net": net.to_dict()}
                for a, b, net in self.intervals
            ],
            "trace": self.training_loss_trace,
        }, sort_keys=True)


def _fit_interval(nodes: _LossNodes, net: ScoreMLP, config: TrainConfig,
                  schedule: BetaSchedule):
    """Full-batch descent with halving-on-increase; returns the loss trace."""
    feats = net.features(nodes.x, nodes.t)
    radii = _clip_radii(schedule, nodes.t, config.clip_mult, config.n_data)
    w_col = nodes.w[:, None]

    def loss_and_grad():
        out, acts = net.forward(feats, keep=True)
        clipped, factor, norms = _apply_clip(out, radii)
        diff = clipped - nodes.y
        loss = float(np.sum(nodes.w * np.sum(diff * diff, axis=1)))
        g_clip = 2.0 * w_col * diff
        # back through s -> factor * s (norm clip): for clipped rows the
        # Jacobian is r (I / ||s|| - s s^T / ||s||^3)
        hard = factor < 1.0
        g_out = g_clip * factor[:, None]
        if np.any(hard):
            s_h = out[hard]
            n_h = norms[hard][:, None]
            proj = np.sum(g_clip[hard] * s_h, axis=1, keepdims=True) / n_h**2
            g_out[hard] = (radii[hard][:, None] / n_h) * (g_clip[hard] - proj * s_h)
        delta = g_out
        grads_w, grads_b = [], []
        for layer in range(len(net.weights) - 1, -1, -1):
            grads_w.insert(0, acts[layer].T @ delta)
            grads_b.insert(0, delta.sum(axis=0))
            if layer > 0:
                delta = (delta @ net.weights[layer].T) * (acts[layer] > 0)
        return loss, grads_w, grads_b

    step = config.step_size
    trace = []
    loss, gw, gb = loss_and_grad()
    if not math.isfinite(loss):
        raise TrainingError("non-finite initial loss", trace)
    for _ in range(config.iterations):
        trace.append(loss)
        saved_w = [w.copy() for w in net.weights]
        saved_b = [b.copy() for b in net.biases]
        for w, g in zip(net.weights, gw):
            w -= step * g
        for b, g in zip(net.biases, gb):
            b -= step * g
        new_loss, new_gw, new_gb = loss_and_grad()
        if not math.isfinite(new_loss):
            raise TrainingError("training diverged (non-finite loss)", trace)
        if new_loss > loss:
            net.weights, net.biases = saved_w, saved_b
            step *= 0.5
            if step < 1e-12:
                break
        else:
            loss, gw, gb = new_loss, new_gw, new_gb
    trace.append(loss)
    return trace


def train(density: SplineDensity, schedule: BetaSchedule, config: TrainConfig,
          grid: TimeGrid | None = None) -> TrainedScore:
    """Fit one score network per time interval by denoising score matching.

    Data is drawn i.i.d. from the density; each interval of ``grid`` (or the
    single interval [t_lo, t_hi]) gets its own network trained on the
    interval-restricted loss.  Deterministic in config.seed.
    """
    root = RngStream(config.seed, (0x7E,))
    data = density.sample(config.n_data, root.split(0))
    cells = grid.cells() if grid is not None else [(config.t_lo, config.t_hi)]
    intervals = []
    traces = []
    for idx, (a, b) in enumerate(cells):
        nodes = _build_nodes(
            data, schedule, config.scheme, a, b, root.split(100 + idx),
            config.m_draws, config.n_time_panels, config.n_gh,
        )
        net = ScoreMLP(density.dim, config.widths, root.split(200 + idx),
                       config.sigma_feature_c, schedule)
        if config.iterations > 0:
            trace = _fit_interval(nodes, net, config, schedule)
        else:
            trace = []
        intervals.append((a, b, net))
        traces.append(trace)
    return TrainedScore(
        intervals=intervals,
        clip_mult=config.clip_mult,
        n_data=config.n_data,
        schedule=schedule,
        switch_mode=config.switch_mode,
        training_loss_trace=traces,
    )


# -- Vincent equivalence gap ---------------------------------------------------


def vincent_gap(s_a, s_b, oracle, t: float, n_x: int = 2048,
                n_x0: int = 256, x_pad: float = 8.0) -> float:
    """[L_den(s_a) - L_den(s_b)] - [L_exp(s_a) - L_exp(s_b)] at fixed t.

    L_exp integrates ||s - score||^2 p_t and L_den the conditional form;
    their difference is a constant in s, so the gap must vanish.  Both use
    the same outer x_t grid so quadrature error cancels between the terms.
    d = 1 only.
    """
    if oracle.dim != 1:
        raise NotImplementedError("vincent_gap implemented for d=1")
    sched = oracle.schedule
    ns = noise_state(sched, t)
    hw = oracle.density.domain_halfwidth
    R = ns.m * hw + x_pad * ns.sigma
    gx, gw = roots_legendre(n_x)
    xs = (gx * R).reshape(-1, 1)
    ws = gw * R

    p_t = oracle.p_t(xs, t)
    s_true = oracle.score(xs, t)

    g0x, g0w = roots_legendre(n_x0)
    x0 = (g0x * hw).reshape(1, -1)
    w0 = g0w * hw
    from .bspline import eval_density

    p0 = eval_density(oracle.density, x0.reshape(-1, 1))
    kern = np.exp(-((xs - ns.m * x0) ** 2) / (2 * ns.sigma**2)) / (
        ns.sigma * math.sqrt(2 * math.pi)
    )
    cond = -(xs - ns.m * x0) / ns.sigma**2  # (n_x, n_x0)
    mix = kern * (w0 * p0)[None, :]

    def losses(s):
        sv = np.asarray(s(xs, t), dtype=float)[:, 0]
        l_exp = float(np.sum(ws * (sv - s_true[:, 0]) ** 2 * p_t))
        inner = np.sum(mix * (sv[:, None] - cond) ** 2, axis=1)
        l_den = float(np.sum(ws * inner))
        return l_den, l_exp

    da, ea = losses(s_a)
    db, eb = losses(s_b)
    return (da - db) - (ea - eb)
