"""Prototype base classifiers and their weighted least-squares fit.

A base classifier scores a bag with a scaled sigmoid of the distance from
its prototype to the nearest instance of the bag::

    f(B) = 2 / (1 + exp(-(beta1 * D(p, B) + beta0))) - 1

Fitting minimizes ``sum_i w_i (y_i - f(B_i))^2`` with ``D`` replaced by the
soft-min distance, by coordinate descent: Newton on ``(beta0, beta1)``
with the prototype fixed, then gradient descent on the prototype with the
betas fixed, until the cost stops moving.  Every cluster center is used as
a starting prototype; all restarts advance together as rows of one batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import PackedBags, SoftMinConfig, bag_distance, soft_bag_distance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BaseClassifier:
    prototype: np.ndarray
    beta0: float
    beta1: float

    def __post_init__(self):
        p = np.array(self.prototype, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError("prototype must be a vector")
        if not (np.all(np.isfinite(p)) and np.isfinite(self.beta0) and np.isfinite(self.beta1)):
            raise ValueError("base classifier parameters must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "prototype", p)
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "beta1", float(self.beta1))

    @property
    def dimension(self) -> int:
        return self.prototype.shape[0]

    def score_distance(self, D):
        return sigmoid_score(self.beta1 * np.asarray(D, dtype=np.float64) + self.beta0)

    def to_dict(self) -> dict:
        return {"prototype": self.prototype.tolist(), "beta0": self.beta0, "beta1": self.beta1}

    @classmethod
    def from_dict(cls, d: dict) -> "BaseClassifier":
        return cls(np.array(d["prototype"], dtype=np.float64), d["beta0"], d["beta1"])


@dataclass(frozen=True)
class LineSearchConfig:
    initial_step: float = 1.0
    shrink: float = 0.5
    max_backtracks: int = 30
    armijo: float = 1e-4
    max_iters: int = 100
    rel_tol: float = 1e-6
    spectral: bool = True


@dataclass(frozen=True)
class NewtonConfig:
    max_iters: int = 100
    damping: float = 1e-10
    gtol: float = 1e-10
    max_backtracks: int = 60


@dataclass(frozen=True)
class FitConfig:
    tol: float = 1e-5
    max_outer_iters: int = 50
    prototype_step: LineSearchConfig = field(default_factory=LineSearchConfig)
    beta_solver: NewtonConfig = field(default_factory=NewtonConfig)
    restarts: int | None = None
    restricted_mode: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.restarts is not None and self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be at least 1")

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "max_outer_iters": self.max_outer_iters,
            "prototype_step": vars(self.prototype_step).copy(),
            "beta_solver": vars(self.beta_solver).copy(),
            "restarts": self.restarts,
            "restricted_mode": self.restricted_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        d["prototype_step"] = LineSearchConfig(**d.get("prototype_step", {}))
        d["beta_solver"] = NewtonConfig(**d.get("beta_solver", {}))
        return cls(**d)


def sigmoid_score(z):
    """``2 / (1 + exp(-z)) - 1``, evaluated as ``tanh(z / 2)``."""
    return np.tanh(0.5 * z)


def score_bag(clf: BaseClassifier, bag) -> float:
    """Score in (-1, 1) from the exact nearest-instance distance."""
    D, _ = bag_distance(clf.prototype, bag)
    return float(sigmoid_score(clf.beta1 * D + clf.beta0))


def _as_packed(bags) -> PackedBags:
    if isinstance(bags, PackedBags):
        return bags
    return PackedBags.from_dataset(bags)


def _check_weights(weights, n):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative with a positive sum")
    return w


def _labels(bags: PackedBags):
    if bags.labels is None:
        raise ValueError("training bags must be labeled")
    return bags.labels


def _costs(D, y, w, b0, b1):
    """Weighted squared error for every row of ``D`` (shape ``(R, N)``)."""
    f = sigmoid_score(b1[:, None] * D + b0[:, None])
    return ((y - f) ** 2) @ w


def weighted_cost(clf: BaseClassifier, bags, weights, soft: bool = False,
                  cfg: SoftMinConfig | None = None) -> float:
    """``sum_i w_i (y_i - f(B_i))^2`` with exact or soft-min distances."""
    bags = _as_packed(bags)
    y = _labels(bags)
    w = _check_weights(weights, bags.n_bags)
    if soft:
        if cfg is None:
            raise ValueError("soft cost needs a SoftMinConfig")
        D = np.array([soft_bag_distance(clf.prototype, bags.bag(i), cfg)
                      for i in range(bags.n_bags)])
    else:
        D = bags.exact_bag_distances(clf.prototype)
    return float(_costs(D[None, :], y, w, np.array([clf.beta0]), np.array([clf.beta1]))[0])


# ---------------------------------------------------------------------------
# (beta0, beta1) subproblem


def beta_gradient(D, y, w, b0, b1):
    """Cost, gradient and Hessian of the beta subproblem for every row."""
    f = sigmoid_score(b1[:, None] * D + b0[:, None])
    r = y - f
    fp = 0.5 * (1.0 - f * f)
    gz = -2.0 * w * r * fp
    hz = 2.0 * w * (fp * fp + r * f * fp)
    cost = (r * r) @ w
    g = np.stack([gz.sum(1), (gz * D).sum(1)], axis=1)
    h00 = hz.sum(1)
    h01 = (hz * D).sum(1)
    h11 = (hz * D * D).sum(1)
    return cost, g, h00, h01, h11


def initial_betas(D, w):
    """``beta1 = -1/s``, ``beta0 = mu/s`` from the weighted mean/spread of ``D``.

    Rows with no spread get ``beta1 = 0`` and are flagged.
    """
    wn = w / w.sum()
    mu = D @ wn
    s = np.sqrt(((D - mu[:, None]) ** 2) @ wn)
    flat = s <= 1e-12 * np.maximum(1.0, np.abs(mu))
    s_safe = np.where(flat, 1.0, s)
    b1 = np.where(flat, 0.0, -1.0 / s_safe)
    b0 = np.where(flat, 0.0, mu / s_safe)
    return b0, b1, flat


def constant_beta0(y, w) -> float:
    """Optimal ``beta0`` when ``beta1 = 0``: the score equals the weighted mean label."""
    ybar = float(np.dot(w, y) / w.sum())
    ybar = min(max(ybar, -1.0 + 1e-15), 1.0 - 1e-15)
    return 2.0 * np.arctanh(ybar)


def _newton_direction(g, h00, h01, h11, damping):
    """Modified-Newton step ``-(H + shift I)^{-1} g`` with H shifted to be positive definite."""
    half_tr = 0.5 * (h00 + h11)
    rad = np.sqrt(0.25 * (h00 - h11) ** 2 + h01 ** 2)
    lmax = half_tr + rad
    lmin = half_tr - rad
    shift = np.maximum(0.0, damping * np.abs(lmax) - lmin)
    a, c = h00 + shift, h11 + shift
    det = a * c - h01 * h01
    ok = (lmax > 0) & (det > 0) & np.isfinite(det)
    det = np.where(ok, det, 1.0)
    s0 = -(c * g[:, 0] - h01 * g[:, 1]) / det
    s1 = -(-h01 * g[:, 0] + a * g[:, 1]) / det
    return np.stack([s0, s1], axis=1), ok


def fit_betas_batch(D, y, w, b0=None, b1=None, cfg: NewtonConfig | None = None):
    """Minimize the beta subproblem independently for every row of ``D``.

    Damped Newton with backtracking; rows where the Newton step does not
    decrease the cost fall back to backtracking gradient descent.  Starts
    from the given betas (or the spread-based initialization).  A row that
    ends above the best constant predictor's cost, which happens on the
    saturated plateaus of the sigmoid, is solved again from that constant.
    """
    cfg = cfg or NewtonConfig()
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    init0, init1, flat = initial_betas(D, w)
    b0 = init0.copy() if b0 is None else np.array(b0, dtype=np.float64)
    b1 = init1.copy() if b1 is None else np.array(b1, dtype=np.float64)
    c0 = constant_beta0(y, w)
    if flat.any():
        b1[flat] = 0.0
        b0[flat] = c0
    _newton(D, y, w, b0, b1, np.flatnonzero(~flat), cfg)
    cost = _costs(D, y, w, b0, b1)
    const_cost = float(((y - sigmoid_score(c0)) ** 2) @ w)
    redo = np.flatnonzero(~flat & (cost > const_cost))
    if redo.size:
        r0, r1 = np.full(redo.size, c0), np.zeros(redo.size)
        _newton(D[redo], y, w, r0, r1, np.arange(redo.size), cfg)
        rc = _costs(D[redo], y, w, r0, r1)
        better = rc < cost[redo]
        idx = redo[better]
        b0[idx], b1[idx], cost[idx] = r0[better], r1[better], rc[better]
    return b0, b1, cost


def _newton(D, y, w, b0, b1, active, cfg):
    """Newton iterations on the rows ``active``; updates ``b0``/``b1`` in place."""
    for _ in range(cfg.max_iters):
        if active.size == 0:
            break
        Da = D[active]
        c, g, h00, h01, h11 = beta_gradient(Da, y, w, b0[active], b1[active])
        gnorm = np.sqrt((g * g).sum(1))
        keep = gnorm > cfg.gtol
        active, Da, c, g = active[keep], Da[keep], c[keep], g[keep]
        h00, h01, h11 = h00[keep], h01[keep], h11[keep]
        if active.size == 0:
            break
        step, ok = _newton_direction(g, h00, h01, h11, cfg.damping)
        slope = (g * step).sum(1)
        newton = ok & (slope < 0)
        step[~newton] = -g[~newton]
        slope[~newton] = -(g[~newton] ** 2).sum(1)
        moved = _backtrack_betas(Da, y, w, b0, b1, active, c, step, slope, cfg)
        # Newton rows that failed get one gradient-descent attempt
        retry = ~moved & newton
        if retry.any():
            idx = active[retry]
            gs = -g[retry]
            moved[retry] = _backtrack_betas(Da[retry], y, w, b0, b1, idx, c[retry], gs,
                                            -(gs ** 2).sum(1), cfg)
        active = active[moved]


def _backtrack_betas(Da, y, w, b0, b1, rows, c0, step, slope, cfg):
    """Armijo backtracking along ``step``; updates b0/b1 in place for accepted rows."""
    moved = np.zeros(len(rows), dtype=bool)
    t = np.ones(len(rows))
    pending = np.arange(len(rows))
    for _ in range(cfg.max_backtracks):
        if pending.size == 0:
            break
        r = rows[pending]
        nb0 = b0[r] + t[pending] * step[pending, 0]
        nb1 = b1[r] + t[pending] * step[pending, 1]
        nc = _costs(Da[pending], y, w, nb0, nb1)
        ok = (nc <= c0[pending] + 1e-4 * t[pending] * slope[pending]) & (nc < c0[pending])
        acc = pending[ok]
        b0[rows[acc]] = nb0[ok]
        b1[rows[acc]] = nb1[ok]
        moved[acc] = True
        pending = pending[~ok]
        t[pending] *= 0.5
    return moved


def _soft_distances_of(bags, P, alpha):
    return bags.softmin(bags.distances(P), alpha)[0]


def fit_betas(prototype, bags, weights, soft: bool = True, softmin: SoftMinConfig | None = None,
              fit: FitConfig | None = None, start=None):
    """Best ``(beta0, beta1)`` for a fixed prototype.

    ``start`` warm-starts the solver; otherwise it begins at the
    spread-based initialization.
    """
    bags = _as_packed(bags)
    y = _labels(bags)
    w = _check_weights(weights, bags.n_bags)
    p = np.asarray(prototype, dtype=np.float64)[None, :]
    if soft:
        if softmin is None:
            raise ValueError("soft fit needs a SoftMinConfig")
        D = _soft_distances_of(bags, p, softmin.alpha)
    else:
        D = bags.exact_bag_distances(p[0])[None, :]
    b0 = b1 = None
    if start is not None:
        b0, b1 = np.array([start[0]], float), np.array([start[1]], float)
    b0, b1, _ = fit_betas_batch(D, y, w, b0, b1, (fit or FitConfig()).beta_solver)
    return float(b0[0]), float(b1[0])


# ---------------------------------------------------------------------------
# prototype subproblem


class _Objective:
    """Soft cost and its prototype gradient for a batch of prototypes."""

    def __init__(self, bags: PackedBags, y, w, softmin: SoftMinConfig):
        self.bags = bags
        self.y = y
        self.w = w
        self.alpha = softmin.alpha
        self.eps2 = softmin.epsilon ** 2

    def soft(self, P):
        return _soft_distances_of(self.bags, P, self.alpha)

    def value_and_grad(self, P, b0, b1, need_grad=True):
        cost, D, parts = self.value(P, b0, b1)
        if not need_grad:
            return cost, D, None
        return cost, D, self.grad(P, b1, parts)

    def value(self, P, b0, b1):
        """Cost and soft distances per row, plus what ``grad`` needs."""
        dist = self.bags.distances(P)
        D, pi = self.bags.softmin(dist, self.alpha, clip=False)
        f = sigmoid_score(b1[:, None] * D + b0[:, None])
        r = self.y - f
        return (r * r) @ self.w, D, (dist, D, pi, f, r)

    def grad(self, P, b1, parts, rows=None):
        """Prototype gradient, optionally for a subset ``rows`` of the evaluated batch."""
        dist, D, pi, f, r = parts
        if rows is not None:
            dist, D, pi, f, r = dist[rows], D[rows], pi[rows], f[rows], r[rows]
            P, b1 = P[rows], b1[rows]
        fp = 0.5 * (1.0 - f * f)
        dC_dD = -2.0 * self.w * r * fp * b1[:, None]
        idx = self.bags.bag_of
        coef = dC_dD[:, idx] * pi * (1.0 - self.alpha * (dist - D[:, idx]))
        coef /= np.sqrt(dist * dist + self.eps2)
        return coef.sum(1)[:, None] * P - coef @ self.bags.X


def prototype_gradient(clf: BaseClassifier, bags, weights, softmin: SoftMinConfig) -> np.ndarray:
    """Gradient of the soft cost with respect to the prototype."""
    bags = _as_packed(bags)
    obj = _Objective(bags, _labels(bags), _check_weights(weights, bags.n_bags), softmin)
    _, _, g = obj.value_and_grad(clf.prototype[None, :], np.array([clf.beta0]),
                                 np.array([clf.beta1]))
    return g[0]


def soft_cost_gradient(clf: BaseClassifier, bags, weights, softmin: SoftMinConfig):
    """``(cost, d/dbeta0, d/dbeta1, d/dprototype)`` of the soft cost."""
    bags = _as_packed(bags)
    y = _labels(bags)
    w = _check_weights(weights, bags.n_bags)
    obj = _Objective(bags, y, w, softmin)
    b0, b1 = np.array([clf.beta0]), np.array([clf.beta1])
    cost, D, gp = obj.value_and_grad(clf.prototype[None, :], b0, b1)
    _, g, *_ = beta_gradient(D, y, w, b0, b1)
    return float(cost[0]), float(g[0, 0]), float(g[0, 1]), gp[0]


def descend_prototypes(obj: _Objective, P, b0, b1, cfg: LineSearchConfig):
    """Backtracking gradient descent on every row of ``P`` with betas fixed.

    Returns ``(P, cost, D)``; the cost of each row never increases.  The
    first trial step is ``initial_step``.  Later trials use the
    Barzilai-Borwein step of the last accepted move (``spectral``), or
    twice the last accepted step when that is undefined or disabled.
    Every trial must pass the Armijo test.
    """
    P = np.array(P, dtype=np.float64)
    cost, D, grad = obj.value_and_grad(P, b0, b1)
    step = np.full(P.shape[0], cfg.initial_step)
    active = np.arange(P.shape[0])
    for _ in range(cfg.max_iters):
        g2 = (grad[active] ** 2).sum(1)
        active = active[g2 > 0]
        if active.size == 0:
            break
        g2 = (grad[active] ** 2).sum(1)
        t = step[active].copy()
        pending = np.arange(active.size)
        accepted = np.zeros(active.size, dtype=bool)
        old = cost[active].copy()
        for _ in range(cfg.max_backtracks + 1):
            if pending.size == 0:
                break
            rows = active[pending]
            trial = P[rows] - t[pending, None] * grad[rows]
            c, Dt, parts = obj.value(trial, b0[rows], b1[rows])
            ok = (c <= old[pending] - cfg.armijo * t[pending] * g2[pending]) & (c < old[pending])
            acc = rows[ok]
            gt = obj.grad(trial, b1[rows], parts, ok) if ok.any() else np.empty((0, P.shape[1]))
            step[acc] = t[pending][ok] / cfg.shrink
            if cfg.spectral:
                sk = trial[ok] - P[acc]
                yk = gt - grad[acc]
                sy = (sk * yk).sum(1)
                bb = (sk * sk).sum(1) / np.where(sy > 0, sy, 1.0)
                step[acc] = np.where(sy > 0, bb, step[acc])
            P[acc] = trial[ok]
            cost[acc] = c[ok]
            D[acc] = Dt[ok]
            grad[acc] = gt
            accepted[pending[ok]] = True
            pending = pending[~ok]
            t[pending] *= cfg.shrink
        rel = (old - cost[active]) / np.maximum(np.abs(old), 1e-300)
        active = active[accepted & (rel >= cfg.rel_tol)]
    return P, cost, D


class CandidatePool:
    """Discrete prototype candidates with precomputed soft distances to every bag."""

    def __init__(self, candidates, bags: PackedBags, alpha: float, chunk: int = 256):
        self.candidates = np.ascontiguousarray(np.asarray(candidates, dtype=np.float64))
        if self.candidates.ndim != 2 or self.candidates.shape[0] == 0:
            raise ValueError("candidate pool must be a non-empty matrix")
        self.alpha = alpha
        soft = np.empty((self.candidates.shape[0], bags.n_bags))
        for s in range(0, self.candidates.shape[0], chunk):
            dist = cdist(self.candidates[s:s + chunk], bags.X)
            soft[s:s + chunk] = bags.softmin(dist, alpha)[0]
        self.soft = soft

    def nearest(self, P) -> np.ndarray:
        P = np.atleast_2d(P)
        out = np.empty(P.shape[0], dtype=np.int64)
        for i, p in enumerate(P):
            out[i] = int(np.argmin(np.sum((self.candidates - p) ** 2, axis=1)))
        return out

    def best(self, y, w, b0, b1) -> np.ndarray:
        """Index of the cheapest candidate for each beta row (lowest index on ties)."""
        out = np.empty(len(b0), dtype=np.int64)
        for i in range(len(b0)):
            f = sigmoid_score(b1[i] * self.soft + b0[i])
            out[i] = int(np.argmin(((y - f) ** 2) @ w))
        return out


def fit_prototype_step(clf: BaseClassifier, bags, weights, softmin: SoftMinConfig,
                       fit: FitConfig | None = None, pool: CandidatePool | None = None):
    """One prototype update with the betas held fixed.

    Returns the new prototype.  In restricted mode the result is the
    candidate (default: a training instance) with the lowest soft cost.
    """
    fit = fit or FitConfig()
    bags = _as_packed(bags)
    y = _labels(bags)
    w = _check_weights(weights, bags.n_bags)
    b0, b1 = np.array([clf.beta0]), np.array([clf.beta1])
    if fit.restricted_mode:
        pool = pool or CandidatePool(bags.X, bags, softmin.alpha)
        return pool.candidates[pool.best(y, w, b0, b1)[0]].copy()
    obj = _Objective(bags, y, w, softmin)
    P, _, _ = descend_prototypes(obj, clf.prototype[None, :], b0, b1, fit.prototype_step)
    return P[0]


# ---------------------------------------------------------------------------
# coordinate descent over all restarts


@dataclass
class DescentResult:
    prototypes: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray
    costs: np.ndarray
    iterations: np.ndarray
    history: list | None = None

    def classifier(self, i: int) -> BaseClassifier:
        return BaseClassifier(self.prototypes[i], self.beta0[i], self.beta1[i])


def coordinate_descent(bags, weights, starts, softmin: SoftMinConfig, fit: FitConfig | None = None,
                       pool: CandidatePool | None = None, trace: bool = False) -> DescentResult:
    """Alternate beta and prototype minimization from every starting prototype.

    With ``trace=True`` the soft cost after every coordinate step is kept in
    ``history`` (one list per start).
    """
    fit = fit or FitConfig()
    bags = _as_packed(bags)
    y = _labels(bags)
    w = _check_weights(weights, bags.n_bags)
    P = np.array(np.atleast_2d(starts), dtype=np.float64)
    R = P.shape[0]
    obj = _Objective(bags, y, w, softmin)
    newton = fit.beta_solver

    if fit.restricted_mode:
        if pool is None:
            pool = CandidatePool(bags.X, bags, softmin.alpha)
        cand = pool.nearest(P)
        P = pool.candidates[cand].copy()
        D = pool.soft[cand].copy()
    else:
        D = obj.soft(P)
    b0, b1, cost = fit_betas_batch(D, y, w, cfg=newton)
    history = [[float(c)] for c in cost] if trace else None
    iterations = np.zeros(R, dtype=np.int64)
    active = np.arange(R)
    for _ in range(fit.max_outer_iters):
        if active.size == 0:
            break
        prev = cost[active].copy()
        if fit.restricted_mode:
            cand = pool.best(y, w, b0[active], b1[active])
            P[active] = pool.candidates[cand]
            Da = pool.soft[cand]
            cp = _costs(Da, y, w, b0[active], b1[active])
        else:
            Pa, cp, Da = descend_prototypes(obj, P[active], b0[active], b1[active],
                                            fit.prototype_step)
            P[active] = Pa
        D[active] = Da
        nb0, nb1, cb = fit_betas_batch(Da, y, w, b0[active].copy(), b1[active].copy(), newton)
        b0[active], b1[active], cost[active] = nb0, nb1, cb
        iterations[active] += 1
        if trace:
            for k, r in enumerate(active):
                history[r].extend([float(cp[k]), float(cb[k])])
        active = active[np.abs(prev - cb) >= fit.tol]
    return DescentResult(P, b0, b1, cost, iterations, history)


def _center_array(centers) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(centers, "centers", centers), dtype=np.float64))


def learn_base_classifier(bags, weights, centers, softmin: SoftMinConfig,
                          fit: FitConfig | None = None, pool: CandidatePool | None = None):
    """Fit one base classifier, restarting from each cluster center.

    Returns ``(classifier, soft training cost)`` of the best restart; ties go
    to the earliest center.
    """
    fit = fit or FitConfig()
    C = _center_array(centers)
    if fit.restarts is not None:
        C = C[:fit.restarts]
    res = coordinate_descent(bags, weights, C, softmin, fit, pool)
    best = int(np.argmin(res.costs))
    return res.classifier(best), float(res.costs[best])
