"""Boosting loops, hyperparameter optimization, and the comparison baselines.

The main fit jointly learns a tree ensemble F and the covariance
parameters theta by alternating a warm-started accelerated-gradient step
in log(theta) with a functional gradient step in F (a least-squares tree
fitted to the negative gradient of the Laplace objective, damped by the
learning rate).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .laplace import make_engine
from .likelihoods import get_likelihood
from .structures import GpStructure, GroupedStructure, make_structure
from .trees import RegressionTree, fit_tree

__all__ = [
    "BoostConfig",
    "BoostedModel",
    "LinearModel",
    "fit_lagaboost",
    "fit_lagaboost_oos",
    "fit_linear_baseline",
    "fit_independent_boosting",
    "optimize_theta",
]

MODEL_FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    pass


@dataclass
class BoostConfig:
    n_iter: int = 100
    learning_rate: float = 0.1
    max_depth: int = 5
    min_samples_leaf: int = 10
    theta0: np.ndarray | None = None
    hyper_max_steps: int = 10
    hyper_tol: float = 1e-6
    momentum: bool = True
    hyper_full: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if not (0.0 < self.learning_rate <= 1.0):
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("invalid tree settings")


@dataclass
class BoostedModel:
    """Fitted ensemble plus everything prediction needs."""

    likelihood_kind: str
    f0: float
    nu: float
    trees: list
    theta: np.ndarray
    structure_kind: str
    structure_data: dict
    mode_b: np.ndarray
    mode_d1: np.ndarray
    mode_w: np.ndarray
    converged: bool
    fit_log: dict = field(default_factory=dict, repr=False)

    def predict_F(self, X, n_trees: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        F = np.full(X.shape[0], self.f0)
        trees = self.trees if n_trees is None else self.trees[:n_trees]
        for tree in trees:
            F += self.nu * tree.predict(X)
        return F

    def rebuild_structure(self):
        if self.structure_kind == "grouped":
            return GroupedStructure(np.asarray(self.structure_data["group_index"]),
                                    m=self.structure_data["m"])
        return GpStructure(np.asarray(self.structure_data["locations"]))

    def to_json(self) -> str:
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "model": "lagaboost",
            "likelihood": self.likelihood_kind,
            "f0": self.f0,
            "nu": self.nu,
            "theta": self.theta.tolist(),
            "structure_kind": self.structure_kind,
            "structure_data": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                               for k, v in self.structure_data.items()},
            "mode_b": self.mode_b.tolist(),
            "mode_d1": self.mode_d1.tolist(),
            "mode_w": self.mode_w.tolist(),
            "converged": self.converged,
            "trees": [t.to_dict() for t in self.trees],
        }
        # repr-based float encoding round-trips doubles exactly
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "BoostedModel":
        doc = json.loads(text)
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError("unsupported model format version")
        return cls(
            likelihood_kind=doc["likelihood"],
            f0=doc["f0"],
            nu=doc["nu"],
            trees=[RegressionTree.from_dict(t) for t in doc["trees"]],
            theta=np.asarray(doc["theta"], dtype=float),
            structure_kind=doc["structure_kind"],
            structure_data=doc["structure_data"],
            mode_b=np.asarray(doc["mode_b"], dtype=float),
            mode_d1=np.asarray(doc["mode_d1"], dtype=float),
            mode_w=np.asarray(doc["mode_w"], dtype=float),
            converged=doc["converged"],
        )


def _warm(engine, state):
    if state is None:
        return None
    return state.cache.get("alpha", state.b)


def optimize_theta(engine, F, theta, warm_state=None, *, max_steps=10, tol=1e-6,
                   momentum=True, lr0=0.2):
    """Accelerated gradient descent on log(theta) with backtracking.

    Halves the step on an objective increase (dropping momentum for that
    step); stops on relative objective change below ``tol`` or after
    ``max_steps`` accepted steps. Returns (theta, state, info).
    """
    lt = np.log(np.asarray(theta, dtype=float))
    state = engine.find_mode(F, np.exp(lt), warm_start=_warm(engine, warm_state))
    lt_prev = lt.copy()
    lr = lr0
    info = {"steps": 0, "stalled": False}
    for step in range(1, max_steps + 1):
        mom = (step - 1.0) / (step + 2.0) if momentum else 0.0
        look = lt + mom * (lt - lt_prev)
        state_look = (state if mom == 0.0
                      else engine.find_mode(F, np.exp(look), warm_start=_warm(engine, state)))
        grad = engine.grad_theta_log(state_look)
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite hyperparameter gradient")
        accepted = False
        use_look, use_state = look, state_look
        for halving in range(40):
            cand = use_look - lr * grad
            state_c = engine.find_mode(F, np.exp(cand), warm_start=_warm(engine, use_state))
            if state_c.nll <= state.nll:
                accepted = True
                break
            lr *= 0.5
            if use_look is not lt:
                # momentum overshoot: restart from the current iterate
                use_look, use_state = lt, state
                grad = engine.grad_theta_log(state)
        if not accepted:
            info["stalled"] = True
            break
        rel = abs(state.nll - state_c.nll) / max(1.0, abs(state.nll))
        lt_prev, lt = lt, cand
        state = state_c
        info["steps"] = step
        lr = min(lr * 1.5, 10.0)
        if rel < tol:
            break
    return np.exp(lt), state, info


def _fit_intercept(engine, theta, n, lo=-10.0, hi=10.0, tol=1e-10):
    """Scalar minimizer of the Laplace objective over a constant F."""

    def deriv(c):
        st = engine.find_mode(np.full(n, c), theta)
        return float(np.sum(engine.grad_F(st)))

    c = 0.0
    for _ in range(50):
        g = deriv(c)
        h = 1e-5
        g2 = (deriv(c + h) - deriv(c - h)) / (2.0 * h)
        if g2 <= 0 or not np.isfinite(g2):
            break
        step = g / g2
        c_new = c - step
        if not (lo <= c_new <= hi):
            break
        if abs(step) < tol:
            return c_new
        c = c_new
    # bisection fallback on the derivative
    a, b = lo, hi
    ga, gb = deriv(a), deriv(b)
    if ga > 0 or gb < 0:
        return float(np.clip(c, lo, hi))
    for _ in range(200):
        mid = 0.5 * (a + b)
        gm = deriv(mid)
        if gm > 0:
            b = mid
        else:
            a = mid
        if b - a < tol:
            break
    return 0.5 * (a + b)


def fit_lagaboost(X, y, likelihood, structure, config: BoostConfig,
                  theta_fixed=None, trace_nll: bool = False) -> BoostedModel:
    """LaGaBoost main loop: per iteration a hyperparameter coordinate-descent
    step (skipped when ``theta_fixed`` is given) followed by a damped
    functional gradient step with a least-squares tree."""
    X = np.asarray(X, dtype=float)
    if isinstance(likelihood, str):
        likelihood = get_likelihood(likelihood)
    engine = make_engine(likelihood, structure, y)
    n = X.shape[0]

    if theta_fixed is not None:
        theta = structure.check_theta(theta_fixed)
    elif config.theta0 is not None:
        theta = structure.check_theta(config.theta0)
    else:
        theta = structure.default_theta()

    f0 = _fit_intercept(engine, theta, n)
    F = np.full(n, f0)
    trees = []
    state = None
    log = {"nll": [], "theta": [], "theta_opt_calls": 0, "newton_iters": []}
    hyper_steps = 10_000 if config.hyper_full else config.hyper_max_steps

    for it in range(config.n_iter):
        if theta_fixed is None:
            theta, state, _ = optimize_theta(
                engine, F, theta, warm_state=state, max_steps=hyper_steps,
                tol=config.hyper_tol, momentum=config.momentum)
            log["theta_opt_calls"] += 1
        else:
            state = engine.find_mode(F, theta, warm_start=_warm(engine, state))
        if not state.converged:
            raise NumericalError(f"Laplace mode finding failed at iteration {it}")
        grad = engine.grad_F(state)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite functional gradient at iteration {it}")
        if trace_nll:
            log["nll"].append(state.nll)
            log["theta"].append(theta.copy())
            log["newton_iters"].append(state.newton_iters)
        tree = fit_tree(X, -grad, config.max_depth, config.min_samples_leaf)
        F = F + config.learning_rate * tree.predict(X)
        trees.append(tree)

    state = engine.find_mode(F, theta, warm_start=_warm(engine, state))
    if trace_nll:
        log["nll"].append(state.nll)
    log["final_nll"] = state.nll
    log["stationarity"] = state.stationarity

    if structure.kind == "grouped":
        sdata = {"group_index": structure.group_index, "m": structure.m}
    else:
        sdata = {"locations": structure.locations}
    return BoostedModel(
        likelihood_kind=likelihood.kind, f0=f0, nu=config.learning_rate,
        trees=trees, theta=theta, structure_kind=structure.kind,
        structure_data=sdata, mode_b=state.b, mode_d1=state.d1,
        mode_w=state.w, converged=state.converged, fit_log=log)


def make_folds(n, k, group_index=None, seed=0):
    """Fold assignment of length n; stratified by group when one is given
    (per-group counts across folds differ by at most one)."""
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    if group_index is None:
        perm = rng.permutation(n)
        folds[perm] = np.arange(n) % k
    else:
        group_index = np.asarray(group_index)
        offset = 0
        for g in np.unique(group_index):
            rows = np.flatnonzero(group_index == g)
            rows = rng.permutation(rows)
            folds[rows] = (np.arange(rows.size) + offset) % k
            offset += rows.size
    return folds


def _sub_structure(structure, rows):
    if structure.kind == "grouped":
        return GroupedStructure(structure.group_index[rows], m=structure.m)
    return GpStructure(structure.locations[rows])


def fit_lagaboost_oos(X, y, likelihood, structure, config: BoostConfig,
                      folds: int = 4) -> BoostedModel:
    """Two-stage fit: estimate theta from out-of-sample predictions of F,
    then refit the ensemble on the full data with theta frozen."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if isinstance(likelihood, str):
        likelihood = get_likelihood(likelihood)
    n = X.shape[0]
    gi = structure.group_index if structure.kind == "grouped" else None
    fold_id = make_folds(n, folds, group_index=gi, seed=config.seed)

    F_oos = np.empty(n)
    for f in range(folds):
        val = fold_id == f
        if not val.any() or val.all():
            raise ValueError("empty training or validation fold")
        tr = ~val
        sub = _sub_structure(structure, np.flatnonzero(tr))
        model = fit_lagaboost(X[tr], y[tr], likelihood, sub, config)
        F_oos[val] = model.predict_F(X[val])

    engine = make_engine(likelihood, structure, y)
    theta0 = config.theta0 if config.theta0 is not None else structure.default_theta()
    theta_hat, _, _ = optimize_theta(engine, F_oos, theta0, max_steps=200, tol=1e-8,
                                     momentum=config.momentum)

    model = fit_lagaboost(X, y, likelihood, structure, config, theta_fixed=theta_hat)
    model.fit_log["oos_theta"] = theta_hat
    return model


@dataclass
class LinearModel:
    """Linear-prior-mean latent Gaussian baseline: F(x) = beta0 + x^T beta."""

    likelihood_kind: str
    beta: np.ndarray
    theta: np.ndarray
    structure_kind: str
    structure_data: dict
    mode_b: np.ndarray
    mode_d1: np.ndarray
    mode_w: np.ndarray
    converged: bool
    fit_log: dict = field(default_factory=dict, repr=False)

    def predict_F(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.beta[0] + X @ self.beta[1:]

    def rebuild_structure(self):
        return BoostedModel.rebuild_structure(self)


def fit_linear_baseline(X, y, likelihood, structure, config: BoostConfig,
                        max_outer: int = 1000, tol: float = 1e-6) -> LinearModel:
    """Alternating accelerated gradient steps on (intercept, beta) and theta."""
    X = np.asarray(X, dtype=float)
    if isinstance(likelihood, str):
        likelihood = get_likelihood(likelihood)
    engine = make_engine(likelihood, structure, y)
    n, p = X.shape
    Xi = np.hstack([np.ones((n, 1)), X])
    beta = np.zeros(p + 1)
    beta_prev = beta.copy()
    theta = config.theta0 if config.theta0 is not None else structure.default_theta()
    theta = structure.check_theta(theta)

    state = engine.find_mode(Xi @ beta, theta)
    nll = state.nll
    lr = 1.0 / n
    stalled = False
    for outer in range(1, max_outer + 1):
        nll_start = nll
        # Nesterov step on beta with backtracking
        mom = (outer - 1.0) / (outer + 2.0) if config.momentum else 0.0
        look = beta + mom * (beta - beta_prev)
        st_look = engine.find_mode(Xi @ look, theta, warm_start=_warm(engine, state))
        grad = Xi.T @ engine.grad_F(st_look)
        accepted = False
        use_look, use_state = look, st_look
        for _ in range(60):
            cand = use_look - lr * grad
            st_c = engine.find_mode(Xi @ cand, theta, warm_start=_warm(engine, use_state))
            if st_c.nll <= nll:
                accepted = True
                break
            lr *= 0.5
            if use_look is not beta:
                use_look, use_state = beta, state
                grad = Xi.T @ engine.grad_F(state)
        if accepted:
            beta_prev, beta = beta, cand
            state, nll = st_c, st_c.nll
            lr = min(lr * 2.0, 1.0)
        # theta step
        theta, state, info = optimize_theta(
            engine, Xi @ beta, theta, warm_state=state,
            max_steps=config.hyper_max_steps, tol=config.hyper_tol,
            momentum=config.momentum)
        nll = state.nll
        rel = abs(nll_start - nll) / max(1.0, abs(nll_start))
        if not accepted and info.get("stalled"):
            stalled = True
            break
        if rel < tol:
            break

    if structure.kind == "grouped":
        sdata = {"group_index": structure.group_index, "m": structure.m}
    else:
        sdata = {"locations": structure.locations}
    return LinearModel(
        likelihood_kind=likelihood.kind, beta=beta, theta=theta,
        structure_kind=structure.kind, structure_data=sdata,
        mode_b=state.b, mode_d1=state.d1, mode_w=state.w,
        converged=state.converged and not stalled,
        fit_log={"final_nll": nll, "outer_iters": outer, "stalled": stalled})


def fit_independent_boosting(X, y, likelihood, config: BoostConfig) -> BoostedModel:
    """Gradient boosting on the independent (no latent effects) likelihood.

    Any grouping ids or locations should already be appended to X as plain
    numeric columns by the caller.
    """
    X = np.asarray(X, dtype=float)
    if isinstance(likelihood, str):
        likelihood = get_likelihood(likelihood)
    y = likelihood.validate_response(y)
    n = X.shape[0]

    def loss_grad(F):
        d = likelihood.derivatives(y, F)
        return -np.sum(d.d0), -d.d1

    # scalar Newton for the constant initializer
    c = 0.0
    for _ in range(100):
        d = likelihood.derivatives(y, np.full(n, c))
        g, h = -np.sum(d.d1), -np.sum(d.d2)
        if h <= 0:
            break
        step = g / h
        c -= step
        if abs(step) < 1e-12:
            break
    f0 = float(np.clip(c, -10.0, 10.0))

    F = np.full(n, f0)
    trees = []
    for _ in range(config.n_iter):
        _, grad = loss_grad(F)
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient in independent boosting")
        tree = fit_tree(X, -grad, config.max_depth, config.min_samples_leaf)
        F = F + config.learning_rate * tree.predict(X)
        trees.append(tree)

    loss, _ = loss_grad(F)
    return BoostedModel(
        likelihood_kind=likelihood.kind, f0=f0, nu=config.learning_rate,
        trees=trees, theta=np.zeros(0), structure_kind="none",
        structure_data={}, mode_b=np.zeros(0), mode_d1=np.zeros(0),
        mode_w=np.zeros(0), converged=True, fit_log={"final_nll": float(loss)})
