"""Fitting the population distribution to paired BrAC/TAC episodes.

The fit minimizes the squared misfit between model TAC and measured TAC,
summed over episodes and over the measured TAC instants, with the measured
BrAC driving the recursion as a zero-order-hold input.  Decision variables
are the support upper bounds, the normal location, and the Cholesky factor of
the covariance; the lower support bounds stay pinned at zero unless
explicitly released.

The gradient is exact for the discrete model: an adjoint pass per episode
plus parameter derivatives of the discrete-time operators.  Derivatives of
the flow map use the block matrix exponential
exp(tau * [[A, dA], [0, A]]) whose top-right block is dAhat; derivatives of
the assembly weights are analytic in the location/covariance parameters and
central finite differences in the support bounds (moving the support moves
the integration cells themselves).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize

from . import density, forward_model
from .data_io import Episode
from .density import PopulationParams
from .errors import ConfigurationError, NumericalError, ParameterError
from .grid_basis import DiscretizationGrid

_BOUND_FD_STEP = 1e-6
_DEFAULT_TOL = 1e-6
_DEFAULT_MAX_ITER = 500


def active_parameter_names(fit_lower: bool = False) -> tuple[str, ...]:
    """Order of the decision variables in packed vectors and gradients."""
    base = ("b1", "b2", "mu1", "mu2", "l11", "l21", "l22")
    return (("a1", "a2") + base) if fit_lower else base


def pack_theta(params: PopulationParams, fit_lower: bool = False) -> np.ndarray:
    low = params.chol
    base = [params.b[0], params.b[1], params.mu[0], params.mu[1],
            low[0, 0], low[1, 0], low[1, 1]]
    if fit_lower:
        base = [params.a[0], params.a[1]] + base
    return np.array(base)


def unpack_theta(theta: np.ndarray, a: np.ndarray,
                 fit_lower: bool = False) -> PopulationParams:
    theta = np.asarray(theta, dtype=float)
    if fit_lower:
        a = theta[:2]
        theta = theta[2:]
    low = np.array([[theta[4], 0.0], [theta[5], theta[6]]])
    return PopulationParams(a=np.asarray(a, dtype=float), b=theta[:2],
                            mu=theta[2:4], sigma=low @ low.T)


def _check_episodes(episodes: list[Episode], grid: DiscretizationGrid,
                    need_brac: bool = True) -> None:
    if not episodes:
        raise ConfigurationError("need at least one episode")
    for ep in episodes:
        if abs(ep.tau - grid.tau) > 1e-12:
            raise ConfigurationError(
                f"episode {ep.ident!r} has tau {ep.tau}, grid has {grid.tau}")
        if need_brac and not ep.has_brac:
            raise ConfigurationError(
                f"episode {ep.ident!r} has no BrAC channel; cannot train on it")
        if ep.fit_indices.size == 0:
            raise ConfigurationError(
                f"episode {ep.ident!r} has no usable TAC instants on the grid")


def _episode_residual_cost(ops: forward_model.DiscreteTimeOps, ep: Episode) -> float:
    y = forward_model.simulate(ops, ep.u[:-1])
    resid = y[ep.fit_indices - 1] - ep.y[ep.fit_indices]
    return float(resid @ resid)


def cost(params: PopulationParams, episodes: list[Episode],
         grid: DiscretizationGrid, order: int = 5) -> float:
    """Sum of squared TAC residuals at the measured instants, all episodes."""
    _check_episodes(episodes, grid)
    grid = grid.rebind(params)
    sys = forward_model.assemble(params, grid, order=order)
    ops = forward_model.discrete_time(sys)
    if len(episodes) == 1:
        return _episode_residual_cost(ops, episodes[0])
    with ThreadPoolExecutor(max_workers=min(8, len(episodes))) as pool:
        parts = list(pool.map(lambda ep: _episode_residual_cost(ops, ep), episodes))
    return float(sum(parts))


@dataclass(frozen=True)
class _OperatorDerivatives:
    """Parameter derivatives of the discrete-time operator blocks.

    Leading axis runs over the active parameters in packed order.
    """

    names: tuple[str, ...]
    d_ahat: np.ndarray   # (n_par, ncells, nb, nb)
    d_bhat: np.ndarray   # (n_par, ncells, nb)
    d_p: np.ndarray      # (n_par, ncells); output derivative is d_p * trace0


def _weight_derivative_stack(params: PopulationParams, grid: DiscretizationGrid,
                             weights: density.CellWeights,
                             fit_lower: bool) -> tuple[tuple[str, ...], np.ndarray]:
    """Stack (dp, dw1, dw2) per active parameter, flattened over cells."""
    names = active_parameter_names(fit_lower)
    analytic = density.moment_weight_derivatives(
        params, grid.pm1, grid.pm2, weights=weights, order=weights.order)

    def flat(cw: density.CellWeights) -> np.ndarray:
        return np.stack([cw.p.ravel(order="F"), cw.w1.ravel(order="F"),
                         cw.w2.ravel(order="F")])

    def bound_fd(which: str, index: int) -> np.ndarray:
        vec = params.b.copy() if which == "b" else params.a.copy()
        h = _BOUND_FD_STEP * max(1.0, abs(vec[index]))
        plus = vec.copy()
        plus[index] += h
        minus = vec.copy()
        minus[index] -= h
        sides = []
        for v in (plus, minus):
            pp = params.replace(**{which: v})
            gg = grid.rebind(pp)
            sides.append(flat(density.moment_weights_fixed(
                pp, gg.pm1, gg.pm2, order=weights.order)))
        return (sides[0] - sides[1]) / (2.0 * h)

    stacks = []
    for name in names:
        if name in density.DERIV_NAMES:
            stacks.append(flat(analytic[name]))
        elif name in ("b1", "b2"):
            stacks.append(bound_fd("b", int(name[1]) - 1))
        else:  # a1, a2
            stacks.append(bound_fd("a", int(name[1]) - 1))
    return names, np.stack(stacks)  # (n_par, 3, ncells)


def _operator_derivatives(params: PopulationParams, grid: DiscretizationGrid,
                          sys: forward_model.DiscreteSystem,
                          ops: forward_model.DiscreteTimeOps,
                          weights: density.CellWeights,
                          fit_lower: bool) -> _OperatorDerivatives:
    names, dw = _weight_derivative_stack(params, grid, weights, fit_lower)
    n_par = len(names)
    nc = sys.n_cells
    nb = sys.block_size
    gram = grid.spatial.gram
    minv_s = np.linalg.solve(gram.mass, gram.stiffness)
    minv_t1 = np.linalg.solve(gram.mass, gram.trace1)
    a_blocks = forward_model._cell_generators(sys)

    d_p, d_w1, d_w2 = dw[:, 0, :], dw[:, 1, :], dw[:, 2, :]
    # zero-mass cells contribute nothing and their weight derivatives have
    # underflowed with them; freeze their conditional means
    alive = sys.p > 0.0
    safe_p = np.where(alive, sys.p, 1.0)
    d_qbar1 = np.where(alive, (d_w1 - sys.qbar1[None, :] * d_p) / safe_p, 0.0)
    d_qbar2 = np.where(alive, (d_w2 - sys.qbar2[None, :] * d_p) / safe_p, 0.0)
    d_p = np.where(alive, d_p, 0.0)
    # dA_c = -dqbar1 * M^{-1} S for every parameter
    d_a = -d_qbar1[:, :, None, None] * minv_s[None, None, :, :]

    # top-right block of exp(tau [[A, dA], [0, A]]) is the flow-map derivative
    big = np.zeros((n_par, nc, 2 * nb, 2 * nb))
    big[:, :, :nb, :nb] = a_blocks[None]
    big[:, :, nb:, nb:] = a_blocks[None]
    big[:, :, :nb, nb:] = d_a
    d_ahat = expm(ops.tau * big.reshape(n_par * nc, 2 * nb, 2 * nb))[
        :, :nb, nb:].reshape(n_par, nc, nb, nb)

    mb = sys.qbar2[:, None] * minv_t1[None, :]
    d_mb = d_qbar2[:, :, None] * minv_t1[None, None, :]
    ahat_minus_i = ops.ahat - np.eye(nb)[None]
    rhs = (np.einsum("pcij,cj->pci", d_ahat, mb)
           + np.einsum("cij,pcj->pci", ahat_minus_i, d_mb)
           - np.einsum("pcij,cj->pci", d_a, ops.bhat))
    d_bhat = np.linalg.solve(a_blocks[None], rhs[..., None])[..., 0]
    return _OperatorDerivatives(names=names, d_ahat=d_ahat, d_bhat=d_bhat, d_p=d_p)


def _episode_gradient_terms(ops: forward_model.DiscreteTimeOps,
                            dops: _OperatorDerivatives,
                            ep: Episode) -> tuple[float, np.ndarray]:
    u = ep.u[:-1]
    states, y = forward_model.state_trajectory(ops, u)
    steps = u.size
    rvec = np.zeros(steps + 1)
    resid = y[ep.fit_indices - 1] - ep.y[ep.fit_indices]
    rvec[ep.fit_indices] = resid
    ep_cost = float(resid @ resid)

    # adjoint sweep: lam_j = Ahat^T lam_{j+1} + 2 r_j C^T, run down from steps
    nc, nb = ops.bhat.shape
    lams = np.zeros((steps + 1, nc, nb))
    lam = np.zeros((nc, nb))
    for j in range(steps, 0, -1):
        lam = np.einsum("cji,cj->ci", ops.ahat, lam) + 2.0 * rvec[j] * ops.c_out
        lams[j] = lam

    term_a = np.einsum("jci,pcik,jck->p", lams[1:], dops.d_ahat, states[:-1])
    term_b = np.einsum("jci,pci,j->p", lams[1:], dops.d_bhat, u)
    # output operator depends on the parameters through the cell masses only
    tx = states[1:, :, 0]  # left-endpoint trace of each cell state
    term_c = np.einsum("j,pc,jc->p", 2.0 * rvec[1:], dops.d_p, tx)
    return ep_cost, term_a + term_b + term_c


def cost_and_gradient(params: PopulationParams, episodes: list[Episode],
                      grid: DiscretizationGrid, fit_lower: bool = False,
                      order: int = 5) -> tuple[float, np.ndarray]:
    """Total cost and its gradient in the packed parameter vector."""
    _check_episodes(episodes, grid)
    grid = grid.rebind(params)
    weights = density.moment_weights(params, grid.pm1, grid.pm2, order=order)
    sys = forward_model.assemble_from_weights(weights, grid)
    ops = forward_model.discrete_time(sys)
    dops = _operator_derivatives(params, grid, sys, ops, weights, fit_lower)
    if len(episodes) == 1:
        results = [_episode_gradient_terms(ops, dops, episodes[0])]
    else:
        with ThreadPoolExecutor(max_workers=min(8, len(episodes))) as pool:
            results = list(pool.map(
                lambda ep: _episode_gradient_terms(ops, dops, ep), episodes))
    total = float(sum(c for c, _ in results))
    grad = np.sum([g for _, g in results], axis=0)
    return total, grad


def gradient(params: PopulationParams, episodes: list[Episode],
             grid: DiscretizationGrid, fit_lower: bool = False,
             order: int = 5) -> np.ndarray:
    """Gradient of the fit cost; components follow active_parameter_names."""
    return cost_and_gradient(params, episodes, grid, fit_lower, order)[1]


# ---------------------------------------------------------------------------
# per-episode deterministic calibration, used to seed the population fit


@dataclass(frozen=True)
class DeterministicFit:
    """Single-subject parameter estimate for one episode."""

    q: np.ndarray
    cost: float
    boundary: bool    # optimizer pushed against the feasible-box boundary
    ident: str = ""


_NM_STARTS = (0.25, 0.5, 1.0)


def fit_episode_deterministic(ep: Episode, grid: DiscretizationGrid,
                              q_max: float = 8.0) -> DeterministicFit:
    """Fit the single-subject model to one episode by Nelder-Mead.

    Multistart over a coarse grid of initial parameter pairs; the feasible box
    (0, q_max]^2 is enforced by an infinite penalty outside.  A result pushed
    to the boundary (vanishing input gain, or pegged at q_max) is flagged:
    it usually means the TAC channel carries no usable signal.
    """
    _check_episodes([ep], grid)
    u = ep.u[:-1]

    def objective(q):
        if not (0.0 < q[0] <= q_max and 0.0 < q[1] <= q_max):
            return math.inf
        det = forward_model.deterministic_ops(q, grid.spatial, grid.tau)
        y = forward_model.simulate_deterministic(det, u)
        resid = y[ep.fit_indices - 1] - ep.y[ep.fit_indices]
        return float(resid @ resid)

    best = None
    for s1 in _NM_STARTS:
        for s2 in _NM_STARTS:
            res = minimize(objective, np.array([s1, s2]), method="Nelder-Mead",
                           options={"maxiter": 400, "xatol": 1e-6, "fatol": 1e-12})
            if best is None or res.fun < best.fun:
                best = res
    q = np.asarray(best.x, dtype=float)
    eps = 1e-3
    boundary = bool(q[0] < eps or q[1] < eps
                    or q[0] > q_max - eps or q[1] > q_max - eps)
    return DeterministicFit(q=q, cost=float(best.fun), boundary=boundary,
                            ident=ep.ident)


def initial_guess(per_episode_qs, ridge: float = 1e-4) -> PopulationParams:
    """Population starting point from per-episode estimates.

    Location and covariance are the sample mean and covariance of the
    estimates (ridged when near-singular); the support is [0, mu + 4 sigma]
    componentwise.
    """
    qs = np.asarray(per_episode_qs, dtype=float).reshape(-1, 2)
    if qs.shape[0] == 0:
        raise ConfigurationError("need at least one per-episode estimate")
    mu = qs.mean(axis=0)
    if qs.shape[0] > 1:
        sig = np.cov(qs, rowvar=False)
    else:
        sig = np.zeros((2, 2))
    if np.linalg.eigvalsh(sig).min() < ridge:
        sig = sig + ridge * np.eye(2)
    b = mu + 4.0 * np.sqrt(np.diag(sig))
    return PopulationParams(a=np.zeros(2), b=b, mu=mu, sigma=sig)


# ---------------------------------------------------------------------------
# population-level optimization


@dataclass
class FitResult:
    """Outcome of a population fit."""

    params: PopulationParams
    cost: float
    grad_norm: float        # sup norm of the projected gradient at the end
    converged: bool
    n_iter: int
    message: str
    fit_lower: bool
    log: list[dict] = field(default_factory=list)
    per_episode: list[DeterministicFit] = field(default_factory=list)

    def save(self, params_path, log_path=None) -> None:
        density.save_params(self.params, params_path)
        if log_path is not None:
            with open(log_path, "w", encoding="ascii") as fh:
                for rec in self.log:
                    fh.write(json.dumps(rec) + "\n")
                fh.write(json.dumps({
                    "event": "done", "cost": self.cost,
                    "grad_norm": self.grad_norm, "converged": self.converged,
                    "iterations": self.n_iter, "message": self.message,
                }) + "\n")


def _bounds(fit_lower: bool) -> list[tuple[float, float]]:
    base = [(1e-2, 50.0), (1e-2, 50.0),      # support upper bounds
            (-10.0, 10.0), (-10.0, 10.0),    # location
            (1e-6, 10.0), (-10.0, 10.0), (1e-6, 10.0)]  # chol entries
    if fit_lower:
        base = [(0.0, 49.0), (0.0, 49.0)] + base
    return base


def _projected_grad_norm(theta: np.ndarray, grad: np.ndarray,
                         bounds: list[tuple[float, float]]) -> float:
    pg = grad.copy()
    for i, (lo, hi) in enumerate(bounds):
        if theta[i] <= lo + 1e-12 and grad[i] > 0:
            pg[i] = 0.0
        if theta[i] >= hi - 1e-12 and grad[i] < 0:
            pg[i] = 0.0
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def fit_population(episodes: list[Episode], grid: DiscretizationGrid,
                   init: PopulationParams | None = None, *,
                   fit_lower: bool = False, tol: float = _DEFAULT_TOL,
                   max_iter: int = _DEFAULT_MAX_ITER, order: int = 5) -> FitResult:
    """Projected quasi-Newton fit of the population distribution.

    Stops when the projected-gradient sup norm drops below tol * (1 + cost) or
    after max_iter iterations.  When no starting point is supplied, each
    episode is first fit deterministically and the estimates seed the
    population parameters.
    """
    _check_episodes(episodes, grid)
    per_episode: list[DeterministicFit] = []
    if init is None:
        per_episode = [fit_episode_deterministic(ep, grid) for ep in episodes]
        init = initial_guess([f.q for f in per_episode])
    bounds = _bounds(fit_lower)
    theta0 = np.clip(pack_theta(init, fit_lower),
                     [lo for lo, _ in bounds], [hi for _, hi in bounds])
    fixed_a = init.a.copy()
    log: list[dict] = []
    cache: dict[str, object] = {}

    def objective(theta):
        try:
            params = unpack_theta(theta, fixed_a, fit_lower)
            val, grad = cost_and_gradient(params, episodes, grid, fit_lower, order)
        except (ParameterError, NumericalError, np.linalg.LinAlgError):
            return math.inf, np.zeros_like(theta)
        cache["theta"] = theta.copy()
        cache["val"] = val
        cache["grad"] = grad
        return val, grad

    def callback(xk):
        val = cache.get("val", math.nan)
        grad = cache.get("grad")
        pg = _projected_grad_norm(xk, grad, bounds) if grad is not None else math.nan
        log.append({"event": "iterate", "iteration": len(log), "cost": val,
                    "projected_grad": pg, "theta": np.asarray(xk).tolist()})
        if grad is not None and np.all(cache["theta"] == xk) \
                and pg <= tol * (1.0 + val):
            raise StopIteration

    res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                   callback=callback,
                   options={"maxiter": max_iter, "maxfun": 40 * max_iter,
                            "gtol": 0.0, "ftol": 1e-14})
    theta = np.asarray(res.x, dtype=float)
    params = unpack_theta(theta, fixed_a, fit_lower)
    try:
        val, grad = cost_and_gradient(params, episodes, grid, fit_lower, order)
        pg = _projected_grad_norm(theta, grad, bounds)
        converged = pg <= tol * (1.0 + val)
    except (ParameterError, NumericalError, np.linalg.LinAlgError):
        val = math.inf
        pg = math.inf
        converged = False
    return FitResult(params=params, cost=val, grad_norm=pg, converged=converged,
                     n_iter=int(res.nit), message=str(res.message),
                     fit_lower=fit_lower, log=log, per_episode=per_episode)
