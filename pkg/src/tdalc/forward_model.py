"""Galerkin discretization of the population diffusion model.

State space: tensor products of spatial hats with indicator functions of the
parameter cells, under the density-weighted inner product.  Because the
indicators of distinct cells are orthogonal, every operator in the weak form
is block diagonal over parameter cells, and each cell block is the classical
single-subject Galerkin system evaluated at that cell's conditional-mean
parameters, scaled by the cell mass.  Assembly and time stepping exploit the
block structure throughout; dense views exist for inspection and tests.

The continuous semigroup is discretized exactly on each sampling interval by
the matrix exponential (zero-order hold on the input), which makes the
discrete flow map a true semigroup: stepping with 2*tau equals stepping twice
with tau.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import density
from .errors import ConfigurationError, NumericalError, ParameterError
from .grid_basis import DiscretizationGrid, SpatialMesh


def block_diag_dense(blocks: np.ndarray) -> np.ndarray:
    """Assemble a dense block-diagonal matrix from stacked square blocks."""
    blocks = np.asarray(blocks)
    nc, nn, _ = blocks.shape
    out = np.zeros((nc * nn, nc * nn))
    for c in range(nc):
        out[c * nn:(c + 1) * nn, c * nn:(c + 1) * nn] = blocks[c]
    return out


@dataclass(frozen=True)
class DiscreteSystem:
    """Continuous-time Galerkin matrices in per-cell block form.

    Flat state ordering: spatial index fastest, then the first parameter cell
    index, then the second; cell c therefore owns the contiguous slice
    ``[c*nb, (c+1)*nb)`` of the flat state, with ``nb`` spatial basis size.

    mass_blocks[c]   cell mass times the spatial mass matrix
    op_blocks[c]     minus (cell mass * boundary0 + q1-weight * stiffness)
    input_cells[c]   q2-weight times the right-endpoint trace; this is both
                     the c-th column block of the cell-input operator and the
                     c-th block of the scalar-input vector
    output_blocks[c] cell mass times the left-endpoint trace
    """

    grid: DiscretizationGrid
    p: np.ndarray            # cell masses, flat cell order
    qbar1: np.ndarray        # per-cell conditional mean of the diffusivity
    qbar2: np.ndarray        # per-cell conditional mean of the input gain
    mass_blocks: np.ndarray
    op_blocks: np.ndarray
    input_cells: np.ndarray
    output_blocks: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.p.size

    @property
    def block_size(self) -> int:
        return self.mass_blocks.shape[1]

    @property
    def dim(self) -> int:
        return self.n_cells * self.block_size

    def dense_mass(self) -> np.ndarray:
        return block_diag_dense(self.mass_blocks)

    def dense_op(self) -> np.ndarray:
        return block_diag_dense(self.op_blocks)

    def dense_input_scalar(self) -> np.ndarray:
        return self.input_cells.reshape(-1)

    def dense_input_cells(self) -> np.ndarray:
        nc, nb = self.input_cells.shape
        out = np.zeros((nc * nb, nc))
        for c in range(nc):
            out[c * nb:(c + 1) * nb, c] = self.input_cells[c]
        return out

    def dense_output(self) -> np.ndarray:
        return self.output_blocks.reshape(-1)


def _flat_cells(arr: np.ndarray) -> np.ndarray:
    """(m1, m2) cell array -> flat vector with the first index fastest."""
    return np.asarray(arr).ravel(order="F")


def assemble(params: density.PopulationParams, grid: DiscretizationGrid,
             order: int = 5) -> DiscreteSystem:
    """Assemble the density-weighted Galerkin system on ``grid``.

    The grid's parameter meshes must span the support box of ``params``.
    """
    if not grid.matches_support(params):
        raise ConfigurationError(
            f"grid support [{grid.pm1.lo}, {grid.pm1.hi}] x "
            f"[{grid.pm2.lo}, {grid.pm2.hi}] does not match the distribution "
            f"box {params.a.tolist()} .. {params.b.tolist()}")
    weights = density.moment_weights(params, grid.pm1, grid.pm2, order=order)
    return assemble_from_weights(weights, grid)


def assemble_from_weights(weights: density.CellWeights,
                          grid: DiscretizationGrid) -> DiscreteSystem:
    """Assembly core, usable with externally supplied (or perturbed) weights.

    A cell whose mass underflows to zero (a far tail of a tight density) is
    kept in the block structure with its conditional means replaced by the
    cell midpoint; its zero weights remove it from the input, the output,
    and the mass, so it contributes nothing to the dynamics.
    """
    p = _flat_cells(weights.p)
    w1 = _flat_cells(weights.w1)
    w2 = _flat_cells(weights.w2)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(w1)) and np.all(np.isfinite(w2))):
        raise NumericalError("cell weights are not finite")
    if np.any(p < 0.0):
        raise NumericalError(
            f"negative cell mass (min {p.min():.3e}); mass matrix would "
            f"not be positive definite")
    if not np.any(p > 0.0):
        raise NumericalError("all cell masses vanished; density does not "
                             "touch the support box")
    alive = p > 0.0
    c1, c2 = np.meshgrid(grid.pm1.centers, grid.pm2.centers, indexing="ij")
    centers1 = _flat_cells(c1)
    centers2 = _flat_cells(c2)
    with np.errstate(invalid="ignore"):
        qbar1 = np.where(alive, w1 / np.where(alive, p, 1.0), centers1)
        qbar2 = np.where(alive, w2 / np.where(alive, p, 1.0), centers2)
    if np.any(qbar1 <= 0.0):
        raise ParameterError(
            "support admits nonpositive diffusivity; cell conditional means "
            f"of q1 include {qbar1.min():.3e}")
    gram = grid.spatial.gram
    mass_blocks = p[:, None, None] * gram.mass
    op_blocks = -(p[:, None, None] * gram.boundary0
                  + w1[:, None, None] * gram.stiffness)
    input_cells = w2[:, None] * gram.trace1
    output_blocks = p[:, None] * gram.trace0
    return DiscreteSystem(grid=grid, p=p, qbar1=qbar1, qbar2=qbar2,
                          mass_blocks=mass_blocks, op_blocks=op_blocks,
                          input_cells=input_cells, output_blocks=output_blocks)


@dataclass(frozen=True)
class DiscreteTimeOps:
    """Zero-order-hold discretization of a DiscreteSystem at step tau.

    ahat[c] is the cell's discrete flow map exp(tau * A_c) with
    A_c = M^{-1} (-boundary0 - qbar1[c] * stiffness); bhat[c] is the
    discretized input column of cell c (it doubles as the scalar-input block,
    a constant-in-q input drives every cell with the same coefficient);
    c_out[c] pairs the state with the density-weighted left trace.
    """

    grid: DiscretizationGrid
    tau: float
    p: np.ndarray
    ahat: np.ndarray       # (ncells, nb, nb)
    bhat: np.ndarray       # (ncells, nb)
    c_out: np.ndarray      # (ncells, nb)

    @property
    def n_cells(self) -> int:
        return self.p.size

    def dense_ahat(self) -> np.ndarray:
        return block_diag_dense(self.ahat)

    def dense_bhat_scalar(self) -> np.ndarray:
        return self.bhat.reshape(-1)

    def dense_output(self) -> np.ndarray:
        return self.c_out.reshape(-1)

    def spectral_radius(self) -> float:
        eigs = np.linalg.eigvals(self.ahat)
        return float(np.max(np.abs(eigs)))


def _cell_generators(sys: DiscreteSystem) -> np.ndarray:
    """Per-cell continuous generators A_c (the cell mass cancels)."""
    gram = sys.grid.spatial.gram
    rhs = -(gram.boundary0[None, :, :]
            + sys.qbar1[:, None, None] * gram.stiffness[None, :, :])
    return np.linalg.solve(gram.mass, rhs)


def discrete_time(sys: DiscreteSystem, tau: float | None = None) -> DiscreteTimeOps:
    """Exact zero-order-hold discretization at step tau (default: grid tau)."""
    if tau is None:
        tau = sys.grid.tau
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    gram = sys.grid.spatial.gram
    a_blocks = _cell_generators(sys)
    ahat = expm(tau * a_blocks)
    minv_t1 = np.linalg.solve(gram.mass, gram.trace1)
    # continuous input column of cell c is qbar2[c] * M^{-1} trace1
    mb = sys.qbar2[:, None] * minv_t1[None, :]
    eye = np.eye(sys.block_size)
    rhs = np.einsum("cij,cj->ci", ahat - eye[None, :, :], mb)
    bhat = np.linalg.solve(a_blocks, rhs[..., None])[..., 0]
    return DiscreteTimeOps(grid=sys.grid, tau=tau, p=sys.p.copy(),
                           ahat=ahat, bhat=bhat, c_out=sys.output_blocks.copy())


def _check_input(ops: DiscreteTimeOps, u: np.ndarray, variant: str) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if variant == "scalar":
        if u.ndim != 1:
            raise ConfigurationError(f"scalar-variant input must be 1-d, got shape {u.shape}")
    elif variant == "tq":
        if u.ndim != 2 or u.shape[1] != ops.n_cells:
            raise ConfigurationError(
                f"tq-variant input must have shape (steps, {ops.n_cells}), got {u.shape}")
    else:
        raise ConfigurationError(f"unknown variant {variant!r}")
    return u


def state_trajectory(ops: DiscreteTimeOps, u: np.ndarray,
                     variant: str = "scalar") -> tuple[np.ndarray, np.ndarray]:
    """March the recursion from the zero state.

    Returns (states, y): states[j] is the block state before step j's output,
    j = 0..steps, and y[k-1] is the observed output after k steps, k = 1..steps.
    """
    u = _check_input(ops, u, variant)
    steps = u.shape[0]
    nc, nb = ops.bhat.shape
    states = np.zeros((steps + 1, nc, nb))
    y = np.zeros(steps)
    x = np.zeros((nc, nb))
    for j in range(steps):
        drive = ops.bhat * (u[j] if variant == "scalar" else u[j][:, None])
        x = np.einsum("cij,cj->ci", ops.ahat, x) + drive
        states[j + 1] = x
        y[j] = float(np.sum(ops.c_out * x))
    return states, y


def simulate(ops: DiscreteTimeOps, u: np.ndarray, variant: str = "scalar") -> np.ndarray:
    """Output samples y_1..y_steps for a zero-order-hold input u_0..u_{steps-1}."""
    _, y = state_trajectory(ops, u, variant)
    return y


@dataclass(frozen=True)
class Kernels:
    """Discrete impulse-response kernels of the population model.

    ``riesz[l-1]`` holds the cell coefficients of the lag-l kernel as a
    function of the random parameters (Riesz form: pairing with a cell
    coefficient vector goes through the cell masses), and ``mean[l-1]`` is the
    corresponding scalar kernel of the constant-in-q (scalar) variant.
    """

    riesz: np.ndarray     # (count, ncells)
    mean: np.ndarray      # (count,)
    p: np.ndarray
    tau: float

    @property
    def count(self) -> int:
        return self.riesz.shape[0]

    @property
    def functional(self) -> np.ndarray:
        """Coefficient form: row l dotted with cell coefficients gives the
        lag-l output contribution."""
        return self.riesz * self.p[None, :]


def impulse_kernels(ops: DiscreteTimeOps, count: int) -> Kernels:
    """First ``count`` impulse-response kernels h_l = C Ahat^{l-1} Bhat."""
    if count < 1:
        raise ConfigurationError(f"kernel count must be >= 1, got {count}")
    nc = ops.n_cells
    kappa = np.zeros((count, nc))
    v = ops.bhat.copy()
    for l in range(count):
        kappa[l] = np.sum(ops.c_out * v, axis=1)
        if l + 1 < count:
            v = np.einsum("cij,cj->ci", ops.ahat, v)
    # zero-mass cells carry no kernel; their Riesz coefficients stay zero
    safe_p = np.where(ops.p > 0.0, ops.p, 1.0)
    return Kernels(riesz=kappa / safe_p[None, :], mean=kappa.sum(axis=1),
                   p=ops.p.copy(), tau=ops.tau)


def convolve(kernels: Kernels, u: np.ndarray, variant: str = "scalar") -> np.ndarray:
    """Evaluate the output by kernel convolution instead of state marching."""
    u = np.asarray(u, dtype=float)
    steps = u.shape[0]
    if steps > kernels.count:
        raise ConfigurationError(
            f"need {steps} kernels for {steps} steps, have {kernels.count}")
    if variant == "scalar":
        kern = kernels.mean
        y = np.array([np.dot(kern[:k][::-1], u[:k]) for k in range(1, steps + 1)])
    elif variant == "tq":
        kern = kernels.functional
        y = np.array([np.sum(kern[:k][::-1] * u[:k]) for k in range(1, steps + 1)])
    else:
        raise ConfigurationError(f"unknown variant {variant!r}")
    return y


# ---------------------------------------------------------------------------
# deterministic single-subject model


@dataclass(frozen=True)
class DeterministicOps:
    """Discrete-time single-subject model at a fixed parameter pair."""

    q: np.ndarray
    tau: float
    ahat: np.ndarray
    bhat: np.ndarray
    c_out: np.ndarray


def deterministic_ops(q, mesh: SpatialMesh, tau: float) -> DeterministicOps:
    """Single-subject Galerkin model at q = (diffusivity, input gain)."""
    q = np.asarray(q, dtype=float).reshape(2)
    if q[0] <= 0:
        raise ParameterError(f"diffusivity must be positive, got {q[0]}")
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    gram = mesh.gram
    a = np.linalg.solve(gram.mass, -(gram.boundary0 + q[0] * gram.stiffness))
    ahat = expm(tau * a)
    mb = q[1] * np.linalg.solve(gram.mass, gram.trace1)
    bhat = np.linalg.solve(a, (ahat - np.eye(mesh.basis_size)) @ mb)
    return DeterministicOps(q=q, tau=tau, ahat=ahat, bhat=bhat, c_out=gram.trace0.copy())


def simulate_deterministic(det: DeterministicOps, u: np.ndarray) -> np.ndarray:
    """Output samples y_1..y_steps of the single-subject recursion."""
    u = np.asarray(u, dtype=float)
    y = np.zeros(u.shape[0])
    x = np.zeros(det.ahat.shape[0])
    for j in range(u.shape[0]):
        x = det.ahat @ x + det.bhat * u[j]
        y[j] = det.c_out @ x
    return y


def deterministic_kernels(det: DeterministicOps, count: int) -> np.ndarray:
    """Scalar impulse-response sequence of the single-subject model."""
    if count < 1:
        raise ConfigurationError(f"kernel count must be >= 1, got {count}")
    out = np.zeros(count)
    v = det.bhat.copy()
    for l in range(count):
        out[l] = det.c_out @ v
        if l + 1 < count:
            v = det.ahat @ v
    return out
