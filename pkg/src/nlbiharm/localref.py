"""Finite-difference reference solver for the classical clamped evolution.

The second-order Laplacian reads zeros outside the interior box (the collar
supplies at least two ghost layers), which mirrors the volume constraint of
the nonlocal problem and realizes the clamped boundary data.  Time stepping
reuses the Rothe minimizer verbatim with this operator injected, so a
nonlocal-versus-local comparison isolates the spatial operator.
"""

from __future__ import annotations

import numpy as np

from .grid import DomainSpec, Field
from .kernel import Stencil
from .nlop import apply_offset_stencil, check_exponent, p_flux_values
from .stepper import StepperConfig, Trajectory, evolve


class LocalOperator:
    """3-point (1D) / 5-point (2D) Laplacian with two-layer zero extension.

    Steps are minimized by damped Newton on banded matrices: the clamped
    bi-Laplacian step Hessian conditions like h/dx^4 and defeats first-order
    inner solvers at fine grids, while its small bandwidth makes direct
    factorization cheap.  Pass ``inner_solver="bb"`` to force the
    gradient-based minimizer of the nonlocal path instead (exponents two and
    above; below two every operator with a sparse matrix uses the reweighted
    solver).
    """

    name = "local"

    def __init__(self, spec: DomainSpec, inner_solver: str = "newton"):
        if spec.pad_cells < 2:
            raise ValueError(
                f"local operator needs two ghost layers, got pad_cells = {spec.pad_cells}"
            )
        if inner_solver not in ("newton", "bb"):
            raise ValueError(f"inner_solver must be newton or bb, got {inner_solver!r}")
        self.inner_solver = inner_solver
        self.spec = spec
        w = 1.0 / spec.dx**2
        if spec.dim == 1:
            offsets = np.array([[-1], [1]], dtype=np.int64)
        else:
            offsets = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]], dtype=np.int64)
        weights = np.full(len(offsets), w)
        # same carrier type as the nonlocal stencil; diag tracks the weight sum
        self.stencil = Stencil(
            offsets=offsets,
            weights=weights,
            dx=spec.dx,
            dim=spec.dim,
            diag=float(weights.sum()),
            half_moment=0.5 * float(np.sum(weights * (spec.dx) ** 2)),
        )
        # The step energy integrates |Delta_h u|^p over the padded domain,
        # exactly like the nonlocal energy.  On the zero extension the
        # operator is nonzero one layer outside the box, and that wall-flux
        # term (value u/dx^2, quadrature weight dx^dim) penalizes the normal
        # derivative at rate 1/dx, which is what selects the clamped rather
        # than the hinged plate in the dx -> 0 limit.  Restricting the energy
        # to the interior box drops the penalty and yields the hinged
        # operator, whose evolution the rescaled nonlocal runs move away
        # from as eps shrinks.
        self.energy_mask = None
        self._restricted = None

    def apply(self, values: np.ndarray) -> np.ndarray:
        return apply_offset_stencil(values, self.stencil.offsets, self.stencil.weights)

    def norm_bound(self) -> float:
        """Gershgorin bound 4 * dim / dx^2 on the operator norm."""
        return 4.0 * self.spec.dim / self.spec.dx**2

    def restricted_matrix(self):
        """Sparse matrix of (zero-extend, apply) : interior values -> operator
        values at every padded node (rows beyond one layer are empty)."""
        if self._restricted is None:
            import scipy.sparse

            spec = self.spec
            n = spec.n_interior
            n_pad = int(np.prod(spec.padded_shape))
            pad_idx = np.arange(n_pad).reshape(spec.padded_shape)
            interior_rows = pad_idx[spec.interior_slices].ravel()
            col_idx = np.arange(n).reshape(spec.nx)
            rows = [interior_rows]
            cols = [np.arange(n)]
            vals = [np.full(n, -2.0 * spec.dim / spec.dx**2)]
            w = 1.0 / spec.dx**2
            pc = spec.pad_cells
            for d in self.stencil.offsets:
                # row node i = interior col node + (-d), for all interior cols
                row_slices = tuple(
                    slice(pc - int(d[a]), pc - int(d[a]) + spec.nx[a])
                    for a in range(spec.dim)
                )
                rows.append(pad_idx[row_slices].ravel())
                cols.append(col_idx.ravel())
                vals.append(np.full(n, w))
            self._restricted = scipy.sparse.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n_pad, n),
            )
        return self._restricted


def local_laplacian(u: Field) -> Field:
    """Central-difference Laplacian of a constrained field."""
    if not u.is_zero_extended():
        raise ValueError("local_laplacian input must be exactly zero on exterior nodes")
    op = LocalOperator(u.spec)
    return Field(u.spec, op.apply(u.values))


def local_evolve(u0: Field, cfg: StepperConfig) -> Trajectory:
    """Rothe evolution with the finite-difference Laplacian injected."""
    return evolve(u0, LocalOperator(u0.spec), cfg)


def weak_residual(traj: Trajectory, phi, p: float) -> float:
    """Discrete weak-form residual of a recorded local trajectory.

    ``phi(*coords, t)`` must evaluate a smooth test function, compactly
    supported in space-time, on meshgrid coordinate arrays.  The residual
    pairs the recorded states against the time derivative of the test
    function and the flux against its Laplacian, using trapezoidal weights in
    time and central time differences; it shrinks at O(h + dx^2) for a valid
    trajectory.
    """
    check_exponent(p)
    if not traj.states:
        raise ValueError("trajectory has no recorded states")
    steps = list(traj.state_steps)
    if steps != list(range(len(traj.times))):
        raise ValueError("weak_residual needs record_every = 1 trajectories")
    spec = traj.states[0].spec
    op = LocalOperator(spec)
    h = traj.h
    coords = spec.node_coords()
    times = traj.times

    phi_fields = [np.asarray(phi(*coords, t), dtype=float) for t in times]
    n = len(times)
    total = 0.0
    interior = spec.interior_slices
    vol = spec.cell_volume
    for j in range(n):
        if j == 0:
            dphi = (phi_fields[1] - phi_fields[0]) / h
        elif j == n - 1:
            dphi = (phi_fields[-1] - phi_fields[-2]) / h
        else:
            dphi = (phi_fields[j + 1] - phi_fields[j - 1]) / (2.0 * h)
        u_int = traj.states[j].interior_values
        term_time = -vol * float(np.sum(u_int * dphi[interior]))

        lap_u = op.apply(traj.states[j].values)
        flux = p_flux_values(lap_u, p)
        # zero-extend phi before differencing: the test function carries the
        # same constraint class as the states, and the pairing runs over the
        # padded domain like the scheme's own energy
        phi_ext = np.zeros(spec.padded_shape)
        phi_ext[interior] = phi_fields[j][interior]
        lap_phi = op.apply(phi_ext)
        term_flux = vol * float(np.sum(flux * lap_phi))

        weight = h if 0 < j < n - 1 else 0.5 * h
        total += weight * (term_time + term_flux)
    return float(total)
