"""Experiment procedures that check the qualitative theory numerically.

Each study returns a ``StudyReport`` (a small CSV-serializable table plus
metadata) and leaves pass/fail wiring to the caller.  Refinement studies
take strictly decreasing parameter lists and report fitted orders; audits
report worst-case slacks of the energy inequalities.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .grid import DomainSpec, Field, format_float, lp_norm, zero_extend
from .kernel import Kernel, Stencil, discretize, kernel_is_nonincreasing, rescale
from .localref import local_evolve
from .nlop import NonlocalOperator
from .stepper import (
    StepperConfig,
    Trajectory,
    as_operator,
    effective_inner_tol,
    evolve,
)


class DecayFitDegenerate(RuntimeError):
    """Squared norms underflowed inside the requested fit window."""


@dataclass(frozen=True)
class DecayFit:
    """Fitted large-time constants: exponential rate for p = 2, transformed
    linear law for p > 2."""

    model: str  # "exponential" | "polynomial"
    c1: float | None
    c2: float | None
    c3: float | None
    r_squared: float
    window: tuple[float, float]
    n_points: int


@dataclass
class StudyReport:
    name: str
    columns: tuple[str, ...]
    rows: list[tuple]
    metadata: dict

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                cells = [
                    format_float(v) if isinstance(v, float) else str(v) for v in row
                ]
                fh.write(",".join(cells) + "\n")

    def summary_lines(self) -> list[str]:
        out = []
        for key, value in sorted(self.metadata.items()):
            if key.startswith("pass_"):
                out.append(f"{'PASS' if value else 'FAIL'} {self.name}.{key[5:]}")
        return out

    def all_passed(self) -> bool:
        return all(v for k, v in self.metadata.items() if k.startswith("pass_"))


def _linear_fit(t: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares line y ~ a + b t; returns (slope, intercept, r_squared)."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    tbar = t.mean()
    ybar = y.mean()
    stt = float(np.sum((t - tbar) ** 2))
    sty = float(np.sum((t - tbar) * (y - ybar)))
    slope = sty / stt
    intercept = ybar - slope * tbar
    ss_res = float(np.sum((y - intercept - slope * t) ** 2))
    ss_tot = float(np.sum((y - ybar) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return slope, intercept, r2


def fitted_order(params: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares exponent s in error ~ C * param**s."""
    slope, _, _ = _linear_fit(np.log(np.asarray(params)), np.log(np.asarray(errors)))
    return slope


def _check_decreasing(values: Sequence[float], name: str) -> None:
    vals = list(values)
    if any(b >= a for a, b in zip(vals, vals[1:])):
        raise ValueError(f"{name} must be strictly decreasing, got {vals}")


def _rate_rows(params: Sequence[float], errors: Sequence[float]) -> list[tuple]:
    rows = []
    for i, (par, err) in enumerate(zip(params, errors)):
        if i == 0 or errors[i] <= 0 or errors[i - 1] <= 0:
            rate = float("nan")
        else:
            rate = math.log(errors[i] / errors[i - 1]) / math.log(
                params[i] / params[i - 1]
            )
        rows.append((float(par), float(err), rate))
    return rows


def _require_monotone(kernel: Kernel, allow_non_monotone: bool) -> None:
    if not allow_non_monotone and not kernel_is_nonincreasing(kernel):
        raise ValueError(
            f"kernel {kernel.name!r} is not nonincreasing; the rescaling-limit "
            "studies require it (pass allow_non_monotone=True to override)"
        )


def default_bump(spec: DomainSpec) -> Field:
    """Smooth initial state vanishing to second order at the box boundary:
    sin^2 of the normalized coordinate, product form in 2D."""
    coords = spec.node_coords()
    interior = spec.interior_slices
    out = np.ones(spec.nx)
    for axis in range(spec.dim):
        x = coords[axis][interior]
        lo = spec.omega_lo[axis]
        hi = spec.omega_hi[axis]
        out = out * np.sin(np.pi * (x - lo) / (hi - lo)) ** 2
    return zero_extend(out, spec)


def fd4_laplacian(values: np.ndarray, dx: float, dim: int) -> np.ndarray:
    """Fourth-order central Laplacian of a smooth padded sample; valid two
    cells away from the array edge (everywhere on the interior box)."""
    out = np.zeros_like(values)
    for axis in range(dim):
        coeff = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12.0 * dx * dx)
        for shift, c in zip((-2, -1, 0, 1, 2), coeff):
            sl_src = [slice(2, values.shape[a] - 2) for a in range(dim)]
            sl_src[axis] = slice(2 + shift, values.shape[axis] - 2 + shift)
            sl_dst = [slice(2, values.shape[a] - 2) for a in range(dim)]
            out[tuple(sl_dst)] += c * values[tuple(sl_src)]
    return out


def consistency_study(
    phi: Callable,
    kernel: Kernel,
    eps_list: Sequence[float],
    spec: DomainSpec,
    q: float,
    lap_phi: Callable | None = None,
    allow_non_monotone: bool = False,
) -> StudyReport:
    """Measure ||Delta_NL^eps phi - Delta phi||_{L^q(omega)} along eps.

    ``phi(*coords)`` samples the smooth function on the padded grid (its own
    smooth values stand in for the extension); the classical Laplacian is
    taken from ``lap_phi`` when given, else from a fourth-order difference of
    the samples.
    """
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    _check_decreasing(eps_list, "eps_list")
    _require_monotone(kernel, allow_non_monotone)
    coords = spec.node_coords()
    samples = np.asarray(phi(*coords), dtype=float)
    if lap_phi is None:
        target = fd4_laplacian(samples, spec.dx, spec.dim)
    else:
        target = np.asarray(lap_phi(*coords), dtype=float)
    interior = spec.interior_slices
    vol = spec.cell_volume

    errors = []
    for eps in eps_list:
        st = discretize(rescale(kernel, eps), spec)
        op = NonlocalOperator(st, spec)
        diff = op.apply(samples)[interior] - target[interior]
        errors.append(float((vol * np.sum(np.abs(diff) ** q)) ** (1.0 / q)))

    rows = _rate_rows(eps_list, errors)
    positive = all(e > 0 for e in errors)
    order = (
        fitted_order(eps_list, errors)
        if len(eps_list) > 1 and positive
        else float("nan")
    )
    return StudyReport(
        name="consistency",
        columns=("epsilon", "error", "pair_order"),
        rows=rows,
        metadata={
            "kernel": kernel.name,
            "q": q,
            "nx": spec.nx,
            "fitted_order": order,
            # errors at the quadrature floor are consistent by definition
            "pass_order_at_least_linear": bool(order >= 1.0 or not positive),
        },
    )


def decay_fit(
    traj: Trajectory,
    p: float,
    window: tuple[float, float] | None = None,
    floor_ratio: float | None = None,
) -> DecayFit:
    """Fit the large-time law of the squared interior norm.

    The window defaults to the last 75% of the time range.  ``floor_ratio``
    optionally truncates the window where l2_sq falls below
    ``floor_ratio * l2_sq[0]``: past that point an inexact inner solver pins
    the state and the recorded norms stop carrying decay information.
    """
    if p < 2:
        raise ValueError(f"decay fit covers p >= 2, got p = {p}")
    times = np.asarray(traj.times)
    y = np.asarray(traj.l2_sq)
    if len(times) < 20:
        raise ValueError(f"need at least 20 recorded steps, got {len(times)}")
    if window is None:
        t_lo = times[0] + 0.25 * (times[-1] - times[0])
        t_hi = times[-1]
    else:
        t_lo, t_hi = window
    if floor_ratio is not None:
        alive = np.nonzero(y >= floor_ratio * y[0])[0]
        if alive.size:
            t_hi = min(t_hi, times[alive[-1]])
    sel = (times >= t_lo) & (times <= t_hi)
    if np.count_nonzero(sel) < 5:
        raise ValueError(
            f"fit window [{t_lo:g}, {t_hi:g}] holds fewer than 5 recorded steps"
        )
    tw = times[sel]
    yw = y[sel]
    if np.any(yw < 1e-300):
        raise DecayFitDegenerate(
            f"l2_sq underflows inside the fit window [{t_lo:g}, {t_hi:g}]"
        )
    if p == 2:
        slope, _, r2 = _linear_fit(tw, np.log(yw))
        return DecayFit(
            model="exponential",
            c1=-slope,
            c2=None,
            c3=None,
            r_squared=r2,
            window=(float(tw[0]), float(tw[-1])),
            n_points=int(tw.size),
        )
    slope, intercept, r2 = _linear_fit(tw, yw ** (-(p - 2.0) / 2.0))
    return DecayFit(
        model="polynomial",
        c1=None,
        c2=slope,
        c3=intercept,
        r_squared=r2,
        window=(float(tw[0]), float(tw[-1])),
        n_points=int(tw.size),
    )


def poincare_form_matrix(spec: DomainSpec, stencil: Stencil) -> np.ndarray:
    """Dense matrix of the constrained difference form over interior nodes:
    u -> sum_{x in omega} sum_d w_d (u_ext(x + d) - u(x))^2 (volume factor
    dropped; it cancels in the Rayleigh quotient against the L^2 norm)."""
    n = spec.n_interior
    shape = spec.nx
    mat = np.zeros((n, n))
    idx = np.arange(n).reshape(shape)
    for d, w in zip(stencil.offsets, stencil.weights):
        if not np.any(d):
            continue
        w = float(w)
        # every interior node pays w * u_i^2: the neighbor always exists in
        # the padded domain (containment guarantees it)
        mat[np.diag_indices_from(mat)] += w
        src, dst = [], []
        for a in range(spec.dim):
            dd = int(d[a])
            dst.append(slice(max(-dd, 0), shape[a] - max(dd, 0)))
            src.append(slice(max(dd, 0), shape[a] + min(dd, 0)))
        k = idx[tuple(dst)].ravel()
        j = idx[tuple(src)].ravel()
        np.add.at(mat, (j, j), w)
        np.add.at(mat, (k, j), -w)
        np.add.at(mat, (j, k), -w)
    return mat


def poincare_constant(
    spec: DomainSpec,
    stencil: Stencil,
    q: float = 2,
    tol: float = 1e-8,
    max_iters: int = 10000,
) -> float:
    """Best constant in the discrete constrained Poincare inequality at q = 2.

    Runs shifted inverse power iteration on the difference-form matrix;
    convergence is declared when the Rayleigh quotient stabilizes to ``tol``
    relative.  The constant is the reciprocal of the smallest eigenvalue.
    """
    if q != 2:
        raise ValueError("only q = 2 has the eigenvalue characterization")
    mat = poincare_form_matrix(spec, stencil)
    factor = scipy.linalg.cho_factor(mat)
    x = np.ones(mat.shape[0])
    x /= np.linalg.norm(x)
    rq_prev = float(x @ mat @ x)
    for _ in range(max_iters):
        y = scipy.linalg.cho_solve(factor, x)
        norm = np.linalg.norm(y)
        y /= norm
        rq = float(y @ mat @ y)
        if abs(rq - rq_prev) <= tol * abs(rq):
            return 1.0 / rq
        rq_prev = rq
        x = y
    raise RuntimeError(
        f"inverse power iteration did not converge in {max_iters} iterations"
    )


def nonlocal_to_local_study(
    u0: Field,
    p: float,
    kernel: Kernel,
    eps_list: Sequence[float],
    cfg: StepperConfig,
    workers: int = 1,
    allow_non_monotone: bool = False,
) -> StudyReport:
    """Sup-over-time L^p distance between rescaled nonlocal runs and the
    clamped local reference, per eps.

    All runs share the initial state's grid (padded for the largest eps) and
    the same time step; recording is forced to every step so the supremum is
    taken over matching times.
    """
    _check_decreasing(eps_list, "eps_list")
    _require_monotone(kernel, allow_non_monotone)
    spec = u0.spec
    support = max(eps_list) * kernel.support_radius
    if spec.pad < 2.0 * support - 1e-12 * support:
        raise ValueError(
            f"domain padding {spec.pad:g} below containment minimum for the "
            f"largest eps ({2 * support:g})"
        )
    cfg = replace(cfg, record_every=1)
    local = local_evolve(u0, cfg)

    def run_eps(eps: float) -> Trajectory:
        st = discretize(rescale(kernel, eps), spec)
        return evolve(u0, st, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(run_eps, eps_list))
    else:
        trajectories = [run_eps(eps) for eps in eps_list]

    errors = []
    for traj in trajectories:
        if traj.state_steps != local.state_steps:
            raise ValueError("recording schedules of the two solvers do not match")
        sup = 0.0
        for fa, fb in zip(traj.states, local.states):
            diff = zero_extend(fa.interior_values - fb.interior_values, spec)
            sup = max(sup, lp_norm(diff, p, "omega"))
        errors.append(sup)

    rows = _rate_rows(eps_list, errors)
    decreasing = all(b < a for a, b in zip(errors, errors[1:]))
    return StudyReport(
        name="nonlocal_to_local",
        columns=("epsilon", "sup_t_error", "pair_order"),
        rows=rows,
        metadata={
            "kernel": kernel.name,
            "p": p,
            "nx": spec.nx,
            "h": cfg.h,
            "T": cfg.T,
            "pass_errors_decreasing": bool(decreasing),
        },
    )


def contraction_study(
    u0_a: Field, u0_b: Field, st, cfg: StepperConfig
) -> StudyReport:
    """Track the interior L^2 distance of two runs with identical configs."""
    if u0_a.spec != u0_b.spec:
        raise ValueError("initial states live on different domain specs")
    spec = u0_a.spec
    cfg = replace(cfg, record_every=1)
    op = as_operator(st, spec)
    tol = max(
        effective_inner_tol(op, cfg, lp_norm(u0_a, 2, "omega")),
        effective_inner_tol(op, cfg, lp_norm(u0_b, 2, "omega")),
    )
    traj_a = evolve(u0_a, st, cfg)
    traj_b = evolve(u0_b, st, cfg)
    rows = []
    violations = 0
    prev = None
    for j, (fa, fb) in enumerate(zip(traj_a.states, traj_b.states)):
        diff = zero_extend(fa.interior_values - fb.interior_values, spec)
        dist = lp_norm(diff, 2, "omega")
        increase = 0.0 if prev is None else dist - prev
        flagged = increase > 10.0 * tol
        if flagged:
            violations += 1
        rows.append((float(traj_a.times[j]), dist, int(flagged)))
        prev = dist
    return StudyReport(
        name="contraction",
        columns=("time", "l2_distance", "violation"),
        rows=rows,
        metadata={
            "p": cfg.p,
            "h": cfg.h,
            "slack": 10.0 * tol,
            "violations": violations,
            "pass_nonincreasing": violations == 0,
        },
    )


def energy_audit(traj: Trajectory, tol_scale: float = 1e-6) -> StudyReport:
    """Audit the discrete dissipation chain of a recorded run.

    Checks, with slack tolerance ``tol_scale * max(E_0, 1/2 l2_0)``:
      * per-step dissipation: inc_j/h + E_j <= E_{j-1};
      * its cumulative (telescoped) form;
      * monotonicity of the interior squared norm;
      * the aggregate a-priori bounds: each of sup_j 1/2 l2_sq, sum inc/h,
        and sup_j E is at most 1/2 l2_0 + E_0.
    The summed three-term form reduces to a false statement for nontrivial
    dissipative runs (the suprema sit at t = 0), so the three bounds are
    audited separately; see the report rows.
    """
    e = np.asarray(traj.energies)
    inc = np.asarray(traj.increments_sq)
    l2 = np.asarray(traj.l2_sq)
    h = traj.h
    rhs = 0.5 * l2[0] + e[0]
    tol = tol_scale * max(rhs, 1e-300)

    per_step_slack = (e[:-1] - e[1:] - inc[1:] / h) if len(e) > 1 else np.array([0.0])
    cumulative_slack = e[0] - e[-1] - float(np.sum(inc[1:])) / h
    l2_slack = (l2[:-1] - l2[1:]) if len(l2) > 1 else np.array([0.0])
    rows = [
        ("per_step_dissipation_worst", float(per_step_slack.min()), float(tol)),
        ("cumulative_dissipation", float(cumulative_slack), float(tol)),
        ("l2_monotone_worst", float(l2_slack.min()), float(tol)),
        ("apriori_l2_sup", float(rhs - 0.5 * l2.max()), float(tol)),
        ("apriori_time_derivative", float(rhs - np.sum(inc[1:]) / h), float(tol)),
        ("apriori_energy_sup", float(rhs - e.max()), float(tol)),
    ]
    worst = min(r[1] for r in rows)
    return StudyReport(
        name="energy_audit",
        columns=("check", "slack", "tolerance"),
        rows=rows,
        metadata={
            "h": h,
            "p": traj.p,
            "worst_slack": worst,
            "pass_all_inequalities": bool(all(r[1] >= -r[2] for r in rows)),
        },
    )
