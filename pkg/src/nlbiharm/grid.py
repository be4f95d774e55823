"""Cell-centered grids on a box domain with a zero-constraint collar.

The interior box carries the evolving solution; a collar of padding cells
around it carries the homogeneous volume constraint.  Nodes sit at cell
centers, so no node lies on the interior boundary and the interior/exterior
classification is unambiguous.  All quadrature is the midpoint rule with
uniform weight dx**dim per node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

REGIONS = ("omega", "omega_e", "exterior")


def format_float(x: float) -> str:
    """17-significant-digit decimal rendering used by every CSV writer."""
    return format(float(x), ".17g")


@dataclass(frozen=True)
class DomainSpec:
    """Geometry of the padded uniform grid.

    Attributes:
        dim: spatial dimension, 1 or 2.
        omega_lo, omega_hi: interior box corners, one entry per axis.
        nx: interior cells per axis.
        dx: uniform grid spacing (identical on every axis).
        pad: physical padding width per side; at least twice the kernel
            support radius so two operator applications never see the
            outer truncation from inside the box.
        pad_cells: padding cells per side, ceil(pad / dx).
    """

    dim: int
    omega_lo: tuple[float, ...]
    omega_hi: tuple[float, ...]
    nx: tuple[int, ...]
    dx: float
    pad: float
    pad_cells: int

    @property
    def padded_shape(self) -> tuple[int, ...]:
        return tuple(n + 2 * self.pad_cells for n in self.nx)

    @property
    def interior_slices(self) -> tuple[slice, ...]:
        return tuple(slice(self.pad_cells, self.pad_cells + n) for n in self.nx)

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    @property
    def n_interior(self) -> int:
        return int(np.prod(self.nx))

    def axis_coords(self, axis: int) -> np.ndarray:
        """Cell-center coordinates along one axis of the padded grid."""
        n = self.nx[axis] + 2 * self.pad_cells
        lo = self.omega_lo[axis] - self.pad_cells * self.dx
        return lo + (np.arange(n) + 0.5) * self.dx

    def node_coords(self) -> list[np.ndarray]:
        """Padded node coordinates, one meshgrid ('ij') array per axis."""
        axes = [self.axis_coords(a) for a in range(self.dim)]
        if self.dim == 1:
            return axes
        return list(np.meshgrid(*axes, indexing="ij"))

    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(self.padded_shape, dtype=bool)
        mask[self.interior_slices] = True
        return mask


def _as_axis_tuple(value, dim, name, cast):
    if np.isscalar(value):
        return tuple(cast(value) for _ in range(dim))
    out = tuple(cast(v) for v in value)
    if len(out) != dim:
        raise ValueError(f"{name} must have {dim} entries, got {len(out)}")
    return out


def make_domain(dim, box, nx, kernel, eps, *, pad=None) -> DomainSpec:
    """Build the padded grid sized for a rescaled kernel of scale eps.

    ``box`` is (lo, hi) in 1D or ((lo, hi), (lo, hi)) in 2D; ``nx`` may be a
    scalar or per-axis.  The padding defaults to exactly twice the rescaled
    support radius (rounded up to whole cells); ``pad`` overrides it upward.
    """
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if dim == 1 and np.isscalar(box[0]):
        box = (box,)
    lo = tuple(float(b[0]) for b in box)
    hi = tuple(float(b[1]) for b in box)
    if len(lo) != dim:
        raise ValueError(f"box must have {dim} axes, got {len(lo)}")
    nx_t = _as_axis_tuple(nx, dim, "nx", int)
    if any(n < 4 for n in nx_t):
        raise ValueError(f"nx must be >= 4 on every axis, got {nx_t}")
    if any(h <= l for l, h in zip(lo, hi)):
        raise ValueError("box upper bounds must exceed lower bounds")
    dxs = [(h - l) / n for l, h, n in zip(lo, hi, nx_t)]
    dx = dxs[0]
    if any(abs(d - dx) > 1e-12 * dx for d in dxs):
        raise ValueError(f"grid spacing must match across axes, got {dxs}")

    support = eps * kernel.support_radius
    if support < 2.0 * dx:
        raise ValueError(
            f"kernel support under-resolved: eps*R_J = {support:g} < 2*dx = {2 * dx:g}"
        )
    min_pad = 2.0 * support
    if pad is None:
        pad = min_pad
    elif pad < min_pad - 1e-12 * min_pad:
        raise ValueError(f"pad override {pad:g} below containment minimum {min_pad:g}")
    pad_cells = math.ceil(pad / dx - 1e-12)
    return DomainSpec(
        dim=dim,
        omega_lo=lo,
        omega_hi=hi,
        nx=nx_t,
        dx=dx,
        pad=float(pad),
        pad_cells=pad_cells,
    )


@dataclass(frozen=True)
class Field:
    """Grid function on the padded grid.

    Values are stored for every padded node and frozen after construction;
    operations produce new fields.  Constrained fields (built by
    ``zero_extend`` or by the steppers) are exactly zero on exterior nodes.
    """

    spec: DomainSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.spec.padded_shape:
            raise ValueError(
                f"values shape {v.shape} does not match padded shape "
                f"{self.spec.padded_shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def interior_values(self) -> np.ndarray:
        return self.values[self.spec.interior_slices]

    def exterior_max_abs(self) -> float:
        ext = np.abs(self.values[~self.spec.interior_mask()])
        return float(ext.max()) if ext.size else 0.0

    def is_zero_extended(self) -> bool:
        return self.exterior_max_abs() == 0.0


def zero_extend(interior_values, spec: DomainSpec) -> Field:
    """Embed interior values into the padded grid with exact exterior zeros."""
    arr = np.asarray(interior_values, dtype=float)
    if arr.size != spec.n_interior:
        raise ValueError(
            f"interior values have {arr.size} entries, expected {spec.n_interior}"
        )
    arr = arr.reshape(spec.nx)
    full = np.zeros(spec.padded_shape)
    full[spec.interior_slices] = arr
    return Field(spec, full)


def zeros(spec: DomainSpec) -> Field:
    return Field(spec, np.zeros(spec.padded_shape))


def _region_values(f: Field, region: str) -> np.ndarray:
    if region == "omega":
        return f.interior_values.ravel()
    if region == "omega_e":
        return f.values.ravel()
    if region == "exterior":
        return f.values[~f.spec.interior_mask()]
    raise ValueError(f"unknown region {region!r}, expected one of {REGIONS}")


def lp_norm(f: Field, q: float, region: str = "omega_e") -> float:
    """Midpoint-rule L^q norm over omega, omega_e, or the exterior collar."""
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    v = _region_values(f, region)
    total = f.spec.cell_volume * np.sum(np.abs(v) ** q)
    return float(total ** (1.0 / q))


def inner_product(f: Field, g: Field, region: str = "omega_e") -> float:
    """Midpoint-rule L^2 pairing; both fields must share a spec."""
    if f.spec != g.spec:
        raise ValueError("fields live on different domain specs")
    fv = _region_values(f, region)
    gv = _region_values(g, region)
    return float(f.spec.cell_volume * np.dot(fv, gv))


def field_to_csv(f: Field, path) -> None:
    """One padded node per row: ``x[,y],value,region`` with 17 digits."""
    coords = f.spec.node_coords()
    mask = f.spec.interior_mask().ravel()
    vals = f.values.ravel()
    flat = [c.ravel() for c in coords]
    header = ("x,value,region" if f.spec.dim == 1 else "x,y,value,region") + "\n"
    with open(path, "w", newline="\n") as fh:
        fh.write(header)
        for i in range(vals.size):
            pos = ",".join(format_float(c[i]) for c in flat)
            tag = "INTERIOR" if mask[i] else "EXTERIOR"
            fh.write(f"{pos},{format_float(vals[i])},{tag}\n")
