"""Independent reference implementations used only to check the package.

Everything here is deliberately written against the math, not against the
package's internals: dense matrices come from direct node-pair loops over
kernel evaluations, and integrals from scipy's adaptive quadrature, so they
share no code path with the implementations they verify.
"""

import numpy as np
import scipy.integrate


def kernel_second_moment(profile, dim, radius=1.0):
    """Half second moment by adaptive quadrature; reciprocal of the
    normalization constant."""
    if dim == 1:
        val, _ = scipy.integrate.quad(lambda r: profile(r) * r**2, 0.0, radius)
        return val  # = 0.5 * int_R J z^2 dz for an even profile
    val, _ = scipy.integrate.quad(lambda r: profile(r) * r**3, 0.0, radius)
    return np.pi * val


def node_coords_flat(spec):
    coords = spec.node_coords()
    return np.column_stack([c.ravel() for c in coords])


def dense_nonlocal_matrix(rk, spec):
    """Nonlocal Laplacian matrix over all padded nodes from direct kernel
    evaluation at node distances (truncated at the array edge), with the
    same unit-moment normalization the package applies: the sampled weights
    are rescaled so that half the second moment of one full (untruncated)
    row equals one."""
    pts = node_coords_flat(spec)
    vol = spec.cell_volume
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    mat = np.asarray(rk(dist)) * vol
    np.fill_diagonal(mat, 0.0)
    # moment of a full row: take the row of a node in the middle of the
    # padded block, whose neighborhood is never truncated
    center = int(np.ravel_multi_index(
        tuple(s // 2 for s in spec.padded_shape), spec.padded_shape
    ))
    moment = 0.5 * float(np.sum(mat[center] * dist[center] ** 2))
    mat /= moment
    np.fill_diagonal(mat, -mat.sum(axis=1))
    return mat


def dense_local_matrix(spec):
    """Padded-grid central-difference Laplacian matrix with zero fill."""
    shape = spec.padded_shape
    n = int(np.prod(shape))
    w = 1.0 / spec.dx**2
    mat = np.zeros((n, n))
    for flat in range(n):
        idx = np.unravel_index(flat, shape)
        for axis in range(spec.dim):
            for step in (-1, 1):
                j = list(idx)
                j[axis] += step
                if 0 <= j[axis] < shape[axis]:
                    jflat = np.ravel_multi_index(tuple(j), shape)
                    mat[flat, jflat] += w
                    mat[flat, flat] -= w
    return mat


def extension_matrix(spec):
    """Zero-extension matrix: interior dof -> padded nodes."""
    n_pad = int(np.prod(spec.padded_shape))
    ext = np.zeros((n_pad, spec.n_interior))
    ext[spec.interior_mask().ravel(), np.arange(spec.n_interior)] = 1.0
    return ext


def implicit_p2_trajectory(mat, spec, u0_int, h, m):
    """Linear implicit-Euler trajectory for p = 2 from a padded operator
    matrix: solves (I + h B) u_next = u with B = E^T M^T M E."""
    ext = extension_matrix(spec)
    me = mat @ ext
    b = me.T @ me
    n = spec.n_interior
    lu = np.linalg.inv(np.eye(n) + h * b)  # small n only
    states = [u0_int.copy()]
    u = u0_int.copy()
    for _ in range(m):
        u = lu @ u
        states.append(u.copy())
    return states


def poincare_dense_matrix(rk, spec):
    """Constrained difference-form matrix over interior nodes from direct
    kernel evaluation: sum_{x in omega} sum_{y in omega_e} J(x-y)(u~(y)-u(x))^2,
    with the package's unit-moment weight normalization."""
    pts = node_coords_flat(spec)
    interior = spec.interior_mask().ravel()
    int_idx = np.nonzero(interior)[0]
    center = int(np.ravel_multi_index(
        tuple(s // 2 for s in spec.padded_shape), spec.padded_shape
    ))
    dist_c = np.sqrt(((pts - pts[center]) ** 2).sum(axis=1))
    wc = np.asarray(rk(dist_c)) * spec.cell_volume
    moment = 0.5 * float(np.sum(wc * dist_c**2))
    n = int_idx.size
    mat = np.zeros((n, n))
    col_of = {int(flat): k for k, flat in enumerate(int_idx)}
    for a, flat_a in enumerate(int_idx):
        d = np.sqrt(((pts - pts[flat_a]) ** 2).sum(axis=1))
        w = np.asarray(rk(d)) * spec.cell_volume / moment
        for flat_b in range(pts.shape[0]):
            if flat_b == flat_a:
                continue
            wb = w[flat_b]
            if wb == 0.0:
                continue
            mat[a, a] += wb
            if interior[flat_b]:
                b = col_of[flat_b]
                mat[b, b] += wb
                mat[a, b] -= wb
                mat[b, a] -= wb
    return mat
