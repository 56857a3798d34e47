"""Friction cones, contact-system assembly, and constrained force fitting.

A contact force is restricted to a four-edged polyhedral friction cone and
expressed as a nonnegative combination of the cone's support vectors. Fitting
all contacts to the stacked measurement vector is then a nonnegative least
squares problem solved with an active-set method; its optimal objective is the
residual used everywhere else as "how well do these contact points explain the
sensors".
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, SolverFailure
from .kinematics import ChainModel, _fk_full, _vec
from .mesh import LinkSurface, Particle


@dataclass(frozen=True)
class FrictionConeBasis:
    """Polyhedral friction cone at one contact.

    ``matrix`` is 3x4 with unit support vectors as columns; each makes the
    angle atan(mu) with the inward surface normal, spaced 90 degrees apart, so
    any nonnegative combination pushes into the surface.
    """

    matrix: np.ndarray
    mu: float
    contact_normal: np.ndarray

    @property
    def support_vectors(self):
        return self.matrix.T


def _tangent_seed(normals: np.ndarray) -> np.ndarray:
    """First tangent direction: normalize(n x e), e the axis of the smallest
    |n| component. Deterministic and continuous almost everywhere."""
    pick = np.argmin(np.abs(normals), axis=-1)
    seed = np.zeros_like(normals)
    seed[np.arange(normals.shape[0]), pick] = 1.0
    t1 = np.cross(normals, seed)
    return t1 / np.linalg.norm(t1, axis=-1, keepdims=True)


def cone_matrices(normals: np.ndarray, mu: float) -> np.ndarray:
    """Support-vector matrices (F,3,4) for a batch of outward unit normals."""
    if mu <= 0:
        raise InputError(f"friction coefficient must be positive, got {mu}")
    normals = np.asarray(normals, dtype=float)
    t1 = _tangent_seed(normals)
    t2 = np.cross(normals, t1)
    dirs = np.stack([t1, t2, -t1, -t2], axis=2)  # (F,3,4)
    support = -normals[:, :, None] + mu * dirs
    support /= np.linalg.norm(support, axis=1, keepdims=True)
    return support


def cone_basis(normal, mu: float) -> FrictionConeBasis:
    """Polyhedral cone at a single contact normal."""
    normal = _vec(normal, 3, "normal")
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        raise InputError("contact normal must be nonzero")
    normal = normal / norm
    matrix = cone_matrices(normal[None, :], mu)[0]
    return FrictionConeBasis(matrix=matrix, mu=float(mu), contact_normal=normal)


def cone_contains(basis: FrictionConeBasis, force, tol: float = 1e-9) -> bool:
    """True if ``force`` is a nonnegative combination of the support vectors."""
    force = _vec(force, 3, "force")
    scale = max(1.0, float(np.linalg.norm(force)))
    coeff, _, failed = _nnls_batched(
        (basis.matrix.T @ basis.matrix)[None], (basis.matrix.T @ force)[None], 24
    )
    if failed[0]:
        return False
    return float(np.linalg.norm(basis.matrix @ coeff[0] - force)) <= tol * scale


def contact_blocks(fk, surface: LinkSurface, face_indices, mu: float, n_joints: int):
    """Per-face measurement-matrix blocks for faces of one link.

    Returns (blocks, points, normals) with blocks shaped (F, 4, n+6): the rows
    contributed to the stacked system by a contact on each face, at the
    configuration captured in ``fk``.
    """
    link = surface.link_index
    rot = fk.rotations[link]
    org = fk.origins[link]
    face_indices = np.asarray(face_indices, dtype=np.int64)
    cents = surface.centroids[face_indices] @ rot.T + org
    norms = surface.normals[face_indices] @ rot.T

    count = face_indices.shape[0]
    m = link + 1
    diff = cents[:, None, :] - fk.origins[None, :m, :]
    jac_cols = np.cross(np.broadcast_to(fk.axes[:m], diff.shape), diff)  # (F,m,3)
    jac = np.zeros((count, 3, n_joints))
    jac[:, :, :m] = jac_cols.transpose(0, 2, 1)

    support = cone_matrices(norms, mu)  # (F,3,4)
    support_t = support.transpose(0, 2, 1)  # (F,4,3)
    top = np.einsum("fij,fik->fjk", support, jac)  # A^T J, (F,4,n)
    lever = np.cross(np.broadcast_to(cents[:, None, :], support_t.shape), support_t)
    wrench_t = np.concatenate([support_t, lever], axis=2)  # (X A)^T, (F,4,6)
    return np.concatenate([top, wrench_t], axis=2), cents, norms


@dataclass(frozen=True)
class ContactSystem:
    """Stacked contact system for k hypothesized contact points.

    ``matrix`` is the (4k, n+6) map from cone weights to the measurement
    vector: row block i holds [A_i^T J_i | (X_i A_i)^T].
    """

    matrix: np.ndarray
    contact_points: np.ndarray
    bases: tuple
    links: tuple

    @property
    def k(self):
        return len(self.bases)


def assemble_contact_system(
    chain: ChainModel,
    q,
    surfaces: Sequence[LinkSurface],
    particles: Sequence[Particle],
    mu: float = 0.5,
) -> ContactSystem:
    """Build the stacked system for the given particles (one link each)."""
    if len(particles) < 1:
        raise InputError("need at least one particle")
    links = [p[0] for p in particles]
    if len(set(links)) != len(links):
        raise InputError(f"particles must sit on distinct links, got links {links}")
    fk = _fk_full(chain, q)
    blocks = []
    points = []
    bases = []
    for link, face in particles:
        if not 0 <= link < len(surfaces):
            raise InputError(f"particle link {link} out of range")
        surface = surfaces[link]
        if not 0 <= face < surface.face_count:
            raise InputError(f"particle face {face} out of range for link {link}")
        blk, cents, norms = contact_blocks(fk, surface, np.array([face]), mu, chain.n)
        blocks.append(blk[0])
        points.append(cents[0])
        bases.append(FrictionConeBasis(matrix=cone_matrices(norms, mu)[0], mu=float(mu), contact_normal=norms[0]))
    return ContactSystem(
        matrix=np.concatenate(blocks, axis=0),
        contact_points=np.array(points),
        bases=tuple(bases),
        links=tuple(links),
    )


@dataclass(frozen=True)
class ForceSolution:
    """Cone weights, per-contact forces, and the optimal fit residual."""

    coefficients: np.ndarray
    forces: np.ndarray
    residual_sq: float


# ---------------------------------------------------------------------------
# Nonnegative least squares, Lawson-Hanson active set on the normal equations
# ---------------------------------------------------------------------------

_DUAL_TOL = 1e-10
_FEAS_TOL = 1e-12


def _masked_solve(gram, rhs, passive):
    """Solve the passive-subset normal equations for every batch row.

    Active rows/columns are replaced with identity so one batched solve
    handles all rows; near-singular subsets fall back to the pseudoinverse
    (minimum-norm inner solution, valid for the active-set iteration).
    """
    d = gram.shape[-1]
    eye = np.eye(d)
    pair = passive[:, :, None] & passive[:, None, :]
    g_eff = np.where(pair, gram, eye)
    c_eff = np.where(passive, rhs, 0.0)

    scale = np.sqrt(np.einsum("bii->bi", g_eff))
    g_norm = g_eff / scale[:, :, None] / scale[:, None, :]
    dets = np.abs(np.linalg.det(g_norm))
    good = dets > 1e-10
    out = np.empty_like(rhs)
    if good.all():
        out = np.linalg.solve(g_norm, (c_eff / scale)[..., None])[..., 0] / scale
    else:
        if good.any():
            out[good] = (
                np.linalg.solve(g_norm[good], (c_eff / scale)[good][..., None])[..., 0]
                / scale[good]
            )
        bad = ~good
        pinv = np.linalg.pinv(g_norm[bad])
        out[bad] = np.einsum("bij,bj->bi", pinv, (c_eff / scale)[bad]) / scale[bad]
    return np.where(passive, out, 0.0)


def _nnls_batched(gram, rhs, max_iter):
    """Batched active-set NNLS: min x'Gx - 2c'x subject to x >= 0.

    Every batch row runs the Lawson-Hanson iteration in lockstep; rows that
    satisfy the KKT conditions freeze. Returns (x, iterations, failed) where
    ``failed`` flags rows that hit the iteration cap.
    """
    batch, d = rhs.shape
    x = np.zeros((batch, d))
    passive = np.zeros((batch, d), dtype=bool)
    done = np.zeros(batch, dtype=bool)

    dual_tol = _DUAL_TOL * np.maximum(1.0, np.abs(rhs).max(axis=1))

    # rows with no attractive coordinate are already optimal at zero
    done |= (rhs <= dual_tol[:, None]).all(axis=1)
    iterations = 0
    while not done.all() and iterations < max_iter:
        iterations += 1
        alive = ~done
        if passive[alive].any():
            z = np.zeros((batch, d))
            z[alive] = _masked_solve(gram[alive], rhs[alive], passive[alive])
        else:
            z = np.zeros((batch, d))
        feasible = ((z > _FEAS_TOL) | ~passive).all(axis=1)

        # infeasible rows: step toward z until a passive coordinate hits zero
        bad = alive & ~feasible
        if bad.any():
            move = x - z
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(passive & (z <= _FEAS_TOL) & (move > 1e-300), x / move, np.inf)
            alpha = ratio.min(axis=1)
            # no finite ratio means x already sits on the blocking bound
            alpha = np.where(np.isfinite(alpha), alpha, 0.0)
            x[bad] += (alpha[:, None] * (z - x))[bad]
            drop = bad[:, None] & passive & (x <= _FEAS_TOL)
            passive[drop] = False
            x[drop] = 0.0

        # feasible rows: accept the subset solution, then check optimality
        accept = alive & feasible
        if accept.any():
            x[accept] = np.where(passive[accept], z[accept], 0.0)
            w = rhs[accept] - np.einsum("bij,bj->bi", gram[accept], x[accept])
            w = np.where(passive[accept], -np.inf, w)
            j = np.argmax(w, axis=1)
            rows = np.flatnonzero(accept)
            improvable = w[np.arange(rows.shape[0]), j] > dual_tol[rows]
            done[rows[~improvable]] = True
            passive[rows[improvable], j[improvable]] = True
    return x, iterations, ~done


def nnls(matrix, target, max_iter=None):
    """Nonnegative least squares min ||target - matrix @ x||, x >= 0.

    Returns (x, converged). The active-set iteration runs on the normal
    equations; ``max_iter`` defaults to 3 times the variable count.
    """
    matrix = np.asarray(matrix, dtype=float)
    target = np.asarray(target, dtype=float).reshape(-1)
    if matrix.ndim != 2 or matrix.shape[0] != target.shape[0]:
        raise InputError(
            f"matrix shape {matrix.shape} incompatible with target length {target.shape[0]}"
        )
    d = matrix.shape[1]
    if max_iter is None:
        max_iter = 3 * d
    gram = matrix.T @ matrix
    rhs = matrix.T @ target
    x, _, failed = _nnls_batched(gram[None], rhs[None], max_iter)
    return x[0], not failed[0]


def solve_force_qp(system: ContactSystem, w_hat, max_iter=None) -> ForceSolution:
    """Fit cone weights to the measurement: min ||w_hat - Q^T f||^2, f >= 0.

    ``residual_sq`` is the optimal objective value. Raises SolverFailure with
    the best feasible iterate attached if the iteration cap is exceeded.
    """
    w = np.asarray(getattr(w_hat, "w_hat", w_hat), dtype=float).reshape(-1)
    q_matrix = system.matrix
    if w.shape[0] != q_matrix.shape[1]:
        raise InputError(
            f"measurement length {w.shape[0]} does not match system width {q_matrix.shape[1]}"
        )
    coeff, converged = nnls(q_matrix.T, w, max_iter=max_iter)
    residual = w - q_matrix.T @ coeff
    forces = np.stack(
        [system.bases[i].matrix @ coeff[4 * i : 4 * i + 4] for i in range(system.k)]
    )
    solution = ForceSolution(
        coefficients=coeff, forces=forces, residual_sq=float(residual @ residual)
    )
    if not converged:
        raise SolverFailure(
            f"active-set cap reached for {4 * system.k}-variable system", best=solution
        )
    return solution


def kkt_violation(system: ContactSystem, w_hat, coefficients) -> float:
    """Worst violation of the QP optimality conditions at ``coefficients``."""
    w = np.asarray(getattr(w_hat, "w_hat", w_hat), dtype=float).reshape(-1)
    grad = 2.0 * (system.matrix @ (system.matrix.T @ coefficients) - system.matrix @ w)
    positive = coefficients > 1e-10
    worst = 0.0
    if positive.any():
        worst = float(np.abs(grad[positive]).max())
    if (~positive).any():
        worst = max(worst, float(np.maximum(0.0, -grad[~positive]).max()))
    return worst
