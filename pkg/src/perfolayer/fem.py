"""Finite-element kernels on structured hexahedral meshes.

Trilinear hexahedra with 2x2x2 Gauss quadrature, periodic master/slave
identification, Dirichlet elimination, mean-zero constraints via symmetric
rank-one augmentation, Jacobi-preconditioned conjugate gradients, and a block
inverse-power iteration for extremal generalized eigenvalues.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import (
    ConvergenceFailure,
    IndefiniteDetected,
    MaxIterationsExceeded,
    NullspaceOverlap,
    SingularWithoutConstraints,
)
from .geometry import HEX_CORNERS

# Mandel index pairs: (11, 22, 33, 23, 13, 12); off-diagonal entries carry
# sqrt(2) so that A B : B equals the plain 6-vector quadratic form.
_MANDEL_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
_SQRT2 = np.sqrt(2.0)


class ElasticityTensor4:
    """Fourth-order elasticity tensor with full symmetry and coercivity.

    Symmetries enforced: A_ijkl = A_jikl = A_ijlk = A_klij (the form
    A D(u):D(v) is then symmetric and acts on symmetric matrices only).
    """

    def __init__(self, components: np.ndarray, coercivity_check: bool = True):
        a = np.asarray(components, dtype=float)
        if a.shape != (3, 3, 3, 3):
            raise ValueError("elasticity tensor must be 3x3x3x3")
        for perm, name in (((1, 0, 2, 3), "A_ijkl = A_jikl"),
                           ((0, 1, 3, 2), "A_ijkl = A_ijlk"),
                           ((2, 3, 0, 1), "A_ijkl = A_klij")):
            if not np.allclose(a, a.transpose(perm), rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
                raise ValueError(f"symmetry {name} violated")
        self.components = a
        self.c0 = self._coercivity_constant()
        if coercivity_check and self.c0 <= 0:
            raise ValueError(f"tensor is not coercive (c0 = {self.c0:.3e})")

    @classmethod
    def isotropic(cls, lam: float, mu: float) -> "ElasticityTensor4":
        eye = np.eye(3)
        a = (lam * np.einsum("ij,kl->ijkl", eye, eye)
             + mu * (np.einsum("ik,jl->ijkl", eye, eye)
                     + np.einsum("il,jk->ijkl", eye, eye)))
        return cls(a)

    @classmethod
    def identity(cls) -> "ElasticityTensor4":
        """Tensor with A B : B = |B|^2 for symmetric B (lam=0, mu=1/2)."""
        return cls.isotropic(0.0, 0.5)

    def _coercivity_constant(self, samples: int = 50, seed: int = 1234) -> float:
        """Smallest sampled Rayleigh quotient A B:B / |B|^2 over random
        symmetric B, tightened by the exact Mandel eigenvalue."""
        rng = np.random.default_rng(seed)
        worst = np.inf
        for _ in range(samples):
            b = rng.standard_normal((3, 3))
            b = 0.5 * (b + b.T)
            quad = np.einsum("ijkl,ij,kl->", self.components, b, b)
            worst = min(worst, quad / np.sum(b * b))
        exact = float(np.linalg.eigvalsh(self.mandel()).min())
        return min(worst, exact)

    def mandel(self) -> np.ndarray:
        """Symmetric 6x6 matrix representing the tensor on symmetric
        matrices in the Mandel (sqrt(2)-scaled) basis."""
        m = np.empty((6, 6))
        for r, (i, j) in enumerate(_MANDEL_PAIRS):
            for c, (k, l) in enumerate(_MANDEL_PAIRS):
                f = (1.0 if i == j else _SQRT2) * (1.0 if k == l else _SQRT2)
                m[r, c] = f * self.components[i, j, k, l]
        return 0.5 * (m + m.T)

    def apply(self, b: np.ndarray) -> np.ndarray:
        """Contract with a (...,3,3) symmetric strain field."""
        return np.einsum("ijkl,...kl->...ij", self.components, b)


def sym_to_mandel(b: np.ndarray) -> np.ndarray:
    """Map (...,3,3) symmetric tensors to (...,6) Mandel vectors."""
    out = np.empty(b.shape[:-2] + (6,))
    for r, (i, j) in enumerate(_MANDEL_PAIRS):
        out[..., r] = b[..., i, j] * (1.0 if i == j else _SQRT2)
    return out


@dataclass
class RigidDisplacement:
    """x -> b + A x with A antisymmetric (the kernel of the symmetric gradient)."""

    b: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if not np.allclose(self.a, -self.a.T):
            raise ValueError("A must be antisymmetric")

    def evaluate(self, coords: np.ndarray) -> np.ndarray:
        return self.b[None, :] + coords @ self.a.T


def rigid_modes(coords: np.ndarray) -> np.ndarray:
    """Nodal samples of the six-dimensional rigid-displacement space, shape (6, N, 3)."""
    n = coords.shape[0]
    modes = np.zeros((6, n, 3))
    for c in range(3):
        modes[c, :, c] = 1.0
    spins = [np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], float),
             np.array([[0, 0, 1], [0, 0, 0], [-1, 0, 0]], float),
             np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], float)]
    for c, a in enumerate(spins):
        modes[3 + c] = coords @ a.T
    return modes


# ---------------------------------------------------------------------------
# reference-element tables
# ---------------------------------------------------------------------------

def _gauss_points_1d():
    g = 1.0 / np.sqrt(3.0)
    return np.array([-g, g]), np.array([1.0, 1.0])


def hex_reference(spacing):
    """Shape values, physical gradients and quadrature weights for the
    2x2x2 Gauss rule on an axis-aligned box element.

    Returns (N, G, w, pts) with N (8 pts, 8 nodes), G (8 pts, 8 nodes, 3),
    w the physical weights (include |J|), pts the reference coordinates in
    [0,1]^3 ordered lexicographically (third axis fastest).
    """
    hx, hy, hz = spacing
    x1, w1 = _gauss_points_1d()
    pts = []
    wts = []
    for a in range(2):
        for b in range(2):
            for c in range(2):
                pts.append((x1[a], x1[b], x1[c]))
                wts.append(w1[a] * w1[b] * w1[c])
    pts = np.array(pts)
    wts = np.array(wts)
    signs = 2.0 * HEX_CORNERS - 1.0  # corners in {-1, +1}
    nq = pts.shape[0]
    N = np.empty((nq, 8))
    G = np.empty((nq, 8, 3))
    scale = np.array([2.0 / hx, 2.0 / hy, 2.0 / hz])
    for q in range(nq):
        xi = pts[q]
        f = 0.125 * (1 + signs[:, 0] * xi[0]) * (1 + signs[:, 1] * xi[1]) * (1 + signs[:, 2] * xi[2])
        N[q] = f
        G[q, :, 0] = 0.125 * signs[:, 0] * (1 + signs[:, 1] * xi[1]) * (1 + signs[:, 2] * xi[2]) * scale[0]
        G[q, :, 1] = 0.125 * signs[:, 1] * (1 + signs[:, 0] * xi[0]) * (1 + signs[:, 2] * xi[2]) * scale[1]
        G[q, :, 2] = 0.125 * signs[:, 2] * (1 + signs[:, 0] * xi[0]) * (1 + signs[:, 1] * xi[1]) * scale[2]
    jac = hx * hy * hz / 8.0
    ref = (pts + 1.0) / 2.0
    return N, G, wts * jac, ref


def strain_matrices(G: np.ndarray) -> np.ndarray:
    """Mandel strain-displacement matrices B (n_q, 6, 24); DOF order is
    node-major (node a, component c) -> 3*a + c."""
    nq = G.shape[0]
    B = np.zeros((nq, 6, 24))
    for q in range(nq):
        for a in range(8):
            for c in range(3):
                dof = 3 * a + c
                s = np.zeros((3, 3))
                s[c, :] += 0.5 * G[q, a, :]
                s[:, c] += 0.5 * G[q, a, :]
                B[q, :, dof] = sym_to_mandel(s)
    return B


# ---------------------------------------------------------------------------
# degrees of freedom
# ---------------------------------------------------------------------------

class DofMap:
    """Reduced numbering after periodic identification and Dirichlet elimination.

    Nodal field layout is node-major: dof = ncomp * node + comp.  Slave nodes
    share the reduced dof of their periodic master; Dirichlet dofs map to -1.
    """

    def __init__(self, mesh, ncomp: int = 3, dirichlet_nodes=None, periodic: bool = False):
        self.mesh = mesh
        self.ncomp = ncomp
        n_nodes = mesh.coords.shape[0]
        master = mesh.node_master if periodic else np.arange(n_nodes, dtype=np.int64)
        self.node_master = master
        rep = master == np.arange(n_nodes)
        rep_index = -np.ones(n_nodes, dtype=np.int64)
        rep_index[rep] = np.arange(int(rep.sum()))
        node_slot = rep_index[master]  # every node -> its representative slot

        constrained = np.zeros(int(rep.sum()) * ncomp, dtype=bool)
        if dirichlet_nodes is not None and len(dirichlet_nodes):
            slots = node_slot[np.asarray(dirichlet_nodes, dtype=np.int64)]
            for c in range(ncomp):
                constrained[ncomp * slots + c] = True
        reduced = -np.ones(int(rep.sum()) * ncomp, dtype=np.int64)
        reduced[~constrained] = np.arange(int((~constrained).sum()))

        self.node_slot = node_slot
        self._slot_reduced = reduced
        self.n_dofs = int((~constrained).sum())
        # per-node dof table (n_nodes, ncomp), -1 where eliminated
        self.node_dofs = reduced[(ncomp * node_slot[:, None]
                                  + np.arange(ncomp)[None, :])]

    def element_dofs(self, elems: np.ndarray) -> np.ndarray:
        """(E, nodes_per_elem * ncomp) reduced dof ids, -1 = eliminated."""
        return self.node_dofs[elems].reshape(elems.shape[0], -1)

    def expand(self, reduced: np.ndarray) -> np.ndarray:
        """Reduced coefficients -> nodal array (n_nodes, ncomp), zeros on
        Dirichlet dofs, slaves copied from masters."""
        out = np.zeros((self.node_dofs.shape[0], self.ncomp))
        mask = self.node_dofs >= 0
        out[mask] = reduced[self.node_dofs[mask]]
        return out

    def restrict(self, nodal: np.ndarray) -> np.ndarray:
        """Nodal array -> reduced coefficients.

        When master and slave values differ (input not periodic), the slave
        value wins deterministically (higher node index written last)."""
        reduced = np.zeros(self.n_dofs)
        mask = self.node_dofs >= 0
        reduced[self.node_dofs[mask]] = nodal[mask]
        return reduced


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

class SymmetricOperator:
    """Sparse symmetric operator, optionally with symmetric rank-one
    augmentations sigma * (m . x) m realizing mean-zero constraints."""

    def __init__(self, matrix: sp.csr_matrix, augmentations=()):
        self.matrix = matrix.tocsr()
        self.augmentations = [(float(s), np.asarray(v)) for s, v in augmentations]

    @property
    def shape(self):
        return self.matrix.shape

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.matrix @ x
        for s, v in self.augmentations:
            y += s * np.dot(v, x) * v
        return y

    def quad(self, x: np.ndarray) -> float:
        return float(np.dot(x, self.matvec(x)))

    def diagonal(self) -> np.ndarray:
        d = self.matrix.diagonal().copy()
        for s, v in self.augmentations:
            d += s * v * v
        return d

    def dense(self) -> np.ndarray:
        a = self.matrix.toarray()
        for s, v in self.augmentations:
            a += s * np.outer(v, v)
        return a


def _scatter(local: np.ndarray, edofs: np.ndarray, n: int) -> sp.csr_matrix:
    """Sum an identical (or per-element) local matrix into the global one."""
    E, nd = edofs.shape
    if local.ndim == 2:
        data = np.broadcast_to(local, (E, nd, nd))
    else:
        data = local
    rows = np.broadcast_to(edofs[:, :, None], (E, nd, nd))
    cols = np.broadcast_to(edofs[:, None, :], (E, nd, nd))
    keep = (rows >= 0) & (cols >= 0)
    mat = sp.coo_matrix(
        (data[keep], (rows[keep], cols[keep])), shape=(n, n))
    return mat.tocsr()


def scatter_vector(local: np.ndarray, edofs: np.ndarray, n: int) -> np.ndarray:
    """Accumulate per-element local vectors (E, nd) into a global vector."""
    out = np.zeros(n)
    keep = edofs >= 0
    np.add.at(out, edofs[keep], local[keep])
    return out


def assemble_elasticity(mesh, tensor: ElasticityTensor4, dofmap: DofMap,
                        elems=None) -> SymmetricOperator:
    """Operator of (u, v) -> int A D(u) : D(v) over the mesh elements."""
    N, G, w, _ = hex_reference(mesh.spacing)
    B = strain_matrices(G)
    Am = tensor.mandel()
    local = np.einsum("q,qia,ij,qjb->ab", w, B, Am, B)
    el = mesh.elems if elems is None else elems
    edofs = dofmap.element_dofs(el)
    return SymmetricOperator(_scatter(local, edofs, dofmap.n_dofs))


def assemble_mass(mesh, dofmap: DofMap, weight: float = 1.0,
                  elems=None) -> SymmetricOperator:
    """Operator of (u, v) -> weight * int u . v (vector or scalar arity)."""
    if weight <= 0:
        raise ValueError("mass weight must be positive")
    N, G, w, _ = hex_reference(mesh.spacing)
    nn = np.einsum("q,qa,qb->ab", w, N, N) * weight
    nc = dofmap.ncomp
    local = np.zeros((8 * nc, 8 * nc))
    for c in range(nc):
        local[c::nc, c::nc] = nn
    el = mesh.elems if elems is None else elems
    edofs = dofmap.element_dofs(el)
    return SymmetricOperator(_scatter(local, edofs, dofmap.n_dofs))


def assemble_anisotropic(mesh, dofmap: DofMap, mass_weights, grad_weights,
                         elems=None) -> SymmetricOperator:
    """Quadratic form sum_c m_c |u_c|^2 + sum_{i,c} g[i,c] |d_i u_c|^2.

    ``grad_weights[i][c]`` weighs the derivative of component c along axis i.
    Used for the weighted norms in the inequality estimates.
    """
    N, G, w, _ = hex_reference(mesh.spacing)
    nn = np.einsum("q,qa,qb->ab", w, N, N)
    gg = np.einsum("q,qai,qbi->iab", w, G, G)
    nc = dofmap.ncomp
    local = np.zeros((8 * nc, 8 * nc))
    for c in range(nc):
        block = mass_weights[c] * nn
        for i in range(3):
            block = block + grad_weights[i][c] * gg[i]
        local[c::nc, c::nc] = block
    el = mesh.elems if elems is None else elems
    edofs = dofmap.element_dofs(el)
    return SymmetricOperator(_scatter(local, edofs, dofmap.n_dofs))


def face_quadrature(spacing, axis):
    """2x2 Gauss rule on an element face normal to ``axis``.

    Returns (Nf, wf, ref) where Nf (4 pts, 8 nodes) are the trilinear shape
    values on the face (side fixed later via ``side_offset``), wf physical
    weights, ref reference coordinates in [0,1]^2 of the in-face axes.
    """
    x1, w1 = _gauss_points_1d()
    axes = [d for d in range(3) if d != axis]
    h = [spacing[d] for d in axes]
    jac = h[0] * h[1] / 4.0
    pts = []
    wts = []
    for a in range(2):
        for b in range(2):
            pts.append((x1[a], x1[b]))
            wts.append(w1[a] * w1[b] * jac)
    return axes, np.array(pts), np.array(wts)


def face_shape_values(axis, side, pts):
    """Trilinear shape values at face quadrature points (n_pts, 8)."""
    signs = 2.0 * HEX_CORNERS - 1.0
    axes = [d for d in range(3) if d != axis]
    nq = pts.shape[0]
    vals = np.empty((nq, 8))
    for q in range(nq):
        xi = np.empty(3)
        xi[axes[0]] = pts[q, 0]
        xi[axes[1]] = pts[q, 1]
        xi[axis] = float(side)
        vals[q] = 0.125 * ((1 + signs[:, 0] * xi[0])
                           * (1 + signs[:, 1] * xi[1])
                           * (1 + signs[:, 2] * xi[2]))
    return vals


def assemble_surface_mass(mesh, dofmap: DofMap, faces: np.ndarray) -> SymmetricOperator:
    """Operator of (u, v) -> int_S u . v over the given element faces."""
    nc = dofmap.ncomp
    n = dofmap.n_dofs
    total = sp.csr_matrix((n, n))
    for (axis, side), group in _group_faces(faces).items():
        axes, pts, wts = face_quadrature(mesh.spacing, axis)
        Nf = face_shape_values(axis, side, pts)
        nn = np.einsum("q,qa,qb->ab", wts, Nf, Nf)
        local = np.zeros((8 * nc, 8 * nc))
        for c in range(nc):
            local[c::nc, c::nc] = nn
        edofs = dofmap.element_dofs(mesh.elems[group])
        total = total + _scatter(local, edofs, n)
    return SymmetricOperator(total)


def _group_faces(faces: np.ndarray):
    groups = {}
    for e, axis, side in faces:
        groups.setdefault((int(axis), int(side)), []).append(int(e))
    return {k: np.array(v, dtype=np.int64) for k, v in groups.items()}


def surface_quadrature(mesh, faces: np.ndarray):
    """Physical quadrature points and weights over a face list.

    Returns (pts, w) of shapes (F*4, 3) and (F*4,); ordering follows the
    face list."""
    h = np.asarray(mesh.spacing)
    all_pts = []
    all_w = []
    for e, axis, side in faces:
        axis = int(axis)
        side = int(side)
        axes, pts, wts = face_quadrature(mesh.spacing, axis)
        origin = mesh.coords[mesh.elems[e, 0]]
        phys = np.empty((pts.shape[0], 3))
        phys[:, axes[0]] = origin[axes[0]] + (pts[:, 0] + 1.0) / 2.0 * h[axes[0]]
        phys[:, axes[1]] = origin[axes[1]] + (pts[:, 1] + 1.0) / 2.0 * h[axes[1]]
        phys[:, axis] = origin[axis] + (h[axis] if side > 0 else 0.0)
        all_pts.append(phys)
        all_w.append(wts)
    if not all_pts:
        return np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(all_pts), np.concatenate(all_w)


def surface_load_vector(mesh, dofmap, faces: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Load vector of phi -> int_S q . phi for per-face-quad-point values.

    ``values`` has shape (F*4, ncomp) matching the ordering of
    ``surface_quadrature``."""
    nc = dofmap.ncomp
    out = np.zeros(dofmap.n_dofs)
    row = 0
    for e, axis, side in faces:
        axes, pts, wts = face_quadrature(mesh.spacing, int(axis))
        Nf = face_shape_values(int(axis), int(side), pts)
        edofs = dofmap.element_dofs(mesh.elems[int(e)][None, :])[0]
        vals = values[row:row + pts.shape[0]]
        local = np.einsum("q,qa,qc->ac", wts, Nf, vals).reshape(-1)
        keep = edofs >= 0
        np.add.at(out, edofs[keep], local[keep])
        row += pts.shape[0]
    return out


def mean_zero_augmentations(mass_op: SymmetricOperator, dofmap: DofMap,
                            scale_from: SymmetricOperator):
    """Rank-one vectors enforcing a zero mean per component.

    For a consistent right-hand side, CG on K + sum sigma m m^T returns the
    unique mean-zero solution of K u = r (the symmetric elimination of one
    scalar multiplier per component).
    """
    nc = dofmap.ncomp
    s0 = scale_from.matrix.diagonal().mean()
    out = []
    for c in range(nc):
        ones = np.zeros((dofmap.node_dofs.shape[0], nc))
        ones[:, c] = 1.0
        e_c = dofmap.restrict(ones)
        m_c = mass_op.matvec(e_c)
        out.append((s0 / np.dot(m_c, m_c), m_c))
    return out


# ---------------------------------------------------------------------------
# fields and gradient decomposition
# ---------------------------------------------------------------------------

@dataclass
class FieldVector:
    """Reduced DOF coefficients bound to a mesh and a component arity."""

    mesh: object
    dofmap: DofMap
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.dofmap.n_dofs,):
            raise ValueError("coefficient length does not match the dof map")

    @property
    def arity(self) -> int:
        return self.dofmap.ncomp

    def nodal(self) -> np.ndarray:
        return self.dofmap.expand(self.values)


@dataclass
class GradientDecomposition:
    """Per-quadrature-point split of the gradient into symmetric and
    antisymmetric parts, the volume-mean spin, and (optionally) the
    eps-weighted symmetric part."""

    sym: np.ndarray
    skew: np.ndarray
    mean_skew: np.ndarray
    weighted: np.ndarray | None = None


def element_gradients(mesh, nodal: np.ndarray, elems=None) -> np.ndarray:
    """Full gradients at quadrature points, shape (E, n_q, 3, 3) with
    grad[..., i, j] = d u_i / d x_j."""
    N, G, w, _ = hex_reference(mesh.spacing)
    el = mesh.elems if elems is None else elems
    ue = nodal[el]  # (E, 8, 3)
    return np.einsum("eai,qaj->eqij", ue, G)


def element_values(mesh, nodal: np.ndarray, elems=None) -> np.ndarray:
    """Field values at quadrature points, shape (E, n_q, ncomp)."""
    N, G, w, _ = hex_reference(mesh.spacing)
    el = mesh.elems if elems is None else elems
    return np.einsum("eac,qa->eqc", nodal[el], N)


def quadrature_weights(mesh, n_elems=None) -> np.ndarray:
    N, G, w, _ = hex_reference(mesh.spacing)
    e = mesh.elems.shape[0] if n_elems is None else n_elems
    return np.broadcast_to(w, (e, w.shape[0]))


def quadrature_points(mesh, elems=None) -> np.ndarray:
    """Physical coordinates of the quadrature points, shape (E, n_q, 3)."""
    N, G, w, ref = hex_reference(mesh.spacing)
    el = mesh.elems if elems is None else elems
    origin = mesh.coords[el[:, 0]]  # corner (0,0,0) of each box element
    h = np.asarray(mesh.spacing)
    return origin[:, None, :] + ref[None, :, :] * h[None, None, :]


def gradient_decomposition(mesh, nodal=None, eps: float | None = None,
                           elems=None) -> GradientDecomposition:
    """Split the gradient into D(u) and R(u); the weighted field scales the
    (i3) rows of D by 1/eps and the (33) entry by 1/eps^2.

    ``mesh`` may also be a FieldVector, in which case ``nodal`` is omitted.
    """
    if isinstance(mesh, FieldVector):
        mesh, nodal = mesh.mesh, mesh.nodal()
    grad = element_gradients(mesh, nodal, elems=elems)
    symp = 0.5 * (grad + np.swapaxes(grad, -1, -2))
    skew = grad - symp
    w = quadrature_weights(mesh, grad.shape[0])
    vol = w.sum()
    mean_skew = np.einsum("eq,eqij->ij", w, skew) / vol
    weighted = None
    if eps is not None:
        weighted = symp.copy()
        weighted[..., 0, 2] /= eps
        weighted[..., 2, 0] /= eps
        weighted[..., 1, 2] /= eps
        weighted[..., 2, 1] /= eps
        weighted[..., 2, 2] /= eps**2
    return GradientDecomposition(sym=symp, skew=skew, mean_skew=mean_skew,
                                 weighted=weighted)


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def solve_spd(op: SymmetricOperator, rhs: np.ndarray, tol: float = 1e-10,
              x0: np.ndarray | None = None, max_iter: int | None = None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients with a fixed iteration order.

    Stops at relative residual |r| <= tol |b|; raises MaxIterationsExceeded
    beyond the cap 20 sqrt(n) + 200 and IndefiniteDetected on a nonpositive
    curvature direction.
    """
    n = rhs.shape[0]
    if n == 0:
        return rhs.copy()
    if max_iter is None:
        max_iter = int(20 * np.sqrt(n) + 200)
    d = op.diagonal()
    if np.any(d == 0):
        raise SingularWithoutConstraints(
            "operator has empty rows; constraints were probably not applied")
    if np.any(d < 0):
        raise IndefiniteDetected("operator has negative diagonal entries")
    inv_d = 1.0 / d
    x = np.zeros(n) if x0 is None else x0.copy()
    r = rhs - op.matvec(x) if x0 is not None else rhs.copy()
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros(n)
    z = inv_d * r
    p = z.copy()
    rz = np.dot(r, z)
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        ap = op.matvec(p)
        pap = np.dot(p, ap)
        if pap <= 0:
            raise IndefiniteDetected(
                f"nonpositive curvature p.Ap = {pap:.3e} in conjugate gradients")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = inv_d * r
        rz_new = np.dot(r, z)
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    if np.linalg.norm(r) <= tol * bnorm:
        return x
    raise MaxIterationsExceeded(
        f"CG stalled at relative residual {np.linalg.norm(r) / bnorm:.3e} "
        f"after {max_iter} iterations")


@dataclass
class EigenResult:
    value: float
    vector: np.ndarray
    residual: float
    iterations: int


def max_rayleigh_pair(apply_b, solve_a, apply_a, n: int, tol: float = 1e-8,
                      seed: int = 0, block: int = 2, max_iter: int = 300,
                      project=None) -> EigenResult:
    """Largest mu with B v = mu A v by block inverse-power iteration.

    A must be positive definite on the iteration subspace; ``solve_a`` is a
    callable (rhs, x0, tol) applying its (approximate) inverse.  Inner solves
    are warm-started from the current Ritz prediction and their accuracy is
    tied to the current eigenresidual (inexact inverse iteration).
    ``project`` removes a known common kernel each sweep; the Rayleigh-Ritz
    step over the block makes clustered top eigenvalues harmless.
    """
    rng = np.random.default_rng(seed)
    block = max(1, min(block, n))
    V = rng.standard_normal((n, block))
    if project is not None:
        V = project(V)

    def a_orthonormalize(V):
        W = np.empty((n, 0))
        AW = np.empty((n, 0))
        for k in range(V.shape[1]):
            v = V[:, k].copy()
            for _ in range(2):  # classical Gram-Schmidt, two passes
                if W.shape[1]:
                    v -= W @ (AW.T @ v)
            av = apply_a(v)
            nrm = np.sqrt(max(np.dot(v, av), 0.0))
            if nrm <= 1e-14 * max(1.0, np.linalg.norm(v)):
                v = rng.standard_normal(n)
                if project is not None:
                    v = project(v[:, None])[:, 0]
                av = apply_a(v)
                nrm = np.sqrt(max(np.dot(v, av), 1e-300))
            W = np.column_stack([W, v / nrm])
            AW = np.column_stack([AW, av / nrm])
        return W, AW

    mu_prev = None
    residual = 1.0
    for it in range(1, max_iter + 1):
        V, AV = a_orthonormalize(V)
        BV = np.column_stack([apply_b(V[:, k]) for k in range(V.shape[1])])
        H = V.T @ BV
        H = 0.5 * (H + H.T)
        evals, evecs = np.linalg.eigh(H)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        V = V @ evecs
        BV = BV @ evecs
        AV = AV @ evecs
        mu = float(evals[0])
        res_vec = BV[:, 0] - mu * AV[:, 0]
        denom = np.linalg.norm(BV[:, 0])
        residual = np.linalg.norm(res_vec) / denom if denom > 0 else 0.0
        if mu_prev is not None:
            scale = max(abs(mu), 1e-300)
            if abs(mu - mu_prev) <= tol * scale and residual <= np.sqrt(tol):
                return EigenResult(mu, V[:, 0], residual, it)
        mu_prev = mu
        inner_tol = min(1e-6, max(0.05 * residual, 10.0 * tol))
        V = np.column_stack([
            solve_a(BV[:, k], float(evals[k]) * V[:, k], inner_tol)
            for k in range(V.shape[1])
        ])
        if project is not None:
            V = project(V)
    raise ConvergenceFailure(
        f"eigen iteration did not converge in {max_iter} sweeps "
        f"(last residual {residual:.3e})")


def min_generalized_eigenpair(a_op: SymmetricOperator, b_op: SymmetricOperator,
                              tol: float = 1e-8, seed: int = 0, block: int = 2,
                              max_iter: int = 300,
                              solve_tol: float = 1e-11) -> EigenResult:
    """Smallest lambda with A v = lambda B v (A PSD, B SPD on the subspace).

    Runs the inverse-power iteration on the reciprocal pencil; raises
    NullspaceOverlap when A and B share a kernel vector.
    """
    n = a_op.shape[0]

    def solve_a(r, x0=None, tol_hint=None):
        return solve_spd(a_op, r, tol=tol_hint if tol_hint else solve_tol, x0=x0)

    try:
        res = max_rayleigh_pair(b_op.matvec, solve_a, a_op.matvec, n,
                                tol=tol, seed=seed, block=block, max_iter=max_iter)
    except (IndefiniteDetected, SingularWithoutConstraints) as exc:
        raise NullspaceOverlap(str(exc)) from exc
    if res.value <= 0:
        raise NullspaceOverlap("pencil has no positive Rayleigh quotient")
    lam = 1.0 / res.value
    return EigenResult(lam, res.vector, res.residual, res.iterations)
