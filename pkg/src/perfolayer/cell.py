"""Periodic cell problems and homogenized plate tensors.

Solves the in-plane stretching and bending cell problems on the solid
reference cell, averages them into the effective tensors of the homogenized
plate model, provides the symmetric periodic Helmholtz decomposition on the
unperforated cell, and reconstructs the cell-scale corrector field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem
from .errors import AsymmetricInput, InconsistentMesh, MissingSolutions, SolverFailure
from .fem import DofMap, ElasticityTensor4, FieldVector, SymmetricOperator
from .geometry import CellMesh

INDEX_PAIRS = ((1, 1), (2, 2), (1, 2))


def basis_matrix(i: int, j: int) -> np.ndarray:
    """Symmetric rank-one basis matrix (e_i (x) e_j + e_j (x) e_i) / 2."""
    m = np.zeros((3, 3))
    m[i - 1, j - 1] += 0.5
    m[j - 1, i - 1] += 0.5
    return m


@dataclass
class CellSolutionSet:
    """Periodic solutions of the six cell problems with solver residuals.

    ``stretch[(i, j)]`` relaxes the in-plane unit strain, ``bending[(i, j)]``
    the unit-curvature strain -y3 M_ij; both have zero mean per component.
    """

    mesh: CellMesh
    dofmap: DofMap
    tensor: ElasticityTensor4
    stretch: dict = field(default_factory=dict)
    bending: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)

    def require_complete(self):
        for ij in INDEX_PAIRS:
            if ij not in self.stretch or ij not in self.bending:
                raise MissingSolutions(f"cell solution for pair {ij} missing")


@dataclass
class EffectiveModel:
    """Homogenized plate tensors (2x2x2x2; the coupling block carries the
    bending strain on its first index pair) plus the solid cell volume."""

    a_star: np.ndarray
    b_star: np.ndarray
    c_star: np.ndarray
    solid_volume: float

    def voigt(self, t: np.ndarray) -> np.ndarray:
        """3x3 Mandel representation of a 2x2x2x2 block on symmetric inputs."""
        pairs = ((0, 0), (1, 1), (0, 1))
        s = np.sqrt(2.0)
        out = np.empty((3, 3))
        for r, (i, j) in enumerate(pairs):
            for c, (k, l) in enumerate(pairs):
                f = (1.0 if i == j else s) * (1.0 if k == l else s)
                out[r, c] = f * t[i, j, k, l]
        return 0.5 * (out + out.T)


def _periodic_dofmap(mesh: CellMesh) -> DofMap:
    return DofMap(mesh, ncomp=3, periodic=True)


def _cell_operator(mesh, tensor, dofmap):
    k = fem.assemble_elasticity(mesh, tensor, dofmap)
    mass = fem.assemble_mass(mesh, dofmap)
    aug = fem.mean_zero_augmentations(mass, dofmap, k)
    return SymmetricOperator(k.matrix, aug), k


def _strain_load_vectors(mesh, dofmap, stress: np.ndarray):
    """Element load vectors of phi -> int s(y3) stress : D(phi) split into a
    constant part and a part linear in the element-local y3 coordinate."""
    N, G, w, ref = fem.hex_reference(mesh.spacing)
    B = fem.strain_matrices(G)
    sm = fem.sym_to_mandel(stress)
    v_const = np.einsum("q,qid,i->d", w, B, sm)
    v_lin = np.einsum("q,q,qid,i->d", w, ref[:, 2], B, sm)
    return v_const, v_lin


def solve_cell_standard(mesh: CellMesh, tensor: ElasticityTensor4, pair,
                        tol: float = 1e-10, dofmap: DofMap | None = None,
                        operator=None) -> tuple:
    """Stretching cell problem for index pair (i, j): periodic, traction-free
    on the interior surface, zero mean; returns (FieldVector, residual)."""
    i, j = pair
    dofmap = dofmap or _periodic_dofmap(mesh)
    op, k_plain = operator or _cell_operator(mesh, tensor, dofmap)
    stress = tensor.apply(basis_matrix(i, j))
    v_const, _ = _strain_load_vectors(mesh, dofmap, stress)
    edofs = dofmap.element_dofs(mesh.elems)
    rhs = fem.scatter_vector(np.broadcast_to(-v_const, edofs.shape), edofs,
                             dofmap.n_dofs)
    sol = fem.solve_spd(op, rhs, tol=tol)
    res = _relative_residual(op, sol, rhs)
    if res > max(100 * tol, 1e-8):
        raise SolverFailure(f"cell problem {pair} residual {res:.3e}")
    return FieldVector(mesh, dofmap, sol), res


def solve_cell_bending(mesh: CellMesh, tensor: ElasticityTensor4, pair,
                       tol: float = 1e-10, dofmap: DofMap | None = None,
                       operator=None) -> tuple:
    """Bending cell problem: forcing -y3 M_ij in place of +M_ij."""
    i, j = pair
    dofmap = dofmap or _periodic_dofmap(mesh)
    op, k_plain = operator or _cell_operator(mesh, tensor, dofmap)
    stress = tensor.apply(basis_matrix(i, j))
    v_const, v_lin = _strain_load_vectors(mesh, dofmap, stress)
    z0 = mesh.coords[mesh.elems[:, 0], 2]
    hz = mesh.spacing[2]
    local = z0[:, None] * v_const[None, :] + hz * v_lin[None, :]
    edofs = dofmap.element_dofs(mesh.elems)
    rhs = fem.scatter_vector(local, edofs, dofmap.n_dofs)
    sol = fem.solve_spd(op, rhs, tol=tol)
    res = _relative_residual(op, sol, rhs)
    if res > max(100 * tol, 1e-8):
        raise SolverFailure(f"bending cell problem {pair} residual {res:.3e}")
    return FieldVector(mesh, dofmap, sol), res


def _relative_residual(op, sol, rhs):
    nrm = np.linalg.norm(rhs)
    if nrm == 0:
        return 0.0
    return float(np.linalg.norm(op.matvec(sol) - rhs) / nrm)


def solve_cell_problems(mesh: CellMesh, tensor: ElasticityTensor4,
                        tol: float = 1e-10, workers: int = 1,
                        full_index: bool = False) -> CellSolutionSet:
    """The in-plane cell problems (three stretching, three bending).

    The macroscopic model uses only (i, j) in {1, 2}^2; ``full_index`` also
    solves the out-of-plane pairs.  The solves are independent; with
    ``workers`` > 1 they run on a thread pool and are merged in a fixed
    order.
    """
    dofmap = _periodic_dofmap(mesh)
    op_pair = _cell_operator(mesh, tensor, dofmap)
    sols = CellSolutionSet(mesh=mesh, dofmap=dofmap, tensor=tensor)

    pairs = list(INDEX_PAIRS)
    if full_index:
        pairs += [(1, 3), (2, 3), (3, 3)]
    jobs = [("stretch", ij) for ij in pairs] + [("bending", ij) for ij in pairs]

    def run(job):
        kind, ij = job
        solver = solve_cell_standard if kind == "stretch" else solve_cell_bending
        return job, solver(mesh, tensor, ij, tol=tol, dofmap=dofmap, operator=op_pair)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    for (kind, ij), (fvec, res) in results:
        getattr(sols, kind)[ij] = fvec
        sols.residuals[(kind, ij)] = res
    return sols


def _quad_strains(sols: CellSolutionSet):
    """Total strain fields D(chi) + M (stretch) and D(chi^B) - y3 M (bending)
    at the quadrature points of the cell mesh."""
    mesh = sols.mesh
    y3 = fem.quadrature_points(mesh)[:, :, 2]
    stretch = {}
    bending = {}
    for ij in INDEX_PAIRS:
        m = basis_matrix(*ij)
        d_s = fem.gradient_decomposition(mesh, sols.stretch[ij].nodal()).sym
        stretch[ij] = d_s + m[None, None, :, :]
        d_b = fem.gradient_decomposition(mesh, sols.bending[ij].nodal()).sym
        bending[ij] = d_b - y3[:, :, None, None] * m[None, None, :, :]
    return stretch, bending


def effective_tensors(mesh: CellMesh, tensor: ElasticityTensor4,
                      sols: CellSolutionSet) -> EffectiveModel:
    """Energy averages of the cell strains over the solid cell.

    a* pairs stretch with stretch, c* bending with bending, and b* carries
    the bending strain on its first index pair.
    """
    if sols.mesh is not mesh:
        raise InconsistentMesh("solutions were computed on a different mesh")
    sols.require_complete()
    stretch, bending = _quad_strains(sols)
    w = fem.quadrature_weights(mesh)
    vol = mesh.geometry.solid_volume
    am = tensor.mandel()

    def pairing(x, y):
        xm = fem.sym_to_mandel(x)
        ym = fem.sym_to_mandel(y)
        return float(np.einsum("eq,eqi,ij,eqj->", w, xm, am, ym)) / vol

    a = np.empty((2, 2, 2, 2))
    b = np.empty((2, 2, 2, 2))
    c = np.empty((2, 2, 2, 2))
    key = lambda i, j: (min(i, j), max(i, j))
    for al in (1, 2):
        for be in (1, 2):
            for ga in (1, 2):
                for de in (1, 2):
                    xs = stretch[key(al, be)]
                    ys = stretch[key(ga, de)]
                    xb = bending[key(al, be)]
                    yb = bending[key(ga, de)]
                    a[al - 1, be - 1, ga - 1, de - 1] = pairing(xs, ys)
                    b[al - 1, be - 1, ga - 1, de - 1] = pairing(xb, ys)
                    c[al - 1, be - 1, ga - 1, de - 1] = pairing(xb, yb)
    return EffectiveModel(a_star=a, b_star=b, c_star=c, solid_volume=vol)


def voigt_bound(tensor: ElasticityTensor4, mesh: CellMesh) -> np.ndarray:
    """Stretch tensor obtained with zero cell correction (upper bound in the
    Loewner order on symmetric 2x2 inputs)."""
    w = fem.quadrature_weights(mesh)
    vol = mesh.geometry.solid_volume
    am = tensor.mandel()
    out = np.empty((2, 2, 2, 2))
    for al in (1, 2):
        for be in (1, 2):
            for ga in (1, 2):
                for de in (1, 2):
                    x = fem.sym_to_mandel(basis_matrix(al, be))
                    y = fem.sym_to_mandel(basis_matrix(ga, de))
                    out[al - 1, be - 1, ga - 1, de - 1] = (
                        w.sum() / vol * float(x @ am @ y))
    return out


# ---------------------------------------------------------------------------
# Helmholtz decomposition on the unperforated cell
# ---------------------------------------------------------------------------

@dataclass
class HelmholtzSplit:
    """Orthogonal split of a symmetric field into a potential part D(p+q)
    and a remainder orthogonal to every periodic symmetric gradient."""

    potential: np.ndarray
    solenoidal: np.ndarray
    p: FieldVector
    q: FieldVector


def _cell_boundary_nodes(mesh: CellMesh) -> np.ndarray:
    c = mesh.coords
    tol = 1e-12
    on = (
        (np.abs(c[:, 0]) < tol) | (np.abs(c[:, 0] - 1) < tol)
        | (np.abs(c[:, 1]) < tol) | (np.abs(c[:, 1] - 1) < tol)
        | (np.abs(c[:, 2] + 1) < tol) | (np.abs(c[:, 2] - 1) < tol)
    )
    return np.nonzero(on)[0]


def _field_rhs(mesh, dofmap, xi):
    """Load vector of phi -> int xi : D(phi) for a quadrature-point field."""
    N, G, w, _ = fem.hex_reference(mesh.spacing)
    B = fem.strain_matrices(G)
    xm = fem.sym_to_mandel(xi)
    local = np.einsum("q,qid,eqi->ed", w, B, xm)
    edofs = dofmap.element_dofs(mesh.elems)
    return fem.scatter_vector(local, edofs, dofmap.n_dofs)


def helmholtz_decompose(mesh: CellMesh, xi: np.ndarray,
                        tol: float = 1e-12) -> HelmholtzSplit:
    """Split a symmetric quadrature-point field on the full cell.

    ``p`` solves the zero-Dirichlet problem driven by the divergence of the
    input; ``q`` the periodic zero-mean problem absorbing the remaining
    top/bottom flux.  The remainder is orthogonal to all discrete periodic
    symmetric gradients.
    """
    if not mesh.geometry.is_full:
        raise InconsistentMesh("decomposition requires the unperforated cell")
    xi = np.asarray(xi, dtype=float)
    nq = fem.hex_reference(mesh.spacing)[0].shape[0]
    if xi.shape != (mesh.n_elems, nq, 3, 3):
        raise ValueError(f"field must have shape (E, {nq}, 3, 3)")
    if not np.allclose(xi, np.swapaxes(xi, -1, -2), atol=1e-12 * max(1.0, np.abs(xi).max())):
        raise AsymmetricInput("input field is not symmetric")

    ident = ElasticityTensor4.identity()

    dm_dir = DofMap(mesh, ncomp=3, dirichlet_nodes=_cell_boundary_nodes(mesh))
    k_dir = fem.assemble_elasticity(mesh, ident, dm_dir)
    rhs_p = _field_rhs(mesh, dm_dir, xi)
    p_red = fem.solve_spd(k_dir, rhs_p, tol=tol)
    p = FieldVector(mesh, dm_dir, p_red)
    dp = fem.gradient_decomposition(mesh, p.nodal()).sym

    dm_per = _periodic_dofmap(mesh)
    op_per, _ = _cell_operator(mesh, ident, dm_per)
    rhs_q = _field_rhs(mesh, dm_per, xi - dp)
    q_red = fem.solve_spd(op_per, rhs_q, tol=tol)
    q = FieldVector(mesh, dm_per, q_red)
    dq = fem.gradient_decomposition(mesh, q.nodal()).sym

    potential = dp + dq
    return HelmholtzSplit(potential=potential, solenoidal=xi - potential, p=p, q=q)


def gradient_pairing(mesh: CellMesh, xi: np.ndarray, dofmap: DofMap,
                     nodal: np.ndarray) -> float:
    """Discrete pairing <xi, D(phi)> for a nodal periodic test field."""
    d = fem.gradient_decomposition(mesh, nodal).sym
    w = fem.quadrature_weights(mesh)
    return float(np.einsum("eq,eqij,eqij->", w, xi, d))


# ---------------------------------------------------------------------------
# corrector
# ---------------------------------------------------------------------------

def combine_corrector(sols: CellSolutionSet, membrane_strain: np.ndarray,
                      hessian: np.ndarray) -> np.ndarray:
    """Nodal corrector field sum_ij [ Dm_ij chi_ij + Hw_ij chi^B_ij ]."""
    sols.require_complete()
    dm = np.asarray(membrane_strain, dtype=float)
    hw = np.asarray(hessian, dtype=float)
    out = np.zeros((sols.mesh.n_nodes, 3))
    for (i, j) in INDEX_PAIRS:
        if i == j:
            cs, cb = dm[i - 1, j - 1], hw[i - 1, j - 1]
        else:
            cs = dm[i - 1, j - 1] + dm[j - 1, i - 1]
            cb = hw[i - 1, j - 1] + hw[j - 1, i - 1]
        out += cs * sols.stretch[(i, j)].nodal()
        out += cb * sols.bending[(i, j)].nodal()
    return out


def reconstruct_corrector(sols: CellSolutionSet, plate_state, x_bar) -> np.ndarray:
    """Corrector field on the cell for the plate state at the point x_bar."""
    from .plate import membrane_strain_at, hessian_at

    dm = membrane_strain_at(plate_state, x_bar)
    hw = hessian_at(plate_state, x_bar)
    return combine_corrector(sols, dm, hw)
