"""Best-constant estimates for the eps-uniform inequalities of the layer.

Each constant is the extremal value of a Rayleigh quotient between two
assembled quadratic forms and is computed by the block inverse-power
iteration from the fem module.  Estimates are always reported together with
the mesh resolution; no continuum extrapolation is claimed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .errors import SolverFailure
from .fem import DofMap, ElasticityTensor4, SymmetricOperator
from .geometry import LayerMesh, build_layer_mesh


@dataclass
class ConstantEstimate:
    inequality: str
    eps: float
    resolution: int
    constant: float
    residual: float
    iterations: int


@dataclass
class ConstantSweep:
    inequality: str
    geometry_digest: str
    rows: list = field(default_factory=list)

    HEADER = ["inequality", "eps", "n", "constant", "residual"]

    def table(self):
        return [[r.inequality, r.eps, r.resolution, r.constant, r.residual]
                for r in self.rows]


def korn_constant(lmesh: LayerMesh, eps: float, tol: float = 1e-8,
                  seed: int = 0, block: int = 2,
                  max_iter: int = 400) -> ConstantEstimate:
    """Best constant of the clamped Korn inequality on the perforated layer.

    The weighted norm carries eps^-2 on the in-plane components and in-plane
    derivatives and weight one on the vertical component and the remaining
    gradient entries; the returned constant is eps / sqrt(lambda_min), so the
    inequality reads (weighted norm) <= (C / eps) |D(u)|.
    """
    dofmap = DofMap(lmesh, ncomp=3, dirichlet_nodes=lmesh.dirichlet_nodes)
    a_op = fem.assemble_elasticity(lmesh, ElasticityTensor4.identity(), dofmap)
    iw = 1.0 / eps**2
    mass_w = (iw, iw, 1.0)
    grad_w = [[iw, iw, 1.0], [iw, iw, 1.0], [1.0, 1.0, 1.0]]
    b_op = fem.assemble_anisotropic(lmesh, dofmap, mass_w, grad_w)

    res = fem.max_rayleigh_pair(b_op.matvec, _cg_solver(a_op), a_op.matvec,
                                dofmap.n_dofs, tol=tol, seed=seed,
                                block=block, max_iter=max_iter)
    constant = eps * float(np.sqrt(res.value))
    return ConstantEstimate("korn", eps, lmesh.resolution, constant,
                            res.residual, res.iterations)


def _cg_solver(op: SymmetricOperator, base_tol: float = 1e-10):
    def solve(r, x0=None, tol_hint=None):
        return fem.solve_spd(op, r, tol=tol_hint if tol_hint else base_tol,
                             x0=x0,
                             max_iter=max(8000, 60 * int(np.sqrt(r.shape[0])) + 200))

    return solve


def trace_constant(lmesh: LayerMesh, eps: float, tol: float = 1e-8,
                   seed: int = 0, block: int = 2,
                   max_iter: int = 400) -> ConstantEstimate:
    """Constant of the lateral trace estimate on the complete layer.

    Requires a mesh built with the void elements included: the field lives
    on the whole layer, vanishes on the solid part of the lateral boundary
    and is measured on the entire lateral surface.  The reported constant is
    the norm ratio scaled by eps^-1/2.
    """
    expected = lmesh.n_cells * 2 * lmesh.resolution**3
    if lmesh.n_elems != expected:
        raise SolverFailure("trace estimate needs the mesh with voids included")
    dofmap = DofMap(lmesh, ncomp=3, dirichlet_nodes=lmesh.dirichlet_nodes)
    a_op = fem.assemble_elasticity(lmesh, ElasticityTensor4.identity(), dofmap)
    b_op = fem.assemble_surface_mass(lmesh, dofmap, lmesh.lateral_faces)

    res = fem.max_rayleigh_pair(b_op.matvec, _cg_solver(a_op), a_op.matvec,
                                dofmap.n_dofs, tol=tol, seed=seed,
                                block=block, max_iter=max_iter)
    constant = float(np.sqrt(max(res.value, 0.0))) / np.sqrt(eps)
    return ConstantEstimate("trace", eps, lmesh.resolution, constant,
                            res.residual, res.iterations)


# ---------------------------------------------------------------------------
# energy-minimizing extension
# ---------------------------------------------------------------------------

@dataclass
class ExtensionProblem:
    """Cached matrices of the void extension on a full-layer mesh."""

    lmesh: LayerMesh
    dofmap: DofMap
    solid_dofs: np.ndarray
    void_dofs: np.ndarray
    full_energy: sp.csr_matrix
    solid_energy: sp.csr_matrix   # restricted to solid dofs
    solid_mass: sp.csr_matrix
    void_vv: sp.csr_matrix
    void_vs: sp.csr_matrix

    @property
    def has_void(self) -> bool:
        return self.void_vv.shape[0] > 0 or bool((~self.lmesh.solid).any())


def extension_problem(lmesh: LayerMesh) -> ExtensionProblem:
    """Split the plain strain energy of the full layer into solid and void
    blocks (solid dofs = dofs of nodes touching a solid element)."""
    dofmap = DofMap(lmesh, ncomp=3)
    ident = ElasticityTensor4.identity()
    solid_elems = lmesh.elems[lmesh.solid]
    void_elems = lmesh.elems[~lmesh.solid]

    n = dofmap.n_dofs
    solid_nodes = np.zeros(lmesh.n_nodes, dtype=bool)
    solid_nodes[solid_elems.ravel()] = True
    sd_mask = np.repeat(solid_nodes, 3)
    solid_dofs = np.nonzero(sd_mask)[0]
    void_dofs = np.nonzero(~sd_mask)[0]

    full = fem.assemble_elasticity(lmesh, ident, dofmap).matrix
    s_mat = fem.assemble_elasticity(lmesh, ident, dofmap, elems=solid_elems).matrix
    m_mat = fem.assemble_mass(lmesh, dofmap, elems=solid_elems).matrix
    if void_elems.shape[0]:
        v_mat = fem.assemble_elasticity(lmesh, ident, dofmap, elems=void_elems).matrix
    else:
        v_mat = sp.csr_matrix((n, n))
    return ExtensionProblem(
        lmesh=lmesh, dofmap=dofmap, solid_dofs=solid_dofs, void_dofs=void_dofs,
        full_energy=full,
        solid_energy=s_mat[solid_dofs][:, solid_dofs].tocsr(),
        solid_mass=m_mat[solid_dofs][:, solid_dofs].tocsr(),
        void_vv=v_mat[void_dofs][:, void_dofs].tocsr(),
        void_vs=v_mat[void_dofs][:, solid_dofs].tocsr(),
    )


def extend_field(prob: ExtensionProblem, nodal: np.ndarray,
                 tol: float = 1e-11) -> np.ndarray:
    """Fill the void nodes by minimizing the void strain energy with the
    solid values as Dirichlet data; solid values are returned unchanged.

    Accepts a full-layer mesh in place of a prebuilt ExtensionProblem."""
    if isinstance(prob, LayerMesh):
        prob = extension_problem(prob)
    full = np.asarray(nodal, dtype=float).reshape(-1).copy()
    if prob.void_dofs.size == 0:
        return full.reshape(-1, 3)
    vs = full[prob.solid_dofs]
    rhs = -prob.void_vs @ vs
    op = SymmetricOperator(prob.void_vv)
    w = fem.solve_spd(op, rhs, tol=tol,
                      max_iter=max(4000, 40 * int(np.sqrt(max(rhs.shape[0], 1))) + 200))
    full[prob.void_dofs] = w
    return full.reshape(-1, 3)


def _orthonormal_rigid(prob: ExtensionProblem) -> np.ndarray:
    """Rigid modes on the solid dofs, orthonormalized against the solid mass."""
    modes = fem.rigid_modes(prob.lmesh.coords).reshape(6, -1)[:, prob.solid_dofs]
    m = prob.solid_mass
    basis = []
    for v in modes:
        w = v.copy()
        for b in basis:
            w -= float(b @ (m @ w)) * b
        nrm = np.sqrt(max(float(w @ (m @ w)), 0.0))
        if nrm > 1e-12:
            basis.append(w / nrm)
    return np.array(basis)


def extension_norm(prob: ExtensionProblem, tol: float = 1e-8, seed: int = 0,
                   block: int = 2, max_iter: int = 400) -> ConstantEstimate:
    """Operator norm of the energy-minimizing extension on the quotient
    modulo rigid displacements: sup |D(Ev)| / |D(v)|.

    Exactly one on an unperforated layer (the extension is the identity).
    """
    lmesh = prob.lmesh
    if not prob.has_void or prob.void_dofs.size == 0:
        return ConstantEstimate("extension", lmesh.eps, lmesh.resolution,
                                1.0, 0.0, 0)
    rigid = _orthonormal_rigid(prob)
    m = prob.solid_mass
    s = prob.solid_energy
    nsd = prob.solid_dofs.size
    n_all = prob.dofmap.n_dofs
    f = prob.full_energy
    vs_t = prob.void_vs.T.tocsr()
    void_op = SymmetricOperator(prob.void_vv)

    def project(V):
        V = np.atleast_2d(V.T).T
        for b in rigid:
            V = V - np.outer(b, b @ (m @ V))
        return V

    def apply_n(v):
        full = np.zeros(n_all)
        full[prob.solid_dofs] = v
        rhs = -prob.void_vs @ v
        w = fem.solve_spd(void_op, rhs, tol=1e-12,
                          max_iter=max(4000, 60 * int(np.sqrt(rhs.shape[0])) + 200))
        full[prob.void_dofs] = w
        r = f @ full
        z = fem.solve_spd(void_op, r[prob.void_dofs], tol=1e-12,
                          max_iter=max(4000, 60 * int(np.sqrt(rhs.shape[0])) + 200))
        return r[prob.solid_dofs] - vs_t @ z

    # rank-6 augmentation keeps CG positive definite across the rigid kernel;
    # right-hand sides are orthogonal to it, so solutions are unchanged
    sigma0 = s.diagonal().mean()
    s_aug = SymmetricOperator(s, [(sigma0, m @ b) for b in rigid])
    s_op = SymmetricOperator(s)

    def solve_s(r, x0=None, tol_hint=None):
        rp = project(r[:, None])[:, 0]
        x = fem.solve_spd(s_aug, rp, tol=tol_hint if tol_hint else 1e-10,
                          x0=None if x0 is None else project(x0[:, None])[:, 0],
                          max_iter=max(8000, 60 * int(np.sqrt(nsd)) + 200))
        return project(x[:, None])[:, 0]

    res = fem.max_rayleigh_pair(apply_n, solve_s, s_op.matvec, nsd, tol=tol,
                                seed=seed, block=block, max_iter=max_iter,
                                project=project)
    ratio = float(np.sqrt(max(res.value, 1.0)))
    return ConstantEstimate("extension", lmesh.eps, lmesh.resolution, ratio,
                            res.residual, res.iterations)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def constant_sweep(kind: str, geom, sigma, eps_list, n: int, tol: float = 1e-8,
                   seed: int = 0, workers: int = 1) -> ConstantSweep:
    """Estimate one inequality constant for every eps in the list."""
    sweep = ConstantSweep(inequality=kind, geometry_digest=geom.digest())

    def job(eps):
        if kind == "korn":
            lmesh = build_layer_mesh(geom, eps, sigma, n)
            return korn_constant(lmesh, eps, tol=tol, seed=seed)
        if kind == "trace":
            lmesh = build_layer_mesh(geom, eps, sigma, n, include_void=True)
            return trace_constant(lmesh, eps, tol=tol, seed=seed)
        if kind == "extension":
            lmesh = build_layer_mesh(geom, eps, sigma, n, include_void=True)
            return extension_norm(extension_problem(lmesh), tol=tol, seed=seed)
        raise ValueError(f"unknown inequality {kind!r}")

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            sweep.rows = list(pool.map(job, eps_list))
    else:
        sweep.rows = [job(e) for e in eps_list]
    return sweep
