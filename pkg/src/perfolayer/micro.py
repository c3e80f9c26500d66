"""Reference solver on the perforated thin layer and two-scale diagnostics.

The semi-linear elastic wave equation is integrated in its eps-scaled weak
form (mass unweighted, stiffness carrying 1/eps^2, loads with the explicit
eps factors on the vertical components).  Diagnostics compare the micro
solution against the homogenized plate fields: vertical averages, scaled
displacement errors and the scaled symmetric-gradient error including the
cell corrector.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import fem
from .cell import CellSolutionSet, INDEX_PAIRS
from .errors import EmptyColumn, InconsistentMesh, TimeMismatch
from .fem import DofMap, ElasticityTensor4, SymmetricOperator
from .geometry import HEX_CORNERS, LayerMesh
from .loads import LoadModel
from .plate import PlateState, evaluate_deflection, evaluate_membrane


@dataclass
class MicroOperators:
    """Assembled operators and cached quadrature data for one eps."""

    lmesh: LayerMesh
    dofmap: DofMap
    eps: float
    mass: SymmetricOperator
    stiffness: SymmetricOperator      # eps^-2 int A_eps D(u):D(phi)
    strain_energy: SymmetricOperator  # plain int |D(u)|^2, for norms
    quad_x: np.ndarray                # (E, Q, 3) physical points
    quad_y: np.ndarray                # (E, Q, 3) cell coordinates x/eps mod 1
    quad_w: np.ndarray
    surface_rhs: np.ndarray           # fixed traction contribution


@dataclass
class MicroState:
    """Displacement, velocity and acceleration on the layer mesh at time t."""

    ops: MicroOperators
    t: float
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    picard_iters: int = 0
    picard_converged: bool = True

    @property
    def eps(self) -> float:
        return self.ops.eps

    def nodal(self) -> np.ndarray:
        return self.ops.dofmap.expand(self.u)

    def scaled_velocity_norm(self) -> float:
        return float(np.sqrt(max(self.v @ self.ops.mass.matvec(self.v), 0.0))
                     / np.sqrt(self.eps))

    def scaled_strain_norm(self) -> float:
        e = float(self.u @ self.ops.strain_energy.matvec(self.u))
        return float(np.sqrt(max(e, 0.0)) / self.eps**1.5)

    def energies(self):
        kin = 0.5 * float(self.v @ self.ops.mass.matvec(self.v))
        ela = 0.5 * float(self.u @ self.ops.stiffness.matvec(self.u))
        return kin, ela


def assemble_micro(lmesh: LayerMesh, tensor: ElasticityTensor4, eps: float,
                   loads: LoadModel | None = None) -> MicroOperators:
    """Mass and eps^-2-scaled stiffness with Dirichlet on the lateral
    boundary, plus the fixed interior-surface traction vector."""
    if abs(eps - lmesh.eps) > 1e-12:
        raise InconsistentMesh("eps does not match the layer mesh")
    dofmap = DofMap(lmesh, ncomp=3, dirichlet_nodes=lmesh.dirichlet_nodes)
    mass = fem.assemble_mass(lmesh, dofmap)
    k = fem.assemble_elasticity(lmesh, tensor, dofmap)
    stiffness = SymmetricOperator(k.matrix * (1.0 / eps**2))
    k_d = fem.assemble_elasticity(lmesh, ElasticityTensor4.identity(), dofmap)

    quad_x = fem.quadrature_points(lmesh)
    quad_y = quad_x / eps
    quad_y[..., 0] %= 1.0
    quad_y[..., 1] %= 1.0
    quad_w = np.array(fem.quadrature_weights(lmesh))

    surface_rhs = np.zeros(dofmap.n_dofs)
    if loads is not None and lmesh.gamma_faces.shape[0]:
        spts, sw = fem.surface_quadrature(lmesh, lmesh.gamma_faces)
        sy = spts / eps
        sy[:, 0] %= 1.0
        sy[:, 1] %= 1.0
        tract = np.stack([
            loads.eval_g(0, spts[:, 0], spts[:, 1], sy[:, 0], sy[:, 1], sy[:, 2]),
            loads.eval_g(1, spts[:, 0], spts[:, 1], sy[:, 0], sy[:, 1], sy[:, 2]),
            eps * loads.eval_g(2, spts[:, 0], spts[:, 1], sy[:, 0], sy[:, 1], sy[:, 2]),
        ], axis=-1)
        surface_rhs = -fem.surface_load_vector(lmesh, dofmap, lmesh.gamma_faces, tract)

    return MicroOperators(lmesh=lmesh, dofmap=dofmap, eps=eps, mass=mass,
                          stiffness=stiffness, strain_energy=k_d,
                          quad_x=quad_x, quad_y=quad_y, quad_w=quad_w,
                          surface_rhs=surface_rhs)


def zero_micro_state(ops: MicroOperators) -> MicroState:
    n = ops.dofmap.n_dofs
    return MicroState(ops=ops, t=0.0, u=np.zeros(n), v=np.zeros(n), a=np.zeros(n))


def _volume_rhs(ops: MicroOperators, loads: LoadModel, t: float,
                u3_quad: np.ndarray) -> np.ndarray:
    """Load vector of the scaled volume force (f1/eps, f2/eps, f3)."""
    eps = ops.eps
    x = ops.quad_x
    y = ops.quad_y
    E, Q = x.shape[:2]
    fvals = np.empty((E, Q, 3))
    for i in range(3):
        fvals[..., i] = loads.eval_f(i, t, x[..., 0], x[..., 1],
                                     y[..., 0], y[..., 1], y[..., 2], u3_quad)
    fvals[..., 0] /= eps
    fvals[..., 1] /= eps
    N, G, w, _ = fem.hex_reference(ops.lmesh.spacing)
    local = np.einsum("q,qa,eqc->eac", w, N, fvals).reshape(E, -1)
    edofs = ops.dofmap.element_dofs(ops.lmesh.elems)
    return fem.scatter_vector(local, edofs, ops.dofmap.n_dofs)


def micro_rhs(ops: MicroOperators, loads: LoadModel, t: float,
              u_nodal: np.ndarray) -> np.ndarray:
    u3_quad = fem.element_values(ops.lmesh, u_nodal)[..., 2]
    return _volume_rhs(ops, loads, t, u3_quad) + ops.surface_rhs


def micro_step(state: MicroState, dt: float, loads: LoadModel,
               beta: float = 0.25, gamma: float = 0.5,
               picard_tol: float = 1e-10, picard_max: int = 30,
               tol: float = 1e-11, k_eff: SymmetricOperator | None = None) -> MicroState:
    """One Newmark step of the scaled micro model with Picard resolution of
    the semi-linear volume force."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    ops = state.ops
    t_new = state.t + dt
    if k_eff is None:
        k_eff = effective_operator(ops, dt, beta)
    u_pred = state.u + dt * state.v + dt * dt * (0.5 - beta) * state.a
    ku_pred = ops.stiffness.matvec(u_pred)

    u_iter = u_pred.copy()
    a_new = state.a.copy()
    converged = False
    iters = 0
    for iters in range(1, picard_max + 1):
        rhs = micro_rhs(ops, loads, t_new, ops.dofmap.expand(u_iter)) - ku_pred
        a_new = fem.solve_spd(k_eff, rhs, tol=tol, x0=a_new,
                              max_iter=max(4000, 40 * int(np.sqrt(rhs.shape[0])) + 200))
        u_new = u_pred + beta * dt * dt * a_new
        delta = np.linalg.norm(u_new - u_iter) / max(np.linalg.norm(u_new), 1e-30)
        u_iter = u_new
        if not loads.f_depends_z or delta <= picard_tol:
            converged = True
            break
    v_new = state.v + dt * ((1.0 - gamma) * state.a + gamma * a_new)
    return MicroState(ops=ops, t=t_new, u=u_iter, v=v_new, a=a_new,
                      picard_iters=iters, picard_converged=converged)


def effective_operator(ops: MicroOperators, dt: float, beta: float = 0.25):
    return SymmetricOperator(ops.mass.matrix + (beta * dt * dt) * ops.stiffness.matrix)


@dataclass
class MicroTrajectory:
    ops: MicroOperators
    rows: list = field(default_factory=list)
    states: list = field(default_factory=list)

    HEADER = ["t", "apriori_v", "apriori_D", "kinetic", "elastic", "picard_iters"]


def run_micro(ops: MicroOperators, loads: LoadModel, dt: float, t_end: float,
              beta: float = 0.25, gamma: float = 0.5, picard_tol: float = 1e-10,
              picard_max: int = 30, tol: float = 1e-11,
              store_states: bool = False, on_state=None) -> MicroTrajectory:
    """Integrate from zero initial data; records the scaled a priori
    quantities and the discrete energies per step."""
    traj = MicroTrajectory(ops=ops)
    state = zero_micro_state(ops)
    rhs0 = micro_rhs(ops, loads, 0.0, ops.dofmap.expand(state.u))
    a0 = fem.solve_spd(ops.mass, rhs0, tol=tol)
    state = replace(state, a=a0)
    k_eff = effective_operator(ops, dt, beta)

    def record(st: MicroState):
        kin, ela = st.energies()
        traj.rows.append([st.t, st.scaled_velocity_norm(), st.scaled_strain_norm(),
                          kin, ela, st.picard_iters])
        if store_states:
            traj.states.append(st)
        if on_state is not None:
            on_state(st)

    record(state)
    for _ in range(int(round(t_end / dt))):
        state = micro_step(state, dt, loads, beta=beta, gamma=gamma,
                           picard_tol=picard_tol, picard_max=picard_max,
                           tol=tol, k_eff=k_eff)
        record(state)
    traj.final = state
    return traj


def apriori_check(traj: MicroTrajectory) -> dict:
    """Per-step scaled quantities of the energy estimate and their maxima."""
    rows = np.asarray(traj.rows, dtype=float)
    return {
        "t": rows[:, 0],
        "apriori_v": rows[:, 1],
        "apriori_D": rows[:, 2],
        "max_apriori_v": float(rows[:, 1].max()),
        "max_apriori_D": float(rows[:, 2].max()),
    }


# ---------------------------------------------------------------------------
# vertical moments
# ---------------------------------------------------------------------------

def _voxel_element_map(lmesh: LayerMesh):
    n = lmesh.resolution
    (a1, b1, a2, b2) = lmesh.sigma
    w1 = int(round((b1 - a1) / lmesh.eps))
    w2 = int(round((b2 - a2) / lmesh.eps))
    shape = (w1 * n, w2 * n, 2 * n)
    vox = -np.ones(shape, dtype=np.int64)
    cell = lmesh.cell_index[:, 0]
    local = lmesh.cell_index[:, 1]
    k1, k2 = cell // w2, cell % w2
    l3 = local % (2 * n)
    rest = local // (2 * n)
    l2 = rest % n
    l1 = rest // n
    vox[k1 * n + l1, k2 * n + l2, l3] = np.arange(lmesh.n_elems)
    return vox


def plate_moments(lmesh: LayerMesh, u_nodal: np.ndarray, eps: float,
                  pts: np.ndarray):
    """Vertical zeroth and first moments of the in-plane displacement.

    Returns (U, R) with U = 1/(2 eps^2) int u^alpha dx3 and
    R = 3/(2 eps^3) int x3 u^alpha dx3, integrated over the solid part of
    each vertical line and normalized by the full thickness.
    """
    pts = np.atleast_2d(pts)
    vox = _voxel_element_map(lmesh)
    (a1, b1, a2, b2) = lmesh.sigma
    h = lmesh.spacing[0]
    n3 = vox.shape[2]
    i1 = np.clip(((pts[:, 0] - a1) / h).astype(np.int64), 0, vox.shape[0] - 1)
    i2 = np.clip(((pts[:, 1] - a2) / h).astype(np.int64), 0, vox.shape[1] - 1)
    xi1 = (pts[:, 0] - a1) / h - i1
    xi2 = (pts[:, 1] - a2) / h - i2

    P = pts.shape[0]
    integral_u = np.zeros((P, 2))
    integral_xu = np.zeros((P, 2))
    hits = np.zeros(P, dtype=np.int64)
    g = 0.5 / np.sqrt(3.0)
    gauss = (0.5 - g, 0.5 + g)

    for l3 in range(n3):
        elem = vox[i1, i2, l3]
        act = elem >= 0
        if not act.any():
            continue
        hits[act] += 1
        conn = lmesh.elems[elem[act]]
        un = u_nodal[conn]  # (Pa, 8, 3)
        for xg in gauss:
            shp = np.empty((act.sum(), 8))
            for a, (ca, cb, cc) in enumerate(HEX_CORNERS):
                sx = xi1[act] if ca else 1.0 - xi1[act]
                sy = xi2[act] if cb else 1.0 - xi2[act]
                sz = xg if cc else 1.0 - xg
                shp[:, a] = sx * sy * sz
            uval = np.einsum("pa,pac->pc", shp, un[:, :, :2])
            x3 = -eps + (l3 + xg) * h
            wq = 0.5 * h
            integral_u[act] += wq * uval
            integral_xu[act] += wq * x3 * uval
    if (hits == 0).any():
        raise EmptyColumn(f"{int((hits == 0).sum())} vertical lines meet no solid")
    U = integral_u / (2.0 * eps**2)
    R = 3.0 * integral_xu / (2.0 * eps**3)
    return U, R


def moment_errors(plate_state: PlateState, lmesh: LayerMesh, u_nodal: np.ndarray,
                  eps: float):
    """L2(Sigma) distances of the vertical averages to the macro fields:
    |U_eps - u1| and |R_eps + grad u03|."""
    system = plate_state.system
    pts = system.quad_xy.reshape(-1, 2)
    wq = np.broadcast_to(system.quad_w, system.quad_xy.shape[:2]).ravel()
    U, R = plate_moments(lmesh, u_nodal, eps, pts)
    u1 = evaluate_membrane(system, plate_state.m, pts)
    _, grad, _ = evaluate_deflection(system, plate_state.w, pts, derivatives=True)
    errU = float(np.sqrt(np.sum(wq[:, None] * (U - u1) ** 2)))
    errR = float(np.sqrt(np.sum(wq[:, None] * (R + grad) ** 2)))
    return errU, errR


# ---------------------------------------------------------------------------
# two-scale error report
# ---------------------------------------------------------------------------

@dataclass
class TwoScaleReport:
    """Scaled distances between the micro solution and the homogenized
    Kirchhoff-Love reconstruction at one (eps, t)."""

    eps: float
    t: float
    err_u3: float
    err_u1: tuple
    err_symgrad: float
    apriori_v: float
    apriori_D: float

    HEADER = ["eps", "t", "err_u3", "err_u1_1", "err_u1_2", "err_symgrad",
              "apriori_v", "apriori_D"]

    def row(self):
        return [self.eps, self.t, self.err_u3, self.err_u1[0], self.err_u1[1],
                self.err_symgrad, self.apriori_v, self.apriori_D]


def _cell_element_lookup(lmesh: LayerMesh, cmesh):
    """Map each layer element to its element in the reference cell mesh."""
    if cmesh.resolution != lmesh.resolution:
        raise InconsistentMesh("cell mesh resolution differs from the layer")
    if cmesh.geometry.digest() != lmesh.geometry.digest():
        raise InconsistentMesh("cell mesh geometry differs from the layer")
    n = cmesh.resolution
    fine = np.repeat(np.repeat(np.repeat(
        cmesh.geometry.mask, n // cmesh.geometry.resolution, 0),
        n // cmesh.geometry.resolution, 1), n // cmesh.geometry.resolution, 2)
    lookup = -np.ones(fine.shape, dtype=np.int64)
    order = np.argwhere(fine)
    srt = np.lexsort((order[:, 2], order[:, 1], order[:, 0]))
    order = order[srt]
    lookup[order[:, 0], order[:, 1], order[:, 2]] = np.arange(order.shape[0])
    local = lmesh.cell_index[:, 1]
    l3 = local % (2 * n)
    rest = local // (2 * n)
    l2 = rest % n
    l1 = rest // n
    return lookup[l1, l2, l3]


def two_scale_errors(micro_state: MicroState, plate_state: PlateState,
                     sols: CellSolutionSet) -> TwoScaleReport:
    """Quadrature evaluation of the scaled two-scale errors over the solid
    layer, with the corrector contribution inside the symmetric-gradient
    term."""
    ops = micro_state.ops
    if abs(micro_state.t - plate_state.t) > 1e-10 * max(1.0, abs(micro_state.t)):
        raise TimeMismatch(
            f"micro t = {micro_state.t} but plate t = {plate_state.t}")
    eps = ops.eps
    lmesh = ops.lmesh
    system = plate_state.system

    u_nodal = micro_state.nodal()
    uq = fem.element_values(lmesh, u_nodal)       # (E, Q, 3)
    dq = fem.gradient_decomposition(lmesh, u_nodal).sym
    w = ops.quad_w
    x = ops.quad_x
    E, Q = x.shape[:2]
    pts = x[..., :2].reshape(-1, 2)
    y3 = (x[..., 2] / eps).reshape(-1)

    wvals, grad, hess = evaluate_deflection(system, plate_state.w, pts,
                                            derivatives=True)
    u1, strain = evaluate_membrane(system, plate_state.m, pts, derivatives=True)

    flat_w = w.reshape(-1)
    du3 = uq[..., 2].reshape(-1) - wvals
    err_u3 = np.sqrt(np.sum(flat_w * du3**2) / eps)

    err_u1 = []
    for al in range(2):
        limit = u1[:, al] - y3 * grad[:, al]
        dua = uq[..., al].reshape(-1) / eps - limit
        err_u1.append(float(np.sqrt(np.sum(flat_w * dua**2) / eps)))

    # corrector strain at the matching cell quadrature points
    cell_elem = _cell_element_lookup(lmesh, sols.mesh)
    coeff_s = {
        (1, 1): strain[:, 0, 0], (2, 2): strain[:, 1, 1],
        (1, 2): strain[:, 0, 1] + strain[:, 1, 0],
    }
    coeff_b = {
        (1, 1): hess[:, 0, 0], (2, 2): hess[:, 1, 1],
        (1, 2): hess[:, 0, 1] + hess[:, 1, 0],
    }
    dy_u2 = np.zeros((E * Q, 3, 3))
    for ij in INDEX_PAIRS:
        ds = fem.gradient_decomposition(sols.mesh, sols.stretch[ij].nodal()).sym
        db = fem.gradient_decomposition(sols.mesh, sols.bending[ij].nodal()).sym
        gathered_s = ds[cell_elem].reshape(E * Q, 3, 3)
        gathered_b = db[cell_elem].reshape(E * Q, 3, 3)
        dy_u2 += coeff_s[ij][:, None, None] * gathered_s
        dy_u2 += coeff_b[ij][:, None, None] * gathered_b

    limit_strain = np.zeros((E * Q, 3, 3))
    limit_strain[:, :2, :2] = strain - y3[:, None, None] * hess
    limit_strain += dy_u2
    diff = dq.reshape(E * Q, 3, 3) / eps - limit_strain
    err_sym = float(np.sqrt(np.sum(flat_w * np.sum(diff**2, axis=(1, 2))) / eps))

    return TwoScaleReport(
        eps=eps, t=micro_state.t, err_u3=float(err_u3),
        err_u1=(err_u1[0], err_u1[1]), err_symgrad=err_sym,
        apriori_v=micro_state.scaled_velocity_norm(),
        apriori_D=micro_state.scaled_strain_norm(),
    )


def kirchhoff_love_field(lmesh: LayerMesh, plate_state: PlateState,
                         eps: float) -> np.ndarray:
    """Nodal micro field of the exact Kirchhoff-Love ansatz
    u3 = w(xbar), u_alpha = eps u1_alpha - x3 d_alpha w."""
    system = plate_state.system
    pts = lmesh.coords[:, :2]
    x3 = lmesh.coords[:, 2]
    wvals, grad, _ = evaluate_deflection(system, plate_state.w, pts,
                                         derivatives=True)
    u1 = evaluate_membrane(system, plate_state.m, pts)
    out = np.empty((lmesh.n_nodes, 3))
    out[:, 0] = eps * u1[:, 0] - x3 * grad[:, 0]
    out[:, 1] = eps * u1[:, 1] - x3 * grad[:, 1]
    out[:, 2] = wvals
    return out
