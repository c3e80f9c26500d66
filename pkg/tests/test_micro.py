import numpy as np
import pytest

from perfolayer import fem
from perfolayer import geometry as pg
from perfolayer import micro as pm
from perfolayer import plate as pp
from perfolayer.errors import EmptyColumn, TimeMismatch
from perfolayer.loads import CellQuadrature, LoadModel, preset_load_model, _const

from conftest import SIGMA, rng


@pytest.fixture(scope="module")
def full_geom2():
    return pg.build_cell_geometry("full", m=2)


@pytest.fixture(scope="module")
def cq(full_geom):
    return CellQuadrature.from_cell_mesh(pg.build_cell_mesh(full_geom, 4))


def _loads(preset, cq, params=None):
    return preset_load_model(preset, params).with_cell_quadrature(cq)


def test_micro_scaling_eps_one(full_geom2, iso_tensor, cq):
    lmesh = pg.build_layer_mesh(full_geom2, 1.0, SIGMA, 2)
    ops = pm.assemble_micro(lmesh, iso_tensor, 1.0, _loads("zero", cq))
    dm = ops.dofmap
    plain = fem.assemble_elasticity(lmesh, iso_tensor, dm)
    diff = (ops.stiffness.matrix - plain.matrix).toarray()
    assert np.abs(diff).max() <= 1e-14 * np.abs(plain.matrix.toarray()).max()


def test_micro_scaling_quarter(full_geom2, iso_tensor, cq):
    # eps = 1/2: the scaled stiffness is 4x the plain elasticity form
    lmesh = pg.build_layer_mesh(full_geom2, 0.5, SIGMA, 2)
    ops = pm.assemble_micro(lmesh, iso_tensor, 0.5, _loads("zero", cq))
    plain = fem.assemble_elasticity(lmesh, iso_tensor, ops.dofmap)
    diff = (ops.stiffness.matrix - 4.0 * plain.matrix).toarray()
    assert np.abs(diff).max() <= 1e-12 * np.abs(plain.matrix.toarray()).max()


def test_micro_rigid_energy_zero_before_dirichlet(full_geom2, iso_tensor):
    lmesh = pg.build_layer_mesh(full_geom2, 0.5, SIGMA, 2)
    dm = fem.DofMap(lmesh, 3)  # no constraints
    k = fem.assemble_elasticity(lmesh, iso_tensor, dm)
    rigid = fem.RigidDisplacement(b=[1.0, 2.0, -1.0],
                                  a=[[0, 1, 0], [-1, 0, 2], [0, -2, 0]])
    e = k.quad(dm.restrict(rigid.evaluate(lmesh.coords)))
    assert abs(e) <= 1e-10 * np.abs(k.matrix).max()


def test_micro_zero_loads_zero_trajectory(full_geom2, iso_tensor, cq):
    lmesh = pg.build_layer_mesh(full_geom2, 0.5, SIGMA, 2)
    ops = pm.assemble_micro(lmesh, iso_tensor, 0.5, _loads("zero", cq))
    traj = pm.run_micro(ops, _loads("zero", cq), dt=0.05, t_end=0.2)
    rows = np.asarray(traj.rows)
    assert np.abs(rows[:, 1:5]).max() == 0.0


def test_micro_single_picard_z_independent(full_geom2, iso_tensor, cq):
    lmesh = pg.build_layer_mesh(full_geom2, 0.5, SIGMA, 2)
    loads = _loads("uniform_vertical", cq)
    ops = pm.assemble_micro(lmesh, iso_tensor, 0.5, loads)
    state = pm.micro_step(pm.zero_micro_state(ops), 0.05, loads)
    assert state.picard_iters == 1


def test_micro_picard_linear_z(full_geom2, iso_tensor, cq):
    lmesh = pg.build_layer_mesh(full_geom2, 0.5, SIGMA, 2)
    loads = _loads("linear_z", cq, {"slope": 0.2})
    ops = pm.assemble_micro(lmesh, iso_tensor, 0.5, loads)
    state = pm.micro_step(pm.zero_micro_state(ops), 0.05, loads,
                          picard_tol=1e-12)
    assert state.picard_converged
    assert state.picard_iters <= 10


def test_micro_energy_conserved_after_cutoff(full_geom2, iso_tensor, cq):
    eps = 0.5
    dt = eps / 16
    lmesh = pg.build_layer_mesh(full_geom2, eps, SIGMA, 2)
    loads = _loads("pulse", cq, {"t0": 4 * dt})
    ops = pm.assemble_micro(lmesh, iso_tensor, eps, loads)
    traj = pm.run_micro(ops, loads, dt=dt, t_end=20 * dt, tol=1e-13,
                        store_states=True)
    # scaled energy eps^-1 |v|^2 + eps^-3 |D u|^2_A = 2 E_h / eps
    energies = [sum(s.energies()) for s in traj.states if s.t > 4 * dt + dt / 2]
    e0 = energies[0]
    for e1, e2 in zip(energies, energies[1:]):
        assert abs(e2 - e1) <= 1e-9 * e0


def test_micro_dirichlet_conformity(full_geom2, iso_tensor, cq):
    lmesh = pg.build_layer_mesh(full_geom2, 0.5, SIGMA, 2)
    loads = _loads("smooth", cq)
    ops = pm.assemble_micro(lmesh, iso_tensor, 0.5, loads)
    traj = pm.run_micro(ops, loads, dt=0.05, t_end=0.2, store_states=True)
    for st in traj.states:
        nod = st.nodal()
        assert np.abs(nod[lmesh.dirichlet_nodes]).max() == 0.0


def test_micro_no_energy_growth_zero_loads(full_geom2, iso_tensor, cq):
    # kick the system, then integrate without loads at several step sizes
    eps = 0.5
    lmesh = pg.build_layer_mesh(full_geom2, eps, SIGMA, 2)
    loads = _loads("zero", cq)
    ops = pm.assemble_micro(lmesh, iso_tensor, eps, loads)
    r = rng(5)
    for dt in (0.02, 0.1, 0.5):
        state = pm.zero_micro_state(ops)
        v0 = r.standard_normal(ops.dofmap.n_dofs)
        state = pm.MicroState(ops=ops, t=0.0, u=state.u, v=v0, a=state.a)
        e0 = sum(state.energies())
        for _ in range(10):
            state = pm.micro_step(state, dt, loads, tol=1e-13)
        assert sum(state.energies()) <= e0 * (1 + 1e-9)


def test_apriori_scaling_linearity(full_geom2, iso_tensor, cq):
    eps = 0.5
    lmesh = pg.build_layer_mesh(full_geom2, eps, SIGMA, 2)
    base = _loads("smooth", cq)
    doubled = LoadModel(
        tuple(lambda *a, f=f: 2.0 * f(*a) for f in base.f),
        tuple(lambda *a, g=g: 2.0 * g(*a) for g in base.g),
        lipschitz=0.0, depends_y=False, depends_z=False,
        cell_quad=base.cell_quad)
    ops = pm.assemble_micro(lmesh, iso_tensor, eps, base)
    ops2 = pm.assemble_micro(lmesh, iso_tensor, eps, doubled)
    t1 = pm.run_micro(ops, base, dt=0.05, t_end=0.2)
    t2 = pm.run_micro(ops2, doubled, dt=0.05, t_end=0.2)
    a1 = pm.apriori_check(t1)
    a2 = pm.apriori_check(t2)
    assert a2["max_apriori_v"] == pytest.approx(2 * a1["max_apriori_v"], rel=1e-9)
    assert a2["max_apriori_D"] == pytest.approx(2 * a1["max_apriori_D"], rel=1e-9)


# ---------------------------------------------------------------------------
# vertical moments
# ---------------------------------------------------------------------------

def test_plate_moments_constant_inplane(full_geom2):
    eps = 0.5
    lmesh = pg.build_layer_mesh(full_geom2, eps, SIGMA, 2)
    c = 0.7
    u = np.zeros((lmesh.n_nodes, 3))
    u[:, 0] = eps * c
    pts = np.array([[0.3, 0.4], [0.6, 0.7]])
    U, R = pm.plate_moments(lmesh, u, eps, pts)
    assert np.allclose(U[:, 0], c, atol=1e-12)
    assert np.allclose(U[:, 1], 0.0, atol=1e-14)
    assert np.abs(R).max() <= 1e-12


def test_plate_moments_rotation(full_geom2):
    eps = 0.5
    lmesh = pg.build_layer_mesh(full_geom2, eps, SIGMA, 2)
    d = 1.3
    u = np.zeros((lmesh.n_nodes, 3))
    u[:, 0] = -lmesh.coords[:, 2] * d
    pts = np.array([[0.3, 0.4]])
    U, R = pm.plate_moments(lmesh, u, eps, pts)
    assert np.abs(U).max() <= 1e-12  # odd moment integrates to zero
    assert R[0, 0] == pytest.approx(-d, rel=1e-12)
    assert abs(R[0, 1]) <= 1e-12


def test_plate_moments_empty_column():
    # vertical through-hole (touches S+-): the line through it meets no solid
    mask = np.ones((4, 4, 8), dtype=bool)
    mask[1, 1, :] = False
    geom = pg.build_cell_geometry(mask)
    lmesh = pg.build_layer_mesh(geom, 1.0, SIGMA, 4)
    u = np.zeros((lmesh.n_nodes, 3))
    with pytest.raises(EmptyColumn):
        pm.plate_moments(lmesh, u, 1.0, np.array([[0.375, 0.375]]))


# ---------------------------------------------------------------------------
# two-scale report
# ---------------------------------------------------------------------------

def _free_plate_system(eff, n_sigma=4):
    pmesh = pg.build_plate_mesh(SIGMA, n_sigma)
    pmesh.clamped_nodes = np.array([], dtype=np.int64)
    return pp.assemble_plate_system(pmesh, eff)


def test_two_scale_zero_states(box_cell_n4, iso_tensor, cq):
    mesh, sols, eff = box_cell_n4
    lmesh = pg.build_layer_mesh(mesh.geometry, 0.5, SIGMA, 4)
    ops = pm.assemble_micro(lmesh, iso_tensor, 0.5, _loads("zero", cq))
    system = _free_plate_system(eff)
    mstate = pm.zero_micro_state(ops)
    pstate = pp.zero_state(system)
    rep = pm.two_scale_errors(mstate, pstate, sols)
    assert rep.err_u3 == 0.0
    assert rep.err_u1 == (0.0, 0.0)
    assert rep.err_symgrad == 0.0


def test_two_scale_time_mismatch(box_cell_n4, iso_tensor, cq):
    mesh, sols, eff = box_cell_n4
    lmesh = pg.build_layer_mesh(mesh.geometry, 0.5, SIGMA, 4)
    ops = pm.assemble_micro(lmesh, iso_tensor, 0.5, _loads("zero", cq))
    system = _free_plate_system(eff)
    mstate = pm.zero_micro_state(ops)
    pstate = pp.zero_state(system)
    pstate = pp.PlateState(system=system, t=1.0, w=pstate.w, v=pstate.v,
                           a=pstate.a, m=pstate.m)
    with pytest.raises(TimeMismatch):
        pm.two_scale_errors(mstate, pstate, sols)


@pytest.mark.parametrize("eps", [0.5, 0.25])
def test_two_scale_kirchhoff_love_ansatz_exact(box_cell_n4, iso_tensor, cq, eps):
    # bilinear macro fields make the KL ansatz trilinear on the micro mesh:
    # displacement errors vanish to quadrature accuracy
    mesh, sols, eff = box_cell_n4
    system = _free_plate_system(eff)
    coords = system.pmesh.coords

    def wfun(x, y):
        return 0.3 + 0.2 * x - 0.1 * y + 0.5 * x * y

    nodal_w = np.zeros((system.pmesh.n_nodes, 4))
    nodal_w[:, 0] = wfun(coords[:, 0], coords[:, 1])
    nodal_w[:, 1] = 0.2 + 0.5 * coords[:, 1]
    nodal_w[:, 2] = -0.1 + 0.5 * coords[:, 0]
    nodal_w[:, 3] = 0.5
    nodal_m = np.zeros((system.pmesh.n_nodes, 2))
    nodal_m[:, 0] = 0.1 * coords[:, 0] + 0.4 * coords[:, 1]
    nodal_m[:, 1] = -0.2 * coords[:, 1]

    pstate = pp.zero_state(system)
    pstate = pp.PlateState(system=system, t=0.0,
                           w=system.bend_dofs.restrict(nodal_w),
                           v=pstate.v, a=pstate.a,
                           m=system.memb_dofs.restrict(nodal_m))

    lmesh = pg.build_layer_mesh(mesh.geometry, eps, SIGMA, 4)
    ops = pm.assemble_micro(lmesh, iso_tensor, eps, _loads("zero", cq))
    u_nodal = pm.kirchhoff_love_field(lmesh, pstate, eps)
    red = ops.dofmap.restrict(u_nodal)
    mstate = pm.MicroState(ops=ops, t=0.0, u=red, v=np.zeros_like(red),
                           a=np.zeros_like(red))
    # bypass the Dirichlet zeroing for this diagnostic: use nodal directly
    mstate.nodal = lambda: u_nodal
    rep = pm.two_scale_errors(mstate, pstate, sols)
    assert rep.err_u3 <= 1e-10
    assert max(rep.err_u1) <= 1e-10


def test_reconstruct_corrector_from_plate_state(box_cell_n4):
    from perfolayer.cell import combine_corrector, reconstruct_corrector

    mesh, sols, eff = box_cell_n4
    system = _free_plate_system(eff)
    coords = system.pmesh.coords
    nodal_w = np.zeros((system.pmesh.n_nodes, 4))
    nodal_w[:, 0] = 0.5 * coords[:, 0] ** 2  # hessian = diag(1, 0)
    nodal_w[:, 1] = coords[:, 0]
    nodal_m = np.zeros((system.pmesh.n_nodes, 2))
    nodal_m[:, 0] = coords[:, 0]  # membrane strain = M_11
    base = pp.zero_state(system)
    pstate = pp.PlateState(system=system, t=0.0,
                           w=system.bend_dofs.restrict(nodal_w),
                           v=base.v, a=base.a,
                           m=system.memb_dofs.restrict(nodal_m))
    x_bar = (0.4, 0.6)
    got = reconstruct_corrector(sols, pstate, x_bar)
    want = combine_corrector(sols, np.array([[1.0, 0.0], [0.0, 0.0]]),
                             np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert np.allclose(got, want, atol=1e-10)
