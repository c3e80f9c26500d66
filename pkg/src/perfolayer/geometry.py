"""Voxel geometry and structured meshes for the perforated thin layer.

The reference cell is the box (0,1)^2 x (-1,1).  A perforation is described
by a boolean voxel mask at resolution m (shape (m, m, 2*m), entry True =
solid).  All meshes are axis-aligned hexahedral (or quadrilateral) grids, so
periodic identification and cell tiling are exact.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DisconnectedSolid,
    EmptySolid,
    EpsilonNotReciprocalInteger,
    PeriodicMismatch,
    ResolutionIncompatible,
)

# Local corner offsets of a hexahedron, VTK ordering (bottom quad, top quad).
HEX_CORNERS = np.array(
    [
        (0, 0, 0),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ],
    dtype=np.int64,
)

# Local node ids of the six axis faces (-x, +x, -y, +y, -z, +z).
HEX_FACES = {
    (0, -1): (0, 3, 7, 4),
    (0, +1): (1, 2, 6, 5),
    (1, -1): (0, 1, 5, 4),
    (1, +1): (3, 2, 6, 7),
    (2, -1): (0, 1, 2, 3),
    (2, +1): (4, 5, 6, 7),
}


@dataclass(frozen=True)
class CellGeometry:
    """Voxelized solid reference cell.

    mask[i1, i2, i3] is True when the voxel
    [i1/m,(i1+1)/m] x [i2/m,(i2+1)/m] x [-1+i3/m,-1+(i3+1)/m] is solid.
    """

    mask: np.ndarray
    resolution: int
    gamma_faces: frozenset
    solid_volume: float

    @property
    def is_full(self) -> bool:
        return bool(self.mask.all())

    def digest(self) -> str:
        """Hash identifying the voxel mask (changes iff the mask changes)."""
        h = hashlib.sha256()
        h.update(np.int64(self.resolution).tobytes())
        h.update(np.packbits(self.mask.astype(np.uint8)).tobytes())
        return h.hexdigest()[:16]


@dataclass
class CellMesh:
    """Hexahedral mesh of the solid part of the reference cell.

    Nodes carry cell-unit coordinates; ``node_master`` identifies the lateral
    periodic pairs (y_i = 1 mapped onto y_i = 0).  ``gamma_faces`` are
    (element, axis, side) triples of the interior solid surface.
    """

    geometry: CellGeometry
    resolution: int
    coords: np.ndarray
    elems: np.ndarray
    spacing: tuple
    node_master: np.ndarray
    gamma_faces: np.ndarray
    quadrature: str = "gauss2"

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elems(self) -> int:
        return self.elems.shape[0]

    @property
    def n_periodic_nodes(self) -> int:
        """Number of distinct nodes after periodic identification."""
        return int(np.sum(self.node_master == np.arange(self.n_nodes)))

    def element_volume(self) -> float:
        hx, hy, hz = self.spacing
        return hx * hy * hz


@dataclass
class LayerMesh:
    """Tiled hexahedral mesh of the perforated thin layer (physical units).

    ``dirichlet_nodes`` collects the nodes of solid element faces on the
    lateral layer boundary; ``gamma_faces`` are the interior (traction)
    surface faces.  With ``include_void`` the mesh also carries the void
    elements (``solid`` flags them), which is needed for extension and trace
    estimates on the complete layer.
    """

    geometry: CellGeometry
    eps: float
    sigma: tuple
    resolution: int
    coords: np.ndarray
    elems: np.ndarray
    spacing: tuple
    solid: np.ndarray
    cell_index: np.ndarray
    dirichlet_nodes: np.ndarray
    gamma_faces: np.ndarray
    lateral_faces: np.ndarray
    n_cells: int
    quadrature: str = "gauss2"

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elems(self) -> int:
        return self.elems.shape[0]

    def element_volume(self) -> float:
        hx, hy, hz = self.spacing
        return hx * hy * hz


@dataclass
class PlateMesh:
    """Structured quadrilateral mesh of the midsurface Sigma.

    The bending unknown uses four Hermite degrees of freedom per node
    (value, both first derivatives, mixed derivative); the membrane unknown
    uses two scalar components per node.  ``clamped_nodes`` lists every
    boundary node.
    """

    sigma: tuple
    resolution: int
    coords: np.ndarray
    elems: np.ndarray
    spacing: tuple
    shape: tuple
    clamped_nodes: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elems(self) -> int:
        return self.elems.shape[0]

    @property
    def n_bending_dofs(self) -> int:
        return 4 * self.n_nodes

    @property
    def n_membrane_dofs(self) -> int:
        return 2 * self.n_nodes


def _six_connected(mask: np.ndarray) -> bool:
    """Flood fill over face neighbors; lateral wrap is intentionally not used
    (the continuum cell is connected as a subset of Z, not of the torus)."""
    solid = np.argwhere(mask)
    if solid.shape[0] == 0:
        return True
    visited = np.zeros(mask.shape, dtype=bool)
    stack = [tuple(solid[0])]
    visited[tuple(solid[0])] = True
    count = 0
    shape = mask.shape
    while stack:
        i, j, k = stack.pop()
        count += 1
        for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = i + di, j + dj, k + dk
            if 0 <= a < shape[0] and 0 <= b < shape[1] and 0 <= c < shape[2]:
                if mask[a, b, c] and not visited[a, b, c]:
                    visited[a, b, c] = True
                    stack.append((a, b, c))
    return count == solid.shape[0]


def _collect_gamma_faces(mask: np.ndarray):
    """Faces of solid voxels on the interior surface: neighbor void, or
    missing neighbor across y3 = +/-1.  Lateral cell faces never belong."""
    m1, m2, m3 = mask.shape
    faces = []
    solid = np.argwhere(mask)
    for i, j, k in solid:
        for axis, side in HEX_FACES:
            step = [0, 0, 0]
            step[axis] = side
            a, b, c = i + step[0], j + step[1], k + step[2]
            if axis < 2:
                if 0 <= (a, b)[axis] < (m1, m2)[axis]:
                    if not mask[a, b, c]:
                        faces.append((i, j, k, axis, side))
                # outside laterally: part of the cell boundary, not Gamma
            else:
                if 0 <= c < m3:
                    if not mask[a, b, c]:
                        faces.append((i, j, k, axis, side))
                else:
                    faces.append((i, j, k, axis, side))
    return frozenset(faces)


def build_cell_geometry(descriptor, m: int = 8) -> CellGeometry:
    """Construct the solid reference cell from a perforation descriptor.

    Parameters
    ----------
    descriptor : "full", ("box", bounds) with bounds ((x0,x1),(y0,y1),(z0,z1))
        strictly inside the cell, or an explicit boolean mask of shape
        (m, m, 2*m).  A plain ndarray is treated as an explicit mask.
    m : mask resolution (voxels per unit length).
    """
    if isinstance(descriptor, np.ndarray):
        mask = descriptor.astype(bool)
        if mask.shape != (mask.shape[0], mask.shape[0], 2 * mask.shape[0]):
            raise ResolutionIncompatible(
                f"mask shape {mask.shape} is not (m, m, 2m)")
        m = mask.shape[0]
    elif descriptor == "full":
        mask = np.ones((m, m, 2 * m), dtype=bool)
    elif isinstance(descriptor, tuple) and len(descriptor) == 2 and descriptor[0] == "box":
        (x0, x1), (y0, y1), (z0, z1) = descriptor[1]
        if not (0.0 < x0 < x1 < 1.0 and 0.0 < y0 < y1 < 1.0 and -1.0 < z0 < z1 < 1.0):
            raise ValueError("box hole must lie strictly inside the cell")
        mask = np.ones((m, m, 2 * m), dtype=bool)
        c1 = (np.arange(m) + 0.5) / m
        c3 = -1.0 + (np.arange(2 * m) + 0.5) / m
        hole = (
            ((c1 > x0) & (c1 < x1))[:, None, None]
            & ((c1 > y0) & (c1 < y1))[None, :, None]
            & ((c3 > z0) & (c3 < z1))[None, None, :]
        )
        mask &= ~hole
    else:
        raise ValueError(f"unknown perforation descriptor: {descriptor!r}")

    if not mask.any():
        raise EmptySolid("mask contains no solid voxel")
    for axis in (0, 1):
        lo = np.take(mask, 0, axis=axis)
        hi = np.take(mask, mask.shape[axis] - 1, axis=axis)
        if not np.array_equal(lo, hi):
            raise PeriodicMismatch(
                f"solid pattern on the two y{axis + 1} faces differs")
    if not _six_connected(mask):
        raise DisconnectedSolid("solid voxel set is not 6-connected")

    volume = float(mask.sum()) / m**3
    return CellGeometry(
        mask=mask,
        resolution=m,
        gamma_faces=_collect_gamma_faces(mask),
        solid_volume=volume,
    )


def channel_mask(m: int, width=(0.25, 0.75), height=(-0.5, 0.5),
                 axis: int = 1) -> np.ndarray:
    """Voxel mask of a straight channel running through the cell along the
    given lateral axis (the perforation reaches the lateral boundary in a
    periodically compatible way)."""
    mask = np.ones((m, m, 2 * m), dtype=bool)
    c1 = (np.arange(m) + 0.5) / m
    c3 = -1.0 + (np.arange(2 * m) + 0.5) / m
    across = (c1 > width[0]) & (c1 < width[1])
    vert = (c3 > height[0]) & (c3 < height[1])
    if axis == 1:
        hole = across[:, None, None] & np.ones((1, m, 1), bool) & vert[None, None, :]
    elif axis == 0:
        hole = np.ones((m, 1, 1), bool) & across[None, :, None] & vert[None, None, :]
    else:
        raise ValueError("channel axis must be 0 or 1")
    return mask & ~hole


def _refine_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return mask
    return np.repeat(np.repeat(np.repeat(mask, factor, 0), factor, 1), factor, 2)


def _grid_node_ids(shape):
    """Lexicographic node numbering over a structured grid, last index fastest."""
    return np.arange(int(np.prod(shape)), dtype=np.int64).reshape(shape)


def _hex_connectivity(solid_voxels, node_ids):
    """Element connectivity for the given (i1, i2, i3) voxel list."""
    corners = solid_voxels[:, None, :] + HEX_CORNERS[None, :, :]
    return node_ids[corners[..., 0], corners[..., 1], corners[..., 2]]


def _compress_nodes(elems, n_grid_nodes):
    """Renumber so only nodes referenced by elements remain, preserving order."""
    used = np.zeros(n_grid_nodes, dtype=bool)
    used[elems.ravel()] = True
    new_id = np.cumsum(used, dtype=np.int64) - 1
    return used, new_id


def build_cell_mesh(geom: CellGeometry, n: int) -> CellMesh:
    """Mesh the solid cell with n x n x 2n voxels (n a multiple of the mask
    resolution), with lateral periodic identification."""
    m = geom.resolution
    if n <= 0 or n % m != 0:
        raise ResolutionIncompatible(
            f"elements per unit length n={n} must be a positive multiple of m={m}")
    fine = _refine_mask(geom.mask, n // m)
    voxels = np.argwhere(fine)
    order = np.lexsort((voxels[:, 2], voxels[:, 1], voxels[:, 0]))
    voxels = voxels[order]

    grid_shape = (n + 1, n + 1, 2 * n + 1)
    node_ids = _grid_node_ids(grid_shape)
    elems_grid = _hex_connectivity(voxels, node_ids)
    used, new_id = _compress_nodes(elems_grid, node_ids.size)
    elems = new_id[elems_grid]

    idx = np.argwhere(used.reshape(grid_shape))
    coords = np.empty((idx.shape[0], 3))
    coords[:, 0] = idx[:, 0] / n
    coords[:, 1] = idx[:, 1] / n
    coords[:, 2] = -1.0 + idx[:, 2] / n

    # periodic master: wrap i1 = n -> 0 and i2 = n -> 0
    master_idx = idx.copy()
    master_idx[:, 0] %= n
    master_idx[:, 1] %= n
    grid_master = node_ids[master_idx[:, 0], master_idx[:, 1], master_idx[:, 2]]
    node_master = new_id[grid_master]

    face_lookup = {}
    for e, (i, j, k) in enumerate(voxels):
        face_lookup[(i, j, k)] = e
    gamma = []
    coarse = n // m
    for (ci, cj, ck, axis, side) in sorted(geom.gamma_faces):
        # expand each coarse gamma face into the fine faces covering it
        ranges = [range(ci * coarse, (ci + 1) * coarse),
                  range(cj * coarse, (cj + 1) * coarse),
                  range(ck * coarse, (ck + 1) * coarse)]
        ranges[axis] = (ci * coarse + (coarse - 1 if side > 0 else 0),
                        cj * coarse + (coarse - 1 if side > 0 else 0),
                        ck * coarse + (coarse - 1 if side > 0 else 0))[axis:axis + 1]
        for a in ranges[0]:
            for b in ranges[1]:
                for c in ranges[2]:
                    gamma.append((face_lookup[(a, b, c)], axis, side))
    gamma_faces = np.array(sorted(gamma), dtype=np.int64).reshape(-1, 3)

    return CellMesh(
        geometry=geom,
        resolution=n,
        coords=coords,
        elems=elems,
        spacing=(1.0 / n, 1.0 / n, 1.0 / n),
        node_master=node_master,
        gamma_faces=gamma_faces,
    )


def _check_eps(eps: float) -> int:
    inv = 1.0 / eps
    if abs(inv - round(inv)) > 1e-9 or eps <= 0:
        raise EpsilonNotReciprocalInteger(f"1/eps = {inv} is not an integer")
    return int(round(inv))


def build_layer_mesh(geom: CellGeometry, eps: float, sigma, n: int,
                     include_void: bool = False) -> LayerMesh:
    """Tile the scaled solid cell over Sigma x (-eps, eps).

    Sigma is ((a1, b1), (a2, b2)) with integer corners.  Elements are ordered
    by global voxel index (x3 fastest); ``cell_index`` maps each element to
    (flat cell id, local voxel id).
    """
    _check_eps(eps)
    (a1, b1), (a2, b2) = sigma
    if not all(float(v).is_integer() for v in (a1, b1, a2, b2)):
        raise ValueError("Sigma corners must be integers")
    w1 = int(round((b1 - a1) / eps))
    w2 = int(round((b2 - a2) / eps))
    if abs(w1 * eps - (b1 - a1)) > 1e-12 or abs(w2 * eps - (b2 - a2)) > 1e-12:
        raise EpsilonNotReciprocalInteger("Sigma is not an integer number of cells")
    m = geom.resolution
    if n <= 0 or n % m != 0:
        raise ResolutionIncompatible(
            f"elements per unit length n={n} must be a positive multiple of m={m}")

    fine = _refine_mask(geom.mask, n // m)
    n_cells = w1 * w2
    big = np.tile(fine, (w1, w2, 1))
    voxels = np.argwhere(big if not include_void else np.ones_like(big))
    order = np.lexsort((voxels[:, 2], voxels[:, 1], voxels[:, 0]))
    voxels = voxels[order]
    solid = big[voxels[:, 0], voxels[:, 1], voxels[:, 2]]

    N1, N2, N3 = w1 * n + 1, w2 * n + 1, 2 * n + 1
    node_ids = _grid_node_ids((N1, N2, N3))
    elems_grid = _hex_connectivity(voxels, node_ids)
    used, new_id = _compress_nodes(elems_grid, node_ids.size)
    elems = new_id[elems_grid]

    idx = np.argwhere(used.reshape((N1, N2, N3)))
    h = eps / n
    coords = np.empty((idx.shape[0], 3))
    coords[:, 0] = a1 + idx[:, 0] * h
    coords[:, 1] = a2 + idx[:, 1] * h
    coords[:, 2] = -eps + idx[:, 2] * h

    # cell index: which eps-cell and which local voxel each element is
    k1 = voxels[:, 0] // n
    k2 = voxels[:, 1] // n
    l1 = voxels[:, 0] % n
    l2 = voxels[:, 1] % n
    l3 = voxels[:, 2]
    cell_flat = k1 * w2 + k2
    local_flat = (l1 * n + l2) * (2 * n) + l3
    cell_index = np.stack([cell_flat, local_flat], axis=1)

    # boundary classification on the fine global voxel grid
    elem_of_voxel = -np.ones(big.shape, dtype=np.int64)
    elem_of_voxel[voxels[:, 0], voxels[:, 1], voxels[:, 2]] = np.arange(len(voxels))

    dirichlet_faces = []
    gamma_faces = []
    lateral_faces = []
    G1, G2, G3 = big.shape
    for e in range(len(voxels)):
        i, j, k = voxels[e]
        for axis, side in HEX_FACES:
            step = [0, 0, 0]
            step[axis] = side
            a, b, c = i + step[0], j + step[1], k + step[2]
            inside = (0 <= a < G1) and (0 <= b < G2) and (0 <= c < G3)
            if axis < 2 and not inside:
                lateral_faces.append((e, axis, side))
                if solid[e]:
                    dirichlet_faces.append((e, axis, side))
            elif solid[e]:
                if not inside:
                    gamma_faces.append((e, axis, side))  # x3 = +/- eps
                elif not big[a, b, c]:
                    gamma_faces.append((e, axis, side))

    dirichlet_faces = np.array(dirichlet_faces, dtype=np.int64).reshape(-1, 3)
    gamma_arr = np.array(gamma_faces, dtype=np.int64).reshape(-1, 3)
    lateral_arr = np.array(lateral_faces, dtype=np.int64).reshape(-1, 3)

    dn = set()
    for e, axis, side in dirichlet_faces:
        for ln in HEX_FACES[(axis, side)]:
            dn.add(int(elems[e, ln]))
    dirichlet_nodes = np.array(sorted(dn), dtype=np.int64)

    return LayerMesh(
        geometry=geom,
        eps=eps,
        sigma=tuple((float(a1), float(b1))) + tuple((float(a2), float(b2))),
        resolution=n,
        coords=coords,
        elems=elems,
        spacing=(h, h, h),
        solid=solid,
        cell_index=cell_index,
        dirichlet_nodes=dirichlet_nodes,
        gamma_faces=gamma_arr,
        lateral_faces=lateral_arr,
        n_cells=n_cells,
    )


def build_plate_mesh(sigma, n_sigma: int) -> PlateMesh:
    """Structured quadrilateral mesh of Sigma with n_sigma elements per unit."""
    (a1, b1), (a2, b2) = sigma
    n1 = int(round((b1 - a1) * n_sigma))
    n2 = int(round((b2 - a2) * n_sigma))
    if n1 < 1 or n2 < 1:
        raise ValueError("degenerate plate mesh")
    h1 = (b1 - a1) / n1
    h2 = (b2 - a2) / n2
    node_ids = np.arange((n1 + 1) * (n2 + 1), dtype=np.int64).reshape(n1 + 1, n2 + 1)
    xs = a1 + np.arange(n1 + 1) * h1
    ys = a2 + np.arange(n2 + 1) * h2
    coords = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    quads = []
    for i in range(n1):
        for j in range(n2):
            quads.append((node_ids[i, j], node_ids[i + 1, j],
                          node_ids[i + 1, j + 1], node_ids[i, j + 1]))
    elems = np.array(quads, dtype=np.int64)
    boundary = np.zeros((n1 + 1, n2 + 1), dtype=bool)
    boundary[0, :] = boundary[-1, :] = True
    boundary[:, 0] = boundary[:, -1] = True
    clamped = node_ids[boundary]
    if clamped.size == coords.shape[0]:
        warnings.warn("all plate nodes are clamped; bending space is empty")
    return PlateMesh(
        sigma=(float(a1), float(b1), float(a2), float(b2)),
        resolution=n_sigma,
        coords=coords,
        elems=elems,
        spacing=(h1, h2),
        shape=(n1, n2),
        clamped_nodes=np.sort(clamped),
    )


def face_nodes(elems: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Global node quadruples for an (element, axis, side) face list."""
    out = np.empty((faces.shape[0], 4), dtype=np.int64)
    for r, (e, axis, side) in enumerate(faces):
        out[r] = elems[e, list(HEX_FACES[(int(axis), int(side))])]
    return out


def dump_mesh(path, coords: np.ndarray, elems: np.ndarray) -> None:
    """ASCII structured-grid dump (PERFOLAYER-MESH v1)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("PERFOLAYER-MESH v1\n")
        f.write(f"{coords.shape[0]}\n")
        f.write(f"{elems.shape[0]}\n")
        for row in coords:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")
        for row in elems:
            f.write(" ".join(str(int(v)) for v in row) + "\n")


def dump_field(path, values: np.ndarray) -> None:
    """ASCII nodal-field dump (PERFOLAYER-FIELD v1), one node per line."""
    values = np.atleast_2d(values.T).T
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("PERFOLAYER-FIELD v1\n")
        f.write(f"{values.shape[0]}\n")
        f.write(f"{values.shape[1] if values.ndim > 1 else 1}\n")
        for row in np.atleast_2d(values):
            f.write(" ".join(repr(float(v)) for v in np.atleast_1d(row)) + "\n")
