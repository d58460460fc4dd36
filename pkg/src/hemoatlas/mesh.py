"""Labeled tetrahedral meshes for the artery domain and the surrounding tissue.

A :class:`TetMesh` carries node coordinates (meters), tetrahedra and one
compartment label per tetrahedron.  Tetrahedra labeled ``"Blood vessels"``
form the arterial domain (``omega``); every other compartment belongs to the
microcirculation domain (``tissue``).  The two share the interface nodes.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

logger = logging.getLogger(__name__)

VESSEL = "Blood vessels"

# Tetrahedra with |volume| below this are rejected (m^3).
DEGENERATE_VOLUME = 1e-18

# Local vertex triples of the four faces; face k is opposite vertex k.
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


class MeshError(ValueError):
    """Raised for malformed, inconsistent or degenerate meshes."""


@dataclass(frozen=True)
class Compartment:
    name: str
    sigma: float  # background conductivity, S/m
    xi: float  # microvessel length density, m^-2


# Conductivities of the compartment table; microvessel densities are taken
# from the matching grey/white matter, cerebellar and brainstem values.
_DEFAULT_COMPARTMENTS = [
    (VESSEL, 0.70, 0.0),
    ("Grey matter", 0.33, 2.4e8),
    ("White matter", 0.14, 1.4e8),
    ("Cerebellum cortex", 0.33, 3.0e8),
    ("Cerebellum white matter", 0.14, 1.0e8),
    ("Brainstem", 0.33, 2.9e8),
    ("Cingulate cortex", 0.14, 2.4e8),
    ("Ventral Diencephalon", 0.33, 1.5e8),
    ("Amygdala", 0.33, 1.5e8),
    ("Thalamus", 0.33, 1.5e8),
    ("Caudate", 0.33, 1.5e8),
    ("Accumbens", 0.33, 1.5e8),
    ("Putamen", 0.33, 1.5e8),
    ("Hippocampus", 0.33, 1.5e8),
    ("Pallidum", 0.33, 1.5e8),
    ("Ventricles", 0.33, 0.0),
    ("Cerebrospinal fluid (CSF)", 1.79, 0.0),
]


@dataclass(frozen=True)
class CompartmentTable:
    """Per-compartment background conductivity and microvessel density."""

    compartments: dict[str, Compartment]

    def __post_init__(self):
        for c in self.compartments.values():
            if not c.sigma > 0:
                raise ValueError(f"compartment {c.name!r}: conductivity must be > 0")
            if c.xi < 0:
                raise ValueError(f"compartment {c.name!r}: microvessel density must be >= 0")

    @classmethod
    def default(cls) -> "CompartmentTable":
        return cls({n: Compartment(n, s, x) for n, s, x in _DEFAULT_COMPARTMENTS})

    @classmethod
    def from_file(cls, path, base: "CompartmentTable | None" = None) -> "CompartmentTable":
        """Read an INI file with one ``[name]`` section holding ``sigma`` and ``xi``.

        Sections override (or extend) the entries of ``base``, which defaults to
        the built-in table.
        """
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(path):
            raise FileNotFoundError(path)
        comps = dict((base or cls.default()).compartments)
        for name in parser.sections():
            sec = parser[name]
            old = comps.get(name)
            try:
                sigma = float(sec.get("sigma", old.sigma if old else "nan"))
                xi = float(sec.get("xi", old.xi if old else "0"))
            except ValueError as exc:
                raise ValueError(f"compartment {name!r}: {exc}") from None
            comps[name] = Compartment(name, sigma, xi)
        return cls(comps)

    def __contains__(self, name) -> bool:
        return name in self.compartments

    def __getitem__(self, name) -> Compartment:
        return self.compartments[name]

    def names(self) -> list[str]:
        return list(self.compartments)


def tet_volumes(points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volumes of tetrahedra (positive for right-handed vertex order)."""
    p = points[tets]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    d3 = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", d1, np.cross(d2, d3)) / 6.0


def triangle_areas(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p = points[tris]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


@dataclass(frozen=True)
class Subdomain:
    """A node-renumbered view of part of a mesh.

    ``nodes`` holds the global ids of the subdomain nodes; ``tets`` is the
    connectivity expressed in local (subdomain) node numbering.
    """

    nodes: np.ndarray
    tets: np.ndarray
    points: np.ndarray
    global_to_local: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def volumes(self) -> np.ndarray:
        return tet_volumes(self.points, self.tets)

    @cached_property
    def mean_edge_length(self) -> float:
        edges = self.tets[:, [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]].reshape(-1, 2)
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        return float(np.linalg.norm(self.points[edges[:, 0]] - self.points[edges[:, 1]], axis=1).mean())

    def localize(self, global_ids: np.ndarray) -> np.ndarray:
        loc = self.global_to_local[np.asarray(global_ids)]
        if np.any(loc < 0):
            raise MeshError("node does not belong to the subdomain")
        return loc


@dataclass(frozen=True)
class TetMesh:
    """Validated, consistently oriented labeled tetrahedral mesh.

    Build instances with :meth:`from_arrays` (or the loaders); the plain
    constructor performs no checks.
    """

    nodes: np.ndarray
    tets: np.ndarray
    labels: np.ndarray  # index into label_names, one per tet
    label_names: tuple[str, ...]
    table: CompartmentTable = field(default_factory=CompartmentTable.default, repr=False)

    @classmethod
    def from_arrays(cls, nodes, tets, labels, label_names=None, table=None) -> "TetMesh":
        """Validate arrays and return a mesh with positively oriented tets.

        ``labels`` is either a sequence of compartment names or integer ids
        into ``label_names``.
        """
        table = table or CompartmentTable.default()
        nodes = np.array(nodes, dtype=float).reshape(-1, 3)
        tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
        if len(tets) == 0:
            raise MeshError("mesh has no tetrahedra")
        if not np.all(np.isfinite(nodes)):
            raise MeshError("non-finite node coordinates")
        if tets.min() < 0 or tets.max() >= len(nodes):
            bad = int(np.flatnonzero((tets < 0).any(1) | (tets >= len(nodes)).any(1))[0])
            raise MeshError(f"tet {bad} references a node index outside 0..{len(nodes) - 1} (orphan reference)")

        labels = np.asarray(labels)
        if label_names is None:
            label_names, labels = np.unique(labels.astype(str), return_inverse=True)
            label_names = tuple(str(n) for n in label_names)
        else:
            label_names = tuple(label_names)
            labels = labels.astype(np.int64)
        if labels.shape != (len(tets),):
            raise MeshError("need exactly one label per tetrahedron")
        if labels.min() < 0 or labels.max() >= len(label_names):
            raise MeshError("label id without a name")
        for name in {label_names[i] for i in np.unique(labels)}:
            if name not in table:
                raise MeshError(f"unknown compartment label {name!r}")

        vol = tet_volumes(nodes, tets)
        degenerate = np.abs(vol) < DEGENERATE_VOLUME
        if degenerate.any():
            bad = int(np.flatnonzero(degenerate)[0])
            raise MeshError(f"tet {bad} is degenerate (|volume| = {abs(vol[bad]):.3e} m^3)")
        flip = vol < 0
        if flip.any():
            tets = tets.copy()
            tets[flip] = tets[flip][:, [0, 1, 3, 2]]
        return cls(nodes, tets, labels, label_names, table)

    # -- compartments ------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @cached_property
    def tet_names(self) -> np.ndarray:
        return np.array(self.label_names, dtype=object)[self.labels]

    @cached_property
    def vessel_mask(self) -> np.ndarray:
        names = np.array([n == VESSEL for n in self.label_names])
        return names[self.labels]

    @cached_property
    def volumes(self) -> np.ndarray:
        return tet_volumes(self.nodes, self.tets)

    @cached_property
    def tet_sigma(self) -> np.ndarray:
        vals = np.array([self.table[n].sigma for n in self.label_names])
        return vals[self.labels]

    @cached_property
    def tet_xi(self) -> np.ndarray:
        vals = np.array([self.table[n].xi for n in self.label_names])
        return vals[self.labels]

    def _subdomain(self, mask) -> Subdomain:
        tets = self.tets[mask]
        if len(tets) == 0:
            raise MeshError("empty subdomain")
        nodes = np.unique(tets)
        g2l = np.full(self.n_nodes, -1, dtype=np.int64)
        g2l[nodes] = np.arange(len(nodes))
        return Subdomain(nodes, g2l[tets], self.nodes[nodes], g2l)

    @cached_property
    def omega(self) -> Subdomain:
        """Arterial domain: union of the blood-vessel tets."""
        return self._subdomain(self.vessel_mask)

    @cached_property
    def tissue(self) -> Subdomain:
        """Microcirculation domain: union of all other compartments."""
        return self._subdomain(~self.vessel_mask)

    def nodal_average(self, tet_values, mask=None) -> np.ndarray:
        """Volume-weighted average of per-tet values onto the nodes.

        Only tets in ``mask`` contribute.  Nodes without contributing tets get 0.
        """
        tet_values = np.asarray(tet_values, dtype=float)
        mask = np.ones(self.n_tets, bool) if mask is None else np.asarray(mask)
        tets = self.tets[mask]
        w = np.repeat(self.volumes[mask], 4)
        num = np.bincount(tets.ravel(), weights=w * np.repeat(tet_values[mask], 4), minlength=self.n_nodes)
        den = np.bincount(tets.ravel(), weights=w, minlength=self.n_nodes)
        out = np.zeros(self.n_nodes)
        ok = den > 0
        out[ok] = num[ok] / den[ok]
        return out

    def nodal_compartment_value(self, tet_values) -> np.ndarray:
        """Nodal average preferring tissue tets; pure vessel nodes use vessel tets."""
        tissue = self.nodal_average(tet_values, ~self.vessel_mask)
        has_tissue = np.bincount(self.tets[~self.vessel_mask].ravel(), minlength=self.n_nodes) > 0
        vessel = self.nodal_average(tet_values, self.vessel_mask)
        return np.where(has_tissue, tissue, vessel)

    def nearest_node(self, point) -> int:
        return int(np.argmin(np.linalg.norm(self.nodes - np.asarray(point, float), axis=1)))

    def vessel_components(self) -> int:
        """Number of face-connected components of the vessel compartment."""
        idx = np.flatnonzero(self.vessel_mask)
        faces = np.sort(self.tets[idx][:, TET_FACES].reshape(-1, 3), axis=1)
        owner = np.repeat(np.arange(len(idx)), 4)
        _, inv = np.unique(faces, axis=0, return_inverse=True)
        inv = inv.ravel()
        order = np.argsort(inv, kind="stable")
        s = inv[order]
        pair = np.flatnonzero(s[1:] == s[:-1])
        a, b = owner[order[pair]], owner[order[pair + 1]]
        g = sparse.coo_matrix((np.ones(len(a)), (a, b)), shape=(len(idx), len(idx)))
        n, _ = csgraph.connected_components(g, directed=False)
        return int(n)


@dataclass(frozen=True)
class BoundarySurface:
    """Artery wall: triangles on the boundary of the vessel compartment.

    ``triangles`` use global node ids and are oriented so that ``normals``
    point out of the vessel domain.
    """

    triangles: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    points: np.ndarray = field(repr=False)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.unique(self.triangles)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.points[self.triangles].mean(axis=1)


def extract_boundary(mesh: TetMesh) -> BoundarySurface:
    """Collect every vessel-tet face that is not shared with another vessel tet."""
    vt = mesh.tets[mesh.vessel_mask]
    if len(vt) == 0:
        raise MeshError("mesh has no vessel compartment")
    faces = vt[:, TET_FACES].reshape(-1, 3)
    opposite = vt.ravel()  # face k of a tet is opposite its vertex k
    keys = np.sort(faces, axis=1)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if counts.max() > 2:
        raise MeshError("non-manifold artery surface: a face is shared by more than two vessel tets")
    single = counts[inv] == 1
    tris = faces[single].copy()
    opp = opposite[single]

    p = mesh.nodes
    n = np.cross(p[tris[:, 1]] - p[tris[:, 0]], p[tris[:, 2]] - p[tris[:, 0]])
    inward = np.einsum("ij,ij->i", n, p[opp] - p[tris[:, 0]]) > 0
    tris[inward] = tris[inward][:, [0, 2, 1]]
    n[inward] *= -1
    norm = np.linalg.norm(n, axis=1)
    surface = BoundarySurface(tris, n / norm[:, None], 0.5 * norm, p)

    # each wall face may border at most one tissue tet
    tt = mesh.tets[~mesh.vessel_mask]
    if len(tt):
        tkeys = np.sort(tt[:, TET_FACES].reshape(-1, 3), axis=1)
        allk = np.vstack([np.sort(tris, axis=1), tkeys])
        _, inv2, cnt2 = np.unique(allk, axis=0, return_inverse=True, return_counts=True)
        if np.any(cnt2[inv2.ravel()[: len(tris)]] > 2):
            raise MeshError("artery face shared by more than one tissue tet")
    return surface


def compute_lambda(mesh: TetMesh, surface: BoundarySurface, table: CompartmentTable | None = None) -> np.ndarray:
    """Nodal microvessel-density ratio xi / mean(xi over the artery wall).

    Nodal xi is the volume-weighted average of the adjacent tissue tets (vessel
    tets only count for nodes that have no tissue neighbour).  The wall mean is
    the area-weighted integral of the piecewise-linear nodal xi.
    """
    if table is not None and table is not mesh.table:
        vals = np.array([table[n].xi for n in mesh.label_names])
        tet_xi = vals[mesh.labels]
    else:
        tet_xi = mesh.tet_xi
    touched = np.bincount(mesh.tets.ravel(), minlength=mesh.n_nodes) > 0
    if not touched.all():
        raise MeshError("mesh has nodes without an adjacent tetrahedron")
    xi = mesh.nodal_compartment_value(tet_xi)
    wall = (surface.areas * xi[surface.triangles].mean(axis=1)).sum() / surface.total_area
    if not wall > 0:
        raise ValueError("mean microvessel density on the artery wall is zero")
    return xi / wall


# -- file format -----------------------------------------------------------
#
#   nodes <N>            then N lines: index x y z        (meters)
#   tets <M>             then M lines: index n0 n1 n2 n3 label-id
#   labels <K>           then K lines: label-id name      (name may contain spaces)
#
# Lines starting with '#' and blank lines are ignored.  Indices are 0-based
# and must appear in order 0..N-1 / 0..M-1.


def load_mesh(path, table: CompartmentTable | None = None) -> TetMesh:
    table = table or CompartmentTable.default()
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    sections: dict[str, list[str]] = {}
    i = 0
    try:
        while i < len(lines):
            head = lines[i].split()
            if len(head) != 2 or head[0] not in ("nodes", "tets", "labels"):
                raise MeshError(f"expected section header, got {lines[i]!r}")
            count = int(head[1])
            sections[head[0]] = lines[i + 1 : i + 1 + count]
            if len(sections[head[0]]) != count:
                raise MeshError(f"section {head[0]!r} truncated")
            i += 1 + count
        if set(sections) != {"nodes", "tets", "labels"}:
            raise MeshError("mesh file needs 'nodes', 'tets' and 'labels' sections")

        node_rows = np.array([ln.split() for ln in sections["nodes"]], dtype=float).reshape(-1, 4)
        tet_rows = np.array([ln.split() for ln in sections["tets"]], dtype=np.int64).reshape(-1, 6)
        names = {}
        for ln in sections["labels"]:
            lid, name = ln.split(maxsplit=1)
            names[int(lid)] = name.strip()
    except (ValueError, IndexError) as exc:
        raise MeshError(f"cannot parse mesh file {path}: {exc}") from None

    if not np.array_equal(node_rows[:, 0], np.arange(len(node_rows))):
        raise MeshError("node indices must run 0..N-1 in order")
    if not np.array_equal(tet_rows[:, 0], np.arange(len(tet_rows))):
        raise MeshError("tet indices must run 0..M-1 in order")
    missing = set(np.unique(tet_rows[:, 5]).tolist()) - set(names)
    if missing:
        raise MeshError(f"label ids without a name: {sorted(missing)}")
    ids = sorted(names)
    remap = {lid: k for k, lid in enumerate(ids)}
    labels = np.array([remap[v] for v in tet_rows[:, 5]], dtype=np.int64)
    return TetMesh.from_arrays(node_rows[:, 1:], tet_rows[:, 1:5], labels, [names[k] for k in ids], table)


def save_mesh(mesh: TetMesh, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("# hemoatlas tetrahedral mesh, units: meters\n")
        fh.write(f"nodes {mesh.n_nodes}\n")
        for i, (x, y, z) in enumerate(mesh.nodes):
            fh.write(f"{i} {x:.17g} {y:.17g} {z:.17g}\n")
        fh.write(f"tets {mesh.n_tets}\n")
        for i, (t, lab) in enumerate(zip(mesh.tets, mesh.labels)):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]} {lab}\n")
        fh.write(f"labels {len(mesh.label_names)}\n")
        for i, name in enumerate(mesh.label_names):
            fh.write(f"{i} {name}\n")


# -- refinement ------------------------------------------------------------


def refine_uniform(mesh: TetMesh) -> TetMesh:
    """Red refinement: every tet is split into eight using edge midpoints.

    The inner octahedron is cut along its shortest diagonal.  Refined meshes
    are nested, so the boundary stays on the coarse facets.
    """
    t = mesh.tets
    pairs = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
    edges = np.sort(t[:, pairs].reshape(-1, 2), axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    mid = mesh.n_nodes + inv.reshape(-1, 6)
    nodes = np.vstack([mesh.nodes, 0.5 * (mesh.nodes[uniq[:, 0]] + mesh.nodes[uniq[:, 1]])])

    v0, v1, v2, v3 = t.T
    m01, m02, m03, m12, m13, m23 = mid.T
    corners = [
        np.stack([v0, m01, m02, m03], 1),
        np.stack([m01, v1, m12, m13], 1),
        np.stack([m02, m12, v2, m23], 1),
        np.stack([m03, m13, m23, v3], 1),
    ]
    # diagonal (a, b) with the equatorial cycle around it
    choices = [
        ((m02, m13), (m01, m03, m23, m12)),
        ((m01, m23), (m02, m12, m13, m03)),
        ((m03, m12), (m01, m13, m23, m02)),
    ]
    lengths = np.stack([np.linalg.norm(nodes[a] - nodes[b], axis=1) for (a, b), _ in choices], 1)
    best = np.argmin(lengths, axis=1)
    inner = []
    for k in range(4):
        cols = []
        for (a, b), cyc in choices:
            cols.append(np.stack([a, b, cyc[k], cyc[(k + 1) % 4]], 1))
        sel = np.choose(best[:, None], [c for c in cols])
        inner.append(sel)
    children = np.stack(corners + inner, axis=1).reshape(-1, 4)
    labels = np.repeat(mesh.labels, 8)
    return TetMesh.from_arrays(nodes, children, labels, mesh.label_names, mesh.table)


def vessel_submesh(mesh: TetMesh) -> TetMesh:
    """The vessel compartment alone, renumbered."""
    sub = mesh.omega
    return TetMesh.from_arrays(sub.points, sub.tets, np.zeros(len(sub.tets), np.int64), [VESSEL], mesh.table)


# -- synthetic vessel geometry ----------------------------------------------


@dataclass(frozen=True)
class VesselSpec:
    """Straight or Y-bifurcating tube embedded in a centred tissue box.

    Every segment is a capsule (tube with hemispherical ends).  Lengths are in
    meters and ``length`` counts the axis only.  The straight tube runs along
    z and is centred in the box.  The Y variant has a trunk of ``length / 2`` ending at the origin
    and two branches of ``length / 2`` leaving it at +-``angle_deg / 2`` from
    the z axis in the x-z plane.
    """

    radius: float = 2e-3
    length: float = 40e-3
    box: tuple[float, float, float] = (40e-3, 40e-3, 60e-3)
    h: float = 1e-3
    kind: str = "straight"
    angle_deg: float = 60.0
    tissue_label: str = "Grey matter"

    def segments(self) -> list[tuple[np.ndarray, np.ndarray]]:
        half = 0.5 * self.length
        if self.kind == "straight":
            return [(np.array([0.0, 0.0, -half]), np.array([0.0, 0.0, half]))]
        if self.kind != "y":
            raise ValueError(f"unknown vessel kind {self.kind!r} (expected 'straight' or 'y')")
        a = np.deg2rad(self.angle_deg) / 2
        r = self.radius
        segs = [(np.array([0.0, 0.0, -half]), np.array([0.0, 0.0, r]))]
        for sgn in (1.0, -1.0):
            e = np.array([sgn * np.sin(a), 0.0, np.cos(a)])
            segs.append((-r * e, half * e))
        return segs

    def validate(self) -> None:
        if not self.radius > 0 or not self.length > 0 or not self.h > 0:
            raise ValueError("infeasible geometry: radius, length and h must be positive")
        box = np.asarray(self.box, float)
        if np.any(box <= 0):
            raise ValueError("infeasible geometry: box dimensions must be positive")
        if self.radius >= 0.5 * box.min():
            raise ValueError("infeasible geometry: tube radius >= box half-width")
        if 2 * self.radius / self.h < 4:
            raise ValueError("h too coarse: fewer than 4 elements across the tube diameter")
        if self.kind == "y" and not 0 < self.angle_deg < 180:
            raise ValueError("infeasible geometry: bifurcation angle must lie in (0, 180) degrees")
        margin = 0.5 * box - self.h
        for p, q in self.segments():
            for end in (p, q):
                # hemispherical end around the end point
                if np.any(np.abs(end) + self.radius > margin):
                    raise ValueError("infeasible geometry: tube does not fit inside the tissue box")


def _capsule_level_set(segments, radius):
    def phi(x):
        x = np.atleast_2d(x)
        out = np.full(len(x), np.inf)
        for p, q in segments:
            d = q - p
            ln = np.linalg.norm(d)
            e = d / ln
            rel = x - p
            s = np.clip(rel @ e, 0.0, ln)
            out = np.minimum(out, np.linalg.norm(rel - s[:, None] * e, axis=1) - radius)
        return out

    return phi


def _kuhn_grid(box, h):
    n = np.maximum(np.round(np.asarray(box) / h).astype(int), 1)
    axes = [np.linspace(-b / 2, b / 2, k + 1) for b, k in zip(box, n)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    shape = n + 1
    idx = lambda i, j, k: (i * shape[1] + j) * shape[2] + k  # noqa: E731
    I, J, K = np.meshgrid(*[np.arange(k) for k in n], indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    tets = []
    for perm in ([0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]):
        cur = np.zeros((len(I), 3), dtype=np.int64)
        verts = [idx(I, J, K)]
        for ax in perm:
            cur[:, ax] += 1
            verts.append(idx(I + cur[:, 0], J + cur[:, 1], K + cur[:, 2]))
        tets.append(np.stack(verts, axis=1))
    return nodes, np.concatenate(tets)


def _snap_nodes(nodes, phi, h):
    """Move nodes closer than 0.2 h to the surface onto it (few Newton steps)."""
    val = phi(nodes)
    near = np.flatnonzero(np.abs(val) < 0.2 * h)
    if len(near) == 0:
        return nodes, val
    x = nodes[near].copy()
    step = 1e-4 * h
    for _ in range(4):
        f = phi(x)
        g = np.stack([(phi(x + step * e) - phi(x - step * e)) / (2 * step) for e in np.eye(3)], axis=1)
        gg = np.einsum("ij,ij->i", g, g)
        ok = gg > 1e-12
        x[ok] -= (f[ok] / gg[ok])[:, None] * g[ok]
    f = phi(x)
    accept = (np.abs(f) < 1e-9 * h) & (np.linalg.norm(x - nodes[near], axis=1) <= 0.3 * h)
    nodes = nodes.copy()
    nodes[near[accept]] = x[accept]
    val = val.copy()
    val[near[accept]] = 0.0
    return nodes, val


def _edge_roots(pa, pb, fa, fb, phi, iters=60):
    """Bisection for the zero of phi on segments pa-pb (signs of fa, fb differ)."""
    lo = np.zeros(len(pa))
    hi = np.ones(len(pa))
    neg_at_lo = fa < 0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = phi(pa + mid[:, None] * (pb - pa))
        go_right = (fm < 0) == neg_at_lo
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
    t = 0.5 * (lo + hi)
    return pa + t[:, None] * (pb - pa)


def _clip_polygon(poly, side, vals, cut_id):
    """Keep the part of an ordered polygon with side * phi >= 0."""
    out = []
    n = len(poly)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        fa, fb = vals[a], vals[b]
        if side * fa >= 0:
            out.append(a)
        if fa * fb < 0:
            out.append(cut_id(a, b))
    dedup = []
    for v in out:
        if not dedup or dedup[-1] != v:
            dedup.append(v)
    if len(dedup) > 1 and dedup[0] == dedup[-1]:
        dedup.pop()
    return dedup


def _fan(poly):
    k = int(np.argmin(poly))
    poly = poly[k:] + poly[:k]
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def generate_synthetic_vessel(spec: VesselSpec | None = None, table: CompartmentTable | None = None) -> TetMesh:
    """Conforming tube-in-box mesh from a cut-cell split of a Kuhn grid.

    Tets of a uniform grid are cut along the piecewise-linear zero set of the
    capsule level set.  Each cut piece is a convex polytope, tetrahedralized by
    coning from its lowest-numbered vertex over faces fanned from their own
    lowest-numbered vertex, which makes neighbouring pieces agree on shared faces.
    """
    spec = spec or VesselSpec()
    spec.validate()
    table = table or CompartmentTable.default()
    if spec.tissue_label not in table:
        raise MeshError(f"unknown compartment label {spec.tissue_label!r}")
    h = spec.h
    phi = _capsule_level_set(spec.segments(), spec.radius)
    nodes, tets = _kuhn_grid(spec.box, h)
    nodes, val = _snap_nodes(nodes, phi, h)
    val = np.where(np.abs(val) < 1e-12 * h, 0.0, val)

    tv = val[tets]
    cut = (tv < 0).any(1) & (tv > 0).any(1)
    whole = tets[~cut]
    wv = tv[~cut]
    inside = np.where((wv != 0).any(1), (wv <= 0).all(1), phi(nodes[whole].mean(1)) <= 0)
    out_tets = [whole]
    out_vessel = [inside]

    # cut points, one per crossing edge
    ct = tets[cut]
    pairs = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
    e = np.sort(ct[:, pairs].reshape(-1, 2), axis=1)
    e = np.unique(e, axis=0)
    e = e[val[e[:, 0]] * val[e[:, 1]] < 0]
    pts = _edge_roots(nodes[e[:, 0]], nodes[e[:, 1]], val[e[:, 0]], val[e[:, 1]], phi)
    base = len(nodes)
    edge_id = {(int(a), int(b)): base + k for k, (a, b) in enumerate(e)}
    nodes = np.vstack([nodes, pts])
    vals = np.concatenate([val, np.zeros(len(pts))])

    def cut_id(a, b):
        return edge_id[(a, b) if a < b else (b, a)]

    new_tets, new_vessel = [], []
    vol_floor = 1e-10 * h**3
    for t in ct.tolist():
        for side in (-1.0, 1.0):
            faces = []
            for f in TET_FACES:
                poly = _clip_polygon([t[i] for i in f], side, vals, cut_id)
                if len(poly) >= 3:
                    faces.append(poly)
            iface = [v for v in t if vals[v] == 0]
            iface += sorted({cut_id(t[a], t[b]) for a, b in pairs if vals[t[a]] * vals[t[b]] < 0})
            if len(iface) >= 3:
                P = nodes[iface]
                c = P.mean(0)
                nrm = np.cross(P[1] - P[0], P[2] - P[0])
                if np.linalg.norm(nrm) == 0 and len(iface) > 3:
                    nrm = np.cross(P[1] - P[0], P[3] - P[0])
                u = P[0] - c
                u /= np.linalg.norm(u)
                w = np.cross(nrm, u)
                ang = np.arctan2((P - c) @ w, (P - c) @ u)
                faces.append([iface[k] for k in np.argsort(ang)])
            verts = {v for f in faces for v in f}
            v0 = min(verts)
            for f in faces:
                if v0 in f:
                    continue
                for tri in _fan(f):
                    cand = [v0, *tri]
                    vol = tet_volumes(nodes, np.array([cand]))[0]
                    if abs(vol) > vol_floor:
                        new_tets.append(cand)
                        new_vessel.append(side < 0)
    if new_tets:
        out_tets.append(np.array(new_tets, dtype=np.int64))
        out_vessel.append(np.array(new_vessel))
    all_tets = np.concatenate(out_tets)
    vessel = np.concatenate(out_vessel)
    if not vessel.any():
        raise ValueError("infeasible geometry: tube is not resolved by the grid")
    names = (VESSEL, spec.tissue_label)
    labels = np.where(vessel, 0, 1)
    used = np.unique(all_tets)
    g2l = np.full(len(nodes), -1, dtype=np.int64)
    g2l[used] = np.arange(len(used))
    mesh = TetMesh.from_arrays(nodes[used], g2l[all_tets], labels, names, table)
    logger.info("synthetic mesh: %d nodes, %d tets (%d vessel)", mesh.n_nodes, mesh.n_tets, int(vessel.sum()))
    return mesh
