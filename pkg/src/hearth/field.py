"""Scattered-sensor temperature fields on particle grids.

The interpolator meshes sensor positions (projected to a horizontal slice)
with a Delaunay triangulation built by Bowyer-Watson incremental insertion.
Particles inside the convex hull take the barycentric combination of their
containing triangle's sensor values — continuous across triangle edges and
exact for affine fields; particles outside fall back to the 3D-nearest
sensor.  Voronoi mode skips the mesh entirely and assigns every particle
its 3D-nearest sensor's value, which is piecewise constant and jumps at
cell boundaries.

Geometric predicates run in floating point behind a forward error bound
and fall back to exact rational arithmetic; exactly cocircular cases are
broken by symbolic perturbation in lexicographic point order, so the
empty-circumcircle property survives a brute-force audit.

Fields export to CSV or to the little-endian 'rfld' binary layout
(documented at write_rfld) and mean-pool into multi-resolution pyramids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

GHOST = -1

_EPS = 2.0 ** -53
_CCW_BOUND = (3.0 + 16.0 * _EPS) * _EPS
_ICC_BOUND = (10.0 + 96.0 * _EPS) * _EPS

DUPLICATE_TOLERANCE = 1e-9  # meters
_INSIDE_TOLERANCE = 1e-12  # barycentric slack for points on edges


class FieldError(Exception):
    pass


class DegenerateInputError(FieldError):
    """Fewer than 3 points, or all points collinear."""


class DuplicatePointError(FieldError):
    def __init__(self, id_a: str, id_b: str):
        self.pair = (id_a, id_b)
        super().__init__(f"points {id_a!r} and {id_b!r} coincide within {DUPLICATE_TOLERANCE} m")


# ---------------------------------------------------------------------------
# Predicates
# ---------------------------------------------------------------------------


def orient2d(pa, pb, pc) -> int:
    """Sign of the signed area of (pa, pb, pc): +1 counter-clockwise, -1
    clockwise, 0 exactly collinear.  Float fast path with exact fallback."""
    detleft = (pa[0] - pc[0]) * (pb[1] - pc[1])
    detright = (pa[1] - pc[1]) * (pb[0] - pc[0])
    det = detleft - detright
    errbound = _CCW_BOUND * (abs(detleft) + abs(detright))
    if det > errbound:
        return 1
    if -det > errbound:
        return -1
    F = Fraction
    exact = (F(pa[0]) - F(pc[0])) * (F(pb[1]) - F(pc[1])) - (F(pa[1]) - F(pc[1])) * (
        F(pb[0]) - F(pc[0])
    )
    return (exact > 0) - (exact < 0)


def incircle_sign(pa, pb, pc, pd) -> int:
    """Sign of the in-circle determinant for CCW triangle (pa, pb, pc):
    +1 when pd is strictly inside the circumcircle, 0 when cocircular."""
    adx, ady = pa[0] - pd[0], pa[1] - pd[1]
    bdx, bdy = pb[0] - pd[0], pb[1] - pd[1]
    cdx, cdy = pc[0] - pd[0], pc[1] - pd[1]

    bdxcdy, cdxbdy = bdx * cdy, cdx * bdy
    cdxady, adxcdy = cdx * ady, adx * cdy
    adxbdy, bdxady = adx * bdy, bdx * ady
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy

    det = alift * (bdxcdy - cdxbdy) + blift * (cdxady - adxcdy) + clift * (adxbdy - bdxady)
    permanent = (
        (abs(bdxcdy) + abs(cdxbdy)) * alift
        + (abs(cdxady) + abs(adxcdy)) * blift
        + (abs(adxbdy) + abs(bdxady)) * clift
    )
    errbound = _ICC_BOUND * permanent
    if det > errbound:
        return 1
    if -det > errbound:
        return -1

    F = Fraction
    fadx, fady = F(pa[0]) - F(pd[0]), F(pa[1]) - F(pd[1])
    fbdx, fbdy = F(pb[0]) - F(pd[0]), F(pb[1]) - F(pd[1])
    fcdx, fcdy = F(pc[0]) - F(pd[0]), F(pc[1]) - F(pd[1])
    exact = (
        (fadx * fadx + fady * fady) * (fbdx * fcdy - fcdx * fbdy)
        + (fbdx * fbdx + fbdy * fbdy) * (fcdx * fady - fadx * fcdy)
        + (fcdx * fcdx + fcdy * fcdy) * (fadx * fbdy - fbdx * fady)
    )
    return (exact > 0) - (exact < 0)


def _in_circle_perturbed(pa, pb, pc, pd, ranks) -> bool:
    """Strict in-circle test with exact ties broken symbolically.

    An exactly zero determinant is resolved as if each point's paraboloid
    lift were raised by an infinitesimal that shrinks with its lexicographic
    rank:  D' = e_a*O(b,c,d) - e_b*O(a,c,d) + e_c*O(a,b,d) - e_d*O(a,b,c),
    evaluated in rank order.  The last coefficient is the triangle's own
    orientation, so the recursion always terminates.
    """
    s = incircle_sign(pa, pb, pc, pd)
    if s != 0:
        return s > 0
    terms = (
        (ranks[0], 1, pb, pc, pd),
        (ranks[1], -1, pa, pc, pd),
        (ranks[2], 1, pa, pb, pd),
        (ranks[3], -1, pa, pb, pc),
    )
    for _, coeff, qa, qb, qc in sorted(terms, key=lambda t: t[0]):
        o = orient2d(qa, qb, qc)
        if o != 0:
            return coeff * o > 0
    return False


# ---------------------------------------------------------------------------
# Triangulation (Bowyer-Watson with ghost triangles)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Triangulation:
    """Delaunay mesh over projected sensor positions.

    triangles are CCW index triples into points; hull is the CCW boundary
    cycle.  Every triangle's circumcircle is empty of other vertices (ties
    on the circle itself are allowed — they are exactly the cocircular
    cases).
    """

    ids: tuple[str, ...]
    points: np.ndarray  # (n, 2) float64
    triangles: np.ndarray  # (m, 3) int64, CCW
    hull: np.ndarray  # (h,) int64, CCW cycle


class _Mesh:
    """Mutable triangle soup with directed-edge adjacency; GHOST closes the hull."""

    def __init__(self):
        self.tris: dict[int, tuple[int, int, int]] = {}
        self.edge: dict[tuple[int, int], int] = {}
        self._next = 0

    @staticmethod
    def _edges(t):
        return ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))

    def add(self, t: tuple[int, int, int]) -> int:
        tid = self._next
        self._next += 1
        self.tris[tid] = t
        for e in self._edges(t):
            self.edge[e] = tid
        return tid

    def remove(self, tid: int) -> None:
        t = self.tris.pop(tid)
        for e in self._edges(t):
            del self.edge[e]


def _within_open_segment(pa, pb, p) -> bool:
    # assumes p collinear with (pa, pb); open-interval extent check
    if pa[0] != pb[0]:
        lo, hi = min(pa[0], pb[0]), max(pa[0], pb[0])
        return lo < p[0] < hi
    lo, hi = min(pa[1], pb[1]), max(pa[1], pb[1])
    return lo < p[1] < hi


def build_delaunay(points: Sequence[tuple[str, tuple[float, float]]]) -> Triangulation:
    """Delaunay-triangulate labelled 2D points by incremental insertion.

    Needs at least 3 pairwise-distinct, not-all-collinear points; duplicate
    positions (within 1e-9 m) raise DuplicatePointError naming the pair.
    """
    ids = tuple(str(pid) for pid, _ in points)
    P = [(float(p[0]), float(p[1])) for _, p in points]
    n = len(P)
    if n < 3:
        raise DegenerateInputError(f"need at least 3 points, got {n}")

    order = sorted(range(n), key=lambda i: P[i])
    for a, b in zip(order, order[1:]):
        dx, dy = P[a][0] - P[b][0], P[a][1] - P[b][1]
        if dx * dx + dy * dy <= DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE:
            raise DuplicatePointError(ids[a], ids[b])
    ranks = [0] * n
    for rank, idx in enumerate(order):
        ranks[idx] = rank

    i0, i1 = order[0], order[1]
    i2 = None
    for j in order[2:]:
        if orient2d(P[i0], P[i1], P[j]) != 0:
            i2 = j
            break
    if i2 is None:
        raise DegenerateInputError("all points are collinear")

    mesh = _Mesh()
    if orient2d(P[i0], P[i1], P[i2]) > 0:
        seed = (i0, i1, i2)
    else:
        seed = (i0, i2, i1)
    mesh.add(seed)
    # one ghost per hull edge: hull edge a->b (interior on the left) is
    # stored as the triple (b, a, GHOST)
    mesh.add((seed[1], seed[0], GHOST))
    mesh.add((seed[2], seed[1], GHOST))
    mesh.add((seed[0], seed[2], GHOST))

    def conflicts(tri: tuple[int, int, int], p_idx: int) -> bool:
        p = P[p_idx]
        if GHOST in tri:
            g = tri.index(GHOST)
            u, v = tri[(g + 1) % 3], tri[(g + 2) % 3]  # triple rotated to (u, v, GHOST)
            # hull edge runs v->u; outside lies strictly to its right
            o = orient2d(P[v], P[u], p)
            if o < 0:
                return True
            return o == 0 and _within_open_segment(P[v], P[u], p)
        ra, rb, rc = ranks[tri[0]], ranks[tri[1]], ranks[tri[2]]
        return _in_circle_perturbed(
            P[tri[0]], P[tri[1]], P[tri[2]], p, (ra, rb, rc, ranks[p_idx])
        )

    seeded = set(seed)
    for p_idx in order:
        if p_idx in seeded:
            continue
        bad = [tid for tid, tri in mesh.tris.items() if conflicts(tri, p_idx)]
        if not bad:
            raise FieldError("internal error: insertion point conflicts with no triangle")
        bad_set = set(bad)
        boundary = []
        for tid in bad:
            for u, v in mesh._edges(mesh.tris[tid]):
                if mesh.edge.get((v, u)) not in bad_set:
                    boundary.append((u, v))
        for tid in bad:
            mesh.remove(tid)
        for u, v in boundary:
            mesh.add((u, v, p_idx))

    finite = sorted(t for t in mesh.tris.values() if GHOST not in t)
    hull_next: dict[int, int] = {}
    for t in mesh.tris.values():
        if GHOST in t:
            g = t.index(GHOST)
            u, v = t[(g + 1) % 3], t[(g + 2) % 3]
            hull_next[v] = u  # hull edge v->u
    start = min(hull_next)
    cycle = [start]
    while True:
        nxt = hull_next[cycle[-1]]
        if nxt == start:
            break
        cycle.append(nxt)

    return Triangulation(
        ids=ids,
        points=np.asarray(P, dtype=np.float64),
        triangles=np.asarray(finite, dtype=np.int64),
        hull=np.asarray(cycle, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Point location and barycentric evaluation
# ---------------------------------------------------------------------------


def barycentric(tri: Triangulation, index: int, p) -> tuple[float, float, float]:
    """Barycentric coordinates of p in triangle `index` (no inside check)."""
    ia, ib, ic = tri.triangles[index]
    ax, ay = tri.points[ia]
    bx, by = tri.points[ib]
    cx, cy = tri.points[ic]
    det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
    wa = ((by - cy) * (p[0] - cx) + (cx - bx) * (p[1] - cy)) / det
    wb = ((cy - ay) * (p[0] - cx) + (ax - cx) * (p[1] - cy)) / det
    return (wa, wb, 1.0 - wa - wb)


def locate(tri: Triangulation, p) -> tuple[int, tuple[float, float, float]] | None:
    """Find the triangle containing p and its coordinates; None when outside.

    Points on shared edges are reported in the first incident triangle;
    either is acceptable since barycentric evaluation agrees on the edge.
    Tiny negative coordinates from roundoff are clamped and renormalised,
    preserving reconstruction of p to well within 1e-9.
    """
    for index in range(len(tri.triangles)):
        coords = barycentric(tri, index, p)
        if all(c >= -_INSIDE_TOLERANCE for c in coords):
            clamped = [max(c, 0.0) for c in coords]
            total = sum(clamped)
            return index, tuple(c / total for c in clamped)
    return None


# ---------------------------------------------------------------------------
# Particle grids and scalar fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParticleGrid:
    """Regular lattice of cell centers filling a box, x-fastest order.

    Defined by (box_min, spacing, resolution); box_max is derived, so a
    grid reconstructed from an exported header is bit-identical.
    """

    box_min: tuple[float, float, float]
    spacing: tuple[float, float, float]
    resolution: tuple[int, int, int]

    @classmethod
    def from_box(cls, box_min, box_max, resolution) -> "ParticleGrid":
        resolution = tuple(int(r) for r in resolution)
        if any(r < 1 for r in resolution):
            raise FieldError(f"resolution must be positive, got {resolution}")
        if any(box_max[i] <= box_min[i] for i in range(3)):
            raise FieldError("box min must be < box max on every axis")
        spacing = tuple((float(box_max[i]) - float(box_min[i])) / resolution[i] for i in range(3))
        return cls(tuple(float(v) for v in box_min), spacing, resolution)

    @property
    def box_max(self) -> tuple[float, float, float]:
        return tuple(self.box_min[i] + self.spacing[i] * self.resolution[i] for i in range(3))

    @property
    def particle_count(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    def positions(self) -> np.ndarray:
        """(N, 3) particle centers, x varying fastest."""
        nx, ny, nz = self.resolution
        idx = np.arange(self.particle_count)
        ijk = np.column_stack((idx % nx, (idx // nx) % ny, idx // (nx * ny)))
        out = np.asarray(self.box_min) + (ijk + 0.5) * np.asarray(self.spacing)
        return out


PROVENANCE_BARYCENTRIC = 0
PROVENANCE_NEAREST = 1
_PROVENANCE_NAMES = {0: "barycentric", 1: "nearest-fallback"}


@dataclass
class ScalarField:
    grid: ParticleGrid
    values: np.ndarray  # (N,) float64
    provenance: np.ndarray  # (N,) uint8
    mode: str  # 'delaunay' | 'voronoi'
    slice_height: float | None = None  # advisory; not part of the binary layout
    fallback_reason: str | None = None

    def __post_init__(self):
        n = self.grid.particle_count
        if len(self.values) != n or len(self.provenance) != n:
            raise FieldError("values/provenance length must equal the particle count")
        if self.mode not in ("delaunay", "voronoi"):
            raise FieldError(f"unknown mode {self.mode!r}")
        if self.mode == "voronoi" and not np.all(self.provenance == PROVENANCE_NEAREST):
            raise FieldError("voronoi fields are nearest-fallback everywhere by definition")

    def equals(self, other: "ScalarField") -> bool:
        return (
            self.mode == other.mode
            and self.grid == other.grid
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.provenance, other.provenance)
        )


@dataclass(frozen=True)
class SensorSample:
    sensor_id: str
    position: tuple[float, float, float]
    value: float


def interpolate(
    grid: ParticleGrid,
    sensors: Sequence[SensorSample],
    mode: str = "delaunay",
    slice_height: float | None = None,
) -> ScalarField:
    """Fill a particle grid from sensor samples.

    delaunay mode meshes the sensors projected onto the horizontal plane;
    a degenerate projection (fewer than 3 distinct positions, or collinear)
    falls back to voronoi mode and records why.  Input order is irrelevant:
    sensors are sorted by id first.
    """
    if not sensors:
        raise FieldError("no sensor values to interpolate")
    sensors = sorted(sensors, key=lambda s: s.sensor_id)
    if mode not in ("delaunay", "voronoi"):
        raise FieldError(f"unknown mode {mode!r}")
    if slice_height is None:
        slice_height = (grid.box_min[2] + grid.box_max[2]) / 2.0

    positions3 = np.asarray([s.position for s in sensors], dtype=np.float64)
    values = np.asarray([s.value for s in sensors], dtype=np.float64)
    particles = grid.positions()

    def nearest_assignment(targets: np.ndarray) -> np.ndarray:
        d2 = ((targets[:, None, :] - positions3[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)

    if mode == "delaunay":
        picked = _dedupe_projection(sensors, slice_height)
        tri = None
        if len(picked) >= 3:
            try:
                tri = build_delaunay([(sensors[i].sensor_id, sensors[i].position[:2]) for i in picked])
            except DegenerateInputError:
                tri = None
        if tri is None:
            fields = interpolate(grid, sensors, mode="voronoi", slice_height=slice_height)
            fields.fallback_reason = "degenerate-projection"
            return fields

        picked_values = values[np.asarray(picked)]
        out = np.empty(len(particles), dtype=np.float64)
        prov = np.full(len(particles), PROVENANCE_NEAREST, dtype=np.uint8)
        unassigned = np.ones(len(particles), dtype=bool)
        px, py = particles[:, 0], particles[:, 1]
        for t in range(len(tri.triangles)):
            if not unassigned.any():
                break
            ia, ib, ic = tri.triangles[t]
            ax, ay = tri.points[ia]
            bx, by = tri.points[ib]
            cx, cy = tri.points[ic]
            det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
            wa = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / det
            wb = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / det
            wc = 1.0 - wa - wb
            inside = (
                unassigned
                & (wa >= -_INSIDE_TOLERANCE)
                & (wb >= -_INSIDE_TOLERANCE)
                & (wc >= -_INSIDE_TOLERANCE)
            )
            if not inside.any():
                continue
            va, vb, vc = (
                picked_values[ia],
                picked_values[ib],
                picked_values[ic],
            )
            out[inside] = wa[inside] * va + wb[inside] * vb + wc[inside] * vc
            prov[inside] = PROVENANCE_BARYCENTRIC
            unassigned &= ~inside
        if unassigned.any():
            nearest = nearest_assignment(particles[unassigned])
            out[unassigned] = values[nearest]
        return ScalarField(grid, out, prov, "delaunay", slice_height)

    nearest = nearest_assignment(particles)
    out = values[nearest]
    prov = np.full(len(particles), PROVENANCE_NEAREST, dtype=np.uint8)
    return ScalarField(grid, out, prov, "voronoi", slice_height)


def _dedupe_projection(sensors: Sequence[SensorSample], slice_height: float) -> list[int]:
    """Indexes of sensors with distinct (x, y); of coincident columns keep the
    sensor nearest the slice height (ids are already sorted, so ties are
    deterministic)."""
    picked: list[int] = []
    for i, s in enumerate(sensors):
        replaced = False
        for j, k in enumerate(picked):
            other = sensors[k]
            dx = s.position[0] - other.position[0]
            dy = s.position[1] - other.position[1]
            if dx * dx + dy * dy <= DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE:
                if abs(s.position[2] - slice_height) < abs(other.position[2] - slice_height):
                    picked[j] = i
                replaced = True
                break
        if not replaced:
            picked.append(i)
    return picked


# ---------------------------------------------------------------------------
# Downsampling / LOD
# ---------------------------------------------------------------------------


def _pool(fld: ScalarField, factors: tuple[int, int, int]) -> ScalarField:
    nx, ny, nz = fld.grid.resolution
    fx, fy, fz = factors
    if nx % fx or ny % fy or nz % fz:
        raise FieldError(f"resolution {fld.grid.resolution} not divisible by {factors}")
    cx, cy, cz = nx // fx, ny // fy, nz // fz
    vol = fld.values.reshape(cz, fz, cy, fy, cx, fx)
    pooled = vol.mean(axis=(1, 3, 5)).reshape(-1)
    pvol = fld.provenance.reshape(cz, fz, cy, fy, cx, fx)
    pooled_prov = pvol.max(axis=(1, 3, 5)).reshape(-1)  # barycentric only if all children are
    grid = ParticleGrid(
        box_min=fld.grid.box_min,
        spacing=(fld.grid.spacing[0] * fx, fld.grid.spacing[1] * fy, fld.grid.spacing[2] * fz),
        resolution=(cx, cy, cz),
    )
    return ScalarField(grid, pooled, pooled_prov.astype(np.uint8), fld.mode, fld.slice_height)


def downsample(fld: ScalarField, factor: int) -> ScalarField:
    """Mean-pool factor^3 blocks; every grid dimension must divide evenly."""
    factor = int(factor)
    if factor < 1:
        raise FieldError(f"factor must be >= 1, got {factor}")
    return _pool(fld, (factor, factor, factor))


@dataclass
class LodPyramid:
    """Level 0 is the source field; each level mean-pools the one before.

    Axes of size 1 are exempt from the factor (a single slab cannot halve),
    which keeps slab grids useful; all other axes must divide evenly.
    """

    levels: list[ScalarField]

    @property
    def depth(self) -> int:
        return len(self.levels)


def build_pyramid(fld: ScalarField, factor: int = 2, max_levels: int | None = None) -> LodPyramid:
    levels = [fld]
    while max_levels is None or len(levels) < max_levels:
        nx, ny, nz = levels[-1].grid.resolution
        factors = tuple(1 if n == 1 else factor for n in (nx, ny, nz))
        if factors == (1, 1, 1):
            break
        if any(n % f for n, f in zip((nx, ny, nz), factors)):
            break
        levels.append(_pool(levels[-1], factors))
    return LodPyramid(levels)


# ---------------------------------------------------------------------------
# Export formats
# ---------------------------------------------------------------------------

RFLD_MAGIC = b"RFLD"
RFLD_VERSION = 1
_RFLD_HEAD = struct.Struct("<4sHB3I6d")  # magic, version, mode, nx/ny/nz, box min, spacing
_MODE_CODES = {"delaunay": 0, "voronoi": 1}
_MODE_NAMES = {0: "delaunay", 1: "voronoi"}


def write_rfld(fld: ScalarField) -> bytes:
    """Binary layout, little-endian:

    magic "RFLD" (4s) | version u16 | mode u8 (0 delaunay, 1 voronoi) |
    nx, ny, nz u32 | box min x,y,z f64 | cell spacing x,y,z f64 |
    nx*ny*nz values f64 (x fastest) | nx*ny*nz provenance u8
    (0 barycentric, 1 nearest-fallback)
    """
    header = _RFLD_HEAD.pack(
        RFLD_MAGIC,
        RFLD_VERSION,
        _MODE_CODES[fld.mode],
        *fld.grid.resolution,
        *fld.grid.box_min,
        *fld.grid.spacing,
    )
    body = fld.values.astype("<f8").tobytes() + fld.provenance.astype(np.uint8).tobytes()
    return header + body


def read_rfld(data: bytes) -> ScalarField:
    if len(data) < _RFLD_HEAD.size:
        raise FieldError("rfld data truncated before header end")
    magic, version, mode_code, nx, ny, nz, *rest = _RFLD_HEAD.unpack_from(data, 0)
    if magic != RFLD_MAGIC:
        raise FieldError("not an rfld stream (bad magic)")
    if version != RFLD_VERSION:
        raise FieldError(f"unsupported rfld version {version}")
    if mode_code not in _MODE_NAMES:
        raise FieldError(f"unknown mode code {mode_code}")
    box_min, spacing = tuple(rest[0:3]), tuple(rest[3:6])
    n = nx * ny * nz
    need = _RFLD_HEAD.size + 8 * n + n
    if len(data) != need:
        raise FieldError(f"rfld length {len(data)} != expected {need}")
    values = np.frombuffer(data, dtype="<f8", count=n, offset=_RFLD_HEAD.size).copy()
    prov = np.frombuffer(data, dtype=np.uint8, count=n, offset=_RFLD_HEAD.size + 8 * n).copy()
    grid = ParticleGrid(box_min=box_min, spacing=spacing, resolution=(nx, ny, nz))
    return ScalarField(grid, values, prov, _MODE_NAMES[mode_code])


def write_csv(fld: ScalarField) -> bytes:
    """Header line, then `x,y,z,value,provenance` rows in particle order."""
    lines = ["x,y,z,value,provenance"]
    positions = fld.grid.positions()
    for i in range(fld.grid.particle_count):
        x, y, z = positions[i]
        lines.append(
            f"{x!r},{y!r},{z!r},{fld.values[i]!r},{_PROVENANCE_NAMES[int(fld.provenance[i])]}"
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def export_field(fld: ScalarField, fmt: str) -> bytes:
    if fmt == "csv":
        return write_csv(fld)
    if fmt == "rfld":
        return write_rfld(fld)
    raise FieldError(f"unknown export format {fmt!r}")
