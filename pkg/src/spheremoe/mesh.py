"""Icosphere subdivision hierarchy with index-stable levels.

Level ``L`` has ``10 * 4**L + 2`` vertices. Subdivision keeps every vertex of
level ``L-1`` at the same index and appends one child per coarse edge (the
normalized edge midpoint), so the first ``n_vertices(L-1)`` rows of any
level-``L`` vertex field form a valid level-``L-1`` field.

Neighbour tables are fixed width (6 slots). Slots run counter-clockwise as
seen from outside the sphere, starting from the neighbour with the smallest
index. The 12 pentagon vertices inherited from the icosahedron leave their
6th slot at ``SENTINEL``.

Both hemispheres use the same hierarchy object; the hemisphere tag lives on
masks and fields.
"""

from __future__ import annotations

import enum
import functools
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RangeError

SENTINEL = -1
MAX_LEVEL = 6


class Hemisphere(str, enum.Enum):
    LEFT = "L"
    RIGHT = "R"

    @classmethod
    def parse(cls, value) -> "Hemisphere":
        if isinstance(value, Hemisphere):
            return value
        text = str(value).strip().upper()
        if text in ("L", "LEFT", "LH"):
            return cls.LEFT
        if text in ("R", "RIGHT", "RH"):
            return cls.RIGHT
        raise ConfigError(f"unknown hemisphere {value!r}")


def n_vertices(level: int) -> int:
    return 10 * 4**level + 2


def n_edges(level: int) -> int:
    return 30 * 4**level


def n_faces(level: int) -> int:
    return 20 * 4**level


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MeshLevel:
    """One level of the hierarchy.

    Attributes
    ----------
    level : int
    positions : (V, 3) float64 unit vectors
    faces : (F, 3) int64, counter-clockwise seen from outside
    neighbors : (V, 6) int64, canonical ring order, ``SENTINEL`` padding
    parent_of : (V, 2) int64 or None
        For inherited vertices ``(v, v)``; for edge-children the two coarse
        endpoints of the spawning edge. ``None`` at level 0.
    """

    level: int
    positions: np.ndarray
    faces: np.ndarray
    neighbors: np.ndarray
    parent_of: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return int(self.positions.shape[0])

    @property
    def degree(self) -> np.ndarray:
        return (self.neighbors != SENTINEL).sum(axis=1)

    def edges(self) -> np.ndarray:
        return unique_edges(self.faces)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Sorted ``(i, j)`` pairs with ``i < j`` for every face edge."""
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for s1, s2 in itertools.product((-1.0, 1.0), repeat=2):
        verts.append((0.0, s1, s2 * phi))
    for s1, s2 in itertools.product((-1.0, 1.0), repeat=2):
        verts.append((s1, s2 * phi, 0.0))
    for s1, s2 in itertools.product((-1.0, 1.0), repeat=2):
        verts.append((s1 * phi, 0.0, s2))
    pos = np.array(verts)
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)

    # faces = triples whose three pairwise distances equal the edge length
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    edge = d[d > 1e-9].min()
    adj = np.abs(d - edge) < 1e-9
    faces = []
    for a, b, c in itertools.combinations(range(12), 3):
        if adj[a, b] and adj[b, c] and adj[a, c]:
            n = np.cross(pos[b] - pos[a], pos[c] - pos[a])
            faces.append((a, b, c) if n @ (pos[a] + pos[b] + pos[c]) > 0 else (a, c, b))
    return pos, np.array(faces, dtype=np.int64)


def _ring_table(faces: np.ndarray, n_vert: int) -> np.ndarray:
    f = faces
    src = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    dst = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    nxt = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    key = src * n_vert + dst
    order = np.argsort(key, kind="stable")
    key, src, dst, nxt = key[order], src[order], dst[order], nxt[order]

    counts = np.bincount(src, minlength=n_vert)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    start = dst[first]  # sorted by (src, dst): first entry is the smallest neighbour

    table = np.full((n_vert, 6), SENTINEL, dtype=np.int64)
    table[:, 0] = start
    verts = np.arange(n_vert, dtype=np.int64)
    cur = start
    for slot in range(1, 6):
        pos = np.searchsorted(key, verts * n_vert + cur)
        cur = nxt[pos]
        table[:, slot] = cur
    table[counts == 5, 5] = SENTINEL
    return table


def _subdivide(coarse: MeshLevel) -> MeshLevel:
    nv = coarse.n_vertices
    edges = unique_edges(coarse.faces)
    child_pos = coarse.positions[edges[:, 0]] + coarse.positions[edges[:, 1]]
    child_pos /= np.linalg.norm(child_pos, axis=1, keepdims=True)
    positions = np.concatenate([coarse.positions, child_pos])

    ekey = edges[:, 0] * nv + edges[:, 1]

    def mid(i, j):
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        return nv + np.searchsorted(ekey, lo * nv + hi)

    a, b, c = coarse.faces.T
    ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
    faces = np.stack(
        [
            np.stack([a, ab, ca], 1),
            np.stack([ab, b, bc], 1),
            np.stack([ca, bc, c], 1),
            np.stack([ab, bc, ca], 1),
        ],
        axis=1,
    ).reshape(-1, 3)

    inherited = np.arange(nv, dtype=np.int64)
    parent_of = np.concatenate([np.stack([inherited, inherited], 1), edges])
    nvert = positions.shape[0]
    return MeshLevel(
        level=coarse.level + 1,
        positions=_frozen(positions),
        faces=_frozen(faces),
        neighbors=_frozen(_ring_table(faces, nvert)),
        parent_of=_frozen(parent_of),
    )


@functools.lru_cache(maxsize=None)
def mesh_level(level: int) -> MeshLevel:
    """Cached level ``level`` (built by repeated subdivision)."""
    if not 0 <= level <= MAX_LEVEL:
        raise ConfigError(f"mesh level must be in 0..{MAX_LEVEL}, got {level}")
    if level == 0:
        pos, faces = _icosahedron()
        return MeshLevel(0, _frozen(pos), _frozen(faces), _frozen(_ring_table(faces, 12)))
    return _subdivide(mesh_level(level - 1))


@dataclass(frozen=True)
class MeshHierarchy:
    """Levels ``0..max_level`` plus the coarse-to-fine pooling supports.

    ``down_maps[L]`` (``L >= 1``) has shape ``(n_vertices(L-1), 7)``: column 0
    is the coarse vertex itself, columns 1..6 its ring at level ``L`` (all of
    which are children of edges incident to it), ``SENTINEL`` for pentagons.
    """

    levels: tuple[MeshLevel, ...]
    down_maps: tuple[np.ndarray | None, ...] = field(repr=False)

    @property
    def max_level(self) -> int:
        return len(self.levels) - 1

    def __getitem__(self, level: int) -> MeshLevel:
        if not 0 <= level <= self.max_level:
            raise ConfigError(f"level {level} not in hierarchy 0..{self.max_level}")
        return self.levels[level]

    def support(self, level: int) -> np.ndarray:
        """Pooling supports mapping level ``level-1`` vertices into ``level``."""
        if not 1 <= level <= self.max_level:
            raise ConfigError(f"no pooling support into level {level}")
        return self.down_maps[level]


@functools.lru_cache(maxsize=None)
def build_hierarchy(max_level: int) -> MeshHierarchy:
    if not isinstance(max_level, (int, np.integer)) or not 0 <= max_level <= MAX_LEVEL:
        raise ConfigError(f"max_level must be an integer in 0..{MAX_LEVEL}, got {max_level!r}")
    levels = tuple(mesh_level(L) for L in range(max_level + 1))
    down = [None]
    for L in range(1, max_level + 1):
        nc = levels[L - 1].n_vertices
        sup = np.concatenate(
            [np.arange(nc, dtype=np.int64)[:, None], levels[L].neighbors[:nc]], axis=1
        )
        down.append(_frozen(sup))
    return MeshHierarchy(levels, tuple(down))


def one_ring(mesh: MeshLevel, v: int) -> list[int]:
    if not 0 <= int(v) < mesh.n_vertices:
        raise RangeError(f"vertex {v} out of range for level {mesh.level} ({mesh.n_vertices} vertices)")
    row = mesh.neighbors[int(v)]
    return [int(u) for u in row if u != SENTINEL]


@dataclass
class LevelReport:
    level: int
    checks: dict[str, bool]
    values: dict[str, object]

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {"level": self.level, "ok": self.ok, "checks": dict(self.checks), "values": dict(self.values)}


def verify_level(mesh: MeshLevel, coarser: MeshLevel | None = None) -> LevelReport:
    """Check counts, Euler characteristic, pentagon census, norms and ring symmetry.

    Index stability is checked only when the next-coarser level is supplied.
    Never raises; a failing check is reported as ``False``.
    """
    L = mesh.level
    V = int(mesh.positions.shape[0])
    F = int(mesh.faces.shape[0])
    E = int(unique_edges(mesh.faces).shape[0]) if F else 0
    deg = mesh.degree
    norms = np.linalg.norm(mesh.positions, axis=1)
    max_norm_err = float(np.abs(norms - 1.0).max()) if V else 0.0

    nb = mesh.neighbors
    rows = np.repeat(np.arange(nb.shape[0]), 6)
    cols = nb.reshape(-1)
    keep = cols != SENTINEL
    fwd = set(zip(rows[keep].tolist(), cols[keep].tolist()))
    symmetric = all((b, a) in fwd for a, b in fwd)

    checks = {
        "vertex_count": V == n_vertices(L),
        "edge_count": E == n_edges(L),
        "face_count": F == n_faces(L),
        "euler": V - E + F == 2,
        "pentagon_census": int((deg == 5).sum()) == 12 and int((deg == 6).sum()) == V - 12,
        "unit_norm": max_norm_err <= 1e-12,
        "ring_symmetry": symmetric,
    }
    values: dict[str, object] = {
        "V": V, "E": E, "F": F, "euler": V - E + F,
        "pentagons": int((deg == 5).sum()), "max_norm_error": max_norm_err,
    }
    if coarser is not None:
        nc = coarser.n_vertices
        checks["index_stability"] = bool(
            V >= nc and np.array_equal(mesh.positions[:nc], coarser.positions)
        )
    return LevelReport(L, checks, values)


def mesh_info(level: int) -> dict:
    """Counts and invariant report for one level (payload of ``mesh-info``)."""
    h = build_hierarchy(level)
    m = h[level]
    rep = verify_level(m, h[level - 1] if level > 0 else None)
    return {
        "level": level,
        "vertices": m.n_vertices,
        "edges": int(rep.values["E"]),
        "faces": int(m.faces.shape[0]),
        "report": rep.to_dict(),
    }
