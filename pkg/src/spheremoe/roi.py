"""Per-hemisphere vertex selections and their coarsening across levels.

ROI files are JSON objects::

    {"level": 6, "hemisphere": "L", "indices": [0, 1, 2]}

``hemi`` is accepted as an alias of ``hemisphere``. Indices must be unique,
sorted and smaller than the vertex count of ``level``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .mesh import SENTINEL, Hemisphere, MeshHierarchy, build_hierarchy, mesh_level, n_vertices


@dataclass(frozen=True, eq=False)
class RoiMask:
    level: int
    hemisphere: Hemisphere
    selected: np.ndarray  # bool (V,)

    def __post_init__(self):
        sel = np.ascontiguousarray(self.selected, dtype=bool)
        if sel.shape != (n_vertices(self.level),):
            raise ConfigError(
                f"mask length {sel.shape} does not match level {self.level} ({n_vertices(self.level)} vertices)"
            )
        sel.setflags(write=False)
        object.__setattr__(self, "selected", sel)
        object.__setattr__(self, "hemisphere", Hemisphere.parse(self.hemisphere))
        idx = np.flatnonzero(sel)
        idx.setflags(write=False)
        object.__setattr__(self, "_indices", idx)
        digest = hashlib.sha1(np.packbits(sel).tobytes()).hexdigest()[:16]
        object.__setattr__(self, "key", f"{self.level}:{digest}")

    @property
    def count(self) -> int:
        return int(self._indices.size)

    @property
    def indices(self) -> np.ndarray:
        return self._indices

    def __eq__(self, other):
        return (
            isinstance(other, RoiMask)
            and self.level == other.level
            and self.hemisphere == other.hemisphere
            and self.key == other.key
        )

    def __hash__(self):
        return hash((self.level, self.hemisphere, self.key))

    @classmethod
    def full(cls, level: int, hemisphere) -> "RoiMask":
        return cls(level, hemisphere, np.ones(n_vertices(level), dtype=bool))

    @classmethod
    def empty(cls, level: int, hemisphere) -> "RoiMask":
        return cls(level, hemisphere, np.zeros(n_vertices(level), dtype=bool))

    @classmethod
    def from_indices(cls, level: int, hemisphere, indices) -> "RoiMask":
        sel = np.zeros(n_vertices(level), dtype=bool)
        sel[np.asarray(indices, dtype=np.int64)] = True
        return cls(level, hemisphere, sel)

    def to_json(self) -> dict:
        return {"level": self.level, "hemisphere": self.hemisphere.value, "indices": self.indices.tolist()}


def load_roi(path) -> RoiMask:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return roi_from_json(payload, source=str(path))


def roi_from_json(payload: dict, source: str = "<roi>") -> RoiMask:
    if not isinstance(payload, dict):
        raise FormatError(f"{source}: expected a JSON object")
    try:
        level = int(payload["level"])
        hemi = payload.get("hemisphere", payload.get("hemi"))
        indices = payload["indices"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: missing or malformed field ({exc})") from exc
    if hemi is None:
        raise FormatError(f"{source}: missing hemisphere")
    if not 0 <= level <= 6:
        raise FormatError(f"{source}: level {level} outside 0..6")
    try:
        hemisphere = Hemisphere.parse(hemi)
    except ConfigError as exc:
        raise FormatError(f"{source}: {exc}") from exc

    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    nv = n_vertices(level)
    if idx.size:
        if idx.min() < 0 or idx.max() >= nv:
            raise FormatError(f"{source}: vertex index out of range for level {level} ({nv} vertices)")
        if np.unique(idx).size != idx.size:
            raise FormatError(f"{source}: duplicate vertex index")
        if np.any(np.diff(idx) < 0):
            raise FormatError(f"{source}: indices must be sorted")
    return RoiMask.from_indices(level, hemisphere, idx)


def save_roi(mask: RoiMask, path) -> None:
    Path(path).write_text(json.dumps(mask.to_json()))


@dataclass(frozen=True)
class RoiPyramid:
    """Masks from ``base_level`` down to ``target_level`` (inclusive)."""

    masks: dict[int, RoiMask]

    @property
    def base_level(self) -> int:
        return max(self.masks)

    @property
    def target_level(self) -> int:
        return min(self.masks)

    @property
    def hemisphere(self) -> Hemisphere:
        return self.masks[self.base_level].hemisphere

    def __getitem__(self, level: int) -> RoiMask:
        try:
            return self.masks[level]
        except KeyError:
            raise ConfigError(
                f"ROI pyramid covers levels {self.target_level}..{self.base_level}, not {level}"
            ) from None


def coarsen_once(fine: RoiMask, hierarchy: MeshHierarchy) -> RoiMask:
    """A coarse vertex is selected iff any fine vertex in its support is."""
    sup = hierarchy.support(fine.level)
    sup = np.where(sup == SENTINEL, sup[:, :1], sup)
    return RoiMask(fine.level - 1, fine.hemisphere, fine.selected[sup].any(axis=1))


def coarsen(mask: RoiMask, hierarchy: MeshHierarchy | None, to_level: int) -> RoiPyramid:
    if to_level >= mask.level:
        raise ConfigError(f"to_level ({to_level}) must be below the mask level ({mask.level})")
    if to_level < 0:
        raise ConfigError("to_level must be non-negative")
    if hierarchy is None or hierarchy.max_level < mask.level:
        hierarchy = build_hierarchy(mask.level)
    masks = {mask.level: mask}
    cur = mask
    for _ in range(mask.level - to_level):
        cur = coarsen_once(cur, hierarchy)
        masks[cur.level] = cur
    return RoiPyramid(masks)


def pyramid(mask: RoiMask, to_level: int, hierarchy: MeshHierarchy | None = None) -> RoiPyramid:
    """Like :func:`coarsen` but ``to_level == mask.level`` yields a 1-level pyramid."""
    if to_level == mask.level:
        return RoiPyramid({mask.level: mask})
    return coarsen(mask, hierarchy, to_level)


def reduction_stats(left: RoiMask, right: RoiMask, hierarchy: MeshHierarchy | None = None) -> float:
    """Fraction of the two-hemisphere vertex set that the ROI removes."""
    if left.level != right.level:
        raise ConfigError(f"left/right masks at different levels ({left.level} vs {right.level})")
    total = 2 * n_vertices(left.level)
    return (total - left.count - right.count) / total


def roi_stats(left: RoiMask, right: RoiMask) -> dict:
    frac = reduction_stats(left, right)
    return {
        "level": left.level,
        "selected": left.count + right.count,
        "selected_left": left.count,
        "selected_right": right.count,
        "total": 2 * n_vertices(left.level),
        "reduction": frac,
        "reduction_pct": round(100.0 * frac, 2),
        "notes": (
            "Reduction is (total - selected) / total over both hemispheres. "
            "For 4,613 + 4,875 selected vertices at level 6 this is 88.42%. An 88.7% figure "
            "sometimes given for this restriction does not follow from these counts."
        ),
    }


def cap_roi(level: int, hemisphere, count: int, center=(0.0, -1.0, 0.0)) -> RoiMask:
    """Select the ``count`` vertices closest to ``center`` (a geodesic cap).

    Used to build visual-cortex-shaped masks of a prescribed size. Ties in
    angular distance are broken by vertex index.
    """
    pos = mesh_level(level).positions
    nv = pos.shape[0]
    if not 0 <= count <= nv:
        raise ConfigError(f"cap size {count} outside 0..{nv}")
    c = np.asarray(center, dtype=np.float64)
    c = c / np.linalg.norm(c)
    order = np.lexsort((np.arange(nv), -(pos @ c)))
    return RoiMask.from_indices(level, hemisphere, np.sort(order[:count]))
