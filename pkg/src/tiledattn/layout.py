"""Layout algebra and MMA fragment ownership.

A ``Layout`` maps coordinates to linear indices through a stride tuple.
Fragment maps (shipped as JSON) record which warp lane owns which element of
the A, B and C tiles of one MMA instruction. The back-to-back check asks
whether the C tiles of one multiply can be fed as the A tiles of the next
without moving elements between lanes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from itertools import product
from pathlib import Path

INSTRUCTIONS = ("m16n8k16", "m8n8k4_f32acc", "m8n8k4_f16acc")
WARP = 32

Coord = tuple[int, int]


@dataclass(frozen=True)
class Layout:
    shape: tuple[int, ...]
    stride: tuple[int, ...]

    def __post_init__(self):
        if len(self.shape) != len(self.stride):
            raise ValueError(f"shape {self.shape} and stride {self.stride} differ in arity")
        if any(s < 1 for s in self.shape):
            raise ValueError(f"shape entries must be positive: {self.shape}")

    @classmethod
    def column_major(cls, shape) -> "Layout":
        stride, acc = [], 1
        for s in shape:
            stride.append(acc)
            acc *= s
        return cls(tuple(shape), tuple(stride))

    @classmethod
    def row_major(cls, shape) -> "Layout":
        stride, acc = [], 1
        for s in reversed(shape):
            stride.append(acc)
            acc *= s
        return cls(tuple(shape), tuple(reversed(stride)))

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def __call__(self, coord) -> int:
        return layout_eval(self, coord)

    def indices(self) -> list[int]:
        """Indices in row-major coordinate order."""
        return [layout_eval(self, c) for c in product(*(range(s) for s in self.shape))]


def layout_eval(l: Layout, coord) -> int:
    coord = tuple(coord)
    if len(coord) != len(l.shape):
        raise IndexError(f"coordinate {coord} has wrong arity for shape {l.shape}")
    for c, s in zip(coord, l.shape):
        if not 0 <= c < s:
            raise IndexError(f"coordinate {coord} outside shape {l.shape}")
    return sum(c * d for c, d in zip(coord, l.stride))


@dataclass(frozen=True)
class RoleMap:
    shape: tuple[int, int]
    threads: tuple[tuple[Coord, ...], ...]

    def owner(self) -> dict[Coord, int]:
        return {rc: t for t, coords in enumerate(self.threads) for rc in coords}


@dataclass(frozen=True)
class FragmentMap:
    instr: str
    mma_shape: tuple[int, int, int]
    roles: dict[str, RoleMap]
    quadpairs: tuple[tuple[int, ...], ...] | None = None

    def role(self, name: str) -> RoleMap:
        return self.roles[name]


def _parse(doc: dict) -> FragmentMap:
    if doc.get("schema_version") != 1:
        raise ValueError("fragment map schema_version must be 1")
    roles = {}
    for name in ("A", "B", "C"):
        r = doc["roles"][name]
        threads = tuple(tuple((int(a), int(b)) for a, b in t) for t in r["threads"])
        if len(threads) != WARP:
            raise ValueError(f"{doc['instr']} {name}: expected {WARP} lanes, got {len(threads)}")
        roles[name] = RoleMap(tuple(r["shape"]), threads)
    qps = doc.get("quadpairs")
    return FragmentMap(doc["instr"], tuple(doc["mma_shape"]), roles, tuple(map(tuple, qps)) if qps else None)


def load_fragment_map_file(path: str | Path) -> FragmentMap:
    return _parse(json.loads(Path(path).read_text()))


@lru_cache(maxsize=None)
def load_fragment_map(instr: str) -> FragmentMap:
    if instr not in INSTRUCTIONS:
        raise KeyError(f"unknown instruction {instr!r}; expected one of {INSTRUCTIONS}")
    text = (resources.files("tiledattn") / "data" / "fragments" / f"{instr}.json").read_text()
    return _parse(json.loads(text))


def partition_errors(role: RoleMap) -> list[str]:
    """Problems with a role's ownership: duplicates, out-of-tile or missing elements."""
    rows, cols = role.shape
    seen: dict[Coord, int] = {}
    errors = []
    for t, coords in enumerate(role.threads):
        for rc in coords:
            if not (0 <= rc[0] < rows and 0 <= rc[1] < cols):
                errors.append(f"lane {t} owns {rc} outside {role.shape}")
            elif rc in seen:
                errors.append(f"{rc} owned by lanes {seen[rc]} and {t}")
            else:
                seen[rc] = t
    missing = rows * cols - len(seen)
    if missing:
        errors.append(f"{missing} elements have no owner")
    return errors


def quadpair_errors(fm: FragmentMap) -> list[str]:
    """Each quadpair must own exactly its own 8-row (A, C) or 8-column (B) band."""
    if fm.quadpairs is None:
        return []
    errors = []
    for q, lanes in enumerate(fm.quadpairs):
        if len(lanes) != 8:
            errors.append(f"quadpair {q} has {len(lanes)} lanes")
        for name, axis in (("A", 0), ("B", 1), ("C", 0)):
            for t in lanes:
                for rc in fm.roles[name].threads[t]:
                    if rc[axis] // 8 != q:
                        errors.append(f"{name}: lane {t} of quadpair {q} owns {rc}")
    return errors


def tiles_per_handoff(fm: FragmentMap) -> tuple[int, int]:
    """``(c_tiles, a_tiles)``: how many C tiles side by side form how many A tiles."""
    n = fm.roles["C"].shape[1]
    k = fm.roles["A"].shape[1]
    width = math.lcm(n, k)
    return width // n, width // k


@dataclass(frozen=True)
class Conversion:
    """Result of re-reading accumulator fragments as A-operand fragments.

    ``a_threads[t]`` lists ``(a_tile, row, col)`` that lane ``t`` holds after
    re-indexing its C elements. ``moves`` lists ``(src_lane, dst_lane,
    (a_tile, row, col))`` for every element whose owner must change; empty
    for a pure re-indexing.
    """

    instr: str
    c_tiles: int
    a_tiles: int
    a_threads: tuple[tuple[tuple[int, int, int], ...], ...]
    moves: tuple[tuple[int, int, tuple[int, int, int]], ...]

    @property
    def identity(self) -> bool:
        return not self.moves


def _c_to_a(c_tile: int, r: int, c: int, n: int, k: int) -> tuple[int, int, int]:
    col = c_tile * n + c
    return (col // k, r, col % k)


def _a_to_c(a_tile: int, r: int, c: int, n: int, k: int) -> tuple[int, int, int]:
    col = a_tile * k + c
    return (col // n, r, col % n)


def convert_layout_acc_aregs(fm: FragmentMap, n_tiles: int | None = None) -> Conversion:
    """Re-tile ``n_tiles`` C tiles (along N) into A tiles for the next multiply."""
    c_tiles, a_tiles = tiles_per_handoff(fm)
    n_tiles = c_tiles if n_tiles is None else n_tiles
    if n_tiles < 1 or n_tiles % c_tiles:
        raise ValueError(f"{fm.instr}: the number of C tiles along N must be a multiple of {c_tiles}, got {n_tiles}")
    groups = n_tiles // c_tiles
    n = fm.roles["C"].shape[1]
    k = fm.roles["A"].shape[1]
    held = []
    for coords in fm.roles["C"].threads:
        mine = []
        for g in range(groups):
            for ct in range(c_tiles):
                for r, c in coords:
                    at, ar, ac = _c_to_a(ct, r, c, n, k)
                    mine.append((g * a_tiles + at, ar, ac))
        held.append(tuple(mine))
    holder = {e: t for t, es in enumerate(held) for e in es}
    a_role = fm.roles["A"].threads
    moves = []
    for t, coords in enumerate(a_role):
        for g in range(groups):
            for at in range(a_tiles):
                for r, c in coords:
                    e = (g * a_tiles + at, r, c)
                    if holder[e] != t:
                        moves.append((holder[e], t, e))
    return Conversion(fm.instr, c_tiles * groups, a_tiles * groups, tuple(held), tuple(moves))


def convert_aregs_to_acc(conv: Conversion, fm: FragmentMap) -> tuple[tuple[Coord, ...], ...]:
    """Inverse re-indexing: per lane, the C-tile coordinates behind its A elements (first C group)."""
    c_tiles, a_tiles = tiles_per_handoff(fm)
    n = fm.roles["C"].shape[1]
    k = fm.roles["A"].shape[1]
    out = []
    for held in conv.a_threads:
        coords = []
        for at, r, c in held:
            if at >= a_tiles:
                continue
            ct, cr, cc = _a_to_c(at, r, c, n, k)
            if ct == 0:
                coords.append((cr, cc))
        out.append(tuple(coords))
    return tuple(out)


def check_b2b_compat(instr: str) -> dict:
    """Can the accumulator fragments feed the next multiply's A operand in place?

    ``exchanges_needed`` counts, over all lanes, elements a lane holds that it
    does not need as an A operand; ``per_thread`` breaks that down by lane.
    """
    fm = load_fragment_map(instr)
    c_tiles, a_tiles = tiles_per_handoff(fm)
    n = fm.roles["C"].shape[1]
    k = fm.roles["A"].shape[1]
    per_thread = []
    for c_coords, a_coords in zip(fm.roles["C"].threads, fm.roles["A"].threads):
        owned = {_c_to_a(ct, r, c, n, k) for ct in range(c_tiles) for r, c in c_coords}
        needed = {(at, r, c) for at in range(a_tiles) for r, c in a_coords}
        per_thread.append(len(owned - needed))
    total = sum(per_thread)
    return {"instr": instr, "compatible": total == 0, "exchanges_needed": total, "per_thread": per_thread,
            "c_tiles": c_tiles, "a_tiles": a_tiles}


def ownership_table(fm: FragmentMap, role: str, lanes=range(WARP)) -> list[str]:
    """Text rows ``lane: (r,c) (r,c) ...`` for display."""
    rm = fm.roles[role]
    return [f"{t:2d}: " + " ".join(f"({r},{c})" for r, c in rm.threads[t]) for t in lanes]
