"""Intersection layouts and platoon occupancy projection.

A layout lists the collision areas inside an intersection and, for every
movement (approach + turn), the ordered areas it crosses together with the
arc distance of each area from the stop line.  Platoons are assumed to hold
their approach speed through the intersection, so occupancy of an area is a
single interval per platoon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

APPROACHES = ("N", "E", "S", "W")
TURNS = ("left", "straight", "right")

VEHICLE_LENGTH = 5.0  # m
VEHICLE_GAP = 2.0  # m, bumper-to-bumper inside a platoon


class LayoutError(ValueError):
    """Raised when a layout file is malformed or violates an invariant."""


@dataclass(frozen=True)
class CollisionArea:
    id: str
    extent: float  # m, along the path

    def __post_init__(self):
        if not self.extent > 0:
            raise LayoutError(f"area {self.id!r}: extent must be > 0, got {self.extent}")


@dataclass(frozen=True)
class Movement:
    approach: str
    turn: str
    area_sequence: tuple[tuple[str, float], ...] = ()

    @property
    def key(self) -> str:
        return f"{self.approach}-{self.turn}"

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise LayoutError(f"movement approach must be one of {APPROACHES}, got {self.approach!r}")
        if self.turn not in TURNS:
            raise LayoutError(f"movement turn must be one of {TURNS}, got {self.turn!r}")
        ids = [a for a, _ in self.area_sequence]
        if len(set(ids)) != len(ids):
            raise LayoutError(f"movement {self.key}: duplicate area in sequence {ids}")
        arcs = [s for _, s in self.area_sequence]
        if any(s < 0 for s in arcs):
            raise LayoutError(f"movement {self.key}: negative arc distance in {arcs}")
        if any(b <= a for a, b in zip(arcs, arcs[1:])):
            raise LayoutError(f"movement {self.key}: arc distances must be strictly increasing, got {arcs}")


@dataclass(frozen=True)
class IntersectionLayout:
    id: str
    areas: tuple[CollisionArea, ...]
    movements: tuple[Movement, ...]
    area_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [a.id for a in self.areas]
        seen = set()
        for a in ids:
            if a in seen:
                raise LayoutError(f"duplicate area id {a!r}")
            seen.add(a)
        for m in self.movements:
            for area_id, _ in m.area_sequence:
                if area_id not in seen:
                    raise LayoutError(f"movement {m.key} references unknown area {area_id!r}")
        keys = [m.key for m in self.movements]
        if len(set(keys)) != len(keys):
            raise LayoutError(f"duplicate movement in {keys}")
        object.__setattr__(self, "area_index", {a: i for i, a in enumerate(ids)})

    @property
    def area_ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.areas)

    @property
    def n_areas(self) -> int:
        return len(self.areas)

    @property
    def max_areas_per_movement(self) -> int:
        return max((len(m.area_sequence) for m in self.movements), default=0)

    def movement(self, key: str) -> Movement:
        for m in self.movements:
            if m.key == key:
                return m
        raise KeyError(f"layout {self.id!r} has no movement {key!r}")

    def extent(self, area_id: str) -> float:
        return self.areas[self.area_index[area_id]].extent

    def conflicting_movements(self) -> list[Movement]:
        """Movements that cross at least one collision area."""
        return [m for m in self.movements if m.area_sequence]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "areas": [{"id": a.id, "extent_m": a.extent} for a in self.areas],
            "movements": [
                {
                    "approach": m.approach,
                    "turn": m.turn,
                    "sequence": [{"area": a, "arc_m": s} for a, s in m.area_sequence],
                }
                for m in self.movements
            ],
        }


def platoon_length(vehicle_count: int) -> float:
    return VEHICLE_LENGTH * vehicle_count + VEHICLE_GAP * (vehicle_count - 1)


@dataclass(frozen=True)
class Platoon:
    id: int
    movement: Movement
    speed: float  # m/s
    distance_to_stop_line: float  # m
    vehicle_count: int

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError(f"platoon {self.id}: speed must be positive")
        if self.distance_to_stop_line < 0:
            raise ValueError(f"platoon {self.id}: distance must be nonnegative")
        if self.vehicle_count < 1:
            raise ValueError(f"platoon {self.id}: needs at least one vehicle")

    @property
    def length(self) -> float:
        return platoon_length(self.vehicle_count)


def layout_from_dict(data: dict) -> IntersectionLayout:
    try:
        areas = tuple(CollisionArea(str(a["id"]), float(a["extent_m"])) for a in data["areas"])
        movements = tuple(
            Movement(
                str(m["approach"]),
                str(m["turn"]),
                tuple((str(s["area"]), float(s["arc_m"])) for s in m.get("sequence", [])),
            )
            for m in data["movements"]
        )
        layout_id = str(data.get("id", "layout"))
    except (KeyError, TypeError) as exc:
        raise LayoutError(f"malformed layout: missing or invalid field {exc}") from exc
    return IntersectionLayout(layout_id, areas, movements)


def load_layout(path: str | Path) -> IntersectionLayout:
    """Read and validate a JSON layout file."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise LayoutError(f"{path}: not valid JSON ({exc})") from exc
    return layout_from_dict(data)


_DEFAULT: IntersectionLayout | None = None


def default_layout() -> IntersectionLayout:
    """The bundled four-way, three-lane layout (areas A-H)."""
    global _DEFAULT
    if _DEFAULT is None:
        ref = resources.files("pnmcts") / "layouts" / "fourway3lane.json"
        _DEFAULT = layout_from_dict(json.loads(ref.read_text()))
    return _DEFAULT


def project_occupancy(p: Platoon, layout: IntersectionLayout) -> list[tuple[str, float, float]]:
    """Occupancy interval ``(area, t_entry, t_exit)`` for each area on the platoon's path.

    The head enters an area at arc ``s`` after ``(d + s) / v`` seconds and the
    tail leaves it once the head has travelled a further ``length + extent``.
    """
    if p.movement not in layout.movements:
        raise ValueError(f"platoon {p.id}: movement {p.movement.key} not in layout {layout.id!r}")
    out = []
    for area_id, s in p.movement.area_sequence:
        t_entry = (p.distance_to_stop_line + s) / p.speed
        t_exit = (p.distance_to_stop_line + s + p.length + layout.extent(area_id)) / p.speed
        out.append((area_id, t_entry, t_exit))
    return out
