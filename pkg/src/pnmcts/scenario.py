"""Scenarios (platoons approaching one intersection) and their JSON files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .board import Board, from_scenario, overlay
from .geometry import IntersectionLayout, Platoon, default_layout, layout_from_dict


@dataclass(frozen=True)
class Scenario:
    platoons: tuple[Platoon, ...]
    layout: IntersectionLayout
    residual: Board | None = None
    elapsed: float = 0.0

    def to_board(self) -> Board:
        b = from_scenario(self.platoons, self.layout)
        if self.residual is not None:
            b = overlay(self.residual, b, self.elapsed)
        return b

    def to_dict(self) -> dict:
        d = {
            "platoons": [
                {
                    "id": p.id,
                    "movement": p.movement.key,
                    "speed": p.speed,
                    "distance": p.distance_to_stop_line,
                    "vehicle_count": p.vehicle_count,
                }
                for p in self.platoons
            ]
        }
        if self.residual is not None:
            d["residual"] = self.residual.to_dict()
            d["elapsed"] = self.elapsed
        return d

    @classmethod
    def from_dict(cls, data: dict, layout: IntersectionLayout) -> "Scenario":
        platoons = tuple(
            Platoon(int(p["id"]), layout.movement(p["movement"]), float(p["speed"]), float(p["distance"]),
                    int(p["vehicle_count"]))
            for p in data["platoons"]
        )
        residual = Board.from_dict(data["residual"]) if data.get("residual") else None
        return cls(platoons, layout, residual, float(data.get("elapsed", 0.0)))


def _layout_entry(layout: IntersectionLayout):
    return layout.id if layout == default_layout() else layout.to_dict()


def _resolve_layout(entry) -> IntersectionLayout:
    if entry is None or entry == default_layout().id:
        return default_layout()
    if isinstance(entry, dict):
        return layout_from_dict(entry)
    raise ValueError(f"unknown layout {entry!r}")


def save_scenarios(scenarios, path: str | Path, meta: dict | None = None) -> None:
    scenarios = list(scenarios)
    layout = scenarios[0].layout if scenarios else default_layout()
    doc = {"layout": _layout_entry(layout), "meta": meta or {}, "scenarios": [s.to_dict() for s in scenarios]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_scenarios(path: str | Path) -> list[Scenario]:
    doc = json.loads(Path(path).read_text())
    if "scenarios" not in doc:  # single-scenario file
        doc = {"layout": doc.get("layout"), "scenarios": [doc]}
    layout = _resolve_layout(doc.get("layout"))
    return [Scenario.from_dict(s, layout) for s in doc["scenarios"]]
