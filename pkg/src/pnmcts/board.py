"""The scheduling board: occupancy grid, delay actions, terminal test and reward.

A board has ``N_MAX`` rows (platoons) and one column per collision area.  Each
cell is either absent (the area is not on the platoon's path) or an occupancy
interval.  Rows are ``new`` (schedulable), ``residual`` (committed by an
earlier decision, frozen) or ``empty``.

Delays are stored as an integer move count per row on top of immutable base
intervals, so shifts commute exactly and boards are cheap to derive.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .geometry import IntersectionLayout, Platoon, default_layout, project_occupancy

N_MAX = 16
N_NEW_MAX = 8
N_MOVES = 20
MOVE_SECONDS = 0.1
EPS = 1e-9


class RowKind(IntEnum):
    EMPTY = 0
    NEW = 1
    RESIDUAL = 2


ROW_FLAG = {RowKind.EMPTY: 0.0, RowKind.NEW: 0.5, RowKind.RESIDUAL: 1.0}


class BoardError(ValueError):
    pass


class IllegalActionError(BoardError):
    pass


@dataclass(frozen=True)
class RewardParams:
    t_max: float = 30.0
    s_max: int = 20
    alpha: float = 0.5
    fail_step_value: float = -1e-3
    fail_time_value: float = -1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.t_max <= 0 or self.s_max <= 0:
            raise ValueError("t_max and s_max must be positive")


@dataclass(frozen=True)
class Action:
    row: int
    moves: int

    @property
    def index(self) -> int:
        return self.row * N_MOVES + (self.moves - 1)

    @classmethod
    def from_index(cls, index: int) -> "Action":
        row, a = divmod(int(index), N_MOVES)
        return cls(row, a + 1)

    @property
    def delay(self) -> float:
        return self.moves * MOVE_SECONDS


SOLVED = "solved"
FAIL_STEPS = "fail_steps"
FAIL_TIME = "fail_time"


@dataclass(frozen=True)
class EpisodeOutcome:
    status: str
    t_cross: float
    steps: int
    reward: float

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


def crossing_reward(t_cross: float, steps: int, params: RewardParams) -> float:
    return params.alpha * (1.0 - t_cross / params.t_max) + (1.0 - params.alpha) * (1.0 - steps / params.s_max)


class Board:
    """Immutable scheduling board.  Use the module functions to derive new boards."""

    __slots__ = ("areas", "_entry0", "_exit0", "present", "kinds", "moves", "step_count", "labels", "_cache")

    def __init__(self, areas, entry0, exit0, present, kinds, moves=None, step_count=0, labels=None):
        self.areas = tuple(areas)
        m = len(self.areas)
        entry0 = np.asarray(entry0, dtype=float)
        exit0 = np.asarray(exit0, dtype=float)
        present = np.asarray(present, dtype=bool)
        if entry0.shape != (N_MAX, m) or exit0.shape != (N_MAX, m) or present.shape != (N_MAX, m):
            raise BoardError(f"board arrays must have shape {(N_MAX, m)}")
        for arr in (entry0, exit0, present):
            arr.flags.writeable = False
        self._entry0 = entry0
        self._exit0 = exit0
        self.present = present
        self.kinds = tuple(RowKind(k) for k in kinds)
        if len(self.kinds) != N_MAX:
            raise BoardError(f"need {N_MAX} row kinds")
        self.moves = tuple(int(x) for x in moves) if moves is not None else (0,) * N_MAX
        self.step_count = int(step_count)
        self.labels = tuple(labels) if labels is not None else tuple(f"p{i}" for i in range(N_MAX))
        self._cache = {}

    # -- derived views -------------------------------------------------
    @property
    def entry(self) -> np.ndarray:
        e = self._cache.get("entry")
        if e is None:
            e = self._entry0 + MOVE_SECONDS * np.asarray(self.moves, dtype=float)[:, None]
            e.flags.writeable = False
            self._cache["entry"] = e
        return e

    @property
    def exit(self) -> np.ndarray:
        x = self._cache.get("exit")
        if x is None:
            x = self._exit0 + MOVE_SECONDS * np.asarray(self.moves, dtype=float)[:, None]
            x.flags.writeable = False
            self._cache["exit"] = x
        return x

    @property
    def n_areas(self) -> int:
        return len(self.areas)

    @property
    def n_rows(self) -> int:
        """One past the last non-empty row."""
        n = self._cache.get("n_rows")
        if n is None:
            n = 0
            for i, k in enumerate(self.kinds):
                if k != RowKind.EMPTY:
                    n = i + 1
            self._cache["n_rows"] = n
        return n

    def rows_of(self, kind: RowKind) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == kind]

    @property
    def cache_key(self):
        """Identity of this state among boards derived from the same base."""
        return (id(self._entry0), self.moves)

    def cell(self, row: int, area: str | int):
        """``None`` for an absent cell, otherwise ``(t_entry, t_exit)``."""
        j = self.areas.index(area) if isinstance(area, str) else area
        if self.kinds[row] == RowKind.EMPTY or not self.present[row, j]:
            return None
        return float(self.entry[row, j]), float(self.exit[row, j])

    def row_intervals(self, row: int) -> dict[str, tuple[float, float]]:
        return {a: self.cell(row, j) for j, a in enumerate(self.areas) if self.cell(row, j) is not None}

    def row_max_exit(self) -> np.ndarray:
        """Latest exit per row, ``nan`` for rows without present cells."""
        out = self._cache.get("row_max_exit")
        if out is None:
            out = np.where(self.present, self.exit, -np.inf).max(axis=1)
            out[~self.present.any(axis=1)] = np.nan
            self._cache["row_max_exit"] = out
        return out

    def t_cross(self) -> float:
        mx = self.row_max_exit()
        return float(np.nanmax(mx)) if np.isfinite(mx).any() else 0.0

    def shifted(self, row: int, moves: int, count_step: bool = False) -> "Board":
        """Board with ``row`` delayed by ``moves`` units; no legality checks."""
        mv = list(self.moves)
        mv[row] += int(moves)
        return Board(self.areas, self._entry0, self._exit0, self.present, self.kinds, mv,
                     self.step_count + (1 if count_step else 0), self.labels)

    def with_kinds(self, kinds) -> "Board":
        return Board(self.areas, self._entry0, self._exit0, self.present, kinds, self.moves,
                     self.step_count, self.labels)

    def __eq__(self, other):
        if not isinstance(other, Board):
            return NotImplemented
        return (
            self.areas == other.areas
            and self.kinds == other.kinds
            and self.step_count == other.step_count
            and np.array_equal(self.present, other.present)
            and np.array_equal(np.where(self.present, self.entry, 0), np.where(other.present, other.entry, 0))
            and np.array_equal(np.where(self.present, self.exit, 0), np.where(other.present, other.exit, 0))
        )

    __hash__ = None

    def __repr__(self):
        return f"Board(rows={self.n_rows}, steps={self.step_count}, conflicts={len(conflicts(self))})"

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        rows = []
        for i in range(self.n_rows):
            rows.append({
                "label": self.labels[i],
                "kind": self.kinds[i].name.lower(),
                "cells": {a: list(iv) for a, iv in self.row_intervals(i).items()},
            })
        return {"areas": list(self.areas), "step_count": self.step_count, "rows": rows}

    @classmethod
    def from_dict(cls, data: dict) -> "Board":
        rows = data["rows"]
        kinds = [RowKind[r["kind"].upper()] for r in rows]
        cells = [{a: tuple(v) for a, v in r["cells"].items()} for r in rows]
        labels = [r.get("label", f"p{i}") for i, r in enumerate(rows)]
        return from_intervals(cells, data["areas"], kinds=kinds, labels=labels, step_count=data.get("step_count", 0))

    def dump(self) -> str:
        """Text grid in the style of the board figure: one line per platoon."""
        width = 13
        head = "row  kind      " + "".join(f"{a:^{width}}" for a in self.areas)
        lines = [head]
        for i in range(self.n_rows):
            cells = []
            for j in range(self.n_areas):
                c = self.cell(i, j)
                cells.append(f"{c[0]:5.1f}-{c[1]:<5.1f}".center(width) if c else "·".center(width))
            lines.append(f"{i:<4} {self.kinds[i].name.lower():<9} " + "".join(cells))
        lines.append(f"steps={self.step_count} t_cross={self.t_cross():.2f}")
        return "\n".join(lines)


def _blank(m):
    return np.zeros((N_MAX, m)), np.zeros((N_MAX, m)), np.zeros((N_MAX, m), dtype=bool)


def from_intervals(rows: Sequence[dict], areas: Sequence[str], kinds=None, labels=None, step_count=0) -> Board:
    """Build a board from per-row ``{area: (t_entry, t_exit)}`` mappings."""
    if len(rows) > N_MAX:
        raise BoardError(f"at most {N_MAX} rows, got {len(rows)}")
    areas = tuple(areas)
    entry, exit_, present = _blank(len(areas))
    all_kinds = [RowKind.EMPTY] * N_MAX
    all_labels = [f"p{i}" for i in range(N_MAX)]
    for i, cells in enumerate(rows):
        for a, (t0, t1) in cells.items():
            j = areas.index(a)
            if not 0 <= t0 < t1:
                raise BoardError(f"row {i}, area {a}: need 0 <= t_entry < t_exit, got ({t0}, {t1})")
            entry[i, j], exit_[i, j], present[i, j] = t0, t1, True
        all_kinds[i] = RowKind.NEW if kinds is None else RowKind(kinds[i])
        if labels is not None:
            all_labels[i] = labels[i]
    return Board(areas, entry, exit_, present, all_kinds, step_count=step_count, labels=all_labels)


def empty_board(layout: IntersectionLayout | None = None) -> Board:
    layout = layout or default_layout()
    return from_intervals([], layout.area_ids)


def from_scenario(platoons: Sequence[Platoon], layout: IntersectionLayout | None = None) -> Board:
    """Forecast the initial board: one ``new`` row per platoon at full speed."""
    layout = layout or default_layout()
    if len(platoons) > N_NEW_MAX:
        raise BoardError(f"at most {N_NEW_MAX} platoons per board, got {len(platoons)}")
    rows = [{a: (t0, t1) for a, t0, t1 in project_occupancy(p, layout)} for p in platoons]
    return from_intervals(rows, layout.area_ids, labels=[f"p{p.id}" for p in platoons])


def clip_to_clock(b: Board, elapsed: float) -> list[dict]:
    """Per-row intervals after ``elapsed`` seconds: past cells dropped, partial ones truncated."""
    rows = []
    for i in range(b.n_rows):
        cells = {}
        for a, (t0, t1) in b.row_intervals(i).items():
            t0, t1 = t0 - elapsed, t1 - elapsed
            if t1 <= EPS:
                continue
            cells[a] = (max(t0, 0.0), t1)
        rows.append(cells)
    return rows


def overlay(residual: Board, fresh: Board, elapsed: float = 0.0) -> Board:
    """Stack a solved board (frozen) on top of a fresh one.

    ``elapsed`` moves the clock forward on the residual schedule first; rows
    that have fully crossed by then are dropped.
    """
    if conflicts(residual):
        raise BoardError("residual board must be conflict-free")
    if residual.areas != fresh.areas:
        raise BoardError("boards use different layouts")
    res_rows = [(residual.labels[i], cells) for i, cells in enumerate(clip_to_clock(residual, elapsed)) if cells]
    new_rows = [(fresh.labels[i], fresh.row_intervals(i)) for i in range(fresh.n_rows)
                if fresh.kinds[i] != RowKind.EMPTY]
    if len(res_rows) + len(new_rows) > N_MAX:
        raise BoardError(f"row capacity exceeded: {len(res_rows)} residual + {len(new_rows)} new > {N_MAX}")
    rows = [c for _, c in res_rows] + [c for _, c in new_rows]
    kinds = [RowKind.RESIDUAL] * len(res_rows) + [RowKind.NEW] * len(new_rows)
    labels = [f"r:{lab}" for lab, _ in res_rows] + [lab for lab, _ in new_rows]
    return from_intervals(rows, fresh.areas, kinds=kinds, labels=labels)


def _overlap_tensor(b: Board) -> np.ndarray:
    n = b.n_rows
    e, x, p = b.entry[:n], b.exit[:n], b.present[:n]
    return (
        (e[:, None, :] < x[None, :, :] - EPS)
        & (e[None, :, :] < x[:, None, :] - EPS)
        & p[:, None, :]
        & p[None, :, :]
    )


def conflicts(b: Board) -> list[tuple[str, int, int]]:
    """Every ``(area, i, j)`` with ``i < j`` whose intervals overlap with positive measure."""
    n = b.n_rows
    if n < 2:
        return []
    ov = _overlap_tensor(b)
    out = []
    for i, j, k in zip(*np.nonzero(ov)):
        if i < j:
            out.append((b.areas[k], int(i), int(j)))
    out.sort(key=lambda c: (c[1], c[2], b.areas.index(c[0])))
    return out


def has_conflict(b: Board) -> bool:
    hc = b._cache.get("has_conflict")
    if hc is None:
        n = b.n_rows
        if n < 2:
            hc = False
        else:
            ov = _overlap_tensor(b)
            iu = np.triu_indices(n, 1)
            hc = bool(ov[iu].any())
        b._cache["has_conflict"] = hc
    return hc


def legal_actions(b: Board, params: RewardParams = RewardParams(), max_moves: int = N_MOVES) -> np.ndarray:
    """Boolean mask of shape ``(N_MAX, N_MOVES)``."""
    mask = np.zeros((N_MAX, N_MOVES), dtype=bool)
    mx = b.row_max_exit()
    delays = MOVE_SECONDS * np.arange(1, N_MOVES + 1)
    for i, k in enumerate(b.kinds):
        if k != RowKind.NEW or not np.isfinite(mx[i]):
            continue
        mask[i] = mx[i] + delays <= params.t_max + EPS
    if max_moves < N_MOVES:
        mask[:, max_moves:] = False
    return mask


def apply(b: Board, act: Action, params: RewardParams = RewardParams()) -> Board:
    """Delay every cell of ``act.row`` by ``0.1 * act.moves`` seconds."""
    if not 0 <= act.row < N_MAX or not 1 <= act.moves <= N_MOVES:
        raise IllegalActionError(f"action out of range: {act}")
    if b.kinds[act.row] == RowKind.RESIDUAL:
        raise IllegalActionError(f"row {act.row} is residual and cannot be rescheduled")
    if not legal_actions(b, params)[act.row, act.moves - 1]:
        raise IllegalActionError(f"action {act} is masked on this board")
    return b.shifted(act.row, act.moves, count_step=True)


def apply_index(b: Board, index: int) -> Board:
    """Unchecked apply by flat action index, for callers that already hold the mask."""
    row, a = divmod(int(index), N_MOVES)
    return b.shifted(row, a + 1, count_step=True)


def evaluate(b: Board, params: RewardParams = RewardParams()) -> EpisodeOutcome | None:
    """Terminal outcome of the board, or ``None`` while play can continue.

    Checked in order: any exit past ``t_max`` (fail_time), step budget
    exceeded (fail_steps), no conflicts (solved).
    """
    t_cross = b.t_cross()
    if t_cross > params.t_max + EPS:
        return EpisodeOutcome(FAIL_TIME, t_cross, b.step_count, params.fail_time_value)
    if b.step_count > params.s_max:
        return EpisodeOutcome(FAIL_STEPS, t_cross, b.step_count, params.fail_step_value)
    if not has_conflict(b):
        return EpisodeOutcome(SOLVED, t_cross, b.step_count, crossing_reward(t_cross, b.step_count, params))
    return None


def dead_end_outcome(b: Board, params: RewardParams = RewardParams()) -> EpisodeOutcome:
    """Outcome for a conflicted board with no legal delay left."""
    return EpisodeOutcome(FAIL_TIME, b.t_cross(), b.step_count, params.fail_time_value)


def feature_dim(n_areas: int = 8) -> int:
    return 2 * N_MAX * n_areas + N_MAX


FEATURE_DIM = feature_dim(8)
ACTION_DIM = N_MAX * N_MOVES


def encode(b: Board, params: RewardParams = RewardParams()) -> np.ndarray:
    """Flat features: normalized ``(t_entry, t_exit)`` per cell, then one kind flag per row."""
    key = ("features", params.t_max)
    f = b._cache.get(key)
    if f is not None:
        return f
    m = b.n_areas
    cells = np.full((N_MAX, m, 2), -1.0)
    live = b.present & np.array([k != RowKind.EMPTY for k in b.kinds])[:, None]
    cells[..., 0] = np.where(live, b.entry / params.t_max, -1.0)
    cells[..., 1] = np.where(live, b.exit / params.t_max, -1.0)
    flags = np.array([ROW_FLAG[k] for k in b.kinds])
    f = np.concatenate([cells.ravel(), flags])
    f.flags.writeable = False
    b._cache[key] = f
    return f


def fingerprint(b: Board) -> str:
    """Canonical hash of the 0.1 s-quantized grid and row kinds."""
    q = np.where(b.present, np.round(b.entry / MOVE_SECONDS), -1).astype(np.int64)
    r = np.where(b.present, np.round(b.exit / MOVE_SECONDS), -1).astype(np.int64)
    h = hashlib.sha1()
    h.update(json.dumps(list(b.areas)).encode())
    h.update(bytes(k for k in b.kinds))
    h.update(q.tobytes())
    h.update(r.tobytes())
    return h.hexdigest()[:16]


def boards_to_json(boards: Iterable[Board]) -> list[dict]:
    return [b.to_dict() for b in boards]
