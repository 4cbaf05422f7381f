"""Input checks shared by the estimator wrappers and the command line."""

from __future__ import annotations

from pathlib import Path

from .board import Board, BoardError
from .policynet import CheckpointError, NetConfig, NetParams, load_checkpoint
from .scenario import Scenario


def check_boards(X, name: str = "X") -> list[Board]:
    """Accept boards or scenarios (a single one or a sequence) and return boards."""
    if isinstance(X, (Board, Scenario)):
        X = [X]
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"{name} must be a board, a scenario or a sequence of them") from None
    if not items:
        raise ValueError(f"{name} is empty")
    out = []
    for i, item in enumerate(items):
        if isinstance(item, Scenario):
            item = item.to_board()
        if not isinstance(item, Board):
            raise TypeError(f"{name}[{i}] is {type(item).__name__}, expected Board or Scenario")
        out.append(item)
    areas = {b.areas for b in out}
    if len(areas) > 1:
        raise BoardError(f"{name} mixes boards from different layouts")
    return out


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_probability(value, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_input_file(path, what: str = "input") -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def check_net(net, expect: NetConfig | None = None) -> NetParams:
    """A :class:`NetParams` or a checkpoint path; dimensions checked against ``expect``."""
    if isinstance(net, (str, Path)):
        return load_checkpoint(check_input_file(net, "checkpoint"), expect=expect)
    if not isinstance(net, NetParams):
        raise TypeError(f"expected NetParams or a checkpoint path, got {type(net).__name__}")
    if expect is not None:
        c = net.config
        if (c.input_dim, c.action_dim) != (expect.input_dim, expect.action_dim):
            raise CheckpointError(f"network dimensions {c.input_dim}->{c.action_dim} do not match "
                                  f"{expect.input_dim}->{expect.action_dim}")
    return net
