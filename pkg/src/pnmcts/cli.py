"""Command line: generate, train, solve, evaluate, simulate, report.

Every command writes ``manifest.json`` into its output directory with the
arguments, the seed and a SHA-256 over the inputs, so a run can be replayed
with ``pnmcts <argv from manifest>``.  The default output root is taken from
``PNMCTS_OUTPUT_ROOT`` (``./runs`` when unset).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import pickle
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import check_input_file
from .board import RewardParams
from .policynet import CheckpointError, NetConfig, init_params, load_checkpoint, save_checkpoint
from .scenario import load_scenarios, save_scenarios
from .search import SearchConfig, short_path_config
from .simulator import ExperimentSpec, run_experiment, sweep_specs
from .training import (
    CurriculumConfig,
    ScenarioConfig,
    TrainingState,
    evaluate_policy,
    fifo_board,
    fifo_schedule,
    generate_scenarios,
    make_busy_scenarios,
    run_curriculum,
    solve_board,
    split_scenarios,
)

logger = logging.getLogger("pnmcts")
OUTPUT_ROOT_ENV = "PNMCTS_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- manifest and files ----------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    argv: list
    args: dict
    config_paths: list
    seed: int | None
    input_hash: str
    output_dir: str
    version: str = __version__
    outputs: list = field(default_factory=list)

    def write(self, out: Path) -> Path:
        p = out / "manifest.json"
        p.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return p


def content_hash(paths, args: dict) -> str:
    """SHA-256 over the canonical arguments and the bytes of every input file."""
    h = hashlib.sha256()
    h.update(json.dumps(args, sort_keys=True, default=str).encode())
    for p in sorted(str(p) for p in paths):
        h.update(p.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _output_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable ({exc.strerror or exc})") from None
    return out


def _manifest(args, argv, command, out: Path, inputs, outputs, seed=None) -> RunManifest:
    plain = {k: v for k, v in vars(args).items() if k != "func"}
    m = RunManifest(command, list(argv), plain, [str(p) for p in inputs], seed,
                    content_hash(inputs, plain), str(out), outputs=[str(o) for o in outputs])
    m.write(out)
    return m


def write_csv(path: Path, rows: list[dict], header: list[str]) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in header})
    return path


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(round(v, 6))
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _range(text: str, cast=float) -> tuple:
    lo, _, hi = text.partition(":")
    return (cast(lo), cast(hi or lo))


def _load_net(path, required: bool):
    if path is None:
        if required:
            raise FileNotFoundError("a --checkpoint is required")
        return None
    return load_checkpoint(check_input_file(path, "checkpoint"), expect=NetConfig())


def _boards(path) -> list:
    return [s.to_board() for s in load_scenarios(check_input_file(path, "scenario"))]


# -- commands -----------------------------------------------------------------------------------

def cmd_generate(args, argv) -> Path:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    cfg = ScenarioConfig(seed=args.seed)
    inputs = []
    if args.config:
        inputs.append(check_input_file(args.config, "config"))
        data = json.loads(Path(args.config).read_text())
        cfg = ScenarioConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
        cfg = ScenarioConfig(**{**asdict(cfg), "seed": args.seed})
    if args.platoons:
        cfg = ScenarioConfig(**{**asdict(cfg), "platoons": _range(args.platoons, int)})
    n_train, n_test = _range(args.split, int) if args.split else (args.count - args.count // 5, args.count // 5)
    if n_train + n_test != args.count:
        raise UsageError(f"--split {args.split} does not add up to --count {args.count}")
    out = _output_dir(args, "generate")
    scenarios = generate_scenarios(cfg, args.count)
    train, test = split_scenarios(scenarios, n_train)
    meta = {"seed": args.seed, "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}}
    files = [out / "train.json", out / "test.json"]
    save_scenarios(train, files[0], {**meta, "split": "train"})
    save_scenarios(test, files[1], {**meta, "split": "test"})
    if args.busy:
        resolved = [fifo_board(s.to_board()) for s in train]
        if not resolved:
            raise UsageError("--busy needs a non-empty training split")
        busy_sc = make_busy_scenarios(test, resolved, seed=args.seed)
        files.append(out / "busy_test.json")
        save_scenarios(busy_sc, files[-1], {**meta, "split": "busy_test"})
    _manifest(args, argv, "generate", out, inputs, files, args.seed)
    print(f"wrote {len(train)} train / {len(test)} test scenarios to {out}")
    return out


def _curriculum_cfg(args) -> CurriculumConfig:
    search = SearchConfig(simulations=args.sims, rollout_depth=0)
    if args.phase == "full":
        clear, busy = args.iters - args.iters // 2, args.iters // 2
    else:
        clear = busy = args.iters
    return CurriculumConfig(phase=args.phase, clear_iterations=clear, busy_iterations=busy,
                            boards_per_round=args.boards_per_round, resample_prob=args.resample,
                            updates_per_round=args.updates, permute_rows=not args.no_permute,
                            workers=args.workers, seed=args.seed, clear_search=search, busy_search=search)


METRIC_FIELDS = ["iteration", "phase", "success_rate", "mean_reward", "mean_solve_time_s", "loss", "resampled"]


def cmd_train(args, argv) -> Path:
    if args.iters < 0:
        raise UsageError("--iters must be nonnegative")
    inputs = [check_input_file(args.scenarios, "scenario")]
    boards = _boards(args.scenarios)
    out = _output_dir(args, "train")
    if args.resume:
        inputs.append(check_input_file(args.resume, "resume state"))
        with open(args.resume, "rb") as f:
            state = pickle.load(f)
        if not isinstance(state, TrainingState):
            raise ValueError(f"{args.resume} does not hold a training state")
        start = state
    else:
        start = init_params(NetConfig(hidden_layers=args.layers, hidden_width=args.width), seed=args.seed)
    cfg = _curriculum_cfg(args)
    ckpt = out / "checkpoint.npz"

    def callback(m, state):
        if args.checkpoint_every and len(state.metrics) % args.checkpoint_every == 0:
            save_checkpoint(state.params, ckpt)

    if args.iters == 0:
        state = start if isinstance(start, TrainingState) else TrainingState(start)
    else:
        state = run_curriculum(start, boards, cfg, callback)
    save_checkpoint(state.params, ckpt)
    with open(out / "state.pkl", "wb") as f:
        pickle.dump(state, f)
    write_csv(out / "metrics.csv", [m.as_row() for m in state.metrics], METRIC_FIELDS)
    _manifest(args, argv, "train", out, inputs, [ckpt, out / "state.pkl", out / "metrics.csv"], args.seed)
    print(f"trained {len(state.metrics)} iterations; checkpoint {ckpt}")
    return out


def cmd_solve(args, argv) -> Path:
    inputs = [check_input_file(args.scenario, "scenario")]
    net = _load_net(args.checkpoint, required=False)
    if args.checkpoint:
        inputs.append(Path(args.checkpoint))
    boards = _boards(args.scenario)
    if not 0 <= args.index < len(boards):
        raise UsageError(f"--index {args.index} out of range for {len(boards)} boards")
    b = boards[args.index]
    out = _output_dir(args, "solve")
    tr = solve_board(b, net, short_path_config(simulations=args.sims), seed=args.seed)
    doc = {"outcome": asdict(tr.outcome), "trajectory": tr.to_dict(),
           "delays_s": {b.labels[i]: round(d, 3) for i, d in enumerate(_delays(tr)) if b.kinds[i] == 1},
           "board": tr.final_board().dump()}
    (out / "solution.json").write_text(json.dumps(doc, indent=1))
    _manifest(args, argv, "solve", out, inputs, [out / "solution.json"], args.seed)
    print(f"{tr.outcome.status} t_cross={tr.outcome.t_cross:.2f}s steps={tr.outcome.steps} reward={tr.outcome.reward:.4f}")
    return out


def _delays(tr):
    f = tr.final_board()
    return [0.1 * (m - m0) for m, m0 in zip(f.moves, tr.initial.moves)]


COMPARE_FIELDS = ["board", "fingerprint", "fifo_status", "fifo_t_cross", "pnmcts_status", "pnmcts_t_cross",
                  "pnmcts_steps", "pnmcts_reward", "reduction_pct", "wall_time_s"]


def cmd_evaluate(args, argv) -> Path:
    inputs = [check_input_file(args.boards, "boards")]
    net = None
    if args.checkpoint:
        net = _load_net(args.checkpoint, required=True)
        inputs.append(Path(args.checkpoint))
    boards = _boards(args.boards)
    out = _output_dir(args, "evaluate")
    reward = RewardParams()
    report = None
    if net is not None:
        report = evaluate_policy(net, boards, args.mode, short_path_config(simulations=args.sims), reward, args.seed)
    rows, reductions = [], []
    for i, b in enumerate(boards):
        f = fifo_schedule(b, reward)
        row = {"board": i, "fingerprint": report.results[i].fingerprint if report else "",
               "fifo_status": f.status, "fifo_t_cross": f.t_cross}
        if report is not None:
            r = report.results[i]
            row.update(pnmcts_status=r.status, pnmcts_t_cross=r.t_cross, pnmcts_steps=r.steps,
                       pnmcts_reward=r.reward, wall_time_s=r.wall_time)
            if r.solved and f.solved:
                red = 100.0 * (f.t_cross - r.t_cross) / f.t_cross
                row["reduction_pct"] = red
                reductions.append(red)
        rows.append(row)
    header = COMPARE_FIELDS if report is not None else COMPARE_FIELDS[:4]
    write_csv(out / "comparison.csv", rows, header)
    summary = {"boards": len(boards), "fifo_solved": sum(r["fifo_status"] == "solved" for r in rows),
               "fifo_mean_t_cross": float(np.mean([r["fifo_t_cross"] for r in rows]))}
    if report is not None:
        summary.update(report.summary())
        summary["mean_reduction_pct"] = float(np.mean(reductions)) if reductions else None
        summary["paired_boards"] = len(reductions)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    _manifest(args, argv, "evaluate", out, inputs, [out / "comparison.csv", out / "summary.json"], args.seed)
    print(json.dumps(summary))
    return out


def load_experiments(path) -> list[ExperimentSpec]:
    """An experiment file holds one spec, ``{"experiments": [...]}`` or ``{"sweep": {...}}``."""
    doc = json.loads(Path(path).read_text())
    if "sweep" in doc:
        sw = dict(doc["sweep"])
        base = ExperimentSpec.from_dict(sw.pop("base", {}))
        counts = tuple(sw.pop("agent_counts", (0, 1, 3, 5, 7, 9)))
        order = sw.pop("order", None)
        if sw:
            raise ValueError(f"unknown sweep fields: {sorted(sw)}")
        return sweep_specs(base, counts, order)
    if "experiments" in doc:
        return [ExperimentSpec.from_dict(d) for d in doc["experiments"]]
    return [ExperimentSpec.from_dict(doc)]


RESULT_FIELDS = ["spec", "seed", "ATT", "TT", "injected", "in_network", "violations", "searches", "fallbacks"]


def cmd_simulate(args, argv) -> Path:
    inputs = [check_input_file(args.spec, "experiment spec")]
    specs = load_experiments(args.spec)
    needs_net = any(s.uses_agents for s in specs)
    if needs_net and not args.checkpoint:
        raise FileNotFoundError("experiment has agent intersections but no --checkpoint was given")
    net = _load_net(args.checkpoint, required=needs_net) if needs_net else None
    if args.checkpoint:
        inputs.append(Path(args.checkpoint))
    out = _output_dir(args, "simulate")
    rows, links = [], []
    for k, spec in enumerate(specs):
        if not spec.name:
            spec = type(spec).from_dict({**spec.to_dict(), "name": f"experiment{k + 1}"})
        res = run_experiment(spec, net)
        rows.append(res.row())
        links += [{"spec": res.name, "link": lid, "mean_travel_time_s": t} for lid, t in sorted(res.link_times.items())]
        logger.info("%s ATT=%s TT=%d (%.1fs)", res.name, res.att, res.tt, res.wall_time)
    write_csv(out / "results.csv", rows, RESULT_FIELDS)
    write_csv(out / "links.csv", links, ["spec", "link", "mean_travel_time_s"])
    _manifest(args, argv, "simulate", out, inputs, [out / "results.csv", out / "links.csv"],
              specs[0].seed if specs else None)
    for r in rows:
        print(f"{r['spec']}: ATT={r['ATT']} TT={r['TT']} violations={r['violations']}")
    return out


def cmd_report(args, argv) -> Path:
    run = Path(args.run)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: {run}")
    lines = []
    found = []
    for name in ("metrics.csv", "comparison.csv", "results.csv"):
        p = run / name
        if p.exists():
            found.append(p)
            lines += _summarize(name, read_csv(p))
    if not found:
        raise FileNotFoundError(f"no metrics.csv, comparison.csv or results.csv in {run}")
    out = _output_dir(args, "report") if args.out else run
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    outputs = [out / "report.txt"]
    if args.plot:
        outputs += _plot(found, out)
    _manifest(args, argv, "report", out, found, outputs)
    print("\n".join(lines))
    return out


def _col(rows, key):
    return [float(r[key]) for r in rows if r.get(key) not in (None, "")]


def _summarize(name, rows) -> list[str]:
    if name == "metrics.csv":
        sr = _col(rows, "success_rate")
        tail = sr[-50:]
        return [f"training: {len(rows)} iterations, final 50-iteration success rate {np.mean(tail):.3f}"
                if tail else "training: no iterations"]
    if name == "comparison.csv":
        red = _col(rows, "reduction_pct")
        solved = sum(r.get("pnmcts_status") == "solved" for r in rows)
        line = f"evaluation: {len(rows)} boards, fifo mean t_cross {np.mean(_col(rows, 'fifo_t_cross')):.2f}s"
        if "pnmcts_status" in rows[0]:
            line += f", pnmcts solved {solved}"
            if red:
                line += f", mean reduction {np.mean(red):.1f}% over {len(red)} paired boards"
        return [line]
    return [f"simulation {r['spec']}: ATT={r['ATT']} TT={r['TT']}" for r in rows]


def _plot(paths, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made = []
    for p in paths:
        rows = read_csv(p)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        if p.name == "metrics.csv":
            ax.plot(_col(rows, "iteration"), _col(rows, "success_rate"))
            ax.set_xlabel("iteration")
            ax.set_ylabel("success rate")
        elif p.name == "comparison.csv":
            x = np.arange(len(rows))
            ax.bar(x - 0.2, [float(r["fifo_t_cross"]) for r in rows], 0.4, label="FIFO")
            if "pnmcts_t_cross" in rows[0]:
                ax.bar(x + 0.2, [float(r["pnmcts_t_cross"] or "nan") for r in rows], 0.4, label="PNMCTS")
            ax.set_xlabel("board")
            ax.set_ylabel("crossing time (s)")
            ax.legend()
        else:
            ax.plot([r["spec"] for r in rows], [float(r["ATT"] or "nan") for r in rows], marker="o")
            ax.set_ylabel("ATT (s)")
        fig.tight_layout()
        target = out / (p.stem + ".png")
        fig.savefig(target)
        plt.close(fig)
        made.append(target)
    return made


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pnmcts", description="Platoon scheduling at unsignalized intersections.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample conflicted scenarios and split them")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", help="TRAIN:TEST sizes (default 80/20)")
    g.add_argument("--platoons", help="platoon count range LO:HI, e.g. 1:4 for desk scale")
    g.add_argument("--config", help="JSON file with ScenarioConfig fields")
    g.add_argument("--busy", action="store_true", help="also write busy overlays of the test split")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="curriculum training")
    t.add_argument("--scenarios", required=True)
    t.add_argument("--phase", choices=("clear", "busy", "full"), default="full")
    t.add_argument("--iters", type=int, default=200)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--sims", type=int, default=50)
    t.add_argument("--boards-per-round", type=int, default=8)
    t.add_argument("--resample", type=float, default=0.25)
    t.add_argument("--updates", type=int, default=1, help="optimizer steps per round")
    t.add_argument("--no-permute", action="store_true", help="disable row-permutation augmentation")
    t.add_argument("--layers", type=int, default=10)
    t.add_argument("--width", type=int, default=512)
    t.add_argument("--checkpoint-every", type=int, default=25)
    t.add_argument("--resume", help="state.pkl of an earlier run")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="schedule one board")
    s.add_argument("--scenario", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--checkpoint")
    s.add_argument("--sims", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("evaluate", help="success rate and FIFO comparison")
    e.add_argument("--boards", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--mode", choices=("net_only", "short_path_mcts"), default="short_path_mcts")
    e.add_argument("--baseline", choices=("fifo",), default="fifo")
    e.add_argument("--sims", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("simulate", help="run traffic experiments")
    m.add_argument("--spec", required=True)
    m.add_argument("--checkpoint")
    m.add_argument("--out")
    m.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="summarize the CSVs of a run directory")
    r.add_argument("--run", required=True)
    r.add_argument("--plot", action="store_true", help="also render PNG figures")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args, argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, FileNotFoundError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
