"""Command-line entry point: scenario generation, simulation, training, evaluation, metrics and plots.

Exit codes: 0 success, 2 configuration or user error, 3 runtime failure.
"""

from __future__ import annotations

import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_cap() -> str | None:
    """Map RIFT_SIM_THREADS onto the BLAS thread variables; returns an error message if malformed."""
    raw = os.environ.get("RIFT_SIM_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        return f"RIFT_SIM_THREADS must be a positive integer, got {raw!r}"
    if n < 1:
        return f"RIFT_SIM_THREADS must be a positive integer, got {raw!r}"
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    return None


_THREAD_ERROR = _apply_thread_cap()

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .env import TrafficEnv  # noqa: E402
from .metrics import EpisodeLog, compute_metrics  # noqa: E402
from .objectives import VARIANTS  # noqa: E402
from .policy import ScoringParams  # noqa: E402
from .reward import STYLES, style_config  # noqa: E402
from .trainer import TrainConfig, TrainingError, evaluate, run_training, training_scenarios  # noqa: E402
from .worldmap import MapError, Scenario, intersection_scenario  # noqa: E402

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

PLOT_SCHEMA = "riftsim-plot/1"


class UserError(Exception):
    """Bad input from the command line or a config file."""


# loading helpers --------------------------------------------------------------

def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"{p}: no such file")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UserError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UserError(f"{p}: expected a JSON object")
    return data


def load_scenarios(path) -> list[Scenario]:
    """A scenario JSON file, or a directory of them (sorted by name)."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.json"))
        if not files:
            raise UserError(f"{p}: no scenario files")
    elif p.is_file():
        files = [p]
    else:
        raise UserError(f"{p}: no such file or directory")
    try:
        return [Scenario.load(f) for f in files]
    except (MapError, ValueError) as exc:
        raise UserError(str(exc)) from None


def load_checkpoint(path) -> ScoringParams:
    data = _read_json(path)
    try:
        return ScoringParams.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise UserError(f"{path}: malformed checkpoint ({exc})") from None


def build_train_config(args) -> TrainConfig:
    d = _read_json(args.config) if args.config else {}
    if "seed" in d:
        raise UserError("put the seed on the command line (--seed), not in the config")
    if args.objective:
        d["objective"] = args.objective
    if args.style:
        d["style"] = args.style
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid training config: {exc}") from None


def _write_episode(log: EpisodeLog, out: Path, name: str) -> Path:
    path = out / f"episode_{name}.csv"
    log.write_csv(path)
    return path


def _episode_summary(log: EpisodeLog) -> dict:
    steps = np.unique(log["step"])
    return {
        "scenario": log.scenario_id,
        "steps": int(steps.size),
        "agents": len(log.agent_ids()),
        "cbvs": log.agent_ids("CBV"),
        "collision_rows": int(np.sum(log["collision_with"] >= 0)),
    }


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# commands ----------------------------------------------------------------------

def cmd_scenario(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    style = args.style or "normal"
    for k in range(args.count):
        sc = intersection_scenario(args.seed + k, n_bvs=args.bvs, style=style)
        sc.scenario_id = f"intersection_{args.seed + k}"
        sc.save(out / f"{sc.scenario_id}.json")
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenarios = load_scenarios(args.scenario)
    params = load_checkpoint(args.checkpoint) if args.checkpoint else None
    style = args.style or scenarios[0].style
    try:
        reward = style_config(style)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    episodes = []
    for sc in scenarios:
        rng = np.random.default_rng([args.seed, sc.seed]) if args.sample else None
        env = TrafficEnv(sc, params, reward, select_mode="sample" if args.sample else "argmax", rng=rng)
        log = env.run().log()
        _write_episode(log, out, sc.scenario_id)
        episodes.append(_episode_summary(log))
    _dump_json(out / "summary.json", {"seed": args.seed, "style": style, "sampled": bool(args.sample),
                                       "checkpoint": args.checkpoint is not None, "episodes": episodes})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    scenarios = load_scenarios(args.scenario) if args.scenario else None
    init = load_checkpoint(args.checkpoint) if args.checkpoint else None
    result = run_training(scenarios, cfg, seed=args.seed, out_dir=args.out, init=init)
    _dump_json(Path(args.out) / "train_config.json", {"seed": args.seed, **cfg.to_dict()})
    returns = ", ".join(f"{r:.3f}" for r in result.iteration_returns)
    print(f"iteration mean returns: [{returns}]")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = build_train_config(args)
    params = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if params is None:
        from .trainer import initial_params
        params = initial_params(cfg, args.seed)
    if args.scenario:
        scenarios = load_scenarios(args.scenario)
    else:
        scenarios = training_scenarios(args.seed, cfg)[: args.episodes]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logs = evaluate(params, scenarios, cfg)
    names = []
    for k, log in enumerate(logs):
        name = f"{k:03d}_{log.scenario_id}"
        _write_episode(log, out, name)
        names.append(name)
    compute_metrics(logs, names).write(out)
    return EXIT_OK


def cmd_metrics(args) -> int:
    src = Path(args.logs)
    if not src.is_dir():
        raise UserError(f"{src}: not a directory")
    files = sorted(src.glob("episode_*.csv"))
    if not files:
        raise UserError(f"{src}: no episode logs")
    try:
        logs = [EpisodeLog.read_csv(f) for f in files]
    except (ValueError, KeyError) as exc:
        raise UserError(f"unreadable episode log: {exc}") from None
    names = [f.stem[len("episode_"):] for f in files]
    compute_metrics(logs, names).write(args.out or src)
    return EXIT_OK


# plotting ---------------------------------------------------------------------

def histogram(values, bins: int = 20, value_range=None):
    """Counts and edges; an empty series yields no bars."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0)
    lo, hi = value_range if value_range is not None else (float(v.min()), float(v.max()))
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return counts, edges


def _num(x: float) -> str:
    return f"{x:.2f}"


def _svg_frame(title: str, xlabel: str, ylabel: str, w: int = 480, h: int = 320, pad: int = 48):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line class="axis" x1="{pad}" y1="{h - pad}" x2="{w - pad / 2}" y2="{h - pad}" stroke="black"/>',
        f'<line class="axis" x1="{pad}" y1="{pad / 2}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{w / 2}" y="{h - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{h / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {h / 2})">{ylabel}</text>',
    ]
    box = (pad, pad / 2, w - pad / 2, h - pad)
    return parts, box


def histogram_svg(counts, edges, title: str, xlabel: str) -> str:
    parts, (x0, y0, x1, y1) = _svg_frame(title, xlabel, "count")
    if len(counts):
        top = max(int(np.max(counts)), 1)
        bw = (x1 - x0) / len(counts)
        for i, c in enumerate(counts):
            bh = (y1 - y0) * c / top
            parts.append(f'<rect class="bar" x="{_num(x0 + i * bw)}" y="{_num(y1 - bh)}" width="{_num(bw)}" '
                         f'height="{_num(bh)}" fill="steelblue" data-count="{int(c)}"/>')
        parts.append(f'<text x="{x0}" y="{y1 + 14}" font-size="10" text-anchor="middle">{edges[0]:.3g}</text>')
        parts.append(f'<text x="{x1}" y="{y1 + 14}" font-size="10" text-anchor="middle">{edges[-1]:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def curve_svg(xs, ys, title: str, xlabel: str, ylabel: str) -> str:
    parts, (x0, y0, x1, y1) = _svg_frame(title, xlabel, ylabel)
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.size:
        xlo, xhi = float(xs.min()), float(xs.max())
        ylo, yhi = float(ys.min()), float(ys.max())
        xspan = xhi - xlo or 1.0
        yspan = yhi - ylo or 1.0
        px = x0 + (xs - xlo) / xspan * (x1 - x0)
        py = y1 - (ys - ylo) / yspan * (y1 - y0)
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in zip(px, py))
        parts.append(f'<polyline class="curve" points="{pts}" fill="none" stroke="darkred" stroke-width="2"/>')
        parts.append(f'<text x="{x0 - 4}" y="{y1}" font-size="10" text-anchor="end">{ylo:.3g}</text>')
        parts.append(f'<text x="{x0 - 4}" y="{y0 + 8}" font-size="10" text-anchor="end">{yhi:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write_sidecar(path: Path, header: tuple, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# schema={PLOT_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _write_histogram(out: Path, stem: str, values, title: str, xlabel: str) -> None:
    counts, edges = histogram(values)
    (out / f"{stem}.svg").write_text(histogram_svg(counts, edges, title, xlabel))
    rows = [(repr(float(edges[i])), repr(float(edges[i + 1])), int(c)) for i, c in enumerate(counts)]
    _write_sidecar(out / f"{stem}.csv", ("bin_lo", "bin_hi", "count"), rows)


def _read_stats(path: Path) -> list:
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise UserError(f"{path}:{n}: invalid JSON line ({exc})") from None
    return rows


def iteration_returns(stats: list) -> list[tuple[int, float]]:
    seen = {}
    for row in stats:
        try:
            seen.setdefault(int(row["iteration"]), float(row["mean_return"]))
        except (KeyError, TypeError, ValueError):
            raise UserError("training stats rows need 'iteration' and 'mean_return'") from None
    return sorted(seen.items())


def cmd_plot(args) -> int:
    speeds, accels, curve = [], [], []
    for raw in args.inputs:
        p = Path(raw)
        if p.is_dir():
            files = sorted(p.glob("episode_*.csv")) + sorted(p.glob("train_stats.jsonl"))
            if not files:
                raise UserError(f"{p}: nothing to plot")
        elif p.is_file():
            files = [p]
        else:
            raise UserError(f"{p}: no such file or directory")
        for f in files:
            if f.suffix == ".jsonl":
                curve.extend(iteration_returns(_read_stats(f)))
            elif f.suffix == ".csv":
                try:
                    log = EpisodeLog.read_csv(f)
                except (ValueError, KeyError) as exc:
                    raise UserError(f"{f}: {exc}") from None
                mask = log.role_mask(args.role) if args.role else np.ones(len(log), dtype=bool)
                speeds.extend(log["speed"][mask].tolist())
                accels.extend(log["accel"][mask].tolist())
            else:
                raise UserError(f"{f}: expected an episode CSV or a train_stats.jsonl file")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_histogram(out, "speed_hist", speeds, "Speed distribution", "speed [m/s]")
    _write_histogram(out, "accel_hist", accels, "Acceleration distribution", "acceleration [m/s^2]")
    xs = [c[0] for c in curve]
    ys = [c[1] for c in curve]
    (out / "train_return.svg").write_text(curve_svg(xs, ys, "Training return", "iteration", "mean return"))
    _write_sidecar(out / "train_return.csv", ("iteration", "mean_return"), [(x, repr(y)) for x, y in curve])
    return EXIT_OK


# parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riftsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--style", choices=sorted(STYLES))

    sp = sub.add_parser("scenario", help="write randomized four-way intersection scenarios")
    common(sp)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--bvs", type=int, default=6)
    sp.set_defaults(func=cmd_scenario)

    sp = sub.add_parser("simulate", help="run scenarios closed-loop and write episode logs")
    common(sp)
    sp.add_argument("--scenario", required=True, help="scenario JSON file or directory")
    sp.add_argument("--checkpoint", help="scoring-head checkpoint; uniform scorer if omitted")
    sp.add_argument("--sample", action="store_true", help="sample candidates instead of taking the argmax")
    sp.set_defaults(func=cmd_simulate)

    for name, func, hlp in (("train", cmd_train, "fine-tune the scoring head"),
                            ("evaluate", cmd_evaluate, "roll out a checkpoint and report metrics")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--config", help="JSON file with training config keys")
        sp.add_argument("--scenario", help="scenario JSON file or directory (default: generated intersections)")
        sp.add_argument("--objective", choices=VARIANTS)
        sp.add_argument("--checkpoint", help="initial (train) or evaluated (evaluate) parameters")
        if name == "evaluate":
            sp.add_argument("--episodes", type=int, default=8)
        sp.set_defaults(func=func)

    sp = sub.add_parser("metrics", help="compute the metric report for a directory of episode logs")
    sp.add_argument("logs")
    sp.add_argument("--out", help="output directory (default: the log directory)")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("plot", help="write SVG histograms and a training-return curve with CSV sidecars")
    sp.add_argument("inputs", nargs="+", help="episode CSVs, train_stats.jsonl files or directories")
    sp.add_argument("--out", required=True)
    sp.add_argument("--role", choices=("AV", "BV", "CBV"), help="restrict histograms to one role")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if _THREAD_ERROR:
        print(f"riftsim: {_THREAD_ERROR}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UserError as exc:
        print(f"riftsim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, RuntimeError, FloatingPointError, ArithmeticError) as exc:
        print(f"riftsim: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, MapError) as exc:
        print(f"riftsim: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
