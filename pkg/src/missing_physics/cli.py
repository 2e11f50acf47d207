"""Command-line entry point: ``missing-physics <command> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import campaign, expr, plant, symreg, ude
from .config import CampaignConfig, ConfigError, load_config
from .design import CandidateModel, DesignProblem, optimize_controls
from .ode import ControlProfile

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class InputError(ConfigError):
    pass


def _config(args) -> CampaignConfig:
    cfg = load_config(args.config) if args.config else CampaignConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "rounds", None) is not None:
        if args.rounds < 1:
            raise ConfigError("--rounds must be >= 1")
        cfg = cfg.with_overrides(n_experiments=args.rounds)
    return cfg


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _load_profile(path, cfg: CampaignConfig) -> ControlProfile:
    if path is None:
        return cfg.plant.zero_profile()
    d = _read_json(path)
    d = d.get("profile", d)
    p = cfg.plant
    try:
        return ControlProfile(np.asarray(d["coefficients"], float),
                              d.get("u_min", p.u_min), d.get("u_max", p.u_max), d.get("t_end", p.t_end))
    except (KeyError, ValueError) as exc:
        raise InputError(f"invalid profile in {path}: {exc}") from exc


def _load_records(paths):
    if not paths:
        raise InputError("at least one --data record is required")
    try:
        return [plant.ExperimentRecord.from_dict(_read_json(p)) for p in paths]
    except (KeyError, ValueError) as exc:
        raise InputError(f"invalid experiment record: {exc}") from exc


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    cfg = _config(args)
    prof = _load_profile(args.profile, cfg)
    rec = plant.run_experiment(cfg.plant, prof, cfg.seed)
    out = _out(args)
    (out / "experiment.json").write_text(rec.to_json())
    (out / "experiment.csv").write_text(rec.to_csv())
    print(f"wrote {out / 'experiment.json'}")


def cmd_train(args):
    cfg = _config(args)
    records = _load_records(args.data)
    net = ude.train(records, cfg.seed, settings=cfg.ude, constants=cfg.plant.known())
    out = _out(args)
    (out / "network.json").write_text(net.to_json())
    print(f"training loss {net.loss:.6g}; wrote {out / 'network.json'}")


def cmd_symreg(args):
    cfg = _config(args)
    records = _load_records(args.data)
    try:
        net = ude.NetworkParams.from_dict(_read_json(args.network))
    except (KeyError, ValueError) as exc:
        raise InputError(f"invalid network file: {exc}") from exc
    known = cfg.plant.known()
    data = ude.TrainingSet(records, known)
    inputs = []
    for rec in records:
        sol = ude.predict(net, known, rec.profile, data.grid, cfg.ude.tolerances)
        if not sol.ok:
            raise RuntimeError(f"network simulation failed: {sol.reason}")
        inputs.append(sol.states[:, 0])
    inputs = np.concatenate(inputs)
    hof = symreg.search(inputs, ude.network_eval(net, inputs), cfg.gp, cfg.seed)
    ranked = symreg.score_and_rank(hof, cfg.M)
    out = _out(args)
    (out / "hall_of_fame.json").write_text(hof.to_json())
    (out / "ranked.json").write_text(json.dumps([c.to_dict() for c in ranked], indent=2) + "\n")
    table = symreg.format_table(ranked)
    (out / "hall_of_fame.txt").write_text(table)
    print(table, end="")


def _load_ranked(path):
    d = _read_json(path)
    try:
        if isinstance(d, dict):
            if "final_ranked" in d:
                d = d["final_ranked"]
            else:
                return symreg.score_and_rank(symreg.HallOfFame.from_dict(d))
        return [symreg.Candidate.from_dict(c) for c in d]
    except (KeyError, ValueError) as exc:
        raise InputError(f"invalid candidate list in {path}: {exc}") from exc


def cmd_design(args):
    cfg = _config(args)
    ranked = _load_ranked(args.candidates)
    models = campaign.design_candidates(cfg, ranked)
    if len(models) < 2:
        raise InputError("need at least two usable candidate structures to design")
    p = cfg.plant
    problem = DesignProblem(models, p.known(), p.grid, p.u_min, p.u_max, cfg.ude.tolerances)
    result = optimize_controls(problem, seed=cfg.seed, settings=cfg.de)
    out = _out(args)
    (out / "design.json").write_text(result.to_json())
    (out / "design.csv").write_text(result.to_csv())
    print(f"criterion {result.objective:.6g}; wrote {out / 'design.json'}")


def cmd_campaign(args):
    cfg = _config(args)
    state = campaign.run_optimal_campaign(cfg, out_dir=_out(args))
    print(symreg.format_table(state.ranked), end="")
    hits = state.monod_hits()
    print(f"Monod form recovered: {'yes ' + str(hits[0][1]) if hits else 'no'}")


def cmd_baseline(args):
    cfg = _config(args)
    states = campaign.run_random_baseline(cfg, args.repeats, out_dir=_out(args))
    n = sum(bool(s.monod_hits()) for s in states)
    print(f"Monod form recovered in {n} of {len(states)} random campaigns")


def cmd_report(args):
    src = Path(args.out)
    if not (src / "campaign.json").exists():
        raise InputError(f"{src} does not contain a campaign")
    cfg = load_config(args.config) if args.config else load_config(src / "config.txt")
    written = report(src, cfg)
    print((src / "report" / "table.txt").read_text(), end="")
    print(f"wrote {len(written)} files under {src / 'report'}")


def report(src: Path, cfg: CampaignConfig) -> list:
    """Table-style summary plus per-round plot-ready CSVs."""
    dest = src / "report"
    dest.mkdir(exist_ok=True)
    summary = json.loads((src / "campaign.json").read_text())
    ranked = [symreg.Candidate.from_dict(c) for c in summary["final_ranked"]]
    written = [dest / "table.txt"]
    (dest / "table.txt").write_text(symreg.format_table(ranked))
    records = campaign.load_records(src)
    known = cfg.plant.known()
    grid = cfg.plant.grid
    mu_grid = np.linspace(0.0, cfg.plant.C_s_in / 2, 101)
    for i, rec in enumerate(records, 1):
        rd = campaign.round_dir(src, i)
        truth = plant.simulate(cfg.plant, rec.profile, cfg.ude.tolerances)
        cols = {"t": rec.measurement_times, "measured_Cs": rec.measured_Cs}
        if truth.ok:
            cols.update(true_Cs=truth.states[:, 0], true_Cx=truth.states[:, 1], true_V=truth.states[:, 2])
        net_file = rd / "network.json"
        net = ude.NetworkParams.from_json(net_file.read_text()) if net_file.exists() else None
        if net is not None:
            sol = ude.predict(net, known, rec.profile, grid, cfg.ude.tolerances)
            if sol.ok:
                cols.update(ude_Cs=sol.states[:, 0], ude_Cx=sol.states[:, 1])
        _write_columns(dest / f"round_{i:02d}_states.csv", cols)
        written.append(dest / f"round_{i:02d}_states.csv")
        mu_cols = {"C_s": mu_grid, "true_mu": plant.monod(mu_grid, cfg.plant.mu_max, cfg.plant.K_s)}
        if net is not None:
            mu_cols["network_mu"] = ude.network_eval(net, mu_grid)
            ranked_file = rd / "ranked.json"
            if ranked_file.exists():
                for j, c in enumerate(json.loads(ranked_file.read_text()), 1):
                    mu_cols[f"candidate_{j}"] = expr.evaluate(expr.parse(c["equation"]), mu_grid)
        _write_columns(dest / f"round_{i:02d}_mu.csv", mu_cols)
        written.append(dest / f"round_{i:02d}_mu.csv")
        design_file = rd / "design.csv"
        if design_file.exists():
            (dest / f"round_{i:02d}_design.csv").write_text(design_file.read_text())
            written.append(dest / f"round_{i:02d}_design.csv")
    return written


def _write_columns(path: Path, cols: dict):
    names = list(cols)
    rows = [",".join(names)]
    for k in range(len(cols[names[0]])):
        rows.append(",".join(repr(float(cols[n][k])) for n in names))
    path.write_text("\n".join(rows) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="missing-physics", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="out"):
        p.add_argument("--config", help="flat 'key = number' config file")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--out", default=out_default, help="output directory")
        return p

    p = common(sub.add_parser("simulate", help="run one experiment on the virtual reactor"))
    p.add_argument("--profile", help="JSON control profile (zero feed when omitted)")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("train", help="fit the network term to experiment records"))
    p.add_argument("--data", nargs="+", help="experiment.json files")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("symreg", help="distill a trained network into expressions"))
    p.add_argument("--network", required=True)
    p.add_argument("--data", nargs="+", help="experiment.json files")
    p.set_defaults(func=cmd_symreg)

    p = common(sub.add_parser("design", help="optimize the next feed profile"))
    p.add_argument("--candidates", required=True, help="ranked.json or hall_of_fame.json")
    p.set_defaults(func=cmd_design)

    p = common(sub.add_parser("campaign", help="run the full sequential design loop"))
    p.add_argument("--rounds", type=int, help="number of experiments (overrides config)")
    p.set_defaults(func=cmd_campaign)

    p = common(sub.add_parser("baseline", help="random-feed campaigns for comparison"))
    p.add_argument("--rounds", type=int)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_baseline)

    p = common(sub.add_parser("report", help="tables and plot-ready CSVs from a campaign"))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
