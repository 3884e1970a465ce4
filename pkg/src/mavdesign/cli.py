"""Command-line front end.

``mavdesign <command> --config run.yaml [--out DIR] [--seed N] [--threads N]
[--strategy cobyla|neldermead]`` with commands ``project``, ``optimize``,
``verify``, ``simulate`` and ``ed``. Tables go to stdout; CSV and YAML
artifacts go to the output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .artifacts import atomic_write, csv_text, metadata_lines
from .config import ConfigError, RunConfig
from .core import ModelKind
from .criterion import verify_optimality
from .models import TargetNotAttained, ed_alpha
from .optimizer import optimize
from .projection import default_start, project
from .simulate import mse_study

log = logging.getLogger("mavdesign")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _meta(cfg: RunConfig, seed=None, **extra) -> dict:
    meta = {"config_version": cfg.version}
    if seed is not None:
        meta["seed"] = seed
    meta.update(extra)
    return meta


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def _print_table(columns, rows, out=sys.stdout) -> None:
    cells = [list(map(str, columns))] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    for row in cells:
        out.write("  ".join(c.rjust(w) for c, w in zip(row, widths)) + "\n")


def cmd_project(cfg: RunConfig, args) -> int:
    """KL projection of every prior atom onto every candidate under the design."""
    if cfg.design is None:
        raise ConfigError("project needs a 'design' section")
    space = cfg.design_space()
    design = cfg.design.design(space)
    target = cfg.target()
    prior = cfg.prior()
    columns = ("truth", "candidate", "theta_star", "kl", "ed", "converged")
    rows = []
    status = EXIT_OK
    for i, g in enumerate(prior.atoms):
        for c in cfg.candidate_specs():
            start = c.start if c.start is not None else default_start(c.kind, space)
            ident = f"atom {i} ({g.name}) -> {c.name}"
            try:
                p = project(g, c.kind, start, design, space, c.bounds)
            except (ArithmeticError, ValueError) as exc:
                raise RuntimeError(f"projection failed for {ident}: {exc}") from exc
            try:
                ed = ed_alpha(c.kind, p.theta_star[1:], target)
            except TargetNotAttained:
                ed = float("nan")
            if not p.converged:
                log.warning("projection did not converge for %s", ident)
                status = EXIT_FAILED
            theta = " ".join(f"{v:.10g}" for v in p.theta_star)
            rows.append((g.name, c.name, theta, p.kl_value, ed, int(p.converged)))
    _print_table(columns, rows)
    atomic_write(Path(args.out) / "projections.csv", csv_text(columns, [tuple(map(_fmt, r)) for r in rows], _meta(cfg)))
    return status


def _write_sensitivity(cfg, report, out_dir, seed=None):
    atomic_write(
        Path(out_dir) / "sensitivity.csv",
        _header(cfg, seed, criterion=f"{report.criterion:.12g}", tolerance=f"{report.tolerance:.6g}") + report.to_csv(),
    )


def _header(cfg, seed=None, **extra) -> str:
    return metadata_lines(_meta(cfg, seed, **extra))


def cmd_optimize(cfg: RunConfig, args) -> int:
    ocfg = cfg.optimizer_config(seed=args.seed, strategy=args.strategy)
    res = optimize(cfg.context(), ocfg)
    d = res.design
    _print_table(("x", "weight"), list(zip(d.points.tolist(), d.weights.tolist())))
    print(f"criterion {res.value:.10g}  evals {res.evals}  max_violation {res.verified.max_violation:.3e}"
          f"  tolerance {res.verified.tolerance:.3e}")
    doc = {
        "design": d.to_dict(),
        "criterion": float(res.value),
        "evals": int(res.evals),
        "converged": bool(res.converged),
        "seed": ocfg.seed,
        "strategy": ocfg.strategy,
        "k_values": {int(k): float(v) for k, v in res.k_values.items()},
    }
    atomic_write(Path(args.out) / "design.yaml", yaml.safe_dump(doc, sort_keys=False))
    _write_sensitivity(cfg, res.verified, args.out, ocfg.seed)
    if not res.converged:
        log.warning("optimizer reported non-convergence; best design returned")
    return EXIT_OK if res.verified.satisfied else EXIT_FAILED


def cmd_verify(cfg: RunConfig, args) -> int:
    if cfg.design is None:
        raise ConfigError("verify needs a 'design' section")
    report = verify_optimality(cfg.context(), cfg.design.design(cfg.design_space()), cfg.optimizer_config().grid_step)
    print(f"criterion {report.criterion:.10g}  max_violation {report.max_violation:.3e}  "
          f"support {max(report.support_equalities):.3e}  tolerance {report.tolerance:.3e}")
    _write_sensitivity(cfg, report, args.out)
    return EXIT_OK if report.satisfied else EXIT_FAILED


def cmd_simulate(cfg: RunConfig, args) -> int:
    sim = cfg.simulation
    if not sim.truths or not sim.designs:
        raise ConfigError("simulate needs simulation.truths and simulation.designs")
    seed = sim.seed if args.seed is None else args.seed
    space = cfg.design_space()
    truths = {}
    for t in sim.truths:
        m = t.model()
        truths[m.label or m.kind.value] = m
    designs = {name: ds.design(space) for name, ds in sim.designs}
    report = mse_study(truths, cfg.candidate_specs(), designs, sim.n_list, sim.reps, seed,
                       cfg.target(), sim.schemes, sim.scale, args.threads)
    _print_table(("truth", "design", "n", "estimator", "mse", "bias2", "var", "reps", "excluded"),
                 [(r.truth, r.design, r.n, r.estimator, r.mse, r.bias2, r.var, r.reps, r.excluded) for r in report.rows])
    report.metadata = {"config_version": cfg.version, **report.metadata}
    atomic_write(Path(args.out) / "mse.csv", report.to_csv())
    return EXIT_OK


def cmd_ed(cfg: RunConfig, args) -> int:
    target = cfg.target()
    rows = []
    models = [("prior", m) for m in (cfg.prior().atoms if (cfg.atoms or cfg.grids) else ())]
    models += [("truth", t.model()) for t in cfg.simulation.truths]
    for c in cfg.candidates:
        if c.start is not None:
            try:
                ed = ed_alpha(ModelKind.parse(c.kind), c.start, target)
            except TargetNotAttained:
                ed = float("nan")
            rows.append(("candidate", c.label or c.kind, " ".join(_fmt(v) for v in c.start), ed))
    for role, m in models:
        try:
            ed = ed_alpha(m.kind, m.vartheta, target)
        except TargetNotAttained:
            ed = float("nan")
        rows.append((role, m.name, " ".join(_fmt(float(v)) for v in m.vartheta), ed))
    columns = ("role", "model", "params", "ed")
    _print_table(columns, rows)
    atomic_write(Path(args.out) / "ed.csv", csv_text(columns, [tuple(map(_fmt, r)) for r in rows], _meta(cfg)))
    return EXIT_OK


COMMANDS = {
    "project": cmd_project,
    "optimize": cmd_optimize,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "ed": cmd_ed,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mavdesign", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the optimizer/simulation seed")
    p.add_argument("--out", default=None, help="output directory (default: config output.dir)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for simulations")
    p.add_argument("--strategy", choices=("cobyla", "neldermead"), default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config)
    except (OSError, ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out is None:
        args.out = cfg.output_dir
    if args.threads < 1:
        print("--threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
