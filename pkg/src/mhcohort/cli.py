"""Command-line front end.

Subcommands: ``simulate``, ``sample``, ``estimate``, ``baseline``, ``are``,
``mc`` and ``check``. Options may come from a YAML file given with
``--config``; flags on the command line override file values.

Exit codes: 0 success, 1 usage, 2 I/O, 3 schema, 4 numerical degeneracy or a
failed check.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np
import yaml

from . import asymptotics as asy
from .baseline import baseline_variance, write_baseline_csv
from .cohort import LevelSet, build_cohort, cohort_records, read_event_csv, risk_set, write_event_csv
from .designs import DesignSpec, enumerate_design, read_sampled_csv, sample_cohort, write_sampled_csv
from .errors import CohortError, DegenerateEstimateError, DesignError, MHCohortError
from .estimator import estimate, estimate_stratified
from .montecarlo import ScenarioSpec, run_mc, simulate_cohort

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SCHEMA, EXIT_DEGENERATE = 0, 1, 2, 3, 4
COMMANDS = ("simulate", "sample", "estimate", "baseline", "are", "mc", "check")
STOCHASTIC = ("simulate", "mc")


class UsageError(Exception):
    pass


class ConfigError(MHCohortError, ValueError):
    """A configuration violates the schema."""


@dataclass
class RunConfig:
    """Validated options for one command."""

    command: str
    events: str | None = None
    sampled: str | None = None
    out: str | None = None
    svg: str | None = None
    design: str = "full"
    m: int | None = None
    m_per_stratum: list | None = None
    clamp: bool = False
    alphas: list = field(default_factory=lambda: [0.0, 1.0])
    labels: list | None = None
    c: str = "equal"
    variance: str = "optional"
    stratified: bool = False
    n: int | None = None
    phi: float | None = None
    phi0: float = 1.0
    f1: float = 0.2
    f: list | None = None
    tau: float | None = None
    failure_fraction: float | None = None
    lambda0: float = 1.0
    censor_rate: float = 0.0
    delta: float | None = None
    gamma: float | None = None
    reps: int = 1
    rep: int = 0
    seed: int | None = None
    workers: int | None = None
    grid: str = "-3:3:0.1"
    baseline_times: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if data.get("command") not in COMMANDS:
            raise ConfigError(f"command must be one of {', '.join(COMMANDS)}")
        clean = {k: v for k, v in data.items() if v is not None}
        try:
            cfg = cls(**clean)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg._coerce()
        cfg.validate()
        return cfg

    def _coerce(self):
        try:
            for name in ("m", "n", "reps", "rep", "seed", "workers"):
                v = getattr(self, name)
                if v is not None:
                    if isinstance(v, bool) or float(v) != int(v):
                        raise ValueError(f"{name} must be an integer")
                    setattr(self, name, int(v))
            for name in ("phi", "phi0", "f1", "tau", "failure_fraction", "lambda0", "censor_rate", "delta", "gamma"):
                v = getattr(self, name)
                if v is not None:
                    if isinstance(v, bool):
                        raise ValueError(f"{name} must be a number")
                    setattr(self, name, float(v))
            self.alphas = [float(a) for a in _as_list(self.alphas)]
            if self.f is not None:
                self.f = [float(x) for x in _as_list(self.f)]
            if self.m_per_stratum is not None:
                self.m_per_stratum = [int(x) for x in _as_list(self.m_per_stratum)]
            if self.labels is not None:
                self.labels = [str(x) for x in _as_list(self.labels)]
            self.baseline_times = [float(x) for x in _as_list(self.baseline_times)]
            for name in ("clamp", "stratified"):
                if not isinstance(getattr(self, name), bool):
                    raise ValueError(f"{name} must be true or false")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def validate(self):
        if self.command in STOCHASTIC and self.seed is None:
            raise ConfigError(f"{self.command} requires a seed")
        if self.command == "sample" and self.design != "full" and self.seed is None:
            raise ConfigError("sampling with a random design requires a seed")
        if self.command in ("estimate", "baseline") and self.events and self.design != "full" and self.seed is None:
            raise ConfigError("sampling with a random design requires a seed")
        if self.c not in ("equal", "optimal"):
            raise ConfigError("c must be 'equal' or 'optimal'")
        if self.variance not in ("optional", "model"):
            raise ConfigError("variance must be 'optional' or 'model'")
        paths = [p for p in (self.events, self.sampled, self.out, self.svg) if p]
        if len(paths) != len(set(paths)):
            raise ConfigError("input and output paths must be distinct")
        if self.command == "sample" and not (self.events and self.out):
            raise ConfigError("sample needs --events and --out")
        if self.command in ("estimate", "baseline") and not (self.events or self.sampled):
            raise ConfigError(f"{self.command} needs --events or --sampled")
        if self.command == "simulate" and not self.out:
            raise ConfigError("simulate needs --out")
        if self.command in ("simulate", "mc") and self.tau is None and self.failure_fraction is None:
            raise ConfigError("give tau or failure_fraction")
        try:
            self.design_spec()
            self.level_set()
        except (DesignError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def design_spec(self) -> DesignSpec:
        return DesignSpec(self.design, self.m, None if self.m_per_stratum is None else tuple(self.m_per_stratum),
                          self.clamp)

    def level_set(self) -> LevelSet:
        return LevelSet(tuple(self.alphas), None if self.labels is None else tuple(self.labels))

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


def _as_list(v):
    if isinstance(v, str):
        return [x for x in v.replace(",", " ").split() if x]
    if isinstance(v, (int, float)):
        return [v]
    return list(v)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config, apply ``overrides`` and validate."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = {k.replace("-", "_"): v for k, v in data.items()}
    data.update(overrides or {})
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = _Parser(add_help=False, argument_default=S)
    common.add_argument("--config", help="YAML file with default options")
    common.add_argument("--out", help="output path (stdout for JSON when omitted)")
    common.add_argument("--alphas", help="exposure scores, e.g. 0,1,2")
    common.add_argument("--labels", help="level labels used in event files")
    common.add_argument("--seed", type=int)

    design = _Parser(add_help=False, argument_default=S)
    design.add_argument("--design", choices=["full", "srs", "matching", "counter_matching"])
    design.add_argument("--m", type=int)
    design.add_argument("--m-per-stratum", dest="m_per_stratum")
    design.add_argument("--clamp", action="store_true")

    est = _Parser(add_help=False, argument_default=S)
    est.add_argument("--c", choices=["equal", "optimal"])
    est.add_argument("--variance", choices=["optional", "model"])
    est.add_argument("--n", type=int, help="cohort size")

    pop = _Parser(add_help=False, argument_default=S)
    pop.add_argument("--phi0", type=float)
    pop.add_argument("--f1", type=float)
    pop.add_argument("--f", help="level frequencies, e.g. 0.6,0.3,0.1")
    pop.add_argument("--tau", type=float)
    pop.add_argument("--failure-fraction", dest="failure_fraction", type=float)
    pop.add_argument("--lambda0", type=float)
    pop.add_argument("--censor-rate", dest="censor_rate", type=float)
    pop.add_argument("--delta", type=float, help="surrogate sensitivity")
    pop.add_argument("--gamma", type=float, help="surrogate specificity")

    p = _Parser(prog="mhcohort", description="Mantel-Haenszel estimation for sampled cohorts.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    s = sub.add_parser("simulate", parents=[common, design, pop], help="simulate a cohort event file")
    s.add_argument("--n", type=int, default=S)
    s.add_argument("--rep", type=int, default=S)
    s = sub.add_parser("sample", parents=[common, design], help="sample risk sets at each failure")
    s.add_argument("--events", default=S)
    s = sub.add_parser("estimate", parents=[common, design, est], help="estimate the rate ratio")
    s.add_argument("--events", default=S)
    s.add_argument("--sampled", default=S)
    s.add_argument("--stratified", action="store_true", default=S)
    s = sub.add_parser("baseline", parents=[common, design, est], help="cumulative baseline hazard")
    s.add_argument("--events", default=S)
    s.add_argument("--sampled", default=S)
    s.add_argument("--phi", type=float, default=S)
    s = sub.add_parser("are", parents=[common, design, pop], help="efficiency relative to partial likelihood")
    s.add_argument("--grid", default=S, help="lo:hi:step on the log rate-ratio scale")
    s.add_argument("--svg", default=S)
    s = sub.add_parser("mc", parents=[common, design, est, pop], help="Monte Carlo experiment")
    s.add_argument("--reps", type=int, default=S)
    s.add_argument("--workers", type=int, default=S)
    s.add_argument("--baseline-times", dest="baseline_times", default=S)
    sub.add_parser("check", parents=[common], help="verify design identities by enumeration")
    return p


NEGATIVE_OK = ("--grid", "--alphas", "--baseline-times")


def _join_values(argv):
    """Attach values such as ``-3:3:0.1`` that argparse would read as flags."""
    out, i = [], 0
    while i < len(argv):
        if argv[i] in NEGATIVE_OK and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def _config_from_argv(argv) -> RunConfig:
    ns = vars(_parser().parse_args(_join_values(argv)))
    if not ns.get("command"):
        raise UsageError("a subcommand is required")
    path = ns.pop("config", None)
    if path is not None:
        return load_config(path, ns)
    return RunConfig.from_dict(ns)


# --------------------------------------------------------------------------
# commands


def _emit_json(payload: dict, out: str | None):
    text = json.dumps(payload, indent=2) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _population(cfg: RunConfig, tau: float) -> asy.PopulationModel:
    alphas = tuple(cfg.alphas)
    if cfg.delta is not None or cfg.gamma is not None:
        model = asy.SensSpecModel(cfg.f1, cfg.delta if cfg.delta is not None else 1.0,
                                  cfg.gamma if cfg.gamma is not None else 1.0)
        if alphas != (0.0, 1.0):
            raise ConfigError("surrogate strata need exposure scores 0,1")
        return asy.cm_population(model, 1.0, cfg.lambda0, tau)
    f = cfg.f if cfg.f is not None else [1 - cfg.f1, cfg.f1]
    if len(f) != len(alphas):
        raise ConfigError("one frequency per level is required")
    return asy.PopulationModel.constant(f, 1.0, cfg.lambda0, tau, alphas)


def _tau(cfg: RunConfig) -> float:
    if cfg.tau is not None:
        return cfg.tau
    f = cfg.f if cfg.f is not None else [1 - cfg.f1, cfg.f1]
    return asy.tau_for_failure_fraction(cfg.failure_fraction, f, cfg.phi0, cfg.lambda0, cfg.alphas)


def _scenario(cfg: RunConfig) -> ScenarioSpec:
    if cfg.n is None:
        raise ConfigError("n (cohort size) is required")
    pop = _population(cfg, _tau(cfg))
    return ScenarioSpec(cfg.n, cfg.phi0, pop, cfg.design_spec(), cfg.reps, cfg.seed, cfg.level_set(),
                        cfg.censor_rate, cfg.c, cfg.variance, tuple(cfg.baseline_times))


def _sampled(cfg: RunConfig):
    levels = cfg.level_set()
    if cfg.sampled:
        return read_sampled_csv(cfg.sampled), levels
    cohort = build_cohort(read_event_csv(cfg.events), levels)
    return sample_cohort(cohort, cfg.design_spec(), cfg.seed, cfg.rep), levels


def cmd_simulate(cfg: RunConfig) -> int:
    cohort = simulate_cohort(_scenario(cfg), cfg.rep)
    write_event_csv(cfg.out, cohort_records(cohort))
    return EXIT_OK


def cmd_sample(cfg: RunConfig) -> int:
    cohort = build_cohort(read_event_csv(cfg.events), cfg.level_set())
    write_sampled_csv(cfg.out, sample_cohort(cohort, cfg.design_spec(), cfg.seed, cfg.rep))
    return EXIT_OK


def cmd_estimate(cfg: RunConfig) -> int:
    sampled, levels = _sampled(cfg)
    if not sampled:
        raise DegenerateEstimateError("no failures in the input")
    if cfg.stratified:
        result = estimate_stratified(sampled, levels, cfg.c, cfg.variance, cfg.n)
    else:
        result = estimate(sampled, levels, cfg.c, cfg.variance, cfg.n)
    _emit_json(result.to_dict(), cfg.out)
    return EXIT_DEGENERATE if result.degenerate else EXIT_OK


def cmd_baseline(cfg: RunConfig) -> int:
    sampled, levels = _sampled(cfg)
    if not sampled:
        raise DegenerateEstimateError("no failures in the input")
    result = estimate(sampled, levels, cfg.c, cfg.variance, cfg.n)
    phi = cfg.phi if cfg.phi is not None else result.phi_hat
    if not phi > 0:
        raise DegenerateEstimateError("no usable rate-ratio estimate for the baseline")
    report = baseline_variance(sampled, phi, result.sigma2, levels, result.n)
    if cfg.out:
        write_baseline_csv(cfg.out, report)
    else:
        sys.stdout.write("t,lambda_hat,omega2_hat,B_hat,se_lambda\n")
        for row in report.table():
            sys.stdout.write(",".join(repr(float(x)) for x in row) + "\n")
    return EXIT_OK


def cmd_are(cfg: RunConfig) -> int:
    design = cfg.design_spec()
    if design.kind in ("matching", "counter_matching") and cfg.delta is None and cfg.gamma is None:
        raise ConfigError(f"{design.kind} needs surrogate --delta and --gamma")
    pop = _population(cfg, 1.0)
    grid = asy.parse_grid(cfg.grid)
    table = asy.are_curve(design, pop, grid)
    if cfg.out:
        asy.write_are_csv(cfg.out, table)
    else:
        sys.stdout.write(",".join(asy.ARE_COLUMNS) + "\n")
        for row in table:
            sys.stdout.write(",".join(repr(float(x)) for x in row) + "\n")
    if cfg.svg:
        label = design.kind if design.m is None else f"{design.kind} m={design.m}"
        asy.render_are_svg({label: table}, cfg.svg)
    return EXIT_OK


def cmd_mc(cfg: RunConfig) -> int:
    summary, _ = run_mc(_scenario(cfg), cfg.workers)
    _emit_json(summary.to_dict(), cfg.out)
    return EXIT_OK


def check_fixture():
    """Small two-stratum cohort used by the ``check`` command."""
    records = []
    strata = ["a", "a", "a", "b", "b", "b", "a", "b"]
    levels = ["0", "1", "0", "1", "0", "1", "1", "0"]
    for i, (lab, st) in enumerate(zip(levels, strata)):
        sid = str(i + 1)
        records += [(sid, 0.0, "cov", lab), (sid, 0.0, "stratum", st), (sid, 0.0, "enter", "")]
    records.append(("1", 1.0, "fail", ""))
    return build_cohort(records, LevelSet((0.0, 1.0)), tau=2.0)


def cmd_check(cfg: RunConfig) -> int:
    cohort = check_fixture()
    rs = risk_set(cohort, 1.0)
    designs = [DesignSpec("full"), DesignSpec("srs", m=3), DesignSpec("matching", m_per_stratum=(2, 3)),
               DesignSpec("counter_matching", m_per_stratum=(1, 2))]
    ok = True
    lines = []
    for d in designs:
        checks = enumerate_design(rs, d).verify()
        passed = all(checks.values())
        ok &= passed
        lines.append(f"{d.kind:17s} {'PASS' if passed else 'FAIL'} " + " ".join(f"{k}={v}" for k, v in checks.items()))
    text = "\n".join(lines) + "\n"
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_DEGENERATE


HANDLERS = {
    "simulate": cmd_simulate,
    "sample": cmd_sample,
    "estimate": cmd_estimate,
    "baseline": cmd_baseline,
    "are": cmd_are,
    "mc": cmd_mc,
    "check": cmd_check,
}


def run(argv=None) -> int:
    """Parse ``argv``, run the command and return its exit status."""
    try:
        cfg = _config_from_argv(list(sys.argv[1:] if argv is None else argv))
        return HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        sys.stderr.write(f"mhcohort: usage error: {exc}\n")
        return EXIT_USAGE
    except OSError as exc:
        sys.stderr.write(f"mhcohort: I/O error: {exc}\n")
        return EXIT_IO
    except DegenerateEstimateError as exc:
        sys.stderr.write(f"mhcohort: degenerate: {exc}\n")
        return EXIT_DEGENERATE
    except (ConfigError, CohortError, DesignError, ValueError) as exc:
        sys.stderr.write(f"mhcohort: schema error: {exc}\n")
        return EXIT_SCHEMA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
