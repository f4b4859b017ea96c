"""Command line: tune a gait, run walking scenarios, check logs, run batches.

Exit codes: 0 all rules pass, 1 a metric rule failed, 2 fall or aborted run,
3 bad input (config, spec or log).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .erg import ERGConfig
from .gait import GaitSpec, TuningConfig, TuningError, tune_coefficients
from .hybrid import COLUMNS, LOG_SCHEMA, PHASE_DS, PHASE_SS, QP_FALLBACK, WalkConfig, run_gait_cycles
from .model import N_SS, RobotParams
from .nmpc import NMPCConfig

log = logging.getLogger("thrustwalk")

LOG_ENV = "THRUSTWALK_LOG"
BUILTIN_SPEC = "builtin"

EXIT_OK, EXIT_RULES, EXIT_FALL, EXIT_INPUT = 0, 1, 2, 3


class LogParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


# ---- scenario configuration ---------------------------------------------------

@dataclass(frozen=True)
class Rules:
    pos_tol: float = 1e-3
    vel_tol: float = 1e-2
    closure_tol: float = 1e-3
    closure_from_step: int = 2  # first 1-based step whose start state enters the closure check


@dataclass(frozen=True)
class SimSettings:
    ss_dt: float = 1e-4
    control_dt: float = 1e-3
    ds_inner_dt: float = 1e-4
    max_step_time: float = 1.5
    fall_hip_height: float = 0.15
    fall_torso_angle: float = float(np.pi / 2)
    velocity_perturbation: float = 0.0


@dataclass(frozen=True)
class Scenario:
    params: RobotParams = field(default_factory=RobotParams)
    spec: str = BUILTIN_SPEC
    steps: int = 5
    seed: int = 0
    out: str = "out"
    sim: SimSettings = field(default_factory=SimSettings)
    erg: ERGConfig = field(default_factory=ERGConfig)
    nmpc: NMPCConfig = field(default_factory=NMPCConfig)
    tuning: TuningConfig = field(default_factory=TuningConfig)
    rules: Rules = field(default_factory=Rules)
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    # sections written in this order; each maps onto one dataclass
    _SECTIONS = ("robot", "sim", "erg", "nmpc", "tuning", "rules")

    def _section_obj(self, name):
        return {"robot": self.params, "sim": self.sim, "erg": self.erg, "nmpc": self.nmpc,
                "tuning": self.tuning, "rules": self.rules}[name]

    def to_ini(self) -> str:
        cp = _parser()
        cp["run"] = {"spec": self.spec, "steps": str(self.steps), "seed": str(self.seed), "out": self.out}
        for name in self._SECTIONS:
            obj = self._section_obj(name)
            cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, base_dir=".") -> Scenario:
        cp = _parser()
        cp.read_string(text)
        unknown = set(cp.sections()) - set(cls._SECTIONS) - {"run"}
        if unknown:
            raise ValueError(f"unknown config section(s): {sorted(unknown)}")
        kw = {}
        if cp.has_section("run"):
            run = dict(cp.items("run"))
            extra = set(run) - {"spec", "steps", "seed", "out"}
            if extra:
                raise ValueError(f"unknown [run] key(s): {sorted(extra)}")
            kw["spec"] = run.get("spec", BUILTIN_SPEC)
            kw["steps"] = int(run.get("steps", 5))
            kw["seed"] = int(run.get("seed", 0))
            kw["out"] = run.get("out", "out")
        defaults = cls()
        for name, key in zip(cls._SECTIONS, ("params", "sim", "erg", "nmpc", "tuning", "rules")):
            base = getattr(defaults, key)
            if cp.has_section(name):
                kw[key] = _parse_section(type(base), base, dict(cp.items(name)), name)
        return cls(**kw, base_dir=str(base_dir))

    @classmethod
    def load(cls, path) -> Scenario:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text, path.parent)

    def with_(self, **changes) -> Scenario:
        return replace(self, **changes)

    def load_spec(self) -> GaitSpec:
        if self.spec == BUILTIN_SPEC:
            return default_spec()
        p = Path(self.spec)
        if not p.is_absolute():
            p = Path(self.base_dir) / p
        return GaitSpec.load(p)

    def walk_config(self, spec: GaitSpec | None = None) -> WalkConfig:
        return WalkConfig(self.params, spec if spec is not None else self.load_spec(), self.erg, self.nmpc,
                          seed=self.seed, **asdict(self.sim))


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # parameter names are case-sensitive (m_T, l_T)
    return cp


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return None if raw.lower() == "none" else float(raw)
    if isinstance(default, tuple):
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    return raw


def _parse_section(cls, base, items: dict, section: str):
    known = {f.name: getattr(base, f.name) for f in fields(cls)}
    unknown = set(items) - set(known)
    if unknown:
        raise ValueError(f"unknown [{section}] key(s): {sorted(unknown)}")
    vals = {k: _parse_value(v, known[k], f"[{section}] {k}") for k, v in items.items()}
    return replace(base, **vals)


def default_spec() -> GaitSpec:
    text = resources.files("thrustwalk").joinpath("data/default_gait.json").read_text()
    return GaitSpec.from_dict(json.loads(text))


def default_config_text() -> str:
    return resources.files("thrustwalk").joinpath("data/default.ini").read_text()


# ---- metrics --------------------------------------------------------------------

@dataclass
class MetricsReport:
    requested_steps: int
    completed_steps: int
    status: str
    step_pos_error: list
    step_vel_error: list
    step_terminal_error: list
    ds_max_friction_ratio: list
    ds_min_normal: list
    ds_max_thrust: list
    qp_fallbacks: int
    erg_interventions: int
    closure_residual: float
    rules: dict

    @property
    def passed(self) -> bool:
        return all(self.rules.values())

    @property
    def mean_terminal_error(self) -> float:
        return float(np.mean(self.step_terminal_error)) if self.step_terminal_error else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        d["mean_terminal_error"] = self.mean_terminal_error
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def compute_metrics(header: dict, rows: list, rules: Rules = Rules()) -> MetricsReport:
    """Metrics from logged rows alone; the same code serves ``run`` and ``check``."""
    col = {c: i for i, c in enumerate(COLUMNS)}
    x_s0 = np.asarray(header["x_s0"], dtype=float)
    mu = float(header["mu_s"])
    requested = int(header.get("requested_steps", 0))
    status = header.get("status", "ok")

    ss_starts: dict[int, np.ndarray] = {}
    ds_rows: dict[int, list] = {}
    interventions = 0
    fallbacks = 0
    q_cols = [col[c] for c in ("q_T", "q_1R", "q_1L", "q_2R", "q_2L")]
    dq_cols = [col["d" + c] for c in ("q_T", "q_1R", "q_1L", "q_2R", "q_2L")]
    for r in rows:
        step, phase = r[col["step"]], r[col["phase"]]
        if phase == PHASE_SS:
            if step not in ss_starts:
                ss_starts[step] = np.array([r[i] for i in q_cols + dq_cols], dtype=float)
            w, ref = r[col["w"]], r[col["r"]]
            if np.isfinite(w) and abs(w - ref) > 1e-6:
                interventions += 1
        elif phase == PHASE_DS:
            ds_rows.setdefault(step, []).append(r)
            if r[col["qp_status"]] == QP_FALLBACK:
                fallbacks += 1

    completed = [s for s in sorted(ds_rows) if s + 1 in ss_starts]
    pos_err, vel_err, term_err = [], [], []
    fr_max, n_min, thr_max = [], [], []
    contact_ok = True
    for s in completed:
        e = ss_starts[s + 1] - x_s0
        pos_err.append(float(np.abs(e[:N_SS]).max()))
        vel_err.append(float(np.abs(e[N_SS:]).max()))
        term_err.append(float(np.linalg.norm(e)))
    for s in sorted(ds_rows):
        lam = np.array([[r[col[c]] for c in ("lam_T1", "lam_N1", "lam_T2", "lam_N2")] for r in ds_rows[s]])
        ln, lt = lam[:, [1, 3]], lam[:, [0, 2]]
        positive = bool(np.all(ln > 0))
        ratio = float(np.max(np.abs(lt) / ln)) if positive else float("inf")
        contact_ok &= positive and ratio < mu
        fr_max.append(ratio)
        n_min.append(float(ln.min()))
        thr_max.append(float(np.max(np.abs([r[col["F_th"]] for r in ds_rows[s]]))))

    # Poincare samples: SS start of 1-based steps closure_from_step, ..., completed + 1
    starts = [ss_starts[k] for k in sorted(ss_starts) if k >= rules.closure_from_step - 1 and k >= 1]
    dists = [float(np.linalg.norm(b - a)) for a, b in zip(starts, starts[1:])]
    closure = max(dists) if dists else 0.0

    checks = {
        "no_fall": status == "ok" and len(completed) == requested,
        "hybrid_invariance": all(p < rules.pos_tol for p in pos_err) and all(v < rules.vel_tol for v in vel_err),
        "contact": contact_ok,
        "qp_solved": fallbacks == 0,
        "limit_cycle": closure < rules.closure_tol,
    }
    return MetricsReport(requested, len(completed), status, pos_err, vel_err, term_err, fr_max, n_min,
                         thr_max, fallbacks, interventions, closure, checks)


def _log_header(glog, requested: int, scenario: Scenario) -> dict:
    return {**glog.header(), "requested_steps": requested, "seed": scenario.seed}


def write_log(path, header: dict, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        wr = csv.writer(fh)
        wr.writerow(COLUMNS)
        for r in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in r])


def read_log(path) -> tuple[dict, list]:
    """Parse a run log; malformed content raises ``LogParseError`` naming the line."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise LogParseError(0, f"cannot read {path}: {exc}") from exc
    if not lines or not lines[0].startswith("# "):
        raise LogParseError(1, "missing JSON header comment")
    try:
        header = json.loads(lines[0][2:])
    except json.JSONDecodeError as exc:
        raise LogParseError(1, f"bad header: {exc}") from exc
    if header.get("schema") != LOG_SCHEMA:
        raise LogParseError(1, f"unsupported log schema {header.get('schema')!r}")
    for key in ("x_s0", "mu_s"):
        if key not in header:
            raise LogParseError(1, f"header lacks {key!r}")
    if len(lines) < 2 or next(csv.reader([lines[1]])) != list(COLUMNS):
        raise LogParseError(2, "column header does not match the log schema")
    rows = []
    for lineno, cells in enumerate(csv.reader(lines[2:]), start=3):
        if len(cells) != len(COLUMNS):
            raise LogParseError(lineno, f"expected {len(COLUMNS)} fields, found {len(cells)}")
        try:
            row = [float(cells[0]), int(cells[1]), cells[2]]
            row += [float(c) for c in cells[3:-1]]
            row.append(int(cells[-1]))
        except ValueError as exc:
            raise LogParseError(lineno, str(exc)) from exc
        if row[2] not in ("SS", "IMPACT", "DS"):
            raise LogParseError(lineno, f"unknown phase {row[2]!r}")
        if rows and row[0] < rows[-1][0]:
            raise LogParseError(lineno, "time is not monotone")
        rows.append(row)
    return header, rows


# ---- commands --------------------------------------------------------------------

@dataclass
class RunOutcome:
    exit_code: int
    report: MetricsReport
    log_path: Path
    report_path: Path


def cmd_run(scenario: Scenario, out_dir=None, tag: str = "run") -> RunOutcome:
    out = Path(out_dir if out_dir is not None else scenario.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = scenario.walk_config()
    glog = run_gait_cycles(cfg, scenario.steps)
    header = _log_header(glog, scenario.steps, scenario)
    log_path = out / f"{tag}_log.csv"
    write_log(log_path, header, glog.rows)
    # metrics come from the parsed file so that `check` reproduces them exactly
    header, rows = read_log(log_path)
    report = compute_metrics(header, rows, scenario.rules)
    report_path = out / f"{tag}_metrics.json"
    report_path.write_text(report.dumps())
    (out / f"{tag}_summary.json").write_text(json.dumps(glog.summary(), indent=2, sort_keys=True) + "\n")
    if glog.fell:
        log.error("run aborted: %s", glog.message)
        log.error("last state: %s", glog.rows[-1] if glog.rows else "none")
        code = EXIT_FALL
    else:
        code = EXIT_OK if report.passed else EXIT_RULES
    for name, ok in report.rules.items():
        log.info("rule %-18s %s", name, "pass" if ok else "FAIL")
    return RunOutcome(code, report, log_path, report_path)


def cmd_check(log_path, rules: Rules = Rules()) -> MetricsReport:
    header, rows = read_log(log_path)
    return compute_metrics(header, rows, rules)


def cmd_tune(scenario: Scenario, out_dir=None):
    out = Path(out_dir if out_dir is not None else scenario.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = scenario.load_spec()
    result = tune_coefficients(scenario.params, seed, scenario.tuning, scenario.walk_config(seed))
    spec_path = out / "tuned_gait.json"
    result.spec.save(spec_path)
    with open(out / "tuning_history.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["evaluation", "residual", "best"])
        best = np.inf
        for i, r in enumerate(result.history):
            best = min(best, r)
            wr.writerow([i, repr(float(r)), repr(float(best))])
    return result, spec_path


def _batch_worker(args):
    path, out_dir, overrides = args
    _configure_logging()
    scenario = _apply_overrides(Scenario.load(path), overrides)
    outcome = cmd_run(scenario, out_dir, tag=Path(path).stem)
    return str(path), outcome.exit_code, outcome.report.to_dict()


# ---- argument handling -------------------------------------------------------------

def _configure_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _apply_overrides(scenario: Scenario, ov: dict) -> Scenario:
    changes = {}
    if ov.get("spec") is not None:
        changes["spec"] = str(Path(ov["spec"]).resolve())
    if ov.get("steps") is not None:
        changes["steps"] = ov["steps"]
    if ov.get("seed") is not None:
        changes["seed"] = ov["seed"]
    if ov.get("no_thrust"):
        changes["nmpc"] = replace(scenario.nmpc, use_thrust=False)
    if ov.get("no_erg"):
        changes["erg"] = replace(scenario.erg, enabled=False)
    return scenario.with_(**changes)


def _load_scenario(args) -> Scenario:
    if args.config:
        scenario = Scenario.load(args.config)
    else:
        scenario = Scenario.from_ini(default_config_text())
    return _apply_overrides(scenario, vars(args))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="thrustwalk", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, steps=True):
        p.add_argument("--config", help="scenario INI file (default: packaged scenario)")
        p.add_argument("--spec", help="GaitSpec JSON overriding the scenario's gait")
        if steps:
            p.add_argument("--steps", type=int, help="number of walking steps")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="seed for the optional initial perturbation")
        p.add_argument("--no-thrust", action="store_true", help="disable the thruster in double support")
        p.add_argument("--no-erg", action="store_true", help="disable the reference governor")

    common(sub.add_parser("tune", help="tune the gait coefficients"), steps=False)
    common(sub.add_parser("run", help="simulate walking and write log and metrics"))
    p = sub.add_parser("check", help="recompute metrics from a run log")
    p.add_argument("log", help="CSV log written by `run`")
    p.add_argument("--config", help="scenario INI file providing the rule tolerances")
    p.add_argument("--out", help="write the report here instead of stdout")
    p = sub.add_parser("batch", help="run several scenarios in parallel")
    p.add_argument("configs", nargs="+", help="scenario INI files")
    p.add_argument("--out", default="batch_out", help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-thrust", action="store_true")
    p.add_argument("--no-erg", action="store_true")
    p.add_argument("--jobs", type=int, default=None, help="parallel processes")
    return ap


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "check":
            rules = Scenario.load(args.config).rules if args.config else Rules()
            report = cmd_check(args.log, rules)
            text = report.dumps()
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK if report.passed else EXIT_RULES
        if args.command == "batch":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            ov = {k: getattr(args, k) for k in ("steps", "seed", "no_thrust", "no_erg")}
            jobs = [(c, out, ov) for c in args.configs]
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_batch_worker, jobs))
            summary = {path: {"exit_code": code, "metrics": rep} for path, code, rep in results}
            (out / "batch_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
            return max(code for _, code, _ in results)
        scenario = _load_scenario(args)
        if args.command == "tune":
            result, path = cmd_tune(scenario, args.out)
            print(f"tuned residual {result.residual:.3e} (seed {result.seed_residual:.3e}) -> {path}")
            return EXIT_OK
        outcome = cmd_run(scenario, args.out)
        print(f"{outcome.report.completed_steps}/{scenario.steps} steps, "
              f"{'pass' if outcome.report.passed else 'FAIL'}: {outcome.report_path}")
        return outcome.exit_code
    except (LogParseError, FileNotFoundError, ValueError, json.JSONDecodeError, configparser.Error) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TuningError as exc:
        print(f"tuning failed: {exc}", file=sys.stderr)
        return EXIT_FALL


if __name__ == "__main__":
    raise SystemExit(main())
