"""Experiment pipeline: configuration, subcommands, artifacts, PRISM export.

Subcommands (all take ``--config/--seed/--jobs/--out/--horizon/--trials``):

* ``calibrate``           simulate trials, estimate the error model
* ``abstract``            build the composed abstract automaton, dump it
* ``check``               abstract + bounded model check, write the table
* ``campaign``            seeded trials with all three monitors + metrics
* ``monitor``             re-attach monitor columns to an existing campaign
* ``validate-estimator``  filter calibration report
* ``export-prism``        abstract model and property in PRISM syntax
* ``report``              re-aggregate metrics from campaign trace CSVs

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.  Every
artifact embeds the resolved config hash and master seed; re-running a
subcommand with identical inputs writes identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import metrics
from .abstraction import (
    AbstractSystem,
    ErrorModel,
    build_abstract_system,
    estimate_error_model,
)
from .model_check import BoundedSafetyQuery, SafetyTable, check_bounded_safety, load_table, save_table
from .monitor import MonitorContext, joint_from_independent, monitor_distribution, monitor_point, monitor_true
from .pa import ProbabilisticAutomaton, dump_transitions
from .watertank import (
    TankParams,
    ThresholdArbiter,
    TrialTrace,
    default_grid,
    estimation_errors,
    estimator_records,
    run_trial,
    tank_error_models,
    tank_interval_dynamics,
    trial_seed,
    write_trace_csv,
)

log = logging.getLogger(__name__)

MAX_PRISM_TRANSITIONS = 1_000_000
MONITOR_NAMES = ("point", "distribution", "true")
TOP_K_JOINT = 400


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    tanks: TankParams
    grid_width: float = 1.0
    error_bin_width: float = 1.0
    calibration_trials: int = 100
    calibration_steps: int = 50
    calibration_seed: int = 20230601
    mode: str = "min"
    campaign_trials: int = 500
    campaign_steps: int = 50
    initial_low: float = 40.0
    initial_high: float = 60.0
    master_seed: int = 20230415

    def __post_init__(self):
        if self.mode not in ("min", "max"):
            raise ValueError("mode must be 'min' or 'max'")
        if not (0.0 <= self.initial_low <= self.initial_high <= self.tanks.size):
            raise ValueError("initial level range must lie inside [0, size]")
        for name in ("calibration_trials", "calibration_steps", "campaign_trials", "campaign_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tanks"] = asdict(self.tanks)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        tanks = TankParams(**d.pop("tanks", {}))
        return ExperimentConfig(tanks=tanks, **d)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig(tanks=TankParams())
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=int(args.seed))
    if args.horizon is not None:
        cfg = replace(cfg, tanks=replace(cfg.tanks, horizon=int(args.horizon)))
    if args.trials is not None:
        cfg = replace(cfg, campaign_trials=int(args.trials))
    return cfg


def _stamp(cfg: ExperimentConfig) -> str:
    return f"config_hash={cfg.config_hash} master_seed={cfg.master_seed}"


def _write_csv(path: Path, body: str, cfg: ExperimentConfig) -> None:
    path.write_text(f"# {_stamp(cfg)}\n" + body, encoding="utf-8")


# -- building blocks --------------------------------------------------------------


def _calibration_traces(cfg: ExperimentConfig) -> list[TrialTrace]:
    rng = np.random.default_rng([cfg.calibration_seed, 1])
    inits = rng.uniform(
        cfg.initial_low, cfg.initial_high, size=(cfg.calibration_trials, cfg.tanks.n_tanks)
    )
    return [
        run_trial(cfg.tanks, inits[k], trial_seed(cfg.calibration_seed, k), cfg.calibration_steps)
        for k in range(cfg.calibration_trials)
    ]


def load_error_models(path: Path) -> tuple[ErrorModel, ...]:
    d = json.loads(path.read_text(encoding="utf-8"))
    return tuple(ErrorModel.from_dict(m) for m in d["per_tank"])


def build_system(cfg: ExperimentConfig, error_models) -> AbstractSystem:
    params = cfg.tanks
    unsafe_when = "any_dim" if params.safety_rule == "all_in_range" else "all_dims"
    return build_abstract_system(
        default_grid(params, cfg.grid_width),
        tank_interval_dynamics(params),
        error_models,
        ThresholdArbiter(params),
        physical_range=(0.0, params.size),
        unsafe_when=unsafe_when,
    )


def table_meta(cfg: ExperimentConfig, system: AbstractSystem, error_models) -> dict:
    return {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash,
        "master_seed": cfg.master_seed,
        "grid": {
            "lower": list(system.grid.lower),
            "upper": list(system.grid.upper),
            "width": list(system.grid.width),
        },
        "configs": [[list(req), fill] for req, fill in system.controller.configs],
        "state_layout": "flat(cells) * n_configs + config",
        "error_models": [m.to_dict() for m in error_models],
    }


def context_from_table(table: SafetyTable) -> MonitorContext:
    """Rebuild the monitoring context from a table's sidecar (no automaton)."""
    meta = table.meta
    cfg = ExperimentConfig.from_dict(meta["config"])
    params = cfg.tanks
    system = AbstractSystem(
        pa=None,
        grid=default_grid(params, cfg.grid_width),
        controller=ThresholdArbiter(params),
        unsafe_cells_per_dim=tuple(
            (0, n - 1) for n in default_grid(params, cfg.grid_width).counts
        ),
    )
    return MonitorContext(table=table, system=system)


# -- campaign ----------------------------------------------------------------------


def _campaign_inits(cfg: ExperimentConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.master_seed, 2])
    return rng.uniform(
        cfg.initial_low, cfg.initial_high, size=(cfg.campaign_trials, cfg.tanks.n_tanks)
    )


def _trial_task(payload):
    params, init, seed, length = payload
    return run_trial(params, init, seed, length)


def run_campaign_trials(cfg: ExperimentConfig, jobs: int = 1) -> list[TrialTrace]:
    """Seeded trials, byte-identical regardless of worker count."""
    inits = _campaign_inits(cfg)
    payloads = [
        (cfg.tanks, inits[k], trial_seed(cfg.master_seed, k), cfg.campaign_steps)
        for k in range(cfg.campaign_trials)
    ]
    if jobs <= 1:
        return [_trial_task(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_trial_task, payloads, chunksize=16))


def attach_monitors(ctx: MonitorContext, trace: TrialTrace) -> dict[str, list[float]]:
    """The three monitor estimates for every recorded step of one trial."""
    out: dict[str, list[float]] = {name: [] for name in MONITOR_NAMES}
    for step in trace.steps:
        out["point"].append(
            monitor_point(ctx, step.means, step.requests, step.fill, step.t).value
        )
        joint = joint_from_independent(
            [b.as_pairs() for b in step.filter_state.beliefs], top_k=TOP_K_JOINT
        )
        out["distribution"].append(
            monitor_distribution(ctx, joint, step.requests, step.fill, step.t).value
        )
        out["true"].append(
            monitor_true(ctx, step.levels, step.requests, step.fill, step.t).value
        )
    return out


def campaign_records(
    traces: list[TrialTrace], monitor_values: list[dict[str, list[float]]]
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-monitor (estimates, outcomes) arrays over rows with decided labels."""
    records: dict[str, tuple[list[float], list[bool]]] = {
        name: ([], []) for name in MONITOR_NAMES
    }
    for trace, values in zip(traces, monitor_values):
        labels = trace.labels
        for step in trace.steps:
            label = labels[step.t]
            if label is None:
                continue
            for name in MONITOR_NAMES:
                records[name][0].append(values[name][step.t])
                records[name][1].append(bool(label))
    return {
        name: (np.array(ests), np.array(outs, dtype=bool))
        for name, (ests, outs) in records.items()
    }


def write_campaign_reports(
    out_dir: Path,
    cfg: ExperimentConfig,
    records: dict[str, tuple[np.ndarray, np.ndarray]],
) -> dict[str, metrics.CalibrationReport]:
    reports = {}
    summary_lines = ["monitor,ece,ecce,brier,auc"]
    for name in MONITOR_NAMES:
        ests, outs = records[name]
        rep = metrics.calibration_report(ests, outs, strict_auc=False)
        reports[name] = rep
        auc_s = "" if np.isnan(rep.auc) else f"{rep.auc:.17g}"
        summary_lines.append(
            f"{name},{rep.ece:.17g},{rep.ecce:.17g},{rep.brier:.17g},{auc_s}"
        )
        _write_csv(out_dir / f"reliability_{name}.csv", metrics.reliability_csv(rep.bins), cfg)
        if not np.isnan(rep.auc):
            points, _ = metrics.roc_curve(ests, outs)
            _write_csv(out_dir / f"roc_{name}.csv", metrics.roc_csv(points), cfg)
        else:
            log.warning("%s monitor: single outcome class, ROC/AUC undefined", name)
    _write_csv(out_dir / "summary.csv", "\n".join(summary_lines) + "\n", cfg)
    return reports


def read_campaign_traces_csv(campaign_dir: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Rebuild per-monitor records from the written trace CSVs (for ``report``)."""
    records: dict[str, tuple[list[float], list[bool]]] = {
        name: ([], []) for name in MONITOR_NAMES
    }
    paths = sorted(campaign_dir.glob("trial_*.csv"))
    if not paths:
        raise ValueError(f"no trial CSVs under {campaign_dir}")
    for path in paths:
        lines = [l for l in path.read_text(encoding="utf-8").splitlines() if not l.startswith("#")]
        header = lines[0].split(",")
        idx = {c: i for i, c in enumerate(header)}
        for line in lines[1:]:
            cells = line.split(",")
            label = cells[idx["label"]]
            if label == "":
                continue
            for name in MONITOR_NAMES:
                records[name][0].append(float(cells[idx[f"mon_{name}"]]))
                records[name][1].append(label == "1")
    return {
        name: (np.array(e), np.array(o, dtype=bool)) for name, (e, o) in records.items()
    }


# -- PRISM export -----------------------------------------------------------------


def _prism_ident(name: str) -> str:
    ident = re.sub(r"[^A-Za-z0-9_]", "_", name)
    if not re.match(r"[A-Za-z_]", ident):
        ident = "a_" + ident
    return ident


def export_prism(
    pa: ProbabilisticAutomaton, query: BoundedSafetyQuery, name: str = "system"
) -> tuple[str, str]:
    """Render the PA as a PRISM MDP module plus a bounded-safety property file.

    One integer state variable, one command per transition, the unsafe set as
    a label.  Output is deterministic (snapshot-friendly).

    Raises:
        ValueError: when the automaton is too large for flat enumeration.
    """
    if len(pa.transitions) > MAX_PRISM_TRANSITIONS:
        raise ValueError(
            f"{len(pa.transitions)} transitions exceed the flat export limit "
            f"{MAX_PRISM_TRANSITIONS}"
        )
    query.validate_against(pa)
    init = pa.initial if pa.initial is not None else 0
    lines = [f"// {name}: exported MDP", "mdp", "", f"module {_prism_ident(name)}",
             f"  s : [0..{pa.n_states - 1}] init {init};", ""]
    for t in sorted(pa.transitions, key=lambda t: (t.source, t.action)):
        action = _prism_ident(pa.alphabet[t.action])
        branches = " + ".join(f"{p:.17g}:(s'={s})" for s, p in t.dist.support)
        lines.append(f"  [{action}] s={t.source} -> {branches};")
    lines += ["endmodule", ""]
    if query.unsafe:
        expr = "|".join(f"s={s}" for s in sorted(query.unsafe))
    else:
        expr = "false"
    lines.append(f'label "unsafe" = {expr};')
    model = "\n".join(lines) + "\n"

    direction = "Pmin" if query.mode == "min" else "Pmax"
    complement = "Pmax" if query.mode == "min" else "Pmin"
    props = "\n".join(
        [
            f"// {query.mode}-scheduler probability of avoiding unsafe states for "
            f"{query.horizon} steps",
            f'{direction}=? [ G<={query.horizon} !"unsafe" ]',
            "// complement via the bounded-until form",
            f'{complement}=? [ true U<={query.horizon} "unsafe" ]',
        ]
    ) + "\n"
    return model, props


# -- subcommands -------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traces = _calibration_traces(cfg)
    models = tank_error_models(traces, cfg.tanks, cfg.error_bin_width)
    pooled_errors = np.concatenate(
        [estimation_errors(traces, i) for i in range(cfg.tanks.n_tanks)]
    )
    pooled = estimate_error_model(pooled_errors, cfg.error_bin_width)
    payload = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash,
        "master_seed": cfg.master_seed,
        "calibration_seed": cfg.calibration_seed,
        "n_traces": len(traces),
        "per_tank": [m.to_dict() for m in models],
        "pooled": pooled.to_dict(),
    }
    (out / "error_model.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    hist = ["bin_lo,bin_hi,probability"]
    hist += [f"{b.lo:.17g},{b.hi:.17g},{b.prob:.17g}" for b in pooled.bins]
    _write_csv(out / "error_histogram.csv", "\n".join(hist) + "\n", cfg)
    log.info("estimated %d-bin pooled error model from %d traces", len(pooled.bins), len(traces))
    return 0


def _system_from_out(cfg: ExperimentConfig, out: Path) -> AbstractSystem:
    model_path = out / "error_model.json"
    if not model_path.exists():
        raise ValueError(f"{model_path} not found; run `calibrate` first")
    return build_system(cfg, load_error_models(model_path))


def cmd_abstract(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    system = _system_from_out(cfg, out)
    dump = dump_transitions(system.pa)
    (out / "abstract_pa.txt").write_text(f"# {_stamp(cfg)}\n" + dump, encoding="utf-8")
    log.info(
        "abstract automaton: %d states, %d transitions",
        system.pa.n_states,
        len(system.pa.transitions),
    )
    return 0


def cmd_check(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "error_model.json"
    if not model_path.exists():
        raise ValueError(f"{model_path} not found; run `calibrate` first")
    error_models = load_error_models(model_path)
    system = build_system(cfg, error_models)
    log.info(
        "model checking %d states / %d transitions, horizon %d",
        system.pa.n_states,
        len(system.pa.transitions),
        cfg.tanks.horizon,
    )
    query = BoundedSafetyQuery(
        unsafe=system.unsafe_state_ids(), horizon=cfg.tanks.horizon, mode=cfg.mode
    )
    table = check_bounded_safety(system.pa, query)
    table = SafetyTable(
        entries=table.entries,
        horizon=table.horizon,
        mode=table.mode,
        n_states=table.n_states,
        n_actions=table.n_actions,
        meta=table_meta(cfg, system, error_models),
    )
    save_table(table, out / "safety_table.csv")
    log.info("wrote %d table rows", len(table.entries))
    return 0


def cmd_campaign(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    table_path = Path(args.table) if args.table else out / "safety_table.csv"
    if not table_path.exists():
        raise ValueError(f"{table_path} not found; run `check` first")
    table = load_table(table_path)
    if table.meta.get("config_hash") != cfg.config_hash:
        log.warning("safety table was built under a different configuration")
    ctx = context_from_table(table)
    campaign_dir = out / "campaign"
    campaign_dir.mkdir(parents=True, exist_ok=True)
    traces = run_campaign_trials(cfg, jobs=args.jobs)
    monitor_values = [attach_monitors(ctx, trace) for trace in traces]
    for k, (trace, values) in enumerate(zip(traces, monitor_values)):
        write_trace_csv(
            trace,
            campaign_dir / f"trial_{k:04d}.csv",
            monitors={f"mon_{name}": vals for name, vals in values.items()},
            comment=_stamp(cfg),
        )
    failures = sum(t.breach_step is not None for t in traces)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash,
        "master_seed": cfg.master_seed,
        "n_trials": cfg.campaign_trials,
        "trace_length": cfg.campaign_steps,
        "failures": failures,
        "trial_seed_scheme": "numpy default_rng([master_seed, trial_index])",
        "initial_levels_stream": "numpy default_rng([master_seed, 2])",
        "table": str(table_path),
    }
    (campaign_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    records = campaign_records(traces, monitor_values)
    reports = write_campaign_reports(campaign_dir, cfg, records)
    for name in MONITOR_NAMES:
        rep = reports[name]
        log.info(
            "%s: ece=%.5f ecce=%.5f brier=%.5f auc=%.4f",
            name, rep.ece, rep.ecce, rep.brier, rep.auc,
        )
    log.info("%d/%d trials breached", failures, cfg.campaign_trials)
    return 0


def cmd_monitor(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    campaign_dir = out / "campaign"
    manifest_path = campaign_dir / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"{manifest_path} not found; run `campaign` first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = ExperimentConfig.from_dict(manifest["config"])
    table_path = Path(args.table) if args.table else Path(manifest["table"])
    table = load_table(table_path)
    ctx = context_from_table(table)
    traces = run_campaign_trials(cfg, jobs=args.jobs)
    for k, trace in enumerate(traces):
        values = attach_monitors(ctx, trace)
        write_trace_csv(
            trace,
            campaign_dir / f"trial_{k:04d}.csv",
            monitors={f"mon_{name}": vals for name, vals in values.items()},
            comment=_stamp(cfg),
        )
    log.info("rewrote %d augmented trace CSVs", len(traces))
    return 0


def cmd_validate_estimator(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traces = run_campaign_trials(cfg, jobs=args.jobs)
    estimates, outcomes = estimator_records(traces, cell_width=cfg.grid_width)
    value = metrics.ece(estimates, outcomes)
    payload = {
        "config_hash": cfg.config_hash,
        "master_seed": cfg.master_seed,
        "estimator_ece": value,
        "n_records": int(estimates.size),
    }
    (out / "estimator_calibration.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    log.info("estimator ECE %.5f over %d records", value, estimates.size)
    return 0


def cmd_export_prism(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    system = _system_from_out(cfg, out)
    query = BoundedSafetyQuery(
        unsafe=system.unsafe_state_ids(), horizon=cfg.tanks.horizon, mode=cfg.mode
    )
    model, props = export_prism(system.pa, query, name="tank_farm")
    (out / "model.prism").write_text(model, encoding="utf-8")
    (out / "model.props").write_text(props, encoding="utf-8")
    log.info("wrote model.prism (%d transitions) and model.props", len(system.pa.transitions))
    return 0


def cmd_report(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    campaign_dir = out / "campaign"
    manifest_path = campaign_dir / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"{manifest_path} not found; run `campaign` first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = ExperimentConfig.from_dict(manifest["config"])
    records = read_campaign_traces_csv(campaign_dir)
    reports = write_campaign_reports(campaign_dir, cfg, records)
    for name in MONITOR_NAMES:
        rep = reports[name]
        print(
            f"{name:>12}: ece={rep.ece:.5f} ecce={rep.ecce:.5f} "
            f"brier={rep.brier:.5f} auc={rep.auc:.4f}"
        )
    return 0


# -- entry point -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="override master seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--out", type=str, default="out", help="artifact directory")
    common.add_argument("--horizon", type=int, default=None, help="override safety horizon")
    common.add_argument("--trials", type=int, default=None, help="override campaign trials")
    common.add_argument("--table", type=str, default=None, help="safety table CSV path")

    parser = _Parser(prog="safemon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [
        ("calibrate", cmd_calibrate),
        ("abstract", cmd_abstract),
        ("check", cmd_check),
        ("campaign", cmd_campaign),
        ("monitor", cmd_monitor),
        ("validate-estimator", cmd_validate_estimator),
        ("export-prism", cmd_export_prism),
        ("report", cmd_report),
    ]:
        p = sub.add_parser(name, parents=[common])
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"safemon: validation error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: I/O, missing files, ...
        print(f"safemon: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
