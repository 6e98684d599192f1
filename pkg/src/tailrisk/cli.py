"""Batch command-line interface.

Subcommands: stress, crash, quantile, dml, simulate, pipeline. Every run
takes a JSON config (--config), an output directory (--out), and a seed;
--seed/--out/--threads given on the command line override the config file.
The effective configuration is echoed to stdout and written next to the
outputs, so a run is reproducible from its artifacts alone.

Exit codes: 0 success, 1 estimation failure (a solver or resampling
contract was violated), 2 configuration or input error. Outputs are UTF-8
CSV/JSON with a schema_version field, contain no wall-clock values, and
re-running the same config and seed reproduces them byte for byte. The
pipeline command writes a manifest with a sha256 per artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from .crash import CrashConfig, fit_regime_logits, quintile_gap, threshold_sweep
from .dml import dml_matrix, pillar_matrix
from .errors import ConfigError, TailriskError
from .panel import load_panel_csv
from .quantile import QuantileSpec, quantile_table
from .regime import build_regime, regime_summary
from .simulate import (
    generate_panel,
    monte_carlo,
    panel_to_csv,
    prepare_pipeline,
    spec_from_dict,
    state_dependence_study,
)

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_ESTIMATION = 1
EXIT_CONFIG = 2


def _write_json(path: Path, payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _write_csv(path: Path, rows) -> None:
    pd.DataFrame(rows).to_csv(path, index=False, encoding="utf-8")


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config root must be a JSON object")
    if args.out is not None:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    cfg.setdefault("threads", 1)
    if "seed" not in cfg:
        raise ConfigError("a seed is required (config 'seed' or --seed); runs never draw from the clock")
    if not isinstance(cfg["seed"], int):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    if "out" not in cfg:
        raise ConfigError("an output directory is required (config 'out' or --out)")
    return cfg


def _echo_config(cfg: dict, out: Path) -> None:
    text = json.dumps({"schema_version": SCHEMA_VERSION, **cfg}, indent=2, sort_keys=True)
    print(text)
    (out / "effective_config.json").write_text(text + "\n", encoding="utf-8")


def _load_input_panel(cfg: dict):
    path = cfg.get("panel_csv")
    if not path:
        raise ConfigError("config needs 'panel_csv' pointing at the input panel")
    if not Path(path).exists():
        raise ConfigError(f"panel_csv not found: {path}")
    return load_panel_csv(path, min_days=int(cfg.get("min_days", 10)))


def _prepared(cfg: dict):
    panel = _load_input_panel(cfg)
    level = float(cfg.get("stress", {}).get("level", 0.15))
    return prepare_pipeline(panel, level=level)


# ---------------------------------------------------------------------------
# stage implementations, shared by single commands and the pipeline
# ---------------------------------------------------------------------------

def _stage_stress(cfg: dict, out: Path, panel=None, regime=None) -> list:
    if regime is None:
        panel = _load_input_panel(cfg)
        scfg = cfg.get("stress", {})
        regime = build_regime(
            panel, level=float(scfg.get("level", 0.15)), min_eligible=int(scfg.get("min_eligible", 30))
        )
    frame = regime.to_frame()
    frame.to_csv(out / "regime.csv", index=False, encoding="utf-8")
    _write_json(out / "regime_summary.json", regime_summary(regime))
    return ["regime.csv", "regime_summary.json"]


def _stage_crash(cfg: dict, out: Path, panel, regime) -> list:
    ccfg = cfg.get("crash", {})
    config = CrashConfig(threshold=float(ccfg.get("threshold", 0.20)))
    table = fit_regime_logits(panel, regime, config, sample_mode=ccfg.get("sample_mode", "max"))
    _write_csv(out / "crash_logits.csv", table["table"])
    artifacts = ["crash_logits.csv"]
    gap = quintile_gap(
        panel, regime, config,
        n_boot=int(ccfg.get("n_boot", 800)), seed=int(cfg["seed"]),
    )
    _write_json(out / "quintile_gap.json", gap)
    artifacts.append("quintile_gap.json")
    if ccfg.get("sweep", False):
        sweep = threshold_sweep(
            panel, regime, n_boot=int(ccfg.get("n_boot", 800)), seed=int(cfg["seed"]),
            sample_mode=ccfg.get("sample_mode", "max"),
        )
        _write_json(out / "threshold_sweep.json", sweep)
        artifacts.append("threshold_sweep.json")
    return artifacts


def _stage_quantile(cfg: dict, out: Path, panel, regime) -> list:
    qcfg = cfg.get("quantile", {})
    spec = QuantileSpec(
        tau_grid=tuple(qcfg.get("taus", (0.01, 0.02, 0.05, 0.10, 0.20))),
        n_boot=int(qcfg.get("n_boot", 800)),
        seed=int(cfg["seed"]),
    )
    table = quantile_table(panel, regime, spec)
    _write_csv(out / "quantile_slopes.csv", table["rows"])
    _write_json(out / "quantile_meta.json", table["meta"])
    return ["quantile_slopes.csv", "quantile_meta.json"]


def _stage_dml(cfg: dict, out: Path, panel, regime) -> list:
    dcfg = cfg.get("dml", {})
    result = dml_matrix(
        panel,
        regime,
        outcomes=tuple(dcfg.get("outcomes", ("crash_020", "excess_return"))),
        learners=tuple(dcfg.get("learners", ("lasso", "random_forest"))),
        treatment=dcfg.get("treatment", "esg_agg"),
        n_folds=int(dcfg.get("n_folds", 5)),
        cv_folds=int(dcfg.get("cv_folds", 5)),
        seed=int(cfg["seed"]),
        learner_params=dcfg.get("learner_params"),
    )
    rows = []
    for cell in result["cells"]:
        row = {k: v for k, v in cell.items() if k != "estimate"}
        rows.append(row)
    _write_csv(out / "dml_estimates.csv", rows)
    artifacts = ["dml_estimates.csv"]
    if dcfg.get("pillars", False):
        pm = pillar_matrix(
            panel, regime,
            outcomes=tuple(dcfg.get("outcomes", ("crash_020", "excess_return"))),
            n_folds=int(dcfg.get("n_folds", 5)), cv_folds=int(dcfg.get("cv_folds", 5)),
            seed=int(cfg["seed"]),
        )
        _write_csv(out / "pillar_estimates.csv", pm["cells"])
        artifacts.append("pillar_estimates.csv")
    return artifacts


def _stage_simulate(cfg: dict, out: Path) -> list:
    sim = cfg.get("simulate")
    if not isinstance(sim, dict):
        raise ConfigError("config needs a 'simulate' object (or pass a bundled spec file)")
    kind = sim.get("kind")
    if kind not in ("monte_carlo", "state_dependence", "panel"):
        raise ConfigError(f"simulate.kind must be monte_carlo, state_dependence, or panel; got {kind!r}")
    try:
        dgp = spec_from_dict(sim.get("dgp", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad dgp spec: {exc}") from exc
    seed = int(cfg["seed"])
    if kind == "panel":
        panel, truth = generate_panel(dgp, seed=seed)
        panel_to_csv(panel, out / "panel.csv")
        _write_json(out / "ground_truth.json", truth)
        return ["panel.csv", "ground_truth.json"]
    if kind == "monte_carlo":
        n_rep = int(sim.get("n_replications", 0))
        if n_rep < 100:
            raise ConfigError(f"n_replications must be >= 100, got {n_rep}")
        estimator = sim.get("estimator")
        if not isinstance(estimator, dict) or "kind" not in estimator:
            raise ConfigError("simulate.estimator must be an object with a 'kind'")
        result = monte_carlo(dgp, estimator, n_rep, seed=seed, n_jobs=int(cfg.get("threads", 1)))
        _write_json(out / "sim_result.json", result.to_dict(include_timing=False))
        return ["sim_result.json"]
    n_panels = int(sim.get("n_panels", 0))
    if n_panels < 10:
        raise ConfigError(f"n_panels must be >= 10, got {n_panels}")
    study = state_dependence_study(
        dgp,
        n_panels=n_panels,
        seed=seed,
        n_boot=int(sim.get("n_boot", 200)),
        taus=tuple(sim.get("taus", (0.01, 0.02, 0.20))),
        n_folds=int(sim.get("n_folds", 5)),
    )
    study.pop("wall_time_per_panel", None)
    _write_json(out / "study_result.json", study)
    return ["study_result.json"]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_stress(cfg: dict, out: Path) -> list:
    return _stage_stress(cfg, out)


def cmd_crash(cfg: dict, out: Path) -> list:
    panel, regime = _prepared(cfg)
    return _stage_crash(cfg, out, panel, regime)


def cmd_quantile(cfg: dict, out: Path) -> list:
    panel, regime = _prepared(cfg)
    return _stage_quantile(cfg, out, panel, regime)


def cmd_dml(cfg: dict, out: Path) -> list:
    panel, regime = _prepared(cfg)
    return _stage_dml(cfg, out, panel, regime)


def cmd_simulate(cfg: dict, out: Path) -> list:
    return _stage_simulate(cfg, out)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_pipeline(cfg: dict, out: Path) -> list:
    """stress -> crash -> quantile -> dml on one panel, with a manifest.

    A failing stage stops the run but keeps everything written so far; the
    manifest records per-stage status and a content hash per artifact.
    """
    artifacts: list[str] = []
    stages = {}
    error: tuple[str, BaseException] | None = None
    panel, regime = _prepared(cfg)
    stage_fns = [
        ("stress", lambda: _stage_stress(cfg, out, panel, regime)),
        ("crash", lambda: _stage_crash(cfg, out, panel, regime)),
        ("quantile", lambda: _stage_quantile(cfg, out, panel, regime)),
        ("dml", lambda: _stage_dml(cfg, out, panel, regime)),
    ]
    for name, fn in stage_fns:
        try:
            got = fn()
            artifacts.extend(got)
            stages[name] = {"status": "ok", "artifacts": got}
        except Exception as exc:
            stages[name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            error = (name, exc)
            break
    manifest = {
        "seed": cfg["seed"],
        "stages": stages,
        "artifacts": [
            {"name": a, "sha256": _sha256(out / a), "bytes": (out / a).stat().st_size}
            for a in artifacts
        ],
    }
    _write_json(out / "manifest.json", manifest)
    if error is not None:
        raise error[1]
    return artifacts + ["manifest.json"]


COMMANDS = {
    "stress": cmd_stress,
    "crash": cmd_crash,
    "quantile": cmd_quantile,
    "dml": cmd_dml,
    "simulate": cmd_simulate,
    "pipeline": cmd_pipeline,
}


def bundled_spec_path(name: str) -> Path:
    """Path to a packaged simulation spec (name without .json)."""
    ref = resources.files("tailrisk") / "specs" / f"{name}.json"
    if not ref.is_file():
        have = sorted(p.name for p in (resources.files("tailrisk") / "specs").iterdir())
        raise ConfigError(f"no bundled spec {name!r}; bundled: {have}")
    return Path(str(ref))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailrisk",
        description="Stress-regime tail-risk estimation on firm-month panels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("stress", "classify stress months from volume/volatility-weighted market returns"),
        ("crash", "regime-split crash logits with month-clustered inference"),
        ("quantile", "left-tail quantile slopes with stratified month-block bootstrap"),
        ("dml", "cross-fitted deconfounded treatment effects per regime"),
        ("simulate", "synthetic-data studies from a DGP spec"),
        ("pipeline", "all estimation stages plus a hashed artifact manifest"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="integer seed (overrides config)")
        p.add_argument(
            "--threads", type=int,
            help="worker processes for replication loops; results are identical for any value",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _echo_config(cfg, out)
        artifacts = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, PermissionError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TailriskError, RuntimeError, ValueError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"estimation failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    for a in artifacts:
        print(f"wrote {out / a}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
