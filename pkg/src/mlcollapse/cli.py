"""Command-line harness: ``mlcollapse {spectrum,bounds,run,verify,diagnose}``.

Exit codes: 0 success, 1 config or usage error, 2 non-convergence (reports
are still written), 3 a bound, structural law or property failed.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Any, Mapping

import click
import numpy as np

from .bounds import a_m, bound_report, resolve_c1
from .config import ExperimentConfig, FORMATS, load_config
from .diagnostics import diagnose as run_diagnostics, metrics_csv
from .errors import CollapseError, ConfigError
from .label_space import LabelDistribution
from .pal import best_c1
from .properties import FAULTS, run_suite
from .spectral import all_spectra
from .ufm import UfmState, optimize

log = logging.getLogger("mlcollapse")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_FAILED = 0, 1, 2, 3
CHECKPOINT_FORMAT = "mlcollapse-checkpoint/1"


def _clean(obj: Any) -> Any:
    """Make ``obj`` strict-JSON: numpy scalars to Python, non-finite floats to ``null``."""
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


class Writer:
    """Collects report files and writes them once the command's work is done."""

    def __init__(self, out_dir: str | Path, fmt: str):
        self.out = Path(out_dir)
        self.fmt = fmt
        self.files: dict[str, str] = {}

    def json(self, name: str, obj: Any) -> None:
        if self.fmt in ("json", "both"):
            self.files[f"{name}.json"] = dumps(obj)

    def csv(self, name: str, text: str) -> None:
        if self.fmt in ("csv", "both"):
            self.files[f"{name}.csv"] = text

    def always(self, filename: str, obj: Any) -> None:
        self.files[filename] = dumps(obj)

    def flush(self) -> None:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            for name, text in sorted(self.files.items()):
                with open(self.out / name, "w", newline="\n") as fh:
                    fh.write(text)
        except OSError as exc:
            raise ConfigError(f"output: cannot write to {self.out}: {exc.strerror}") from None
        for name in sorted(self.files):
            log.info("wrote %s", self.out / name)


def _run_id(cfg: ExperimentConfig) -> str:
    return f"{cfg.scenario_kind}-seed{cfg.ufm.seed}"


def _load(config: str, **overrides) -> ExperimentConfig:
    cfg = load_config(config)
    return cfg.with_overrides(**overrides)


# -- report builders -----------------------------------------------------


def spectrum_payload(dist: LabelDistribution) -> dict[str, Any]:
    return {
        "K": dist.K,
        "N": dist.N,
        "distribution": dist.to_json_dict(),
        "spectra": {str(m): sp.to_json_dict() for m, sp in all_spectra(dist).items()},
    }


def _c1_key(c1: Mapping[int, float]) -> dict[str, float]:
    return {str(m): v for m, v in sorted(c1.items())}


def bounds_payload(state: UfmState, dist: LabelDistribution, cfg: ExperimentConfig):
    """Bound report at the configured ``c1``, the full ``c1`` grid and the tuned choice."""
    spectra = all_spectra(dist)
    lw, lh = cfg.ufm.lambda_w, cfg.ufm.lambda_h
    tol = cfg.thresholds["bound"]
    main = bound_report(state, dist, resolve_c1(dist, cfg.c1), lw, lh, spectra, tol=tol)
    ms = dist.multiplicities
    grid = []
    all_ok = main.satisfied and main.chain_holds()
    for combo in itertools.product(*(cfg.grid_for(m) for m in ms)):
        c1 = dict(zip(ms, combo))
        rep = bound_report(state, dist, c1, lw, lh, spectra, tol=tol)
        ok = rep.satisfied and rep.chain_holds()
        all_ok &= ok
        grid.append(
            {
                "c1": _c1_key(c1),
                "margin": rep.margin,
                "rhs": rep.rhs,
                "min_stage_slack": rep.min_stage_slack,
                "satisfied": rep.satisfied,
                "chain_holds": rep.chain_holds(),
            }
        )
    scale = math.sqrt(lw / lh) * main.rho
    tuned_c1 = {m: best_c1(dist.K, m, a_m(dist, m, spectra[m].kappa) * scale, cfg.grid_for(m)) for m in ms}
    tuned = bound_report(state, dist, tuned_c1, lw, lh, spectra, tol=tol)
    payload = {
        "c1": _c1_key(resolve_c1(dist, cfg.c1)),
        "report": main.to_json_dict(),
        "grid": grid,
        "tuned": {"c1": _c1_key(tuned_c1), "rhs": tuned.rhs, "margin": tuned.margin, "gamma2": tuned.gamma2},
        "all_hold": all_ok,
    }
    return payload, main, all_ok


def checkpoint_payload(state: UfmState, dist: LabelDistribution, cfg: ExperimentConfig, meta: Mapping) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "state": state.to_json_dict(),
        "distribution": dist.to_json_dict(),
        "config": cfg.echo(),
        "convergence": dict(meta),
    }


def load_checkpoint(path: str | Path) -> tuple[UfmState, LabelDistribution, dict]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"checkpoint: cannot read {p}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint: {p}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "state" not in doc or "distribution" not in doc:
        raise ConfigError(f"checkpoint: {p}: requires keys 'state' and 'distribution'")
    dist = LabelDistribution.from_json_dict(doc["distribution"], where="checkpoint.distribution")
    state = UfmState.from_json_dict(doc["state"])
    return state, dist, doc


# -- CLI -----------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
@click.version_option(package_name="artifact")
def cli(verbose: int) -> None:
    """Spectral-control laboratory for multi-label neural collapse."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


_config_opt = click.option("--config", "config", type=click.Path(dir_okay=False), help="Experiment JSON.")
_out_opt = click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory.")
_fmt_opt = click.option("--format", "fmt", type=click.Choice(FORMATS), help="Report format.")
_seed_opt = click.option("--seed", type=click.IntRange(min=0), help="Override ufm.seed.")
_restarts_opt = click.option("--restarts", type=click.IntRange(min=1), help="Override ufm.restarts.")


@cli.command()
@click.option("--config", "config", required=True, type=click.Path(dir_okay=False))
@_out_opt
@_fmt_opt
def spectrum(config: str, out_dir: str | None, fmt: str | None) -> None:
    """Centered label covariance spectrum and degeneracy class per multiplicity."""
    cfg = _load(config, out_dir=out_dir, fmt=fmt)
    dist = cfg.distribution()
    payload = spectrum_payload(dist)
    w = Writer(cfg.out_dir, cfg.fmt)
    w.json("spectrum", payload)
    rows = []
    for m, sp in payload["spectra"].items():
        rows += [(_run_id(cfg), f"kappa_m{m}", sp["kappa"]), (_run_id(cfg), f"centered_trace_m{m}", sp["centered_trace"])]
    w.csv("spectrum", metrics_csv(rows))
    w.flush()
    for m, sp in payload["spectra"].items():
        click.echo(f"m={m}: kappa={sp['kappa']:.6g} trace={sp['centered_trace']:.6g} [{sp['classification']}]")
    sys.exit(EXIT_OK)


def _state_for(cfg: ExperimentConfig, dist: LabelDistribution, checkpoint: str | None):
    if checkpoint:
        state, cdist, doc = load_checkpoint(checkpoint)
        if cdist != dist:
            raise ConfigError("checkpoint distribution differs from the configured scenario")
        return state, dict(doc.get("convergence", {})), state.converged
    res = optimize(cfg.ufm, dist)
    return res.best, res.metadata(), res.converged


@cli.command()
@click.option("--config", "config", required=True, type=click.Path(dir_okay=False))
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Evaluate at a saved state instead of optimizing.")
@_seed_opt
@_restarts_opt
@_out_opt
@_fmt_opt
def bounds(config, checkpoint, seed, restarts, out_dir, fmt) -> None:
    """Lower bound and its proof chain at the best-found minimizer (or a checkpoint)."""
    cfg = _load(config, seed=seed, restarts=restarts, out_dir=out_dir, fmt=fmt)
    dist = cfg.distribution()
    state, meta, converged = _state_for(cfg, dist, checkpoint)
    payload, main, ok = bounds_payload(state, dist, cfg)
    payload["convergence"] = meta
    w = Writer(cfg.out_dir, cfg.fmt)
    w.json("bounds", payload)
    w.csv("bound_stages", main.stages_csv())
    w.flush()
    click.echo(f"margin={main.margin:.6g} rhs={main.rhs:.6g} chain_holds={main.chain_holds()} grid_all_hold={ok}")
    sys.exit(EXIT_NONCONVERGED if not converged else EXIT_OK if ok else EXIT_FAILED)


def _emit_full(w: Writer, cfg: ExperimentConfig, state, dist, meta) -> tuple[bool, dict[str, bool]]:
    bpayload, main, bounds_ok = bounds_payload(state, dist, cfg)
    diag = run_diagnostics(state, dist, cfg.ufm.lambda_w, cfg.ufm.lambda_h)
    checks = diag.checks(cfg.thresholds)
    w.json("bounds", bpayload)
    w.json("diagnostics", {**diag.to_json_dict(), "checks": checks})
    run_id = _run_id(cfg)
    rows = [(run_id, "objective", state.objective_value), (run_id, "grad_norm", state.grad_norm)]
    rows += [(run_id, "bound_margin", main.margin), (run_id, "bound_rhs", main.rhs)]
    rows += diag.metric_rows(run_id)
    w.csv("metrics", metrics_csv(rows))
    w.csv("bound_stages", main.stages_csv())
    click.echo(f"objective={state.objective_value!r} grad_norm={state.grad_norm:.3e} converged={state.converged}")
    click.echo(f"bound margin={main.margin:.6g} chain_holds={main.chain_holds()} grid_all_hold={bounds_ok}")
    for name, ok in checks.items():
        click.echo(f"  {name}: {'pass' if ok else 'FAIL'}")
    if diag.gram is not None:
        for sc, v in diag.gram.items():
            click.echo(f"  gram[{sc}] c*={v['c_star']:.6g} residual={v['residual_fro']:.6g}")
    return bounds_ok and all(checks.values()), checks


@cli.command()
@click.option("--config", "config", required=True, type=click.Path(dir_okay=False))
@_seed_opt
@_restarts_opt
@_out_opt
@_fmt_opt
def run(config, seed, restarts, out_dir, fmt) -> None:
    """Optimize, then evaluate the bound and the structural laws."""
    cfg = _load(config, seed=seed, restarts=restarts, out_dir=out_dir, fmt=fmt)
    dist = cfg.distribution()
    t0 = time.perf_counter()
    res = optimize(cfg.ufm, dist)
    log.info("optimized %d restarts in %.2fs", cfg.ufm.restarts, time.perf_counter() - t0)
    w = Writer(cfg.out_dir, cfg.fmt)
    w.always("checkpoint.json", checkpoint_payload(res.best, dist, cfg, res.metadata()))
    ok, _ = _emit_full(w, cfg, res.best, dist, res.metadata())
    w.flush()
    click.echo(f"restarts converged={res.n_converged}/{len(res.runs)} spread={res.objective_spread():.3e}")
    sys.exit(EXIT_NONCONVERGED if not res.converged else EXIT_OK if ok else EXIT_FAILED)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config", type=click.Path(dir_okay=False), help="Thresholds, c1 and lambdas; defaults to the checkpoint's own config.")
@_out_opt
@_fmt_opt
def diagnose(checkpoint, config, out_dir, fmt) -> None:
    """Diagnostics and bound report for an existing checkpoint."""
    from .config import parse_config

    state, dist, doc = load_checkpoint(checkpoint)
    if config:
        cfg = _load(config, out_dir=out_dir, fmt=fmt)
        if cfg.distribution() != dist:
            raise ConfigError("checkpoint distribution differs from the configured scenario")
    else:
        echo = doc.get("config")
        if not isinstance(echo, dict) or "ufm" not in echo:
            raise ConfigError("checkpoint has no embedded config; pass --config")
        echo = {k: v for k, v in echo.items() if k != "scenario"}
        echo["scenario"] = {"kind": "custom", "table": doc["distribution"]}
        cfg = parse_config(echo).with_overrides(out_dir=out_dir, fmt=fmt)
    w = Writer(cfg.out_dir, cfg.fmt)
    ok, _ = _emit_full(w, cfg, state, dist, doc.get("convergence", {}))
    w.flush()
    sys.exit(EXIT_NONCONVERGED if not state.converged else EXIT_OK if ok else EXIT_FAILED)


@cli.command()
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--trials", type=click.IntRange(min=1), default=1000, show_default=True)
@_out_opt
@_fmt_opt
@click.option("--inject-fault", type=click.Choice(FAULTS), hidden=True)
def verify(seed, trials, out_dir, fmt, inject_fault) -> None:
    """Randomized property suites for the lemmas behind the bound."""
    res = run_suite(seed, trials, inject_fault)
    for p in res.properties:
        click.echo(f"{p.name}: {p.passed}/{p.trials} passed (worst slack {p.worst_slack:.3e}, tol {p.tol:g})")
    if out_dir:
        w = Writer(out_dir, fmt or "json")
        w.json("verify", res.to_json_dict())
        rows = [(f"verify-seed{seed}", f"{p.name}_passed", p.passed) for p in res.properties]
        w.csv("verify", metrics_csv(rows))
        w.flush()
    if not res.ok:
        click.echo(f"FAILED: {', '.join(res.failed())}", err=True)
    sys.exit(EXIT_OK if res.ok else EXIT_FAILED)


def main(argv: list[str] | None = None) -> int:
    """Entry point; maps errors to the documented exit codes."""
    try:
        cli.main(args=argv, prog_name="mlcollapse", standalone_mode=False)
    except SystemExit as exc:
        return int(exc.code or 0)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except CollapseError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
