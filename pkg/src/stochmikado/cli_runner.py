"""Command line driver: validate a config, run the iteration, or run one probe suite.

    stochmikado validate run.ini
    stochmikado run run.ini
    stochmikado probe run.ini mikado

Exit codes: 0 pass, 1 contract failure or infeasible stage, 2 configuration error.
The output root is taken from $STOCHMIKADO_OUT (default ./runs).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .antidivergence import antidiv_decay_probe
from .brownian import calibrate_L
from .iteration_stage import (DEFECT_TERMS, InvalidConfigurationError, PowerSchedule, StageConfig,
                              StageParams, _jsonable, choose_parameters, defect_norm, delta_sequence,
                              hypothesis_violations, initial_stage, make_ensemble,
                              resolution_requirements, run_iteration)
from .mikado_blocks import BlobProfile, BlockParams, MikadoBlocks, mikado_estimate_probe, mikado_identity_check
from .residual_verify import (InconclusiveCertificate, TestFunctionBank, interpolation_check,
                              nonuniqueness_exhibit, single_mode_ratio, triple_residual, write_certificate)
from .spectral_grid import GridSpec, fit_holder_constant, improved_holder_check, random_bandlimited

OUT_ENV = "STOCHMIKADO_OUT"
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
PROBES = ("mikado", "antidiv", "brownian", "interpolation", "holder")
CONTRACT_KEYS = ("rho_distance", "momentum", "velocity_distance", "defect")


class ConfigError(ValueError):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass
class RunConfig:
    d: int = 2
    p: float = 2.0
    p_tilde: float = 1.5
    theta: float = 0.0
    prob: float = 0.9
    n: int = 256
    n_t: int = 512
    n_stages: int = 1
    delta_first: float = 1.0 / 13.0
    delta_ratio: float = 0.5
    seeds: list = field(default_factory=lambda: list(range(8)))
    L: float | None = None
    diffusion: bool = False
    time_stride: int = 8
    members: int | None = None
    lam_max: int = 1024
    # explicit stage parameters; when lam is None the faithful doubling search runs
    lam: int | None = None
    mu: int = 1
    sigma: float = 1.0
    nu: int = 8
    N: int = 1
    ell: float | None = None
    eps: float | None = None
    growth: int = 2
    output: str = "run"

    @property
    def explicit(self) -> bool:
        return self.lam is not None

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "problem": {"d": int, "p": float, "p_tilde": float, "theta": float, "prob": float},
    "grid": {"n": int, "n_t": int},
    "iteration": {"n_stages": int, "delta_first": float, "delta_ratio": float, "diffusion": bool,
                  "time_stride": int, "members": int, "lam_max": int},
    "ensemble": {"seeds": list, "L": float},
    "stage": {"lam": int, "mu": int, "sigma": float, "nu": int, "N": int, "ell": float, "eps": float,
              "growth": int},
    "output": {"name": str},
}


def _parse_seeds(text: str) -> list:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.replace(",", " ").split()]


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise ConfigError([f"cannot read config {path}"])
    cfg = RunConfig(output=Path(path).stem)
    errors = []
    for section in parser.sections():
        if section not in _SECTIONS:
            errors.append(f"unknown section [{section}]")
            continue
        for key, raw in parser[section].items():
            kind = _SECTIONS[section].get(key)
            if kind is None:
                errors.append(f"unknown key {section}.{key}")
                continue
            try:
                if kind is bool:
                    value = parser[section].getboolean(key)
                elif kind is list:
                    value = _parse_seeds(raw)
                else:
                    value = kind(raw)
            except ValueError as exc:
                errors.append(f"{section}.{key}: {exc}")
                continue
            setattr(cfg, "output" if key == "name" else key, value)
    if errors:
        raise ConfigError(errors)
    return cfg


def validate(cfg: RunConfig) -> dict:
    """Hypotheses, delta budget, grid sanity and first-stage resolution.

    Returns {"errors": [...], "warnings": [...], "exponents": {...}, "first_stage": {...}}.
    An unresolvable first stage is a warning: the run still reports it as infeasible.
    """
    errors = [f"hypothesis violated: {name}" for name in hypothesis_violations(cfg.p, cfg.p_tilde, cfg.theta, cfg.d)]
    warnings = []
    out = {"errors": errors, "warnings": warnings, "exponents": None, "first_stage": None}
    if cfg.d != 2:
        errors.append("dimension: only d = 2 grids are supported by the runner")
    if cfg.n < 8 or cfg.n & (cfg.n - 1):
        errors.append("grid: n must be a power of two, at least 8")
    if cfg.n_t < 8:
        errors.append("grid: n_t must be at least 8")
    if not 0 <= cfg.prob < 1:
        errors.append("prob must lie in [0, 1)")
    if cfg.n_stages < 0:
        errors.append("n_stages must be non-negative")
    if not cfg.seeds:
        errors.append("ensemble: at least one seed is required")
    if cfg.n_stages:
        total = sum(cfg.delta_first * cfg.delta_ratio ** k for k in range(cfg.n_stages))
        if total >= 1.0 / 6.0:
            errors.append(f"delta_sum: {total:.4f} must stay below 1/6")
    if errors:
        return out
    try:
        e = choose_parameters(cfg.p, cfg.p_tilde, cfg.theta, cfg.d)
    except InvalidConfigurationError as exc:
        errors.extend(f"exponent selection failed: {c}" for c in exc.conditions)
        return out
    out["exponents"] = e.as_dict()
    profile = BlobProfile(cfg.d)
    if cfg.explicit:
        ell = cfg.ell if cfg.ell is not None else 4.0 / (cfg.n_t - 1)
        need = resolution_requirements(cfg.lam, cfg.mu, cfg.nu, ell, profile)
        lam = cfg.lam
    else:
        lam = 2
        vals = PowerSchedule.from_exponents(e).at(lam)
        need = resolution_requirements(lam, vals["mu"], vals["nu"], vals["ell"], profile)
    feasible = need["n"] < cfg.n and need["n_t"] <= cfg.n_t
    out["first_stage"] = {"lam": lam, "needs_n": need["n"], "needs_n_t": need["n_t"], "feasible": feasible}
    if not feasible:
        warnings.append(f"first stage at lam={lam} needs n >= {need['n']:.3g}, n_t >= {need['n_t']:.3g}")
    return out


# ---------------------------------------------------------------- run

def output_dir(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg.output


def stage_config(cfg: RunConfig) -> StageConfig:
    return StageConfig(p=cfg.p, p_tilde=cfg.p_tilde, theta=cfg.theta, time_stride=cfg.time_stride,
                       members=cfg.members, lam_max=cfg.lam_max)


def explicit_params(cfg: RunConfig, exps, deltas) -> list:
    ell = cfg.ell if cfg.ell is not None else 4.0 / (cfg.n_t - 1)
    out = []
    for k in range(cfg.n_stages):
        g = cfg.growth ** k
        out.append(StageParams(delta=deltas[k], eps=cfg.eps, ell=ell, lam=cfg.lam * g, mu=cfg.mu,
                               sigma=cfg.sigma, nu=cfg.nu * g, N=cfg.N, s=exps.s, kappa=exps.kappa))
    return out


def summary_columns(diffusion: bool) -> list:
    terms = list(DEFECT_TERMS) + (["diff"] if diffusion else [])
    return (["stage", "lam", "mu", "sigma", "nu", "eps", "delta", "passed", "defect_norm", "residual_max"]
            + list(CONTRACT_KEYS) + [f"term_{t}" for t in terms])


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def run(cfg: RunConfig, log=print) -> int:
    check = validate(cfg)
    if check["errors"]:
        for err in check["errors"]:
            log(f"config error: {err}")
        return EXIT_CONFIG
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    exps = choose_parameters(cfg.p, cfg.p_tilde, cfg.theta, cfg.d)
    grid = GridSpec(cfg.d, cfg.n, cfg.n_t)
    L = cfg.L if cfg.L is not None else calibrate_L(cfg.prob, exps.kappa)
    ensemble = make_ensemble(cfg.seeds, grid, L=L, kappa=exps.kappa)
    initial = initial_stage(cfg.p, grid, ensemble, diffusion=cfg.diffusion)
    scfg = stage_config(cfg)
    deltas = delta_sequence(cfg.n_stages, cfg.delta_first, cfg.delta_ratio) if cfg.n_stages else []
    bank = TestFunctionBank(grid)

    def residual_max(triple):
        worst = 0.0
        for i, smp in enumerate(triple.ensemble[: cfg.members or len(triple.ensemble)]):
            t_end = triple.sample_times(i)[-1]
            worst = max(worst, float(triple_residual(triple, i, bank, t_end).max()))
        return worst

    R0 = defect_norm(initial, cfg.time_stride, cfg.members)
    stage0 = {"stage": 0, "defect_norm": R0, "residual_max": residual_max(initial), "L": L,
              "taus": {str(s.seed): s.stop.tau for s in ensemble}, "exponents": exps.as_dict()}
    _write_json(out / "stage_0.json", stage0)

    params = explicit_params(cfg, exps, deltas) if cfg.explicit else None
    result = run_iteration(initial, deltas, cfg.n_stages, scfg, params=params) if cfg.n_stages else None
    rows = [{"stage": 0, "defect_norm": R0, "residual_max": stage0["residual_max"]}]
    timings = {}
    status = EXIT_PASS
    if result is not None:
        for k, rep in enumerate(result.reports, start=1):
            body = rep.to_json()
            timings[f"stage_{k}"] = body.pop("timings", None)
            _write_json(out / f"stage_{k}.json", body)
            prm = rep.params
            row = {"stage": k, "lam": prm["lam"], "mu": prm["mu"], "sigma": prm["sigma"], "nu": prm["nu"],
                   "eps": prm["eps"], "delta": rep.delta, "passed": rep.passed,
                   "defect_norm": defect_norm(result.triples[k], cfg.time_stride, cfg.members),
                   "residual_max": residual_max(result.triples[k])}
            row.update({c: rep.contract[c]["value"] for c in CONTRACT_KEYS})
            row.update({f"term_{t}": v for t, v in rep.breakdown["norms"].items()})
            rows.append(row)
            if not rep.passed:
                status = EXIT_FAIL
        if result.stopped:
            status = EXIT_FAIL
            _write_json(out / "stopped.json", {"reason": result.stopped})
            log(f"stopped: {result.stopped}")
        _write_json(out / "convergence.json", result.convergence)
        try:
            cert = nonuniqueness_exhibit(result.triples, cfg.p, bank, cfg.time_stride, result.stopped,
                                         members=cfg.members)
            write_certificate(cert, out)
        except InconclusiveCertificate as exc:
            _write_json(out / "certificate.json", {"inconclusive": str(exc)})
    with open(out / "summary.csv", "w", newline="") as fh:
        cols = summary_columns(cfg.diffusion)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in cols])
    _write_json(out / "manifest.json", {
        "config": asdict(cfg), "config_hash": cfg.hash(), "seeds": list(cfg.seeds), "L": L,
        "versions": {"stochmikado": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "exit_status": status})
    (out / "timings.json").write_text(json.dumps(_jsonable(timings), indent=2, sort_keys=True) + "\n")
    log(f"wrote {out} (exit {status})")
    return status


# ---------------------------------------------------------------- probes

def _write_rows(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


# each probe needs a minimum resolution of its own; smaller configured grids are raised to it
def _probe_grid(cfg: RunConfig, least: int) -> GridSpec:
    return GridSpec(cfg.d, max(cfg.n, least), 8)


def probe_mikado(cfg: RunConfig, out: Path) -> Path:
    grid = _probe_grid(cfg, 256)
    e = choose_parameters(cfg.p, cfg.p_tilde, cfg.theta, cfg.d)
    rows = []
    for N in (1, 2, 3):
        blocks = MikadoBlocks(grid, BlockParams(1, 1, 1.0, 4, e.s, N=N), resolution_tol=1e-6)
        rep = mikado_identity_check(blocks, [0.0, 0.37])
        rows.append(["identity", f"N={N}", "", rep.density_transport, rep.potential, rep.corrector])
    base = BlockParams(1, 1, 1.0, 8, e.s)
    sweeps = {"nu": [8, 12, 16], "sigma": [1.0, 2.0, 4.0]}
    for block in ("theta", "Q", "W", "W_corr", "A_N"):
        for param, values in sweeps.items():
            fit = mikado_estimate_probe(grid, base, block, param, values, resolution_tol=1e-6)
            rows.append(["slope", block, param, fit.fitted, fit.predicted, fit.error])
    return _write_rows(out / "probe_mikado.csv", ["kind", "name", "param", "a", "b", "c"], rows)


def probe_antidiv(cfg: RunConfig, out: Path) -> Path:
    grid = _probe_grid(cfg, 512)
    rng = np.random.default_rng(0)
    rows = []
    for trial in range(5):
        f = random_bandlimited(grid, rng, 3)
        g = random_bandlimited(grid, rng, 2, mean_zero=True)
        rep = antidiv_decay_probe(f, g, [8, 16, 32, 64])
        rows.append([trial, *rep.norms, rep.slope])
    return _write_rows(out / "probe_antidiv.csv", ["trial", "lam8", "lam16", "lam32", "lam64", "slope"], rows)


def probe_brownian(cfg: RunConfig, out: Path) -> Path:
    kappa = choose_parameters(cfg.p, cfg.p_tilde, cfg.theta, cfg.d).kappa
    rows = [[prob, kappa, calibrate_L(prob, kappa)] for prob in (0.5, 0.9, 0.99)]
    return _write_rows(out / "probe_brownian.csv", ["prob", "kappa", "L"], rows)


def probe_interpolation(cfg: RunConfig, out: Path) -> Path:
    grid = GridSpec(cfg.d, min(cfg.n, 64), 8)
    rows = []
    for theta, q in ((0.3, 1.5), (0.7, 2.0)):
        small = interpolation_check(grid, 100, theta, q, seed=0)
        big = interpolation_check(grid, 200, theta, q, seed=0)
        rows.append([theta, q, small.C, big.C, small.stability(big), single_mode_ratio(grid, theta, q)])
    return _write_rows(out / "probe_interpolation.csv",
                       ["theta", "q", "C_100", "C_200", "relative_change", "single_mode"], rows)


def probe_holder(cfg: RunConfig, out: Path) -> Path:
    grid = _probe_grid(cfg, 256)
    rng = np.random.default_rng(0)
    pairs = [(random_bandlimited(grid, rng, 2), random_bandlimited(grid, rng, 3)) for _ in range(50)]
    lams = [4, 8, 16, 32]
    rows = []
    for r in (1.0, 2.0):
        reps = [improved_holder_check(f, g, lam, r) for f, g in pairs for lam in lams]
        C = fit_holder_constant(reps)
        rows.append([r, C, sum(replace(x, C=C).holds for x in reps), len(reps)])
    return _write_rows(out / "probe_holder.csv", ["r", "C_fit", "holds", "total"], rows)


def probe(cfg: RunConfig, name: str) -> Path:
    fn = {"mikado": probe_mikado, "antidiv": probe_antidiv, "brownian": probe_brownian,
          "interpolation": probe_interpolation, "holder": probe_holder}.get(name)
    if fn is None:
        raise ConfigError([f"unknown probe {name!r}; choose from {', '.join(PROBES)}"])
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    return fn(cfg, out)


# ---------------------------------------------------------------- entry point

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="stochmikado")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        sub.add_parser(name).add_argument("config")
    pp = sub.add_parser("probe")
    pp.add_argument("config")
    pp.add_argument("name")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            res = validate(cfg)
            for err in res["errors"]:
                print(f"error: {err}")
            for warn in res["warnings"]:
                print(f"warning: {warn}")
            if res["exponents"]:
                e = res["exponents"]
                print(" ".join(f"{k}={e[k]:.6g}" for k in ("s", "kappa", "alpha", "beta", "gamma", "zeta", "N")))
            return EXIT_CONFIG if res["errors"] else EXIT_PASS
        if args.command == "probe":
            res = validate(cfg)
            if res["errors"]:
                raise ConfigError(res["errors"])
            print(probe(cfg, args.name))
            return EXIT_PASS
        return run(cfg)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
