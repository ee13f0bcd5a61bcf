"""Command line: configuration, ensembles, verification suites and reports.

    superou spectral-check --config C [--out DIR]
    superou limits         --config C [--out DIR] [--identity]
    superou simulate       --config C [--out DIR] [--seed S] [--parallelism K]
    superou verify SUITE   --config C [--out DIR] [--seed S] [--parallelism K]
    superou report         [--out DIR]

Exit codes: 0 pass, 1 test failure, 2 usage, 3 numeric, 4 resource.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, suites
from .kernels import BACKEND
from .branching import BranchingMechanism
from .errors import ConfigError, SuperOUError
from .ou_spectral import (OUParams, SpectralFunction, classify, eigenfunction_eval,
                          gram_matrix, mehler_expectation, multi_indices, quadrature_grid)
from .simulator import (InitialMeasure, SimulationConfig, record_from_json, run_ensemble,
                        write_jsonl, write_summary_csv)
from .stable_limits import cf_eval, m_limit, m_t, z1_partial_sum
from .stats import make_report

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC, EXIT_RESOURCE = 0, 1, 2, 3, 4
SEED_SCHEME = "numpy SeedSequence(master, spawn_key=(i,)).generate_state(1, uint64)[0] -> PCG64"

_MODEL_KEYS = {"d", "sigma", "b", "alpha", "beta", "eta", "rho"}
_SIM_KEYS = {"n", "engine", "checkpoints", "replicates", "seed", "degree_cap", "switch_time",
             "switch_particles", "switch_min_particles", "particle_cap", "field_bins",
             "field_dt", "field_width", "offspring_table"}
_SETTINGS_FIELDS = {f.name for f in dataclasses.fields(suites.SuiteSettings)} - {"extra"}


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimulationConfig
    replicates: int
    seed: int
    settings: suites.SuiteSettings
    limit_coeffs: tuple = ((0, 1.0),)
    limit_times: tuple = (0.0, 0.5, 1.0, 2.0, 4.0, 8.0)
    identity_terms: int = 3
    spectral_degree: int = 6
    quadrature_nodes: int = 64
    source: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {"simulation": self.sim.to_dict(), "replicates": self.replicates,
                "settings": _jsonable(dataclasses.asdict(self.settings)),
                "limits": {"coeffs": [list(c) for c in self.limit_coeffs],
                           "times": list(self.limit_times), "identity_terms": self.identity_terms},
                "spectral": {"max_degree": self.spectral_degree,
                             "quadrature_nodes": self.quadrature_nodes}}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_n(self, n: int) -> "ExperimentConfig":
        return dataclasses.replace(self, sim=dataclasses.replace(self.sim, n=int(n)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _check_keys(section: dict, allowed: set, name: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}", "cli.load_config")


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


def parse_config(data: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed TOML, reporting the offending field on error."""
    where = "cli.load_config"
    _check_keys(data, {"model", "initial", "simulation", "verify", "limits", "spectral"}, "top level")
    model = data.get("model", {})
    _check_keys(model, _MODEL_KEYS, "model")
    try:
        d = int(model.get("d", 1))
        ou = OUParams(float(model.get("sigma", math.sqrt(2.0))), float(model.get("b", 1.0)), d)
        mech = BranchingMechanism(float(model.get("alpha", 3.0)), float(model.get("rho", 0.0)),
                                  float(model.get("eta", 1.0)), float(model.get("beta", 0.5)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}", where) from exc

    init = data.get("initial", {"atoms": [[[0.0] * d, 1.0]]})
    _check_keys(init, {"atoms"}, "initial")
    try:
        atoms = tuple((tuple(float(x) for x in p), float(m)) for p, m in init["atoms"])
        initial = InitialMeasure(atoms)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"[initial] atoms must be [[point], mass] pairs: {exc}", where) from exc

    sim = dict(data.get("simulation", {}))
    _check_keys(sim, _SIM_KEYS, "simulation")
    replicates = int(sim.pop("replicates", 100))
    seed = int(sim.pop("seed", 0))
    if replicates < 1:
        raise ConfigError("[simulation] replicates must be positive", where)
    if not 0 <= seed < 2**64:
        raise ConfigError("[simulation] seed must be an unsigned 64-bit integer", where)
    try:
        sim_cfg = SimulationConfig(ou=ou, mech=mech, n=int(sim.pop("n", 1000)), initial=initial,
                                   checkpoints=tuple(sim.pop("checkpoints", [1.0])),
                                   **{k: _tuple(v) for k, v in sim.items()})
    except TypeError as exc:
        raise ConfigError(f"[simulation]: {exc}", where) from exc

    ver = data.get("verify", {})
    _check_keys(ver, _SETTINGS_FIELDS, "verify")
    settings = suites.SuiteSettings(**{k: _tuple(v) for k, v in ver.items()})
    if settings.compensator_time == settings.statistic_time:
        raise ConfigError("[verify] compensator_time must differ from statistic_time", where)

    lim = data.get("limits", {})
    _check_keys(lim, {"coeffs", "times", "identity_terms"}, "limits")
    try:
        coeffs = tuple(sorted((int(k), float(v)) for k, v in lim.get("coeffs", {"0": 1.0}).items()))
    except (AttributeError, ValueError) as exc:
        raise ConfigError("[limits] coeffs must map degree to coefficient", where) from exc
    spectral = data.get("spectral", {})
    _check_keys(spectral, {"max_degree", "quadrature_nodes"}, "spectral")
    return ExperimentConfig(sim_cfg, replicates, seed, settings, coeffs,
                            tuple(float(t) for t in lim.get("times", (0.0, 0.5, 1.0, 2.0, 4.0, 8.0))),
                            int(lim.get("identity_terms", 3)), int(spectral.get("max_degree", 6)),
                            int(spectral.get("quadrature_nodes", 64)), source=data)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", "cli.load_config") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}", "cli.load_config") from exc
    return parse_config(data)


# -- output helpers --------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_reports(out: Path, name: str, reports) -> bool:
    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / f"{name}.json").write_text(
        "[\n" + ",\n".join(r.to_json() for r in reports) + "\n]\n")
    for r in reports:
        print(r.line())
    return all(r.passed for r in reports)


def spectral_function(coeffs, dim: int) -> SpectralFunction:
    return SpectralFunction({(k,) + (0,) * (dim - 1): c for k, c in coeffs}, dim=dim)


# -- spectral-check ---------------------------------------------------------------------------


def spectral_reports(ou: OUParams, max_degree: int, nodes: int = 64, corrupt: bool = False,
                     times=(0.1, 0.5, 1.0)) -> list:
    """Orthonormality, eigen-action and quadrature reports for degrees up to ``max_degree``.

    ``corrupt`` perturbs the basis by 1e-6 as a negative control.
    """
    grid = quadrature_grid(ou, nodes=nodes)
    G = gram_matrix(ou, max_degree, grid)
    if corrupt:
        G = G * (1.0 + 1e-6)
    gram_err = float(np.max(np.abs(G - np.eye(len(G)))))
    reports = [make_report(f"gram max|G - I| degree<={max_degree}", gram_err, len(G),
                           tolerance=1e-10)]
    pts = grid.nodes if ou.dim == 1 else grid.nodes[:256]
    worst = 0.0
    for p in multi_indices(ou.dim, max_degree):
        phi = np.atleast_1d(eigenfunction_eval(p, pts, ou))
        for t in times:
            moved = mehler_expectation(lambda y, p=p: eigenfunction_eval(p, y, ou), t, pts, ou,
                                       nodes=nodes)
            expect = math.exp(-ou.b * sum(p) * t) * phi * (1.0 + (1e-6 if corrupt else 0.0))
            worst = max(worst, float(np.max(np.abs(moved - expect) / np.maximum(1.0, np.abs(phi)))))
    reports.append(make_report("eigen-action P_t phi_p = e^{-b|p|t} phi_p", worst, len(pts),
                               tolerance=1e-8))
    one = SpectralFunction.eigen((0,) * ou.dim, dim=ou.dim)
    mean_err = float(abs(grid.expect(np.atleast_1d(one(grid.nodes, ou))) - 1.0))
    reports.append(make_report("quadrature mass", mean_err, len(grid.nodes), tolerance=1e-12))
    return reports


def cmd_spectral_check(cfg: ExperimentConfig, out: Path, corrupt: bool = False) -> int:
    reports = spectral_reports(cfg.sim.ou, cfg.spectral_degree, cfg.quadrature_nodes, corrupt)
    return EXIT_PASS if _write_reports(out, "spectral-check", reports) else EXIT_FAIL


# -- limits ------------------------------------------------------------------------------------


def cmd_limits(cfg: ExperimentConfig, out: Path, identity: bool = False) -> int:
    ou, mech = cfg.sim.ou, cfg.sim.mech
    f = spectral_function(cfg.limit_coeffs, ou.dim)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "m_t.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "re", "im"])
        for t in cfg.limit_times:
            v = m_t(f, t, mech, ou)
            w.writerow([repr(t), repr(v.real), repr(v.imag)])
    m = m_limit(f, mech, ou)
    with open(out / "cf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "re", "im"])
        for th in cfg.settings.thetas:
            v = cf_eval(m, th)
            w.writerow([repr(float(th)), repr(v.real), repr(v.imag)])
    summary = {"f": [list(c) for c in cfg.limit_coeffs], "m_limit": [m.value.real, m.value.imag]}
    print(f"m[f] = {m.value.real:.10g} {m.value.imag:+.10g}i")
    ok = True
    if identity:
        # the identity concerns the small and critical parts only
        dec = classify(f, ou, mech)
        g = dec.f_s + dec.f_c
        rows = []
        for n in range(cfg.identity_terms + 1 if not g.is_zero() else 0):
            lhs, rhs = z1_partial_sum(g, n, mech, ou)
            rows.append({"n": n, "sum": [lhs.real, lhs.imag], "m_next": [rhs.real, rhs.imag],
                         "error": abs(lhs - rhs)})
        rep = make_report("Z_1 telescoping identity", max((r["error"] for r in rows), default=0.0),
                          len(rows), tolerance=1e-6, rows=rows, vacuous=g.is_zero(),
                          excluded_large_part=not dec.f_l.is_zero())
        summary["identity"] = json.loads(rep.to_json())
        print(rep.line())
        ok = rep.passed
    _write_json(out / "limits.json", summary)
    return EXIT_PASS if ok else EXIT_FAIL


# -- simulate / verify ---------------------------------------------------------------------------


def _ensemble_files(cfg: ExperimentConfig, main: bool) -> tuple[str, str]:
    suffix = "" if main else f"-n{cfg.sim.n}"
    return f"runs{suffix}.jsonl", f"manifest{suffix}.json"


def simulate(cfg: ExperimentConfig, out: Path, parallelism: int = 1, main: bool = True):
    """Run the ensemble, write JSONL, summary CSV and manifest; returns (records, manifest)."""
    out.mkdir(parents=True, exist_ok=True)
    res = run_ensemble(cfg.sim, cfg.replicates, cfg.seed, parallelism=parallelism)
    runs_name, manifest_name = _ensemble_files(cfg, main)
    write_jsonl(res.records, out / runs_name)
    files = [runs_name]
    if main:
        dim = cfg.sim.ou.dim
        fns = {"".join(map(str, p)): SpectralFunction.eigen(p, dim=dim)
               for p in multi_indices(dim, cfg.sim.degree_cap)}
        write_summary_csv(res.records, fns, out / "summary.csv")
        files.append("summary.csv")
    manifest = {
        "tool": "superou", "version": __version__, "kernel_backend": BACKEND,
        "config_hash": cfg.digest(),
        "master_seed": cfg.seed, "seed_scheme": SEED_SCHEME,
        "replicate_seeds": [str(s) for s in res.seeds],
        "files": {name: _sha256(out / name) for name in files},
        "aborted_replicates": res.aborted, "survival": res.survival_report(),
    }
    _write_json(out / manifest_name, manifest)
    return res.records, manifest


def load_or_simulate(cfg: ExperimentConfig, out: Path, parallelism: int = 1, main: bool = True):
    runs_name, manifest_name = _ensemble_files(cfg, main)
    mpath = out / manifest_name
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        if manifest.get("config_hash") == cfg.digest() and manifest.get("master_seed") == cfg.seed \
                and (out / runs_name).exists() \
                and manifest["files"].get(runs_name) == _sha256(out / runs_name):
            with open(out / runs_name) as fh:
                return [record_from_json(json.loads(line), cfg.sim) for line in fh]
    return simulate(cfg, out, parallelism, main)[0]


def cmd_simulate(cfg: ExperimentConfig, out: Path, parallelism: int = 1) -> int:
    _, manifest = simulate(cfg, out, parallelism)
    surv = manifest["survival"]
    print(f"{cfg.replicates} replicates, survival fraction {surv['survival_fraction']:.4f} "
          f"(eventual survival probability {surv['target']:.4f})")
    if manifest["aborted_replicates"]:
        print(f"aborted replicates (particle cap): {manifest['aborted_replicates']}",
              file=sys.stderr)
        return EXIT_RESOURCE
    return EXIT_PASS


def cmd_verify(cfg: ExperimentConfig, suite: str, out: Path, parallelism: int = 1) -> int:
    ensembles = {cfg.sim.n: load_or_simulate(cfg, out, parallelism)}
    if suite == "laplace":
        for n in cfg.settings.laplace_n:
            if n not in ensembles:
                ensembles[n] = load_or_simulate(cfg.with_n(n), out, parallelism, main=False)
        ensembles = {n: ensembles[n] for n in cfg.settings.laplace_n}
    reports = suites.run_suite(suite, ensembles, cfg.settings)
    return EXIT_PASS if _write_reports(out, suite, reports) else EXIT_FAIL


def cmd_report(out: Path) -> int:
    rdir = out / "reports"
    files = sorted(rdir.glob("*.json")) if rdir.exists() else []
    if not files:
        raise ConfigError(f"no reports under {rdir}; run verify or spectral-check first",
                          "cli.cmd_report")
    rows, ok = [], True
    for path in files:
        for rep in json.loads(path.read_text()):
            rows.append([path.stem, rep["name"], rep["observed"], rep["tolerance"],
                         rep["mc_term"], rep["bias_allowance"], rep["n"], rep["passed"]])
            ok &= rep["passed"]
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["suite", "name", "observed", "tolerance", "mc_term", "bias_allowance", "n",
                    "pass"])
        w.writerows(rows)
    for r in rows:
        print(f"{'PASS' if r[7] else 'FAIL'} [{r[0]}] {r[1]}: {r[2]:.6g} vs {r[3]:.6g}")
    return EXIT_PASS if ok else EXIT_FAIL


# -- entry point ---------------------------------------------------------------------------------


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("parallelism must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment configuration")
    common.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--parallelism", type=_positive, default=1, help="worker processes")
    parser = argparse.ArgumentParser(prog="superou", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"superou {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("spectral-check", parents=[common], help="orthonormality and eigen-action")
    lim = sub.add_parser("limits", parents=[common], help="m_t[f], m[f] and the limit CF")
    lim.add_argument("--identity", action="store_true", help="check the Z_1 telescoping identity")
    sub.add_parser("simulate", parents=[common], help="run the ensemble")
    ver = sub.add_parser("verify", parents=[common], help="run one verification suite")
    ver.add_argument("suite", choices=suites.SUITES)
    sub.add_parser("report", parents=[common], help="collect stored reports")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.out)
        if args.config is None:
            parser.error(f"{args.command} requires --config")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.command == "spectral-check":
            return cmd_spectral_check(cfg, args.out)
        if args.command == "limits":
            return cmd_limits(cfg, args.out, args.identity)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out, args.parallelism)
        return cmd_verify(cfg, args.suite, args.out, args.parallelism)
    except SuperOUError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except MemoryError:
        print(f"error: [cli.{args.command}] out of memory", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":
    sys.exit(main())
