"""Command-line driver: ``disknls <subcommand> [flags]``.

Every run writes CSV tables plus a ``<name>.manifest.json`` (full config,
seed, package version, wall time) into the output directory, which defaults
to $DISKNLS_OUTPUT_DIR or the current directory. Exit codes: 0 success,
2 precondition violation, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
from dataclasses import asdict, dataclass, field
from importlib import metadata
import json
import math
import os
from pathlib import Path
import sys
import time

import numpy as np

from . import analysis_norms, arithmetic, gibbs, nls_flow, random_field, spectral_disk
from .errors import BlowUpError, PreconditionError

OUTPUT_ENV = "DISKNLS_OUTPUT_DIR"
EXIT_OK, EXIT_PRECONDITION, EXIT_ABORT = 0, 2, 3


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunConfig:
    subcommand: str
    params: dict
    seed: int | None
    output: Path
    name: str

    def validate(self) -> None:
        p = self.params
        for key in ("n", "samples", "trials"):
            if p.get(key) is not None and p[key] < 1:
                raise PreconditionError(f"--{key} must be a positive integer, got {p[key]}")
        if p.get("t") is not None and p["t"] < 0:
            raise PreconditionError(f"--t must be >= 0, got {p['t']}")
        if p.get("dt") is not None and not p["dt"] > 0:
            raise PreconditionError(f"--dt must be positive, got {p['dt']}")
        if p.get("sign") == "focusing" and p.get("rho") is None and self.subcommand == "invariance":
            raise PreconditionError("focusing runs need --rho (the L^2 cutoff)")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise PreconditionError("--seed must be a 64-bit unsigned integer")


@dataclass
class RunResult:
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)
    report: dict = field(default_factory=dict)
    stdout: list = field(default_factory=list)


# -- writers -------------------------------------------------------------------

def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, Path):
        return str(obj)
    return obj


# -- subcommands ---------------------------------------------------------------

def run_basis(cfg: RunConfig) -> RunResult:
    p = cfg.params
    basis = spectral_disk.build_basis(p["n"], p["m"])
    gram = basis.gram()
    err = float(np.max(np.abs(gram - np.eye(basis.dimension))))
    res = RunResult(report={"gram_error": err, "M": basis.quadrature.nodes.size})
    res.tables[p["export"] or f"{cfg.name}.csv"] = (("n", "z_n", "c_n"), spectral_disk.export_rows(basis))
    return res


def run_sample(cfg: RunConfig) -> RunResult:
    p = cfg.params
    stream = random_field.NoiseStream(cfg.seed)
    zeros = spectral_disk.dirichlet_zeros(p["n"])
    coeffs = random_field.sample_free_batch(stream, p["samples"], p["n"], zeros)
    res = RunResult(report={"mean_mass": float(np.mean(nls_flow.mass(coeffs)))})
    res.tables[f"{cfg.name}.csv"] = (("k", "n", "re", "im"), random_field.sample_rows(coeffs))
    return res


def run_evolve(cfg: RunConfig) -> RunResult:
    p = cfg.params
    stream = random_field.NoiseStream(cfg.seed)
    basis = spectral_disk.build_basis(p["n"])
    phi = random_field.sample_free(stream, p["sample_index"], p["n"], basis.zeros).coeffs
    fc = nls_flow.FlowConfig(n=p["n"], t_final=p["t"], sign=p["sign"], alpha=p["alpha"],
                             dt=p["dt"], integrator=p["integrator"], save_every=p["save_every"],
                             nonlinear_scale=p["nonlinear_scale"])
    traj = nls_flow.evolve(phi, fc, basis)
    res = RunResult(report={"flow": fc.as_dict(), **traj.diagnostics})
    res.tables[f"{cfg.name}.csv"] = (("t", "n", "re", "im"), nls_flow.trajectory_rows(traj))
    return res


def run_invariance(cfg: RunConfig) -> RunResult:
    p = cfg.params
    rep = gibbs.invariance_test(p["n"], p["sign"], p["alpha"], p["rho"], p["t"],
                                samples=p["samples"], stream=random_field.NoiseStream(cfg.seed),
                                dt=p["dt"], nonlinear_scale=p["nonlinear_scale"])
    rows = [(r.observable, r.mean_t0, r.se_t0, r.mean_tT, r.se_tT, r.z, r.status)
            for r in rep.results]
    res = RunResult(report={"passed": rep.passed(), "effective_sample_size": rep.effective_sample_size,
                            "config": rep.config})
    res.tables[f"{cfg.name}.csv"] = (("observable", "mean_t0", "se_t0", "mean_T", "se_T", "z", "status"),
                                     rows)
    res.stdout = [f"{r[0]}: z = {r[5]:.3f} ({r[6]})" for r in rows]
    return res


def run_converge(cfg: RunConfig) -> RunResult:
    p = cfg.params
    table = analysis_norms.convergence_study(
        p["n_list"], p["s"], p["t"], random_field.NoiseStream(cfg.seed), p["samples"],
        sign=p["sign"], alpha=p["alpha"], nonlinear_scale=p["nonlinear_scale"], dt=p["dt"])
    res = RunResult(report={"fitted_exponent": table.fitted_exponent(),
                            "decreasing_fraction": table.decreasing_fraction(),
                            "passed": table.passed(), "params": table.params})
    res.tables[f"{cfg.name}.csv"] = (("N", "d_k", "fitted_exponent"), table.rows())
    per_sample = [(k, n, d) for k, row in enumerate(table.distances)
                  for n, d in zip(table.n_list, row)]
    res.tables[f"{cfg.name}_samples.csv"] = (("sample", "N", "d"), per_sample)
    return res


def run_phase(cfg: RunConfig) -> RunResult:
    p = cfg.params
    stream = random_field.NoiseStream(cfg.seed)
    rows = gibbs.phase_sweep(p["n_list"], p["rho_grid"], p["samples"], stream)
    res = RunResult()
    res.tables[f"{cfg.name}.csv"] = (
        ("N", "rho", "logZ_hat", "stderr", "ess", "flags"),
        [(r.n, r.rho, r.log_mean, r.stderr, r.effective_sample_size, "; ".join(r.flags))
         for r in rows])
    spikes = []
    for n in p["n_list"]:
        basis = spectral_disk.build_basis(n)
        for rho in p["rho_grid"]:
            sp = gibbs.spike_profile(n, rho, basis.zeros)
            h = gibbs.blowup_criterion(sp.coeffs, basis)["H_value"]
            wit = gibbs.spike_witness_bound(n, rho, basis)
            spikes.append((n, rho, sp.amplitude_constant, h, wit.log_lower_bound))
    res.tables[f"{cfg.name}_spike.csv"] = (("N", "rho", "l4_over_rho_sqrtN", "H", "log_witness"), spikes)
    if p["small_rho"]:
        small = gibbs.small_rho_protocol(p["rho_grid"], p["n_list"], p["samples"], stream)
        res.report["small_rho"] = small.rho
        res.stdout.append(f"small-rho protocol: rho = {small.rho}")
    return res


def run_lattice(cfg: RunConfig) -> RunResult:
    p = cfg.params
    res = RunResult()
    if p["r2"] is not None:
        box = arithmetic.LatticeBox(tuple(p["box"][:2]), p["box"][2]) if p["box"] else None
        count = arithmetic.circle_points(p["r2"], box)
        res.report["count"] = count
        res.stdout.append(str(count))
    if p["sweep"] is not None:
        sw = arithmetic.divisor_bound_sweep(p["sweep"], p["trials"] or 200, p["r_max"], cfg.seed or 0)
        res.report.update(c_min=sw.c_min, small_box_max=sw.small_box_max())
        res.tables[f"{cfg.name}_sweep.csv"] = (
            ("R", "R1", "corner_x", "corner_y", "count"),
            [(r, s, c[0], c[1], k) for r, s, c, k in sw.rows])
        res.tables[f"{cfg.name}_bound.csv"] = (("R1", "max_count", "bound"), sw.table())
        res.stdout.append(f"c_min = {sw.c_min!r}")
    if p["r2"] is None and p["sweep"] is None:
        raise PreconditionError("lattice needs --r2 or --sweep")
    return res


def run_probes(cfg: RunConfig) -> RunResult:
    p = cfg.params
    stream = random_field.NoiseStream(cfg.seed)
    kind = p["kind"]
    if kind == "embedding":
        sweep = analysis_norms.embedding_probe(p["b"], p["p"], p["values"] or [8, 16, 32, 64],
                                               p["trials"], stream)
    elif kind == "duhamel":
        sweep = analysis_norms.duhamel_probe(p["b"], p["trials"], stream, p["values"] or (8, 16, 32))
    else:
        sweep = analysis_norms.bilinear_probe(p["b"], p["mu"], p["values"] or (8, 16, 32),
                                              p["trials"], stream)
    res = RunResult(report={"max_ratios": sweep.max_ratios(), "flatness": sweep.flatness(),
                            "flat": sweep.flat(), "outlier_free": sweep.outlier_free(),
                            "params": sweep.params})
    res.tables[f"{cfg.name}.csv"] = ((sweep.parameter, "trial", "lhs", "rhs", "ratio"), sweep.rows())
    res.stdout.append(f"{kind}: flatness {sweep.flatness():.3f}")
    return res


COMMANDS = {
    "basis": run_basis, "sample": run_sample, "evolve": run_evolve,
    "invariance": run_invariance, "converge": run_converge, "phase": run_phase,
    "lattice": run_lattice, "probes": run_probes,
}


# -- argument parsing ----------------------------------------------------------

def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",") if v]


def _float_list(text: str) -> list:
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disknls", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file with 'subcommand' and flag values")
    sub = parser.add_subparsers(dest="subcommand")

    def add(name, help_text, seed=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--output", help=f"output directory (default ${OUTPUT_ENV} or .)")
        sp.add_argument("--name", default=name, help="file stem for outputs")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        return sp

    def flow_flags(sp, t_default=0.3):
        sp.add_argument("--alpha", type=int, default=2)
        sp.add_argument("--sign", choices=sorted(nls_flow.SIGNS), default="defocusing")
        sp.add_argument("--t", type=float, default=t_default)
        sp.add_argument("--dt", type=float, default=None)
        sp.add_argument("--nonlinear-scale", type=float, default=1.0)

    sp = add("basis", "zeros and normalisation constants", seed=False)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--m", type=int, default=None, help="radial quadrature nodes")
    sp.add_argument("--export", default=None, help="CSV file name")

    sp = add("sample", "free-measure coefficient samples")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--samples", type=int, default=1)

    sp = add("evolve", "one trajectory of the truncated flow")
    sp.add_argument("--n", type=int, required=True)
    flow_flags(sp)
    sp.add_argument("--integrator", choices=nls_flow.INTEGRATORS, default="strang")
    sp.add_argument("--save-every", type=int, default=1)
    sp.add_argument("--sample-index", type=int, default=0)

    sp = add("invariance", "Gibbs invariance test")
    sp.add_argument("--n", type=int, default=16)
    flow_flags(sp)
    sp.add_argument("--rho", type=float, default=None)
    sp.add_argument("--samples", type=int, default=10_000)

    sp = add("converge", "coupled-noise convergence study")
    sp.add_argument("--n-list", type=_int_list, default=[8, 16, 32, 64])
    sp.add_argument("--s", type=float, default=0.4)
    sp.add_argument("--samples", type=int, default=20)
    flow_flags(sp)

    sp = add("phase", "focusing partition functions and spike profiles")
    sp.add_argument("--n-list", type=_int_list, default=[8, 16, 32])
    sp.add_argument("--rho-grid", type=_float_list, default=[0.1, 0.3, 1.0, 10.0, 40.0])
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--small-rho", action="store_true", help="also run the small-rho protocol")

    sp = add("lattice", "lattice points on circles")
    sp.add_argument("--r2", type=int, default=None)
    sp.add_argument("--box", type=int, nargs=3, metavar=("A", "B", "R1"), default=None)
    sp.add_argument("--sweep", type=int, default=None, metavar="R1_MAX")
    sp.add_argument("--trials", type=int, default=None)
    sp.add_argument("--r-max", type=int, default=10**4)

    sp = add("probes", "inequality probes")
    sp.add_argument("--kind", choices=("embedding", "duhamel", "bilinear"), required=True)
    sp.add_argument("--b", type=float, default=None)
    sp.add_argument("--p", type=float, default=3.0)
    sp.add_argument("--mu", type=float, default=0.1)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--values", type=_int_list, default=None, help="|I| or N sweep")
    return parser


def _config_argv(path: str) -> list:
    data = json.loads(Path(path).read_text())
    if "subcommand" not in data:
        raise PreconditionError(f"config file {path} has no 'subcommand'")
    argv = [data.pop("subcommand")]
    for key, value in data.items():
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        elif value is False or value is None:
            continue
        elif isinstance(value, list):
            if key == "box":
                argv += [flag, *map(str, value)]
            else:
                argv += [flag, ",".join(map(str, value))]
        else:
            argv += [flag, str(value)]
    return argv


def parse_config(argv) -> RunConfig:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        args = parser.parse_args(_config_argv(args.config))
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        raise PreconditionError("a subcommand is required")
    params = {k: v for k, v in vars(args).items()
              if k not in ("config", "subcommand", "output", "name", "seed")}
    if args.subcommand == "probes" and params["b"] is None:
        params["b"] = 0.4 if params["kind"] == "embedding" else 0.55
    output = Path(args.output or os.environ.get(OUTPUT_ENV) or ".")
    cfg = RunConfig(args.subcommand, params, getattr(args, "seed", None), output, args.name)
    cfg.validate()
    return cfg


def execute(cfg: RunConfig) -> RunResult:
    start = time.perf_counter()
    result = COMMANDS[cfg.subcommand](cfg)
    wall = time.perf_counter() - start
    cfg.output.mkdir(parents=True, exist_ok=True)
    for fname, (header, rows) in result.tables.items():
        write_csv(cfg.output / fname, header, rows)
    manifest = {
        "subcommand": cfg.subcommand,
        "config": asdict(cfg) | {"output": str(cfg.output)},
        "seed": cfg.seed,
        "version": package_version(),
        "wall_time_s": wall,
        "outputs": sorted(result.tables),
        "report": result.report,
    }
    (cfg.output / f"{cfg.name}.manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2))
    return result


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        result = execute(cfg)
    except PreconditionError as exc:
        print(f"disknls: precondition violated: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except BlowUpError as exc:
        print(f"disknls: numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    for line in result.stdout:
        print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
