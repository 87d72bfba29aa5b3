"""Command line front end: configuration parsing, orchestration and field export.

Configs are INI files with sections ``[mesh]``, ``[model]``, ``[sources]``,
``[solver]`` and ``[output]``; see the README for every key.  Exit codes:
0 success, 1 numerical failure, 2 usage or configuration error.
"""

import argparse
import configparser
import csv
import hashlib
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .constitutive import make_power_law_model, validation_model, validation_porosity
from .errors import (
    AcutenessError,
    ConfigError,
    DataError,
    LumpflowError,
    MeshParseError,
    ModelError,
    SolverError,
)
from .mesh import build_geometry, generate_structured_unit_square, load_mesh
from .mms import DEFAULT_LEVELS, convergence_study, exact_state, mms_problem, validation_solution
from .stepper import (
    DIRICHLET,
    IMPLICIT,
    MANUFACTURED,
    NO_FLUX,
    POINTWISE,
    PROJECTED,
    SEMI_IMPLICIT,
    WELLS,
    SolverConfig,
    SourceModel,
    TimeState,
    initial_saturation,
    run,
)

log = logging.getLogger("lumpflow")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2

# key -> (converter, default); a default of REQUIRED must be supplied
REQUIRED = object()
_float, _int, _str = float, int, str


def _bool(v):
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v):
    return tuple(int(x) for x in v.replace(",", " ").split())


def _str_list(v):
    return tuple(x for x in v.replace(",", " ").split())


SCHEMA = {
    "mesh": {
        "n": (_int, None),
        "file": (_str, None),
        "levels": (_int_list, DEFAULT_LEVELS),
        "strict_acute": (_bool, True),
    },
    "model": {
        "preset": (_str, "validation"),
        "A": (_float, 50.0),
        "s_switch": (_float, 0.05),
        "theta_w": (_float, 2.0),
        "theta_o": (_float, 2.0),
        "alpha_w": (_float, 0.1),
        "alpha_o": (_float, 0.1),
        "beta_3": (_float, 0.5),
        "beta_4": (_float, 1.0),
        "alpha_3": (_float, 0.1),
        "k_w": (_float, None),
        "k_o": (_float, None),
        "c": (_float, 1.0),
        "offset": (_float, 0.0),
    },
    "sources": {
        "mode": (_str, MANUFACTURED),
        "bc": (_str, None),
        "solution": (_str, "validation"),
        "sampling": (_str, None),
        "porosity": (_str, "validation"),
        "well_rate": (_float, 36.0),
        "s_in": (_float, 1.0),
        "initial_saturation": (_str, "0.5"),
        "seed": (_int, 0),
    },
    "solver": {
        "scheme": (_str, SEMI_IMPLICIT),
        "tau": (_float, REQUIRED),
        "T": (_float, 1.0),
        "newton_tol": (_float, 1e-10),
        "newton_max_iters": (_int, 50),
        "linear_solver": (_str, "direct_sparse"),
    },
    "output": {
        "dir": (_str, "lumpflow-out"),
        "fields": (_str_list, ("csv",)),
        "cadence": (_int, 0),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # section -> key -> converted value
    text: str = ""

    def __getitem__(self, dotted):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    @property
    def digest(self):
        """Hash of the canonical (sorted, converted) configuration."""
        canon = "\n".join(
            f"{s}.{k}={self.values[s][k]!r}" for s in sorted(self.values) for k in sorted(self.values[s])
        )
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def parse_config(text, overrides=()):
    """Parse INI text into a :class:`RunConfig`; all problems are reported together."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"parse error: {exc}".replace("\n", " ")]) from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError([f"override must look like section.key=value, got {item!r}"])
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, value.strip())

    problems = []
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        values[section] = {}
        given = dict(cp.items(section)) if cp.has_section(section) else {}
        for key in given:
            if key not in keys:
                problems.append(f"unknown key {section}.{key}")
        for key, (conv, default) in keys.items():
            if key in given:
                try:
                    values[section][key] = conv(given[key])
                except ValueError as exc:
                    problems.append(f"{section}.{key}: {exc}")
            elif default is REQUIRED:
                problems.append(f"{section}.{key} required")
            else:
                values[section][key] = default
    if not problems:
        problems.extend(_validate(values))
    if problems:
        raise ConfigError(problems)
    return RunConfig(values, text)


def _validate(v):
    p = []
    mesh, model, src, solver, out = (v[s] for s in ("mesh", "model", "sources", "solver", "output"))
    if mesh["n"] is not None and mesh["file"] is not None:
        p.append("mesh: give either n or file, not both")
    if mesh["n"] is not None and mesh["n"] < 1:
        p.append(f"mesh.n must be a positive integer, got {mesh['n']}")
    if any(n < 1 for n in mesh["levels"]) or list(mesh["levels"]) != sorted(mesh["levels"]):
        p.append("mesh.levels must be positive and increasing")
    if model["preset"] not in ("validation", "power_law"):
        p.append(f"model.preset must be validation or power_law, got {model['preset']!r}")
    if src["mode"] not in (WELLS, MANUFACTURED):
        p.append(f"sources.mode must be wells or manufactured, got {src['mode']!r}")
    bc = src["bc"] or (DIRICHLET if src["mode"] == MANUFACTURED else NO_FLUX)
    src["bc"] = bc
    if bc not in (NO_FLUX, DIRICHLET):
        p.append(f"sources.bc must be no_flux or dirichlet, got {bc!r}")
    if bc == DIRICHLET and src["mode"] != MANUFACTURED:
        p.append("sources.bc = dirichlet needs boundary traces, which only the manufactured mode provides")
    if src["solution"] != "validation":
        p.append(f"sources.solution: only 'validation' is available, got {src['solution']!r}")
    src["sampling"] = src["sampling"] or (POINTWISE if src["mode"] == MANUFACTURED else PROJECTED)
    if src["sampling"] not in (POINTWISE, PROJECTED):
        p.append(f"sources.sampling must be pointwise or projected, got {src['sampling']!r}")
    if src["porosity"] != "validation":
        try:
            if float(src["porosity"]) <= 0:
                p.append("sources.porosity must be positive")
        except ValueError:
            p.append(f"sources.porosity must be 'validation' or a number, got {src['porosity']!r}")
    if src["initial_saturation"] != "random":
        try:
            s0 = float(src["initial_saturation"])
            if not 0.0 <= s0 <= 1.0:
                p.append("sources.initial_saturation must lie in [0, 1]")
        except ValueError:
            p.append("sources.initial_saturation must be 'random' or a number in [0, 1]")
    if not 0.0 <= src["s_in"] <= 1.0:
        p.append("sources.s_in must lie in [0, 1]")
    if src["well_rate"] < 0:
        p.append("sources.well_rate must be nonnegative")
    tau, T = solver["tau"], solver["T"]
    if not (tau > 0) or not math.isfinite(tau):
        p.append(f"solver.tau must be positive, got {tau}")
    elif not T >= tau:
        p.append(f"solver.T must be at least solver.tau, got T={T}")
    if solver["scheme"] not in (SEMI_IMPLICIT, IMPLICIT):
        p.append(f"solver.scheme must be semi_implicit or implicit, got {solver['scheme']!r}")
    if solver["linear_solver"] not in ("direct_sparse", "iterative"):
        p.append("solver.linear_solver must be direct_sparse or iterative")
    for f in out["fields"]:
        if f not in ("csv", "vtk", "none"):
            p.append(f"output.fields: unknown format {f!r}")
    if out["cadence"] < 0:
        p.append("output.cadence must be nonnegative")
    return p


# ---------------------------------------------------------------------------
# building the problem


def build_model(cfg):
    m = cfg.values["model"]
    if m["preset"] == "validation":
        return validation_model(A=m["A"], s_switch=m["s_switch"])
    kw = {k: m[k] for k in ("k_w", "k_o") if m[k] is not None}
    return make_power_law_model(
        m["theta_w"], m["theta_o"], m["alpha_w"], m["alpha_o"], m["beta_3"], m["beta_4"], m["alpha_3"],
        c=m["c"], offset=m["offset"], **kw,
    )


def build_mesh(cfg):
    mesh = cfg.values["mesh"]
    if mesh["file"] is not None:
        path = Path(mesh["file"])
        return load_mesh(path.read_text())
    return generate_structured_unit_square(mesh["n"] if mesh["n"] is not None else 10)


def _porosity(cfg):
    p = cfg["sources.porosity"]
    return validation_porosity if p == "validation" else float(p)


def build_problem(cfg, geom, model):
    """Return ``(source_model, initial_state)``."""
    s = cfg.values["sources"]
    if s["mode"] == MANUFACTURED:
        _, exact, src = mms_problem(model, validation_solution(), _porosity(cfg), s["sampling"])
        if s["bc"] == NO_FLUX:
            src = SourceModel(mode=MANUFACTURED, f1=src.f1, f2=src.f2, bc=NO_FLUX,
                              porosity=src.porosity, sampling=src.sampling)
        state0 = exact_state(geom, model, exact, 0.0)
        if s["bc"] == NO_FLUX:
            P = state0.P_w.values - np.dot(geom.masses, state0.P_w.values) / geom.total_measure
            state0 = TimeState.from_arrays(geom, 0, 0.0, state0.S.values, P, P + model.pc(state0.S.values))
        return src, state0
    rate = s["well_rate"]
    s_in = s["s_in"]
    src = SourceModel(
        mode=WELLS,
        q_bar=lambda t, x, y: rate * x**2 * y**2,
        q_low=lambda t, x, y: rate * (1 - x) ** 2 * (1 - y) ** 2,
        s_in=lambda t, x, y: s_in + 0 * x,
        bc=NO_FLUX,
        porosity=_porosity(cfg),
    )
    if s["initial_saturation"] == "random":
        S0 = np.random.default_rng(s["seed"]).uniform(0.0, 1.0, geom.n_nodes)
    else:
        s0 = float(s["initial_saturation"])
        S0 = initial_saturation(geom, lambda x, y: s0 + 0 * x)
    P0 = np.zeros(geom.n_nodes)
    return src, TimeState.from_arrays(geom, 0, 0.0, S0, P0, P0 + model.pc(S0))


def solver_config(cfg):
    s = cfg.values["solver"]
    return SolverConfig(
        tau=s["tau"], T=s["T"], scheme=s["scheme"], newton_tol=s["newton_tol"],
        newton_max_iters=s["newton_max_iters"], linear_solver=s["linear_solver"],
        strict_acute=cfg["mesh.strict_acute"],
    )


# ---------------------------------------------------------------------------
# output


def provenance(cfg):
    return [f"lumpflow {__version__}", f"config sha256:{cfg.digest}"]


def export_fields(state, geom, path, fmt="csv", header_lines=()):
    """Write nodal ``S``, ``P_w``, ``P_o`` as CSV or legacy ASCII VTK (17 significant digits)."""
    path = Path(path)
    X = geom.mesh.nodes
    S, Pw, Po = state.S.values, state.P_w.values, state.P_o.values
    g = "%.17g"
    lines = []
    if fmt == "csv":
        lines += [f"# {h}" for h in header_lines]
        lines.append("node_id,x,y,S,Pw,Po")
        y = X[:, 1] if X.shape[1] > 1 else np.zeros(len(X))
        for k in range(len(X)):
            lines.append(",".join([str(k)] + [g % v for v in (X[k, 0], y[k], S[k], Pw[k], Po[k])]))
    elif fmt == "vtk":
        d = geom.dim
        title = " | ".join(["lumpflow fields", *header_lines])[:255]
        lines += ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
        lines.append(f"POINTS {len(X)} double")
        pad = np.zeros((len(X), 3))
        pad[:, :d] = X
        lines += [" ".join(g % v for v in p) for p in pad]
        el = geom.mesh.elements
        lines.append(f"CELLS {len(el)} {len(el) * (d + 2)}")
        lines += [" ".join(map(str, [d + 1, *e])) for e in el]
        lines.append(f"CELL_TYPES {len(el)}")
        cell_type = {1: 3, 2: 5, 3: 10}[d]
        lines += [str(cell_type)] * len(el)
        lines.append(f"POINT_DATA {len(X)}")
        for name, arr in (("S", S), ("Pw", Pw), ("Po", Po)):
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [g % v for v in arr]
    else:
        raise ValueError(f"unknown field format {fmt!r}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def read_fields_csv(path):
    """Inverse of the CSV export: ``node_id, x, y, S, Pw, Po`` columns as float arrays."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    header, body = rows[0], np.array(rows[1:], dtype=float)
    return {name: body[:, k] for k, name in enumerate(header)}


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args):
    cfg = parse_config(Path(args.config).read_text(), args.set)
    model = build_model(cfg)
    geom = build_geometry(build_mesh(cfg), strict=cfg["mesh.strict_acute"])
    src, state0 = build_problem(cfg, geom, model)
    scfg = solver_config(cfg)
    outdir = Path(args.out or cfg["output.dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    formats = [f for f in cfg["output.fields"] if f != "none"]
    cadence = cfg["output.cadence"]
    head = provenance(cfg)

    def snapshot(state, row):
        final = state.n == scfg.n_steps
        if final or (cadence and state.n % cadence == 0):
            for fmt in formats:
                export_fields(state, geom, outdir / f"fields_{state.n:05d}.{fmt}", fmt, head)

    final, logbook = run(state0, model, geom, src, scfg, sinks=[snapshot])
    (outdir / "runlog.csv").write_text(logbook.to_csv(head))
    print(f"completed {final.n} steps to t={final.t:.6g}; S in [{final.S.values.min():.6g}, "
          f"{final.S.values.max():.6g}]; output in {outdir}")
    return EXIT_OK


def cmd_mms(args):
    cfg = parse_config(Path(args.config).read_text(), args.set)
    if cfg["sources.mode"] != MANUFACTURED or cfg["sources.bc"] != DIRICHLET:
        raise ConfigError(["mms needs sources.mode = manufactured and sources.bc = dirichlet"])
    model = build_model(cfg)
    table = convergence_study(
        cfg["mesh.levels"], scheme=cfg["solver.scheme"], T=cfg["solver.T"], model=model,
        porosity=_porosity(cfg), sampling=cfg["sources.sampling"],
    )
    outdir = Path(args.out or cfg["output.dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    head = provenance(cfg)
    (outdir / "convergence.csv").write_text(table.to_csv(head))
    (outdir / "convergence.txt").write_text(table.to_text())
    sys.stdout.write(table.to_text())
    print(f"wrote {outdir / 'convergence.csv'}")
    return EXIT_OK


def cmd_check_mesh(args):
    if args.structured is not None:
        mesh = generate_structured_unit_square(args.structured)
        label = f"structured n={args.structured}"
    else:
        if args.file is None:
            raise ConfigError(["check-mesh needs a mesh file or --structured N"])
        mesh = load_mesh(Path(args.file).read_text())
        label = args.file
    try:
        geom = build_geometry(mesh, strict=True)
    except AcutenessError as exc:
        rep = exc.report
        print(f"mesh: {label}")
        print(f"acute: no\nworst_angle: {rep.worst_angle:.17g}\noffending_elements: {list(rep.offenders)[:20]}")
        return EXIT_NUMERICAL
    rep = geom.acuteness
    print(f"mesh: {label}")
    print(f"nodes: {geom.n_nodes}\nelements: {mesh.n_elements}\nedges: {geom.n_edges}")
    print(f"boundary_nodes: {len(mesh.boundary_nodes)}")
    print(f"measure: {geom.total_measure:.17g}\nh: {geom.h:.17g}")
    print(f"acute: yes\nworst_angle: {rep.worst_angle:.17g}")
    print(f"min_c: {geom.c.min():.17g}\nmax_c: {geom.c.max():.17g}")
    return EXIT_OK


def cmd_identities(args):
    from .identities import run_suite

    rows = run_suite(seed=args.seed, count=args.count)
    ok = True
    for k, n_nodes, res in rows:
        print(res.to_json(mesh=k, nodes=n_nodes, seed=args.seed))
        ok &= res.ok
    print(f"identities: {'PASS' if ok else 'FAIL'} ({len(rows)} checks)")
    return EXIT_OK if ok else EXIT_NUMERICAL


def _parser():
    p = argparse.ArgumentParser(prog="lumpflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lumpflow {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    for name, helptext in (("run", "run one simulation"), ("mms", "manufactured-solution convergence study")):
        sp_ = sub.add_parser(name, help=helptext)
        sp_.add_argument("config")
        sp_.add_argument("--out", help="output directory (overrides output.dir)")
        sp_.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                         help="override a config value; may repeat")

    cm = sub.add_parser("check-mesh", help="geometry and angle-condition report")
    cm.add_argument("file", nargs="?")
    cm.add_argument("--structured", type=int, metavar="N", help="check the structured n x n mesh instead")

    idp = sub.add_parser("identities", help="discrete-identity suite on random acute meshes")
    idp.add_argument("--seed", type=int, default=0)
    idp.add_argument("--count", type=int, default=20)
    return p


COMMANDS = {"run": cmd_run, "mms": cmd_mms, "check-mesh": cmd_check_mesh, "identities": cmd_identities}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (MeshParseError, AcutenessError, ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, DataError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LumpflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
