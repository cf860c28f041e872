"""Command-line interface: ``sfpca {fit,select,simulate,roc}``.

Settings resolve as command-line flags, then a TOML file given by
``--config``, then built-in defaults.  A ``manifest.json`` written by an
earlier run is also accepted as ``--config``; its ``settings`` block then
replays that run.

Exit status is 0 on success, 2 for unreadable input or invalid settings and
3 when a solver did not converge (results are still written and flagged).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .core import DataMatrix, SFPCAConfig, deflate, fit
from .exceptions import ConvergenceWarning, SFPCAError
from .modelsel import ParamGrid, nested_select
from .prox import PenaltySpec
from .simlab import SimScenario, gen_data, roc_sweep
from .structmat import load_structure_matrix

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGED = 3

COMMANDS = ("fit", "select", "simulate", "roc")

DEFAULTS = {
    "input": None,
    "out": None,
    "rank": 1,
    "lambda_u": None,
    "lambda_v": None,
    "alpha_u": None,
    "alpha_v": None,
    "relative": False,
    "omega_u": None,
    "omega_v": None,
    "penalty": "l1",
    "scad_a": 3.7,
    "nonneg": False,
    "center": True,
    "header": False,
    "seed": 0,
    "threads": 1,
    "max_nested": 5,
    "max_outer": 500,
    "outer_tol": 1e-7,
    "df_method": "stated",
    "scenario": "rank3",
    "signal": "sine-60",
    "n": 100,
    "p": 200,
    "d": None,
    "alphas": [0.0, 10.0],
    "replicates": 10,
    "n_lambda": 41,
}


class UsageError(Exception):
    """Invalid input or settings; maps to exit status 2."""


@dataclass
class RunConfig:
    command: str
    settings: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.settings[name]
        except KeyError:
            raise AttributeError(name) from None


# ---------------------------------------------------------------- parsing


def _float_list(values, name):
    if values is None:
        return None
    if isinstance(values, (int, float)):
        values = [values]
    try:
        return [float(x) for x in values]
    except (TypeError, ValueError):
        raise UsageError(f"{name} must be a number or a list of numbers") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfpca", description="Sparse and functional PCA.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    # defaults are SUPPRESS so that only flags actually given override the file
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="TOML settings file or a previous manifest.json")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    model.add_argument("--input", help="data CSV, one observation per row")
    model.add_argument("--header", action="store_true", help="skip one header line")
    model.add_argument("--rank", type=int, help="number of factors K")
    for side in ("u", "v"):
        model.add_argument(f"--lambda-{side}", dest=f"lambda_{side}", type=float, nargs="+")
        model.add_argument(f"--alpha-{side}", dest=f"alpha_{side}", type=float, nargs="+")
        model.add_argument(f"--omega-{side}", dest=f"omega_{side}", metavar="FILE")
    model.add_argument("--penalty", choices=("l1", "scad", "none"))
    model.add_argument("--scad-a", dest="scad_a", type=float)
    model.add_argument("--nonneg", action="store_true")
    model.add_argument("--no-center", dest="center", action="store_false")
    model.add_argument("--max-outer", dest="max_outer", type=int)
    model.add_argument("--outer-tol", dest="outer_tol", type=float)

    quiet = {"argument_default": argparse.SUPPRESS}
    sub.add_parser("fit", parents=[common, model], help="fit K factors at fixed levels", **quiet)
    sel = sub.add_parser("select", parents=[common, model], help="choose levels by nested BIC",
                         **quiet)
    sel.add_argument("--relative", action="store_true",
                     help="lambda grids are fractions of lambda_max")
    sel.add_argument("--max-nested", dest="max_nested", type=int)
    sel.add_argument("--df-method", dest="df_method", choices=("stated", "ridge"))

    scen = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    scen.add_argument("--n", type=int)
    scen.add_argument("--p", type=int)
    scen.add_argument("--signal", help="signal kind for rank-one scenarios")
    scen.add_argument("--d", type=float, help="signal scale for rank-one scenarios")

    sim = sub.add_parser("simulate", parents=[common, scen], help="write a simulated data set",
                         **quiet)
    sim.add_argument("--scenario", choices=("rank3", "rank1", "two-way"))

    roc = sub.add_parser("roc", parents=[common, scen], help="ROC sweep of support recovery",
                         **quiet)
    roc.add_argument("--alphas", type=float, nargs="+")
    roc.add_argument("--replicates", type=int)
    roc.add_argument("--n-lambda", dest="n_lambda", type=int)
    roc.add_argument("--penalty", choices=("l1", "scad"))
    return parser


def _read_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if path.suffix == ".json":
            data = json.loads(raw)
            data = data.get("settings", data)
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    data = {k.replace("-", "_"): v for k, v in data.items()}
    data.pop("command", None)
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return data


def resolve(argv=None) -> RunConfig:
    """Parse ``argv`` and merge it with the config file and defaults."""
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    args.pop("verbose", None)
    settings = dict(DEFAULTS)
    if "config" in args:
        settings.update(_read_config_file(args.pop("config")))
    settings.update(args)
    return RunConfig(command, _validate(command, settings))


def _validate(command, s) -> dict:
    if not s.get("out"):
        raise UsageError("--out is required")
    for key in ("lambda_u", "lambda_v", "alpha_u", "alpha_v", "alphas"):
        s[key] = _float_list(s[key], key)
    for key in ("rank", "seed", "threads", "n", "p", "replicates", "n_lambda", "max_nested",
                "max_outer"):
        if not isinstance(s[key], int) or isinstance(s[key], bool):
            raise UsageError(f"{key} must be an integer")
    if s["threads"] < 1:
        raise UsageError("threads must be at least 1")
    if command in ("fit", "select"):
        if not s.get("input"):
            raise UsageError("--input is required")
        for key in ("input", "omega_u", "omega_v"):
            if s[key] is not None and not Path(s[key]).is_file():
                raise UsageError(f"{key} file not found: {s[key]}")
        if s["rank"] < 1:
            raise UsageError("rank must be at least 1")
        if s["penalty"] not in ("l1", "scad", "none"):
            raise UsageError(f"unknown penalty {s['penalty']!r}")
    if command == "fit":
        for key in ("lambda_u", "lambda_v", "alpha_u", "alpha_v"):
            vals = s[key] if s[key] is not None else [0.0]
            if len(vals) != 1:
                raise UsageError(f"fit takes a single {key}, got {len(vals)} values")
            if not (np.isfinite(vals[0]) and vals[0] >= 0):
                raise UsageError(f"{key} must be finite and non-negative")
            s[key] = vals
    if command == "roc" and s["n_lambda"] < 2:
        raise UsageError("n_lambda must be at least 2")
    return s


# ---------------------------------------------------------------- I/O


def read_matrix(path, header: bool = False) -> np.ndarray:
    """Read a comma-separated numeric matrix; rows are observations."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            X = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2)
    except (OSError, ValueError, UserWarning) as exc:
        raise UsageError(f"cannot parse matrix {path}: {exc}") from None
    if X.size == 0:
        raise UsageError(f"matrix file {path} is empty")
    if not np.all(np.isfinite(X)):
        raise UsageError(f"matrix file {path} contains non-finite values")
    return X


def write_matrix(path, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in M:
            w.writerow([repr(float(x)) for x in row])


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x
                        for x in row])


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    import numba
    import scipy

    return {"sfpca": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": sys.version.split()[0]}


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(cfg: RunConfig, extra: dict | None = None) -> dict:
    inputs = {k: {"path": str(cfg.settings[k]), "sha256": _digest(cfg.settings[k])}
              for k in ("input", "omega_u", "omega_v")
              if cfg.command in ("fit", "select") and cfg.settings.get(k)}
    # the output directory is where a replay writes, not part of the run
    settings = {k: v for k, v in cfg.settings.items() if k != "out"}
    out = {"command": cfg.command, "settings": settings, "seed": cfg.settings["seed"],
           "inputs": inputs, "versions": _versions()}
    out.update(extra or {})
    return out


def write_factors(outdir: Path, factors) -> None:
    rows = []
    for k, f in enumerate(factors, start=1):
        rows += [(k, "u", i, float(x)) for i, x in enumerate(f.u)]
        rows += [(k, "v", i, float(x)) for i, x in enumerate(f.v)]
    _write_rows(outdir / "factors.csv", ["rank", "side", "index", "value"], rows)
    _write_rows(outdir / "d.csv", ["rank", "d"],
                [(k, float(f.d)) for k, f in enumerate(factors, start=1)])
    _write_json(outdir / "traces.json", [[float(x) for x in f.objective_trace] for f in factors])


# ---------------------------------------------------------------- commands


def _load_data(cfg: RunConfig) -> np.ndarray:
    X = read_matrix(cfg.input, cfg.header)
    try:
        dm = DataMatrix(X)
    except (SFPCAError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return (dm.center() if cfg.center else dm).values


def _load_omegas(cfg: RunConfig, n: int, p: int):
    out = []
    for key, dim in (("omega_u", n), ("omega_v", p)):
        path = cfg.settings[key]
        if path is None:
            out.append(None)
            continue
        try:
            om = load_structure_matrix(path)
        except (SFPCAError, ValueError, OSError) as exc:
            raise UsageError(f"cannot load {key} from {path}: {exc}") from None
        if om.dim != dim:
            raise UsageError(f"{key} has dimension {om.dim}, expected {dim}")
        out.append(om)
    return out


def _solver_kw(cfg: RunConfig) -> dict:
    return {"max_outer": cfg.max_outer, "outer_tol": float(cfg.outer_tol)}


def cmd_fit(cfg: RunConfig) -> int:
    X = _load_data(cfg)
    n, p = X.shape
    omega_u, omega_v = _load_omegas(cfg, n, p)
    if cfg.rank > min(n, p):
        raise UsageError(f"rank {cfg.rank} exceeds min(n, p) = {min(n, p)}")
    try:
        config = SFPCAConfig.from_params(
            n, p, cfg.lambda_u[0], cfg.lambda_v[0], cfg.alpha_u[0], cfg.alpha_v[0],
            omega_u, omega_v, penalty=cfg.penalty, nonneg=bool(cfg.nonneg),
            scad_a=float(cfg.scad_a), **_solver_kw(cfg))
    except (SFPCAError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = fit(X, cfg.rank, config)
    outdir = _outdir(cfg)
    write_factors(outdir, model.factors)
    status = _status(model.factors)
    _write_json(outdir / "manifest.json", _manifest(cfg, {
        "shape": [n, p], "fitted_rank": model.rank, "converged": status["converged"]}))
    return _exit(status)


def cmd_select(cfg: RunConfig) -> int:
    X = _load_data(cfg)
    n, p = X.shape
    omega_u, omega_v = _load_omegas(cfg, n, p)
    if cfg.rank > min(n, p):
        raise UsageError(f"rank {cfg.rank} exceeds min(n, p) = {min(n, p)}")
    default = ParamGrid.default()
    try:
        grids = []
        for side in ("u", "v"):
            lams, alphas = cfg.settings[f"lambda_{side}"], cfg.settings[f"alpha_{side}"]
            if lams is None and alphas is None:
                grids.append(default)
                continue
            relative = bool(cfg.relative) if lams is not None else default.relative
            grids.append(ParamGrid(lams if lams is not None else default.lambdas,
                                   alphas if alphas is not None else default.alphas, relative))
        base = SFPCAConfig.from_params(n, p, omega_u=omega_u, omega_v=omega_v,
                                       penalty=cfg.penalty, nonneg=bool(cfg.nonneg),
                                       scad_a=float(cfg.scad_a), **_solver_kw(cfg))
        if cfg.max_nested < 1:
            raise ValueError("max_nested must be at least 1")
    except (SFPCAError, ValueError) as exc:
        raise UsageError(str(exc)) from None

    factors, chosen, table = [], [], []
    resid = X
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for k in range(1, cfg.rank + 1):
            res = nested_select(resid, grids[0], grids[1], base, max_nested=cfg.max_nested,
                                df_method=cfg.df_method)
            table += [dict(r, rank=k) for r in res.bic_table]
            chosen.append({"rank": k, **res.chosen, "stabilized": res.stabilized,
                           "n_sweeps": res.n_sweeps})
            if res.refit.zero_solution:
                logger.warning("rank %d collapsed to zero; stopping", k)
                break
            factors.append(res.refit)
            resid = deflate(resid, res.refit)
    outdir = _outdir(cfg)
    write_factors(outdir, factors)
    _write_rows(outdir / "bic_table.csv",
                ["rank", "side", "lambda", "alpha", "df", "residual", "bic"],
                [(r["rank"], r["side"], r["lambda"], r["alpha"], r["df"], r["residual"], r["bic"])
                 for r in table])
    status = _status(factors)
    _write_json(outdir / "manifest.json", _manifest(cfg, {
        "shape": [n, p], "fitted_rank": len(factors), "chosen": chosen,
        "stabilized": all(c["stabilized"] for c in chosen), "converged": status["converged"]}))
    return _exit(status)


def _scenario(cfg: RunConfig, kind: str) -> SimScenario:
    s = cfg.settings
    try:
        if kind == "rank3":
            return SimScenario(n=s["n"], p=s["p"], seed=s["seed"])
        if kind == "rank1":
            d = s["n"] / 2 if s["d"] is None else float(s["d"])
            return SimScenario(n=s["n"], p=s["p"], v_kinds=(s["signal"],), scales=(d,),
                               seed=s["seed"])
        if kind == "two-way":
            return SimScenario.two_way(seed=s["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    raise UsageError(f"unknown scenario {kind!r}")


def cmd_simulate(cfg: RunConfig) -> int:
    scen = _scenario(cfg, cfg.scenario)
    X, truth = gen_data(scen)
    outdir = _outdir(cfg)
    write_matrix(outdir / "X.csv", X)
    write_matrix(outdir / "truth_U.csv", truth.U)
    write_matrix(outdir / "truth_V.csv", truth.V)
    write_matrix(outdir / "truth_d.csv", np.asarray(truth.d)[None, :])
    _write_json(outdir / "manifest.json", _manifest(cfg, {"scenario": scen.to_dict()}))
    return EXIT_OK


def cmd_roc(cfg: RunConfig) -> int:
    scen = _scenario(cfg, "rank1")
    path = np.linspace(0.0, 1.0, cfg.n_lambda)
    base = SFPCAConfig(v_penalty=PenaltySpec(cfg.settings.get("penalty") or "l1"))
    res = roc_sweep(scen, alphas=tuple(cfg.alphas), lambda_path=path,
                    replicates=cfg.replicates, config_base=base)
    outdir = _outdir(cfg)
    _write_rows(outdir / "roc.csv", ["alpha", "lambda", "replicate", "tp", "fp"],
                [(r["alpha"], r["lambda"], r["replicate"], r["tp"], r["fp"])
                 for r in res["long"]])
    _write_rows(outdir / "auc.csv", ["alpha", "auc"], sorted(res["auc"].items()))
    _write_json(outdir / "manifest.json", _manifest(cfg, {
        "scenario": scen.to_dict(), "excluded": res["excluded"],
        "auc": {repr(a): v for a, v in res["auc"].items()}}))
    aucs = sorted(res["auc"].items())
    if len(aucs) > 1:
        (a0, auc0), (a1, auc1) = aucs[0], aucs[-1]
        print(f"AUC alpha={a1:g} - alpha={a0:g}: {auc1 - auc0:+.4f} "
              f"({'higher' if auc1 > auc0 else 'not higher'} with smoothing)")
    return EXIT_OK


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _status(factors) -> dict:
    return {"converged": [bool(f.converged and f.inner_converged) for f in factors]}


def _exit(status) -> int:
    if all(status["converged"]):
        return EXIT_OK
    print("warning: solver did not converge for some ranks; results are flagged in "
          "manifest.json", file=sys.stderr)
    return EXIT_NONCONVERGED


def _set_threads(threads: int) -> None:
    # the compiled kernels are serial; this caps numba's pool for callers that parallelize
    if threads > 1:
        import numba

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


HANDLERS = {"fit": cmd_fit, "select": cmd_select, "simulate": cmd_simulate, "roc": cmd_roc}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO if ("-v" in argv or "--verbose" in argv)
                        else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(argv)
    except SystemExit as exc:  # argparse: --help, --version or a parse error
        return int(exc.code or 0) and EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        _set_threads(cfg.threads)
        return HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
