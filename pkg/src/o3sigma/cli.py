"""Command-line driver.

    o3sigma ed --L 2 --g2 1 --lmax 3
    o3sigma compare --fig 8 --L 2 --g2 1 --lambdas 3.2,4.5,6.3,10,14,20
    o3sigma sweep --base ed --axis model.g_sq --values 0.5,1,2,4

A JSON file given with --config supplies the same fields; flags override it.
Exit codes: 0 ok, 1 numerical failure, 2 configuration error.  Failures print a
JSON object on stderr.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import multiprocessing as mp
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import MISSING, asdict, dataclass, field, fields
from datetime import datetime, timezone
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import coupled_cluster as cc
from . import cv_core, cv_protocols as cvp, rotor_ed, sphere_field
from .coupled_cluster import CCConfig
from .cv_protocols import ProtocolConfig
from .rotor_ed import ModelParams
from .sphere_field import SphereBasisSpec

COMMANDS = ("ed", "cc", "sphere-ed", "cv-energy", "evolve", "compare")
FORMATS = ("csv", "json")
NUMERIC_ERRORS = (
    rotor_ed.EigensolverError, rotor_ed.DimensionError, cc.NonFiniteSampleError,
    sphere_field.QuadratureError, cv_core.LeakageError, cv_core.PostSelectionError,
    cv_core.MemoryCapError, FloatingPointError, np.linalg.LinAlgError, ArithmeticError,
)
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
PROTOCOL_FIELDS = ("n_max", "gamma", "capital_gamma", "trotter_steps", "pad", "leakage_limit",
                   "prep_method", "trotter_order")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    command: str
    model: ModelParams
    sphere: SphereBasisSpec | None = None
    cc: CCConfig | None = None
    protocol: ProtocolConfig | None = None
    options: dict = field(default_factory=dict)
    output_path: str | None = None
    output_format: str = "csv"

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"command": self.command, "model": asdict(self.model)}
        if self.sphere is not None:
            d["sphere"] = {"lambda_cutoff": self.sphere.lambda_cutoff}
        if self.cc is not None:
            d["cc"] = asdict(self.cc)
        if self.protocol is not None:
            d["protocol"] = {k: getattr(self.protocol, k) for k in PROTOCOL_FIELDS}
        d["options"] = dict(self.options)
        d["output"] = {"path": self.output_path, "format": self.output_format}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        command = d.get("command")
        if command not in COMMANDS:
            raise ConfigError("command", f"must be one of {', '.join(COMMANDS)}, got {command!r}")
        model = _build("model", ModelParams, d.get("model"), required=True)
        sphere = None
        if d.get("sphere") is not None:
            sd = d["sphere"]
            if not isinstance(sd, dict) or "lambda_cutoff" not in sd:
                raise ConfigError("sphere.lambda_cutoff", "required")
            extra = set(sd) - {"lambda_cutoff"}
            if extra:
                raise ConfigError(f"sphere.{sorted(extra)[0]}", "unknown field (g, l_max, n_sites come from model)")
            try:
                sphere = SphereBasisSpec.for_model(model, float(sd["lambda_cutoff"]))
            except (TypeError, ValueError) as exc:
                raise ConfigError("sphere.lambda_cutoff", str(exc)) from None
        ccfg = _build("cc", CCConfig, d.get("cc")) if d.get("cc") is not None else None
        protocol = None
        if d.get("protocol") is not None:
            if sphere is None:
                raise ConfigError("sphere", "required when a protocol section is given")
            pd = d["protocol"]
            if not isinstance(pd, dict):
                raise ConfigError("protocol", "must be an object")
            unknown = set(pd) - set(PROTOCOL_FIELDS)
            if unknown:
                raise ConfigError(f"protocol.{sorted(unknown)[0]}", "unknown field")
            try:
                protocol = ProtocolConfig(model, sphere, **pd)
            except (TypeError, ValueError) as exc:
                raise ConfigError("protocol", str(exc)) from None
        options = d.get("options") or {}
        if not isinstance(options, dict):
            raise ConfigError("options", "must be an object")
        out = d.get("output") or {}
        fmt = out.get("format", "csv")
        if fmt not in FORMATS:
            raise ConfigError("output.format", f"must be one of {', '.join(FORMATS)}")
        cfg = cls(command, model, sphere, ccfg, protocol, dict(options), out.get("path"), fmt)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        needs = {
            "sphere-ed": ("sphere",),
            "cv-energy": ("sphere", "protocol"),
        }
        for name in needs.get(self.command, ()):
            if getattr(self, name) is None:
                raise ConfigError(name, f"required for command {self.command!r}")
        if self.command == "evolve":
            method = self.options.get("method", "cv")
            if method not in ("cv", "mc", "o3"):
                raise ConfigError("options.method", "must be cv, mc or o3")
            if method in ("cv", "mc") and self.sphere is None:
                raise ConfigError("sphere", f"required for evolve with method {method!r}")
            if method == "cv" and self.protocol is None:
                raise ConfigError("protocol", "required for evolve with method 'cv'")
        if self.command == "compare":
            fig = self.options.get("fig")
            if fig not in (1, 4, 8, 9):
                raise ConfigError("options.fig", "must be 1, 4, 8 or 9")
            if fig == 9 and (self.sphere is None or self.protocol is None):
                raise ConfigError("protocol" if self.sphere else "sphere", "required for compare --fig 9")


def _build(name: str, cls, d, required: bool = False):
    if d is None:
        if required:
            raise ConfigError(name, "required")
        return None
    if not isinstance(d, dict):
        raise ConfigError(name, "must be an object")
    known = {f.name for f in fields(cls) if not f.name.startswith("_")}
    for k in d:
        if k not in known:
            raise ConfigError(f"{name}.{k}", "unknown field")
    for f in fields(cls):
        if f.init and f.name not in d and f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"{name}.{f.name}", "required")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None


def _set_path(d: dict, path: str, value) -> None:
    keys = path.split(".")
    node = d
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def _floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    return [float(v) for v in text.split(",") if v.strip()]


def _scalar(text: str):
    v = float(text)
    return int(v) if v.is_integer() and "." not in text and "e" not in text.lower() else v


# ---------------------------------------------------------------------------
# commands

def _per_site_spectrum(h, n_sites: int, k: int = 2) -> list[float]:
    return [e / n_sites for e, _ in rotor_ed.low_spectrum(h, k)]


def _ed_rows(model: ModelParams, sphere: SphereBasisSpec | None) -> list[dict]:
    def spectrum(p: ModelParams):
        if sphere is None:
            h = rotor_ed.build_rotor_hamiltonian(p)
        else:
            h = sphere_field.build_sphere_hamiltonian(p, SphereBasisSpec.for_model(p, sphere.lambda_cutoff))
        return _per_site_spectrum(h, p.n_sites)

    e = spectrum(model)
    row = {"L": model.n_sites, "g2": model.g_sq, "l_max": model.l_max}
    if sphere is not None:
        row["lambda"] = sphere.lambda_cutoff
    row["E0_per_site"] = e[0]
    row["gap"] = model.n_sites * (e[1] - e[0])
    if model.l_max >= 2:
        lower = spectrum(ModelParams(model.n_sites, model.g_sq, model.l_max - 1))
        row["E0_truncation_error"] = abs(e[0] - lower[0])
        row["gap_truncation_error"] = abs(row["gap"] - model.n_sites * (lower[1] - lower[0]))
    return [row]


def _cc_row(model: ModelParams, ccfg: CCConfig, lam: float | None, method: str) -> dict:
    row = {"L": model.n_sites, "g2": model.g_sq, "lambda": lam}
    if method == "auto":
        method = "deterministic" if model.n_sites == 2 else "mc"
    if method == "deterministic":
        if model.n_sites != 2:
            raise ConfigError("options.method", "deterministic two-site evaluation needs L = 2")
        r = cc.minimize_L2(model.g_sq, lam, ccfg.alpha_max)
        row.update(method=method, alpha0=r.alpha0, E0_per_site=r.e0, E0_stderr=0.0,
                   alpha1=r.alpha1, E1_per_site=r.e1, E1_stderr=0.0, gap=r.gap, gap_stderr=0.0)
        return row
    if method != "mc":
        raise ConfigError("options.method", "must be auto, deterministic or mc")
    if lam is not None and ccfg.lambda_cutoff is None:
        ccfg = CCConfig(**{**asdict(ccfg), "lambda_cutoff": lam})
    a0, e0 = cc.optimize_cc(model, ccfg)
    a1, e1 = cc.optimize_cc(model, ccfg, excited=True)
    L = model.n_sites
    row.update(method=method, alpha0=a0, E0_per_site=e0.mean, E0_stderr=e0.stderr, alpha1=a1,
               E1_per_site=e1.mean, E1_stderr=e1.stderr, gap=L * (e1.mean - e0.mean),
               gap_stderr=L * math.hypot(e0.stderr, e1.stderr))
    return row


def _cv_energy_rows(cfg: ExperimentConfig) -> list[dict]:
    p, proto = cfg.model, cfg.protocol
    lam = cfg.sphere.lambda_cutoff
    alpha = cfg.options.get("alpha")
    ref = None
    if p.n_sites == 2:
        if alpha is None:
            alpha = cc.minimize_L2(p.g_sq, lam).alpha0
        ref = cc.cc_energy_L2_quadrature(p.g_sq, alpha, lam)
    if alpha is None:
        raise ConfigError("options.alpha", "required for L > 2")
    reg = cvp.prepare_cc(proto, float(alpha))
    rep = cvp.measure_energy(reg, proto, cfg.options.get("kinetic_method", "split"),
                             cfg.options.get("interaction_method", "cx_ancilla"))
    L = p.n_sites
    row = {"L": L, "g2": p.g_sq, "lambda": lam, "n_max": proto.n_max, "alpha": float(alpha),
           "E_per_site": rep.total / L, "kinetic_per_site": rep.kinetic / L,
           "interaction_per_site": rep.interaction / L}
    for name, v in zip("xyz", rep.per_direction):
        row[f"E_{name}_per_site"] = v / L
    row.update(spread_per_site=rep.spread / L, reference_per_site=ref, leakage=rep.leakage,
               postselection_probability=rep.postselection_probability)
    return [row]


def _times(cfg: ExperimentConfig, default: Sequence[float]) -> list[float]:
    t = cfg.options.get("times", list(default))
    return [float(v) for v in t]


def _evolve_rows(cfg: ExperimentConfig) -> list[dict]:
    method = cfg.options.get("method", "cv")
    times = _times(cfg, [0.0, 0.5, 1.0, 1.5, 2.0])
    rows = []
    if method == "o3":
        for t, v in zip(times, sphere_field.o3_return_probability(cfg.model, times)):
            rows.append({"t": t, "method": "o3", "probability": float(v), "stderr": 0.0})
    elif method == "mc":
        ref = cfg.options.get("reference", "omega")
        ests = sphere_field.return_probability_curve(
            cfg.model, cfg.sphere, times, n_samples=int(cfg.options.get("n_samples", 20_000)),
            seed=int(cfg.options.get("seed", 12345)), reference=ref)
        for t, e in zip(times, ests):
            rows.append({"t": t, "method": f"mc-{ref}", "probability": e.mean, "stderr": e.stderr})
    else:
        for t in times:
            r = cvp.return_probability(cfg.protocol, t)
            rows.append({"t": t, "method": "cv", "probability": r.probability, "stderr": 0.0,
                         "leakage": r.leakage, "postselection_probability": r.postselection_probability})
    return rows


def _compare_rows(cfg: ExperimentConfig) -> list[dict]:
    fig = cfg.options["fig"]
    p = cfg.model
    n_samples = int(cfg.options.get("n_samples", 20_000))
    seed = int(cfg.options.get("seed", 12345))
    rows = []
    if fig == 1:
        for g2 in cfg.options.get("g2_values", [0.5, 1.0, 2.0, 4.0]):
            m = ModelParams(p.n_sites, float(g2), p.l_max)
            ed = _ed_rows(m, None)[0]
            ccr = _cc_row(m, cfg.cc or CCConfig(), None, cfg.options.get("method", "auto"))
            rows.append({"g2": m.g_sq, "E0_ed": ed["E0_per_site"], "E0_cc": ccr["E0_per_site"],
                         "E0_cc_stderr": ccr["E0_stderr"], "gap_ed": ed["gap"],
                         "gap_ed_error": ed.get("gap_truncation_error"), "gap_cc": ccr["gap"],
                         "gap_cc_stderr": ccr["gap_stderr"]})
    elif fig == 4:
        o3 = _ed_rows(p, None)[0]
        for lam in cfg.options.get("lambdas", [1.0, 3.2, 10.0]):
            s = _ed_rows(p, SphereBasisSpec.for_model(p, float(lam)))[0]
            rows.append({"lambda": float(lam), "E0_sphere": s["E0_per_site"], "E0_o3": o3["E0_per_site"],
                         "gap_sphere": s["gap"], "gap_o3": o3["gap"]})
    elif fig == 8:
        times = _times(cfg, [0.5, 1.0, 2.0, 4.0])
        o3 = sphere_field.o3_return_probability(p, times)
        for lam in cfg.options.get("lambdas", [3.2, 4.5, 6.3, 10.0, 14.0, 20.0]):
            spec = SphereBasisSpec.for_model(p, float(lam))
            ests = sphere_field.return_probability_curve(p, spec, times, n_samples=n_samples, seed=seed)
            for t, e, v in zip(times, ests, o3):
                rows.append({"lambda": float(lam), "t": t, "p_mc": e.mean, "stderr": e.stderr,
                             "p_o3": float(v), "deviation": e.mean - float(v)})
    else:
        times = _times(cfg, [0.0, 0.5, 1.0, 1.5, 2.0])
        ests = sphere_field.return_probability_curve(p, cfg.sphere, times, n_samples=n_samples, seed=seed,
                                                     reference="fock_vacuum")
        for t, e in zip(times, ests):
            r = cvp.return_probability(cfg.protocol, t)
            rows.append({"t": t, "p_cv": r.probability, "p_mc": e.mean, "stderr": e.stderr,
                         "deviation": r.probability - e.mean, "leakage": r.leakage})
    return rows


def run(cfg: ExperimentConfig) -> list[dict]:
    """Execute one experiment and return its table."""
    if cfg.command == "ed":
        return _ed_rows(cfg.model, None)
    if cfg.command == "sphere-ed":
        return _ed_rows(cfg.model, cfg.sphere)
    if cfg.command == "cc":
        lam = cfg.sphere.lambda_cutoff if cfg.sphere is not None else (cfg.cc.lambda_cutoff if cfg.cc else None)
        return [_cc_row(cfg.model, cfg.cc or CCConfig(), lam, cfg.options.get("method", "auto"))]
    if cfg.command == "cv-energy":
        return _cv_energy_rows(cfg)
    if cfg.command == "evolve":
        return _evolve_rows(cfg)
    return _compare_rows(cfg)


def _run_dict(d: dict) -> list[dict]:
    return run(ExperimentConfig.from_dict(d))


def sweep(base: dict, axis: str, values: Sequence, keep_going: bool = False, jobs: int = 1) -> list[dict]:
    """One run per value of the dotted config path `axis`; rows are prefixed with the axis value."""
    if not values:
        return []
    dicts = []
    for v in values:
        d = copy.deepcopy(base)
        _set_path(d, axis, v)
        ExperimentConfig.from_dict(d)      # surface configuration errors before any work
        dicts.append(d)
    if jobs > 1:
        # workers inherit the environment at spawn, before numpy picks its thread count
        saved = {v: os.environ.get(v) for v in THREAD_VARS}
        os.environ.update({v: "1" for v in THREAD_VARS})
        try:
            with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn")) as pool:
                futures = [pool.submit(_run_dict, d) for d in dicts]
                outcomes = [_outcome(f.result) for f in futures]
        finally:
            for v, old in saved.items():
                if old is None:
                    os.environ.pop(v, None)
                else:
                    os.environ[v] = old
    else:
        outcomes = [_outcome(lambda d=d: _run_dict(d)) for d in dicts]
    table = []
    for v, (rows, exc) in zip(values, outcomes):
        if exc is not None:
            if not keep_going:
                raise exc
            table.append({axis: v, "error": f"{type(exc).__name__}: {exc}"})
            continue
        table.extend({axis: v, **r} for r in rows)
    return table


def _outcome(fn):
    try:
        return fn(), None
    except NUMERIC_ERRORS as exc:
        return None, exc


# ---------------------------------------------------------------------------
# output

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(rows: list[dict], config: dict, fmt: str, timestamp: str | None = None) -> str:
    timestamp = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
    cfg_text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    if fmt == "json":
        return json.dumps({"version": __version__, "config": config, "generated": timestamp,
                           "rows": rows}, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    buf.write(f"# o3sigma {__version__}\n# config: {cfg_text}\n# generated: {timestamp}\n")
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    if cols:
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def _emit(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# argument parsing

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="o3sigma", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=COMMANDS + ("sweep",))
    ap.add_argument("--config", help="JSON experiment file")
    ap.add_argument("--L", type=int, dest="n_sites")
    ap.add_argument("--g2", type=float)
    ap.add_argument("--lmax", type=int)
    ap.add_argument("--lambda", type=float, dest="lam")
    ap.add_argument("--alpha", type=float)
    ap.add_argument("--samples", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--sampler", choices=cc.SAMPLERS)
    ap.add_argument("--n-max", type=int)
    ap.add_argument("--trotter-steps", type=int)
    ap.add_argument("--gamma", type=float)
    ap.add_argument("--capital-gamma", type=float)
    ap.add_argument("--leakage-limit", help="float, or 'none' to disable the check")
    ap.add_argument("--prep-method", choices=("decomposed", "direct"))
    ap.add_argument("--kinetic-method", choices=("pairwise", "split"))
    ap.add_argument("--interaction-method", choices=("parameter_shift", "cx_ancilla"))
    ap.add_argument("--method", help="cc: auto|deterministic|mc; evolve: cv|mc|o3")
    ap.add_argument("--reference", choices=("omega", "fock_vacuum"))
    ap.add_argument("--times", help="comma-separated times")
    ap.add_argument("--lambdas", help="comma-separated cutoffs")
    ap.add_argument("--g2-values", help="comma-separated couplings")
    ap.add_argument("--fig", type=int)
    ap.add_argument("--out", help="output file (default stdout)")
    ap.add_argument("--format", choices=FORMATS)
    ap.add_argument("--base", choices=COMMANDS, help="command run by sweep")
    ap.add_argument("--axis", help="dotted config path swept over, e.g. model.g_sq")
    ap.add_argument("--values", help="comma-separated sweep values")
    ap.add_argument("--keep-going", action="store_true")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--cache-dir", help=f"directory for radial sampling tables (also ${sphere_field.CACHE_ENV})")
    return ap


def merge_args(args: argparse.Namespace) -> dict:
    """Config file contents with command-line flags applied on top."""
    d: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", str(exc)) from None
        if not isinstance(d, dict):
            raise ConfigError("config", "top level must be an object")
    command = args.base if args.command == "sweep" else args.command
    if args.command == "sweep" and command is None:
        command = d.get("command")
        if command is None:
            raise ConfigError("base", "sweep needs --base or a command in the config file")
    d["command"] = command
    flag_paths = {
        "n_sites": "model.n_sites", "g2": "model.g_sq", "lmax": "model.l_max",
        "lam": "sphere.lambda_cutoff", "samples": "cc.n_samples", "sampler": "cc.sampler",
        "n_max": "protocol.n_max", "trotter_steps": "protocol.trotter_steps", "gamma": "protocol.gamma",
        "capital_gamma": "protocol.capital_gamma", "prep_method": "protocol.prep_method",
        "alpha": "options.alpha", "kinetic_method": "options.kinetic_method",
        "interaction_method": "options.interaction_method", "method": "options.method",
        "reference": "options.reference", "fig": "options.fig", "out": "output.path",
        "format": "output.format",
    }
    for attr, path in flag_paths.items():
        v = getattr(args, attr)
        if v is not None:
            _set_path(d, path, v)
    if args.seed is not None:
        _set_path(d, "options.seed", args.seed)
        if d.get("cc") is not None or command == "cc":
            _set_path(d, "cc.seed", args.seed)
    if args.leakage_limit is not None:
        lim = None if args.leakage_limit.lower() == "none" else float(args.leakage_limit)
        _set_path(d, "protocol.leakage_limit", lim)
    for attr, path in (("times", "options.times"), ("lambdas", "options.lambdas"),
                       ("g2_values", "options.g2_values")):
        v = getattr(args, attr)
        if v is not None:
            try:
                _set_path(d, path, _floats(v))
            except ValueError:
                raise ConfigError(path, f"not a comma-separated list of numbers: {v!r}") from None
    return d


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.cache_dir:
        os.environ[sphere_field.CACHE_ENV] = args.cache_dir
    try:
        d = merge_args(args)
        if args.command == "sweep":
            if not args.axis:
                raise ConfigError("axis", "required for sweep")
            try:
                values = [_scalar(v) for v in (args.values or "").split(",") if v.strip()]
            except ValueError:
                raise ConfigError("values", f"not a comma-separated list of numbers: {args.values!r}") from None
            out = d.get("output") or {}
            rows = sweep(d, args.axis, values, keep_going=args.keep_going, jobs=args.jobs)
            echo = {**d, "sweep": {"axis": args.axis, "values": values}}
            _emit(render(rows, echo, out.get("format", "csv")), out.get("path"))
            return 0
        cfg = ExperimentConfig.from_dict(d)
        rows = run(cfg)
        _emit(render(rows, cfg.to_dict(), cfg.output_format), cfg.output_path)
        return 0
    except ConfigError as exc:
        _error("config", str(exc), field=exc.field)
        return 2
    except NUMERIC_ERRORS as exc:
        _error("numeric", f"{type(exc).__name__}: {exc}")
        return 1


def _error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"status": "error", "kind": kind, "message": message, **extra}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
