"""Command-line runner: configuration, scenario construction, subcommands and artifacts.

Usage::

    wvlab <subcommand> [--config PATH] [--jobs N] [--out DIR] [--seed U64]

Exit codes: 0 success, 2 configuration error, 3 assertion/acceptance failure,
4 solver failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import SpaceTimeField, SpatialGrid, TimeAxis, write_field, write_trace_csv
from .measurement import ALL_BOUNDARY, LATERAL, InputData, Scenario, apply_measurement
from .phantoms import PHANTOM_NAMES, build_phantom
from .probes import BumpSpec, assemble_probe, reference_ray, remainder_measure, remainder_slope
from .recovery import GeometrySet, interpolate_slices, recover_beta, recover_q
from .solver import SolverConfig, SolverError, convergence_slope, manufactured_error
from .symbols import BACKWARD, FORWARD, GaugeShift, SymbolSpec, bound_lattice, ptilde_sq, root_scan
from .xray import write_sinogram_csv

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_ASSERT, EXIT_SOLVER = 0, 2, 3, 4
SUBCOMMANDS = ("verify-symbols", "probe", "converge", "measure", "recover-q", "recover-beta", "report")

# every key has a default; nested sections are validated key by key
DEFAULTS: dict = {
    "n": 65,
    "n_t": 64,
    "T": 1.0,
    "phantom": "bump_q",
    "phantom_scale": 1.0,
    "scenario_kind": LATERAL,
    "rhos": [4.0, 8.0, 16.0],
    "seed": 0,
    "solver": {"theta": 0.25, "picard_tol": 1e-10, "picard_max": 25},
    "symbols": {"rhos": [1.0, 2.0, 4.0, 8.0, 16.0], "lattice_n": 41, "extent": 20.0, "n_radii": 64, "n_angles": 64,
                "r_max": 50.0, "witness_rhos": [1024.0, 2048.0], "random_samples": 1000},
    "probe": {"n": 129, "orders": [0, 1], "angle": 0.0, "eps": 0.25, "t_center": 0.5, "t_width": 0.25,
              "source": "closed_form", "window_n0": [-1.4, -0.6], "window_n1": [-2.5, -1.5]},
    "converge": {"ns": [33, 65, 129], "min_slope": 1.9},
    "measure": {"rho": 8.0, "angle": 0.3, "eps": 0.25, "t_center": 0.5, "t_width": 0.125},
    "geometry": {"n_angles": 60, "n_offsets": None, "t_centers": [0.3, 0.5, 0.7], "t_width": 0.125, "eps": 0.1,
                 "lattice": 5, "lattice_lo": 0.3, "lattice_hi": 0.7},
    "recovery": {"method": "weighted", "calibration": "probe", "max_error": 0.15, "baseline": None,
                 "baseline_drift": 0.01, "beta_q_source": "recovered", "beta_q_rho": 16.0, "beta_max_median": 0.25,
                 "beta_method": "weighted", "beta_support": 9},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


@dataclass(frozen=True)
class RunConfig:
    data: dict

    @classmethod
    def load(cls, path: str | None = None, overrides: dict | None = None) -> RunConfig:
        raw: dict = {}
        if path:
            try:
                raw = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"config: cannot read {path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError("config: top level must be an object")
        cfg = _merge(DEFAULTS, raw)
        if overrides:
            cfg = _merge(cfg, overrides)
        cls._validate(cfg)
        return cls(cfg)

    @staticmethod
    def _validate(c: dict) -> None:
        def need(cond, where, why):
            if not cond:
                raise ConfigError(f"{where}: {why}")

        need(isinstance(c["n"], int) and c["n"] >= 9, "n", "must be an integer >= 9")
        need(isinstance(c["n_t"], int) and c["n_t"] >= 8, "n_t", "must be an integer >= 8")
        need(isinstance(c["T"], (int, float)) and c["T"] > 0, "T", "must be positive")
        need(c["phantom"] in PHANTOM_NAMES, "phantom", f"must be one of {PHANTOM_NAMES}")
        need(c["scenario_kind"] in (LATERAL, ALL_BOUNDARY), "scenario_kind", "must be lateral_dtn or all_boundary")
        need(isinstance(c["rhos"], list) and c["rhos"] and all(r > 0 for r in c["rhos"]), "rhos", "must be a nonempty list of positive numbers")
        need(isinstance(c["seed"], int) and 0 <= c["seed"] < 2**64, "seed", "must be an unsigned 64-bit integer")
        need(c["recovery"]["method"] in ("weighted", "fbp"), "recovery.method", "must be weighted or fbp")
        need(c["recovery"]["beta_method"] in ("weighted", "pointwise"), "recovery.beta_method", "must be weighted or pointwise")
        need(c["recovery"]["calibration"] in ("probe", "leading"), "recovery.calibration", "must be probe or leading")
        need(c["recovery"]["beta_q_source"] in ("recovered", "true"), "recovery.beta_q_source", "must be recovered or true")
        need(c["probe"]["source"] in ("closed_form", "discrete"), "probe.source", "must be closed_form or discrete")
        need(isinstance(c["geometry"]["n_angles"], int) and c["geometry"]["n_angles"] >= 1, "geometry.n_angles", "must be a positive integer")
        try:
            SolverConfig(**c["solver"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"solver: {exc}") from exc

    def __getitem__(self, key):
        return self.data[key]

    def solver(self) -> SolverConfig:
        return SolverConfig(**self.data["solver"])

    def grid_axis(self):
        return SpatialGrid(self.data["n"]), TimeAxis(float(self.data["T"]), self.data["n_t"])

    def scenario(self, phantom: str | None = None) -> Scenario:
        grid, axis = self.grid_axis()
        ph = build_phantom(phantom or self.data["phantom"], grid, axis, float(self.data["phantom_scale"]))
        return Scenario(ph, self.solver(), self.data["scenario_kind"])

    def geometry_q(self) -> GeometrySet:
        g = self.data["geometry"]
        n_off = g["n_offsets"] or self.data["n"]
        return GeometrySet.q_mode(g["n_angles"], n_off, t_centers=tuple(g["t_centers"]), t_width=g["t_width"], eps=g["eps"])

    def geometry_beta(self) -> GeometrySet:
        g = self.data["geometry"]
        return GeometrySet.beta_lattice(g["lattice"], g["lattice_lo"], g["lattice_hi"], t_centers=tuple(g["t_centers"]),
                                        t_width=g["t_width"], eps=g["eps"])


# ---------------------------------------------------------------------------
# artifacts


class Artifacts:
    """Writes files under ``out`` and records them (with sha256) in manifest.json."""

    def __init__(self, out: Path, command: str, cfg: RunConfig):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command, self.cfg = command, cfg
        self.files: list[str] = []
        self.summary: dict = {}

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def csv(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        return p

    def json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
        return p

    def finish(self, status: int) -> Path:
        entries = []
        for name in dict.fromkeys(self.files):
            data = (self.out / name).read_bytes()
            entries.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        manifest = {"command": self.command, "status": status, "config": self.cfg.data, "files": entries,
                    "summary": self.summary}
        p = self.out / f"manifest-{self.command}.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
        return p


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def verify_manifest(path) -> list[str]:
    """Return the files whose hash no longer matches the manifest (empty when intact)."""
    path = Path(path)
    m = json.loads(path.read_text())
    bad = []
    for e in m["files"]:
        f = path.parent / e["path"]
        if not f.exists() or hashlib.sha256(f.read_bytes()).hexdigest() != e["sha256"]:
            bad.append(e["path"])
    return bad


# ---------------------------------------------------------------------------
# subcommands (each returns an exit status)


def cmd_verify_symbols(cfg: RunConfig, art: Artifacts, jobs: int, seed: int) -> int:
    c = cfg["symbols"]
    viol_b, worst, brows = bound_lattice(c["rhos"], c["lattice_n"], c["extent"])
    rows, viol_r, min_r1 = [], 0, math.inf
    for kind in (FORWARD, BACKWARD):
        spec = SymbolSpec(kind)
        scan = root_scan(spec, c["rhos"], c["n_radii"], c["n_angles"], c["r_max"])
        viol_r += scan.violations
        for row in scan.rows:
            shift = GaugeShift(row["rho"], (1.0, 0.0), kind)
            center = np.array([row["tau"], row["xi1"], row["xi2"]])
            rows.append([kind, row["rho"], row["tau"], row["xi1"], row["xi2"],
                         float(ptilde_sq(spec, center + shift.value)), 4.0 * row["rho"] ** 6, row["im_plus"], row["im_minus"]])
        wit = root_scan(spec, c["witness_rhos"], 1, c["n_angles"], 1.0)
        min_r1 = min(min_r1, wit.min_imag_r1)
    # random real centers (seeded) on top of the lattice
    rng = np.random.default_rng(seed)
    viol_rand = 0
    for rho in c["rhos"]:
        pts = rng.uniform(-c["extent"], c["extent"], size=(c["random_samples"], 3))
        shift = GaugeShift(rho, (1.0, 0.0), FORWARD)
        lhs = ptilde_sq(SymbolSpec(FORWARD), pts.astype(complex) + shift.value)
        viol_rand += int(np.sum(lhs < 4.0 * rho**6 * (1 - 1e-9)))
    art.csv("symbols.csv", ["kind", "rho", "tau", "xi1", "xi2", "ptilde_sq", "bound", "im_sigma_plus", "im_sigma_minus"], rows)
    art.csv("bound_lattice.csv", ["rho", "min_lhs", "bound", "violations"],
            [[r["rho"], r["min_lhs"], r["bound"], r["violations"]] for r in brows])
    art.summary.update({"bound_violations": viol_b, "bound_min_ratio": worst, "root_violations": viol_r,
                        "random_violations": viol_rand, "sharpness_min_im_r1": min_r1})
    ok = viol_b == 0 and viol_r == 0 and viol_rand == 0 and min_r1 <= 1e-6
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_probe(cfg: RunConfig, art: Artifacts, jobs: int, seed: int) -> int:
    c = cfg["probe"]
    grid = SpatialGrid(c["n"])
    axis = TimeAxis(float(cfg["T"]), c["n"] - 1)
    q = SpaceTimeField.zeros(grid, axis)
    ray = reference_ray(c["angle"])
    bump = BumpSpec(c["eps"], c["t_center"], c["t_width"])
    rows, slopes, manifests = [], {}, []
    for N in c["orders"]:
        norms = []
        for rho in cfg["rhos"]:
            pr = assemble_probe(FORWARD, rho, ray, N, bump, q)
            rec = remainder_measure(pr, q, cfg.solver(), c["source"])
            norms.append(rec.l2_norm)
            rows.append([N, rho, rec.l2_norm, pr.residual_norm])
            manifests.append(pr.manifest() | {"remainder_l2": rec.l2_norm})
        slopes[N] = remainder_slope(cfg["rhos"], norms)
    art.csv("remainder.csv", ["N", "rho", "remainder_l2", "residual_l2"], rows)
    art.csv("remainder_slopes.csv", ["N", "slope"], [[N, s] for N, s in slopes.items()])
    art.json("probes.json", manifests)
    art.summary["slopes"] = {str(k): v for k, v in slopes.items()}
    ok = True
    for N, s in slopes.items():
        lo, hi = c["window_n0"] if N == 0 else c["window_n1"] if N == 1 else (-math.inf, math.inf)
        ok &= lo <= s <= hi
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_converge(cfg: RunConfig, art: Artifacts, jobs: int, seed: int) -> int:
    c = cfg["converge"]
    rows = []
    for n in c["ns"]:
        rows.append([n, 1.0 / (n - 1), manufactured_error(n, T=float(cfg["T"]), cfg=cfg.solver())])
    slope = convergence_slope([r[1] for r in rows], [r[2] for r in rows])
    art.csv("convergence.csv", ["n", "h", "l2_error"], rows)
    art.summary["slope"] = slope
    return EXIT_OK if slope >= c["min_slope"] else EXIT_ASSERT


def cmd_measure(cfg: RunConfig, art: Artifacts, jobs: int, seed: int) -> int:
    c = cfg["measure"]
    s = cfg.scenario()
    ray = reference_ray(c["angle"])
    bump = BumpSpec(c["eps"], c["t_center"], c["t_width"])
    zero = SpaceTimeField.zeros(s.grid, s.axis)
    probe = assemble_probe(FORWARD, c["rho"], ray, 0, bump, zero)
    rec = apply_measurement(s, InputData(probe.boundary_trace), gauge=probe.gauge)
    ref = apply_measurement(s.with_phantom(build_phantom("zero", s.grid, s.axis)), InputData(probe.boundary_trace), gauge=probe.gauge)
    write_trace_csv(art.path("neumann.csv"), rec.neumann)
    write_trace_csv(art.path("neumann_difference.csv"), (rec - ref).neumann)
    g = rec.gauge
    art.json("measurement.json", {"gauge": {"rho": g.rho, "direction": list(g.direction), "sense": g.sense},
                                  "probe": probe.manifest(), "scenario_kind": s.kind, "phantom": cfg["phantom"]})
    return EXIT_OK


def _baseline_check(art: Artifacts, cfg: RunConfig, key: str, values: np.ndarray) -> bool:
    """First run writes the baseline; later runs must stay within the configured relative drift."""
    path = cfg["recovery"]["baseline"]
    if not path:
        return True
    p = Path(path)
    values = np.asarray(values, dtype=float)
    if not p.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps({key: values.tolist()}, indent=2) + "\n")
        art.summary["baseline"] = "written"
        return True
    base = json.loads(p.read_text())
    if key not in base:
        base[key] = values.tolist()
        p.write_text(json.dumps(base, indent=2) + "\n")
        art.summary["baseline"] = "written"
        return True
    ref = np.asarray(base[key], dtype=float)
    if ref.shape != values.shape:
        art.summary["baseline"] = "shape mismatch"
        return False
    drift = float(np.max(np.abs(values - ref) / np.maximum(np.abs(ref), 1e-12)))
    art.summary["baseline_drift"] = drift
    return drift <= cfg["recovery"]["baseline_drift"]


def _run_recover_q(cfg: RunConfig, s: Scenario, jobs: int, rhos):
    r = cfg["recovery"]
    return recover_q(s, cfg.geometry_q(), rhos, calibration=r["calibration"], jobs=jobs, method=r["method"])


def cmd_recover_q(cfg: RunConfig, art: Artifacts, jobs: int, seed: int) -> int:
    s = cfg.scenario()
    rep = _run_recover_q(cfg, s, jobs, cfg["rhos"])
    art.csv("q_errors.csv", ["rho", "t_center", "rel_l2_error", "fbp_rel_l2_error"],
            [[row["rho"], row["t_center"], row["rel_l2_error"], float(rep.extras["fbp_errors"][i // len(rep.t_centers), i % len(rep.t_centers)])]
             for i, row in enumerate(rep.rows())])
    for i, rho in enumerate(rep.rhos):
        fld = interpolate_slices(rep.estimates[i], rep.t_centers, s.axis, s.grid)
        write_field(art.path(f"q_recovered_rho{rho:g}.wvlt"), fld)
        write_sinogram_csv(art.path(f"q_sinograms_rho{rho:g}.csv"), rep.extras["sinograms"][rho])
    errs = rep.require_truth()
    art.summary.update({"errors": errs, "fbp_errors": rep.extras["fbp_errors"]})
    ok = True
    if 8.0 in rep.rhos:
        ok &= bool(np.all(errs[rep.rhos.index(8.0)] <= cfg["recovery"]["max_error"]))
    if 4.0 in rep.rhos and 16.0 in rep.rhos:
        ok &= bool(np.all(errs[rep.rhos.index(16.0)] <= errs[rep.rhos.index(4.0)]))
    ok &= _baseline_check(art, cfg, "q_errors", errs)
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_recover_beta(cfg: RunConfig, art: Artifacts, jobs: int, seed: int) -> int:
    r = cfg["recovery"]
    phantom = cfg["phantom"] if cfg["phantom"] in ("bump_beta", "zero") else "bump_beta"
    s = cfg.scenario(phantom)
    geo = cfg.geometry_beta()
    q_model = None
    if r["beta_q_source"] == "recovered" and np.any(s.phantom.q.values.real):
        qrep = _run_recover_q(cfg, s, jobs, [r["beta_q_rho"]])
        q_model = interpolate_slices(qrep.estimates[0], qrep.t_centers, s.axis, s.grid)
        art.summary["q_model_errors"] = qrep.errors
    rep = recover_beta(s, geo, cfg["rhos"], q_model=q_model, calibration=r["calibration"], jobs=jobs,
                       method=r["beta_method"], support=r["beta_support"])
    pw = rep.extras["pointwise"].reshape(-1)
    art.csv("beta_points.csv", ["rho", "t_center", "x", "y", "estimate", "pointwise", "truth", "rel_error"],
            [[d["rho"], d["t_center"], d["x"], d["y"], d["estimate"], float(pw[i]), d["truth"], d["rel_error"]]
             for i, d in enumerate(rep.rows())])
    if rep.truth is None or not np.any(rep.truth):
        worst = float(np.max(np.abs(rep.estimates))) if rep.estimates.size else 0.0
        art.summary["null_max_abs"] = worst
        return EXIT_OK if worst <= 1e-2 else EXIT_ASSERT
    med = rep.median_errors()
    art.summary["median_errors"] = med
    ok = True
    if 8.0 in rep.rhos:
        ok &= bool(med[rep.rhos.index(8.0)] <= r["beta_max_median"])
    ok &= bool(np.all(np.diff(med) <= 0))
    ok &= _baseline_check(art, cfg, "beta_median_errors", med)
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_report(cfg: RunConfig, art: Artifacts, jobs: int, seed: int) -> int:
    rows, bad_any = [], False
    for m in sorted(art.out.glob("manifest-*.json")):
        if m.name == "manifest-report.json":
            continue
        data = json.loads(m.read_text())
        bad = verify_manifest(m)
        bad_any |= bool(bad)
        rows.append([data["command"], data["status"], len(data["files"]), len(bad)])
    art.csv("report.csv", ["command", "status", "files", "hash_mismatches"], rows)
    art.summary["commands"] = len(rows)
    return EXIT_ASSERT if bad_any or any(r[1] != 0 for r in rows) else EXIT_OK


COMMANDS = {
    "verify-symbols": cmd_verify_symbols,
    "probe": cmd_probe,
    "converge": cmd_converge,
    "measure": cmd_measure,
    "recover-q": cmd_recover_q,
    "recover-beta": cmd_recover_beta,
    "report": cmd_report,
}


def run_subcommand(name: str, cfg: RunConfig, out, jobs: int = 1, seed: int | None = None) -> int:
    """Run one subcommand, write its artifacts and manifest, and return the exit status."""
    if name not in COMMANDS:
        raise ConfigError(f"command: unknown subcommand {name!r}")
    seed = cfg["seed"] if seed is None else seed
    art = Artifacts(Path(out), name, cfg)
    t0 = time.perf_counter()
    try:
        status = COMMANDS[name](cfg, art, jobs, seed)
    except SolverError as exc:
        log.error("%s: solver failure: %s", name, exc)
        art.summary["error"] = str(exc)
        status = EXIT_SOLVER
    except ValueError as exc:
        # invalid geometry, grid, sinogram or method choices reachable from the config
        log.error("%s: invalid configuration: %s", name, exc)
        art.summary["error"] = f"{type(exc).__name__}: {exc}"
        status = EXIT_CONFIG
    art.summary["seconds"] = round(time.perf_counter() - t0, 3)
    art.finish(status)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wvlab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for batched extractions")
    p.add_argument("--out", default="wvlab-out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed for randomized sampling (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs: must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed: must be an unsigned 64-bit integer")
        cfg = RunConfig.load(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status = run_subcommand(args.command, cfg, args.out, args.jobs, args.seed)
    print(f"{args.command}: exit {status} (artifacts in {args.out})")
    return status


if __name__ == "__main__":
    sys.exit(main())
