"""Scenario runner: one JSON config in, reproducible artifacts out.

Every subcommand loads the same scenario file, derives all randomness from
its named seeds, and writes its artifacts atomically into one directory per
subcommand along with a manifest of content digests. Running a subcommand
twice on the same scenario yields byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import ipp, mission as ms, posegraph as pg, rownav, scenario as sn, weedops
from .errors import AgrisimError, ConfigError
from .fieldgen import (
    CameraPath,
    DetectorParams,
    FieldSpec,
    TerrainParams,
    cloud_from_render,
    export_truth_geojson,
    generate,
    render_grid,
    simulate_detections,
)
from .grids import GridMap2D, read_layer_pgm, read_ply, write_layer_pgm, write_ply
from .registration import RegistrationConfig, build_grid, match_flow, register

SUBCOMMANDS = ("gen", "rows", "localize", "register", "plan", "mission",
               "treat", "report")
SEED_NAMES = ("field", "render", "localize", "register", "plan", "mission",
              "treat")

_SECTIONS = ("field", "render", "rows", "localize", "register", "plan",
             "mission", "treat")


@dataclass(frozen=True)
class Scenario:
    """One experiment: field spec, per-module configs, named seeds."""

    name: str = "demo"
    field: dict = dc_field(default_factory=dict)
    render: dict = dc_field(default_factory=dict)
    rows: dict = dc_field(default_factory=dict)
    localize: dict = dc_field(default_factory=dict)
    register: dict = dc_field(default_factory=dict)
    plan: dict = dc_field(default_factory=dict)
    mission: dict = dc_field(default_factory=dict)
    treat: dict = dc_field(default_factory=dict)
    seeds: dict = dc_field(default_factory=dict)
    out: str | None = None

    def __post_init__(self):
        if not self.name or not isinstance(self.name, str):
            raise ConfigError("scenario needs a non-empty name")
        for sec in _SECTIONS:
            if not isinstance(getattr(self, sec), dict):
                raise ConfigError(f"scenario section {sec!r} must be a mapping")
        for name in SEED_NAMES:
            if name not in self.seeds:
                raise ConfigError(f"scenario is missing the {name!r} seed")
        for name, val in self.seeds.items():
            if not isinstance(val, int) or not 0 <= val < 2**64:
                raise ConfigError(f"seed {name!r} must be an unsigned 64-bit integer")


def load_scenario(path, seed_overrides: dict | None = None) -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"scenario file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"scenario file {p} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"scenario file {p} must hold a JSON object")
    known = set(_SECTIONS) | {"name", "seeds", "out"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    if seed_overrides:
        seeds = dict(raw.get("seeds", {}))
        for name, val in seed_overrides.items():
            if name not in seeds:
                raise ConfigError(f"cannot override unknown seed {name!r}")
            seeds[name] = val
        raw = {**raw, "seeds": seeds}
    try:
        return Scenario(**raw)
    except TypeError as e:
        raise ConfigError(f"malformed scenario: {e}") from e


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(
        json.dumps(asdict(sc), sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# artifact plumbing

def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def _atomic_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _atomic_text(path: Path, text: str) -> None:
    _atomic_bytes(path, text.encode())


def _atomic_writer(path: Path, writer, sidecars=()) -> None:
    """Run a library writer against a temp basename, then rename into place."""
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)
    for suffix in sidecars:
        os.replace(Path(str(tmp) + suffix), Path(str(path) + suffix))


def _write_csv(path: Path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    _atomic_text(path, "\n".join(lines) + "\n")


def _write_json(path: Path, obj) -> None:
    _atomic_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_manifest(outdir: Path, sc: Scenario, sub: str) -> None:
    files = {}
    for p in sorted(outdir.rglob("*")):
        if p.is_dir() or p.name == "manifest.json" or p.name.endswith(".tmp"):
            continue
        files[p.relative_to(outdir).as_posix()] = hashlib.sha256(
            p.read_bytes()).hexdigest()
    _write_json(outdir / "manifest.json",
                {"scenario": sc.name, "subcommand": sub, "files": files})


def _pgm_grid(origin, cell_size, name, array, path: Path) -> None:
    layer = GridMap2D(origin, cell_size, {name: np.nan_to_num(array)})
    _atomic_writer(path, lambda tmp: write_layer_pgm(layer, name, tmp),
                   sidecars=(".hdr",))


# ---------------------------------------------------------------------------
# scenario -> domain objects

def _field_spec(sc: Scenario) -> FieldSpec:
    d = dict(sc.field)
    if "terrain" in d:
        d["terrain"] = TerrainParams(**d["terrain"])
    for key in ("extent", "crop_radius_range", "weed_radius_range"):
        if key in d:
            d[key] = tuple(d[key])
    d["seed"] = sc.seeds["field"]
    try:
        return FieldSpec(**d)
    except TypeError as e:
        raise ConfigError(f"bad field section: {e}") from e


def _render(sc: Scenario, truth):
    r = sc.render
    return render_grid(truth, cell_size=r.get("cell_size", 0.05),
                       noise_sigma=r.get("noise_sigma", 0.03),
                       seed=sc.seeds["render"])


def _resolve(path_str: str, scenario_path: Path) -> Path:
    p = Path(path_str)
    return p if p.is_absolute() else scenario_path.parent / p


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen(sc: Scenario, outdir: Path, args) -> None:
    truth = generate(_field_spec(sc))
    _atomic_writer(outdir / "truth.geojson",
                   lambda tmp: export_truth_geojson(truth, tmp))
    grid = _render(sc, truth)
    for band in ("r", "g", "b", "height"):
        _atomic_writer(outdir / f"{band}.pgm",
                       lambda tmp, b=band: write_layer_pgm(grid, b, tmp),
                       sidecars=(".hdr",))
    _atomic_writer(outdir / "cloud.ply",
                   lambda tmp: write_ply(cloud_from_render(grid), tmp))


def _load_grid_files(paths: list, scenario_path: Path) -> GridMap2D:
    layers = {}
    geometry = None
    for raw in paths:
        band, grid = read_layer_pgm(_resolve(raw, scenario_path))
        geom = (tuple(grid.origin), grid.cell_size, grid.shape)
        if geometry is None:
            geometry = geom
        elif geom != geometry:
            raise ConfigError("grid files disagree on geometry")
        layers[band] = grid.layer(band)
    if not layers:
        raise ConfigError("rows.grids lists no files")
    origin, cell, _ = geometry
    return GridMap2D(origin, cell, layers)


def _cmd_rows(sc: Scenario, outdir: Path, args) -> None:
    rcfg = sc.rows
    if rcfg.get("grids"):
        grid = _load_grid_files(rcfg["grids"], Path(args.scenario))
    else:
        grid = _render(sc, generate(_field_spec(sc)))
    feats = rownav.extract_feature_grid(
        grid, threshold=rcfg.get("threshold", 0.1))
    skw = dict(rcfg.get("search", {}))
    for key in ("theta_range", "spacing_range"):
        if key in skw:
            skw[key] = tuple(skw[key])
    try:
        search = rownav.PatternSearch(**skw)
    except TypeError as e:
        raise ConfigError(f"bad rows.search section: {e}") from e
    pattern = rownav.detect_pattern(feats, search, tol=rcfg.get("tol", 0.03))
    _write_csv(outdir / "pattern.csv",
               ["theta_rad", "spacing_m", "offset_m", "score"],
               [[pattern.theta, pattern.spacing, pattern.offset, pattern.score]])
    # overlay: exg raster with the detected lines burned in at the max value
    exg = np.nan_to_num(grid.layer("exg")).copy()
    centers = grid.cell_centers().reshape(-1, 2)
    dist = pattern.line_distance(centers).reshape(grid.shape)
    exg[dist <= grid.cell_size / 2] = exg.max() if exg.size else 1.0
    _pgm_grid(grid.origin, grid.cell_size, "overlay", exg,
              outdir / "overlay.pgm")


_LOCALIZE_BUILDERS = {
    "drift": sn.build_drift_scenario,
    "consistent": sn.build_consistent_scenario,
    "noisy_gps": sn.build_noisy_gps_scenario,
}


def _cmd_localize(sc: Scenario, outdir: Path, args) -> None:
    lcfg = sc.localize
    kind = lcfg.get("kind", "noisy_gps")
    if kind not in _LOCALIZE_BUILDERS:
        raise ConfigError(f"unknown localize.kind {kind!r}")
    kwargs = {"seed": sc.seeds["localize"]}
    if "n" in lcfg:
        kwargs["n"] = lcfg["n"]
    lsc = _LOCALIZE_BUILDERS[kind](**kwargs)
    try:
        cfg = pg.WindowConfig(**lcfg.get("window", {}))
    except TypeError as e:
        raise ConfigError(f"bad localize.window section: {e}") from e

    graph = pg.PoseGraph(cfg)
    for k in range(lsc.n):
        pg.slide(graph, lsc.node(k), lsc.constraints[k], cfg)
    traj = graph.trajectory()

    rows = []
    for k in sorted(traj):
        opt_err = float(np.linalg.norm(traj[k] - lsc.truth_t[k]))
        gps_err = (float(np.linalg.norm(lsc.gps[k] - lsc.truth_t[k]))
                   if lsc.gps is not None else math.nan)
        rows.append([k, gps_err, opt_err])
    _write_csv(outdir / "errors.csv",
               ["node", "raw_gps_error_m", "optimized_error_m"], rows)
    _atomic_writer(outdir / "graph.g2o",
                   lambda tmp: pg.save_g2o(graph, tmp))
    summary = {
        "kind": kind,
        "nodes": lsc.n,
        "rmse_optimized": sn.trajectory_rmse(traj, lsc.truth_t),
    }
    if lsc.gps is not None:
        summary["rmse_raw_gps"] = sn.gps_rmse(lsc)
    _write_json(outdir / "summary.json", summary)


def _cmd_register(sc: Scenario, outdir: Path, args) -> None:
    rcfg = sc.register
    if "aerial" in rcfg and "ground" in rcfg:
        aerial = read_ply(_resolve(rcfg["aerial"], Path(args.scenario)))
        ground = read_ply(_resolve(rcfg["ground"], Path(args.scenario)))
    else:
        rsc = sn.build_registration_scenario(
            seed=sc.seeds["register"], misaligned=rcfg.get("misaligned", True))
        aerial, ground = rsc.aerial, rsc.ground
        _atomic_writer(outdir / "aerial.ply",
                       lambda tmp: write_ply(aerial, tmp))
        _atomic_writer(outdir / "ground.ply",
                       lambda tmp: write_ply(ground, tmp))
    try:
        cfg = RegistrationConfig(**rcfg.get("config", {}))
    except TypeError as e:
        raise ConfigError(f"bad register.config section: {e}") from e

    res = register(aerial, ground, cfg)
    rows = ["  ".join(f"{v:.12g}" for v in np.hstack(
        [res.transform.A[i], res.transform.t[i]])) for i in range(3)]
    _atomic_text(outdir / "transform.txt", "\n".join(rows) + "\n")
    _write_json(outdir / "rmse.json", {
        "rmse_m": res.rmse,
        "gate_m": cfg.cell_size,
        "passed": bool(res.rmse < cfg.cell_size),
        "n_matches": res.n_matches,
    })
    if rcfg.get("debug"):
        g_a = build_grid(aerial, cfg.match_cell_size)
        g_g = build_grid(ground, cfg.match_cell_size)
        for tag, g in (("aerial", g_a), ("ground", g_g)):
            _pgm_grid(g.grid.origin, g.grid.cell_size, "exg",
                      np.where(g.valid, g.exg, 0.0), outdir / f"{tag}_exg.pgm")
            _pgm_grid(g.grid.origin, g.grid.cell_size, "height",
                      np.where(g.valid, g.height, 0.0),
                      outdir / f"{tag}_height.pgm")
        flow = match_flow(g_a, g_g)
        _pgm_grid(g_a.grid.origin, g_a.grid.cell_size, "du",
                  np.where(flow.valid, flow.du, 0.0), outdir / "flow_du.pgm")
        _pgm_grid(g_a.grid.origin, g_a.grid.cell_size, "dv",
                  np.where(flow.valid, flow.dv, 0.0), outdir / "flow_dv.pgm")


def _cmd_plan(sc: Scenario, outdir: Path, args) -> None:
    pcfg = sc.plan
    planners = pcfg.get("planners", ["lawnmower", "cmaes"])
    bad = [p for p in planners if p not in ("lawnmower", "cmaes")]
    if bad:
        raise ConfigError(f"unknown planners {bad}")
    budget = float(pcfg.get("budget", 120.0))
    trials = args.trials if args.trials is not None else pcfg.get("trials", 3)
    if trials < 1:
        raise ConfigError("plan needs at least one trial")
    truth = generate(_field_spec(sc))
    world = ms.weed_pressure_world(truth, pcfg.get("pressure_sigma", 0.8))
    try:
        sensor = ipp.SensorModel(**pcfg.get("sensor", {}))
    except TypeError as e:
        raise ConfigError(f"bad plan.sensor section: {e}") from e
    extent = tuple(pcfg.get("extent", truth.spec.extent))
    common = {
        "extent": extent,
        "resolution": pcfg.get("resolution", 1.0),
        "speed": pcfg.get("speed", 2.0),
        "dwell": pcfg.get("dwell", 1.0),
    }

    summary_rows = []
    for planner in planners:
        finals = []
        for k in range(trials):
            log = ipp.run_mission(world, sensor, planner, budget,
                                  seed=sc.seeds["plan"] + k, **common)
            rows = []
            pose = np.asarray((0.0, 0.0, 6.0), dtype=float)
            for i, (t, trace) in enumerate(log.trace_history):
                if i > 0:
                    pose = log.trajectory[i - 1]
                rows.append([t, trace, pose[0], pose[1], pose[2]])
            _write_csv(outdir / f"{planner}_trial{k}.csv",
                       ["time_s", "trace", "x", "y", "z"], rows)
            finals.append(log.final_trace)
        summary_rows.append([planner, budget, float(np.mean(finals)),
                             float(np.std(finals))])
    _write_csv(outdir / "summary.csv",
               ["planner", "budget_s", "final_trace_mean", "final_trace_std"],
               summary_rows)


def _cmd_mission(sc: Scenario, outdir: Path, args) -> None:
    mcfg = sc.mission
    truth = generate(_field_spec(sc))
    deadline = mcfg.get("deadline", 30.0)
    channel = ms.LossyChannel(
        p=mcfg.get("p", 0.3),
        latency=tuple(mcfg.get("latency", (0.02, 0.1))),
        seed=sc.seeds["mission"],
        retransmit_period=mcfg.get("retransmit_period", 1.0),
        deadline=None if deadline is None else float(deadline))
    try:
        uav = ms.UavConfig(**mcfg.get("uav", {}))
        ugv_section = mcfg.get("ugv", {})
        ugvs = [] if ugv_section is None else [ms.UgvConfig(**ugv_section)]
    except TypeError as e:
        raise ConfigError(f"bad mission agent section: {e}") from e
    res = ms.coordinated_mission(
        truth, [uav], ugvs, channel, seed=sc.seeds["mission"],
        dt=mcfg.get("dt", 0.1),
        mission_deadline=mcfg.get("mission_deadline", 600.0))

    rows = [[e.time, e.agent, e.event,
             hashlib.sha256(e.detail.encode()).hexdigest()[:16]]
            for e in res.events]
    _write_csv(outdir / "events.csv",
               ["time_s", "agent", "event", "payload_digest"], rows)
    _write_json(outdir / "result.json", {
        "state": res.state,
        "duration_s": res.duration,
        "areas": [{"id": a.id, "polygon": [list(v) for v in a.polygon],
                   "pressure": a.pressure} for a in res.aois],
        "treated": {str(k): v for k, v in res.treated.items()},
        "uav_tree": {"kind": "sequence",
                     "children": ["survey", "announce", "await"]},
        "ugv_tree": None if not ugvs else {"kind": "leaf", "name": "serve"},
    })


def _cmd_treat(sc: Scenario, outdir: Path, args) -> None:
    tcfg = sc.treat
    truth = generate(_field_spec(sc))
    speeds = tcfg.get("speeds", [0.1, 0.2, 0.4])
    sigmas = tcfg.get("roughness", [0.0, 0.05])
    y_track = tcfg.get("y_track", truth.spec.extent[1] / 2.0)
    x0 = tcfg.get("x_start", -1.0)
    x1 = truth.spec.extent[0] + 1.5
    try:
        det_kwargs = dict(tcfg.get("detector", {}))
        bank = weedops.default_bank(**tcfg.get("bank", {}))
        cfg = weedops.TreatmentConfig(**tcfg.get("config", {}))
    except TypeError as e:
        raise ConfigError(f"bad treat section: {e}") from e

    rows = []
    for sigma in sigmas:
        for speed in speeds:
            path = CameraPath(np.array([[x0, y_track], [x1, y_track]]),
                              speed=speed)
            params = DetectorParams(seed=sc.seeds["treat"], **det_kwargs)
            events = simulate_detections(truth, path, params)
            run = weedops.RobotRun(y_track=y_track, x_start=x0, speed=speed,
                                   roughness=sigma, seed=sc.seeds["treat"])
            m = weedops.simulate_treatment(truth, events, run, bank=bank,
                                           cfg=cfg)
            for kind in ("stamp", "spray"):
                n = m.attempted.get(kind, 0)
                rate = m.rate(kind) if n else math.nan
                rows.append([speed, sigma, kind, n, m.treated.get(kind, 0),
                             rate, m.crop_casualties])
    _write_csv(outdir / "metrics.csv",
               ["speed_mps", "roughness_m", "tool", "attempted", "treated",
                "rate", "crop_casualties"], rows)


def _cmd_report(sc: Scenario, outdir: Path, args) -> None:
    root = outdir.parent
    rows = []
    for sub in SUBCOMMANDS:
        if sub == "report":
            continue
        subdir = root / sub
        if not subdir.is_dir():
            continue
        for csv_path in sorted(subdir.rglob("*.csv")):
            lines = csv_path.read_text().splitlines()
            header = lines[0] if lines else ""
            rows.append([sub, csv_path.relative_to(root).as_posix(),
                         max(len(lines) - 1, 0), header.replace(",", ";")])
    _write_csv(outdir / "summary.csv",
               ["subcommand", "file", "rows", "columns"], rows)


_DISPATCH = {
    "gen": _cmd_gen,
    "rows": _cmd_rows,
    "localize": _cmd_localize,
    "register": _cmd_register,
    "plan": _cmd_plan,
    "mission": _cmd_mission,
    "treat": _cmd_treat,
    "report": _cmd_report,
}


# ---------------------------------------------------------------------------
# entry point

def _parse_seed_override(text: str) -> tuple[str, int]:
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise ConfigError(f"seed override must look like name=value: {text!r}")
    try:
        num = int(value)
    except ValueError:
        raise ConfigError(f"seed override value is not an integer: {text!r}")
    if not 0 <= num < 2**64:
        raise ConfigError("seed override must be an unsigned 64-bit integer")
    return name, num


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agrisim",
        description="Run one simulator stage from a scenario file.")
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--scenario", required=True,
                        help="path to the scenario JSON file")
    parser.add_argument("--out", default=None,
                        help="output root (default: scenario out, then "
                             "$AGRISIM_OUT, then ./out)")
    parser.add_argument("--seed-override", action="append", default=[],
                        metavar="NAME=U64",
                        help="replace one named seed from the scenario")
    parser.add_argument("--trials", type=int, default=None,
                        help="trial count for the plan subcommand")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        overrides = dict(_parse_seed_override(s) for s in args.seed_override)
        sc = load_scenario(args.scenario, overrides)
        root = args.out or sc.out or os.environ.get("AGRISIM_OUT") or "out"
        outdir = Path(root) / sc.name / args.command
        outdir.mkdir(parents=True, exist_ok=True)
        _DISPATCH[args.command](sc, outdir, args)
        _write_manifest(outdir, sc, args.command)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except AgrisimError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(outdir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
