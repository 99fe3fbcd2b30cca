"""Seeded, parallel execution of configured experiments and result persistence.

Realization k of a run with master seed s draws its ensemble from
``SeedSequence(s, spawn_key=(k, 0))`` and its engine randomness from
``SeedSequence(s, spawn_key=(k, 1))``; adding realizations never changes the
existing ones.  Realizations run in a process pool but are always combined
in index order, so outputs do not depend on the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__, analytics, fit, pipeline, protocol
from .config import RunConfig, grid_values
from .ensemble import RemovalModel, mean_nn_spacing
from .model import build_coupling, coupling_distribution, mean_field_chi
from .stats import combined_sx


def realization_seeds(master: int, k: int) -> tuple[int, int]:
    """(ensemble seed, engine seed) of realization ``k``."""
    return protocol._sub_seed(master, k, 0), protocol._sub_seed(master, k, 1)


def prelude_of(cfg: RunConfig):
    p = cfg.geometry.prelude
    if p.kind == "none":
        return None
    if p.kind == "ramp":
        return protocol.RampSpec(p.h0, p.k, p.duration, p.steps, p.wait)
    return RemovalModel(p.kind, p.radius, p.coupling_source)


def build_plan(cfg: RunConfig) -> protocol.QuenchPlan:
    e, g = cfg.engine, cfg.grids
    return protocol.QuenchPlan(
        t_g=grid_values(g.t_g),
        theta=grid_values(g.theta),
        t_r=grid_values(g.t_r),
        engine=e.name,
        eta=e.eta,
        n_realizations=e.n_realizations,
        n_traj=e.n_traj,
        seed=cfg.seed,
        prelude=prelude_of(cfg),
        max_spins=e.max_spins,
        steps_per_radian=e.steps_per_radian,
    )


def make_ensemble(cfg: RunConfig, k: int):
    ens_seed, _ = realization_seeds(cfg.seed, k)
    g = cfg.geometry
    return protocol.sample_engineered(g.n_spins, g.density, g.thickness, prelude_of(cfg), ens_seed)


# ---------------------------------------------------------------- tasks


def _task(args):
    """One realization of any simulation kind (top level so it pickles)."""
    cfg_dict, kind, k = args
    cfg = RunConfig.model_validate(cfg_dict)
    _, eng_seed = realization_seeds(cfg.seed, k)
    ens = make_ensemble(cfg, k)
    plan = build_plan(cfg)
    J0 = cfg.engine.J0
    if kind == "ensemble":
        graph = build_coupling(ens, J0)
        return ens, graph
    if kind == "twist":
        return protocol.run_twisting(plan, ens, grid_values(cfg.grids.phi), seed=eng_seed, J0=J0)
    if kind == "generation":
        return protocol.run_generation(plan, ens, eng_seed, J0).stats
    twist_t = grid_values(cfg.analysis.twist_times) if kind in ("map", "squeeze") else None
    return pipeline.simulate_realization(plan, ens, eng_seed, cfg.analysis.twist_phi, twist_t, J0)


def parallel_map(fn, items, threads=1) -> list:
    """Ordered map; a process pool when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def format_csv(meta: dict, columns, rows) -> str:
    """CSV with ``# key: value`` header comments; floats use shortest round-trip repr."""
    buf = io.StringIO()
    for key in sorted(meta):
        buf.write(f"# {key}: {meta[key]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunResult:
    out_dir: Path
    files: dict  # name -> text
    manifest: dict


def run(cfg: RunConfig, threads: int = 1, write: bool = True) -> RunResult:
    """Execute a configured experiment and (optionally) persist its outputs."""
    t0 = time.perf_counter()
    n_real = cfg.engine.n_realizations
    seeds = [dict(zip(("ensemble", "engine"), realization_seeds(cfg.seed, k))) for k in range(n_real)]
    meta = {
        "kind": cfg.kind,
        "name": cfg.name,
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "master_seed": cfg.seed,
    }
    failure = None
    if cfg.kind == "crossover":
        files = _crossover(cfg, meta)
    else:
        parts = parallel_map(_task, [(cfg.model_dump(mode="json"), cfg.kind, k) for k in range(n_real)], threads)
        try:
            files = HANDLERS[cfg.kind](cfg, parts, seeds, meta)
        except fit.MapConstructionError as exc:
            # keep the evidence of a failed map on disk, then report the failure
            failure, files = exc, getattr(exc, "partial_files", {})
    out_dir = Path(cfg.output.dir)
    manifest = {
        "config_hash": meta["config_hash"],
        "config": cfg.semantic_dict(),
        "kind": cfg.kind,
        "master_seed": cfg.seed,
        "realization_seeds": seeds,
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "threads": threads,
        "wall_time_s": time.perf_counter() - t0,
        "status": "ok" if failure is None else f"map construction failed: {failure}",
        "outputs": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(files.items())},
    }
    if write:
        for name, text in files.items():
            atomic_write(out_dir / name, text)
        atomic_write(out_dir / "manifest.json", _json(manifest))
    if failure is not None:
        failure.run_result = RunResult(out_dir, files, manifest)
        raise failure
    return RunResult(out_dir, files, manifest)


# ---------------------------------------------------------------- handlers


def _prov(cfg, seeds):
    engine_seeds = ";".join(str(s["engine"]) for s in seeds)
    n_traj = cfg.engine.n_traj if cfg.engine.name == "dtwa" else (1 if cfg.engine.eta == 1.0 else cfg.engine.n_traj)
    return engine_seeds, n_traj * len(seeds)


def _ensemble(cfg, parts, seeds, meta):
    rows = []
    graphs = []
    for k, ((ens, graph), s) in enumerate(zip(parts, seeds)):
        c = ens.counts()
        chi = mean_field_chi(graph) if graph.n > 1 else float("nan")
        rows.append(
            [k, s["ensemble"], ens.n_spins, c["active"], c["shelved"], c["depolarized"], mean_nn_spacing(ens), chi]
        )
        graphs.append(graph)
    cols = ["realization", "seed", "n_total", "n_active", "n_shelved", "n_depolarized", "mean_nn_nm", "chi_rad_us"]
    hist = coupling_distribution(graphs)
    return {
        "ensembles.csv": format_csv(meta, cols, rows),
        "coupling_histogram.csv": hist.to_csv(),
        "positions.json": _json([ens.to_dict() for ens, _ in parts]),
    }


def _twist(cfg, parts, seeds, meta):
    prov, n_traj = _prov(cfg, seeds)
    phis = grid_values(cfg.grids.phi)
    rows = []
    chis = {}
    for a, phi in enumerate(phis):
        per = [p[a] for p in parts]
        t = per[0].t
        sx = sum(r.sx for r in per)
        sy = sum(r.sy for r in per)
        ex = np.sqrt(sum(r.sx_err**2 for r in per))
        ey = np.sqrt(sum(r.sy_err**2 for r in per))
        php = np.arctan2(sy, sx)
        for k in range(len(t)):
            rows.append([phi, t[k], sx[k], ex[k], sy[k], ey[k], php[k], prov, n_traj])
        if abs(math.sin(phi)) > 1e-12:
            try:
                chis[repr(phi)] = analytics.chi_from_twisting(t, sy / sx, phi, cfg.analysis.twist_max_ratio)
            except ValueError:
                chis[repr(phi)] = None
    cols = ["phi_o", "t", "sx", "sx_err", "sy", "sy_err", "phi_p", "seeds", "n_traj"]
    return {"twist.csv": format_csv(meta, cols, rows), "chi.json": _json({"chi_by_phi": chis})}


def _generation(cfg, parts, seeds, meta):
    prov, n_traj = _prov(cfg, seeds)
    t_g = grid_values(cfg.grids.t_g)
    half = 0.5 * cfg.geometry.n_spins * len(parts)
    rows, vals, errs = [], [], []
    for k, t in enumerate(t_g):
        v, e = combined_sx([p[k] for p in parts])
        vals.append(v / half)
        errs.append(e / half)
        rows.append([t, v / half, e / half, prov, n_traj])
    files = {"generation.csv": format_csv(meta, ["t_g", "sx_norm", "stderr", "seeds", "n_traj"], rows)}
    errs_arr = np.array(errs)
    curve = fit.DecayCurve(t_g, vals, errs_arr if np.all(errs_arr > 0) else None)
    try:
        f = fit.fit_stretched([curve], p_mode=cfg.analysis.p_mode)
        files["generation_fit.json"] = _json(f.to_dict())
    except fit.FitError as exc:
        files["generation_fit.json"] = _json({"error": str(exc)})
    return files


def _readout_rows(data, prov, n_traj):
    rows = []
    for a, tg in enumerate(data.t_g):
        for b, th in enumerate(data.theta):
            for c, tr in enumerate(data.t_r):
                rows.append([tg, th, tr, data.readout[a, b, c], data.readout_err[a, b, c], prov, n_traj])
    return rows


def _moment_rows(data, prov, n_traj):
    rows = []
    for a, tg in enumerate(data.t_g):
        for b, th in enumerate(data.theta):
            rows.append([tg, th, data.var_theta[a, b], data.var_ratio[a, b], prov, n_traj])
    return rows


def _readout(cfg, parts, seeds, meta):
    prov, n_traj = _prov(cfg, seeds)
    data = pipeline.combine_realizations(build_plan(cfg), parts)
    return {
        "readout.csv": format_csv(meta, ["t_g", "theta", "t_r", "sx", "stderr", "seeds", "n_traj"],
                                  _readout_rows(data, prov, n_traj)),
        "variance.csv": format_csv(meta, ["t_g", "theta", "var", "var_ratio", "seeds", "n_traj"],
                                   _moment_rows(data, prov, n_traj)),
    }  # fmt: skip


def _analysis(cfg, parts):
    data = pipeline.combine_realizations(build_plan(cfg), parts, cfg.analysis.twist_phi, cfg.analysis.twist_max_ratio)
    t_max = tuple(cfg.analysis.t_max) if cfg.analysis.t_max else (None,)
    return data, pipeline.analyze(data, t_max, p_mode=cfg.analysis.p_mode, map_tolerance=cfg.analysis.map_tolerance)


def _readout_file(data, meta, prov, n_traj):
    cols = ["t_g", "theta", "t_r", "sx", "stderr", "seeds", "n_traj"]
    return format_csv(meta, cols, _readout_rows(data, prov, n_traj))


def _direct_file(data, meta, prov, n_traj):
    rows = [
        [data.t_g[a], data.xi2_direct[a], data.xi2_direct_err[a], data.gen_sx[a] / (0.5 * data.n), prov, n_traj]
        for a in range(len(data.t_g))
    ]
    return format_csv(meta, ["t_g", "xi2_direct", "xi2_direct_err", "sx_norm", "seeds", "n_traj"], rows)


def _map_failure(cfg, parts, meta, prov, n_traj, exc):
    """Files that document a failed map: readouts, true moments, fits and the diagnostics."""
    data = pipeline.combine_realizations(build_plan(cfg), parts, cfg.analysis.twist_phi, cfg.analysis.twist_max_ratio)
    t_max = tuple(cfg.analysis.t_max) if cfg.analysis.t_max else (None,)
    fits, t2, _, t_o = pipeline.fit_readouts(data, t_max, p_mode=cfg.analysis.p_mode)
    report = {
        "error": str(exc),
        "diagnostics": exc.diagnostics,
        "chi": data.chi,
        "t_o": t_o,
        "points": [vars(p) for p in pipeline.map_points(data, t2[0])],
        "fits": {repr(k): v.to_dict() for k, v in fits.items()},
    }
    return {
        "map_error.json": _json(report),
        "readout.csv": _readout_file(data, meta, prov, n_traj),
        "variance.csv": format_csv(meta, ["t_g", "theta", "var", "var_ratio", "seeds", "n_traj"],
                                   _moment_rows(data, prov, n_traj)),
        "xi2_direct.csv": _direct_file(data, meta, prov, n_traj),
    }  # fmt: skip


def _map_files(data, res, meta, prov, n_traj):
    fits = {repr(k): v.to_dict() for k, v in res.fits.items()}
    return {
        "map.json": _json(res.vmap.to_dict()),
        "map.csv": res.vmap.to_csv(),
        "fits.json": _json({"chi": data.chi, "t_o": res.t_o, "fits": fits}),
        "readout.csv": _readout_file(data, meta, prov, n_traj),
        "xi2_direct.csv": _direct_file(data, meta, prov, n_traj),
    }


def _with_map(cfg, parts, seeds, meta, extra=None):
    prov, n_traj = _prov(cfg, seeds)
    try:
        data, res = _analysis(cfg, parts)
    except fit.MapConstructionError as exc:
        exc.partial_files = _map_failure(cfg, parts, meta, prov, n_traj, exc)
        raise
    files = _map_files(data, res, meta, prov, n_traj)
    if extra:
        files.update(extra(data, res, meta, prov, n_traj))
    return files


def _map(cfg, parts, seeds, meta):
    return _with_map(cfg, parts, seeds, meta)


def _xi2_file(data, res, meta, prov, n_traj):
    x = res.xi2
    rows = [
        [data.t_g[a], x.xi2[a], x.err[a], x.stat_err[a], x.sweep_spread[a], x.min_ratio[a],
         data.xi2_direct[a], data.xi2_direct_err[a], data.gen_sx[a] / (0.5 * data.n), prov, n_traj]
        for a in range(len(data.t_g))
    ]  # fmt: skip
    cols = ["t_g", "xi2", "xi2_err", "stat_err", "sweep_spread", "min_var_ratio", "xi2_direct",
            "xi2_direct_err", "sx_norm", "seeds", "n_traj"]  # fmt: skip
    return {"xi2.csv": format_csv(meta, cols, rows)}


def _squeeze(cfg, parts, seeds, meta):
    return _with_map(cfg, parts, seeds, meta, _xi2_file)


def _crossover(cfg, meta):
    t = np.array(grid_values(cfg.crossover.t))
    rows = []
    tc = {}
    dens = cfg.geometry.density
    for r in cfg.crossover.r_min:
        params = analytics.CrossoverParams(dens, r, cfg.engine.J0)
        sx = analytics.crossover_sx(params, t)
        ex = analytics.local_stretch_exponent(params, t)
        rows += [[r, t[k], sx[k], ex[k]] for k in range(len(t))]
        tc[repr(r)] = analytics.crossover_time(params) if r > 0 else None
    return {
        "crossover.csv": format_csv(meta, ["r_min", "t", "sx", "local_exponent"], rows),
        "crossover_time.json": _json({"t_c": tc}),
    }


HANDLERS = {
    "ensemble": _ensemble,
    "twist": _twist,
    "generation": _generation,
    "readout": _readout,
    "map": _map,
    "squeeze": _squeeze,
}
