"""Command-line pipeline: simulate, fit, spectrum, discover, stitch, predict.

Every subcommand reads an optional JSON run configuration (``--config``);
flags override the file. Outputs are CSV/JSON files meant for scripts and
external plotting tools. Relative data paths stored inside model files are
relative to the model file, so an output directory can be moved or
compared byte-for-byte with another run.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dynamics, edmd, spectral, stitching
from .config import RunConfig, load_config
from .discovery import DictionarySettings, run_discovery, write_history_jsonl
from .errors import KoopstitchError, NumericalError, ValidationError
from .lifting import build_dictionary

log = logging.getLogger("koopstitch")

__all__ = ["main", "build_parser"]


# ----------------------------------------------------------------------------
# helpers


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc


def _rel(target, base_dir) -> str:
    """``target`` relative to ``base_dir``, with forward slashes."""
    return Path(os.path.relpath(os.path.abspath(target), os.path.abspath(base_dir))).as_posix()


def _resolve(path, base_dir) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def _ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {p}: {exc}") from exc
    return p


def _read_data(path, system) -> list[dynamics.Trajectory]:
    if not os.path.exists(path):
        raise ValidationError(f"data file not found: {path}")
    return dynamics.read_trajectories_csv(path, system)


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"cannot parse vector {text!r}") from exc


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationError(f"cannot parse trajectory ids {text!r}") from exc


def _default_data(cfg: RunConfig) -> str:
    return cfg.paths.data or os.path.join(cfg.paths.out, "trajectories.csv")


def _is_stitched(d: dict) -> bool:
    return "locals" in d


def _with_data_path(model: edmd.KoopmanModel, data: str | None) -> edmd.KoopmanModel:
    prov = dict(model.provenance)
    if data is None:
        prov.pop("data", None)
    else:
        prov["data"] = data
    return dataclasses.replace(model, provenance=prov)


def select_subset(trajs, cfg: RunConfig, subset: str):
    """Trajectories of a named basin ("left"/"right"), all of them, or ``ids:1,2``."""
    if subset == "all":
        return list(trajs)
    if subset.startswith("ids:"):
        wanted = set(_parse_ids(subset[4:]))
        chosen = [tr for tr in trajs if tr.id in wanted]
    elif subset in ("left", "right"):
        if cfg.system.name not in dynamics.ATTRACTOR_SEEDS:
            raise ValidationError(f"no basin labels are defined for system {cfg.system.name!r}")
        labels = dynamics.label_by_final_state(trajs, dynamics.attractors(cfg.system),
                                               cfg.basin_radius)
        chosen = [tr for tr, lab in zip(trajs, labels) if lab == subset]
    else:
        raise ValidationError(f"unknown subset {subset!r}; use all, left, right or ids:...")
    if not chosen:
        raise ValidationError(f"subset {subset!r} selects no trajectories")
    return chosen


# ----------------------------------------------------------------------------
# configuration from file + flags


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else None
    system = getattr(args, "system", None)
    if cfg is None:
        cfg = RunConfig.for_system(system or "toggle_switch")
    elif system and system != cfg.system.name:
        d = cfg.to_dict()
        d["system"] = {"name": system}
        d.pop("ic_grid")
        cfg = RunConfig.from_dict(d)
    top = {}
    for key in ("dt", "steps", "substeps"):
        v = getattr(args, key, None)
        if v is not None:
            top[key] = v

    def sub(section, mapping):
        changes = {field: getattr(args, flag) for flag, field in mapping.items()
                   if getattr(args, flag, None) is not None}
        return dataclasses.replace(getattr(cfg, section), **changes) if changes else None

    sections = {
        "dictionary": sub("dictionary", {"N": "N", "sigma": "sigma", "dict_seed": "seed",
                                         "dictionary_kind": "kind", "constant": "constant"}),
        "edmd": sub("edmd", {"rel_tol": "rel_tol", "lag": "lag"}),
        "spectral": sub("spectral", {"unit_tol": "unit_tol", "rank_tol": "rank_tol",
                                     "resolution": "resolution", "level": "level"}),
        "discovery": sub("discovery", {"n": "n", "safety": "safety",
                                       "dictionary_policy": "dictionary_policy",
                                       "order_seed": "order_seed"}),
        "paths": sub("paths", {"data": "data", "out": "out"}),
    }
    top.update({k: v for k, v in sections.items() if v is not None})
    return cfg.replace(**top) if top else cfg


# ----------------------------------------------------------------------------
# stages


def run_simulate(cfg: RunConfig, out_dir) -> Path:
    out = _ensure_dir(out_dir)
    x0s = dynamics.grid_initial_conditions(cfg.ic_grid)
    bounds = cfg.ic_grid.bounding_box(cfg.domain_factor)
    trajs = dynamics.simulate_batch(cfg.system, x0s, cfg.dt, cfg.steps, cfg.substeps, bounds)
    path = out / "trajectories.csv"
    dynamics.write_trajectories_csv(path, trajs)
    _write_json(out / "config.json", cfg.to_dict())
    _write_json(out / "simulate_report.json", {
        "system": cfg.system.to_dict(),
        "trajectories": len(trajs),
        "samples_per_trajectory": cfg.steps + 1,
        "dt": cfg.dt,
        "substeps": cfg.substeps,
        "final_states": [tr.states[-1].tolist() for tr in trajs],
    })
    print(f"simulated {len(trajs)} trajectories x {cfg.steps + 1} samples -> {path}")
    return path


def run_fit(cfg: RunConfig, data_path, subset: str = "all", label: str | None = None,
            out_path=None, centers_from: str = "all") -> Path:
    """Fit one model; RBF centers come from all data in the file unless
    ``centers_from='subset'``."""
    trajs = _read_data(data_path, cfg.system)
    chosen = select_subset(trajs, cfg, subset)
    label = label or ("global" if subset == "all" else subset.replace(":", "_"))
    out_path = Path(out_path or os.path.join(cfg.paths.out, f"model_{label}.json"))
    _ensure_dir(out_path.parent)
    if centers_from not in ("all", "subset"):
        raise ValidationError("centers_from must be 'all' or 'subset'")
    pool = trajs if centers_from == "all" else chosen
    dc = cfg.dictionary
    dictionary = build_dictionary(dc.kind, np.vstack([tr.states for tr in pool]), dc.N, dc.sigma,
                                  dc.seed, constant=dc.constant)
    model = edmd.fit_trajectories(chosen, dictionary, cfg.edmd.rel_tol, label,
                                  _rel(data_path, out_path.parent), cfg.edmd.lag)
    edmd.save_model(model, out_path)
    spec = spectral.decompose(model, cfg.spectral.unit_tol)
    report = {
        "label": label,
        "subset": subset,
        "trajectories": len(chosen),
        "N": model.N,
        "lag": model.lag,
        "dictionary_seed": dc.seed,
        "centers_from": centers_from,
        "training_stats": model.training_stats,
        "unit_multiplicity": spectral.unit_multiplicity(spec, cfg.spectral.rank_tol),
    }
    _write_json(out_path.with_suffix(".report.json"), report)
    print(f"fitted {label!r}: {model.N}x{model.N} from {len(chosen)} trajectories, "
          f"rank {model.training_stats['svd_rank']} -> {out_path}")
    return out_path


def _field_grid(cfg: RunConfig, model_path, models) -> dynamics.InitialConditionGrid:
    """Grid over the training data of ``models``; falls back to the IC box."""
    base = os.path.dirname(os.path.abspath(model_path))
    states = []
    for m in models:
        src, ids = m.provenance.get("data"), m.provenance.get("traj_ids")
        if src is None or ids is None:
            continue
        path = _resolve(src, base)
        if not os.path.exists(path):
            continue
        by_id = {tr.id: tr for tr in dynamics.read_trajectories_csv(path, cfg.system)}
        states.extend(by_id[i].states for i in ids if i in by_id)
    if states:
        return spectral.data_grid(np.vstack(states), cfg.spectral.resolution, cfg.spectral.pad)
    log.warning("training data not found; field grid spans the initial-condition box")
    lo, hi = np.array(cfg.ic_grid.lower), np.array(cfg.ic_grid.upper)
    return spectral.data_grid(np.vstack([lo, hi]), cfg.spectral.resolution, cfg.spectral.pad)


def run_spectrum(cfg: RunConfig, model_path, out_dir=None, block_diag: str | None = None) -> int:
    d = _read_json(model_path)
    sc = cfg.spectral
    if _is_stitched(d):
        model = stitching.load_stitched(model_path, cfg.system)
        label = "stitched"
        spec = stitching.stitched_decompose(model, sc.unit_tol)
        grid = _field_grid(cfg, model_path, model.locals)
        fields = [f for _, f in stitching.stitched_unit_fields(model, grid, sc.unit_tol,
                                                                 sc.localize)]
        shapes = {"N": model.L}
    else:
        model = edmd.model_from_dict(d)
        label = model.label or "model"
        spec = spectral.decompose(model, sc.unit_tol)
        if model.dictionary.dim == cfg.system.dim:
            grid = _field_grid(cfg, model_path, [model])
            fields = spectral.unit_cluster_fields(model, spec, grid, sc.localize)
        else:
            log.warning("model state dimension %d differs from system %r; no fields written",
                        model.dictionary.dim, cfg.system.name)
            fields = []
        shapes = {"N": model.N}
    out = _ensure_dir(out_dir or os.path.join(cfg.paths.out, f"spectrum_{label}"))
    mult = spectral.unit_multiplicity(spec, sc.rank_tol)
    spectral.write_eigenvalues_csv(out / "eigenvalues.csv", spec)
    for i, f in enumerate(fields):
        spectral.write_field_csv(out / f"field_{i}.csv", f)
    report = {"label": label, "unit_multiplicity": mult, "unit_tol": sc.unit_tol,
              "rank_tol": sc.rank_tol, "resolution": sc.resolution, "level": sc.level, **shapes,
              "fields": [{"file": f"field_{i}.csv", "peak": f.peak.tolist(),
                          "rayleigh_quotient": [f.eigenvalue.real, f.eigenvalue.imag]}
                         for i, f in enumerate(fields)]}
    if fields:
        part = spectral.extract_partition(fields, sc.level)
        spectral.write_partition_csv(out / "partition.csv", part)
        report["partition"] = {"v": part.v,
                               "representative_peaks": part.representative_peaks.tolist(),
                               "unassigned_fraction": float(np.mean(part.labels < 0))}
    if block_diag is not None:
        if _is_stitched(d):
            raise ValidationError("--block-diag applies to single models")
        bd = spectral.block_diagonalize(model, spec, block_diag, rank_tol=sc.rank_tol)
        report["block_diagonalization"] = {
            "groups": [list(map(int, g)) for g in bd.groups],
            "block_sizes": [int(b.shape[0]) for b in bd.blocks],
            "off_block_mass": bd.off_block_mass,
        }
    _write_json(out / "spectrum_report.json", report)
    print(f"unit multiplicity: {mult}")
    return mult


def run_discover(cfg: RunConfig, data_path, seed_subset: str = "left", out_dir=None) -> dict:
    """Discovery over the data file, starting from ``seed_subset``.

    ``seed_subset`` is ``left``/``right`` (the lowest-id trajectory of that
    basin), ``all``, or ``ids:1,2``; the rest of the data is streamed in an
    order shuffled by ``discovery.order_seed``.
    """
    trajs = _read_data(data_path, cfg.system)
    if seed_subset in ("left", "right"):
        initial = select_subset(trajs, cfg, seed_subset)[:1]
    else:
        initial = select_subset(trajs, cfg, seed_subset)
    seed_ids = {tr.id for tr in initial}
    rest = [tr for tr in trajs if tr.id not in seed_ids]
    order = np.random.default_rng(cfg.discovery.order_seed).permutation(len(rest))
    stream = [rest[i] for i in order]
    dc, dsc = cfg.dictionary, cfg.discovery
    state = run_discovery(
        stream, initial, dsc.n, dsc.safety, dsc.dictionary_policy,
        DictionarySettings(dc.kind, dc.N, dc.sigma, dc.seed, dc.constant),
        cfg.edmd.rel_tol, cfg.spectral.unit_tol, cfg.spectral.rank_tol, cfg.edmd.lag,
    )
    out = _ensure_dir(out_dir or os.path.join(cfg.paths.out, "discovery"))
    model = _with_data_path(state.model, _rel(data_path, out))
    edmd.save_model(model, out / "discovery_model.json")
    write_history_jsonl(out / "history.jsonl", state)
    mults = state.multiplicities
    increases = [r.traj_id for a, r in zip(state.history, state.history[1:])
                 if r.multiplicity > a.multiplicity]
    report = {
        "seed_subset": seed_subset,
        "seed_ids": sorted(seed_ids),
        "order_seed": dsc.order_seed,
        "dictionary_seed": dc.seed,
        "dictionary_policy": dsc.dictionary_policy,
        "n": dsc.n,
        "safety": dsc.safety,
        "refits": state.refits,
        "multiplicity_increases_at": increases,
        "final_multiplicity": mults[-1],
        "final_epsilon": state.epsilon,
        "monotonicity": "pass" if state.is_monotone() else "fail",
    }
    _write_json(out / "discovery_report.json", report)
    print(f"discovery: {state.refits} refits, final multiplicity {mults[-1]}, "
          f"monotonicity {report['monotonicity']}")
    return report


def run_stitch(cfg: RunConfig, model_paths, out_dir=None, method: str = "nearest_snapshot") -> Path:
    if not model_paths:
        raise ValidationError("stitch needs at least one local model")
    out = _ensure_dir(out_dir or cfg.paths.out)
    locals_ = []
    for p in model_paths:
        d = _read_json(p)
        if _is_stitched(d):
            raise ValidationError(f"{p} is already a stitched model")
        m = edmd.model_from_dict(d)
        src, ids = m.provenance.get("data"), m.provenance.get("traj_ids")
        if src is not None:
            abs_src = _resolve(src, os.path.dirname(os.path.abspath(p)))
            m = _with_data_path(m, _rel(abs_src, out))
            if ids is not None and os.path.exists(abs_src):
                by_id = {tr.id: tr for tr in dynamics.read_trajectories_csv(abs_src, cfg.system)}
                m = dataclasses.replace(m, training_states=np.vstack([by_id[i].states for i in ids]))
        locals_.append(m)
    model = stitching.stitch(locals_, method, cfg.discovery.n)
    path = out / "stitched.json"
    stitching.save_stitched(model, path)
    stitching.write_mask_csv(out / "mask.csv", model)
    _write_json(out / "stitch_report.json", {
        "labels": model.labels, "block_offsets": list(model.block_offsets), "L": model.L,
        "classifier": method, "nnz": int(model.K_S.nnz),
    })
    print(f"stitched {model.labels} -> {model.L}x{model.L} -> {path}")
    return path


def run_predict(cfg: RunConfig, model_path, x0, n: int, out_path=None) -> Path:
    if n < 0:
        raise ValidationError("n must be >= 0")
    x0 = np.asarray(x0, dtype=float)
    d = _read_json(model_path)
    out_path = Path(out_path or os.path.join(cfg.paths.out, "prediction.csv"))
    _ensure_dir(out_path.parent)
    if _is_stitched(d):
        model = stitching.load_stitched(model_path, cfg.system)
        Y, p = stitching.stitched_predict(model, x0, n)
        label = model.labels[p]
    else:
        model = edmd.model_from_dict(d)
        Y, label = edmd.predict(model, x0, n), None
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["step"] + (["label"] if label is not None else [])
        w.writerow(head + [f"psi{i + 1}" for i in range(Y.shape[1])])
        for k, row in enumerate(Y):
            lab = [label] if label is not None else []
            w.writerow([k] + lab + [repr(float(v)) for v in row])
    print(f"predicted {n} steps" + (f" in block {label!r}" if label else "") + f" -> {out_path}")
    return out_path


def run_pipeline(cfg: RunConfig, out_dir=None) -> dict:
    """All stages end to end: data, global and basin models, spectra,
    stitching and one discovery run."""
    out = _ensure_dir(out_dir or cfg.paths.out)
    data = run_simulate(cfg, out)
    models = {s: run_fit(cfg, data, s, out_path=out / f"model_{'global' if s == 'all' else s}.json")
              for s in ("all", "left", "right")}
    mults = {s: run_spectrum(cfg, p, out / f"spectrum_{p.stem[len('model_'):]}")
             for s, p in models.items()}
    stitched = run_stitch(cfg, [models["left"], models["right"]], out)
    mults["stitched"] = run_spectrum(cfg, stitched, out / "spectrum_stitched")
    disc = run_discover(cfg, data, "left", out / "discovery")
    summary = {"unit_multiplicity": mults, "discovery": disc}
    _write_json(out / "pipeline_report.json", summary)
    return summary


# ----------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, *groups: str) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--system", choices=sorted(dynamics.SYSTEMS))
    p.add_argument("--out", help="output directory (default: paths.out)")
    if "sim" in groups:
        p.add_argument("--dt", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--substeps", type=int)
    if "dict" in groups:
        p.add_argument("--N", type=int, help="number of RBF observables")
        p.add_argument("--sigma", type=float)
        p.add_argument("--dict-seed", type=int, help="seed for RBF center placement")
        p.add_argument("--dictionary-kind", choices=["gaussian_rbf", "coordinate"])
        p.add_argument("--constant", action="store_true", default=None,
                       help="append the constant observable")
        p.add_argument("--rel-tol", type=float, help="pseudo-inverse truncation")
        p.add_argument("--lag", type=int, help="samples advanced per Koopman step")
    if "spec" in groups:
        p.add_argument("--unit-tol", type=float)
        p.add_argument("--rank-tol", type=float)
        p.add_argument("--resolution", type=int)
        p.add_argument("--level", type=float, help="partition threshold in (0, 1)")
    if "disc" in groups:
        p.add_argument("--n", type=int, help="learning-error horizon")
        p.add_argument("--safety", type=float)
        p.add_argument("--dictionary-policy", choices=["keep", "reseed-from-all-data"])
        p.add_argument("--order-seed", type=int)
    if "data" in groups:
        p.add_argument("--data", help="trajectory CSV (default: paths.data or OUT/trajectories.csv)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopstitch", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate the initial-condition grid")
    _common(p, "sim")

    p = sub.add_parser("fit", help="fit a Koopman model on a trajectory subset")
    _common(p, "dict", "spec", "data")
    p.add_argument("--subset", default="all", help="all | left | right | ids:1,2,...")
    p.add_argument("--label")
    p.add_argument("--model-out", help="model JSON path (default: OUT/model_<label>.json)")
    p.add_argument("--centers-from", choices=["all", "subset"], default="all",
                   help="data used to place RBF centers")

    p = sub.add_parser("spectrum", help="eigenvalues, eigenfunction fields and partition")
    _common(p, "spec")
    p.add_argument("--model", required=True, help="model or stitched-model JSON")
    p.add_argument("--block-diag", choices=["support", "unit"],
                   help="also block-diagonalize the model")

    p = sub.add_parser("discover", help="incremental discovery of invariant sets")
    _common(p, "dict", "spec", "disc", "data")
    p.add_argument("--seed-subset", default="left",
                   help="left | right (one trajectory of that basin) | all | ids:1,2,...")

    p = sub.add_parser("stitch", help="assemble local models into a block-diagonal one")
    _common(p, "disc")
    p.add_argument("models", nargs="+", help="local model JSON files")
    p.add_argument("--method", choices=list(stitching.METHODS), default="nearest_snapshot")

    p = sub.add_parser("predict", help="lifted prediction from one initial state")
    _common(p)
    p.add_argument("--model", required=True, help="model or stitched-model JSON")
    p.add_argument("--x0", required=True, help="comma-separated initial state")
    p.add_argument("-n", "--steps-ahead", dest="horizon", type=int, default=10)
    p.add_argument("--csv", help="output CSV (default: OUT/prediction.csv)")

    p = sub.add_parser("pipeline", help="run every stage into one output directory")
    _common(p, "sim", "dict", "spec", "disc")
    return parser


def _dispatch(args) -> int:
    cfg = _config_from_args(args)
    cmd = args.command
    if cmd == "simulate":
        run_simulate(cfg, cfg.paths.out)
    elif cmd == "fit":
        run_fit(cfg, _default_data(cfg), args.subset, args.label, args.model_out,
                args.centers_from)
    elif cmd == "spectrum":
        run_spectrum(cfg, args.model, args.out, args.block_diag)
    elif cmd == "discover":
        run_discover(cfg, _default_data(cfg), args.seed_subset)
    elif cmd == "stitch":
        run_stitch(cfg, args.models, cfg.paths.out, args.method)
    elif cmd == "predict":
        run_predict(cfg, args.model, _parse_vector(args.x0), args.horizon, args.csv)
    elif cmd == "pipeline":
        run_pipeline(cfg, cfg.paths.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except KoopstitchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
