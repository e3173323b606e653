"""Command-line front end: ``csnn run|sweep|stats [config]``.

Every artifact carries the config digest. Failures print one line to
stderr, ``csnn-error {json}``, and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import SimReport, ScalingTable, speedup_efficiency, to_csv
from .config import PRESETS, ConfigError, RunConfig, load_config
from .connectome import (
    connectome_stats,
    generate_synapses,
    write_connectome,
)
from .distrib import run_distributed
from .model import (
    ColumnGrid,
    InvariantError,
    cutoff_radius,
    expected_out_degree,
    expected_synapse_count,
    reach_offsets,
    stencil_halfwidth,
)

RASTER_PAIR = np.dtype([("step", "<u8"), ("neuron", "<u8")])


class InvariantTripped(RuntimeError):
    """A run finished but violated a cross-run invariant."""


def _workers(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or N,N,...: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty worker list")
    return vals


def _seed(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csnn", description="Distributed cortical spiking network simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", nargs="?", help="config file (key = value with [sections])")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in base configuration")
    common.add_argument("--workers", type=_workers, help="worker count N or list N,N,...")
    common.add_argument("--seed", type=_seed, help="unsigned 64-bit seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dump-raster", action="store_true", help="write the spike raster")
    common.add_argument("--dump-connectome", action="store_true",
                        help="write the binary connectome")
    common.add_argument("--transport", choices=("inproc", "tcp"))
    sub.add_parser("run", parents=[common], help="one distributed run").set_defaults(func=cmd_run)
    sub.add_parser("sweep", parents=[common],
                   help="strong-scaling sweep over the worker list").set_defaults(func=cmd_sweep)
    sub.add_parser("stats", parents=[common],
                   help="connectome statistics, no dynamics").set_defaults(func=cmd_stats)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    changes = {}
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.transport is not None:
        changes["transport"] = args.transport
    if args.dump_raster:
        changes["dump_raster"] = True
    if args.dump_connectome:
        changes["dump_connectome"] = True
    if not changes:
        return cfg
    try:
        return cfg.with_overrides(**changes)
    except InvariantError as exc:
        raise ConfigError("semantic", str(exc), source="command line") from None


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    return out


def write_raster(path: Path, steps: np.ndarray, ids: np.ndarray, digest: str,
                 fmt: str = "text") -> Path:
    """Text: a digest comment, then ``timestep,neuron_id`` lines.

    Binary: bare (u64 step, u64 id) little-endian pairs; the digest lives in
    the accompanying report.
    """
    if fmt == "binary":
        rec = np.empty(steps.size, dtype=RASTER_PAIR)
        rec["step"], rec["neuron"] = steps, ids
        path.write_bytes(rec.tobytes())
    else:
        body = "".join(f"{s},{i}\n" for s, i in zip(steps.tolist(), ids.tolist()))
        path.write_text(f"# config_digest={digest}\n{body}")
    return path


def read_raster(path: Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if path.suffix == ".bin":
        rec = np.frombuffer(path.read_bytes(), dtype=RASTER_PAIR)
        return rec["step"].astype(np.int64), rec["neuron"].astype(np.int64)
    rows = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
    if not rows:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    arr = np.array([ln.split(",") for ln in rows], dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def _dump_connectome(cfg: RunConfig, out: Path) -> Path:
    grid = ColumnGrid(cfg.grid)
    syn = generate_synapses(grid, cfg.kernel, cfg.neuron, cfg.seed, delays=cfg.delays,
                            dt=cfg.dt, max_synapses=cfg.max_synapses)
    path = out / "connectome.bin"
    write_connectome(path, syn, cfg.grid, cfg.digest)
    return path


def _run_artifacts(cfg: RunConfig, report: SimReport, out: Path, stem: str = "") -> dict:
    files = {}
    if cfg.dump_raster:
        ext = "bin" if cfg.raster_format == "binary" else "txt"
        path = write_raster(out / f"raster{stem}.{ext}", report.spike_steps, report.spike_ids,
                            cfg.digest, cfg.raster_format)
        files["raster"] = {"path": path.name, "format": cfg.raster_format,
                           "config_digest": cfg.digest}
    return files


def cmd_run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if len(cfg.workers) != 1:
        raise ConfigError("semantic", "run takes one worker count; use sweep for a list",
                          source="command line")
    out = _out_dir(cfg)
    report = run_distributed(cfg)
    files = _run_artifacts(cfg, report, out)
    if cfg.dump_connectome:
        files["connectome"] = {"path": _dump_connectome(cfg, out).name,
                               "config_digest": cfg.digest}
    doc = {"config_digest": cfg.digest, "config": cfg.model_dict(), "files": files,
           "report": report.to_dict()}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    (out / "report.csv").write_text(to_csv([report]))
    print(f"{cfg.grid.label} {cfg.kernel.name} P={report.workers}: rate "
          f"{_num(report.rate_hz)} Hz, {_num(report.wall_per_sim_second)} s wall per "
          f"simulated s, digest {cfg.digest}")
    return 0


def _num(x) -> str:
    return "n/a" if x is None else f"{x:.4g}"


def sweep(cfg: RunConfig) -> tuple[list[SimReport], ScalingTable]:
    """Run every worker count in ``cfg.workers``; rasters must agree bit-for-bit."""
    reports = [run_distributed(cfg, workers=p) for p in sorted(cfg.workers)]
    ref = reports[0]
    for r in reports[1:]:
        if not (np.array_equal(r.spike_steps, ref.spike_steps)
                and np.array_equal(r.spike_ids, ref.spike_ids)):
            raise InvariantTripped(
                f"raster at P={r.workers} differs from P={ref.workers}")
    times = [(r.workers, r.wall_per_sim_second) for r in reports]
    if any(t is None or t <= 0 for _, t in times):
        raise ConfigError("semantic", "sweep needs duration > warmup to time anything",
                          source="command line")
    return reports, speedup_efficiency(times)


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    reports, table = sweep(cfg)
    files = _run_artifacts(cfg, reports[0], out)
    doc = {
        "config_digest": cfg.digest,
        "config": cfg.model_dict(),
        "files": files,
        "scaling": [{"workers": r.workers, "time": r.time, "speedup": r.speedup,
                     "efficiency": r.efficiency} for r in table.rows],
        "reports": [r.to_dict() for r in reports],
    }
    (out / "sweep.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    (out / "scaling.csv").write_text(to_csv(reports, table))
    for row in table.rows:
        print(f"P={row.workers}: {row.time:.4g} s/sim-s, speedup {row.speedup:.3f}, "
              f"efficiency {row.efficiency:.3f}")
    return 0


def problem_stats(cfg: RunConfig) -> dict:
    """Analytic problem size; the connectome is sampled only under the budget."""
    spec, kernel = cfg.grid, cfg.kernel
    h = stencil_halfwidth(kernel, spec.alpha)
    dx, _, _, _ = reach_offsets(kernel, spec.alpha)
    loc_deg, rem_deg = expected_out_degree(kernel, spec)
    loc_syn, rem_syn = expected_synapse_count(kernel, spec)
    doc = {
        "config_digest": cfg.digest,
        "grid": spec.label,
        "kernel": kernel.name,
        "columns": spec.n_columns,
        "neurons": spec.n_neurons,
        "excitatory_neurons": spec.n_excitatory * spec.n_columns,
        "stencil_halfwidth": h,
        "stencil": f"{2 * h + 1}x{2 * h + 1}",
        "cutoff_radius_um": cutoff_radius(kernel) if kernel.cutoff < kernel.amplitude else 0.0,
        "reachable_remote_columns": int(dx.size),
        "expected_out_degree_interior": {"local": loc_deg, "remote": rem_deg,
                                         "total": loc_deg + rem_deg},
        "expected_synapses": {"local": loc_syn, "remote": rem_syn,
                              "recurrent": loc_syn + rem_syn,
                              "external": spec.n_neurons * cfg.drive.synapses_per_neuron},
        "expected_local_fraction": loc_syn / (loc_syn + rem_syn),
        "sampled": None,
    }
    est = loc_syn + rem_syn
    if cfg.max_synapses and est > cfg.max_synapses:
        doc["sampled_skipped"] = (f"expected {est:.3g} synapses exceed max_synapses "
                                  f"{cfg.max_synapses}")
    return doc


def cmd_stats(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    doc = problem_stats(cfg)
    grid = ColumnGrid(cfg.grid)
    if "sampled_skipped" not in doc:
        syn = generate_synapses(grid, cfg.kernel, cfg.neuron, cfg.seed, delays=cfg.delays,
                                dt=cfg.dt, max_synapses=cfg.max_synapses)
        doc["sampled"] = connectome_stats(syn, grid, cfg.kernel).to_dict()
        if cfg.dump_connectome:
            write_connectome(out / "connectome.bin", syn, cfg.grid, cfg.digest)
            doc["files"] = {"connectome": {"path": "connectome.bin",
                                           "config_digest": cfg.digest}}
    elif cfg.dump_connectome:
        raise ConfigError("semantic", doc["sampled_skipped"], source="command line")
    (out / "stats.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"{doc['grid']} {doc['kernel']}: {doc['columns']} columns, {doc['neurons']} "
          f"neurons, stencil {doc['stencil']}, ~{doc['expected_synapses']['recurrent']:.4g} "
          f"recurrent synapses")
    return 0


def _error_line(exc: BaseException) -> str:
    info = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("kind", "line", "column", "source", "field", "worker"):
        val = getattr(exc, attr, None)
        if val is not None:
            info[attr] = val
    return "csnn-error " + json.dumps(info, sort_keys=True)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print(_error_line(RuntimeError("interrupted")), file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        print(_error_line(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
