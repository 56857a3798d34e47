"""Command-line interface: preprocess, simulate, estimate, bench.

Exit codes: 0 success, 1 input error, 2 validation error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from .errors import ContactLocError
from .filter import FilterConfig, FilterState, extract_estimate, filter_step, load_filter_config
from .harness import (
    ChainAssets,
    build_assets,
    default_assets,
    load_scenario,
    run_benchmark,
    synthesize_measurements,
    format_benchmark_table,
    write_benchmark_csv,
    write_pair_matrix_csv,
)
from .kinematics import load_chain
from .mesh import (
    build_neighbor_table,
    load_neighbor_table,
    load_surface,
    save_neighbor_table,
)
from .sensing import (
    ObserverState,
    estimate_base_wrench,
    observer_step,
    read_frames_csv,
    write_frames_csv,
)


def _cmd_preprocess(args) -> int:
    surface = load_surface(args.mesh, args.link, mask_file=args.mask)
    table = build_neighbor_table(surface, args.k)
    save_neighbor_table(args.out, table)
    print(
        f"wrote {args.out}: {table.face_count} faces, K={table.k}, "
        f"area ratio {surface.areas.max() / surface.areas.min():.2f}"
    )
    return 0


def _load_assets(chain_path, tables_dir, edge, k_neighbors) -> ChainAssets:
    """Assets from explicit files, or the bundled arm when not given."""
    if chain_path is None and tables_dir is None:
        return default_assets(edge, k_neighbors)
    chain = load_chain(chain_path) if chain_path else default_assets(edge, k_neighbors).chain
    if tables_dir is None:
        bundled = default_assets(edge, k_neighbors)
        return ChainAssets(chain=chain, surfaces=bundled.surfaces, tables=bundled.tables)
    root = Path(tables_dir)
    surfaces = []
    tables = []
    for i in range(chain.n):
        mesh_path = root / f"link{i}.obj"
        mask_path = root / f"link{i}.mask"
        surfaces.append(
            load_surface(mesh_path, i, mask_file=mask_path if mask_path.exists() else None)
        )
        table_path = root / f"link{i}.mcpn"
        if table_path.exists():
            tables.append(load_neighbor_table(table_path))
        else:
            tables.append(build_neighbor_table(surfaces[-1], min(64, surfaces[-1].face_count)))
    if tables is not None and len(tables) == chain.n and all(t is not None for t in tables):
        return ChainAssets(chain=chain, surfaces=tuple(surfaces), tables=tuple(tables))
    return build_assets(chain, tuple(surfaces))


def _cmd_simulate(args) -> int:
    assets = _load_assets(args.chain, args.meshes, args.edge, args.k)
    scenario = load_scenario(args.scenario, assets)
    rng = np.random.default_rng(args.seed)
    dt = 1.0 / scenario.rate
    frames = [
        synthesize_measurements(scenario, i * dt, rng)
        for i in range(int(round(scenario.duration * scenario.rate)))
    ]
    write_frames_csv(args.out, frames)
    print(f"wrote {args.out}: {len(frames)} frames at {scenario.rate:g} Hz")
    return 0


def _cmd_estimate(args) -> int:
    assets = _load_assets(args.chain, args.tables, args.edge, args.k)
    chain = assets.chain
    config = load_filter_config(args.config) if args.config else FilterConfig()
    frames = read_frames_csv(args.frames)
    rng = np.random.default_rng(config.seed)
    observer = ObserverState.zeros(chain.n, args.observer_gain)
    state = FilterState(config=config)
    rows = []
    previous_t = None
    for frame in frames:
        dt = frame.t - previous_t if previous_t is not None else args.dt
        previous_t = frame.t
        observer = observer_step(observer, chain, frame, dt)
        wrench = estimate_base_wrench(chain, frame, observer.tau_ext_hat)
        w_hat = np.concatenate([observer.tau_ext_hat, wrench.as_array()])
        filter_step(state, chain, frame.q, w_hat, assets.surfaces, assets.tables, rng)
        if state.sets:
            estimate = extract_estimate(state, chain, frame.q, assets.surfaces, w_hat)
            for idx, particle in enumerate(estimate.particles):
                point = estimate.points[idx]
                force = estimate.forces[idx]
                rows.append(
                    [
                        state.iteration,
                        len(estimate.particles),
                        idx + 1,
                        particle.link_index + 1,
                        particle.face_index,
                        f"{point[0]:.6f}",
                        f"{point[1]:.6f}",
                        f"{point[2]:.6f}",
                        f"{force[0]:.4f}",
                        f"{force[1]:.4f}",
                        f"{force[2]:.4f}",
                        f"{estimate.residual_sq:.6e}",
                    ]
                )
    with io.open(args.out, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["iter", "k", "contact", "link", "face", "x", "y", "z", "Fx", "Fy", "Fz", "residual"]
        )
        writer.writerows(rows)
    print(f"wrote {args.out}: {len(rows)} estimate rows over {len(frames)} frames")
    return 0


def _cmd_bench(args) -> int:
    assets = _load_assets(args.chain, None, args.edge, args.k)
    config = load_filter_config(args.config) if args.config else FilterConfig()
    results = []
    for contacts in args.contacts:
        results.append(
            run_benchmark(
                assets,
                contacts,
                args.trials,
                args.seed,
                config=config,
                workers=args.workers,
            )
        )
    write_benchmark_csv(args.out, results, timing=args.timing)
    print(format_benchmark_table(results, timing=True))
    for result in results:
        if result.pair_matrix is not None:
            pair_path = Path(args.out).with_name(Path(args.out).stem + "_pairs.csv")
            write_pair_matrix_csv(pair_path, result)
            print(f"wrote {pair_path}")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contactloc",
        description="Multi-contact localization and force identification benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build a geodesic neighbor table from an OBJ mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--link", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("simulate", help="synthesize a sensor-frame CSV from a scenario file")
    p.add_argument("--chain", default=None)
    p.add_argument("--scenario", required=True)
    p.add_argument("--meshes", default=None, help="directory with link{i}.obj files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--edge", type=float, default=0.0078)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("estimate", help="run observer + filter over a frames CSV")
    p.add_argument("--chain", default=None)
    p.add_argument("--tables", default=None, help="directory with link{i}.obj/.mcpn files")
    p.add_argument("--frames", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--observer-gain", type=float, default=200.0)
    p.add_argument("--dt", type=float, default=1e-3, help="dt of the first frame")
    p.add_argument("--edge", type=float, default=0.0078)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("bench", help="randomized benchmark, CSV + console table")
    p.add_argument("--chain", default=None)
    p.add_argument("--contacts", type=int, nargs="+", choices=[1, 2, 3], required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="include run-time column in the CSV")
    p.add_argument("--edge", type=float, default=0.0078)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ContactLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
