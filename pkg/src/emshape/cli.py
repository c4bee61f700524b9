"""
Command-line surface and the run pipelines behind it.

Each `run_*` function performs one command and returns a result dictionary;
the `cmd_*` wrappers convert failures into standardized error dictionaries
and exit statuses. The tool server calls the same `run_*` functions.
"""

import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from . import __version__
from .adjoint import solve_adjoint
from .mesh import Mesh, interface_rings, load_mesh, quality, write_mesh
from .output import write_csv, write_manifest, write_vtk
from .quantities import eddy_density, step_table
from .run_config import RunConfig, build_mesh, output_directory
from .shapeopt import Evaluation, ShapeGradient, ShapeProblem, evaluate, fd_gradient_check, optimize
from .shared_utils import GradientCheckError, exit_status, handle_run_error

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _prepare(config_path: PathLike):
    config, digest = RunConfig.load(config_path)
    mesh = build_mesh(config)
    return config, digest, mesh, ShapeProblem.from_config(config, mesh)


def _run_directory(config: RunConfig, out: Optional[PathLike]) -> Path:
    directory = output_directory(config, out)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _dump_fields(directory: Path, evaluation: Evaluation, problem: ShapeProblem, prefix: str = "field") -> None:
    mesh, traj = evaluation.mesh, evaluation.traj
    for j, u in enumerate(traj.u):
        if j == 0:
            j_tilde = np.zeros(mesh.n_triangles)
        else:
            j_tilde = eddy_density(u, traj.u[j - 1], mesh, problem.materials, traj.tau,
                                   problem.flags.per_component_mean).J_tilde
        write_vtk(directory / f"{prefix}_{j:04d}.vtk", mesh, {"u": u},
                  {"region": mesh.tri_region, "J_tilde": j_tilde}, title=f"state step {j}")


def run_solve(config_path: PathLike, out: Optional[PathLike] = None) -> Dict[str, Any]:
    """Forward pipeline: trajectory, steps.csv, optional field dumps."""
    config, digest, mesh, problem = _prepare(config_path)
    evaluation = evaluate(mesh, problem)
    adj = None
    if config.output.dump_adjoint:
        adj = solve_adjoint(evaluation.traj, mesh, problem.materials, problem.cost, problem.flags,
                            problem.solver, problem.cache)

    directory = _run_directory(config, out)
    write_csv(step_table(evaluation.breakdown), directory / "steps.csv")
    if config.output.dump_fields:
        _dump_fields(directory, evaluation, problem)
    if adj is not None:
        for i, v in enumerate(adj.v):
            if v is not None:
                write_vtk(directory / f"adjoint_{i:04d}.vtk", mesh, {"v": v},
                          {"region": mesh.tri_region}, title=f"adjoint step {i}")
    write_manifest(directory, "solve", digest, {"nodes": mesh.n_nodes, "steps": evaluation.traj.n_steps})
    b = evaluation.breakdown
    return {
        "command": "solve",
        "output_dir": str(directory),
        "nodes": mesh.n_nodes,
        "steps": evaluation.traj.n_steps,
        "P": b.power,
        "T": b.torque,
        "J": b.J,
    }


def run_adjoint_check(config_path: PathLike, samples: Optional[int] = None, eps: Optional[float] = None,
                      gate: Optional[float] = None, out: Optional[PathLike] = None) -> Dict[str, Any]:
    """Finite-difference gate on the adjoint shape gradient; raises GradientCheckError on failure."""
    config, digest, mesh, problem = _prepare(config_path)
    report = fd_gradient_check(mesh, problem, samples, eps)
    gate = config.gradcheck.gate if gate is None else gate

    directory = _run_directory(config, out)
    write_csv(report.to_frame(), directory / "gradcheck.csv")
    write_manifest(directory, "adjoint-check", digest,
                   {"samples": report.requested, "worst_rel_err": f"{report.worst:.17g}", "gate": gate})
    if not report.worst < gate:
        raise GradientCheckError(f"worst relative error {report.worst:.3e} is not below gate {gate:.3e}")
    return {
        "command": "adjoint-check",
        "output_dir": str(directory),
        "directions": len(report.rows),
        "inconclusive": report.inconclusive,
        "worst_rel_err": report.worst,
        "gate": gate,
    }


def run_optimize(config_path: PathLike, out: Optional[PathLike] = None) -> Dict[str, Any]:
    """Shape optimization loop with history.csv and initial/final meshes."""
    config, digest, mesh, problem = _prepare(config_path)
    # iteration dumps are held until the run succeeds
    snapshots: List[Tuple[int, Mesh, np.ndarray, np.ndarray]] = []
    callback = None
    if config.output.dump_iterations:
        def callback(iteration: int, evaluation: Evaluation, grad: ShapeGradient) -> None:
            snapshots.append((iteration, evaluation.mesh, evaluation.traj.u[-1], grad.g.copy()))

    history = optimize(mesh, problem, callback)

    directory = _run_directory(config, out)
    for iteration, iter_mesh, u, g in snapshots:
        write_vtk(directory / f"iter_{iteration:04d}.vtk", iter_mesh,
                  {"u": u, "grad_x": g[:, 0], "grad_y": g[:, 1]},
                  {"region": iter_mesh.tri_region}, title=f"iteration {iteration}")
    write_csv(history.to_frame(), directory / "history.csv")
    write_mesh(mesh, directory / "mesh_initial.emsh")
    assert history.final_mesh is not None
    write_mesh(history.final_mesh, directory / "mesh_final.emsh")
    write_manifest(directory, "optimize", digest,
                   {"termination": history.termination, "rows": len(history.rows)})
    first, last = history.rows[0], history.rows[-1]
    return {
        "command": "optimize",
        "output_dir": str(directory),
        "termination": history.termination,
        "iterations": len(history.rows) - 1,
        "J_initial": first.J,
        "J_final": last.J,
        "P_initial": first.P,
        "P_final": last.P,
        "T_initial": first.T,
        "T_final": last.T,
        "min_quality": last.min_quality,
    }


def mesh_summary(mesh_path: PathLike) -> Dict[str, Any]:
    """Counts, tag summary, interface size and quality of an `emsh 1` file."""
    mesh = load_mesh(mesh_path)
    regions = {}
    for rid, role in sorted(mesh.region_table.items()):
        regions[f"{rid} {role.tokens()}"] = int(np.count_nonzero(mesh.tri_region == rid))
    boundaries = {}
    for tag, role in sorted(mesh.boundary_table.items()):
        boundaries[f"{tag} {role}"] = int(np.count_nonzero(mesh.edge_tag == tag))
    rings = interface_rings(mesh)
    report = quality(mesh)
    return {
        "command": "mesh-info",
        "nodes": mesh.n_nodes,
        "triangles": mesh.n_triangles,
        "symmetry": mesh.symmetry,
        "regions": regions,
        "boundaries": boundaries,
        "interface_vertices": rings.count if rings is not None else 0,
        "min_quality": report.min_quality,
        "min_element": report.min_element,
        "inverted_count": report.inverted_count,
    }


def _print_result(result: Dict[str, Any]) -> None:
    for key, value in result.items():
        if isinstance(value, dict):
            print(f"{key}:")
            for sub_key, sub_value in value.items():
                print(f"  {sub_key}: {sub_value}")
        elif isinstance(value, float):
            print(f"{key}: {value:.9g}")
        else:
            print(f"{key}: {value}")


def _execute(operation: str, func, *args, **kwargs) -> int:
    try:
        result = func(*args, **kwargs)
    except Exception as e:
        result = handle_run_error(operation, e)
        print(result["error"])
        return exit_status(result)
    _print_result(result)
    return exit_status(result)


def cmd_solve(config_path: PathLike, out: Optional[PathLike] = None) -> int:
    return _execute("solve", run_solve, config_path, out=out)


def cmd_adjoint_check(config_path: PathLike, samples: Optional[int] = None, eps: Optional[float] = None,
                      gate: Optional[float] = None, out: Optional[PathLike] = None) -> int:
    return _execute("adjoint-check", run_adjoint_check, config_path, samples, eps, gate, out=out)


def cmd_optimize(config_path: PathLike, out: Optional[PathLike] = None) -> int:
    return _execute("optimize", run_optimize, config_path, out=out)


def cmd_mesh_info(mesh_path: PathLike) -> int:
    return _execute("mesh-info", mesh_summary, mesh_path)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", "-v", action="store_true", help="Log at DEBUG level")
    common.add_argument("--out", default=None, help="Output directory (EMSHAPE_OUT takes priority)")

    parser = argparse.ArgumentParser(
        prog="emshape", description="Eddy-current loss shape optimization of IPM rotors")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="Solve the state trajectory and write steps.csv")
    p.add_argument("config", help="TOML run configuration")

    p = sub.add_parser("adjoint-check", parents=[common], help="Finite-difference check of the shape gradient")
    p.add_argument("config", help="TOML run configuration")
    p.add_argument("--samples", type=int, default=None, help="Number of free nodes to sample")
    p.add_argument("--eps", type=float, default=None, help="FD step as a fraction of the local edge length")
    p.add_argument("--gate", type=float, default=None, help="Largest accepted relative error")

    p = sub.add_parser("optimize", parents=[common], help="Run the shape optimization loop")
    p.add_argument("config", help="TOML run configuration")

    p = sub.add_parser("mesh-info", parents=[common], help="Summarize an emsh 1 mesh file")
    p.add_argument("mesh", help="Mesh file")

    sub.add_parser("serve", parents=[common], help="Run the MCP tool server on stdio")
    return parser


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "solve":
        return cmd_solve(args.config, args.out)
    if args.command == "adjoint-check":
        return cmd_adjoint_check(args.config, args.samples, args.eps, args.gate, args.out)
    if args.command == "optimize":
        return cmd_optimize(args.config, args.out)
    if args.command == "mesh-info":
        return cmd_mesh_info(args.mesh)
    if args.command == "serve":
        from .server import main as server_main

        server_main()
        return 0
    raise ValueError(f"unknown command {args.command!r}")
