"""
MCP tool server exposing the emshape pipelines through FastMCP.

Each tool wraps one pipeline function and converts failures into the
standardized error dictionary, so a client always receives a JSON object.
"""

import logging
from typing import Any, Dict, Optional

from fastmcp import FastMCP

from . import cli
from .cache import get_factor_cache
from .run_config import get_settings
from .shared_utils import handle_run_error

logger = logging.getLogger(__name__)

settings = get_settings()

mcp = FastMCP(name=settings["project"]["name"])


@mcp.tool()
def get_server_info() -> Dict[str, Any]:
    """
    Get information about the emshape server.

    Returns:
        Project metadata, solver defaults and factorization cache statistics
    """
    return {
        "project": settings["project"],
        "solver": settings["solver"],
        "shapeopt": settings["shapeopt"],
        "cache_stats": get_factor_cache().get_stats(),
    }


@mcp.tool()
def mesh_info(mesh_path: str) -> Dict[str, Any]:
    """
    Summarize an `emsh 1` mesh file.

    Args:
        mesh_path: Path to the mesh file

    Returns:
        Node and triangle counts, region and boundary tags, interface size and quality
    """
    try:
        return cli.mesh_summary(mesh_path)
    except Exception as e:
        return handle_run_error("mesh-info", e)


@mcp.tool()
def run_solve(config_path: str, out: Optional[str] = None) -> Dict[str, Any]:
    """
    Solve the state trajectory of a run configuration.

    Args:
        config_path: TOML run configuration
        out: Optional output directory

    Returns:
        Averaged power, torque and cost with the output directory
    """
    try:
        return cli.run_solve(config_path, out)
    except Exception as e:
        return handle_run_error("solve", e)


@mcp.tool()
def run_adjoint_check(config_path: str, samples: Optional[int] = None, eps: Optional[float] = None,
                      gate: Optional[float] = None, out: Optional[str] = None) -> Dict[str, Any]:
    """
    Compare the adjoint shape gradient with central finite differences.

    Args:
        config_path: TOML run configuration
        samples: Number of free nodes to sample
        eps: Finite-difference step relative to the local edge length
        gate: Largest accepted relative error
        out: Optional output directory

    Returns:
        Worst relative error and direction counts, or an error of type "gate"
    """
    try:
        return cli.run_adjoint_check(config_path, samples, eps, gate, out)
    except Exception as e:
        return handle_run_error("adjoint-check", e)


@mcp.tool()
def run_optimize(config_path: str, out: Optional[str] = None) -> Dict[str, Any]:
    """
    Run the shape optimization loop.

    Args:
        config_path: TOML run configuration
        out: Optional output directory

    Returns:
        Initial and final cost breakdown with the termination reason
    """
    try:
        return cli.run_optimize(config_path, out)
    except Exception as e:
        return handle_run_error("optimize", e)


def main():
    """Main entry point for the server."""
    try:
        logger.info("Starting emshape MCP server...")
        mcp.run()

    except Exception as e:
        logger.error(f"Failed to start server: {e}")
        raise


if __name__ == "__main__":
    main()
