"""
File emission: CSV tables, VTK legacy field dumps and the run manifest.
"""

import logging
import platform
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np
import pandas as pd
import pydantic
import scipy

from . import __version__
from .mesh import Mesh
from .run_config import get_settings

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

VTK_TRIANGLE = 5


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    """CSV with 17 significant digits, so reruns diff byte for byte."""
    path = Path(path)
    frame.to_csv(path, index=False, float_format=get_settings()["output"]["float_format"],
                 lineterminator="\n")
    logger.info(f"Wrote {path} ({len(frame)} rows)")
    return path


def write_vtk(path: PathLike, mesh: Mesh, point_data: Optional[Mapping[str, np.ndarray]] = None,
              cell_data: Optional[Mapping[str, np.ndarray]] = None, title: str = "emshape field") -> Path:
    """Legacy ASCII VTK unstructured grid of triangles with scalar point and cell data."""
    path = Path(path)
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_nodes} double",
    ]
    lines.extend(f"{x:.17g} {y:.17g} 0" for x, y in mesh.nodes)
    lines.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    lines.extend(f"3 {i} {j} {k}" for i, j, k in mesh.triangles)
    lines.append(f"CELL_TYPES {mesh.n_triangles}")
    lines.extend([str(VTK_TRIANGLE)] * mesh.n_triangles)

    def scalars(block: str, count: int, data: Mapping[str, np.ndarray]) -> None:
        if not data:
            return
        lines.append(f"{block} {count}")
        for name, values in data.items():
            values = np.asarray(values).reshape(-1)
            if values.size != count:
                raise ValueError(f"{block} '{name}' has {values.size} values, expected {count}")
            kind = "int" if np.issubdtype(values.dtype, np.integer) else "double"
            lines.append(f"SCALARS {name} {kind} 1")
            lines.append("LOOKUP_TABLE default")
            fmt = "{:d}" if kind == "int" else "{:.17g}"
            lines.extend(fmt.format(v) for v in values.tolist())

    scalars("POINT_DATA", mesh.n_nodes, point_data or {})
    scalars("CELL_DATA", mesh.n_triangles, cell_data or {})
    path.write_text("\n".join(lines) + "\n")
    logger.debug(f"Wrote {path}")
    return path


def dependency_versions() -> Dict[str, str]:
    return {
        "emshape": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
    }


def write_manifest(directory: PathLike, command: str, config_hash: Optional[str],
                   extra: Optional[Mapping[str, object]] = None) -> Path:
    """manifest.txt: command, config hash and package versions, one `key: value` per line."""
    path = Path(directory) / "manifest.txt"
    entries: Dict[str, object] = {"command": command, "config_sha256": config_hash or "-"}
    entries.update(dependency_versions())
    entries.update(extra or {})
    path.write_text("".join(f"{key}: {value}\n" for key, value in entries.items()))
    logger.info(f"Wrote {path}")
    return path
