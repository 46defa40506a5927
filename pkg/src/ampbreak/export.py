"""CSV and manifest output.

Floats are written with ``repr`` so that files are byte-identical across
runs with the same inputs.  Spatial fields are flattened time-major, then in
axis order (C order over the grid).
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evolve import Trajectory
from .lattice import ModalSet, PotentialField, TorusGrid

__all__ = [
    "fmt",
    "write_csv",
    "sha256_file",
    "write_manifest",
    "read_manifest",
    "export_field_csv",
    "export_trajectory_csv",
    "export_probe_series_csv",
    "export_modal_set_csv",
    "export_potential_csv",
]


def fmt(v) -> str:
    """Deterministic text for a CSV cell."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (complex, np.complexfloating)):
        return repr(complex(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=fmt) + "\n")
    return path


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def _point_labels(grid: TorusGrid) -> list[str]:
    return [f"x{i}" for i in range(grid.size)]


def export_field_csv(path, grid: TorusGrid, times, values) -> Path:
    """One row per time: ``time, re_0, im_0, re_1, im_1, ...`` (real fields: one column each)."""
    values = np.asarray(values)
    flat = values.reshape(values.shape[0], -1)
    labels = _point_labels(grid)
    if np.iscomplexobj(flat):
        header = ["time"] + [f"{p}_{c}" for p in labels for c in ("re", "im")]
        rows = ([t] + [v for z in row for v in (z.real, z.imag)] for t, row in zip(times, flat))
    else:
        header = ["time"] + labels
        rows = ([t] + list(row) for t, row in zip(times, flat))
    return write_csv(path, header, rows)


def export_trajectory_csv(path, grid: TorusGrid, traj: Trajectory, batch_index=()) -> Path:
    """Snapshots with the stored (rescaled) values and their log offset."""
    labels = _point_labels(grid)
    header = ["time"] + [f"{p}_{c}" for p in labels for c in ("re", "im")] + ["log_offset"]

    def rows():
        for t, v, off in zip(traj.times, traj.values, traj.log_offsets):
            z = np.asarray(v)[batch_index].ravel()
            o = np.asarray(off)[batch_index]
            yield [t] + [x for c in z for x in (c.real, c.imag)] + [float(o)]
    return write_csv(path, header, rows())


def export_probe_series_csv(path, grid: TorusGrid, traj: Trajectory, probe, batch_index=()) -> Path:
    """``time, log_abs, re, im`` of the physical field at the grid point nearest ``probe``."""
    idx = grid.nearest_index(probe)

    def rows():
        for t, v, off in zip(traj.times, traj.values, traj.log_offsets):
            z = complex(np.asarray(v)[batch_index][idx])
            o = float(np.asarray(off)[batch_index])
            la = np.log(abs(z)) + o if z != 0 else -np.inf
            phys = z * np.exp(o) if o < 700 else complex("nan")
            yield [t, la, phys.real, phys.imag]
    return write_csv(path, ["time", "log_abs", "re", "im"], rows())


def export_modal_set_csv(path, modal_set: ModalSet, mode: int = 0) -> Path:
    return export_field_csv(path, modal_set.grid, modal_set.time_grid.nodes, modal_set.nodes[:, mode])


def export_potential_csv(path, potential: PotentialField) -> Path:
    return export_field_csv(path, potential.grid, potential.time_grid.nodes, potential.nodes)
