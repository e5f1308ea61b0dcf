"""Field serialization (columnar binary container, CSV) and mesh export."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import CLAMPED, PERIODIC, GridChart, ImmersionField, MetricField, ScalarField

_MAGIC = b"CIF1"
_KINDS = {ScalarField: 0, MetricField: 1, ImmersionField: 2}
_HEADER = struct.Struct("<4sBBBBIIIdd")  # magic, kind, boundary, stencil, pad, ncomp, nx, ny, lx, ly


def write_field(f, path) -> None:
    """Columnar binary container: header, then row-major float64 body."""
    kind = _KINDS[type(f)]
    nx, ny = f.chart.resolution
    vals = f.values if f.values.ndim == 3 else f.values[..., None]
    ncomp = vals.shape[-1]
    stencil = getattr(f, "stencil_order", 0)
    linear = getattr(f, "linear", None)
    header = _HEADER.pack(_MAGIC, kind, 1 if f.chart.periodic else 0, stencil,
                          1 if linear is not None else 0,
                          ncomp, nx, ny, *f.chart.extent)
    with open(path, "wb") as fh:
        fh.write(header)
        if linear is not None:
            fh.write(np.ascontiguousarray(linear, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(vals, dtype="<f8").tobytes())


def read_field(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, kind, boundary, stencil, has_linear, ncomp, nx, ny, lx, ly = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a field container")
        linear = None
        if has_linear:
            linear = np.frombuffer(fh.read(48), dtype="<f8").reshape(3, 2)
        body = np.frombuffer(fh.read(), dtype="<f8")
    chart = GridChart((lx, ly), (nx, ny), PERIODIC if boundary else CLAMPED)
    vals = body.reshape(nx, ny, ncomp)
    if kind == 0:
        return ScalarField(chart, vals[..., 0])
    if kind == 1:
        return MetricField(chart, vals)
    return ImmersionField(chart, vals, stencil or 4, linear)


def write_csv(f, path) -> None:
    """x, y, components as plain CSV for inspection."""
    x, y = f.chart.mesh()
    vals = f.values if f.values.ndim == 3 else f.values[..., None]
    ncomp = vals.shape[-1]
    cols = [x.ravel(), y.ravel()] + [vals[..., c].ravel() for c in range(ncomp)]
    header = "x,y," + ",".join(f"c{c}" for c in range(ncomp))
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="")


# ---------------------------------------------------------------------------
# Wavefront-style mesh export

def _fmt(v: float) -> str:
    return f"{v:.9g}"


def export_mesh(u: ImmersionField, path) -> None:
    """Text mesh: one vertex per node, grid quads split into triangles.

    Periodic charts duplicate the seam: the wrapped row/column is emitted
    again at its true position (which coincides with the first row/column
    for maps without a linear part), so faces close the torus; a welding
    pass on import recovers the watertight connectivity.
    """
    nx, ny = u.chart.resolution
    vals = u.positions()
    if u.chart.periodic:
        extra_x = vals[:1] if u.linear is None else vals[:1] + u.linear[:, 0] * u.chart.extent[0]
        vals = np.concatenate([vals, extra_x], axis=0)
        extra_y = vals[:, :1] if u.linear is None else vals[:, :1] + u.linear[:, 1] * u.chart.extent[1]
        vals = np.concatenate([vals, extra_y], axis=1)
    mx, my = vals.shape[:2]
    lines = []
    for i in range(mx):
        for j in range(my):
            p = vals[i, j]
            lines.append(f"v {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}")

    def vid(i, j):
        return i * my + j + 1

    for i in range(mx - 1):
        for j in range(my - 1):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            lines.append(f"f {a} {b} {c}")
            lines.append(f"f {a} {c} {d}")
    Path(path).write_text("\n".join(lines) + "\n")


def import_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back vertices (n, 3) and triangle indices (m, 3), zero-based."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.asarray(verts), np.asarray(faces, dtype=int)


def weld_vertices(verts: np.ndarray, faces: np.ndarray, tol: float = 1e-9):
    """Merge vertices with coincident positions; returns remapped faces."""
    order = np.lexsort(verts.T)
    remap = np.empty(len(verts), dtype=int)
    rep = order[0]
    remap[rep] = rep
    for prev, cur in zip(order[:-1], order[1:]):
        if np.all(np.abs(verts[cur] - verts[rep]) <= tol):
            remap[cur] = rep
        else:
            rep = cur
            remap[cur] = rep
    return remap[faces]


def edge_face_counts(faces: np.ndarray) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for tri in faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# additional container kinds: raw component stacks and corrugation tables

def write_components(chart, values: np.ndarray, path) -> None:
    """Raw (nx, ny, k) float components on a chart (container kind 3)."""
    nx, ny = chart.resolution
    vals = values if values.ndim == 3 else values[..., None]
    header = _HEADER.pack(_MAGIC, 3, 1 if chart.periodic else 0, 0, 0,
                          vals.shape[-1], nx, ny, *chart.extent)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(vals, dtype="<f8").tobytes())


def read_components(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, kind, boundary, _, _, ncomp, nx, ny, lx, ly = _HEADER.unpack(head)
        if magic != _MAGIC or kind != 3:
            raise ValueError(f"{path}: not a component container")
        body = np.frombuffer(fh.read(), dtype="<f8")
    chart = GridChart((lx, ly), (nx, ny), PERIODIC if boundary else CLAMPED)
    return chart, body.reshape(nx, ny, ncomp)


def write_conformal(fac, directory) -> None:
    """Serialize a conformal factorization into a directory of containers."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_field(fac.theta, d / "theta.cif")
    write_field(fac.residual, d / "residual.cif")
    chart = fac.theta.chart
    write_components(chart, np.stack([fac.mu.real, fac.mu.imag], axis=-1),
                     d / "mu.cif")
    for name, phase in (("phi1", fac.phi1), ("phi2", fac.phi2)):
        write_components(chart, phase.periodic_values[..., None], d / f"{name}.cif")
        (d / f"{name}.linear").write_text(f"{phase.linear[0]!r} {phase.linear[1]!r}\n")


_TABLE_NAMES = ("g1", "g2", "dt_g1", "dt_g2", "ds_g1", "ds_g2", "dtt_g1", "dtt_g2")


def write_corrugation_table(table, path) -> None:
    """Corrugation tables in the columnar container layout (kind 4).

    Header resolution covers the (s, t) grid including the guard row; the
    body carries the eight sampled tables, the amplitude profile and the
    metadata scalars, all row-major float64 columns.
    """
    s_rows = len(table.s_vals)
    t_cols = table.t_samples
    meta = np.array([table.metadata.get(k, np.nan) for k in
                     ("period_defect", "identity_residual", "C_dt_g1",
                      "C_dt_g2", "C_dsdt_g1")])
    header = _HEADER.pack(_MAGIC, 4, 1, 0, 0, len(_TABLE_NAMES), s_rows, t_cols,
                          table.s_max, 2.0 * np.pi)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(table.amplitude_profile, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(meta, dtype="<f8").tobytes())
        for name in _TABLE_NAMES:
            fh.write(np.ascontiguousarray(table.tables[name], dtype="<f8").tobytes())


def read_corrugation_table(path):
    from .corrugation import CorrugationTable

    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, kind, _, _, _, ntab, s_rows, t_cols, s_max, _ = _HEADER.unpack(head)
        if magic != _MAGIC or kind != 4:
            raise ValueError(f"{path}: not a corrugation container")
        alpha = np.frombuffer(fh.read(8 * s_rows), dtype="<f8").copy()
        meta_vals = np.frombuffer(fh.read(8 * 5), dtype="<f8")
        tables = {}
        for name in _TABLE_NAMES[:ntab]:
            raw = np.frombuffer(fh.read(8 * s_rows * t_cols), dtype="<f8")
            tables[name] = raw.reshape(s_rows, t_cols).copy()
    hs = s_max / (s_rows - 2)
    s_vals = np.arange(s_rows) * hs
    t_vals = np.linspace(0.0, 2.0 * np.pi, t_cols, endpoint=False)
    metadata = dict(zip(("period_defect", "identity_residual", "C_dt_g1",
                         "C_dt_g2", "C_dsdt_g1"), meta_vals.tolist()))
    return CorrugationTable(s_max, s_vals, t_vals, tables, alpha, metadata)
