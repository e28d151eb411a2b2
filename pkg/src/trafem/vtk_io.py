"""Legacy-format VTK export of meshes, cell fields, and nodal functions."""

from .mesh import CellField


def write_vtk(path, mesh, cell_data=None, point_data=None, title="trafem"):
    """Write an ASCII unstructured-grid file (triangle type 5).

    ``cell_data`` maps names to CellFields or per-cell arrays;
    ``point_data`` maps names to FeFunctions or per-vertex arrays (P2
    functions are exported through their vertex values).
    """
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 2.0\n")
        fh.write(f"{title}\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.num_vertices} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.16g} {y:.16g} 0\n")
        nc = mesh.num_cells
        fh.write(f"CELLS {nc} {4 * nc}\n")
        for a, b, c in mesh.cells:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {nc}\n")
        for _ in range(nc):
            fh.write("5\n")
        if cell_data:
            fh.write(f"CELL_DATA {nc}\n")
            for name, data in cell_data.items():
                values = data.values if isinstance(data, CellField) else data
                if len(values) != nc:
                    raise ValueError(f"cell data {name!r} has wrong length")
                fh.write(f"SCALARS {name} double 1\n")
                fh.write("LOOKUP_TABLE default\n")
                for v in values:
                    fh.write(f"{v:.16g}\n")
        if point_data:
            fh.write(f"POINT_DATA {mesh.num_vertices}\n")
            for name, data in point_data.items():
                values = data.vertex_values() if hasattr(data, "vertex_values") else data
                if len(values) != mesh.num_vertices:
                    raise ValueError(f"point data {name!r} has wrong length")
                fh.write(f"SCALARS {name} double 1\n")
                fh.write("LOOKUP_TABLE default\n")
                for v in values:
                    fh.write(f"{v:.16g}\n")
