//! ASCII legacy VTK export of tetrahedral meshes with optional nodal and
//! per-element data, for inspection in ParaView or VisIt.

use std::io::Write;

use crate::mesh::Mesh;

/// Writes the mesh as an unstructured grid. `point_data` carries named
/// nodal scalar fields (one value per vertex), `cell_data` named
/// per-element fields; the layer label is always exported.
pub fn write_vtk<W: Write>(
    mesh: &Mesh,
    point_data: &[(&str, &[f64])],
    cell_data: &[(&str, &[f64])],
    mut out: W,
) -> std::io::Result<()> {
    for (name, values) in point_data {
        assert_eq!(values.len(), mesh.vertex_count(), "field `{name}` length");
    }
    for (name, values) in cell_data {
        assert_eq!(values.len(), mesh.element_count(), "field `{name}` length");
    }

    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "layered domain, h = {}", mesh.h)?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;

    writeln!(out, "POINTS {} double", mesh.vertex_count())?;
    for p in &mesh.vertices {
        writeln!(out, "{:.17e} {:.17e} {:.17e}", p[0], p[1], p[2])?;
    }

    let m = mesh.element_count();
    writeln!(out, "CELLS {} {}", m, 5 * m)?;
    for t in &mesh.tets {
        writeln!(out, "4 {} {} {} {}", t[0], t[1], t[2], t[3])?;
    }
    writeln!(out, "CELL_TYPES {m}")?;
    for _ in 0..m {
        writeln!(out, "10")?; // VTK_TETRA
    }

    if !point_data.is_empty() {
        writeln!(out, "POINT_DATA {}", mesh.vertex_count())?;
        for (name, values) in point_data {
            writeln!(out, "SCALARS {name} double 1")?;
            writeln!(out, "LOOKUP_TABLE default")?;
            for v in *values {
                writeln!(out, "{v:.17e}")?;
            }
        }
    }

    writeln!(out, "CELL_DATA {m}")?;
    writeln!(out, "SCALARS layer int 1")?;
    writeln!(out, "LOOKUP_TABLE default")?;
    for &l in &mesh.labels {
        writeln!(out, "{}", l + 1)?;
    }
    for (name, values) in cell_data {
        writeln!(out, "SCALARS {name} double 1")?;
        writeln!(out, "LOOKUP_TABLE default")?;
        for v in *values {
            writeln!(out, "{v:.17e}")?;
        }
    }
    Ok(())
}
