//! Isosurface extraction, mesh I/O and surface distance metrics.

mod distance;
mod mc;
mod mesh;
mod tables;

pub use distance::{
    chamfer, point_to_surface, point_triangle_distance, MeshBvh, SurfaceMetrics,
    DEFAULT_METRIC_SAMPLES,
};
pub use mc::{
    evaluate_field, marching_cubes, mesh_scene, Lattice, OccupancyField, OracleField, ReconGrid,
    EDGE_MARGIN,
};
pub use mesh::{TriangleMesh, DEGENERATE_AREA};
