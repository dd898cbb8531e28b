pub mod bounded_geometry;
pub mod cli;
pub mod exterior_algebra;
pub mod expansion;
pub mod green_fields;
pub mod numeric;
pub mod projective_map;
pub mod sampling;
pub mod tangent_fields;
