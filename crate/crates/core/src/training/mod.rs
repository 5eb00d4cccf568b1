pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod trainer;
