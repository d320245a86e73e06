pub mod approx_density;
pub mod estimate;
pub mod optimize;
pub mod oracle;
pub mod verify;
