mod conv;
pub(crate) mod elementwise;
mod linalg;
mod loss;
mod norm;
mod shape;
