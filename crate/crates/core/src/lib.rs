pub mod linalg;
pub mod compression;
pub mod model;
pub mod search;
pub mod trajectory;
