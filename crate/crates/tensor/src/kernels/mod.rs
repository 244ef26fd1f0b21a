pub mod conv;
pub mod layout;
pub mod norm;
