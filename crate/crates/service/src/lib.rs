pub mod gateway;
pub mod setup;
