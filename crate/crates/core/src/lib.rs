pub mod analysis;
pub mod fixtures;
pub mod game;
pub mod protocol;
pub mod provider;
pub mod script;
pub mod store;
