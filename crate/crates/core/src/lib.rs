pub mod cli;
pub mod config;
pub mod dynamics;
pub mod ensemble;
pub mod output;
pub mod spinor;
pub mod transversality;
pub mod validate;
pub mod wavefunction;
