pub mod config;
pub mod experiments;
pub mod io;
pub mod report;
pub mod runner;
pub mod tasks;
