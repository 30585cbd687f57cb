//! Retailer-side coordination of plug-in vehicle charging across day-ahead
//! and real-time electricity markets.

pub mod cli;
pub mod coordinator;
pub mod fleet;
pub mod ledger;
pub mod prices;
pub mod scenario;
pub mod solver;
pub mod synth;
