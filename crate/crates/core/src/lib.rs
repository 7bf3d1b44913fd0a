//! Replay of second-price ad auctions from impression logs under daily budgets.
//!
//! The pipeline: parse or synthesize a campaign log ([`dataset`]), train a
//! factorization-machine click model ([`ctr`]), fit a base bidding strategy
//! ([`strategies`]), then replay the held-out days hour by hour ([`auction`])
//! with either a fixed bid scale or an LLM-driven bidder ([`agent`]) that
//! keeps episodic memory ([`memory`]). [`harness`] wires the grid of
//! campaigns, budget fractions, and bidders into runs and reports.

pub mod agent;
pub mod auction;
pub mod ctr;
pub mod dataset;
pub mod harness;
pub mod memory;
pub mod strategies;
