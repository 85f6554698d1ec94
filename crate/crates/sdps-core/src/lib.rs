#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod broker;
pub mod controller;
pub mod matching;
pub mod message;
pub mod model;
pub mod policy;
pub mod routing;
pub mod sim;
pub mod wire;
