#![allow(dead_code)]

pub mod checks;
pub mod grad;
pub mod quant;
pub mod regress;
pub mod roundtrip;
pub mod training;
