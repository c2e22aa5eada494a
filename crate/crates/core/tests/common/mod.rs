#![allow(dead_code)]

pub mod graphs;
pub mod mc;
pub mod st;
pub mod toy;
