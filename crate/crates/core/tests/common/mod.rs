#![allow(dead_code)]

pub mod ks;
pub mod quadrature;
pub mod session_model;
pub mod synthetic;
