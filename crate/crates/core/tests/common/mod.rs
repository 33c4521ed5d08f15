#![allow(dead_code)]

pub mod dag_model;
pub mod lifecycle;
pub mod stride_ref;
