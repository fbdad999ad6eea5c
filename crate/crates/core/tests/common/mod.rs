#![allow(dead_code)]

pub mod planner_oracle;
