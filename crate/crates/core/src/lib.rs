pub mod blocks;
pub mod model;
pub mod numerics;
pub mod preprocess;
pub mod prompts;
pub mod theory;
