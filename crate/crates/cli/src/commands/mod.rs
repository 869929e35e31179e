pub mod evaluate;
pub mod generate;
pub mod plot;
pub mod preprocess;
pub mod synth;
pub mod train;
