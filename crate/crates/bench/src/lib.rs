//! Fixtures shared by the benchmarks.

use hetsim_core::config::{parse_config, ExperimentConfig};

/// Language tp=2 pp=2 on ranks [0, 4), images dp=4 on ranks [4, 8).
pub const SPLIT: &str = "\
[module.language]
tensor_model_parallel_size = 2
pipeline_model_parallel_size = 2
data_parallel_size = 1
rank_offset = 0

[module.images]
tensor_model_parallel_size = 1
pipeline_model_parallel_size = 1
data_parallel_size = 4
rank_offset = 4
";

/// Both modules on ranks [0, 8); images fan in 4 -> 2.
pub const SHARED: &str = "\
[module.language]
tensor_model_parallel_size = 4
pipeline_model_parallel_size = 1
data_parallel_size = 2
rank_offset = 0

[module.images]
tensor_model_parallel_size = 1
pipeline_model_parallel_size = 1
data_parallel_size = 8
rank_offset = 0
";

/// Two encoders, one pipelined, feeding a three-stage language pipeline.
pub const TWO_ENCODERS: &str = "\
[module.language]
tensor_model_parallel_size = 1
pipeline_model_parallel_size = 3
data_parallel_size = 1
rank_offset = 0

[module.e1]
tensor_model_parallel_size = 1
pipeline_model_parallel_size = 2
data_parallel_size = 1
rank_offset = 3

[module.e2]
tensor_model_parallel_size = 1
pipeline_model_parallel_size = 1
data_parallel_size = 1
rank_offset = 5

[model]
llm_layers = 3

[run]
num_microbatches = 4
";

pub fn config(text: &str) -> ExperimentConfig {
    parse_config(text).expect("fixture config is valid")
}
