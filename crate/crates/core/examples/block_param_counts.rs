//! Compares trainable parameter counts of the light-weighted connection block,
//! the deep connection block and a classical densely connected block.
//!
//! ```text
//! cargo run --example block_param_counts -- [channels]
//! ```

use dualpath_se::nn::{dcb_param_count, lwcb_param_count, ConvNormAct, DeepConnBlock};
use dualpath_se::params::{ParamBuilder, ParamStore};
use dualpath_se::ModelConfig;

fn main() -> dualpath_se::Result<()> {
    let c: usize = std::env::args().nth(1).map_or(128, |s| s.parse().expect("channels"));
    let kernel = ModelConfig::paper().dcb_kernel;
    println!("channels {c}, kernel {kernel:?}");
    println!("{:>2} {:>10} {:>10} {:>10} {:>10}", "S", "lwcb", "dcb", "dense", "dense-lwcb");
    for s in 1..=6 {
        let dense: usize = (1..=s).map(|i| ConvNormAct::param_count(i * c, c, kernel)).sum();
        let lw = lwcb_param_count(c, kernel, s);
        let mut store = ParamStore::new();
        DeepConnBlock::new(&mut ParamBuilder::new(&mut store, 0), "dcb", c, s, kernel)?;
        assert_eq!(store.num_trainable(), dcb_param_count(c, kernel, s));
        println!("{s:>2} {lw:>10} {:>10} {dense:>10} {:>10}", store.num_trainable(), dense - lw);
    }
    Ok(())
}
