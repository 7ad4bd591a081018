//! Parameter breakdown of every preset plus the ablation variants.

use dualpath_se::model::count_params;
use dualpath_se::ModelConfig;

fn main() -> dualpath_se::Result<()> {
    for (name, cfg) in [("paper", ModelConfig::paper()), ("desk", ModelConfig::desk()), ("micro", ModelConfig::micro())] {
        let report = count_params(&cfg)?;
        println!("{name}: {} ({:.3} M)", report.total, report.total as f64 / 1e6);
        for (module, n) in &report.breakdown {
            println!("  {module:<24} {n:>9}");
        }
        let variants = [
            ("no attention", ModelConfig { use_attention: false, ..cfg }),
            ("no attention, plain convs", ModelConfig { use_attention: false, use_dcb: false, ..cfg }),
            ("tied decoder", ModelConfig { tie_decoder: true, ..cfg }),
        ];
        for (label, v) in variants {
            println!("  {label:<24} {:>9}", count_params(&v)?.total);
        }
    }
    Ok(())
}
