//! Central-difference check of every trainable gradient of a tiny model,
//! for each adapter variant.
//!
//! cargo run --release --example gradient_check

use depthforge::backbone::BackboneConfig;
use depthforge::decoder::DecoderConfig;
use depthforge::run::{self, RunConfig};
use depthforge::{Variant, VariantConfig};

fn main() -> depthforge::Result<()> {
    for variant in Variant::ALL {
        let cfg = RunConfig {
            backbone: BackboneConfig {
                num_layers: 2,
                feature_dim: 16,
                num_heads: 2,
                patch_size: 2,
                image_side: 4,
                ..Default::default()
            },
            variant: VariantConfig {
                variant,
                num_tokens: 4,
                ..Default::default()
            },
            decoder: DecoderConfig {
                num_classes: 3,
                head_heads: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let report = run::cmd_gradcheck(&cfg)?;
        let groups: Vec<String> = report.by_group().iter().map(|(g, e)| format!("{g} {e:.2e}")).collect();
        println!("{variant:<20} worst {:.2e}  [{}]", report.max_rel_error, groups.join(", "));
    }
    Ok(())
}
