//! Regenerates the bundled JSON configs from the in-code defaults.
//! cargo run -p hitok-cli --example dump_configs -- configs/

use hitok_core::vae::HierarchyConfig;

#[path = "../src/runconfig.rs"]
mod runconfig;
use runconfig::RunConfig;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "configs".into());
    let dir = std::path::PathBuf::from(dir);
    std::fs::create_dir_all(&dir).unwrap();

    let desk = RunConfig::default();
    let full_scale = RunConfig {
        hierarchy: HierarchyConfig::full_scale_multi_layer(),
        ..RunConfig::default()
    };
    let single = RunConfig {
        hierarchy: HierarchyConfig::full_scale_single_layer(),
        ..RunConfig::default()
    };
    for (name, cfg) in [
        ("desk.json", &desk),
        ("full_scale.json", &full_scale),
        ("single_layer.json", &single),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
        println!("wrote {}", path.display());
    }
}
