use styleaug::config::ExperimentConfig;

fn main() {
    let toy = std::env::args().any(|a| a == "--toy");
    let cfg = if toy { ExperimentConfig::toy() } else { ExperimentConfig::default() };
    print!("{}", cfg.to_toml().expect("serialize config"));
}
