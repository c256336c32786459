//! Built-in experiment presets, embedded at compile time. Each preset file
//! documents its mixture geometry and protocol constants.

pub const PRESETS: &[(&str, &str)] = &[
    (
        "and-balanced-1d",
        include_str!("../presets/and-balanced-1d.toml"),
    ),
    (
        "or-balanced-1d",
        include_str!("../presets/or-balanced-1d.toml"),
    ),
    (
        "or-unbalanced-1d",
        include_str!("../presets/or-unbalanced-1d.toml"),
    ),
    ("w1-pair-1d", include_str!("../presets/w1-pair-1d.toml")),
    (
        "reward-tilt-1d",
        include_str!("../presets/reward-tilt-1d.toml"),
    ),
    (
        "and-balanced-2d",
        include_str!("../presets/and-balanced-2d.toml"),
    ),
    (
        "and-reward-up-2d",
        include_str!("../presets/and-reward-up-2d.toml"),
    ),
    ("or-pair-2d", include_str!("../presets/or-pair-2d.toml")),
    ("w1-pair-2d", include_str!("../presets/w1-pair-2d.toml")),
    (
        "circuit-2x2-2d",
        include_str!("../presets/circuit-2x2-2d.toml"),
    ),
    ("kn-study-2d", include_str!("../presets/kn-study-2d.toml")),
];

pub fn lookup(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    #[test]
    fn every_preset_parses_and_validates() {
        for (name, text) in PRESETS {
            let cfg = ExperimentConfig::from_toml(text, &[])
                .unwrap_or_else(|e| panic!("preset {name}: {e}"));
            assert_eq!(&cfg.name, name);
        }
    }
}
