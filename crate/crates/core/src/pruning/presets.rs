//! Named schedules from published pruning configurations.
//!
//! Ratios are fractions of the original visual token count, which is how the
//! source tables reach their stated average retention.

use super::schedule::{PruneAction, PruneSchedule, RatioBasis, Strategy};

type Row = (&'static str, &'static [(usize, Strategy, f64)]);

use Strategy::{AttentionTopk as Fast, LowDuplication as Dart, MaxminDiversity as Div, Random as Rnd, Withdraw as Vtw};

const PRESETS: &[Row] = &[
    ("none", &[]),
    // 28-layer model, 50% average retention.
    ("qwen-dart-50", &[(2, Dart, 0.46)]),
    ("qwen-dart-vtw-50", &[(2, Dart, 0.49), (26, Vtw, 0.0)]),
    ("qwen-dart-random-50", &[(2, Dart, 0.49), (25, Rnd, 0.25)]),
    ("qwen-divprune-50", &[(0, Div, 0.50)]),
    ("qwen-divprune-vtw-50", &[(0, Div, 0.53), (26, Vtw, 0.0)]),
    ("qwen-divprune-random-50", &[(0, Div, 0.53), (25, Rnd, 0.25)]),
    // 32-layer model, 192 average tokens out of 576.
    ("dart-192", &[(2, Dart, 0.29)]),
    ("dart-vtw-192", &[(2, Dart, 0.44), (21, Vtw, 0.0)]),
    ("dart-random-192", &[(2, Dart, 0.44), (20, Rnd, 0.07)]),
    ("divprune-192", &[(0, Div, 0.33)]),
    ("divprune-vtw-192", &[(0, Div, 0.49), (21, Vtw, 0.0)]),
    ("divprune-random-192", &[(0, Div, 0.49), (20, Rnd, 0.07)]),
    ("fastv-192", &[(3, Fast, 0.26)]),
    ("fastv-vtw-192", &[(3, Fast, 0.41), (21, Vtw, 0.0)]),
    ("fastv-random-192", &[(3, Fast, 0.41), (20, Rnd, 0.06)]),
    // 32-layer model, 64 average tokens out of 576.
    ("dart-64", &[(2, Dart, 0.05)]),
    ("dart-vtw-64", &[(1, Dart, 0.10), (26, Vtw, 0.0)]),
    ("dart-random-64", &[(1, Dart, 0.10), (20, Rnd, 0.05)]),
    ("divprune-64", &[(0, Div, 0.11)]),
    ("divprune-vtw-64", &[(0, Div, 0.17), (21, Vtw, 0.0)]),
    ("divprune-random-64", &[(0, Div, 0.17), (20, Rnd, 0.02)]),
    ("fastv-64", &[(3, Fast, 0.02)]),
    ("fastv-vtw-64", &[(2, Fast, 0.06), (26, Vtw, 0.0)]),
    ("fastv-random-64", &[(2, Fast, 0.06), (20, Rnd, 0.03)]),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Looks up a named schedule; every action uses seed 0.
pub fn preset(name: &str) -> Option<PruneSchedule> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(n, rows)| {
        let actions = rows
            .iter()
            .map(|&(layer, strategy, ratio)| PruneAction::new(layer, strategy, ratio, 0))
            .collect();
        PruneSchedule::new(*n, RatioBasis::Original, actions).expect("presets are valid")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in preset_names() {
            let s = preset(name).unwrap();
            let l = if name.starts_with("qwen") { 28 } else { 32 };
            s.validate_for(l).unwrap();
            assert!(s.to_toml().parse::<toml::Table>().is_ok());
            assert_eq!(PruneSchedule::from_toml(&s.to_toml()).unwrap(), s);
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn llava_presets_hit_their_average_budgets() {
        for (suffix, target) in [("192", 192.0), ("64", 64.0)] {
            for base in ["dart", "dart-vtw", "dart-random", "divprune", "divprune-vtw", "divprune-random", "fastv", "fastv-vtw", "fastv-random"] {
                let counts = preset(&format!("{base}-{suffix}")).unwrap().alive_counts(576, 32).unwrap();
                let avg = counts.iter().sum::<usize>() as f64 / 32.0;
                assert!((avg - target).abs() / target < 0.1, "{base}-{suffix}: {avg}");
            }
        }
    }
}
