//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use debayes_core::hetero::{Architecture, HeteroNet, TrainConfig};
use debayes_core::nn::{Activation, Dense, InitScheme, MlpParams};
use debayes_core::Ensemble;

/// Member `l` of a fixed ensemble with `p_x = 1`, four penultimate units and
/// `p_y` outputs. Every weight is a literal.
pub fn tiny_member(l: usize, p_y: usize) -> HeteroNet {
    let s = 1.0 + 0.25 * l as f64;
    let trunk = Dense::new(
        1,
        4,
        vec![1.0 * s, -0.8, 0.6 * s, 1.5],
        Some(vec![0.3, 0.9, 0.1 * l as f64, -0.2]),
        Activation::Relu,
    )
    .unwrap();
    let base = [0.8, -0.4, 1.1, 0.5, -0.3, 0.7, 0.2, -0.9];
    let w: Vec<f64> = (0..4 * p_y)
        .map(|k| base[k % base.len()] + 0.35 * l as f64 * if k % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let mean_head = Dense::new(4, p_y, w, None, Activation::Identity).unwrap();
    let var_head = Dense::new(
        4,
        1,
        vec![0.2, -0.1, 0.15 * s, 0.05],
        Some(vec![-0.7 + 0.2 * l as f64]),
        Activation::Identity,
    )
    .unwrap();
    HeteroNet::from_parts(
        MlpParams::from_layers(vec![trunk]).unwrap(),
        mean_head,
        var_head,
        1e-6,
    )
    .unwrap()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        arch: Architecture {
            hidden: vec![4],
            variance_floor: 1e-6,
            init: InitScheme::He,
        },
        ..TrainConfig::default()
    }
}

/// Three hand-set members.
pub fn tiny_ensemble(p_y: usize) -> Ensemble {
    let members = (0..3).map(|l| tiny_member(l, p_y)).collect();
    Ensemble::from_members(members, vec![0, 1, 2], tiny_config()).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
