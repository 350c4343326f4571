//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use dercoord::net::{Base, Bus, BusKind, Der, FeederModel, Line};
use dercoord::sim::Scenario;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn bundled_feeder() -> FeederModel {
    FeederModel::from_file(data_dir().join("feeders/ieee123_analog.feeder")).expect("bundled feeder")
}

pub fn scenario(name: &str) -> Scenario {
    Scenario::load(data_dir().join("scenarios").join(name)).expect("bundled scenario")
}

/// Reactive range of every random DER; wide enough that constant-voltage
/// buses never hit a limit.
pub const Q_RANGE_KVAR: f64 = 1e5;

/// Options for [`random_feeder`].
#[derive(Debug, Clone, Copy)]
pub struct TreeSpec {
    pub n_bus: usize,
    pub n_der: usize,
    /// Number of the DERs (taken first) that hold their voltage.
    pub n_pv: usize,
    pub flip_prob: f64,
    pub r_max: f64,
    pub load_max_kw: f64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        TreeSpec {
            n_bus: 8,
            n_der: 3,
            n_pv: 0,
            flip_prob: 0.3,
            r_max: 0.02,
            load_max_kw: 150.0,
        }
    }
}

/// Random radial feeder: bus `b` hangs off a uniformly chosen earlier bus,
/// line `b` connects them with a random orientation.
pub fn random_feeder(seed: u64, spec: TreeSpec) -> FeederModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut der_buses = Vec::new();
    while der_buses.len() < spec.n_der.min(spec.n_bus) {
        let b = rng.random_range(1..=spec.n_bus);
        if !der_buses.contains(&b) {
            der_buses.push(b);
        }
    }
    let mut buses = vec![Bus {
        id: 0,
        kind: BusKind::Substation,
        p_load_kw: 0.0,
        q_load_kvar: 0.0,
        v_set_pu: Some(1.0),
    }];
    let mut lines = Vec::new();
    for b in 1..=spec.n_bus {
        let pv = der_buses.iter().position(|d| *d == b).is_some_and(|i| i < spec.n_pv);
        let kind = if pv {
            BusKind::DerConstVoltage
        } else if der_buses.contains(&b) {
            BusKind::DerUnityPf
        } else {
            BusKind::Load
        };
        let p = rng.random_range(0.0..spec.load_max_kw);
        buses.push(Bus {
            id: b,
            kind,
            p_load_kw: p,
            q_load_kvar: 0.5 * p * rng.random::<f64>(),
            v_set_pu: pv.then(|| rng.random_range(0.98..1.0)),
        });
        let parent = rng.random_range(0..b);
        let (from, to) = if rng.random_bool(spec.flip_prob) {
            (b, parent)
        } else {
            (parent, b)
        };
        let r = rng.random_range(0.0..=spec.r_max);
        lines.push(Line {
            id: b,
            from,
            to,
            r_pu: r,
            x_pu: if spec.r_max == 0.0 { 0.0 } else { r * rng.random_range(0.5..2.0) },
            f_max_kw: f64::INFINITY,
        });
    }
    let ders = der_buses
        .iter()
        .map(|&bus| Der {
            bus,
            p_min_kw: 0.0,
            p_max_kw: 100.0,
            q_min_kvar: -Q_RANGE_KVAR,
            q_max_kvar: Q_RANGE_KVAR,
        })
        .collect();
    FeederModel::new(buses, lines, ders, Base::default()).expect("random feeder is valid")
}
