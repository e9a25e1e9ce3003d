//! Hand-built instances shared by unit tests across modules.

use std::collections::BTreeMap;

use crate::model::{
    EconomicParams, NetworkInstance, PlantId, RegeneratorOption, Scenario, SinkId, SinkSpec,
    SourceId, SourceSpec,
};

/// Economics used throughout the tests: 100 m pipe runs at 7200 $/m² plus
/// 250 $/m fixed, 8000 operating hours, 5% interest over 15 years, water at
/// 0.5 $/t both ways.
pub fn default_economics() -> EconomicParams {
    EconomicParams {
        distance_m: 100.0,
        pipe_unit_cost: 7200.0,
        pipe_fixed_cost: 250.0,
        water_density: 1000.0,
        pipe_velocity: 1.0,
        annual_hours: 8000.0,
        interest_rate: 0.05,
        economic_life: 15,
        freshwater_price: 0.5,
        discharge_price: 0.5,
        freshwater_conc: BTreeMap::new(),
        hub_flow_min: 0.1,
        hub_flow_max: None,
    }
}

fn conc_series(contaminant: &str, values: &[f64]) -> BTreeMap<String, Vec<f64>> {
    let mut m = BTreeMap::new();
    m.insert(contaminant.to_string(), values.to_vec());
    m
}

/// One plant, two sources (40 t/h @ 100 ppm, 60 t/h @ 400 ppm), two sinks
/// (50 t/h ≤ 50 ppm, 50 t/h ≤ 200 ppm), two regenerator options, one period.
pub fn single_plant_instance() -> NetworkInstance {
    let a = PlantId::from("A");
    NetworkInstance {
        contaminants: vec!["tds".into()],
        plants: vec![a.clone()],
        sources: vec![
            SourceSpec {
                id: SourceId(1),
                plant: a.clone(),
                flow: vec![40.0],
                conc: conc_series("tds", &[100.0]),
            },
            SourceSpec {
                id: SourceId(2),
                plant: a.clone(),
                flow: vec![60.0],
                conc: conc_series("tds", &[400.0]),
            },
        ],
        sinks: vec![
            SinkSpec {
                id: SinkId(1),
                plant: a.clone(),
                flow: vec![50.0],
                max_conc: conc_series("tds", &[50.0]),
            },
            SinkSpec {
                id: SinkId(2),
                plant: a.clone(),
                flow: vec![50.0],
                max_conc: conc_series("tds", &[200.0]),
            },
        ],
        regenerators: vec![
            RegeneratorOption {
                index: 1,
                removal_ratio: [("tds".to_string(), 0.5)].into(),
                unit_cost: 1.0,
            },
            RegeneratorOption {
                index: 2,
                removal_ratio: [("tds".to_string(), 0.9)].into(),
                unit_cost: 2.0,
            },
        ],
        economics: default_economics(),
        scenario: Scenario {
            period_count: 1,
            period_weights: vec![1.0],
            plant_entry: [(a, 1)].into(),
        },
        notes: vec![],
    }
}

/// Two plants over two equally weighted periods; plant B enters in the
/// second period. Small enough to reason about by hand.
pub fn staged_two_plant_instance() -> NetworkInstance {
    let a = PlantId::from("A");
    let b = PlantId::from("B");
    NetworkInstance {
        contaminants: vec!["tds".into()],
        plants: vec![a.clone(), b.clone()],
        sources: vec![
            SourceSpec {
                id: SourceId(1),
                plant: a.clone(),
                flow: vec![10.0, 10.0],
                conc: conc_series("tds", &[100.0, 100.0]),
            },
            SourceSpec {
                id: SourceId(2),
                plant: b.clone(),
                flow: vec![8.0, 8.0],
                conc: conc_series("tds", &[200.0, 200.0]),
            },
        ],
        sinks: vec![
            SinkSpec {
                id: SinkId(1),
                plant: a.clone(),
                flow: vec![10.0, 10.0],
                max_conc: conc_series("tds", &[50.0, 50.0]),
            },
            SinkSpec {
                id: SinkId(2),
                plant: b.clone(),
                flow: vec![8.0, 8.0],
                max_conc: conc_series("tds", &[80.0, 80.0]),
            },
        ],
        regenerators: vec![RegeneratorOption {
            index: 1,
            removal_ratio: [("tds".to_string(), 0.5)].into(),
            unit_cost: 1.0,
        }],
        economics: default_economics(),
        scenario: Scenario {
            period_count: 2,
            period_weights: vec![0.5, 0.5],
            plant_entry: [(a, 1), (b, 2)].into(),
        },
        notes: vec![],
    }
}

/// Smallest meaningful instance with the cross-plant hub disabled: one
/// source (10 t/h @ 100 ppm), one sink (10 t/h ≤ 50 ppm), one period.
/// The exhaustive oracle in the verification layer can grid-search it.
pub fn tiny_hub_free_instance() -> NetworkInstance {
    let a = PlantId::from("A");
    let mut economics = default_economics();
    economics.hub_flow_max = Some(0.0);
    NetworkInstance {
        contaminants: vec!["tds".into()],
        plants: vec![a.clone()],
        sources: vec![SourceSpec {
            id: SourceId(1),
            plant: a.clone(),
            flow: vec![10.0],
            conc: conc_series("tds", &[100.0]),
        }],
        sinks: vec![SinkSpec {
            id: SinkId(1),
            plant: a.clone(),
            flow: vec![10.0],
            max_conc: conc_series("tds", &[50.0]),
        }],
        regenerators: vec![RegeneratorOption {
            index: 1,
            removal_ratio: [("tds".to_string(), 0.5)].into(),
            unit_cost: 1.0,
        }],
        economics,
        scenario: Scenario {
            period_count: 1,
            period_weights: vec![1.0],
            plant_entry: [(a, 1)].into(),
        },
        notes: vec![],
    }
}

/// Same single source/sink pair but with a 25 ppm sink limit and the hub
/// available: direct reuse alone reaches 2.5 t/h, while routing water
/// through the 50%-removal hub reaches 5 t/h. Exercises the hub arithmetic
/// in a hand-checkable setting.
pub fn tiny_hub_instance() -> NetworkInstance {
    let mut inst = tiny_hub_free_instance();
    inst.economics.hub_flow_max = None;
    inst.sinks[0].max_conc = conc_series("tds", &[25.0]);
    inst
}

/// Two single-source plants that can only help each other through the hub:
/// A's source (4 t/h @ 100 ppm) and B's dirtier source (4 t/h @ 200 ppm)
/// feed sinks limited to 50 and 100 ppm. One period, hub enabled, two
/// regenerator options. Small enough for the exhaustive oracle.
pub fn tiny_two_plant_instance() -> NetworkInstance {
    let a = PlantId::from("A");
    let b = PlantId::from("B");
    NetworkInstance {
        contaminants: vec!["tds".into()],
        plants: vec![a.clone(), b.clone()],
        sources: vec![
            SourceSpec {
                id: SourceId(1),
                plant: a.clone(),
                flow: vec![4.0],
                conc: conc_series("tds", &[100.0]),
            },
            SourceSpec {
                id: SourceId(2),
                plant: b.clone(),
                flow: vec![4.0],
                conc: conc_series("tds", &[200.0]),
            },
        ],
        sinks: vec![
            SinkSpec {
                id: SinkId(1),
                plant: a.clone(),
                flow: vec![4.0],
                max_conc: conc_series("tds", &[50.0]),
            },
            SinkSpec {
                id: SinkId(2),
                plant: b.clone(),
                flow: vec![4.0],
                max_conc: conc_series("tds", &[100.0]),
            },
        ],
        regenerators: vec![
            RegeneratorOption {
                index: 1,
                removal_ratio: [("tds".to_string(), 0.5)].into(),
                unit_cost: 1.0,
            },
            RegeneratorOption {
                index: 2,
                removal_ratio: [("tds".to_string(), 0.8)].into(),
                unit_cost: 1.8,
            },
        ],
        economics: default_economics(),
        scenario: Scenario {
            period_count: 1,
            period_weights: vec![1.0],
            plant_entry: [(a, 1), (b, 1)].into(),
        },
        notes: vec![],
    }
}
