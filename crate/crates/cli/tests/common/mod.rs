#![allow(dead_code)]

use std::path::Path;

use ensview::dataio::{load_csv_reader, split_and_fold, Dataset, SchemaHints};
use ensview::library::{build_library_with, save_library, BuildOptions, DataSource, ModelLibrary};
use ensview::models::{ModelSpec, Weighting};

/// Two noisy numeric features and a categorical one; the label mixes all three.
pub fn toy_csv(n: usize) -> String {
    let mut csv = String::from("x1,x2,shade,y\n");
    let mut state = 0x2545F4914F6CDD1Du64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..n {
        let x1 = next() * 4.0 - 2.0;
        let x2 = next() * 4.0 - 2.0;
        let shade = ["light", "mid", "dark"][(next() * 3.0) as usize % 3];
        let noise = next() * 2.0 - 1.0;
        let shift = if shade == "dark" { 0.5 } else { 0.0 };
        let y = if x1 * x2 + 0.4 * x1 + shift + noise > 0.0 { "yes" } else { "no" };
        csv.push_str(&format!("{x1:.4},{x2:.4},{shade},{y}\n"));
    }
    csv
}

pub fn toy_specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::Knn {
            k: 1,
            weighting: Weighting::Uniform,
        },
        ModelSpec::Knn {
            k: 9,
            weighting: Weighting::Distance,
        },
        ModelSpec::DecisionTree {
            max_depth: Some(2),
            min_leaf: 2,
        },
        ModelSpec::DecisionTree {
            max_depth: None,
            min_leaf: 1,
        },
        ModelSpec::NaiveBayes { alpha: 1.0 },
        ModelSpec::LogisticRegression { lambda: 0.01 },
    ]
}

/// Writes the toy CSV into `dir`, builds a library over it and saves the
/// library to `dir/lib`.
pub fn toy_library(dir: &Path, n: usize) -> (Dataset, ModelLibrary) {
    let csv_path = dir.join("toy.csv");
    std::fs::write(&csv_path, toy_csv(n)).unwrap();
    let source = DataSource {
        path: csv_path,
        label: "y".into(),
        test_fraction: 0.25,
        folds: 5,
        seed: 9,
        hints: SchemaHints::default(),
    };
    let ds = load_csv_reader(toy_csv(n).as_bytes(), "y", &SchemaHints::default()).unwrap();
    let ds = split_and_fold(ds, 0.25, 5, 9).unwrap();
    let opts = BuildOptions {
        grid: "toy".into(),
        source: Some(source),
        progress: None,
    };
    let lib = build_library_with(&ds, &toy_specs(), 9, &opts).unwrap();
    save_library(&lib, dir.join("lib")).unwrap();
    (ds, lib)
}
