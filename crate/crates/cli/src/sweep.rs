//! Configuration sweeps: train and score one model per grid setting.
//!
//! Both grids reuse a single train/valid/test split so that rows differ
//! only in the swept hyperparameter, never in the data they saw.

use wmagin_core::graph::UtteranceFeatures;
use wmagin_core::model::ModelConfig;
use wmagin_core::trainer::{
    evaluate, segment_split, single_split, train, TrainConfig, TrainError,
};
use wmagin_core::wma::AggregatorWeights;

/// Which hyperparameter axis to sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepGrid {
    /// Ten blends of the three neighbor aggregators.
    Aggregators,
    /// The fully-adjacent layer at the last, penultimate, and
    /// antepenultimate stack position.
    FaPlacement,
}

/// One grid entry's held-out test score.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub setting: String,
    pub wa: f64,
    pub ua: f64,
}

/// Aggregator blends as (label, softmax, sum, mean): every lopsided
/// half/quarter and 3:1:1 mix, the uniform blend, and the three
/// single-aggregator corners.
pub const AGGREGATOR_GRID: [(&str, f64, f64, f64); 10] = [
    ("softmax=1/2 sum=1/4 mean=1/4", 0.5, 0.25, 0.25),
    ("softmax=1/4 sum=1/2 mean=1/4", 0.25, 0.5, 0.25),
    ("softmax=1/4 sum=1/4 mean=1/2", 0.25, 0.25, 0.5),
    ("softmax=3/5 sum=1/5 mean=1/5", 0.6, 0.2, 0.2),
    ("softmax=1/5 sum=1/5 mean=3/5", 0.2, 0.2, 0.6),
    ("softmax=1/5 sum=3/5 mean=1/5", 0.2, 0.6, 0.2),
    (
        "softmax=1/3 sum=1/3 mean=1/3",
        1.0 / 3.0,
        1.0 / 3.0,
        1.0 / 3.0,
    ),
    ("softmax=1 sum=0 mean=0", 1.0, 0.0, 0.0),
    ("softmax=0 sum=1 mean=0", 0.0, 1.0, 0.0),
    ("softmax=0 sum=0 mean=1", 0.0, 0.0, 1.0),
];

/// The three FA placements counted from the top of a `num_layers` stack.
pub fn fa_grid(num_layers: usize) -> Result<Vec<(String, usize)>, TrainError> {
    if num_layers < 3 {
        return Err(TrainError::Config(
            "the FA placement sweep needs at least 3 graph layers",
        ));
    }
    Ok(vec![
        (format!("fa_layer={num_layers} (last)"), num_layers),
        (
            format!("fa_layer={} (penultimate)", num_layers - 1),
            num_layers - 1,
        ),
        (
            format!("fa_layer={} (antepenultimate)", num_layers - 2),
            num_layers - 2,
        ),
    ])
}

/// Trains one model per grid setting on a shared split and scores each on
/// the held-out test segments. `progress` is told each setting as it
/// starts.
pub fn run_sweep(
    grid: SweepGrid,
    dataset: &[UtteranceFeatures],
    model: &ModelConfig,
    train_config: &TrainConfig,
    mut progress: impl FnMut(&str),
) -> Result<Vec<SweepRow>, TrainError> {
    let split = single_split(dataset, train_config.split_ratio, train_config.seed)?;
    let settings: Vec<(String, ModelConfig)> = match grid {
        SweepGrid::Aggregators => AGGREGATOR_GRID
            .iter()
            .map(|(label, softmax, sum, mean)| {
                let mut config = model.clone();
                config.aggregator_weights = AggregatorWeights::new(*sum, *mean, *softmax);
                (label.to_string(), config)
            })
            .collect(),
        SweepGrid::FaPlacement => fa_grid(model.num_gin_layers)?
            .into_iter()
            .map(|(label, index)| {
                let mut config = model.clone();
                config.fa_layer_index = index;
                (label, config)
            })
            .collect(),
    };

    let mut rows = Vec::with_capacity(settings.len());
    for (setting, config) in settings {
        progress(&setting);
        let outcome = train(dataset, &split, &config, train_config)?;
        let test = segment_split(dataset, &split.test, config.graph_len)?;
        let report = evaluate(&test, &outcome.params, &config)?;
        rows.push(SweepRow {
            setting,
            wa: report.wa,
            ua: report.ua,
        });
    }
    Ok(rows)
}

/// Plain-text results table, one row per setting.
pub fn render_table(rows: &[SweepRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.setting.len())
        .chain(std::iter::once("setting".len()))
        .max()
        .unwrap_or(0);
    let mut text = format!("{:<width$}      wa      ua\n", "setting");
    for row in rows {
        text.push_str(&format!(
            "{:<width$}  {:.4}  {:.4}\n",
            row.setting, row.wa, row.ua
        ));
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use wmagin_core::synth::{generate_synthetic, SynthSpec};

    #[test]
    fn aggregator_grid_covers_ten_normalized_blends() {
        assert_eq!(AGGREGATOR_GRID.len(), 10);
        for (label, softmax, sum, mean) in AGGREGATOR_GRID {
            assert!(
                (softmax + sum + mean - 1.0).abs() < 1e-12,
                "{label} does not sum to one"
            );
        }
        // The corners keep exactly one aggregator alive.
        assert_eq!(AGGREGATOR_GRID[7], ("softmax=1 sum=0 mean=0", 1.0, 0.0, 0.0));
        assert_eq!(AGGREGATOR_GRID[8], ("softmax=0 sum=1 mean=0", 0.0, 1.0, 0.0));
        assert_eq!(AGGREGATOR_GRID[9], ("softmax=0 sum=0 mean=1", 0.0, 0.0, 1.0));
    }

    #[test]
    fn fa_grid_walks_down_from_the_top() {
        let grid = fa_grid(4).unwrap();
        assert_eq!(grid.len(), 3);
        assert_eq!(grid[0].1, 4);
        assert!(grid[0].0.contains("last"));
        assert_eq!(grid[1].1, 3);
        assert!(grid[1].0.contains("penultimate"));
        assert_eq!(grid[2].1, 2);
        assert!(grid[2].0.contains("antepenultimate"));
        assert!(fa_grid(2).is_err());
    }

    #[test]
    fn fa_sweep_produces_one_row_per_placement() {
        let spec = SynthSpec {
            num_classes: 2,
            utterances_per_class: 6,
            frames_range: (8, 12),
            feature_dim: 3,
            num_groups: 3,
            seed: 5,
            ..SynthSpec::default()
        };
        let dataset = generate_synthetic(&spec).unwrap();
        let model = ModelConfig {
            feature_dim: 3,
            graph_len: 4,
            gru_hidden_per_dir: 2,
            gin_hidden: 3,
            num_gin_layers: 3,
            fa_layer_index: 2,
            num_classes: 2,
            ..ModelConfig::default()
        };
        let train_config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 1,
            early_stop_patience: 0,
            num_stages: 4,
            seed: 1,
            split_ratio: (4, 1, 1),
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        let rows = run_sweep(
            SweepGrid::FaPlacement,
            &dataset,
            &model,
            &train_config,
            |setting| seen.push(setting.to_string()),
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(seen.len(), 3);
        for row in &rows {
            assert!((0.0..=1.0).contains(&row.wa));
            assert!((0.0..=1.0).contains(&row.ua));
        }
        let table = render_table(&rows);
        assert_eq!(table.lines().count(), 4);
        assert!(table.starts_with("setting"));
    }
}
