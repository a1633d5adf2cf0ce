//! The five-row ablation ladder: numerical branch alone (with and without the
//! calendar embedding), then a plain ConvLSTM, V-LSTM with a single query and
//! V-LSTM with the double query.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vnnet_ingest::{Dataset, SplitName};

use crate::error::{Error, Result};
use crate::model::{QueryMode, VisionBranch};
use crate::training::{evaluate, train, write_atomic, MetricReport, TrainConfig};

/// One row's switches and its printed configuration columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderRow {
    pub time_embedding: bool,
    pub vision: VisionBranch,
    pub query: QueryMode,
}

impl LadderRow {
    pub const ALL: [LadderRow; 5] = [
        LadderRow {
            time_embedding: false,
            vision: VisionBranch::None,
            query: QueryMode::Single,
        },
        LadderRow {
            time_embedding: true,
            vision: VisionBranch::None,
            query: QueryMode::Single,
        },
        LadderRow {
            time_embedding: true,
            vision: VisionBranch::ConvLstm,
            query: QueryMode::Single,
        },
        LadderRow {
            time_embedding: true,
            vision: VisionBranch::VLstm,
            query: QueryMode::Single,
        },
        LadderRow {
            time_embedding: true,
            vision: VisionBranch::VLstm,
            query: QueryMode::Double,
        },
    ];

    pub fn numerical_label(&self) -> &'static str {
        if self.time_embedding {
            "N-GCN"
        } else {
            "N-GCN*"
        }
    }

    pub fn vision_label(&self) -> String {
        self.vision.to_string()
    }

    pub fn query_label(&self) -> String {
        match self.vision {
            VisionBranch::None => "-".to_string(),
            _ => self.query.to_string(),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            time_embedding: self.time_embedding,
            vision: self.vision,
            query: self.query,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: LadderRow,
    pub parameters: usize,
    pub vision_parameters: usize,
    pub epochs: usize,
    pub validation: MetricReport,
    pub test: MetricReport,
}

/// Trains every ladder row on `dataset` in order.
pub fn run_ladder(base: &TrainConfig, dataset: &Dataset) -> Result<Vec<AblationResult>> {
    LadderRow::ALL
        .iter()
        .map(|row| {
            let config = row.apply(base);
            let data = config.prepare(dataset.clone())?;
            let outcome = train(&config, &data)?;
            let model = outcome.checkpoint.model()?;
            log::info!("{} / {} / {} trained", row.numerical_label(), row.vision_label(), row.query_label());
            Ok(AblationResult {
                row: *row,
                parameters: model.num_parameters(),
                vision_parameters: model.vision_parameters(),
                epochs: outcome.epochs_run,
                validation: evaluate(&model, &data, SplitName::Validation, config.batch)?,
                test: evaluate(&model, &data, SplitName::Test, config.batch)?,
            })
        })
        .collect()
}

pub const COMPARISON_HEADER: [&str; 10] = [
    "numerical_branch",
    "vision_branch",
    "attention_query",
    "parameters",
    "vision_parameters",
    "epochs",
    "validation_mae",
    "validation_rmse",
    "test_mae",
    "test_rmse",
];

pub fn comparison_csv(results: &[AblationResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARISON_HEADER).map_err(csv_err)?;
    for r in results {
        w.write_record([
            r.row.numerical_label().to_string(),
            r.row.vision_label(),
            r.row.query_label(),
            r.parameters.to_string(),
            r.vision_parameters.to_string(),
            r.epochs.to_string(),
            r.validation.mae.to_string(),
            r.validation.rmse.to_string(),
            r.test.mae.to_string(),
            r.test.rmse.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

pub fn write_comparison(path: &Path, results: &[AblationResult]) -> Result<()> {
    write_atomic(path, comparison_csv(results)?.as_bytes())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("comparison table: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_the_ladder() {
        let labels: Vec<(String, String, String)> = LadderRow::ALL
            .iter()
            .map(|r| (r.numerical_label().to_string(), r.vision_label(), r.query_label()))
            .collect();
        let expected = [
            ("N-GCN*", "-", "-"),
            ("N-GCN", "-", "-"),
            ("N-GCN", "ConvLSTM", "Single"),
            ("N-GCN", "V-LSTM", "Single"),
            ("N-GCN", "V-LSTM", "Double"),
        ];
        for (got, want) in labels.iter().zip(expected) {
            assert_eq!((got.0.as_str(), got.1.as_str(), got.2.as_str()), want);
        }
    }
}
