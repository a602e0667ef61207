use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::write_atomic;

pub const CSV_HEADER: &str = "round,step,node,loss,tokens,sim_comm_s,sim_comp_s";

/// Which model a row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSource {
    Node(usize),
    /// Held-out evaluation of the global model.
    Eval,
}

impl fmt::Display for RowSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowSource::Node(k) => write!(f, "{k}"),
            RowSource::Eval => f.write_str("eval"),
        }
    }
}

/// One CSV row. `tokens`, `sim_comm_s` and `sim_comp_s` are cumulative
/// over the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub step: usize,
    pub node: RowSource,
    pub loss: f64,
    pub tokens: u64,
    pub sim_comm_s: f64,
    pub sim_comp_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub mean_train_loss: f64,
    pub eval_loss: f64,
    pub eval_perplexity: f64,
    pub tokens: u64,
    pub sim_comm_s: f64,
    pub sim_comp_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
    pub rounds: Vec<RoundSummary>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.round, r.step, r.node, r.loss, r.tokens, r.sim_comm_s, r.sim_comp_s
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn final_round(&self) -> Option<&RoundSummary> {
        self.rounds.last()
    }

    /// Losses of `node`'s training rows, in step order.
    pub fn node_losses(&self, node: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.node == RowSource::Node(node))
            .map(|r| r.loss)
            .collect()
    }
}
