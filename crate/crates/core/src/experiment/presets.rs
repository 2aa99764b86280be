use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::prompt::{GoldPosition, PadLayout, PromptSchema};

use super::config::ExperimentConfig;

/// Canned experiment grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Gold plus `n` top-ranked distractors, rows by `n`, columns by gold
    /// position.
    DistractingSweep,
    /// Gold position at a fixed distractor count.
    GoldPosition,
    /// Gold plus `n` random documents, rows by `n`, columns by gold position.
    NoiseSweep,
    /// Top `k` retrieved documents behind `n` random ones; rows by `k`,
    /// columns by `n`.
    RagInPractice,
    /// Top `k` retrieved documents with and without padding to the budget.
    RetrieverTradeoff,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::DistractingSweep,
        Preset::GoldPosition,
        Preset::NoiseSweep,
        Preset::RagInPractice,
        Preset::RetrieverTradeoff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::DistractingSweep => "distracting-sweep",
            Preset::GoldPosition => "gold-position",
            Preset::NoiseSweep => "noise-sweep",
            Preset::RagInPractice => "rag-in-practice",
            Preset::RetrieverTradeoff => "retriever-tradeoff",
        }
    }

    pub fn schema(self) -> PromptSchema {
        let text = match self {
            Preset::DistractingSweep | Preset::GoldPosition => "I,distracting,gold,Q",
            Preset::NoiseSweep => "I,random,gold,Q",
            Preset::RagInPractice => "I,random,retrieved,Q",
            Preset::RetrieverTradeoff => "I,retrieved,Q",
        };
        text.parse().expect("preset schemas are valid")
    }

    /// Top-k cutoffs evaluated when the config sets none.
    pub fn default_topk(self) -> &'static [usize] {
        match self {
            Preset::RagInPractice => &[1, 2, 4, 10],
            _ => &[],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.as_str()).collect();
                format!("unknown preset {s:?}, expected one of {}", names.join(", "))
            })
    }
}

/// One configuration point of a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub row: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub schema: PromptSchema,
    /// Each query is run once per entry.
    pub positions: Vec<Option<GoldPosition>>,
    pub n_distracting: usize,
    pub n_retrieved: usize,
    pub n_random: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad: Option<PadLayout>,
    /// Cells sharing a group stop once one of them no longer fits the budget.
    #[serde(skip)]
    pub group: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// A single report rendered with its own columns.
    Single,
    /// Columns are gold positions of each row's report.
    Positions,
    /// Columns are cells.
    Cells,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub layout: Layout,
    pub row_header: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Cell>,
    /// Skip cells whose prompts would be truncated instead of running them.
    pub skip_truncated: bool,
}

const COUNTS: [usize; 6] = [0, 1, 2, 4, 8, 16];
const RETRIEVED: [usize; 4] = [1, 2, 4, 10];
const TRADEOFF_K: [usize; 3] = [3, 4, 5];

impl Grid {
    /// Expands `config` into cells. Assumes the config has been validated.
    pub fn build(config: &ExperimentConfig) -> Grid {
        let Some(preset) = config.preset else {
            let schema = config
                .schema()
                .and_then(Result::ok)
                .expect("validated config has a schema");
            let cell = Cell {
                row: schema.to_string(),
                column: None,
                schema,
                positions: vec![config.prompt.gold_position],
                n_distracting: config.prompt.n_distracting,
                n_retrieved: config.prompt.n_retrieved,
                n_random: config.prompt.n_random,
                pad: config.prompt.pad,
                group: None,
            };
            return Grid {
                layout: Layout::Single,
                row_header: "setting".into(),
                rows: vec![cell.row.clone()],
                columns: Vec::new(),
                cells: vec![cell],
                skip_truncated: false,
            };
        };
        let schema = preset.schema();
        let sweep = &config.sweep;
        let positions: Vec<GoldPosition> = sweep
            .positions
            .clone()
            .unwrap_or_else(|| GoldPosition::ALL.to_vec());
        match preset {
            Preset::DistractingSweep | Preset::GoldPosition | Preset::NoiseSweep => {
                let counts = sweep.counts.clone().unwrap_or_else(|| match preset {
                    Preset::GoldPosition => vec![config.prompt.n_distracting],
                    _ => COUNTS.to_vec(),
                });
                let noise = preset == Preset::NoiseSweep;
                let cells: Vec<Cell> = counts
                    .iter()
                    .map(|&n| Cell {
                        row: n.to_string(),
                        column: None,
                        schema: schema.clone(),
                        positions: positions.iter().copied().map(Some).collect(),
                        n_distracting: if noise { 0 } else { n },
                        n_retrieved: 0,
                        n_random: if noise { n } else { 0 },
                        pad: None,
                        group: Some(0),
                    })
                    .collect();
                Grid {
                    layout: Layout::Positions,
                    row_header: if noise { "random" } else { "distracting" }.into(),
                    rows: cells.iter().map(|c| c.row.clone()).collect(),
                    columns: positions.iter().map(|p| p.to_string()).collect(),
                    cells,
                    skip_truncated: true,
                }
            }
            Preset::RagInPractice => {
                let rows = sweep
                    .retrieved
                    .clone()
                    .unwrap_or_else(|| RETRIEVED.to_vec());
                let cols = sweep.counts.clone().unwrap_or_else(|| COUNTS.to_vec());
                let mut cells = Vec::new();
                for (g, &k) in rows.iter().enumerate() {
                    for &n in &cols {
                        cells.push(Cell {
                            row: k.to_string(),
                            column: Some(n.to_string()),
                            schema: schema.clone(),
                            positions: vec![None],
                            n_distracting: 0,
                            n_retrieved: k,
                            n_random: n,
                            pad: None,
                            group: Some(g),
                        });
                    }
                }
                Grid {
                    layout: Layout::Cells,
                    row_header: "retrieved".into(),
                    rows: rows.iter().map(usize::to_string).collect(),
                    columns: cols.iter().map(usize::to_string).collect(),
                    cells,
                    skip_truncated: true,
                }
            }
            Preset::RetrieverTradeoff => {
                let rows = sweep
                    .retrieved
                    .clone()
                    .unwrap_or_else(|| TRADEOFF_K.to_vec());
                let layout = config.prompt.pad.unwrap_or(PadLayout::BeforeContext);
                let mut cells = Vec::new();
                for &k in &rows {
                    for (column, pad) in [("none", None), ("padded", Some(layout))] {
                        cells.push(Cell {
                            row: k.to_string(),
                            column: Some(column.into()),
                            schema: schema.clone(),
                            positions: vec![None],
                            n_distracting: 0,
                            n_retrieved: k,
                            n_random: 0,
                            pad,
                            group: None,
                        });
                    }
                }
                Grid {
                    layout: Layout::Cells,
                    row_header: "k".into(),
                    rows: rows.iter().map(usize::to_string).collect(),
                    columns: vec!["none".into(), "padded".into()],
                    cells,
                    skip_truncated: true,
                }
            }
        }
    }

    pub fn max_retrieved(&self) -> usize {
        self.cells.iter().map(|c| c.n_retrieved).max().unwrap_or(0)
    }
}
