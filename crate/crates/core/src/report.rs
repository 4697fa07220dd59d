//! JSON run reports.

use serde::Serialize;

use crate::query::{CascadeResult, QueryConfig, Strategy};
use crate::sparse::GridPos;
use crate::SCHEMA;

#[derive(Clone, Debug, Serialize)]
pub struct LevelReport {
    pub level: u8,
    pub height: usize,
    pub width: usize,
    pub computed_keys: Option<Vec<GridPos>>,
    pub extracted_queries: Option<Vec<GridPos>>,
    pub dense_positions: usize,
    pub sparse_rows: usize,
    pub patches: usize,
    pub rulebook_entries: usize,
    pub flops: u64,
    pub millis: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub strategy: Strategy,
    pub config: QueryConfig,
    pub levels: Vec<LevelReport>,
    pub total_flops: u64,
    pub total_millis: f64,
    pub num_detections: usize,
}

impl RunReport {
    /// Levels are listed top-down, in execution order.
    pub fn new(result: &CascadeResult, num_detections: usize) -> Self {
        let levels = result
            .levels
            .values()
            .rev()
            .map(|lr| LevelReport {
                level: lr.level,
                height: lr.height,
                width: lr.width,
                computed_keys: lr.computed_keys.as_ref().map(|k| k.positions().to_vec()),
                extracted_queries: lr.extracted_queries.as_ref().map(|k| k.positions().to_vec()),
                dense_positions: lr.dense_positions,
                sparse_rows: lr.sparse_rows,
                patches: lr.patches,
                rulebook_entries: lr.rulebook_entries,
                flops: lr.flops,
                millis: lr.millis,
            })
            .collect();
        Self {
            schema: SCHEMA,
            strategy: result.config.strategy,
            config: result.config.clone(),
            levels,
            total_flops: result.total_flops(),
            total_millis: result.total_millis,
            num_detections,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
