use crate::engine::{run_pipeline, PipelineOutput, TaskSpec};
use crate::format::{read_chunk_from, RangeRead};

/// Reads the task's chunk through `source` and runs its pipeline. Errors are
/// flattened to the reason string reported in `TaskFailed`.
pub fn execute_task(source: &dyn RangeRead, spec: &TaskSpec) -> Result<PipelineOutput, String> {
    let pipeline = spec.pipeline.compile().map_err(|e| format!("pipeline: {e}"))?;
    let wanted = pipeline.input_columns();
    let batch = read_chunk_from(source, &spec.chunk.file, &spec.chunk, &wanted).map_err(|e| e.to_string())?;
    run_pipeline(&batch, &pipeline).map_err(|e| e.to_string())
}
