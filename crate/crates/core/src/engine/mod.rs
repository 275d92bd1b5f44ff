//! Columnar analysis kernels: expressions, define/filter/histogram
//! pipelines and mergeable histogram results.

mod eval;
mod expr;
mod histogram;
mod pipeline;

pub use eval::{eval_expr, Columns};
pub use expr::{parse_expr, BinOp, Expr, ExprError, Func, UnaryOp};
pub use histogram::{fill_histogram, merge_histograms, HistSpec, Histogram, HistogramError};
pub use pipeline::{
    run_pipeline, KernelPipeline, PipelineError, PipelineOutput, PipelineSpec, Step, StepSpec, TaskResult,
    TaskSpec,
};

/// Merges `incoming` into `acc` histogram-by-histogram (matched by position).
pub fn merge_into(acc: &mut [Histogram], incoming: &[Histogram]) -> Result<(), HistogramError> {
    if acc.len() != incoming.len() {
        return Err(HistogramError::Mismatch(format!(
            "{} histograms vs {}",
            acc.len(),
            incoming.len()
        )));
    }
    for (a, b) in acc.iter_mut().zip(incoming) {
        a.merge_from(b)?;
    }
    Ok(())
}
