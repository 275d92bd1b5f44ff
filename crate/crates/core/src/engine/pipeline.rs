use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::eval::{eval_expr, truthy, Columns};
use super::expr::{parse_expr, Expr, ExprError};
use super::histogram::{HistSpec, Histogram, HistogramError};
use crate::dataset::FileChunk;
use crate::format::ColumnBatch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("step {index}: {source}")]
    Expr { index: usize, source: ExprError },
    #[error("step {index}: {source}")]
    Histogram { index: usize, source: HistogramError },
    #[error("step {index}: define {name:?} shadows an existing column")]
    Shadow { index: usize, name: String },
    #[error("pipeline has no histogram step")]
    NoHistogram,
}

/// One step as written in a pipeline file:
/// `{"define":[name, expr]}`, `{"filter":expr}` or `{"hist":[name, expr, n_bins, lo, hi]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSpec {
    Define(String, String),
    Filter(String),
    Hist(String, String, usize, f64, f64),
}

/// The on-disk / on-wire form of a pipeline: a JSON list of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PipelineSpec(pub Vec<StepSpec>);

impl PipelineSpec {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn compile(&self) -> Result<KernelPipeline, PipelineError> {
        KernelPipeline::compile(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Define(String, Expr),
    Filter(Expr),
    Histogram(String, Expr, HistSpec),
}

/// A parsed, validated pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPipeline {
    steps: Vec<Step>,
}

impl KernelPipeline {
    pub fn compile(spec: &PipelineSpec) -> Result<Self, PipelineError> {
        let mut steps = Vec::with_capacity(spec.0.len());
        let mut defined = BTreeSet::new();
        for (index, step) in spec.0.iter().enumerate() {
            let parse = |text: &str| parse_expr(text).map_err(|source| PipelineError::Expr { index, source });
            steps.push(match step {
                StepSpec::Define(name, text) => {
                    if !defined.insert(name.clone()) {
                        return Err(PipelineError::Shadow {
                            index,
                            name: name.clone(),
                        });
                    }
                    Step::Define(name.clone(), parse(text)?)
                }
                StepSpec::Filter(text) => Step::Filter(parse(text)?),
                StepSpec::Hist(name, text, n_bins, lo, hi) => {
                    let spec = HistSpec::new(*n_bins, *lo, *hi)
                        .map_err(|source| PipelineError::Histogram { index, source })?;
                    Step::Histogram(name.clone(), parse(text)?, spec)
                }
            });
        }
        if !steps.iter().any(|s| matches!(s, Step::Histogram(..))) {
            return Err(PipelineError::NoHistogram);
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Columns that must come from the input file: every identifier not
    /// produced by an earlier Define.
    pub fn input_columns(&self) -> BTreeSet<String> {
        let mut defined = BTreeSet::new();
        let mut needed = BTreeSet::new();
        for step in &self.steps {
            let expr = match step {
                Step::Define(_, e) | Step::Filter(e) | Step::Histogram(_, e, _) => e,
            };
            needed.extend(expr.identifiers().into_iter().filter(|i| !defined.contains(i)));
            if let Step::Define(name, _) = step {
                defined.insert(name.clone());
            }
        }
        needed
    }

    /// Empty histograms in step order, one per Histogram step.
    pub fn empty_histograms(&self) -> Vec<Histogram> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Histogram(name, _, spec) => Some(Histogram::empty(name, spec.n_bins, spec.lo, spec.hi)),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub n_events_in: u64,
    pub n_events_pass: u64,
    pub histograms: Vec<Histogram>,
}

struct Working<'a> {
    cols: BTreeMap<String, Cow<'a, [f64]>>,
    n: usize,
}

impl Columns for Working<'_> {
    fn len(&self) -> usize {
        self.n
    }

    fn get(&self, name: &str) -> Option<&[f64]> {
        self.cols.get(name).map(|c| c.as_ref())
    }
}

/// Applies the pipeline's steps in order to `batch`. Filters keep rows whose
/// value is non-zero; each histogram is filled from the rows alive at its step.
pub fn run_pipeline(batch: &ColumnBatch, pipeline: &KernelPipeline) -> Result<PipelineOutput, PipelineError> {
    let mut work = Working {
        cols: batch
            .columns()
            .iter()
            .map(|(k, v)| (k.clone(), Cow::Borrowed(v.as_slice())))
            .collect(),
        n: batch.n_events(),
    };
    let mut histograms = Vec::new();
    for (index, step) in pipeline.steps.iter().enumerate() {
        let eval = |e: &Expr, w: &Working| eval_expr(e, w).map_err(|source| PipelineError::Expr { index, source });
        match step {
            Step::Define(name, expr) => {
                if work.cols.contains_key(name) {
                    return Err(PipelineError::Shadow {
                        index,
                        name: name.clone(),
                    });
                }
                let values = eval(expr, &work)?;
                work.cols.insert(name.clone(), Cow::Owned(values));
            }
            Step::Filter(expr) => {
                let mask: Vec<bool> = eval(expr, &work)?.into_iter().map(truthy).collect();
                for col in work.cols.values_mut() {
                    let kept: Vec<f64> = col.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
                    *col = Cow::Owned(kept);
                }
                work.n = mask.iter().filter(|&&m| m).count();
            }
            Step::Histogram(name, expr, spec) => {
                let values = eval(expr, &work)?;
                let mut h = Histogram::empty(name, spec.n_bins, spec.lo, spec.hi);
                h.fill(&values);
                histograms.push(h);
            }
        }
    }
    Ok(PipelineOutput {
        n_events_in: batch.n_events() as u64,
        n_events_pass: work.n as u64,
        histograms,
    })
}

/// A unit of work: one chunk of one file under one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub job_id: u64,
    pub chunk: FileChunk,
    pub pipeline: PipelineSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub chunk_id: u64,
    pub n_events_in: u64,
    pub n_events_pass: u64,
    pub histograms: Vec<Histogram>,
    pub worker_id: String,
    pub t_start: f64,
    pub t_end: f64,
}

impl TaskResult {
    pub fn from_output(chunk_id: u64, out: PipelineOutput, worker_id: &str, t_start: f64, t_end: f64) -> Self {
        Self {
            chunk_id,
            n_events_in: out.n_events_in,
            n_events_pass: out.n_events_pass,
            histograms: out.histograms,
            worker_id: worker_id.to_owned(),
            t_start,
            t_end,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(pairs: &[(&str, Vec<f64>)]) -> ColumnBatch {
        ColumnBatch::new(pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()).unwrap()
    }

    fn pipeline(json: &str) -> KernelPipeline {
        PipelineSpec::from_json(json).unwrap().compile().unwrap()
    }

    #[test]
    fn pipeline_file_format() {
        let spec = PipelineSpec::from_json(
            r#"[{"define":["pt","sqrt(px*px+py*py)"]},{"filter":"pt>20"},{"hist":["h_pt","pt",60,0,300]}]"#,
        )
        .unwrap();
        assert_eq!(spec.0[1], StepSpec::Filter("pt>20".into()));
        assert_eq!(spec.0[2], StepSpec::Hist("h_pt".into(), "pt".into(), 60, 0.0, 300.0));
        let p = spec.compile().unwrap();
        assert_eq!(p.input_columns(), ["px".to_string(), "py".to_string()].into());
    }

    #[test]
    fn two_event_example() {
        // Event 0: pt = 5 > 1, lands in bin 0 of [0, 10). Event 1: pt = 0, cut.
        let p = pipeline(r#"[{"define":["pt","sqrt(px*px+py*py)"]},{"filter":"pt>1"},{"hist":["h","pt",1,0,10]}]"#);
        let out = run_pipeline(&batch(&[("px", vec![3.0, 0.0]), ("py", vec![4.0, 0.0])]), &p).unwrap();
        assert_eq!(out.n_events_in, 2);
        assert_eq!(out.n_events_pass, 1);
        assert_eq!(out.histograms[0].counts, vec![1]);
    }

    #[test]
    fn empty_batch_and_constant_false_filter() {
        let p = pipeline(r#"[{"filter":"0"},{"hist":["h","x",4,0,1]}]"#);
        let out = run_pipeline(&batch(&[("x", vec![0.5, 0.2])]), &p).unwrap();
        assert_eq!(out.n_events_pass, 0);
        assert_eq!(out.histograms[0].n_filled, 0);

        let out = run_pipeline(&batch(&[("x", vec![])]), &p).unwrap();
        assert_eq!((out.n_events_in, out.n_events_pass), (0, 0));
        assert!(out.histograms[0].counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn validation_errors() {
        let no_hist = PipelineSpec::from_json(r#"[{"filter":"x>0"}]"#).unwrap();
        assert_eq!(no_hist.compile().unwrap_err(), PipelineError::NoHistogram);

        let bad_expr = PipelineSpec::from_json(r#"[{"filter":"x>"},{"hist":["h","x",1,0,1]}]"#).unwrap();
        assert!(matches!(bad_expr.compile().unwrap_err(), PipelineError::Expr { index: 0, .. }));

        let bad_bins = PipelineSpec::from_json(r#"[{"hist":["h","x",0,0,1]}]"#).unwrap();
        assert!(matches!(bad_bins.compile().unwrap_err(), PipelineError::Histogram { index: 0, .. }));

        let shadow = pipeline(r#"[{"define":["x","x*2"]},{"hist":["h","x",1,0,1]}]"#);
        let err = run_pipeline(&batch(&[("x", vec![1.0])]), &shadow).unwrap_err();
        assert!(matches!(err, PipelineError::Shadow { index: 0, .. }));

        let missing = pipeline(r#"[{"hist":["h","y",1,0,1]}]"#);
        let err = run_pipeline(&batch(&[("x", vec![1.0])]), &missing).unwrap_err();
        assert_eq!(err.to_string(), "step 0: unknown identifier y");
    }

    #[test]
    fn histograms_see_rows_alive_at_their_step() {
        let p = pipeline(r#"[{"hist":["all","x",2,0,2]},{"filter":"x>=1"},{"hist":["cut","x",2,0,2]}]"#);
        let out = run_pipeline(&batch(&[("x", vec![0.5, 1.5, 1.2])]), &p).unwrap();
        assert_eq!(out.histograms[0].counts, vec![1, 2]);
        assert_eq!(out.histograms[1].counts, vec![0, 2]);
        assert_eq!(out.histograms[1].n_filled, out.n_events_pass);
    }
}
