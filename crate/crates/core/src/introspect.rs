//! Interpretability exports: decoder attention maps and the learned
//! structural embeddings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::Trace;
use crate::grammar::Phase;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum IntrospectError {
    #[error("the decode trace holds no attention maps (enable capture_attention)")]
    TraceMissing,
    #[error("layer {layer} out of range ({layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("head {head} out of range ({heads} heads)")]
    HeadOutOfRange { head: usize, heads: usize },
    #[error("structural embedding row {0} is all zeros")]
    ZeroVector(usize),
    #[error("expected {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Decoder self-attention over the generated sequence.
    #[serde(rename = "self")]
    SelfAttention,
    /// Decoder attention over the input words.
    Cross,
}

/// A dense matrix with row and column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl LabeledMatrix {
    /// CSV with a header row of column labels; the first column holds row labels.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.col_labels.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// One attention map of a traced generation. `head = None` averages the
/// heads. Rows are labelled by `symbol_labels` (one per decoder input);
/// cross-attention columns by `words`.
pub fn export_attention<T: Scalar>(
    trace: &Trace<T>,
    symbol_labels: &[String],
    words: &[String],
    layer: usize,
    head: Option<usize>,
    kind: AttentionKind,
) -> Result<LabeledMatrix, IntrospectError> {
    let maps = trace.attention.as_ref().ok_or(IntrospectError::TraceMissing)?;
    let per_layer = match kind {
        AttentionKind::SelfAttention => &maps.self_attn,
        AttentionKind::Cross => &maps.cross_attn,
    };
    let heads = per_layer.get(layer).ok_or(IntrospectError::LayerOutOfRange {
        layer,
        layers: per_layer.len(),
    })?;
    let chosen: Vec<&Tensor<T>> = match head {
        Some(h) => vec![heads.get(h).ok_or(IntrospectError::HeadOutOfRange { head: h, heads: heads.len() })?],
        None => heads.iter().collect(),
    };
    let (rows, cols) = (chosen[0].rows(), chosen[0].cols());
    if symbol_labels.len() != rows {
        return Err(IntrospectError::LabelCount {
            expected: rows,
            got: symbol_labels.len(),
        });
    }
    let col_labels = match kind {
        AttentionKind::SelfAttention => symbol_labels.to_vec(),
        AttentionKind::Cross => {
            if words.len() != cols {
                return Err(IntrospectError::LabelCount {
                    expected: cols,
                    got: words.len(),
                });
            }
            words.to_vec()
        }
    };
    let n = chosen.len() as f64;
    let values = (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| chosen.iter().map(|t| t.at(i, j).to_f64().unwrap_or(f64::NAN)).sum::<f64>() / n)
                .collect()
        })
        .collect();
    Ok(LabeledMatrix {
        row_labels: symbol_labels.to_vec(),
        col_labels,
        values,
    })
}

fn phase_labels() -> Vec<String> {
    Phase::ALL.iter().map(|p| p.name().to_string()).collect()
}

/// Pairwise cosine similarity of the four structural embedding rows.
pub fn struct_similarity<T: Scalar>(table: &Tensor<T>) -> Result<LabeledMatrix, IntrospectError> {
    let rows: Vec<Vec<f64>> = (0..table.rows())
        .map(|r| table.row(r).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
        .collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(IntrospectError::ZeroVector(i));
    }
    let values = (0..rows.len())
        .map(|i| {
            (0..rows.len())
                .map(|j| {
                    if i == j {
                        return 1.0;
                    }
                    let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect();
    Ok(LabeledMatrix {
        row_labels: phase_labels(),
        col_labels: phase_labels(),
        values,
    })
}

/// Raw per-dimension values of the structural embeddings.
pub fn struct_values<T: Scalar>(table: &Tensor<T>) -> LabeledMatrix {
    LabeledMatrix {
        row_labels: phase_labels(),
        col_labels: (0..table.cols()).map(|d| format!("d{d}")).collect(),
        values: (0..table.rows())
            .map(|r| table.row(r).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_matrix_properties() {
        let t = Tensor::new(vec![4, 3], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = struct_similarity(&t).unwrap();
        assert_eq!(m.values[0][1], -1.0);
        assert_eq!(m.values[0][2], 0.0);
        for i in 0..4 {
            assert_eq!(m.values[i][i], 1.0);
            for j in 0..4 {
                assert_eq!(m.values[i][j], m.values[j][i]);
            }
        }
        assert_eq!(m.row_labels, ["Node", "Head", "Tail", "Relation"]);
    }

    #[test]
    fn zero_row_is_an_error() {
        let t: Tensor<f64> = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(struct_similarity(&t), Err(IntrospectError::ZeroVector(1)));
    }

    #[test]
    fn missing_trace() {
        let trace: Trace<f64> = Trace::default();
        assert_eq!(
            export_attention(&trace, &[], &[], 0, None, AttentionKind::Cross),
            Err(IntrospectError::TraceMissing)
        );
    }

    #[test]
    fn csv_quotes_labels() {
        let m = LabeledMatrix {
            row_labels: vec!["(0,1,Peop)".into()],
            col_labels: vec!["a,b".into()],
            values: vec![vec![0.5]],
        };
        assert_eq!(m.to_csv(), ",\"a,b\"\n\"(0,1,Peop)\",0.5\n");
    }
}
