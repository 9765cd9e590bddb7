//! Class-token feature dump for external projection.

use std::path::Path;

use super::eval::infer_samples;
use crate::attention::SelectMode;
use crate::data::Sample;
use crate::error::Result;
use crate::model::Model;

/// Writes `id,y,y_c,qp,f0..f{D-1}` with full-average prompts, one row per sample.
pub fn export_features(model: &Model, samples: &[Sample], path: &Path) -> Result<()> {
    let (_, feats) = infer_samples(model, samples, SelectMode::FullAverage, 0)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "y".into(), "y_c".into(), "qp".into()];
    header.extend((0..model.cfg.dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (id, (s, f)) in samples.iter().zip(&feats).enumerate() {
        let mut row = vec![id.to_string(), s.y.to_string(), s.y_c.to_string(), s.qp().map_or(String::new(), |q| q.to_string())];
        row.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
