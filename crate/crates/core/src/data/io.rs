use std::fs;
use std::path::{Path, PathBuf};

use super::{Origin, Role, ScenarioDataset, ScenarioKind, ScenarioSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Reads a CSV table with a header row. The label column is the one named
/// `label`, or the last column when none is. Feature columns are min-max
/// scaled to [0, 1]; constant columns become 0.
pub fn load_csv(path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Format(format!("{}: need at least one feature and a label column", path.display())));
    }
    let label_col = headers.iter().position(|h| h == "label").unwrap_or(headers.len() - 1);
    let dim = headers.len() - 1;
    let mut x = Matrix::zeros(0, dim);
    let mut labels = Vec::new();
    let mut row = Vec::with_capacity(dim);
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        row.clear();
        for (col, field) in record.iter().enumerate() {
            let bad = || Error::Format(format!("{}: row {}: bad value {field:?}", path.display(), line + 2));
            if col == label_col {
                labels.push(field.parse::<usize>().map_err(|_| bad())?);
            } else {
                let v: f64 = field.parse().map_err(|_| bad())?;
                if !v.is_finite() {
                    return Err(bad());
                }
                row.push(v);
            }
        }
        x.push_row(&row)?;
    }
    if labels.is_empty() {
        return Err(Error::Empty("csv table"));
    }
    min_max_scale(&mut x);
    Ok((x, labels))
}

fn min_max_scale(x: &mut Matrix) {
    for c in 0..x.cols() {
        let (lo, hi) = (0..x.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            let v = x.row(r)[c];
            (lo.min(v), hi.max(v))
        });
        let range = hi - lo;
        for r in 0..x.rows() {
            let v = &mut x.row_mut(r)[c];
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
}

/// Wraps an external table as an ID-kind dataset with a seeded train/test
/// split. Shadow and unlearn roles are assigned afterwards with
/// [`super::split_shadow`] and [`super::select_unlearn_set`].
pub fn dataset_from_table(x: Matrix, labels: Vec<usize>, test_fraction: f64, seed: u64) -> Result<ScenarioDataset> {
    if x.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: labels.len(),
        });
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid("test_fraction must be in (0, 1)"));
    }
    let n = labels.len();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut r = rng::seeded(rng::derive_seed(seed, "table_split"));
    let all: Vec<usize> = (0..n).collect();
    let test = rng::sample_sorted(&all, n_test, &mut r);
    let mut roles = vec![Role::Train; n];
    for &i in &test {
        roles[i] = Role::Test;
    }
    let spec = ScenarioSpec {
        kind: ScenarioKind::Id,
        n_train: n - n_test,
        n_test,
        n_unlearn: 1,
        n_reference: n_test,
        n_classes,
        input_dim: x.cols(),
        seed,
        ..ScenarioSpec::default()
    };
    let ds = ScenarioDataset {
        x,
        clean_labels: labels.clone(),
        labels,
        roles,
        origins: vec![Origin::External; n],
        spec,
        mixture: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes one CSV per non-empty role, named `{role}.csv`, with header
/// `role,label,clean_label,f0..`. Returns the written paths.
pub fn dump_roles(dataset: &ScenarioDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for role in Role::ALL {
        let idx = dataset.indices(role);
        if idx.is_empty() {
            continue;
        }
        let path = dir.join(format!("{}.csv", role.name()));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut header = vec!["role".to_string(), "label".into(), "clean_label".into()];
        header.extend((0..dataset.input_dim()).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for i in idx {
            let mut rec = vec![
                role.name().to_string(),
                dataset.labels[i].to_string(),
                dataset.clean_labels[i].to_string(),
            ];
            rec.extend(dataset.x.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
