//! CSV datasets: a header `domain,label,feat_1,...,feat_d` followed by one
//! row per sample, `domain` being `source` or `target`.

use std::path::Path;

use kase_core::data::{ClassRole, OpenSetDataset, Protocol};
use kase_core::Matrix;

use crate::error::{io, LabError, Result};

pub fn load_csv(path: &Path, protocol: Protocol) -> Result<OpenSetDataset> {
    let file = std::fs::File::open(path).map_err(io(path))?;
    read_csv(file, path, protocol)
}

/// Parses CSV text; `path` only labels error messages.
pub fn read_csv<R: std::io::Read>(reader: R, path: &Path, protocol: Protocol) -> Result<OpenSetDataset> {
    let err = |line: u64, msg: String| LabError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| err(1, e.to_string()))?,
        None => return Err(err(1, "missing header".into())),
    };
    let dim = header.len().saturating_sub(2);
    let expected: Vec<String> = ["domain".to_string(), "label".to_string()]
        .into_iter()
        .chain((1..=dim).map(|j| format!("feat_{j}")))
        .collect();
    if dim == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(err(1, format!("header must be {}", expected.join(","))));
    }

    let (mut sx, mut sy, mut tx, mut ty) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in records {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().eq(header.iter()) {
            return Err(err(line, "duplicate header".into()));
        }
        if rec.len() != dim + 2 {
            return Err(err(line, format!("expected {} fields, found {}", dim + 2, rec.len())));
        }
        let label: u32 = rec[1]
            .parse()
            .map_err(|_| err(line, format!("bad label {:?}", &rec[1])))?;
        let feats = rec
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(line, format!("bad feature {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let role = protocol.role(label);
        match &rec[0] {
            "source" => {
                if !matches!(role, Some(ClassRole::Known(_) | ClassRole::SourceUnknown)) {
                    return Err(err(line, format!("label {label} is not a source class")));
                }
                sx.extend(feats);
                sy.push(label);
            }
            "target" => {
                if !matches!(role, Some(ClassRole::Known(_) | ClassRole::TargetUnknown)) {
                    return Err(err(line, format!("label {label} is not a target class")));
                }
                tx.extend(feats);
                ty.push(label);
            }
            other => return Err(err(line, format!("unknown domain {other:?}"))),
        }
    }
    let source_x = Matrix::from_vec(sy.len(), dim, sx)?;
    let target_x = Matrix::from_vec(ty.len(), dim, tx)?;
    Ok(OpenSetDataset::new(protocol, source_x, sy, target_x, ty)?)
}
