use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::{Domain, DomainDataset};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Reads a single-domain dataset. The label space is the set of observed
/// labels.
pub fn load_csv(path: impl AsRef<Path>) -> Result<DomainDataset> {
    load_csv_with_space(path, None)
}

/// Reads `f0,...,f{d-1},label,domain` rows. When `space` is given, every
/// label must belong to it and it becomes the dataset's label space.
pub fn load_csv_with_space(path: impl AsRef<Path>, space: Option<&BTreeSet<usize>>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let at = |line: u64, msg: String| Error::Data(format!("{}:{line}: {msg}", path.display()));

    let header = reader
        .headers()
        .map_err(|e| at(1, format!("unreadable header: {e}")))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "domain" {
        return Err(at(1, format!("header must be f0,...,f<d-1>,label,domain; got {cols:?}")));
    }
    let d = cols.len() - 2;
    for (j, name) in cols[..d].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(at(1, format!("column {j} must be named f{j}, got `{name}`")));
        }
    }

    let mut data = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    let mut domain: Option<Domain> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            at(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != d + 2 {
            return Err(at(line, format!("expected {} cells, got {}", d + 2, rec.len())));
        }
        for j in 0..d {
            let v: f64 = rec[j]
                .parse()
                .map_err(|_| at(line, format!("non-numeric cell `{}` in column f{j}", &rec[j])))?;
            if !v.is_finite() {
                return Err(at(line, format!("non-finite value in column f{j}")));
            }
            data.push(v);
        }
        let row_domain = match &rec[d + 1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(at(line, format!("domain must be source or target, got `{other}`"))),
        };
        match domain {
            None => domain = Some(row_domain),
            Some(dm) if dm != row_domain => {
                return Err(at(line, "file mixes source and target rows".into()));
            }
            _ => {}
        }
        let label = match &rec[d] {
            "" if row_domain == Domain::Source => {
                return Err(at(line, "source rows must carry a label".into()));
            }
            "" => None,
            s => {
                let y: usize = s
                    .parse()
                    .map_err(|_| at(line, format!("label `{s}` is not a nonnegative integer")))?;
                if let Some(space) = space {
                    if !space.contains(&y) {
                        return Err(at(line, format!("label {y} outside the declared space {space:?}")));
                    }
                }
                Some(y)
            }
        };
        labels.push(label);
    }

    let domain = domain.ok_or_else(|| at(2, "no data rows".into()))?;
    let n = labels.len();
    let labeled = labels.iter().filter(|l| l.is_some()).count();
    let labels = match labeled {
        0 => None,
        k if k == n => Some(labels.into_iter().map(|l| l.expect("checked")).collect::<Vec<_>>()),
        _ => return Err(at(0, "target file mixes labeled and unlabeled rows".into())),
    };
    let label_space = match (space, &labels) {
        (Some(s), _) => s.clone(),
        (None, Some(l)) => l.iter().copied().collect(),
        (None, None) => BTreeSet::new(),
    };
    DomainDataset::new(Tensor::new(vec![n, d], data)?, labels, label_space, domain)
}

/// Writes the dataset in the loader's format, values in shortest
/// round-trip form.
pub fn write_csv(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let d = ds.dim();
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label,domain\n");
    for i in 0..ds.len() {
        for v in ds.features().row(i) {
            out.push_str(&format!("{v},"));
        }
        if let Some(l) = ds.labels() {
            out.push_str(&l[i].to_string());
        }
        out.push(',');
        out.push_str(ds.domain().name());
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
