//! Long-format CSV panels, versioned fit files and result tables.
//!
//! Input files carry one row per `(id, time)` with columns `id`, `time`, the
//! variables, and optionally `dropout` (0/1). Empty cells and `NA` are
//! missing. Subjects are ordered by id (numerically when every id is an
//! integer) and times by value; every subject must cover the full grid, so
//! dropout is written as trailing `NA` rows.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cholesky::ModChol;
use crate::dropout::detect_dropout;
use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::forward_backward::Posteriors;
use crate::simulate::StudyRow;
use crate::types::{HmmParams, Mechanism, MissParams, ModelStructure, PanelDataset};

pub const FIT_FORMAT: &str = "cdghmm-fit";
pub const FIT_VERSION: u32 = 1;

/// Where per-subject dropout times come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    /// Trailing all-missing rows.
    Auto,
    /// The `dropout` column: the first row flagged 1 starts the dropout.
    Column,
    /// No dropout state.
    Off,
}

impl FromStr for DropoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Ok(DropoutMode::Auto),
            "column" => Ok(DropoutMode::Column),
            "off" => Ok(DropoutMode::Off),
            _ => Err(Error::InvalidInput(format!("unknown dropout mode '{s}'"))),
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

struct Record {
    line: u64,
    time: f64,
    values: Vec<Option<f64>>,
    dropout: bool,
}

/// Reads a long-format panel.
pub fn load_panel(path: impl AsRef<Path>, mode: DropoutMode) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let id_col = find("id").ok_or_else(|| Error::Data("missing 'id' column".into()))?;
    let time_col = find("time").ok_or_else(|| Error::Data("missing 'time' column".into()))?;
    let drop_col = find("dropout");
    if mode == DropoutMode::Column && drop_col.is_none() {
        return Err(Error::Data("dropout mode 'column' needs a 'dropout' column".into()));
    }
    let var_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != id_col && c != time_col && Some(c) != drop_col).collect();
    if var_cols.is_empty() {
        return Err(Error::Data("no variable columns".into()));
    }
    let var_names: Vec<String> = var_cols.iter().map(|&c| headers[c].to_string()).collect();

    let mut by_id: HashMap<String, Vec<Record>> = HashMap::new();
    let mut first_seen: HashMap<(String, u64), u64> = HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("line {line}: empty id")));
        }
        let time_str = rec.get(time_col).unwrap_or("");
        let time: f64 = time_str
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| Error::Data(format!("line {line}, column 'time': cannot parse '{time_str}'")))?;
        if let Some(prev) = first_seen.insert((id.clone(), time.to_bits()), line) {
            return Err(Error::Data(format!("duplicate (id, time) = ({id}, {time}) on lines {prev} and {line}")));
        }
        let mut values = Vec::with_capacity(var_cols.len());
        for (&c, name) in var_cols.iter().zip(&var_names) {
            let cell = rec.get(c).unwrap_or("");
            if is_missing(cell) {
                values.push(None);
            } else {
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| Error::Data(format!("line {line}, column '{name}': cannot parse '{cell}'")))?;
                values.push(Some(v));
            }
        }
        let dropout = match drop_col.map(|c| rec.get(c).unwrap_or("").trim()) {
            None | Some("") | Some("0") | Some("NA") => false,
            Some("1") => true,
            Some(other) => return Err(Error::Data(format!("line {line}, column 'dropout': expected 0 or 1, got '{other}'"))),
        };
        by_id.entry(id).or_default().push(Record { line, time, values, dropout });
    }
    if by_id.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }

    let mut ids: Vec<String> = by_id.keys().cloned().collect();
    if ids.iter().all(|s| s.parse::<i64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<i64>().unwrap());
    } else {
        ids.sort();
    }
    let grid: BTreeSet<u64> = by_id.values().flatten().map(|r| r.time.to_bits()).collect();
    let mut times: Vec<f64> = grid.iter().map(|&b| f64::from_bits(b)).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ragged: Vec<&str> = ids.iter().filter(|id| by_id[*id].len() != times.len()).map(String::as_str).collect();
    if !ragged.is_empty() {
        return Err(Error::Data(format!(
            "ids with incomplete time grids (encode missing rows as NA): {}",
            ragged.join(", ")
        )));
    }

    let (n, nt, p) = (ids.len(), times.len(), var_names.len());
    let mut values = vec![f64::NAN; n * nt * p];
    let mut mask = vec![true; n * nt * p];
    let mut flagged = vec![None; n];
    for (i, id) in ids.iter().enumerate() {
        let mut recs: Vec<&Record> = by_id[id].iter().collect();
        recs.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        for (t, r) in recs.iter().enumerate() {
            for (j, v) in r.values.iter().enumerate() {
                if let Some(v) = v {
                    values[(i * nt + t) * p + j] = *v;
                    mask[(i * nt + t) * p + j] = false;
                }
            }
            if r.dropout && flagged[i].is_none() {
                flagged[i] = Some((t, r.line));
            }
        }
    }
    let dropout = match mode {
        DropoutMode::Off => vec![None; n],
        DropoutMode::Auto => detect_dropout(&mask, n, nt, p)?,
        DropoutMode::Column => flagged.iter().map(|f| f.map(|(t, _)| t)).collect(),
    };
    let mut ds = PanelDataset::new(n, nt, p, values, mask, dropout).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::Data(msg),
        other => other,
    })?;
    ds.ids = ids;
    ds.times = times;
    ds.var_names = var_names;
    Ok(ds)
}

fn fmt_value(v: f64) -> String {
    // Display for f64 prints the shortest string that parses back exactly
    format!("{v}")
}

/// Writes a panel in the long format read by [`load_panel`], with a
/// `dropout` column marking post-dropout rows.
pub fn write_panel(path: impl AsRef<Path>, data: &PanelDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["id".to_string(), "time".to_string()];
    header.extend(data.var_names.iter().cloned());
    header.push("dropout".into());
    w.write_record(&header)?;
    for i in 0..data.n {
        for t in 0..data.n_times {
            let mut rec = vec![data.ids[i].clone(), fmt_value(data.times[t])];
            for (&v, &m) in data.row(i, t).iter().zip(data.mask_row(i, t)) {
                rec.push(if m { "NA".into() } else { fmt_value(v) });
            }
            rec.push(if data.is_dropped(i, t) { "1".into() } else { "0".into() });
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Row-major matrix with explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data: (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Data(format!(
                "matrix of shape {}x{} has {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissJson {
    pub mechanism: Mechanism,
    pub alpha: Vec<f64>,
    pub beta_t: Option<f64>,
    pub times: Vec<f64>,
}

/// Everything needed to decode new data with a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub format: String,
    pub version: u32,
    pub structure: String,
    pub mechanism: Mechanism,
    pub m: usize,
    pub p: usize,
    pub n_times: usize,
    pub dropout: bool,
    pub dropout_mode: DropoutMode,
    pub seed: u64,
    pub loglik: f64,
    pub bic: f64,
    pub icl: f64,
    pub rho: usize,
    pub iterations: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
    pub diagnostics: Vec<String>,
    pub var_names: Vec<String>,
    pub delta: Vec<f64>,
    pub gamma: MatrixJson,
    pub mu: Vec<Vec<f64>>,
    /// Unit lower-triangular `T_j`.
    pub t: Vec<MatrixJson>,
    /// Diagonal of `D_j`.
    pub d: Vec<Vec<f64>>,
    pub miss: MissJson,
}

impl FitFile {
    pub fn from_result(res: &FitResult, data: &PanelDataset, mode: DropoutMode) -> Self {
        let params = &res.params;
        FitFile {
            format: FIT_FORMAT.into(),
            version: FIT_VERSION,
            structure: res.structure.code().into(),
            mechanism: res.mechanism,
            m: params.m,
            p: data.p,
            n_times: data.n_times,
            dropout: params.dropout,
            dropout_mode: mode,
            seed: res.seed,
            loglik: res.loglik,
            bic: res.bic,
            icl: res.icl,
            rho: res.rho,
            iterations: res.iterations,
            converged: res.converged,
            loglik_trace: res.loglik_trace.clone(),
            diagnostics: res.diagnostics.clone(),
            var_names: data.var_names.clone(),
            delta: params.delta.clone(),
            gamma: MatrixJson::from_matrix(&params.gamma),
            mu: params.mu.iter().map(|v| v.iter().copied().collect()).collect(),
            t: params.chol.iter().map(|c| MatrixJson::from_matrix(&c.t)).collect(),
            d: params.chol.iter().map(|c| c.d.iter().copied().collect()).collect(),
            miss: MissJson {
                mechanism: params.miss.mechanism,
                alpha: params.miss.alpha.clone(),
                beta_t: params.miss.beta_t,
                times: params.miss.times.clone(),
            },
        }
    }

    pub fn structure(&self) -> Result<ModelStructure> {
        self.structure.parse()
    }

    pub fn to_params(&self) -> Result<HmmParams> {
        let bad = |msg: &str| Error::Data(format!("fit file: {msg}"));
        if self.format != FIT_FORMAT {
            return Err(bad("unrecognized format tag"));
        }
        if self.version != FIT_VERSION {
            return Err(bad(&format!("unsupported version {}", self.version)));
        }
        let k = self.m + usize::from(self.dropout);
        if self.mu.len() != self.m || self.t.len() != self.m || self.d.len() != self.m || self.delta.len() != k {
            return Err(bad("parameter blocks do not match the number of states"));
        }
        let chol = self
            .t
            .iter()
            .zip(&self.d)
            .map(|(t, d)| {
                Ok(ModChol {
                    t: t.to_matrix()?,
                    d: DVector::from_column_slice(d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = HmmParams {
            m: self.m,
            dropout: self.dropout,
            delta: self.delta.clone(),
            gamma: self.gamma.to_matrix()?,
            mu: self.mu.iter().map(|v| DVector::from_column_slice(v)).collect(),
            chol,
            miss: MissParams {
                mechanism: self.miss.mechanism,
                m: self.m,
                p: self.p,
                n_times: self.n_times,
                alpha: self.miss.alpha.clone(),
                beta_t: self.miss.beta_t,
                times: self.miss.times.clone(),
            },
        };
        crate::types::validate(&params, self.structure()?).map_err(|v| {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            bad(&msgs.join("; "))
        })?;
        Ok(params)
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut f = File::create(path.as_ref())?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let f = File::open(path.as_ref())?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

/// `id, time, state, prob_1 … prob_K`; states are 1-based and `m + 1`
/// marks dropout.
pub fn write_decoded(path: impl AsRef<Path>, data: &PanelDataset, labels: &[usize], post: &Posteriors) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["id".to_string(), "time".into(), "state".into()];
    header.extend((1..=post.k).map(|s| format!("prob_{s}")));
    w.write_record(&header)?;
    for i in 0..data.n {
        for t in 0..data.n_times {
            let mut rec = vec![data.ids[i].clone(), fmt_value(data.times[t]), (labels[i * data.n_times + t] + 1).to_string()];
            rec.extend(post.u(i, t).iter().map(|&u| fmt_value(u)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_study_csv(path: impl AsRef<Path>, rows: &[StudyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Worker count from the explicit flag, else `CDGHMM_THREADS`, else the
/// rayon default. Installs the global pool once; later calls are no-ops.
pub fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("CDGHMM_THREADS") {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidInput(format!("CDGHMM_THREADS must be a positive integer, got '{v}'")))?,
            ),
            _ => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::InvalidInput("thread count must be positive".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn small_complete_panel() {
        let f = write_tmp("id,time,a,b\ns1,1,1.0,2.0\ns1,2,1.5,2.5\ns1,3,2,3\ns2,1,0,0\ns2,2,0.5,0.25\ns2,3,1,1\n");
        let d = load_panel(f.path(), DropoutMode::Auto).unwrap();
        assert_eq!((d.n, d.n_times, d.p), (2, 3, 2));
        assert!(!d.has_missing());
        assert_eq!(d.row(1, 1), &[0.5, 0.25]);
        assert_eq!(d.var_names, vec!["a", "b"]);
    }

    #[test]
    fn na_cell_masked_exactly() {
        let f = write_tmp("id,time,v1,v2\ns1,1,1,2\ns1,2,NA,2\ns1,3,1,\ns2,3,1,1\ns2,1,0,0\ns2,2,0,0\n");
        let d = load_panel(f.path(), DropoutMode::Auto).unwrap();
        let missing: Vec<usize> = d.mask.iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| k).collect();
        // (s1, t2, v1) and (s1, t3, v2)
        assert_eq!(missing, vec![2, 5]);
        // rows are sorted by time even when the file is not
        assert_eq!(d.row(1, 2), &[1.0, 1.0]);
    }

    #[test]
    fn ragged_grid_rejected() {
        let f = write_tmp("id,time,x\na,1,1\na,2,1\na,3,1\na,4,1\nb,1,1\nb,2,1\nb,3,1\n");
        let err = load_panel(f.path(), DropoutMode::Auto).unwrap_err();
        assert!(matches!(&err, Error::Data(msg) if msg.contains('b')), "{err}");
    }

    #[test]
    fn duplicate_rows_name_lines() {
        let f = write_tmp("id,time,x\na,1,1\na,1,2\n");
        let err = load_panel(f.path(), DropoutMode::Auto).unwrap_err().to_string();
        assert!(err.contains("lines 2 and 3"), "{err}");
    }

    #[test]
    fn unparseable_cell_located() {
        let f = write_tmp("id,time,x\na,1,1\na,2,oops\n");
        let err = load_panel(f.path(), DropoutMode::Auto).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("'x'"), "{err}");
    }

    #[test]
    fn dropout_modes() {
        let body = "id,time,x,dropout\na,1,1,0\na,2,NA,0\na,3,NA,0\nb,1,1,0\nb,2,2,0\nb,3,NA,1\n";
        let f = write_tmp(body);
        let auto = load_panel(f.path(), DropoutMode::Auto).unwrap();
        assert_eq!(auto.dropout, vec![Some(1), Some(2)]);
        let col = load_panel(f.path(), DropoutMode::Column).unwrap();
        assert_eq!(col.dropout, vec![None, Some(2)]);
        let off = load_panel(f.path(), DropoutMode::Off).unwrap();
        assert_eq!(off.dropout, vec![None, None]);
    }

    #[test]
    fn numeric_ids_sort_numerically() {
        let f = write_tmp("id,time,x\n10,1,1\n10,2,1\n2,1,5\n2,2,5\n");
        let d = load_panel(f.path(), DropoutMode::Off).unwrap();
        assert_eq!(d.ids, vec!["2", "10"]);
    }

    #[test]
    fn round_trip_is_exact() {
        let values = vec![0.1, 1.0 / 3.0, -2.5e-10, 7.0, f64::NAN, 1e300, 3.0, 4.0];
        let mask = vec![false, false, false, false, true, false, true, true];
        let mut d = PanelDataset::new(2, 2, 2, values, mask, vec![None, Some(1)]).unwrap();
        d.times = vec![0.5, 2.0];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_panel(f.path(), &d).unwrap();
        let back = load_panel(f.path(), DropoutMode::Column).unwrap();
        assert_eq!(back.mask, d.mask);
        assert_eq!(back.dropout, d.dropout);
        assert_eq!(back.times, d.times);
        for (a, b) in back.values.iter().zip(&d.values) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }
}
