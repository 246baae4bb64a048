//! Datasets, CSV ingestion, stratified splits, standardization, synthetic
//! generators and trade-off result files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{one_hot, Tensor};

/// Samples with a utility label and a privacy label each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `N x d`, one sample per row.
    pub x: Tensor,
    pub utility: Vec<usize>,
    pub privacy: Vec<usize>,
    pub utility_classes: Vec<String>,
    pub privacy_classes: Vec<String>,
    pub feature_names: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    /// Checks that labels and features agree in length and range.
    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if self.utility.len() != n || self.privacy.len() != n {
            return Err(contract(format!(
                "{n} samples but {} utility and {} privacy labels",
                self.utility.len(),
                self.privacy.len()
            )));
        }
        if self.utility.iter().any(|&u| u >= self.utility_classes.len())
            || self.privacy.iter().any(|&p| p >= self.privacy_classes.len())
        {
            return Err(contract("label index outside the class list"));
        }
        if self.feature_names.len() != self.x.cols() {
            return Err(contract("feature name count differs from feature count"));
        }
        self.x.ensure_finite("dataset features")
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// One-hot utility labels, `N x C_u`.
    pub fn y(&self) -> Tensor {
        one_hot(&self.utility, self.utility_classes.len())
    }

    /// One-hot privacy labels, `N x L`.
    pub fn p(&self) -> Tensor {
        one_hot(&self.privacy, self.privacy_classes.len())
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            utility: idx.iter().map(|&i| self.utility[i]).collect(),
            privacy: idx.iter().map(|&i| self.privacy[i]).collect(),
            utility_classes: self.utility_classes.clone(),
            privacy_classes: self.privacy_classes.clone(),
            feature_names: self.feature_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Same dataset with new features.
    pub fn with_features(&self, x: Tensor) -> Dataset {
        Dataset {
            feature_names: (0..x.cols()).map(|j| format!("f{j}")).collect(),
            x,
            ..self.clone()
        }
    }
}

/// Column layout of a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    /// Feature columns; `None` takes every column except the two labels.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    pub utility: String,
    pub privacy: String,
}

impl CsvSchema {
    pub fn new(utility: &str, privacy: &str) -> Self {
        Self {
            features: None,
            utility: utility.to_string(),
            privacy: privacy.to_string(),
        }
    }
}

/// Class names in sorted order: numerically when every name parses as a
/// number, lexicographically otherwise.
fn sorted_classes(values: &[String]) -> Vec<String> {
    let set: BTreeSet<&String> = values.iter().collect();
    let mut out: Vec<String> = set.into_iter().cloned().collect();
    if out.iter().all(|v| v.trim().parse::<f64>().is_ok()) {
        out.sort_by(|a, b| {
            let (x, y) = (a.trim().parse::<f64>().unwrap(), b.trim().parse::<f64>().unwrap());
            x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.cmp(b))
        });
    }
    out
}

fn encode(values: &[String]) -> (Vec<usize>, Vec<String>) {
    let classes = sorted_classes(values);
    let index: BTreeMap<&String, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    (values.iter().map(|v| index[v]).collect(), classes)
}

/// Reads a dataset with a header row. Labels are categorical and encoded by
/// sorted class name.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Schema(format!("{} has no header row", path.display())));
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let ucol = find(&schema.utility)?;
    let pcol = find(&schema.privacy)?;
    let fcols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&j| j != ucol && j != pcol).collect(),
    };
    if fcols.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut ulab = Vec::new();
    let mut plab = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        for &j in &fcols {
            let field = rec.get(j).unwrap_or("").trim();
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("column `{}`: `{field}` is not a number", headers[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    msg: format!("column `{}` is not finite", headers[j]),
                });
            }
            data.push(v);
        }
        ulab.push(rec.get(ucol).unwrap_or("").trim().to_string());
        plab.push(rec.get(pcol).unwrap_or("").trim().to_string());
    }
    if ulab.is_empty() {
        return Err(Error::Schema(format!("{} has no data rows", path.display())));
    }
    let (utility, utility_classes) = encode(&ulab);
    let (privacy, privacy_classes) = encode(&plab);
    let ds = Dataset {
        x: Tensor::from_vec(ulab.len(), fcols.len(), data)?,
        utility,
        privacy,
        utility_classes,
        privacy_classes,
        feature_names: fcols.iter().map(|&j| headers[j].clone()).collect(),
        provenance: path.display().to_string(),
    };
    Ok(ds)
}

/// Writes features and labels with columns `<features>,utility,privacy`.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let mut header = ds.feature_names.clone();
    header.push("utility".into());
    header.push("privacy".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        rec.push(ds.utility_classes[ds.utility[i]].clone());
        rec.push(ds.privacy_classes[ds.privacy[i]].clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Splits each stratum so the test side gets `round(test_fraction * n)` of
/// its samples. Strata are privacy classes, or (utility, privacy) pairs when
/// `joint` is set.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64, joint: bool) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(contract(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..ds.len() {
        let key = (if joint { ds.utility[i] } else { 0 }, ds.privacy[i]);
        strata.entry(key).or_default().push(i);
    }
    let bad: Vec<String> = strata
        .iter()
        .filter(|(_, v)| v.len() < 2)
        .map(|((u, p), _)| {
            if joint {
                format!("({}, {})", ds.utility_classes[*u], ds.privacy_classes[*p])
            } else {
                ds.privacy_classes[*p].clone()
            }
        })
        .collect();
    if !bad.is_empty() {
        return Err(contract(format!("strata with fewer than 2 samples: {}", bad.join(", "))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for idx in strata.values() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Per-feature affine map fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Zero mean, unit variance per feature; constant features get the
    /// identity map.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = x.dims();
        if n == 0 {
            return Err(contract("cannot standardize an empty training set"));
        }
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let col = x.column_values(j);
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 * m.abs().max(1.0) {
                mean[j] = m;
                scale[j] = var.sqrt();
            }
        }
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.mean[j]) / self.scale[j];
        }
        out
    }

    pub fn inverse(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = *v * self.scale[j] + self.mean[j];
        }
        out
    }
}

/// Standardizes both splits with statistics from `train`.
pub fn standardize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Standardizer)> {
    let s = Standardizer::fit(&train.x)?;
    let tr = Dataset {
        x: s.apply(&train.x),
        ..train.clone()
    };
    let te = Dataset {
        x: s.apply(&test.x),
        ..test.clone()
    };
    Ok((tr, te, s))
}

/// How privacy classes are written into their subspace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyEncoding {
    /// Class-specific mean offsets.
    Linear,
    /// Class `l` sits at `±m_l` on axis `l mod k`, with signs balanced inside
    /// each class so every class mean is zero.
    SignSymmetric,
}

fn default_angle() -> f64 {
    90.0
}

fn default_one() -> f64 {
    1.0
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub utility_classes: usize,
    pub privacy_classes: usize,
    pub utility_dim: usize,
    pub privacy_dim: usize,
    /// Angle between the utility and privacy subspaces, in degrees.
    #[serde(default = "default_angle")]
    pub overlap_angle: f64,
    pub encoding: PrivacyEncoding,
    pub noise: f64,
    pub samples: usize,
    pub seed: u64,
    /// Distance scale of utility class centers.
    #[serde(default = "default_one")]
    pub utility_scale: f64,
    /// Distance scale of privacy codes.
    #[serde(default = "default_one")]
    pub privacy_scale: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, msg: String| Error::Config {
            key: format!("synthetic.{k}"),
            msg,
        };
        if self.utility_dim == 0 || self.privacy_dim == 0 || self.utility_dim + self.privacy_dim > self.dim {
            return Err(key(
                "dim",
                format!(
                    "utility ({}) plus privacy ({}) subspace dimensions must be positive and fit in {}",
                    self.utility_dim, self.privacy_dim, self.dim
                ),
            ));
        }
        if self.utility_classes < 2 || self.privacy_classes < 2 {
            return Err(key("classes", "need at least two utility and two privacy classes".into()));
        }
        if !code_fits(self.utility_classes, self.utility_dim) {
            return Err(key("utility_dim", format!("{} classes do not fit in {} dimensions", self.utility_classes, self.utility_dim)));
        }
        if self.encoding == PrivacyEncoding::Linear && !code_fits(self.privacy_classes, self.privacy_dim) {
            return Err(key("privacy_dim", format!("{} classes do not fit in {} dimensions", self.privacy_classes, self.privacy_dim)));
        }
        if !(self.noise >= 0.0) {
            return Err(key("noise", "must be non-negative".into()));
        }
        if !(0.0..=90.0).contains(&self.overlap_angle) {
            return Err(key("overlap_angle", "must be within [0, 90] degrees".into()));
        }
        if self.samples < self.utility_classes * self.privacy_classes * 2 {
            return Err(key("samples", "too few samples to cover every label pair twice".into()));
        }
        Ok(())
    }
}

fn code_fits(classes: usize, dim: usize) -> bool {
    classes <= dim || (dim < usize::BITS as usize && classes <= 1usize << dim)
}

/// Class code: a basis vector when there are enough dimensions, otherwise a
/// `±1` pattern from the binary digits of the class index.
fn class_code(c: usize, classes: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if classes <= dim {
        v[c] = 1.0;
    } else {
        for (b, x) in v.iter_mut().enumerate() {
            *x = if (c >> b) & 1 == 1 { 1.0 } else { -1.0 };
        }
    }
    v
}

/// Orthonormal basis from Gram-Schmidt on a Gaussian matrix (columns).
fn random_basis(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Draws a synthetic dataset. Utility classes are Gaussian clusters in a
/// utility subspace, privacy classes are encoded in a second subspace, and
/// isotropic noise is added everywhere. Label pairs are balanced.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let basis = random_basis(d, &mut rng);
    let utility_dirs: Vec<&Vec<f64>> = basis[..spec.utility_dim].iter().collect();
    let theta = spec.overlap_angle.to_radians();
    let privacy_dirs: Vec<Vec<f64>> = (0..spec.privacy_dim)
        .map(|j| {
            let own = &basis[spec.utility_dim + j];
            let shared = &basis[j % spec.utility_dim];
            own.iter().zip(shared).map(|(a, b)| theta.sin() * a + theta.cos() * b).collect()
        })
        .collect();

    let n = spec.samples;
    let (cu, cl) = (spec.utility_classes, spec.privacy_classes);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut utility = vec![0; n];
    let mut privacy = vec![0; n];
    // balanced label pairs, then alternating signs within each privacy class
    let mut signs = vec![1.0; n];
    let mut seen = vec![0usize; cl];
    for (k, &i) in order.iter().enumerate() {
        utility[i] = k % cu;
        privacy[i] = (k / cu) % cl;
    }
    for i in 0..n {
        let l = privacy[i];
        signs[i] = if seen[l] % 2 == 0 { 1.0 } else { -1.0 };
        seen[l] += 1;
    }

    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let mut x = vec![0.0; d];
        let ucode = class_code(utility[i], cu, spec.utility_dim);
        for (c, dir) in ucode.iter().zip(&utility_dirs) {
            for (xv, dv) in x.iter_mut().zip(dir.iter()) {
                *xv += spec.utility_scale * c * dv;
            }
        }
        let pcode: Vec<f64> = match spec.encoding {
            PrivacyEncoding::Linear => class_code(privacy[i], cl, spec.privacy_dim),
            PrivacyEncoding::SignSymmetric => {
                let mut v = vec![0.0; spec.privacy_dim];
                let axis = privacy[i] % spec.privacy_dim;
                let level = (privacy[i] / spec.privacy_dim) as f64 + 1.0;
                v[axis] = signs[i] * level;
                v
            }
        };
        for (c, dir) in pcode.iter().zip(&privacy_dirs) {
            for (xv, dv) in x.iter_mut().zip(dir.iter()) {
                *xv += spec.privacy_scale * c * dv;
            }
        }
        for xv in x.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *xv += spec.noise * e;
        }
        data.extend(x);
    }
    Ok(Dataset {
        x: Tensor::from_vec(n, d, data)?,
        utility,
        privacy,
        utility_classes: (0..cu).map(|c| format!("u{c}")).collect(),
        privacy_classes: (0..cl).map(|c| format!("s{c}")).collect(),
        feature_names: (0..d).map(|j| format!("f{j}")).collect(),
        provenance: format!("synthetic seed {}", spec.seed),
    })
}

/// One point of a utility/privacy trade-off curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub lambda_p: f64,
    pub utility_accuracy: f64,
    /// Maximum over `adversaries`.
    pub privacy_accuracy: f64,
    /// Test accuracy per adversary, in suite order.
    pub adversaries: Vec<(String, f64)>,
    pub seed: u64,
    /// Set when the run failed; accuracies are then NaN.
    #[serde(default)]
    pub error: Option<String>,
}

/// Writes the trade-off CSV: `lambda_p,utility_acc,privacy_acc,<member>_acc...,seed`.
pub fn write_results(points: &[TradeoffPoint], path: &Path) -> Result<()> {
    let first = points.first().ok_or_else(|| contract("no trade-off points to write"))?;
    let members: Vec<String> = match points.iter().find(|p| p.error.is_none()) {
        Some(p) => p.adversaries.iter().map(|(m, _)| m.clone()).collect(),
        None => first.adversaries.iter().map(|(m, _)| m.clone()).collect(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = vec!["lambda_p".to_string(), "utility_acc".into(), "privacy_acc".into()];
    header.extend(members.iter().map(|m| format!("{m}_acc")));
    header.push("seed".into());
    writeln!(out, "{}", header.join(","))?;
    for p in points {
        let mut row = vec![fmt17(p.lambda_p), fmt17(p.utility_accuracy), fmt17(p.privacy_accuracy)];
        for m in &members {
            let v = p.adversaries.iter().find(|(k, _)| k == m).map_or(f64::NAN, |(_, v)| *v);
            row.push(fmt17(v));
        }
        row.push(p.seed.to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads a file written by [`write_results`].
pub fn read_results(path: &Path) -> Result<Vec<TradeoffPoint>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let expect = ["lambda_p", "utility_acc", "privacy_acc"];
    if headers.len() < 4 || headers[..3] != expect || headers.last().map(String::as_str) != Some("seed") {
        return Err(Error::Schema(format!("unexpected results header {headers:?}")));
    }
    let members: Vec<String> = headers[3..headers.len() - 1]
        .iter()
        .map(|h| h.strip_suffix("_acc").unwrap_or(h).to_string())
        .collect();
    let mut points = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j).unwrap_or("").parse().map_err(|_| Error::Parse {
                row: k + 1,
                msg: format!("column `{}` is not a number", headers[j]),
            })
        };
        let seed = rec.get(headers.len() - 1).unwrap_or("").parse().map_err(|_| Error::Parse {
            row: k + 1,
            msg: "seed is not an integer".into(),
        })?;
        let adversaries = members
            .iter()
            .enumerate()
            .map(|(m, name)| Ok((name.clone(), num(3 + m)?)))
            .collect::<Result<Vec<_>>>()?;
        points.push(TradeoffPoint {
            lambda_p: num(0)?,
            utility_accuracy: num(1)?,
            privacy_accuracy: num(2)?,
            adversaries,
            seed,
            error: None,
        });
    }
    Ok(points)
}
