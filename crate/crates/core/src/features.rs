//! Meta-features of trained models.
//!
//! Three feature blocks, composable by union:
//!
//! * `W_i` — 14 weight statistics of layer i (mean, population std and the
//!   0/25/50/75/100 quantiles, for the kernel and then the bias). `W-1`
//!   selects the last layer under an architecture-independent column schema,
//!   which is what makes cross-architecture transfer possible.
//! * `lambda` — hyperparameters: sampling ratio, optimization steps,
//!   learning rate, and one-hot activation / init scheme / optimizer. The
//!   noise multiplier and clip norm are deliberately excluded: both exist
//!   only under DP training, so either would leak the label outright.
//! * `perf` — train/test accuracy and cross-entropy.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accountant;
use crate::error::{Error, Result};
use crate::nn::{Activation, ArchKind, InitScheme};
use crate::optim::OptimizerKind;
use crate::tensor::Tensor;
use crate::zoo::{HyperParams, TrainedModelRecord, ZooManifest};

/// Number of statistics per layer block.
pub const LAYER_STAT_COUNT: usize = 14;

/// A layer selector; `Last` resolves per architecture (W2 for the FCN, W4
/// for the CNN) but keeps a shared column schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerSel {
    /// 1-based layer index, as in W1..W4.
    Index(usize),
    Last,
}

/// Which feature blocks to extract.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSetSpec {
    pub layers: BTreeSet<LayerSel>,
    pub lambda: bool,
    pub perf: bool,
}

impl FeatureSetSpec {
    pub fn last_layer() -> Self {
        Self {
            layers: BTreeSet::from([LayerSel::Last]),
            lambda: false,
            perf: false,
        }
    }

    pub fn lambda_only() -> Self {
        Self {
            layers: BTreeSet::new(),
            lambda: true,
            perf: false,
        }
    }

    pub fn perf_only() -> Self {
        Self {
            layers: BTreeSet::new(),
            lambda: false,
            perf: true,
        }
    }

    pub fn with_lambda(mut self) -> Self {
        self.lambda = true;
        self
    }

    pub fn with_perf(mut self) -> Self {
        self.perf = true;
        self
    }

    /// Parse a spec like `"W-1+perf"`, `"W1+W2"` or `"lambda"`. Tokens are
    /// joined by `+`: `W<k>` (1-based), `W-1`, `lambda`, `perf`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = Self {
            layers: BTreeSet::new(),
            lambda: false,
            perf: false,
        };
        for token in s.split('+') {
            let t = token.trim();
            match t.to_ascii_lowercase().as_str() {
                "lambda" => spec.lambda = true,
                "perf" => spec.perf = true,
                "w-1" => {
                    spec.layers.insert(LayerSel::Last);
                }
                w if w.starts_with('w') => {
                    let idx: usize = w[1..].parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad feature token {t:?}"))
                    })?;
                    if idx == 0 {
                        return Err(Error::InvalidArgument("layer indices are 1-based".into()));
                    }
                    spec.layers.insert(LayerSel::Index(idx));
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown feature token {t:?} (expected W<k>, W-1, lambda or perf)"
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() && !self.lambda && !self.perf {
            return Err(Error::InvalidArgument(
                "feature set must include at least one source".into(),
            ));
        }
        Ok(())
    }

    /// True when the column schema does not depend on the architecture.
    pub fn is_arch_portable(&self) -> bool {
        self.layers.iter().all(|l| matches!(l, LayerSel::Last))
    }
}

impl std::fmt::Display for FeatureSetSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        for l in &self.layers {
            match l {
                LayerSel::Index(i) => parts.push(format!("W{i}")),
                LayerSel::Last => parts.push("W-1".into()),
            }
        }
        if self.lambda {
            parts.push("lambda".into());
        }
        if self.perf {
            parts.push("perf".into());
        }
        write!(f, "{}", parts.join("+"))
    }
}

/// Rows of meta-features with binary DP labels and record provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub column_names: Vec<String>,
    /// Row-major [rows x columns].
    pub values: Vec<f64>,
    /// 1 = trained with DP, 0 = without.
    pub labels: Vec<u8>,
    pub provenance: Vec<String>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols()..(i + 1) * self.n_cols()]
    }

    /// A new matrix with the selected rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let c = self.n_cols();
        let mut values = Vec::with_capacity(indices.len() * c);
        let mut labels = Vec::with_capacity(indices.len());
        let mut provenance = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            provenance.push(self.provenance[i].clone());
        }
        FeatureMatrix {
            column_names: self.column_names.clone(),
            values,
            labels,
            provenance,
        }
    }

    /// Write as CSV: record_id, dp_label, then one column per feature.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["record_id".to_string(), "dp_label".to_string()];
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![self.provenance[i].clone(), self.labels[i].to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv(path: &Path) -> Result<FeatureMatrix> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "record_id" || &header[1] != "dp_label" {
            return Err(Error::SchemaMismatch(
                "feature CSV must start with record_id, dp_label".into(),
            ));
        }
        let column_names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut provenance = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            provenance.push(rec[0].to_string());
            labels.push(rec[1].parse::<u8>().map_err(|e| {
                Error::SchemaMismatch(format!("bad dp_label {:?}: {e}", &rec[1]))
            })?);
            for v in rec.iter().skip(2) {
                values.push(v.parse::<f64>().map_err(|e| {
                    Error::SchemaMismatch(format!("bad feature value {v:?}: {e}"))
                })?);
            }
        }
        Ok(FeatureMatrix {
            column_names,
            values,
            labels,
            provenance,
        })
    }
}

/// The 14 summary statistics of one layer: for the kernel and then the
/// bias, [mean, population std, q0, q25, q50, q75, q100].
pub fn layer_stats(kernel: &Tensor<f32>, bias: &Tensor<f32>) -> Result<[f64; LAYER_STAT_COUNT]> {
    if kernel.is_empty() || bias.is_empty() {
        return Err(Error::InvalidArgument("empty tensor in layer_stats".into()));
    }
    let mut out = [0.0; LAYER_STAT_COUNT];
    out[..7].copy_from_slice(&tensor_stats(kernel));
    out[7..].copy_from_slice(&tensor_stats(bias));
    Ok(out)
}

fn tensor_stats(t: &Tensor<f32>) -> [f64; 7] {
    let mut xs: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    [
        mean,
        var.sqrt(),
        quantile_sorted(&xs, 0.0),
        quantile_sorted(&xs, 0.25),
        quantile_sorted(&xs, 0.5),
        quantile_sorted(&xs, 0.75),
        quantile_sorted(&xs, 1.0),
    ]
}

/// Linear interpolation between order statistics: h = (n-1) p.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

const ACTIVATIONS: [Activation; 2] = [Activation::Tanh, Activation::ReLU];
const OPTIMIZERS: [OptimizerKind; 2] = [OptimizerKind::Sgd, OptimizerKind::Adam];

fn lambda_column_names() -> Vec<String> {
    let mut names = vec![
        "lambda_sampling_ratio".to_string(),
        "lambda_num_steps".to_string(),
        "lambda_learning_rate".to_string(),
    ];
    names.push("lambda_act_tanh".into());
    names.push("lambda_act_relu".into());
    for s in ["glorot_normal", "normal", "truncated_normal", "orthogonal", "he_normal"] {
        names.push(format!("lambda_init_{s}"));
    }
    names.push("lambda_opt_sgd".into());
    names.push("lambda_opt_adam".into());
    names
}

/// Hyperparameter features. The sampling ratio is the effective batch size
/// over the effective training-set size; steps come from the accountant's
/// step formula. Noise multiplier and clip norm never appear.
pub fn encode_lambda(hp: &HyperParams, dataset_size: usize) -> Vec<f64> {
    let s_eff = accountant::effective_train_size(dataset_size, hp.train_fraction).max(1);
    let b_eff = hp.batch_size.min(s_eff);
    let steps = accountant::steps(dataset_size, hp.batch_size, hp.epochs, hp.train_fraction);
    let mut out = vec![
        b_eff as f64 / s_eff as f64,
        steps as f64,
        hp.learning_rate,
    ];
    for a in ACTIVATIONS {
        out.push(if hp.activation == a { 1.0 } else { 0.0 });
    }
    for s in InitScheme::ALL {
        out.push(if hp.init_scheme == s { 1.0 } else { 0.0 });
    }
    for o in OPTIMIZERS {
        out.push(if hp.optimizer == o { 1.0 } else { 0.0 });
    }
    out
}

/// Performance features: [train_acc, test_acc, train_loss, test_loss].
pub fn encode_perf(record: &TrainedModelRecord) -> [f64; 4] {
    [
        record.train_accuracy,
        record.test_accuracy,
        record.train_loss,
        record.test_loss,
    ]
}

fn perf_column_names() -> Vec<String> {
    ["train_accuracy", "test_accuracy", "train_loss", "test_loss"]
        .iter()
        .map(|s| format!("perf_{s}"))
        .collect()
}

fn layer_block_names(prefix: &str) -> Vec<String> {
    let mut names = Vec::with_capacity(LAYER_STAT_COUNT);
    for part in ["kernel", "bias"] {
        for stat in ["mean", "std", "q0", "q25", "q50", "q75", "q100"] {
            names.push(format!("{prefix}_{part}_{stat}"));
        }
    }
    names
}

/// Build the feature matrix of a zoo for one feature-set spec.
///
/// Records must share an architecture kind; rows are ordered by record id.
/// `W-1` blocks use the architecture-agnostic `wlast_*` column names, so
/// matrices from different architectures are schema-compatible.
pub fn build_matrix(zoo: &ZooManifest, spec: &FeatureSetSpec) -> Result<FeatureMatrix> {
    spec.validate()?;
    let records = &zoo.records;
    if records.is_empty() {
        return Err(Error::DegenerateData("zoo has no records".into()));
    }
    let kind = records[0].architecture.kind;
    if records.iter().any(|r| r.architecture.kind != kind) {
        return Err(Error::InvalidArgument(
            "records mix architectures; layer indices would be ambiguous".into(),
        ));
    }
    let n_layers = records[0].architecture.num_layers();
    for sel in &spec.layers {
        if let LayerSel::Index(i) = sel {
            if *i > n_layers {
                return Err(Error::InvalidArgument(format!(
                    "layer W{i} does not exist in a {kind:?} ({n_layers} layers)"
                )));
            }
        }
    }

    let mut column_names = Vec::new();
    for sel in &spec.layers {
        match sel {
            LayerSel::Index(i) => column_names.extend(layer_block_names(&format!("w{i}"))),
            LayerSel::Last => column_names.extend(layer_block_names("wlast")),
        }
    }
    if spec.lambda {
        column_names.extend(lambda_column_names());
    }
    if spec.perf {
        column_names.extend(perf_column_names());
    }

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].record_id.cmp(&records[b].record_id));

    let mut values = Vec::with_capacity(records.len() * column_names.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut provenance = Vec::with_capacity(records.len());
    for &ri in &order {
        let r = &records[ri];
        for sel in &spec.layers {
            let li = match sel {
                LayerSel::Index(i) => i - 1,
                LayerSel::Last => r.weights.layers.len() - 1,
            };
            let layer = &r.weights.layers[li];
            values.extend(layer_stats(&layer.kernel, &layer.bias)?);
        }
        if spec.lambda {
            values.extend(encode_lambda(&r.hyperparams, zoo.header.dataset_train_size));
        }
        if spec.perf {
            values.extend(encode_perf(r));
        }
        labels.push(u8::from(r.hyperparams.dp_enabled));
        provenance.push(r.record_id.clone());
    }

    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData(
            "non-finite feature value; zoo contains a corrupt record".into(),
        ));
    }
    Ok(FeatureMatrix {
        column_names,
        values,
        labels,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: Vec<f32>) -> Tensor<f32> {
        let n = values.len();
        Tensor::new(vec![n], values).unwrap()
    }

    #[test]
    fn constant_tensor_stats_degenerate() {
        let stats = layer_stats(&t(vec![3.0; 20]), &t(vec![3.0; 4])).unwrap();
        for (i, s) in stats.iter().enumerate() {
            match i % 7 {
                1 => assert_eq!(*s, 0.0),
                _ => assert_eq!(*s, 3.0),
            }
        }
    }

    #[test]
    fn quantiles_use_linear_interpolation() {
        let stats = layer_stats(&t(vec![1.0, 2.0, 3.0, 4.0]), &t(vec![0.0])).unwrap();
        assert_eq!(stats[2], 1.0); // q0
        assert!((stats[3] - 1.75).abs() < 1e-12); // q25
        assert!((stats[4] - 2.5).abs() < 1e-12); // q50
        assert!((stats[5] - 3.25).abs() < 1e-12); // q75
        assert_eq!(stats[6], 4.0); // q100
    }

    #[test]
    fn stats_match_sort_oracle_on_random_data() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(4, 0);
        let xs: Vec<f32> = (0..1000).map(|_| rng.random_range(-2.0..2.0)).collect();
        let stats = layer_stats(&t(xs.clone()), &t(vec![0.0])).unwrap();

        // Independent oracle: sort, then interpolate positions by hand.
        let mut sorted: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let mean: f64 = sorted.iter().sum::<f64>() / n as f64;
        let std = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((stats[0] - mean).abs() < 1e-6);
        assert!((stats[1] - std).abs() < 1e-6);
        for (k, p) in [(2, 0.0), (3, 0.25), (4, 0.5), (5, 0.75), (6, 1.0)] {
            let h = (n - 1) as f64 * p;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            let expect = sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]);
            assert!((stats[k] - expect).abs() < 1e-6, "quantile p={p}");
        }
    }

    #[test]
    fn stats_are_permutation_invariant() {
        let a = layer_stats(&t(vec![5.0, -1.0, 2.0, 0.5]), &t(vec![1.0, 2.0])).unwrap();
        let b = layer_stats(&t(vec![0.5, 2.0, 5.0, -1.0]), &t(vec![2.0, 1.0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_shift_moves_mean_and_quantiles_only() {
        let base = vec![0.3f32, -0.7, 1.1, 0.0, 0.25];
        let shifted: Vec<f32> = base.iter().map(|v| v + 2.0).collect();
        let a = layer_stats(&t(base), &t(vec![0.0])).unwrap();
        let b = layer_stats(&t(shifted), &t(vec![0.0])).unwrap();
        assert!((b[0] - (a[0] + 2.0)).abs() < 1e-6);
        assert!((b[1] - a[1]).abs() < 1e-6);
        for k in 2..7 {
            assert!((b[k] - (a[k] + 2.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_tensor_is_rejected() {
        let empty = Tensor::<f32>::zeros(vec![0]);
        assert!(layer_stats(&empty, &t(vec![0.0])).is_err());
    }

    #[test]
    fn spec_parsing_round_trips() {
        for s in ["W-1", "W-1+perf", "W1+W2", "W-1+lambda+perf", "lambda", "perf"] {
            let spec = FeatureSetSpec::parse(s).unwrap();
            assert_eq!(spec.to_string(), s, "round trip of {s}");
        }
        assert!(FeatureSetSpec::parse("").is_err());
        assert!(FeatureSetSpec::parse("W0").is_err());
        assert!(FeatureSetSpec::parse("sigma").is_err());
    }

    #[test]
    fn lambda_columns_exclude_noise_and_clip() {
        for name in lambda_column_names() {
            assert!(!name.contains("noise"));
            assert!(!name.contains("clip"));
        }
        assert_eq!(lambda_column_names().len(), 12);
    }

    #[test]
    fn lambda_encoding_basics() {
        let mut hp = HyperParams::placeholder();
        hp.batch_size = 100;
        hp.train_fraction = 1.0;
        hp.epochs = 5;
        hp.learning_rate = 0.05;
        hp.activation = Activation::ReLU;
        let v = encode_lambda(&hp, 1000);
        assert!((v[0] - 0.1).abs() < 1e-12); // sampling ratio
        assert_eq!(v[1], 50.0); // steps
        assert_eq!(v[2], 0.05);
        assert_eq!(v[3], 0.0); // tanh
        assert_eq!(v[4], 1.0); // relu
    }
}
