//! Outlier measurements: kurtosis, infinity norms, 6σ outlier counts and
//! attention-pattern dumps.
//!
//! External outputs label layers and heads 1-based; hidden dimensions and
//! token positions stay 0-based.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, AttentionTrace};
use crate::error::{Error, Result};
use crate::model::{forward, Batch, ModelConfig, ModelParams};
use crate::sites::NoHook;
use crate::tensor::{Tape, Tensor};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SIGMA_MULT: f64 = 6.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KurtosisConvention {
    /// `m4 / m2²`; a normal distribution scores 3.
    #[default]
    Pearson,
    /// Pearson minus 3.
    Excess,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Mean and central moments. The mean gets one correction pass and the
/// sums are compensated, so kurtosis survives large offsets and scalings
/// to within a few ulps.
fn moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mut mean = compensated_sum(x.iter().copied()) / n;
    mean += compensated_sum(x.iter().map(|v| v - mean)) / n;
    let m2 = compensated_sum(x.iter().map(|v| (v - mean).powi(2)));
    let m4 = compensated_sum(x.iter().map(|v| (v - mean).powi(4)));
    (mean, m2 / n, m4 / n)
}

/// Pearson kurtosis with population moments over all elements.
pub fn kurtosis(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::Degenerate("kurtosis needs at least two elements".into()));
    }
    let (_, m2, m4) = moments(x);
    if m2 == 0.0 {
        return Err(Error::Degenerate("kurtosis of a zero-variance tensor".into()));
    }
    Ok(m4 / (m2 * m2))
}

pub fn kurtosis_as(x: &[f64], convention: KurtosisConvention) -> Result<f64> {
    let k = kurtosis(x)?;
    Ok(match convention {
        KurtosisConvention::Pearson => k,
        KurtosisConvention::Excess => k - 3.0,
    })
}

/// Mean over sequences of the largest `|x|` across that sequence's layers.
/// `per_sequence[s][l]` is the activation tensor of layer `l`.
pub fn max_inf_norm(per_sequence: &[Vec<Tensor>]) -> Result<f64> {
    if per_sequence.is_empty() {
        return Err(Error::Contract("max_inf_norm needs at least one sequence".into()));
    }
    let total: f64 = per_sequence
        .iter()
        .map(|layers| layers.iter().map(Tensor::max_abs).fold(0.0, f64::max))
        .sum();
    Ok(total / per_sequence.len() as f64)
}

/// `(token, dim)` entries of `x: [T, d]` farther than `sigma_mult` standard
/// deviations from the tensor mean. Zero variance yields no outliers.
pub fn detect_outliers(x: &Tensor, sigma_mult: f64) -> Result<Vec<(usize, usize)>> {
    let &[_, d] = x.shape() else {
        return Err(Error::Shape {
            op: "detect_outliers",
            detail: format!("expected [T, d_model], got {:?}", x.shape()),
        });
    };
    if x.numel() == 0 {
        return Ok(Vec::new());
    }
    let (mean, m2, _) = moments(x.data());
    if m2 == 0.0 {
        return Ok(Vec::new());
    }
    let limit = sigma_mult * m2.sqrt();
    Ok(x.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| (v - mean).abs() > limit)
        .map(|(i, _)| (i / d, i % d))
        .collect())
}

/// One hidden dimension that produced outliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierDim {
    /// 1-based.
    pub layer: usize,
    pub dim: usize,
    /// 1-based attention head owning `dim`.
    pub head: usize,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub schema_version: u32,
    pub kurtosis_convention: KurtosisConvention,
    pub sigma_mult: f64,
    pub n_sequences: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// Kurtosis per layer, averaged over sequences.
    pub layer_kurtosis: Vec<f64>,
    pub avg_kurtosis: f64,
    pub max_inf_norm: f64,
    /// `[layer][dim]` outlier counts.
    pub dim_counts: Vec<Vec<u64>>,
    /// `[layer][token]` outlier counts.
    pub token_counts: Vec<Vec<u64>>,
    pub outlier_dims: Vec<OutlierDim>,
}

/// Accumulates per-sequence statistics into an [`OutlierReport`].
#[derive(Clone, Debug)]
pub struct OutlierHistogram {
    d_model: usize,
    d_head: usize,
    max_seq_len: usize,
    sigma_mult: f64,
    convention: KurtosisConvention,
    n_sequences: usize,
    kurtosis_sum: Vec<f64>,
    kurtosis_n: Vec<usize>,
    inf_norm_sum: f64,
    dim_counts: Vec<Vec<u64>>,
    token_counts: Vec<Vec<u64>>,
}

impl OutlierHistogram {
    pub fn new(n_layers: usize, d_model: usize, d_head: usize, max_seq_len: usize) -> Result<Self> {
        if d_head == 0 || d_model % d_head != 0 {
            return Err(Error::Contract(format!("d_head {d_head} does not divide d_model {d_model}")));
        }
        Ok(OutlierHistogram {
            d_model,
            d_head,
            max_seq_len,
            sigma_mult: DEFAULT_SIGMA_MULT,
            convention: KurtosisConvention::Pearson,
            n_sequences: 0,
            kurtosis_sum: vec![0.0; n_layers],
            kurtosis_n: vec![0; n_layers],
            inf_norm_sum: 0.0,
            dim_counts: vec![vec![0; d_model]; n_layers],
            token_counts: vec![vec![0; max_seq_len]; n_layers],
        })
    }

    pub fn with_sigma_mult(mut self, sigma_mult: f64) -> Self {
        self.sigma_mult = sigma_mult;
        self
    }

    pub fn with_convention(mut self, convention: KurtosisConvention) -> Self {
        self.convention = convention;
        self
    }

    /// Adds raw outlier positions for one layer of one sequence.
    pub fn add_outliers(&mut self, layer: usize, outliers: &[(usize, usize)]) -> Result<()> {
        let n_layers = self.dim_counts.len();
        if layer >= n_layers {
            return Err(Error::Contract(format!("layer {} out of range for {n_layers} layers", layer + 1)));
        }
        for &(t, d) in outliers {
            if d >= self.d_model || t >= self.max_seq_len {
                return Err(Error::Contract(format!("outlier ({t}, {d}) outside [{}, {}]", self.max_seq_len, self.d_model)));
            }
            self.dim_counts[layer][d] += 1;
            self.token_counts[layer][t] += 1;
        }
        Ok(())
    }

    /// Records one sequence given its per-layer `[T, d_model]` activations.
    pub fn add_sequence(&mut self, layers: &[Tensor]) -> Result<()> {
        if layers.len() != self.dim_counts.len() {
            return Err(Error::Contract(format!(
                "expected {} layers, got {}",
                self.dim_counts.len(),
                layers.len()
            )));
        }
        let mut seq_max = 0.0f64;
        for (l, x) in layers.iter().enumerate() {
            seq_max = seq_max.max(x.max_abs());
            // Constant tensors carry no kurtosis information; skip them.
            if let Ok(k) = kurtosis_as(x.data(), self.convention) {
                self.kurtosis_sum[l] += k;
                self.kurtosis_n[l] += 1;
            }
            let outliers = detect_outliers(x, self.sigma_mult)?;
            self.add_outliers(l, &outliers)?;
        }
        self.inf_norm_sum += seq_max;
        self.n_sequences += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<OutlierReport> {
        if self.n_sequences == 0 {
            return Err(Error::Contract("outlier report over an empty evaluation set".into()));
        }
        let layer_kurtosis: Vec<f64> = self
            .kurtosis_sum
            .iter()
            .zip(&self.kurtosis_n)
            .map(|(&s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect();
        let finite: Vec<f64> = layer_kurtosis.iter().copied().filter(|k| k.is_finite()).collect();
        let avg_kurtosis = if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        let mut outlier_dims = Vec::new();
        for (l, counts) in self.dim_counts.iter().enumerate() {
            for (dim, &count) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
                outlier_dims.push(OutlierDim { layer: l + 1, dim, head: dim / self.d_head + 1, count });
            }
        }
        Ok(OutlierReport {
            schema_version: REPORT_SCHEMA_VERSION,
            kurtosis_convention: self.convention,
            sigma_mult: self.sigma_mult,
            n_sequences: self.n_sequences,
            d_model: self.d_model,
            d_head: self.d_head,
            layer_kurtosis,
            avg_kurtosis,
            max_inf_norm: self.inf_norm_sum / self.n_sequences as f64,
            dim_counts: self.dim_counts.clone(),
            token_counts: self.token_counts.clone(),
            outlier_dims,
        })
    }
}

/// Aggregates per-sequence outlier lists `(layer, outliers)`.
pub fn outlier_histograms(
    n_layers: usize,
    d_model: usize,
    d_head: usize,
    max_seq_len: usize,
    detections: &[(usize, Vec<(usize, usize)>)],
) -> Result<(Vec<Vec<u64>>, Vec<Vec<u64>>, Vec<OutlierDim>)> {
    let mut h = OutlierHistogram::new(n_layers, d_model, d_head, max_seq_len)?;
    for (layer, outliers) in detections {
        h.add_outliers(*layer, outliers)?;
    }
    let mut dims = Vec::new();
    for (l, counts) in h.dim_counts.iter().enumerate() {
        for (dim, &count) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
            dims.push(OutlierDim { layer: l + 1, dim, head: dim / d_head + 1, count });
        }
    }
    Ok((h.dim_counts, h.token_counts, dims))
}

/// Runs `batches` through the model and measures the configured
/// attention-layer output of every layer and sequence.
pub fn analyze(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    batches: &[Batch],
    convention: KurtosisConvention,
) -> Result<OutlierReport> {
    analyze_with(params, cfg, batches, convention, DEFAULT_SIGMA_MULT)
}

/// [`analyze`] with a custom outlier threshold in standard deviations.
pub fn analyze_with(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    batches: &[Batch],
    convention: KurtosisConvention,
    sigma_mult: f64,
) -> Result<OutlierReport> {
    let mut hist = OutlierHistogram::new(cfg.n_layers, cfg.d_model, cfg.d_head(), cfg.max_seq_len)?
        .with_convention(convention)
        .with_sigma_mult(sigma_mult);
    for batch in batches {
        let mut tape = Tape::new();
        let pv = params.to_constants(&mut tape);
        let out = forward(&mut tape, &pv, cfg, &batch.inputs, &AttentionMask::default(), &mut NoHook, None)?;
        for s in 0..batch.inputs.len() {
            let layers = out
                .layers
                .iter()
                .map(|l| tape.value(l.attn_out).index_first(s))
                .collect::<Result<Vec<_>>>()?;
            hist.add_sequence(&layers)?;
        }
    }
    hist.finish()
}

impl OutlierReport {
    /// `layer,dim,head,count` over all (layer, dim) pairs.
    pub fn dim_histogram_csv(&self) -> String {
        let mut s = String::from("layer,dim,head,count\n");
        for (l, counts) in self.dim_counts.iter().enumerate() {
            for (d, c) in counts.iter().enumerate() {
                let _ = writeln!(s, "{},{d},{},{c}", l + 1, d / self.d_head + 1);
            }
        }
        s
    }

    /// `layer,token,count` over all (layer, token) pairs.
    pub fn token_histogram_csv(&self) -> String {
        let mut s = String::from("layer,token,count\n");
        for (l, counts) in self.token_counts.iter().enumerate() {
            for (t, c) in counts.iter().enumerate() {
                let _ = writeln!(s, "{},{t},{c}", l + 1);
            }
        }
        s
    }

    pub fn total_outliers(&self) -> u64 {
        self.dim_counts.iter().flatten().sum()
    }
}

fn matrix_csv(t: &Tensor) -> String {
    let (rows, cols) = (t.shape()[0], t.shape().get(1).copied().unwrap_or(1));
    let mut s = String::from("row");
    for c in 0..cols {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for r in 0..rows {
        let _ = write!(s, "{r}");
        for c in 0..cols {
            let _ = write!(s, ",{}", t.data()[r * cols + c]);
        }
        s.push('\n');
    }
    s
}

/// Attention pattern of layer `layer` (0-based) for one token sequence.
pub fn attention_trace(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    tokens: &[usize],
    layer: usize,
) -> Result<AttentionTrace> {
    if layer >= cfg.n_layers {
        return Err(Error::Contract(format!("layer {} out of range for {} layers", layer + 1, cfg.n_layers)));
    }
    let mut tape = Tape::new();
    let pv = params.to_constants(&mut tape);
    let out = forward(&mut tape, &pv, cfg, &[tokens.to_vec()], &AttentionMask::default(), &mut NoHook, None)?;
    out.layers[layer].attention.trace(&tape, 0)
}

/// Writes `P.csv` (`[T, T]`), `V.csv` and `PV.csv` (`[T, d_head]`) and, for
/// gated attention, `pi.csv` (`[T, 1]`) for one 0-based `head` into
/// `out_dir`. Each file has a header `row,0,1,..` and one line per row.
pub fn dump_attention_patterns(trace: &AttentionTrace, head: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if head >= trace.n_heads() {
        return Err(Error::Contract(format!("head {} out of range for {} heads", head + 1, trace.n_heads())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = vec![
        ("P.csv", trace.probs.index_first(head)?),
        ("V.csv", trace.values.index_first(head)?),
        ("PV.csv", trace.pv.index_first(head)?),
    ];
    if let Some(g) = &trace.gate {
        let pi = g.index_first(head)?;
        let n = pi.numel();
        files.push(("pi.csv", pi.reshape([n, 1])?));
    }
    let mut written = Vec::new();
    for (name, t) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, matrix_csv(&t)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionVariant, ClippedSoftmaxConfig, GateDesign, GatingConfig};
    use crate::model::{LnPlacement, MeasurePoint, Objective};
    use crate::testutil::rand_tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kurtosis_cases() {
        assert_eq!(kurtosis(&[-1.0, 1.0, -1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(kurtosis_as(&[-1.0, 1.0, -1.0, 1.0], KurtosisConvention::Excess).unwrap(), -2.0);
        assert!(matches!(kurtosis(&[2.0; 5]), Err(Error::Degenerate(_))));
        assert!(kurtosis(&[1.0]).is_err());
        let normal = rand_tensor(&[1_000_000], 1);
        assert!((kurtosis(normal.data()).unwrap() - 3.0).abs() < 0.1);
    }

    #[test]
    fn inf_norm_cases() {
        let t = |v: Vec<f64>| Tensor::from_vec(v);
        assert_eq!(max_inf_norm(&[vec![t(vec![-3.0, 2.0])]]).unwrap(), 3.0);
        assert_eq!(max_inf_norm(&[vec![t(vec![4.0]), t(vec![1.0])], vec![t(vec![-6.0])]]).unwrap(), 5.0);
        assert_eq!(max_inf_norm(&[vec![t(vec![0.0; 3])]]).unwrap(), 0.0);
        assert!(max_inf_norm(&[]).is_err());
    }

    #[test]
    fn outlier_cases() {
        let mut v = vec![0.0; 100];
        v[42] = 100.0;
        let x = Tensor::new([10, 10], v).unwrap();
        assert_eq!(detect_outliers(&x, 6.0).unwrap(), vec![(4, 2)]);
        assert!(detect_outliers(&Tensor::full([4, 4], 3.0), 6.0).unwrap().is_empty());
        let normal = rand_tensor(&[256, 64], 2);
        assert!(detect_outliers(&normal, 6.0).unwrap().is_empty());
    }

    #[test]
    fn histogram_cases() {
        let (dims, tokens, labels) = outlier_histograms(1, 768, 64, 8, &[(0, vec![(3, 180)])]).unwrap();
        assert_eq!(dims[0][180], 1);
        assert_eq!(dims[0].iter().sum::<u64>(), 1);
        assert_eq!(tokens[0][3], 1);
        assert_eq!(labels, vec![OutlierDim { layer: 1, dim: 180, head: 3, count: 1 }]);
        let (dims, _, labels) = outlier_histograms(1, 768, 64, 8, &[(0, vec![(3, 180)]), (0, vec![(3, 180)])]).unwrap();
        assert_eq!(dims[0][180], 2);
        assert_eq!(labels[0].count, 2);
        let (dims, tokens, labels) = outlier_histograms(2, 16, 4, 8, &[]).unwrap();
        assert!(dims.iter().flatten().chain(tokens.iter().flatten()).all(|&c| c == 0));
        assert!(labels.is_empty());
        assert!(outlier_histograms(1, 16, 4, 8, &[(0, vec![(0, 16)])]).is_err());
    }

    proptest! {
        #[test]
        fn invariances(seed in 0u64..1000, c in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0], shift in -100.0f64..100.0) {
            let mut x = rand_tensor(&[12, 8], seed);
            x.data_mut()[5] = 40.0;
            let k = kurtosis(x.data()).unwrap();
            let ks = kurtosis(x.map(|v| c * v).data()).unwrap();
            prop_assert!((k - ks).abs() <= 1e-12 * k);
            let shifted = x.map(|v| v + shift);
            prop_assert_eq!(detect_outliers(&x, 3.0).unwrap(), detect_outliers(&shifted, 3.0).unwrap());
        }

        #[test]
        fn totals_are_additive(lists in prop::collection::vec(prop::collection::vec((0usize..8, 0usize..16), 0..5), 0..6)) {
            let det: Vec<(usize, Vec<(usize, usize)>)> = lists.iter().map(|l| (0, l.clone())).collect();
            let (dims, tokens, _) = outlier_histograms(1, 16, 4, 8, &det).unwrap();
            let total: usize = lists.iter().map(Vec::len).sum();
            prop_assert_eq!(dims[0].iter().sum::<u64>() as usize, total);
            prop_assert_eq!(tokens[0].iter().sum::<u64>() as usize, total);
        }
    }

    fn model(variant: AttentionVariant) -> (ModelConfig, ModelParams<Tensor>, Vec<Batch>) {
        let cfg = ModelConfig {
            vocab_size: 10,
            max_seq_len: 6,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            attention: variant,
            ln_placement: LnPlacement::PostLn,
            dropout_p: 0.0,
            objective: Objective::Mlm { mask_prob: 0.15 },
            init_std: 0.5,
            measure_point: MeasurePoint::PostResidual,
        };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let batch = Batch {
            inputs: vec![vec![1, 2, 3, 4, 5, 6], vec![9, 8, 7, 0, 0, 1]],
            targets: vec![Some(1); 12],
        };
        (cfg, p, vec![batch])
    }

    #[test]
    fn analyze_report_schema() {
        let (cfg, p, batches) = model(AttentionVariant::Vanilla);
        let r = analyze(&p, &cfg, &batches, KurtosisConvention::Pearson).unwrap();
        assert_eq!(r.n_sequences, 2);
        assert_eq!(r.layer_kurtosis.len(), 2);
        assert!(r.avg_kurtosis.is_finite() && r.max_inf_norm > 0.0);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["avg_kurtosis", "max_inf_norm", "schema_version", "kurtosis_convention"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(serde_json::from_value::<OutlierReport>(json).unwrap(), r);
        assert_eq!(r.dim_histogram_csv().lines().count(), 1 + 2 * 8);
        assert!(analyze(&p, &cfg, &[], KurtosisConvention::Pearson).is_err());
    }

    fn trace_of(variant: AttentionVariant) -> AttentionTrace {
        let (cfg, p, batches) = model(variant);
        let mut tape = Tape::new();
        let pv = p.to_constants(&mut tape);
        let out = forward(&mut tape, &pv, &cfg, &batches[0].inputs, &AttentionMask::default(), &mut NoHook, None).unwrap();
        out.layers[1].attention.trace(&tape, 0).unwrap()
    }

    fn read_matrix(path: &Path) -> Vec<Vec<f64>> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect()
    }

    #[test]
    fn attention_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let vanilla = trace_of(AttentionVariant::Vanilla);
        let files = dump_attention_patterns(&vanilla, 1, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for row in read_matrix(&dir.path().join("P.csv")) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let first = std::fs::read(&files[0]).unwrap();
        dump_attention_patterns(&vanilla, 1, dir.path()).unwrap();
        assert_eq!(std::fs::read(&files[0]).unwrap(), first);
        assert!(dump_attention_patterns(&vanilla, 2, dir.path()).is_err());

        let gated = trace_of(AttentionVariant::Gated(GatingConfig::new(GateDesign::Linear, 0.0)));
        let gdir = dir.path().join("gated");
        dump_attention_patterns(&gated, 0, &gdir).unwrap();
        let pi = read_matrix(&gdir.join("pi.csv"));
        assert_eq!(pi.len(), 6);
        assert!(pi.iter().all(|r| r[0] > 0.0 && r[0] < 1.0));

        let clipped = trace_of(AttentionVariant::Clipped(ClippedSoftmaxConfig::fixed(-0.1, 1.0)));
        let cdir = dir.path().join("clipped");
        dump_attention_patterns(&clipped, 0, &cdir).unwrap();
        assert!(read_matrix(&cdir.join("P.csv")).iter().flatten().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
