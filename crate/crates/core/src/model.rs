//! Per-modality encoder/decoder pair.
//!
//! The encoder is `d → h → h → C` with ReLU between layers; its last layer
//! feeds two heads built from the same pre-activation: a softmax used for label
//! prediction and a tanh code that the mirrored decoder (`C → h → h → d`)
//! reconstructs the input from. The post-ReLU output of the second encoder
//! layer is the feature space in which class centers live.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, Centers, LossTerms, LossWeights};
use crate::nn::{softmax_columns, Activation, DenseLayer, ForwardTrace, LayerGradient, Mlp, Pass};

/// Index of the encoder layer whose output is the center-loss feature tap.
pub const FEATURE_TAP: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 250,
            dropout: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub centers: Centers,
}

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub x_f: Array2<f64>,
    pub logits: Array2<f64>,
    pub softmax: Array2<f64>,
    pub tanh: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

/// Gradients and center deltas for one batch, plus the unweighted loss terms.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub terms: LossTerms,
    pub encoder: Vec<LayerGradient>,
    pub decoder: Vec<LayerGradient>,
    pub center_deltas: Array2<f64>,
}

fn encoder_activations() -> Vec<Activation> {
    vec![Activation::Relu, Activation::Relu, Activation::Identity]
}

fn decoder_activations() -> Vec<Activation> {
    vec![Activation::Relu, Activation::Relu, Activation::Identity]
}

/// Builds a freshly initialised model; centers start at zero.
pub fn init_model(input_dim: usize, classes: usize, seed: u64, config: &ModelConfig) -> Result<EncoderDecoder> {
    if classes < 2 {
        return Err(Error::TooFewClasses(classes));
    }
    if input_dim == 0 {
        return Err(Error::Config("input dimension must be at least 1".into()));
    }
    config.validate()?;
    let h = config.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Mlp::glorot(&[input_dim, h, h, classes], encoder_activations(), config.dropout, &mut rng)?;
    let decoder = Mlp::glorot(&[classes, h, h, input_dim], decoder_activations(), config.dropout, &mut rng)?;
    Ok(EncoderDecoder {
        encoder,
        decoder,
        centers: Centers::zeros(classes, h),
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

impl EncoderDecoder {
    pub fn from_parts(encoder: Mlp, decoder: Mlp, centers: Centers) -> Result<Self> {
        if encoder.layers.len() != 3 || decoder.layers.len() != 3 {
            return Err(Error::shape("encoder/decoder depth", 3, encoder.layers.len().max(decoder.layers.len())));
        }
        for i in 0..3 {
            let enc = &encoder.layers[2 - i];
            let dec = &decoder.layers[i];
            if dec.in_size() != enc.out_size() || dec.out_size() != enc.in_size() {
                return Err(Error::shape(
                    format!("decoder layer {i} (mirror of encoder layer {})", 2 - i),
                    format!("{}x{}", enc.in_size(), enc.out_size()),
                    format!("{}x{}", dec.out_size(), dec.in_size()),
                ));
            }
        }
        let tap = encoder.layers[FEATURE_TAP].out_size();
        if centers.classes() != encoder.out_size() || centers.dim() != tap {
            return Err(Error::shape(
                "class centers",
                format!("{}x{}", encoder.out_size(), tap),
                format!("{}x{}", centers.classes(), centers.dim()),
            ));
        }
        Ok(Self {
            encoder,
            decoder,
            centers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_size()
    }

    pub fn num_classes(&self) -> usize {
        self.encoder.out_size()
    }

    pub fn hidden(&self) -> usize {
        self.encoder.layers[0].out_size()
    }

    pub fn encode(&self, inputs: ArrayView2<f64>, pass: Pass<'_>) -> Result<(EncodeOutput, ForwardTrace)> {
        if inputs.nrows() != self.input_dim() {
            return Err(Error::shape("encoder input rows", self.input_dim(), inputs.nrows()));
        }
        let (logits, trace) = self.encoder.forward(inputs, pass)?;
        let out = EncodeOutput {
            x_f: trace.steps[FEATURE_TAP].post.clone(),
            softmax: softmax_columns(logits.view()),
            tanh: logits.mapv(f64::tanh),
            logits,
        };
        Ok((out, trace))
    }

    pub fn decode(&self, code: ArrayView2<f64>, pass: Pass<'_>) -> Result<(Array2<f64>, ForwardTrace)> {
        if code.nrows() != self.num_classes() {
            return Err(Error::shape("decoder input rows", self.num_classes(), code.nrows()));
        }
        self.decoder.forward(code, pass)
    }

    pub fn predict_label(&self, inputs: ArrayView2<f64>) -> Result<Prediction> {
        if inputs.ncols() == 0 {
            return Ok(Prediction {
                labels: Vec::new(),
                confidences: Vec::new(),
            });
        }
        let (out, _) = self.encode(inputs, Pass::Eval)?;
        Ok(prediction_from_probs(out.softmax.view()))
    }

    /// Sets each center to the mean tapped feature of its class under the
    /// current (eval-mode) network. Classes without samples keep their center.
    pub fn init_centers(&mut self, inputs: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        if inputs.ncols() != labels.len() {
            return Err(Error::shape("center init labels", inputs.ncols(), labels.len()));
        }
        if labels.is_empty() {
            return Ok(());
        }
        let (out, _) = self.encode(inputs, Pass::Eval)?;
        let classes = self.num_classes();
        let mut sums = Array2::<f64>::zeros((classes, self.hidden()));
        let mut counts = vec![0usize; classes];
        for (j, &k) in labels.iter().enumerate() {
            if k >= classes {
                return Err(Error::LabelOutOfRange {
                    sample: j,
                    label: k,
                    classes,
                });
            }
            let mut row = sums.row_mut(k);
            row += &out.x_f.column(j);
            counts[k] += 1;
        }
        for (k, &n) in counts.iter().enumerate() {
            if n > 0 {
                let mean = &sums.row(k) / n as f64;
                self.centers.0.row_mut(k).assign(&mean);
            }
        }
        Ok(())
    }

    /// Weighted loss and its gradients for one batch. `targets[j]` is the
    /// label of column `j`, or `None` for an unlabeled column: labeled columns
    /// feed cross-entropy and center loss, unlabeled ones the entropy term,
    /// and every column the reconstruction term.
    pub fn loss_and_gradients(
        &self,
        inputs: ArrayView2<f64>,
        targets: &[Option<usize>],
        weights: &LossWeights,
        mut pass: Pass<'_>,
    ) -> Result<BatchGradients> {
        if inputs.ncols() != targets.len() {
            return Err(Error::shape("batch targets", inputs.ncols(), targets.len()));
        }
        let (enc, enc_trace) = self.encode(inputs, pass.reborrow())?;
        let (recon, dec_trace) = self.decode(enc.tanh.view(), pass)?;

        let rec = losses::reconstruction(inputs, recon.view())?;
        let dec_grads = self
            .decoder
            .backward(&dec_trace, (rec.grad * weights.alpha_r).view(), &[])?;
        let mut logit_grad = &dec_grads.input * &enc.tanh.mapv(|a| 1.0 - a * a);

        let (labeled, labels): (Vec<usize>, Vec<usize>) = targets
            .iter()
            .enumerate()
            .filter_map(|(j, t)| t.map(|k| (j, k)))
            .unzip();
        let unlabeled: Vec<usize> = targets
            .iter()
            .enumerate()
            .filter_map(|(j, t)| t.is_none().then_some(j))
            .collect();

        let probs_l = enc.softmax.select(Axis(1), &labeled);
        let ce = losses::cross_entropy(probs_l.view(), &labels)?;
        let xf_l = enc.x_f.select(Axis(1), &labeled);
        let center = losses::center_loss(xf_l.view(), &labels, &self.centers)?;
        let mut tap = Array2::zeros(enc.x_f.raw_dim());
        for (pos, &j) in labeled.iter().enumerate() {
            let mut col = logit_grad.column_mut(j);
            col.scaled_add(weights.alpha_ce, &ce.grad.column(pos));
            tap.column_mut(j)
                .assign(&(&center.feature_grad.column(pos) * weights.alpha_c));
        }

        let probs_u = enc.softmax.select(Axis(1), &unlabeled);
        let ent = losses::entropy_regularization(probs_u.view());
        for (pos, &j) in unlabeled.iter().enumerate() {
            logit_grad
                .column_mut(j)
                .scaled_add(weights.alpha_ent, &ent.grad.column(pos));
        }

        let enc_grads = self
            .encoder
            .backward(&enc_trace, logit_grad.view(), &[(FEATURE_TAP, tap.view())])?;

        Ok(BatchGradients {
            terms: LossTerms {
                ce: ce.loss,
                center: center.loss,
                entropy: ent.loss,
                reconstruction: rec.loss,
            },
            encoder: enc_grads.layers,
            decoder: dec_grads.layers,
            center_deltas: center.center_deltas,
        })
    }

    pub fn apply_gradients(&mut self, grads: &BatchGradients, learning_rate: f64, center_lr: f64) -> Result<()> {
        if !grads.center_deltas.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient("centers".into()));
        }
        if grads.center_deltas.raw_dim() != self.centers.0.raw_dim() {
            return Err(Error::shape(
                "center deltas",
                format!("{:?}", self.centers.0.dim()),
                format!("{:?}", grads.center_deltas.dim()),
            ));
        }
        let mut next = self.clone();
        next.encoder.sgd_step(&grads.encoder, learning_rate, "encoder")?;
        next.decoder.sgd_step(&grads.decoder, learning_rate, "decoder")?;
        next.centers.apply_deltas(&grads.center_deltas, center_lr);
        *self = next;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_checkpoint_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let lines = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))?;
        parse_checkpoint(&lines).map_err(|message| Error::Malformed {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Text checkpoint. Floats use shortest round-trip notation, so loading
    /// reproduces every parameter bit for bit.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "dropout {:e}", self.encoder.dropout[0]);
        for (name, net) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, layer) in net.layers.iter().enumerate() {
                let _ = writeln!(out, "layer {name} {i} {} {}", layer.out_size(), layer.in_size());
                for row in layer.weights.rows() {
                    write_row(&mut out, row.iter());
                }
                write_row(&mut out, layer.bias.iter());
            }
        }
        let _ = writeln!(out, "centers {} {}", self.centers.classes(), self.centers.dim());
        for row in self.centers.0.rows() {
            write_row(&mut out, row.iter());
        }
        out
    }
}

pub fn prediction_from_probs(probs: ArrayView2<f64>) -> Prediction {
    let (labels, confidences) = probs.columns().into_iter().map(argmax).unzip();
    Prediction { labels, confidences }
}

const CHECKPOINT_MAGIC: &str = "lpf-checkpoint v1";

fn write_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:e}");
    }
    out.push('\n');
}

fn parse_checkpoint(lines: &[String]) -> std::result::Result<EncoderDecoder, String> {
    let mut it = lines.iter().enumerate();
    let mut next = |what: &str| {
        it.next()
            .map(|(n, l)| (n + 1, l.as_str()))
            .ok_or_else(|| format!("unexpected end of file, expected {what}"))
    };
    let (_, magic) = next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(format!("bad header `{magic}`"));
    }
    let (n, line) = next("dropout")?;
    let dropout: f64 = line
        .strip_prefix("dropout ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("line {n}: bad dropout line"))?;

    let parse_row = |n: usize, line: &str, len: usize| -> std::result::Result<Vec<f64>, String> {
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format!("line {n}: bad number `{t}`")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if row.len() != len {
            return Err(format!("line {n}: expected {len} values, found {}", row.len()));
        }
        Ok(row)
    };

    let mut nets: [Vec<DenseLayer>; 2] = [Vec::new(), Vec::new()];
    for (k, name) in ["encoder", "decoder"].iter().enumerate() {
        for i in 0..3 {
            let (n, head) = next("layer header")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "layer" || parts[1] != *name || parts[2] != i.to_string() {
                return Err(format!("line {n}: expected `layer {name} {i} <out> <in>`"));
            }
            let out: usize = parts[3].parse().map_err(|_| format!("line {n}: bad size"))?;
            let inp: usize = parts[4].parse().map_err(|_| format!("line {n}: bad size"))?;
            let mut weights = Vec::with_capacity(out * inp);
            for _ in 0..out {
                let (n, line) = next("weight row")?;
                weights.extend(parse_row(n, line, inp)?);
            }
            let (n, line) = next("bias row")?;
            let bias = parse_row(n, line, out)?;
            let weights = Array2::from_shape_vec((out, inp), weights).map_err(|e| e.to_string())?;
            nets[k].push(DenseLayer::new(weights, Array1::from(bias)).map_err(|e| e.to_string())?);
        }
    }
    let (n, head) = next("centers header")?;
    let parts: Vec<&str> = head.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "centers" {
        return Err(format!("line {n}: expected `centers <classes> <dim>`"));
    }
    let classes: usize = parts[1].parse().map_err(|_| format!("line {n}: bad size"))?;
    let dim: usize = parts[2].parse().map_err(|_| format!("line {n}: bad size"))?;
    let mut centers = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        let (n, line) = next("center row")?;
        centers.extend(parse_row(n, line, dim)?);
    }
    let centers = Array2::from_shape_vec((classes, dim), centers).map_err(|e| e.to_string())?;

    let [enc, dec] = nets;
    let encoder = Mlp::new(enc, encoder_activations(), dropout).map_err(|e| e.to_string())?;
    let decoder = Mlp::new(dec, decoder_activations(), dropout).map_err(|e| e.to_string())?;
    EncoderDecoder::from_parts(encoder, decoder, Centers(centers)).map_err(|e| e.to_string())
}
