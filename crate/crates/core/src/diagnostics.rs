//! Self-checks run by `lpf check`: finite-difference gradients, loss fixed
//! points, a hand-computed precision case and the selection invariants.

use ndarray::{array, Array2};
use rand::Rng;

use crate::error::Result;
use crate::eval::{average_precision, map_at_r, RetrievalRun};
use crate::losses::{self, Centers, LossWeights};
use crate::lpf::{build_constraint_set, select_from_evidence, Evidence};
use crate::model::{init_model, EncoderDecoder, ModelConfig};
use crate::nn::{softmax_columns, DenseLayer, Pass};
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn net_layer(m: &mut EncoderDecoder, net: usize, l: usize) -> &mut DenseLayer {
    if net == 0 {
        &mut m.encoder.layers[l]
    } else {
        &mut m.decoder.layers[l]
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over every encoder and decoder weight and bias.
pub fn gradient_check(
    model: &EncoderDecoder,
    x: &Array2<f64>,
    targets: &[Option<usize>],
    weights: &LossWeights,
    step: f64,
) -> Result<f64> {
    let analytic = model.loss_and_gradients(x.view(), targets, weights, Pass::Eval)?;
    let loss = |m: &EncoderDecoder| -> Result<f64> {
        Ok(m.loss_and_gradients(x.view(), targets, weights, Pass::Eval)?.terms.total(weights))
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let central = |nudge: &dyn Fn(&mut EncoderDecoder, f64)| -> Result<f64> {
        let mut plus = model.clone();
        let mut minus = model.clone();
        nudge(&mut plus, step);
        nudge(&mut minus, -step);
        Ok((loss(&plus)? - loss(&minus)?) / (2.0 * step))
    };
    let mut worst = 0.0f64;
    for (net, layer_grads) in [&analytic.encoder, &analytic.decoder].into_iter().enumerate() {
        for (l, grads) in layer_grads.iter().enumerate() {
            for ((i, j), &a) in grads.weights.indexed_iter() {
                let numeric = central(&|m, h| net_layer(m, net, l).weights[[i, j]] += h)?;
                worst = worst.max(rel(a, numeric));
            }
            for (i, &a) in grads.bias.indexed_iter() {
                let numeric = central(&|m, h| net_layer(m, net, l).bias[i] += h)?;
                worst = worst.max(rel(a, numeric));
            }
        }
    }
    Ok(worst)
}

fn toy_problem() -> Result<(EncoderDecoder, Array2<f64>, Vec<Option<usize>>)> {
    let mut model = init_model(4, 3, 11, &ModelConfig { hidden: 6, dropout: 0.0 })?;
    let mut rng = seeds::stream(11, "check");
    let x = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
    model.centers = Centers(Array2::from_shape_fn((3, 6), |_| rng.gen_range(0.0..0.5)));
    Ok((model, x, vec![Some(0), Some(2), None, Some(1), None]))
}

pub fn run_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (model, x, targets) = toy_problem()?;
    let only = |ce, c, ent, r| LossWeights {
        alpha_ce: ce,
        alpha_c: c,
        alpha_ent: ent,
        alpha_r: r,
    };
    for (name, w) in [
        ("gradient: cross-entropy", only(1.0, 0.0, 0.0, 0.0)),
        ("gradient: center", only(0.0, 1.0, 0.0, 0.0)),
        ("gradient: entropy", only(0.0, 0.0, 1.0, 0.0)),
        ("gradient: reconstruction", only(0.0, 0.0, 0.0, 1.0)),
        ("gradient: weighted total", LossWeights::default()),
    ] {
        let err = gradient_check(&model, &x, &targets, &w, 1e-5)?;
        out.push(check(name, err <= 1e-4, format!("max relative error {err:.3e}")));
    }

    let onehot = array![[1.0, 0.0], [0.0, 1.0]];
    let ce = losses::cross_entropy(onehot.view(), &[0, 1])?.loss;
    out.push(check("fixed point: cross-entropy", ce == 0.0, format!("{ce}")));
    let feats = array![[1.0, -2.0], [0.5, 3.0]];
    let centers = Centers(feats.t().to_owned());
    let c = losses::center_loss(feats.view(), &[0, 1], &centers)?.loss;
    out.push(check("fixed point: center", c == 0.0, format!("{c}")));
    let ent = losses::entropy_regularization(onehot.view()).loss;
    out.push(check("fixed point: entropy one-hot", ent == 0.0, format!("{ent}")));
    let uniform = softmax_columns(Array2::zeros((8, 1)).view());
    let h = losses::entropy_regularization(uniform.view()).loss;
    out.push(check(
        "fixed point: entropy uniform",
        (h - 8f64.ln()).abs() <= 1e-9,
        format!("{h} vs ln 8 = {}", 8f64.ln()),
    ));
    let r = losses::reconstruction(feats.view(), feats.view())?.loss;
    out.push(check("fixed point: reconstruction", r == 0.0, format!("{r}")));

    let ap = average_precision(&[true, false, true]);
    out.push(check("precision: hand case", ap == 5.0 / 6.0, format!("{ap}")));
    let run = RetrievalRun {
        query_labels: vec![0],
        database_labels: vec![0, 1, 0],
        rankings: vec![vec![0, 1, 2]],
    };
    let m = map_at_r(&run, 3)?;
    out.push(check("precision: map of one query", m == 5.0 / 6.0, format!("{m}")));

    let mut rng = seeds::stream(12, "check");
    let evidence: Vec<Evidence> = (0..2000)
        .map(|_| Evidence {
            encoder_label: [rng.gen_range(0..4), rng.gen_range(0..4)],
            confidence: [rng.gen_range(0.25..1.0), rng.gen_range(0.25..1.0)],
            mean_label: [rng.gen_range(0..4), rng.gen_range(0..4)],
        })
        .collect();
    let mut violations = 0usize;
    for (cf1, cf2) in [(0.9, 0.7), (0.6, 0.8), (0.75, 0.75)] {
        let strict = build_constraint_set(cf1, cf2, 0.95);
        let loose = build_constraint_set(cf1, cf2, 0.5);
        let hi = select_from_evidence(&evidence, &strict);
        let lo = select_from_evidence(&evidence, &loose);
        violations += hi.positions.iter().filter(|p| lo.positions.binary_search(p).is_err()).count();
        let t = strict.active.index();
        for (&j, &l) in hi.positions.iter().zip(&hi.labels) {
            let e = &evidence[j];
            if e.confidence[t] < 0.95 || e.mean_label[t] != e.encoder_label[t] || l != e.mean_label[t] {
                violations += 1;
            }
        }
    }
    out.push(check(
        "selection: threshold monotonicity and re-verification",
        violations == 0,
        format!("{violations} violations over {} samples", evidence.len()),
    ));
    Ok(out)
}
