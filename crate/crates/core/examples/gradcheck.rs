//! Finite-difference checks of the autodiff engine in 64-bit mode: single
//! ops and a whole inverted-residual group followed by pooling, a dense
//! layer and cross-entropy.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use bitshare_nas::supernet::{group_forward, prepare_weight, BackboneConfig, GroupPlan, GroupVars, Precision, SuperNet};
use bitshare_nas::tensor::{finite_difference_check, Tape, Tensor};
use bitshare_nas::SearchRng;
use rand::{Rng, SeedableRng};

fn main() -> anyhow::Result<()> {
    let mut rng = SearchRng::seed_from_u64(2);
    let mut rand = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0));

    let x = rand(&[2, 3, 5, 5]);
    let k = rand(&[4, 3, 3, 3]);
    let err = finite_difference_check(
        |t, v| {
            let kv = t.constant(k.clone());
            let y = t.conv2d(v, kv, 2, 1, 1)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-6,
    )?;
    println!("conv2d (stride 2) input gradient: max relative error {err:.2e}");

    let g = rand(&[3]);
    let err = finite_difference_check(
        |t, v| {
            let gv = t.constant(g.clone());
            let b = t.constant(Tensor::zeros(&[3]));
            let y = t.batchnorm(v, gv, b)?;
            let w = t.constant(Tensor::from_fn(&[2, 3, 5, 5], |i| (i as f64 * 0.37).sin()));
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        },
        &x,
        1e-6,
    )?;
    println!("batch norm input gradient: max relative error {err:.2e}");

    // A full group of the minimal backbone at its largest candidate.
    let net = SuperNet::<f64>::build(&BackboneConfig::minimal(3), &mut SearchRng::seed_from_u64(0))?;
    let group = &net.groups[0];
    let batch = Tensor::<f64>::from_fn(&[3, group.info.c_in, 8, 8], |i| (i as f64 * 0.113).cos());
    let labels = [0usize, 2, 1];
    let head = Tensor::<f64>::from_fn(&[group.info.c_out, 3], |i| (i as f64 * 0.7).sin() * 0.5);
    let loss = |t: &mut Tape<f64>, depthwise_raw: &Tensor<f64>, dw_var| -> bitshare_nas::Result<_> {
        let leaf = |t: &mut Tape<f64>, v: &Tensor<f64>| t.constant(v.clone());
        let vars = GroupVars {
            depthwise: dw_var,
            expand: leaf(t, &group.expand),
            bn1: (leaf(t, &group.bn1.gamma), leaf(t, &group.bn1.beta)),
            bn2: (leaf(t, &group.bn2.gamma), leaf(t, &group.bn2.beta)),
            project: leaf(t, &group.project),
            bn3: (leaf(t, &group.bn3.gamma), leaf(t, &group.bn3.beta)),
        };
        let plan = GroupPlan {
            depthwise: prepare_weight(depthwise_raw, None, Precision::Float),
            expand: prepare_weight(&group.expand, None, Precision::Float),
            project: prepare_weight(&group.project, None, Precision::Float),
            channel_gate: None,
            branch_gate: None,
            residual: group.info.residual,
            stride: group.info.stride,
            bypass: false,
        };
        let x = t.constant(batch.clone());
        let h = group_forward(t, x, &vars, plan)?;
        let pooled = t.global_avg_pool(h)?;
        let hw = t.constant(head.clone());
        let hb = t.constant(Tensor::zeros(&[3]));
        let logits = t.dense(pooled, hw, hb)?;
        t.softmax_cross_entropy(logits, &labels)
    };
    let err = finite_difference_check(
        |t, v| {
            let raw = t.value(v).clone();
            loss(t, &raw, v)
        },
        &group.kernel.weights,
        1e-5,
    )?;
    println!(
        "group forward + cross-entropy, gradient w.r.t. {} depthwise weights: max relative error {err:.2e}",
        group.kernel.weights.len()
    );
    Ok(())
}
