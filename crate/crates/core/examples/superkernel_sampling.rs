//! One super-kernel: its decision probabilities, soft/sampled/hard kernels,
//! and how moving a threshold changes what gets picked.
//!
//! ```text
//! cargo run --example superkernel_sampling
//! ```

use std::collections::BTreeMap;

use bitshare_nas::gate::GateMode;
use bitshare_nas::superkernel::SuperKernel;
use bitshare_nas::tensor::Tensor;
use bitshare_nas::SearchRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> anyhow::Result<()> {
    let c_in = 2;
    let mut rng = SearchRng::seed_from_u64(5);
    let w = Tensor::<f32>::from_fn(&[6 * c_in, 1, 5, 5], |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        (0.2 * z) as f32
    });
    let mut sk = SuperKernel::new(c_in, w, true)?;
    println!("fresh thresholds: {:?}", sk.thresholds());
    println!("fresh probabilities: {:?}", sk.decision_probabilities(false));

    let soft = sk.compose(GateMode::Soft);
    println!(
        "soft kernel: centre tap of channel 0 = {:.4}, corner = {:.4} (raw {:.4})",
        soft.kernel.data()[12],
        soft.kernel.data()[0],
        sk.weights.data()[0]
    );
    let hard = sk.compose(GateMode::Hard);
    println!("hard decision: {:?}, determinized: {:?}", hard.decision, sk.determinize());

    let histogram = |sk: &SuperKernel<f32>, rng: &mut SearchRng| {
        let mut h = BTreeMap::new();
        for _ in 0..2000 {
            let (a, b) = sk.sample(rng);
            let key = if a.is_skip() {
                format!("skip/{}b", b.count())
            } else {
                format!("{}x{}/e{}/{}b", a.kernel, a.kernel, a.expand, b.count())
            };
            *h.entry(key).or_insert(0usize) += 1;
        }
        h
    };
    println!("2000 samples at p = 0.5: {:?}", histogram(&sk, &mut rng));

    // Lowering the 5x5 threshold below the outer ring's norm favours 5x5.
    let mut t = sk.thresholds();
    t[0] -= 2.0;
    sk.set_thresholds(t);
    let p = sk.decision_probabilities(false);
    println!("after lowering t_k5 by 2: p_k5 = {:.3}, determinized {:?}", p.p_k5, sk.determinize());
    println!("2000 samples: {:?}", histogram(&sk, &mut rng));
    Ok(())
}
