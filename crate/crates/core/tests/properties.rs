use proptest::prelude::*;
use rand::SeedableRng;

use qbnn::autodiff::Graph;
use qbnn::bnn::{BnnModel, GaussianLayer, LayerVars, Method, ModelConfig};
use qbnn::data::blend;
use qbnn::rng::{standard_normal, Rng};
use qbnn::uncertainty::{auroc, entropy};
use qbnn::Tensor;

fn layer(method: Method, mu: Tensor, rho: Tensor, prior_std: f64) -> GaussianLayer {
    GaussianLayer {
        name: "fc1".into(),
        mu,
        rho,
        prior_std,
        method,
        quant: ModelConfig::default().quantizers().unwrap(),
        clip: 10.0,
        kl_on_quantized: false,
    }
}

proptest! {
    #[test]
    fn nll_is_bounded(logits in prop::collection::vec(-30.0f64..30.0, 10), label in 0usize..10) {
        let spread = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - logits.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(1, 10, logits).unwrap());
        let nll = g.log_softmax_nll(z, &[label]).unwrap();
        let v = g.value(nll).item();
        prop_assert!(v >= 0.0);
        prop_assert!(v <= 10f64.ln() + spread + 1e-12);
    }

    #[test]
    fn entropy_lies_in_range(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let z: f64 = raw.iter().sum();
        prop_assume!(z > 1e-9);
        let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let h = entropy(&p);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn auroc_swaps_to_complement(
        neg in prop::collection::hash_set(-1000i32..1000, 1..30),
        pos in prop::collection::hash_set(1000i32..3000, 1..30),
        shift in -2500i32..0,
    ) {
        // disjoint integer scores keep the instance free of ties
        let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
        let pos: Vec<f64> = pos.into_iter().map(|v| f64::from(v + shift)).collect();
        prop_assume!(neg.iter().all(|n| !pos.contains(n)));
        let a = auroc(&neg, &pos).unwrap();
        let b = auroc(&pos, &neg).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn blends_stay_between_sources(
        a in prop::collection::vec(0.0f64..=1.0, 16),
        b in prop::collection::vec(0.0f64..=1.0, 16),
        lambda in 0.4f64..=0.6,
    ) {
        for ((&x, &y), &v) in a.iter().zip(&b).zip(&blend(&a, &b, lambda)) {
            prop_assert!(v >= x.min(y) - 1e-15 && v <= x.max(y) + 1e-15);
        }
    }

    #[test]
    fn kl_is_nonnegative(
        mu in prop::collection::vec(-2.0f64..2.0, 6),
        rho in prop::collection::vec(-4.0f64..1.0, 6),
        p in 0.2f64..3.0,
    ) {
        let l = layer(Method::Float, Tensor::from_vec(2, 3, mu).unwrap(), Tensor::from_vec(2, 3, rho).unwrap(), p);
        prop_assert!(l.kl_to_prior().unwrap() >= 0.0);
    }
}

#[test]
fn kl_vanishes_at_the_prior() {
    let p: f64 = 0.7;
    let l = layer(Method::Float, Tensor::zeros(3, 3), Tensor::full(3, 3, p.ln()), p);
    assert!(l.kl_to_prior().unwrap().abs() < 1e-12);
}

#[test]
fn forward_backward_is_bitwise_reproducible() {
    let run = || {
        let cfg = ModelConfig {
            sizes: vec![6, 5, 3],
            method: Method::Jq,
            bits: 6,
            ..ModelConfig::default()
        };
        let mut bnn = BnnModel::new(&cfg, 0.05).unwrap();
        let mut rng = Rng::seed_from_u64(3);
        for l in &mut bnn.layers {
            l.mu = standard_normal(l.fan_in(), l.fan_out(), &mut rng).map(|v| v * 0.3);
        }
        let x = standard_normal(8, 6, &mut rng);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let vars: Vec<LayerVars> = bnn
            .layers
            .iter()
            .map(|l| LayerVars {
                mu: g.param(l.mu.clone()),
                rho: g.param(l.rho.clone()),
            })
            .collect();
        let ws: Vec<_> = bnn
            .layers
            .iter()
            .zip(&vars)
            .map(|(l, &v)| {
                l.sample_on_graph(&mut g, v, standard_normal(l.fan_in(), l.fan_out(), &mut rng))
                    .unwrap()
            })
            .collect();
        let z = bnn.logits_on_graph(&mut g, xi, &ws).unwrap();
        let loss = g.log_softmax_nll(z, &[0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
        g.backward(loss).unwrap();
        vars.iter()
            .flat_map(|v| [g.grad(v.mu).unwrap().clone(), g.grad(v.rho).unwrap().clone()])
            .map(|t| t.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Autodiff reparameterization gradients, averaged over 10⁴ seeded draws,
/// against central differences of the loss averaged over the same draws.
#[test]
fn reparameterization_gradient_matches_finite_differences() {
    let draws = 10_000;
    let mut rng = Rng::seed_from_u64(9);
    let mu0 = standard_normal(3, 2, &mut rng).map(|v| v * 0.5);
    let rho0 = Tensor::full(3, 2, 0.3f64.ln());
    let x = standard_normal(4, 3, &mut rng);
    let labels = [0, 1, 1, 0];
    let eps: Vec<Tensor> = (0..draws).map(|_| standard_normal(3, 2, &mut rng)).collect();

    let loss_and_grads = |mu: &Tensor, rho: &Tensor, e: &Tensor, grads: bool| {
        let l = layer(Method::Float, mu.clone(), rho.clone(), 1.0);
        let mut g = Graph::new();
        let vars = LayerVars {
            mu: g.param(mu.clone()),
            rho: g.param(rho.clone()),
        };
        let w = l.sample_on_graph(&mut g, vars, e.clone()).unwrap();
        let xi = g.constant(x.clone());
        let z = g.matmul(xi, w).unwrap();
        let loss = g.log_softmax_nll(z, &labels).unwrap();
        let value = g.value(loss).item();
        if !grads {
            return (value, None);
        }
        g.backward(loss).unwrap();
        (
            value,
            Some((g.grad(vars.mu).unwrap().clone(), g.grad(vars.rho).unwrap().clone())),
        )
    };
    let avg_loss =
        |mu: &Tensor, rho: &Tensor| eps.iter().map(|e| loss_and_grads(mu, rho, e, false).0).sum::<f64>() / draws as f64;

    let per_draw: Vec<(Tensor, Tensor)> = eps
        .iter()
        .map(|e| loss_and_grads(&mu0, &rho0, e, true).1.unwrap())
        .collect();
    let h = 1e-5;
    for which in 0..2 {
        for k in 0..6 {
            let samples: Vec<f64> = per_draw
                .iter()
                .map(|(gm, gr)| if which == 0 { gm.values()[k] } else { gr.values()[k] })
                .collect();
            let mean = samples.iter().sum::<f64>() / draws as f64;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se = (var / draws as f64).sqrt();

            let bump = |d: f64| {
                let (mut mu, mut rho) = (mu0.clone(), rho0.clone());
                let t = if which == 0 { &mut mu } else { &mut rho };
                t.values_mut()[k] += d;
                avg_loss(&mu, &rho)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!(
                (fd - mean).abs() <= 3.0 * se + 1e-7,
                "param {which} index {k}: fd {fd} vs autodiff {mean} (se {se})"
            );
        }
    }
}
