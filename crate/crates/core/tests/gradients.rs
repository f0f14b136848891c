//! Backpropagated gradients against central finite differences, in f64.

use evdet::geometry::DefaultGrid;
use evdet::loss::{evaluate_plan, plan_gradients, plan_loss, LossConfig, LossPlan};
use evdet::network::{DetectorModel, Mode, NetConfig};
use evdet::Event;
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Clone)]
struct Setup {
    model: DetectorModel<f64>,
    grid: DefaultGrid,
    input: Array3<f64>,
    truths: Vec<Vec<Event>>,
    plans: Vec<LossPlan>,
    mode: Mode,
}

impl Setup {
    fn new(cfg: NetConfig, batch: usize, mode: Mode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = DetectorModel::<f64>::init(cfg, seed).unwrap();
        // move batch norm away from its identity initialisation
        for b in &mut model.params.blocks {
            b.gamma.mapv_inplace(|_| 0.5 + rng.random::<f64>());
            b.beta.mapv_inplace(|_| rng.random::<f64>() - 0.5);
            b.conv.bias.mapv_inplace(|_| rng.random::<f64>() - 0.5);
        }
        for r in &mut model.running {
            r.mean.mapv_inplace(|_| rng.random::<f64>() - 0.5);
            r.var.mapv_inplace(|_| 0.5 + rng.random::<f64>());
        }
        let window = cfg.window_samples as f64;
        let grid = DefaultGrid::build(window, window / cfg.defaults as f64, 0.0).unwrap();
        let input = Array3::from_shape_fn((batch, cfg.channels, cfg.window_samples), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        });
        let truths: Vec<Vec<Event>> = (0..batch)
            .map(|b| {
                if b % 3 == 2 {
                    Vec::new()
                } else {
                    vec![Event::new(
                        rng.random::<f64>() * window,
                        0.5 + rng.random::<f64>() * window / 2.0,
                        rng.random_range(1..=cfg.labels as u32),
                    )]
                }
            })
            .collect();
        let mut s = Self {
            model,
            grid,
            input,
            truths,
            plans: Vec::new(),
            mode,
        };
        let (out, _) = s.model.forward(s.input.view(), mode).unwrap();
        let cfg = LossConfig {
            min_negatives: 1,
            ..LossConfig::default()
        };
        s.plans = (0..batch)
            .map(|b| plan_loss(&out.sample(b), &s.grid, &s.truths[b], &cfg).unwrap())
            .collect();
        s
    }

    fn loss(&self, model: &DetectorModel<f64>) -> f64 {
        let (out, _) = model.forward(self.input.view(), self.mode).unwrap();
        let b = self.plans.len();
        (0..b)
            .map(|i| evaluate_plan(&out.sample(i), &self.plans[i]).unwrap().total)
            .sum::<f64>()
            / b as f64
    }

    fn analytic(&self) -> evdet::network::Gradients<f64> {
        let (out, cache) = self.model.forward(self.input.view(), self.mode).unwrap();
        let b = self.plans.len();
        let mut gl = Array3::zeros(out.loc.dim());
        let mut gp = Array3::zeros(out.probs.dim());
        for i in 0..b {
            let (l, p) = plan_gradients(&out.sample(i), &self.plans[i]);
            gl.index_axis_mut(Axis(0), i).assign(&(l / b as f64));
            gp.index_axis_mut(Axis(0), i).assign(&(p / b as f64));
        }
        self.model
            .backward(&cache, gl.view(), gp.view(), true)
            .unwrap()
    }

    /// Returns the worst relative error per tensor.
    fn check(&self) -> Vec<(String, f64)> {
        let grads = self.analytic();
        let names: Vec<(String, Vec<f64>)> = grads
            .params
            .tensors()
            .into_iter()
            .map(|(n, _, v)| (n, v.to_vec()))
            .collect();
        let mut report = Vec::new();
        for (t, (name, analytic)) in names.iter().enumerate() {
            let mut worst: f64 = 0.0;
            for (k, &a) in analytic.iter().enumerate() {
                let mut plus = self.model.clone();
                plus.params.tensors_mut()[t][k] += H;
                let mut minus = self.model.clone();
                minus.params.tensors_mut()[t][k] -= H;
                let numeric = (self.loss(&plus) - self.loss(&minus)) / (2.0 * H);
                worst = worst.max(relative_error(a, numeric));
            }
            report.push((name.clone(), worst));
        }
        report
    }
}

#[test]
fn tiny_network_matches_finite_differences() {
    let cfg = NetConfig {
        channels: 1,
        window_samples: 8,
        blocks: 1,
        labels: 1,
        defaults: 2,
    };
    let setup = Setup::new(cfg, 3, Mode::Train, 7);
    for (name, err) in setup.check() {
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn every_layer_type_matches_finite_differences() {
    let cfg = NetConfig {
        channels: 2,
        window_samples: 16,
        blocks: 2,
        labels: 2,
        defaults: 3,
    };
    for mode in [Mode::Train, Mode::Eval] {
        let setup = Setup::new(cfg, 3, mode, 11);
        let report = setup.check();
        assert!(report.iter().any(|(n, _)| n == "spatial.weight"));
        for (name, err) in report {
            assert!(err < 1e-4, "{mode:?} {name}: relative error {err}");
        }
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let cfg = NetConfig {
        channels: 2,
        window_samples: 8,
        blocks: 1,
        labels: 1,
        defaults: 2,
    };
    let setup = Setup::new(cfg, 2, Mode::Train, 3);
    let grads = setup.analytic();
    let dx = grads.input.unwrap();
    for idx in ndarray::indices(setup.input.dim()) {
        let shifted = |d: f64| {
            let mut s = setup.clone();
            s.input[idx] += d;
            s.loss(&setup.model)
        };
        let numeric = (shifted(H) - shifted(-H)) / (2.0 * H);
        assert!(relative_error(dx[idx], numeric) < 1e-4, "{idx:?}");
    }
}

#[test]
fn duplicated_sample_doubles_its_contribution() {
    let cfg = NetConfig {
        channels: 2,
        window_samples: 16,
        blocks: 2,
        labels: 1,
        defaults: 2,
    };
    let model = DetectorModel::<f64>::init(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Array3::from_shape_fn((1, 2, 16), |_| rng.random::<f64>());
    let mut doubled = Array3::zeros((2, 2, 16));
    doubled
        .index_axis_mut(Axis(0), 0)
        .assign(&x.index_axis(Axis(0), 0));
    doubled
        .index_axis_mut(Axis(0), 1)
        .assign(&x.index_axis(Axis(0), 0));

    let (o1, c1) = model.forward(x.view(), Mode::Eval).unwrap();
    let (_, c2) = model.forward(doubled.view(), Mode::Eval).unwrap();
    let gl1 = Array3::from_shape_fn(o1.loc.dim(), |(_, i, j)| (i + 2 * j) as f64 - 1.0);
    let gp1 = Array3::from_shape_fn(o1.probs.dim(), |(_, i, j)| 0.3 * i as f64 - j as f64);
    let stack = |g: &Array3<f64>| {
        let mut out = Array3::zeros((2, g.dim().1, g.dim().2));
        out.index_axis_mut(Axis(0), 0)
            .assign(&g.index_axis(Axis(0), 0));
        out.index_axis_mut(Axis(0), 1)
            .assign(&g.index_axis(Axis(0), 0));
        out
    };
    let g1 = model.backward(&c1, gl1.view(), gp1.view(), false).unwrap();
    let g2 = model
        .backward(&c2, stack(&gl1).view(), stack(&gp1).view(), false)
        .unwrap();
    for ((name, _, a), (_, _, b)) in g1.params.tensors().into_iter().zip(g2.params.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!(
                (2.0 * x - y).abs() <= 1e-10 * (1.0 + y.abs()),
                "{name}: {x} vs {y}"
            );
        }
    }
}
