use microdiff::denoiser::{CondBatch, Denoiser, DenoiserConfig};
use microdiff::embedding::MicroCond;
use microdiff::rng::rng;
use microdiff::schedule::build_schedule;
use microdiff::train::{dsm_loss_graph, TrainBatch};
use microdiff_nn::{Graph, ParamStore, Tensor};

/// Two levels, attention at the lower one, under 10k parameters.
pub fn grad_config() -> DenoiserConfig {
    let mut c = DenoiserConfig::toy(4, vec![1, 1], vec![0, 1], 4, 4);
    c.in_channels = 1;
    c.d_f = 4;
    c.time_fourier_dim = 8;
    c.time_dim = 8;
    c.head_dim = 4;
    c
}

pub fn random_cond(n: usize, seed: u64) -> CondBatch {
    let mut r = rng(seed);
    CondBatch {
        context: Tensor::randn(&[n, 3, 4], 1.0, &mut r),
        pooled: Tensor::randn(&[n, 4], 1.0, &mut r),
        micro: (0..n).map(|i| MicroCond::new((8 + i as u32, 12), (i as u32, 1), (4, 4))).collect(),
    }
}

/// Relative error, measured against 1e-3 for gradients smaller than that.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, what: String, analytic: f64, fd: f64) {
        let e = rel_err(analytic, fd);
        self.checked += 1;
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            self.worst = format!("{what}: analytic {analytic:.6e} fd {fd:.6e}");
        }
    }
}

/// First, middle and last element of every parameter tensor.
fn check_params(
    report: &mut GradReport,
    store: &ParamStore,
    eval: &dyn Fn(&ParamStore) -> f64,
    analytic: &[Option<Tensor>],
    h: f64,
) {
    for (k, id) in store.ids().enumerate() {
        let numel = store.get(id).numel();
        for &j in &[0, numel / 2, numel - 1] {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[j] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic[k].as_ref().map_or(0.0, |g| g.data()[j]);
            report.record(format!("{}[{j}]", store.name(id)), an, fd);
        }
    }
}

/// Gradient of the mean denoiser output w.r.t. parameters and input, step 1e-3.
pub fn forward_gradients() -> (usize, GradReport) {
    let model = Denoiser::new(grad_config(), &mut rng(3)).unwrap();
    let x = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng(4));
    let c = random_cond(2, 5);
    let sigmas = [0.7, 3.0];
    let eval = |p: &ParamStore, x: &Tensor| {
        let mut g = Graph::new(p);
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, xv, &sigmas, &c).unwrap();
        let m = g.mean(out);
        g.value(m).data()[0]
    };
    let mut g = Graph::new(model.params());
    let xv = g.leaf(x.clone());
    let out = model.forward(&mut g, xv, &sigmas, &c).unwrap();
    let m = g.mean(out);
    let grads = g.backward(m);
    let dx = grads.wrt(xv).unwrap().clone();
    let analytic = grads.into_param_grads(model.params().len());

    let mut report = GradReport::default();
    check_params(&mut report, model.params(), &|p| eval(p, &x), &analytic, 1e-3);
    let h = 1e-3;
    for j in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[j] += h;
        let mut xm = x.clone();
        xm.data_mut()[j] -= h;
        let fd = (eval(model.params(), &xp) - eval(model.params(), &xm)) / (2.0 * h);
        report.record(format!("x[{j}]"), dx.data()[j], fd);
    }
    (model.parameter_count(), report)
}

/// Gradient of the DSM loss w.r.t. parameters. `lambda = 1/sigma^2` makes
/// the lowest level steep, so the step is 1e-4.
pub fn dsm_gradients() -> GradReport {
    let model = Denoiser::new(grad_config(), &mut rng(6)).unwrap();
    let schedule = build_schedule(1000, 1e-4, 2e-2).unwrap();
    let batch = TrainBatch {
        x0: Tensor::uniform(&[3, 1, 4, 4], 1.0, &mut rng(7)),
        cond: random_cond(3, 8),
    };
    let levels = [10, 400, 990];
    let eval = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let l = dsm_loss_graph(&mut g, &model, &batch, &schedule, &levels, 0.1, &mut rng(9)).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new(model.params());
    let l = dsm_loss_graph(&mut g, &model, &batch, &schedule, &levels, 0.1, &mut rng(9)).unwrap();
    let analytic = g.backward(l).into_param_grads(model.params().len());
    let mut report = GradReport::default();
    check_params(&mut report, model.params(), &eval, &analytic, 1e-4);
    report
}
