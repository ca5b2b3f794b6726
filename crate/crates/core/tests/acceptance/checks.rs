//! Criteria that need no trained model.

use microdiff::checkpoint::Checkpoint;
use microdiff::data::{format_ratio, generate_buckets};
use microdiff::denoiser::{CondBatch, Denoiser, DenoiserConfig, GaussianDenoiser};
use microdiff::embedding::{sample_train_conditioning, MicroCond};
use microdiff::eval::{frechet_distance, FeatureStats};
use microdiff::rng::rng;
use microdiff::sample::{cfg_denoise, ddim_sample, ode_sample, sde_sample, Pipeline, SampleRequest, SdeConfig};
use microdiff::schedule::build_schedule;
use microdiff::textenc::TextEncoder;
use microdiff::train::{cfg_dropout, TrainState, Trainer};
use microdiff_nn::Tensor;
use nalgebra::{DMatrix, DVector};

use crate::common::gradcheck::{dsm_gradients, forward_gradients};
use crate::common::{stage, synthetic_data, tiny_text, toy_config};
use crate::stats::{chi_square_uniform, var};
use crate::Verdict;

/// Height, width and printed aspect ratio of the appendix table.
const PAPER_BUCKETS: [(u32, u32, &str); 40] = [
    (512, 2048, "0.25"),
    (512, 1984, "0.26"),
    (512, 1920, "0.27"),
    (512, 1856, "0.28"),
    (576, 1792, "0.32"),
    (576, 1728, "0.33"),
    (576, 1664, "0.35"),
    (640, 1600, "0.4"),
    (640, 1536, "0.42"),
    (704, 1472, "0.48"),
    (704, 1408, "0.5"),
    (704, 1344, "0.52"),
    (768, 1344, "0.57"),
    (768, 1280, "0.6"),
    (832, 1216, "0.68"),
    (832, 1152, "0.72"),
    (896, 1152, "0.78"),
    (896, 1088, "0.82"),
    (960, 1088, "0.88"),
    (960, 1024, "0.94"),
    (1024, 1024, "1.0"),
    (1024, 960, "1.07"),
    (1088, 960, "1.13"),
    (1088, 896, "1.21"),
    (1152, 896, "1.29"),
    (1152, 832, "1.38"),
    (1216, 832, "1.46"),
    (1280, 768, "1.67"),
    (1344, 768, "1.75"),
    (1408, 704, "2.0"),
    (1472, 704, "2.09"),
    (1536, 640, "2.4"),
    (1600, 640, "2.5"),
    (1664, 576, "2.89"),
    (1728, 576, "3.0"),
    (1792, 576, "3.11"),
    (1856, 512, "3.62"),
    (1920, 512, "3.75"),
    (1984, 512, "3.88"),
    (2048, 512, "4.0"),
];

pub fn bucket_table() -> Verdict {
    let set = generate_buckets(1024 * 1024, 64, 512, 2048).map_err(|e| e.to_string())?;
    let want: Vec<(u32, u32)> = PAPER_BUCKETS.iter().map(|&(h, w, _)| (h, w)).collect();
    let extra: Vec<_> = set.buckets.iter().filter(|b| !want.contains(b)).collect();
    let missing: Vec<_> = want.iter().filter(|b| !set.buckets.contains(b)).collect();
    let ratio_mismatch: Vec<_> = PAPER_BUCKETS
        .iter()
        .filter(|&&(h, w, r)| format_ratio(f64::from(h) / f64::from(w)) != r)
        .map(|&(h, w, r)| format!("{h}x{w} prints {r}"))
        .collect();
    let pass = set.buckets == want && ratio_mismatch.is_empty();
    Ok((
        pass,
        format!(
            "generated {} rows vs 40; extra {extra:?}; missing {missing:?}; ratio mismatches {ratio_mismatch:?}",
            set.len()
        ),
    ))
}

pub fn gaussian_samplers() -> Verdict {
    let s = build_schedule(1000, 1e-4, 2e-2).map_err(|e| e.to_string())?;
    let std = 0.5;
    let oracle = GaussianDenoiser { mean: 0.0, std };
    let target = std * std;
    let n = [10_000];
    let ddim = var(ddim_sample(&oracle, &s, &n, 1000, 1).map_err(|e| e.to_string())?.data());
    let ode = var(ode_sample(&oracle, &s, &n, 100, 2).map_err(|e| e.to_string())?.data());
    let sde = var(sde_sample(&oracle, &s, &n, 200, 3, &SdeConfig::default()).map_err(|e| e.to_string())?.data());
    let rel = |v: f64| (v - target).abs() / target;
    let pass = rel(ddim) < 0.03 && rel(ode) < 0.02 && rel(sde) < 0.05;
    Ok((
        pass,
        format!(
            "s^2={target}: DDIM(1000) {ddim:.4} ({:.2}% <= 3%), Heun(100) {ode:.4} ({:.2}% <= 2%), EM(200, beta=1) {sde:.4} ({:.2}% <= 5%)",
            100.0 * rel(ddim),
            100.0 * rel(ode),
            100.0 * rel(sde)
        ),
    ))
}

pub fn cfg_algebra() -> Verdict {
    let mut r = rng(0);
    let text = TextEncoder::new(tiny_text(), &mut r).map_err(|e| e.to_string())?;
    let cfg = DenoiserConfig::toy(8, vec![1, 2], vec![0, 1], text.config().context_dim(), text.config().pooled_dim());
    let model = Denoiser::new(cfg, &mut r).map_err(|e| e.to_string())?;
    let micro = MicroCond::for_inference((8, 8));
    let cond = CondBatch::repeat(&text.encode_caption("disk").map_err(|e| e.to_string())?, micro, 2);
    let null = CondBatch::repeat(&text.null_context(), micro, 2);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.5, &mut r);
    let p = model.params();
    let run = |w: f64, c: &CondBatch, u: &CondBatch| cfg_denoise(&model, p, &x, 1.3, c, u, w).map_err(|e| e.to_string());
    let d_c = model.denoise_sigma(&x, 1.3, &cond).map_err(|e| e.to_string())?;
    let (v0, v1, v2) = (run(0.0, &cond, &null)?, run(1.0, &cond, &null)?, run(2.0, &cond, &null)?);
    let identity = v0 == d_c;
    let affine = v2
        .data()
        .iter()
        .zip(v1.data())
        .zip(v0.data())
        .map(|((a, b), c)| (a - (2.0 * b - c)).abs() / (a.abs() + b.abs() + c.abs()).max(1.0))
        .fold(0.0f64, f64::max);
    let mut collapse = true;
    for w in [0.5, 1.0, 5.0, 7.5] {
        collapse &= run(w, &cond, &cond)? == d_c;
    }
    let differs = v1 != d_c;
    let pass = identity && affine < 1e-14 && collapse && differs;
    Ok((
        pass,
        format!("w=0 identity {identity}; max affine residual {affine:.1e}; cond==null collapse {collapse}; guidance active {differs}"),
    ))
}

pub fn gradients() -> Verdict {
    let (count, fwd) = forward_gradients();
    let dsm = dsm_gradients();
    let pass = count <= 10_000 && fwd.max_rel < 1e-3 && dsm.max_rel < 1e-3;
    Ok((
        pass,
        format!(
            "{count} params; forward {} checks max rel {:.1e}; DSM {} checks max rel {:.1e} (worst {})",
            fwd.checked, fwd.max_rel, dsm.checked, dsm.max_rel, dsm.worst
        ),
    ))
}

pub fn frechet_closed_forms() -> Verdict {
    let stats = |m: Vec<f64>, c: DMatrix<f64>| FeatureStats {
        mean: DVector::from_vec(m),
        cov: c,
        count: 100,
    };
    let fd = |a: &FeatureStats, b: &FeatureStats| frechet_distance(a, b).map_err(|e| e.to_string());
    let mut r = rng(1);
    let m = Tensor::randn(&[6, 6], 1.0, &mut r);
    let a = DMatrix::from_row_slice(6, 6, m.data());
    let cov = &a * a.transpose();
    let base = stats(vec![0.3; 6], cov.clone());
    let same = fd(&base, &base.clone())?;
    let mu = Tensor::randn(&[8], 1.0, &mut r).into_data();
    let shift = fd(&stats(vec![0.0; 8], DMatrix::identity(8, 8)), &stats(mu.clone(), DMatrix::identity(8, 8)))?;
    let want = mu.iter().map(|v| v * v).sum::<f64>();
    let one = |m: f64, v: f64| stats(vec![m], DMatrix::from_element(1, 1, v));
    let d1 = fd(&one(1.2, 2.25), &one(-0.4, 0.36))?;
    let want1 = 1.6f64.powi(2) + (1.5f64 - 0.6).powi(2);
    let pass = same == 0.0 && (shift - want).abs() < 1e-6 && (d1 - want1).abs() < 1e-10;
    Ok((
        pass,
        format!(
            "identical {same}; shifted |err| {:.1e} (<= 1e-6); 1-D |err| {:.1e} (<= 1e-10)",
            (shift - want).abs(),
            (d1 - want1).abs()
        ),
    ))
}

pub fn determinism() -> Verdict {
    let cfg = toy_config(21, vec![stage("a", 5, 8), stage("b", 4, 16)]);
    let data = synthetic_data(16, 4);
    let full = |_: ()| -> Result<Vec<u8>, String> {
        let mut st = TrainState::init(&cfg).map_err(|e| e.to_string())?;
        Trainer::new(&cfg, &data, None)
            .map_err(|e| e.to_string())?
            .run(&mut st, &mut |_| {})
            .map_err(|e| e.to_string())?;
        Ok(st.to_checkpoint(&cfg, None).map_err(|e| e.to_string())?.to_bytes())
    };
    let (a, b) = (full(())?, full(())?);

    let mut st = TrainState::init(&cfg).map_err(|e| e.to_string())?;
    let mut tr = Trainer::new(&cfg, &data, None).map_err(|e| e.to_string())?;
    tr.run_stage_until(&mut st, 3, &mut |_| {}).map_err(|e| e.to_string())?;
    let bytes = st.to_checkpoint(&cfg, None).map_err(|e| e.to_string())?.to_bytes();
    let ck = Checkpoint::read_from(bytes.as_slice()).map_err(|e| e.to_string())?;
    let (cfg2, mut resumed, _) = TrainState::from_checkpoint(&ck).map_err(|e| e.to_string())?;
    Trainer::new(&cfg2, &data, None)
        .map_err(|e| e.to_string())?
        .run(&mut resumed, &mut |_| {})
        .map_err(|e| e.to_string())?;
    let c = resumed.to_checkpoint(&cfg2, None).map_err(|e| e.to_string())?.to_bytes();

    let schedule = build_schedule(1000, 1e-4, 2e-2).map_err(|e| e.to_string())?;
    let (_, st, _) = TrainState::from_checkpoint(&Checkpoint::read_from(a.as_slice()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let pipe = Pipeline {
        model: &st.model,
        params: &st.ema,
        text: &st.text,
        schedule: &schedule,
        autoencoder: None,
    };
    let mut req = SampleRequest::new("disk", (8, 8), 77);
    req.steps = 10;
    let s1 = pipe.generate(&req, 3, &SdeConfig::default()).map_err(|e| e.to_string())?;
    let s2 = pipe.generate(&req, 3, &SdeConfig::default()).map_err(|e| e.to_string())?;
    let pass = a == b && a == c && s1 == s2;
    Ok((
        pass,
        format!(
            "same-seed checkpoints identical {}; resumed-at-step-3 identical {}; same-seed samples identical {}",
            a == b,
            a == c,
            s1 == s2
        ),
    ))
}

pub fn conditioning_statistics() -> Verdict {
    let mut r = rng(5);
    let text = TextEncoder::new(tiny_text(), &mut r).map_err(|e| e.to_string())?;
    let ctx = text.encode_caption("square").map_err(|e| e.to_string())?;
    let null = text.null_context();
    let n = 100_000;
    let mut hits = 0;
    for _ in 0..n {
        if cfg_dropout(&ctx, &null, 0.1, &mut r).map_err(|e| e.to_string())? == null {
            hits += 1;
        }
    }
    let rate = hits as f64 / n as f64;

    let mut counts = vec![0usize; 17];
    let mut top_fixed = true;
    for _ in 0..n {
        let c = sample_train_conditioning((16, 32), (16, 16), &mut r).map_err(|e| e.to_string())?;
        counts[c.crop.1 as usize] += 1;
        top_fixed &= c.crop.0 == 0;
    }
    let (chi2, p) = chi_square_uniform(&counts);
    let pass = (rate - 0.1).abs() <= 0.01 && p > 0.01 && top_fixed;
    Ok((
        pass,
        format!("dropout rate {rate:.4} (0.10 +- 0.01); crop c_left over 0..=16: chi2 {chi2:.2}, p {p:.3} (> 0.01)"),
    ))
}
