//! Golden-fixture audits and augmentation statistics, reported as lists of
//! mismatches so both focused tests and the acceptance run can use them.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use ssl_desk::augment::{
    sample_ratio, AugmentationStrategy, CropConfig, OpConfig, OpKind, RatioDistribution, RngStream, StrategyName,
    ViewGeometry, ViewPipeline,
};
use ssl_desk::data::Image;
use ssl_desk::harness::MethodPreset;
use ssl_desk::losses::LossKind;
use ssl_desk::nn::{build_projector, Activation, Normalization};
use ssl_desk::pretrain::{OptimizerKind, ScheduleKind};
use ssl_desk::Method;

pub const CALIBRATION_DRAWS: u64 = 10_000;
pub const KS_DRAWS: usize = 100_000;
/// Asymptotic one-sample Kolmogorov-Smirnov critical value coefficient at α = 0.01.
pub const KS_COEFF_01: f64 = 1.628;

fn check<T: PartialEq + std::fmt::Debug>(out: &mut Vec<String>, what: String, got: T, want: T) {
    if got != want {
        out.push(format!("{what}: got {got:?}, fixture {want:?}"));
    }
}

#[derive(Debug, Deserialize)]
struct StrategyFixture {
    globals: usize,
    locals: usize,
    global_area: [f64; 2],
    local_area: Option<[f64; 2]>,
    ratio: [f64; 2],
    ratio_distribution: RatioDistribution,
    jitter: Option<[f64; 4]>,
    probabilities: BTreeMap<String, Vec<f64>>,
}

fn op_kind(name: &str) -> OpKind {
    match name {
        "color_jitter" => OpKind::ColorJitter,
        "grayscale" => OpKind::Grayscale,
        "hflip" => OpKind::HFlip,
        "blur" => OpKind::Blur,
        "solarize" => OpKind::Solarize,
        other => panic!("fixture names unknown op {other}"),
    }
}

fn jitter_of(p: &ViewPipeline) -> Option<[f64; 4]> {
    p.ops.iter().find_map(|o| match o {
        OpConfig::ColorJitter { strength: s, .. } => Some([s.brightness, s.contrast, s.saturation, s.hue]),
        _ => None,
    })
}

/// Differences between the five strategy presets and `fixtures/strategies.json`.
pub fn strategy_mismatches() -> Vec<String> {
    let fixture: BTreeMap<String, StrategyFixture> =
        serde_json::from_str(include_str!("../fixtures/strategies.json")).unwrap();
    let mut out = Vec::new();
    check(&mut out, "strategy count".into(), fixture.len(), StrategyName::ALL.len());
    let geometry = ViewGeometry::default();
    for name in StrategyName::ALL {
        let Some(want) = fixture.get(name.name()) else {
            out.push(format!("{name}: missing from fixture"));
            continue;
        };
        let s = AugmentationStrategy::preset(name, geometry);
        check(&mut out, format!("{name} globals"), s.global_count(), want.globals);
        check(&mut out, format!("{name} locals"), s.local_count(), want.locals);
        for (g, p) in s.globals.iter().enumerate() {
            let crop = p.crop().unwrap();
            check(&mut out, format!("{name} global {g} area"), crop.area_range, want.global_area);
            check(&mut out, format!("{name} global {g} ratio"), crop.ratio_range, want.ratio);
            check(&mut out, format!("{name} global {g} ratio law"), crop.ratio_distribution, want.ratio_distribution);
            check(&mut out, format!("{name} global {g} size"), crop.output_size, geometry.global_size);
            check(&mut out, format!("{name} global {g} jitter"), jitter_of(p), want.jitter);
        }
        let local_crop = s.local.as_ref().map(|l| l.pipeline.crop().unwrap().clone());
        check(&mut out, format!("{name} local area"), local_crop.as_ref().map(|c| c.area_range), want.local_area);
        if let Some(c) = local_crop {
            check(&mut out, format!("{name} local size"), c.output_size, geometry.local_size);
            check(&mut out, format!("{name} local ratio law"), c.ratio_distribution, want.ratio_distribution);
        }
        for (op, probs) in &want.probabilities {
            check(&mut out, format!("{name} {op} probabilities"), &s.probabilities(op_kind(op)), probs);
        }
    }
    out
}

#[derive(Debug, Deserialize)]
struct ProjectorFixture {
    dims: Vec<usize>,
    batchnorm: bool,
    final_norm: bool,
    activation: Activation,
    prototypes: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct PresetFixture {
    predictor: bool,
    momentum: bool,
    loss: LossKind,
    tau: Option<f64>,
    tau_left: Option<f64>,
    tau_right: Option<f64>,
    tau_right_schedule: Option<[f64; 2]>,
    optimizer: OptimizerKind,
    trust_coefficient: Option<f64>,
    lr_peak_per_256: f64,
    weight_decay: [f64; 2],
    strategy: StrategyName,
    projector: ProjectorFixture,
}

/// Differences between the six method presets and `fixtures/presets.json`.
pub fn preset_mismatches() -> Vec<String> {
    let golden: BTreeMap<Method, PresetFixture> =
        serde_json::from_str(include_str!("../fixtures/presets.json")).unwrap();
    let mut out = Vec::new();
    check(&mut out, "preset count".into(), golden.len(), Method::ALL.len());
    for preset in MethodPreset::all() {
        let m = preset.method;
        let Some(want) = golden.get(&m) else {
            out.push(format!("{m}: missing from fixture"));
            continue;
        };
        check(&mut out, format!("{m} predictor"), preset.predictor, want.predictor);
        check(&mut out, format!("{m} momentum"), preset.momentum.is_some(), want.momentum);
        check(&mut out, format!("{m} loss"), preset.loss.kind, want.loss);
        let (tau, tau_left, tau_right) = match preset.loss.kind {
            LossKind::Nce => (Some(preset.loss.tau), None, None),
            LossKind::Clu => (None, Some(preset.loss.tau_left), Some(preset.loss.tau_right)),
            LossKind::Sim | LossKind::Cco => (None, None, None),
        };
        check(&mut out, format!("{m} tau"), tau, want.tau);
        check(&mut out, format!("{m} tau_left"), tau_left, want.tau_left);
        check(&mut out, format!("{m} tau_right"), tau_right, want.tau_right);
        let sched = preset.tau_right.map(|s| (s.kind, [s.start, s.end]));
        check(
            &mut out,
            format!("{m} temperature schedule"),
            sched,
            want.tau_right_schedule.map(|e| (ScheduleKind::Cosine, e)),
        );
        check(&mut out, format!("{m} optimizer"), preset.optimizer.kind, want.optimizer);
        if let Some(tc) = want.trust_coefficient {
            check(&mut out, format!("{m} trust coefficient"), preset.optimizer.trust_coefficient, tc);
        }
        check(&mut out, format!("{m} lr peak"), preset.lr.peak, want.lr_peak_per_256);
        check(&mut out, format!("{m} lr schedule"), preset.lr.kind, ScheduleKind::WarmupCosine);
        let wd = preset.weight_decay;
        let wd_ends = match wd.kind {
            ScheduleKind::Constant => [wd.peak, wd.peak],
            _ => [wd.start, wd.end],
        };
        check(&mut out, format!("{m} weight decay"), wd_ends, want.weight_decay);
        check(&mut out, format!("{m} strategy"), preset.strategy, want.strategy);

        let proj = build_projector(m, 1).unwrap();
        let p = &want.projector;
        check(&mut out, format!("{m} projector dims"), &proj.dims, &p.dims);
        check(&mut out, format!("{m} projector batchnorm"), proj.normalization == Normalization::BatchNorm, p.batchnorm);
        check(&mut out, format!("{m} projector final norm"), proj.final_norm, p.final_norm);
        check(&mut out, format!("{m} projector activation"), proj.activation, p.activation);
        check(&mut out, format!("{m} prototypes"), proj.prototypes, p.prototypes);
    }
    out
}

/// Ops whose empirical firing rate over `CALIBRATION_DRAWS` misses its probability by more than 3 SE.
pub fn calibration_failures() -> Vec<String> {
    let image = Image::filled(8, 8, [0.6, 0.3, 0.2]);
    let geometry = ViewGeometry { global_size: 8, local_size: 4 };
    let mut out = Vec::new();
    for name in StrategyName::ALL {
        let s = AugmentationStrategy::preset(name, geometry);
        let groups: Vec<&ViewPipeline> = s.globals.iter().chain(s.local.as_ref().map(|l| &l.pipeline)).collect();
        for (g, pipeline) in groups.into_iter().enumerate() {
            let mut fired: HashMap<OpKind, u64> = HashMap::new();
            for draw in 0..CALIBRATION_DRAWS {
                let stream = RngStream::new(2024).derive(&[name as u64, g as u64, draw]);
                for (kind, hit) in pipeline.apply_traced(&image, stream).1 {
                    *fired.entry(kind).or_default() += u64::from(hit);
                }
            }
            for op in &pipeline.ops {
                let Some(p) = op.probability() else { continue };
                let freq = fired.get(&op.kind()).copied().unwrap_or(0) as f64 / CALIBRATION_DRAWS as f64;
                let se = (p * (1.0 - p) / CALIBRATION_DRAWS as f64).sqrt();
                if (freq - p).abs() > 3.0 * se {
                    out.push(format!("{name} group {g} {:?}: frequency {freq} vs p {p}", op.kind()));
                }
            }
        }
    }
    out
}

/// Largest gap between the empirical CDF of `samples` and the uniform CDF on [lo, hi].
pub fn ks_uniform(mut samples: Vec<f64>, lo: f64, hi: f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

pub fn ks_critical(n: usize) -> f64 {
    KS_COEFF_01 / (n as f64).sqrt()
}

/// KS statistic of `KS_DRAWS` log-ratios against uniform on [ln 0.25, ln 1.33].
pub fn log_ratio_ks(seed: u64) -> f64 {
    let cfg = CropConfig {
        area_range: [0.08, 1.0],
        ratio_range: [0.25, 1.33],
        ratio_distribution: RatioDistribution::Logarithmic,
        output_size: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logs = (0..KS_DRAWS).map(|_| sample_ratio(&cfg, &mut rng).ln()).collect();
    ks_uniform(logs, 0.25f64.ln(), 1.33f64.ln())
}
