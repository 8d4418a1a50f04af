//! Experiment matrix runner: enumerates quantizer combinations, trains
//! each cell across the λ sweep with repeated seeds, evaluates RD curves,
//! and emits comparison tables against the AUN anchor.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::codec::{self, CodecLayout, CodecParams};
use crate::data::{self, ImageSet};
use crate::error::{Error, Result};
use crate::metrics::{self, RDCurve, RDPoint};
use crate::quant::{Mode, QuantContext, QuantKind, QuantizerSpec};
use crate::rng::{self, slot};
use crate::tensor::adam::AdamState;
use crate::tensor::Tape;

pub const DEFAULT_LAMBDAS: [f64; 4] = [0.001, 0.003, 0.01, 0.03];

#[derive(Clone, Debug)]
pub enum DatasetSpec {
    Synth { count: usize, size: usize, seed: u64 },
    PpmDir(PathBuf),
}

impl DatasetSpec {
    pub fn load(&self) -> Result<ImageSet> {
        match self {
            DatasetSpec::Synth { count, size, seed } => data::synth_dataset(*count, *size, *seed),
            DatasetSpec::PpmDir(dir) => data::load_ppm_dir(dir),
        }
    }
}

/// One cell column of the combination matrix plus its training settings.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub name: String,
    pub spec_ent: QuantizerSpec,
    pub spec_dec: QuantizerSpec,
    pub lambdas: Vec<f64>,
    pub iterations: u64,
    pub batch: usize,
    pub patch: usize,
    pub seeds: Vec<u64>,
    pub layout: CodecLayout,
    pub lr: f32,
    pub train_data: DatasetSpec,
    pub test_data: DatasetSpec,
    pub out_dir: PathBuf,
}

/// Re-express the paper-scale schedule anchors as fractions of the run
/// length: t0 at 96% of total for SGA/STH, 99% for SRA, with c scaled so
/// the decay covers the remaining iterations the way the 10^6-iteration
/// anchors did.
pub fn desk_spec(kind: QuantKind, iterations: u64) -> QuantizerSpec {
    let mut spec = QuantizerSpec::new(kind);
    let (frac, paper_remaining) = match kind {
        QuantKind::Sga | QuantKind::Sth => (0.96, 40_000.0),
        QuantKind::Sra => (0.99, 10_000.0),
        _ => return spec,
    };
    if iterations == 0 {
        return spec;
    }
    let t0 = (iterations as f64 * frac).round() as u64;
    let remaining = (iterations - t0).max(1) as f64;
    spec.t0 = t0;
    spec.c = 0.0003 * paper_remaining / remaining;
    spec
}

impl ExperimentConfig {
    pub fn desk_default(ent: QuantKind, dec: QuantKind, out_dir: PathBuf) -> Self {
        let iterations = 3000;
        ExperimentConfig {
            name: format!("{}+{}", ent.name(), dec.name()),
            spec_ent: desk_spec(ent, iterations),
            spec_dec: desk_spec(dec, iterations),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            iterations,
            batch: 8,
            patch: 64,
            seeds: vec![1, 2],
            layout: CodecLayout::default(),
            lr: 1e-4,
            train_data: DatasetSpec::Synth { count: 16, size: 128, seed: 7 },
            test_data: DatasetSpec::Synth { count: 8, size: 64, seed: 1007 },
            out_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| l <= 0.0) {
            return Err(Error::invalid("lambdas must be non-empty and positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.patch % 8 != 0 || self.patch == 0 {
            return Err(Error::invalid("patch size must be a positive multiple of 8"));
        }
        if (self.spec_ent.kind == QuantKind::Sth || self.spec_dec.kind == QuantKind::Sth)
            && self.spec_ent.kind != self.spec_dec.kind
        {
            return Err(Error::invalid("sth appears only as a single (paired-with-itself) configuration"));
        }
        self.spec_ent.validate()?;
        self.spec_dec.validate()
    }
}

/// All single-quantizer configs plus all ordered pairs of distinct
/// non-STH kinds. With all seven kinds this is 7 + 6P2 = 37.
pub fn enumerate_matrix(kinds: &[QuantKind]) -> Result<Vec<(QuantKind, QuantKind)>> {
    for (i, a) in kinds.iter().enumerate() {
        if kinds[..i].contains(a) {
            return Err(Error::invalid(format!("duplicate quantizer kind '{}'", a.name())));
        }
    }
    let mut out: Vec<(QuantKind, QuantKind)> = kinds.iter().map(|&k| (k, k)).collect();
    for &ent in kinds {
        for &dec in kinds {
            if ent != dec && ent != QuantKind::Sth && dec != QuantKind::Sth {
                out.push((ent, dec));
            }
        }
    }
    Ok(out)
}

/// Everything produced by training one (λ, seed) cell.
pub struct TrainedCell {
    pub params: CodecParams,
    pub losses: Vec<f64>,
    pub point: RDPoint,
}

pub fn cell_hash(cfg: &ExperimentConfig, lambda: f64, seed: u64) -> u64 {
    rng::hash64(&format!("{}|{}|{}", cfg.name, lambda, seed))
}

/// Train one cell from scratch and evaluate it with hard rounding.
pub fn train_cell(
    cfg: &ExperimentConfig,
    train: &ImageSet,
    test: &ImageSet,
    lambda: f64,
    seed: u64,
) -> Result<TrainedCell> {
    cfg.validate()?;
    let exp_hash = cell_hash(cfg, lambda, seed);
    let mut params = CodecParams::new(cfg.layout, &[exp_hash]);
    let mut adam = AdamState::new(cfg.lr, &params.param_sizes());
    let mut losses = Vec::with_capacity(cfg.iterations as usize);
    for t in 0..cfg.iterations {
        let loss = train_iteration(cfg, &mut params, &mut adam, train, lambda, t, exp_hash)?;
        if !loss.is_finite() {
            return Err(Error::invalid(format!(
                "loss became non-finite at iteration {t} (lambda={lambda}, seed={seed})"
            )));
        }
        losses.push(loss);
    }
    let point = eval_model(&params, test)?;
    Ok(TrainedCell { params, losses, point })
}

/// One optimizer step; returns the total loss.
pub fn train_iteration(
    cfg: &ExperimentConfig,
    params: &mut CodecParams,
    adam: &mut AdamState,
    train: &ImageSet,
    lambda: f64,
    t: u64,
    exp_hash: u64,
) -> Result<f64> {
    let mut data_rng = rng::substream(&[exp_hash, t, slot::DATA]);
    let batch = data::random_crop(train, cfg.batch, cfg.patch, &mut data_rng)?;
    let mut tape = Tape::new();
    let mut ctx = QuantContext::new(Mode::Train, t, exp_hash);
    let fwd = codec::forward_train(
        &mut tape,
        &batch,
        params,
        &cfg.spec_ent,
        &cfg.spec_dec,
        &mut ctx,
        lambda,
    )?;
    let grads = tape.backward(fwd.loss)?;
    let mut tensors = params.tensors_mut();
    for (var, tensor) in fwd.param_vars.iter().zip(tensors.iter_mut()) {
        grads.write_to(*var, tensor)?;
    }
    adam.step(&mut tensors)?;
    Ok(fwd.parts.total)
}

/// Evaluate a frozen model on a full image set: mean PSNR over images,
/// estimated BPP over total pixels.
pub fn eval_model(params: &CodecParams, test: &ImageSet) -> Result<RDPoint> {
    if test.images.is_empty() {
        return Err(Error::invalid("eval: empty test set"));
    }
    let mut psnr_sum = 0.0f64;
    let mut bits = 0.0f64;
    let mut pixels = 0.0f64;
    for img in &test.images {
        let x = img.to_tensor();
        let out = codec::forward_eval(&x, params)?;
        psnr_sum += metrics::psnr(x.data(), &out.reconstruction)?;
        bits += out.estimated_bits;
        pixels += (img.h * img.w) as f64;
    }
    Ok(RDPoint { bpp: bits / pixels, psnr: psnr_sum / test.images.len() as f64 })
}

#[derive(Clone, Debug)]
pub struct CellFailure {
    pub lambda: f64,
    pub seed: u64,
    pub message: String,
}

pub struct ExperimentOutcome {
    /// One curve per seed, labelled `{name}#seed{seed}`.
    pub curves: Vec<RDCurve>,
    pub failures: Vec<CellFailure>,
}

fn cell_stem(cfg: &ExperimentConfig, lambda: f64, seed: u64) -> String {
    format!("{}_lam{}_seed{}", cfg.name, lambda, seed)
}

fn write_if_absent(path: &Path, content: &str) -> Result<()> {
    if !path.exists() {
        std::fs::write(path, content)?;
    }
    Ok(())
}

/// Run (or resume) every (λ, seed) cell of one experiment. Completed
/// cells are skipped; a diverging cell is recorded as a failure and does
/// not sink the rest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let cells_dir = cfg.out_dir.join("cells");
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    let curves_dir = cfg.out_dir.join("curves");
    for d in [&cells_dir, &ckpt_dir, &curves_dir] {
        std::fs::create_dir_all(d)?;
    }
    let train = cfg.train_data.load()?;
    let test = cfg.test_data.load()?;

    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let mut points = Vec::new();
        for &lambda in &cfg.lambdas {
            let stem = cell_stem(cfg, lambda, seed);
            let cell_file = cells_dir.join(format!("{stem}.csv"));
            if cell_file.exists() {
                let text = std::fs::read_to_string(&cell_file)?;
                let mut parts = text.trim().split(',');
                let bpp: f64 = parts.next().unwrap_or("").parse().map_err(|_| {
                    Error::BadFile {
                        path: cell_file.display().to_string(),
                        detail: "expected 'bpp,psnr'".into(),
                    }
                })?;
                let psnr: f64 = parts.next().unwrap_or("").parse().map_err(|_| {
                    Error::BadFile {
                        path: cell_file.display().to_string(),
                        detail: "expected 'bpp,psnr'".into(),
                    }
                })?;
                points.push(RDPoint { bpp, psnr });
                continue;
            }
            match train_cell(cfg, &train, &test, lambda, seed) {
                Ok(cell) => {
                    cell.params.save(&ckpt_dir.join(format!("{stem}.qlt")))?;
                    write_if_absent(&cell_file, &format!("{},{}\n", cell.point.bpp, cell.point.psnr))?;
                    points.push(cell.point);
                }
                Err(e) => {
                    let msg = e.to_string();
                    std::fs::write(cells_dir.join(format!("{stem}.failed")), &msg)?;
                    failures.push(CellFailure { lambda, seed, message: msg });
                }
            }
        }
        if points.len() >= 2 {
            let label = format!("{}#seed{}", cfg.name, seed);
            let curve = RDCurve::new(label, points)?;
            let curve_file = curves_dir.join(format!("{}_seed{}.csv", cfg.name, seed));
            write_if_absent(&curve_file, &metrics::curves_to_csv(std::slice::from_ref(&curve)))?;
            curves.push(curve);
        }
    }
    Ok(ExperimentOutcome { curves, failures })
}

/// Run a whole matrix of experiments, optionally with several worker
/// threads (cells stay independent; aggregation is single-threaded).
pub fn run_matrix(configs: &[ExperimentConfig], parallel: usize) -> Result<Vec<ExperimentOutcome>> {
    let parallel = parallel.max(1);
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..configs.len()).collect());
    let results: Mutex<Vec<Option<Result<ExperimentOutcome>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..parallel.min(configs.len().max(1)) {
            scope.spawn(|| loop {
                let idx = match queue.lock().unwrap().pop_front() {
                    Some(i) => i,
                    None => break,
                };
                let outcome = run_experiment(&configs[idx]);
                results.lock().unwrap()[idx] = Some(outcome);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker finished without storing a result"))
        .collect()
}

/// BD-rate comparison table in the shape of the paper's result tables:
/// one row per (entropy-model, decoder) config, one column per dataset,
/// plus the cross-dataset average.
#[derive(Clone, Debug)]
pub struct ResultTable {
    pub anchor: String,
    pub datasets: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Clone, Debug)]
pub struct TableRow {
    pub config: String,
    /// BD rate (%) per dataset; NaN marks a missing cell.
    pub bd: Vec<f64>,
    pub average: f64,
}

fn config_of_label(label: &str) -> &str {
    label.split('#').next().unwrap_or(label)
}

/// Average BD rate of every config against the anchor config, computed
/// per seed curve and averaged at the BD-rate level.
pub fn emit_table(datasets: &[(String, Vec<RDCurve>)], anchor: &str) -> Result<ResultTable> {
    if datasets.is_empty() {
        return Err(Error::invalid("emit_table: no datasets"));
    }
    // preserve first-seen config order across datasets
    let mut configs: Vec<String> = Vec::new();
    for (_, curves) in datasets {
        for c in curves {
            let cfg = config_of_label(&c.label).to_string();
            if !configs.contains(&cfg) {
                configs.push(cfg);
            }
        }
    }
    if !configs.iter().any(|c| c == anchor) {
        return Err(Error::invalid(format!("anchor config '{anchor}' has no curves")));
    }
    let mut rows = Vec::new();
    for config in &configs {
        let mut bd = Vec::new();
        for (_, curves) in datasets {
            if config == anchor {
                bd.push(0.0); // anchor row is exactly 0.00 by convention
                continue;
            }
            let anchors: Vec<&RDCurve> =
                curves.iter().filter(|c| config_of_label(&c.label) == anchor).collect();
            let tests: Vec<&RDCurve> =
                curves.iter().filter(|c| config_of_label(&c.label) == *config).collect();
            if anchors.is_empty() || tests.is_empty() {
                bd.push(f64::NAN);
                continue;
            }
            let n = anchors.len().min(tests.len());
            let mut acc = 0.0;
            for i in 0..n {
                acc += metrics::bd_rate(anchors[i], tests[i])?;
            }
            bd.push(acc / n as f64);
        }
        let finite: Vec<f64> = bd.iter().copied().filter(|v| v.is_finite()).collect();
        let average = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        rows.push(TableRow { config: config.clone(), bd, average });
    }
    Ok(ResultTable {
        anchor: anchor.to_string(),
        datasets: datasets.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

impl ResultTable {
    /// CSV with the best and second-best averages flagged.
    pub fn to_csv(&self) -> String {
        let mut ranked: Vec<(usize, f64)> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.average.is_finite())
            .map(|(i, r)| (i, r.average))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        let flag = |i: usize| -> &'static str {
            if Some(i) == ranked.first().map(|r| r.0) {
                "best"
            } else if Some(i) == ranked.get(1).map(|r| r.0) {
                "second"
            } else {
                ""
            }
        };
        let mut out = String::from("entropy_model,decoder");
        for d in &self.datasets {
            out.push(',');
            out.push_str(d);
        }
        out.push_str(",average,flag\n");
        for (i, row) in self.rows.iter().enumerate() {
            let (ent, dec) = row.config.split_once('+').unwrap_or((row.config.as_str(), ""));
            out.push_str(&format!("{ent},{dec}"));
            for v in &row.bd {
                out.push_str(&format!(",{v:.2}"));
            }
            out.push_str(&format!(",{:.2},{}\n", row.average, flag(i)));
        }
        out
    }
}
