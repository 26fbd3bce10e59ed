//! The online filtering training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use crate::datagen::{
    apply_small_cluster_noise, apply_symmetric_noise, gen_dataset, gen_split, NoiseModel, NoiseReport,
    NoisyDataset, PkSampler,
};
use crate::encoder::{lr_at, EncoderParams, ForwardCache, OptimizerState, Sgd};
use crate::error::Result;
use crate::eval::{
    filter_accuracy, kappa_snapshot, pclean_auc, retrieval_metrics, split_histogram, write_histogram_csv,
    write_kappa_rows, HistogramRow, KappaRecord, MetricsRow, KAPPA_HEADER, METRICS_HEADER,
};
use crate::filters::{
    batch_positive, filter_batch, memory_positive, posterior_at, proxy_sim,
    vmf_sim, Estimator, FilterDiag, FilterState, FILTER_DIAG_HEADER,
};
use crate::harness::config::{ExperimentConfig, LossKind};
use crate::losses::{
    contrastive_batch_loss, memory_contrastive_loss, soft_triple_loss, ContrastiveMargin, LossOutput, ProxySet,
};
use crate::membank::{MemoryBank, MemoryEntry};
use crate::numerics::{dot, UnitVector};
use crate::rng::{self, derive_seed, Rng};
use crate::thresholds::ThresholdPolicy;
use crate::{ClassId, PrismError};

// Seed streams derived from the two config seeds. Training samples use
// stream 1 of the data seed inside `gen_dataset`.
const STREAM_HELDOUT: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_PROXIES: u64 = 5;
const STREAM_BATCHES: u64 = 6;

/// Wall-clock totals per phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub embed: Duration,
    pub filter: Duration,
    pub loss: Duration,
    pub update: Duration,
    pub eval: Duration,
    pub total: Duration,
}

impl Timings {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "phase,seconds")?;
        for (name, d) in [
            ("embed", self.embed),
            ("filter", self.filter),
            ("loss", self.loss),
            ("update", self.update),
            ("eval", self.eval),
            ("total", self.total),
        ] {
            writeln!(out, "{name},{}", d.as_secs_f64())?;
        }
        Ok(())
    }
}

/// Training-set scores taken once, at the probe iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub iter: usize,
    pub estimator: Estimator,
    pub probs: Vec<f64>,
    /// AUC of the active estimator's scores as a clean-vs-noisy classifier.
    pub auc: Option<f64>,
    /// AUC of center-based average similarity on the same features and bank.
    pub avgsim_auc: Option<f64>,
    pub histogram: Vec<HistogramRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub data_seed: u64,
    pub noise: NoiseReport,
    /// Loss per iteration; `None` for skipped updates.
    pub losses: Vec<Option<f64>>,
    pub diags: Vec<FilterDiag>,
    pub batch_probs: Vec<Vec<f64>>,
    /// Fraction of kept samples that are truly clean, per iteration.
    pub filter_acc: Vec<Option<f64>>,
    pub skipped_iters: Vec<usize>,
    pub metrics: Vec<MetricsRow>,
    pub kappa: Vec<KappaRecord>,
    pub probe: Option<Probe>,
    /// Among same-label pairs of all sampled batches, the truly positive fraction.
    pub pair_purity: Option<f64>,
    pub timings: Timings,
}

impl RunRecord {
    pub fn final_metrics(&self) -> Option<&MetricsRow> {
        self.metrics.last()
    }

    /// Evaluation row with the highest held-out precision@1; the earliest wins ties.
    pub fn best_metrics(&self) -> Option<&MetricsRow> {
        self.metrics.iter().fold(None, |best: Option<&MetricsRow>, m| match best {
            Some(b) if b.p_at_1 >= m.p_at_1 => Some(b),
            _ => Some(m),
        })
    }

    /// Mean per-iteration filter accuracy over the last `n` iterations that kept anything.
    pub fn mean_filter_acc_last(&self, n: usize) -> Option<f64> {
        let start = self.filter_acc.len().saturating_sub(n);
        let vals: Vec<f64> = self.filter_acc[start..].iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn kappas_at(&self, iter: usize) -> Vec<f64> {
        self.kappa.iter().filter(|k| k.iter == iter).map(|k| k.kappa).collect()
    }

    /// Writes every deterministic output plus `timing.csv` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut m = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(m, "{METRICS_HEADER}")?;
        for row in &self.metrics {
            row.write_row(&mut m)?;
        }
        m.flush()?;
        let mut d = BufWriter::new(File::create(dir.join("filter_diag.csv"))?);
        writeln!(d, "{FILTER_DIAG_HEADER}")?;
        for row in &self.diags {
            row.write_row(&mut d)?;
        }
        d.flush()?;
        let mut k = BufWriter::new(File::create(dir.join("kappa.csv"))?);
        writeln!(k, "{KAPPA_HEADER}")?;
        write_kappa_rows(&self.kappa, &mut k)?;
        k.flush()?;
        let rows = self.probe.as_ref().map(|p| p.histogram.as_slice()).unwrap_or(&[]);
        write_histogram_csv(rows, BufWriter::new(File::create(dir.join("histogram.csv"))?))?;
        self.timings.write_csv(BufWriter::new(File::create(dir.join("timing.csv"))?))?;
        Ok(())
    }
}

/// Training and evaluation data for one configuration.
pub struct Datasets {
    pub train: NoisyDataset,
    pub heldout: NoisyDataset,
    pub noise: NoiseReport,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let spec = cfg.spec();
    let clean = gen_dataset(&spec)?;
    let held_spec = crate::datagen::SyntheticSpec { samples_per_class: cfg.heldout_per_class, ..spec };
    let heldout = gen_split(&held_spec, derive_seed(cfg.data_seed, STREAM_HELDOUT))?;
    let mut noise_rng = rng::stream(cfg.data_seed, STREAM_NOISE);
    let (train, noise) = match cfg.noise_model {
        NoiseModel::None => {
            let report = NoiseReport { requested: 0.0, achieved: 0.0, reached: true };
            (clean, report)
        }
        NoiseModel::Symmetric => apply_symmetric_noise(&clean, cfg.noise_rate, &mut noise_rng)?,
        NoiseModel::SmallCluster => {
            apply_small_cluster_noise(&clean, cfg.noise_rate, cfg.cluster_size, &mut noise_rng)?
        }
    };
    Ok(Datasets { train, heldout, noise })
}

/// Trainable state plus everything the loop mutates.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub data: Datasets,
    pub encoder: EncoderParams,
    pub bank: MemoryBank,
    pub state: FilterState,
    pub proxies: Option<ProxySet>,
    policy: ThresholdPolicy,
    optimizer: OptimizerState,
    sgd: Sgd,
    sampler: PkSampler,
    batch_rng: Rng,
    margin: ContrastiveMargin,
    pair_counts: (u64, u64),
    window_kept: usize,
    window_clean: usize,
    window_seen: usize,
    window_probs: Vec<f64>,
    window_mask: Vec<bool>,
    pub record: RunRecord,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = build_datasets(&cfg)?;
        let encoder = EncoderParams::init(&cfg.layer_dims(), &mut rng::stream(cfg.seed, STREAM_INIT))?;
        let bank = MemoryBank::new(cfg.memory_size, cfg.embedding_dim)?;
        let state = FilterState::new(cfg.estimator, cfg.warmup_iters).with_kappa_formula(cfg.kappa_formula);
        let proxies = if cfg.loss == LossKind::SoftTriple {
            let classes: Vec<ClassId> = (0..cfg.num_classes).collect();
            let set = ProxySet::random(
                &classes,
                cfg.proxies_per_class,
                cfg.embedding_dim,
                &mut rng::stream(cfg.seed, STREAM_PROXIES),
            )?
            .with_scales(cfg.softtriple_gamma, cfg.softtriple_lambda, cfg.softtriple_delta)?;
            Some(set)
        } else {
            None
        };
        let policy = cfg.policy()?;
        let optimizer = OptimizerState::new(cfg.base_lr, cfg.total_iters)?;
        let sgd = Sgd::new(cfg.momentum)?;
        let sampler = PkSampler::new(&data.train.given_labels);
        if sampler.num_classes() < cfg.batch_classes {
            return Err(PrismError::config(format!(
                "only {} labeled classes for batch_classes = {}",
                sampler.num_classes(),
                cfg.batch_classes
            )));
        }
        let batch_rng = rng::stream(cfg.seed, STREAM_BATCHES);
        let margin = ContrastiveMargin::new(cfg.margin)?;
        let record = RunRecord {
            seed: cfg.seed,
            data_seed: cfg.data_seed,
            noise: data.noise,
            losses: Vec::with_capacity(cfg.total_iters),
            diags: Vec::with_capacity(cfg.total_iters),
            batch_probs: Vec::with_capacity(cfg.total_iters),
            filter_acc: Vec::with_capacity(cfg.total_iters),
            skipped_iters: Vec::new(),
            metrics: Vec::new(),
            kappa: Vec::new(),
            probe: None,
            pair_purity: None,
            timings: Timings::default(),
        };
        Ok(Self {
            cfg,
            data,
            encoder,
            bank,
            state,
            proxies,
            policy,
            optimizer,
            sgd,
            sampler,
            batch_rng,
            margin,
            pair_counts: (0, 0),
            window_kept: 0,
            window_clean: 0,
            window_seen: 0,
            window_probs: Vec::new(),
            window_mask: Vec::new(),
            record,
        })
    }

    fn enqueues(&self) -> bool {
        self.cfg.estimator.uses_bank() || self.cfg.loss == LossKind::Mcl
    }

    pub fn embed_all(&self, inputs: &[UnitVector]) -> Result<Vec<UnitVector>> {
        inputs.iter().map(|x| Ok(self.encoder.forward(x)?.0)).collect()
    }

    /// Runs one iteration of sampling, filtering, enqueueing and the update.
    pub fn step(&mut self) -> Result<()> {
        let iter = self.state.iteration;
        let t0 = Instant::now();
        let batch = self.sampler.sample(self.cfg.batch_classes, self.cfg.batch_per_class, &mut self.batch_rng)?;
        self.count_pairs(&batch.indices, &batch.labels);

        let mut feats = Vec::with_capacity(batch.indices.len());
        let mut caches: Vec<ForwardCache> = Vec::with_capacity(batch.indices.len());
        for &i in &batch.indices {
            let (f, c) = self.encoder.forward(&self.data.train.inputs[i])?;
            feats.push(f);
            caches.push(c);
        }
        let t1 = Instant::now();

        let outcome =
            filter_batch(&feats, &batch.labels, &self.state, &mut self.bank, self.proxies.as_ref(), &mut self.policy)?;
        let clean_mask = &self.data.train.clean_mask;
        let batch_mask: Vec<bool> = batch.indices.iter().map(|&i| clean_mask[i]).collect();
        let acc = filter_accuracy(&outcome.kept, &batch_mask);
        self.window_kept += outcome.kept.len();
        self.window_clean += outcome.kept.iter().filter(|&&k| batch_mask[k]).count();
        self.window_seen += feats.len();
        for (k, (&p, &first)) in outcome.probs.iter().zip(&outcome.first_seen).enumerate() {
            if !first {
                self.window_probs.push(p);
                self.window_mask.push(batch_mask[k]);
            }
        }
        self.record.diags.push(outcome.diagnostic(iter));
        self.record.filter_acc.push(acc);

        let kept_feats: Vec<UnitVector> = outcome.kept.iter().map(|&k| feats[k].clone()).collect();
        let kept_labels: Vec<ClassId> = outcome.kept.iter().map(|&k| batch.labels[k]).collect();
        if self.enqueues() {
            self.bank.enqueue_batch(
                kept_feats.iter().zip(&kept_labels).map(|(f, &l)| MemoryEntry::new(f.clone(), l)),
            )?;
        }
        self.record.batch_probs.push(outcome.probs);
        let t2 = Instant::now();

        let min_kept = if self.cfg.loss == LossKind::SoftTriple { 1 } else { 2 };
        let mut loss_value = None;
        let mut t3 = t2;
        if kept_feats.len() < min_kept {
            log::info!("iteration {iter}: {} clean samples, update skipped", kept_feats.len());
            self.record.skipped_iters.push(iter);
        } else {
            let out = self.loss(&kept_feats, &kept_labels)?;
            t3 = Instant::now();
            let lr = lr_at(&self.optimizer);
            let mut grads = self.encoder.zeros_like();
            for (&k, g) in outcome.kept.iter().zip(&out.grad_features) {
                self.encoder.backward_into(&caches[k], g, &mut grads)?;
            }
            self.sgd.step(&mut self.encoder, &grads, lr)?;
            if let (Some(proxies), Some(pg)) = (self.proxies.as_mut(), out.grad_proxies.as_ref()) {
                proxies.sgd_step(pg, lr)?;
            }
            loss_value = Some(out.value);
        }
        self.record.losses.push(loss_value);
        self.state.finish_iteration(&self.bank)?;
        self.optimizer.advance();
        let t4 = Instant::now();

        let tm = &mut self.record.timings;
        tm.embed += t1 - t0;
        tm.filter += t2 - t1;
        tm.loss += t3 - t2;
        tm.update += t4 - t3;
        Ok(())
    }

    fn loss(&self, feats: &[UnitVector], labels: &[ClassId]) -> Result<LossOutput> {
        let red = self.cfg.pair_reduction;
        match self.cfg.loss {
            LossKind::Contrastive => contrastive_batch_loss(feats, labels, self.margin, red),
            LossKind::Mcl => memory_contrastive_loss(feats, labels, &self.bank, self.margin, red),
            LossKind::SoftTriple => soft_triple_loss(feats, labels, self.proxies.as_ref().expect("softtriple proxies")),
        }
    }

    fn count_pairs(&mut self, indices: &[usize], labels: &[ClassId]) {
        let truth = &self.data.train.true_labels;
        for a in 0..indices.len() {
            for b in (a + 1)..indices.len() {
                if labels[a] == labels[b] {
                    self.pair_counts.1 += 1;
                    if truth[indices[a]] == truth[indices[b]] {
                        self.pair_counts.0 += 1;
                    }
                }
            }
        }
    }

    /// Held-out retrieval metrics plus filter statistics since the last evaluation.
    pub fn evaluate(&mut self) -> Result<MetricsRow> {
        let t0 = Instant::now();
        let emb = self.embed_all(&self.data.heldout.inputs)?;
        let m = retrieval_metrics(&emb, &self.data.heldout.true_labels)?;
        let row = MetricsRow {
            iter: self.state.iteration,
            p_at_1: m.p_at_1,
            map_at_r: m.map_at_r,
            filter_acc: (self.window_kept > 0).then(|| self.window_clean as f64 / self.window_kept as f64),
            pclean_auc: pclean_auc(&self.window_probs, &self.window_mask).ok(),
            kept_frac: if self.window_seen > 0 { self.window_kept as f64 / self.window_seen as f64 } else { 0.0 },
        };
        self.window_kept = 0;
        self.window_clean = 0;
        self.window_seen = 0;
        self.window_probs.clear();
        self.window_mask.clear();
        self.record.metrics.push(row);
        self.record.kappa.extend(kappa_snapshot(&self.state));
        self.record.timings.eval += t0.elapsed();
        Ok(row)
    }

    /// Scores every training sample under `estimator` with the current
    /// encoder, bank and fitted parameters, without the first-seen rule.
    pub fn score_training_set(&self, estimator: Estimator) -> Result<Vec<f64>> {
        let feats = self.embed_all(&self.data.train.inputs)?;
        let labels = &self.data.train.given_labels;
        let centers = self.bank.centers();
        feats
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (f, &label))| {
                let p = match estimator {
                    Estimator::AvgSimNaive | Estimator::AvgSimCenters => {
                        let logits: Vec<(ClassId, f64)> = centers.iter().map(|(c, w)| (*c, dot(w, f))).collect();
                        posterior_at(&logits, label)
                    }
                    Estimator::VmfSim => vmf_sim(&self.state, f, label),
                    Estimator::ProxySim => match &self.proxies {
                        Some(p) => proxy_sim(p, f, label),
                        None => Err(PrismError::config("proxysim needs a proxy set")),
                    },
                    Estimator::MemoryPositive => memory_positive(&self.bank, f, label),
                    Estimator::BatchPositive => batch_positive(&feats, labels, i),
                    Estimator::None => Ok(1.0),
                };
                match p {
                    Err(PrismError::AbsentClass(_)) => Ok(1.0),
                    other => other,
                }
            })
            .collect()
    }

    fn take_probe(&mut self) -> Result<()> {
        let estimator = self.state.active_estimator();
        let probs = self.score_training_set(estimator)?;
        let mask = &self.data.train.clean_mask;
        let auc = pclean_auc(&probs, mask).ok();
        let avgsim_auc = if estimator == Estimator::AvgSimCenters {
            auc
        } else {
            pclean_auc(&self.score_training_set(Estimator::AvgSimCenters)?, mask).ok()
        };
        let histogram = split_histogram(&probs, mask, self.cfg.hist_bins)?;
        self.record.probe = Some(Probe { iter: self.state.iteration, estimator, probs, auc, avgsim_auc, histogram });
        Ok(())
    }

    /// Runs all iterations with evaluation at the configured cadence and at the end.
    pub fn run(&mut self) -> Result<()> {
        let start = Instant::now();
        let probe_at = self.cfg.probe_at();
        while self.state.iteration < self.cfg.total_iters {
            self.step()?;
            let it = self.state.iteration;
            if it.is_multiple_of(self.cfg.eval_every) || it == self.cfg.total_iters {
                self.evaluate()?;
            }
            if it == probe_at {
                self.take_probe()?;
            }
        }
        let (pos, total) = self.pair_counts;
        self.record.pair_purity = (total > 0).then(|| pos as f64 / total as f64);
        self.record.timings.total = start.elapsed();
        Ok(())
    }

    /// Writes run outputs, the encoder checkpoint and a bank snapshot.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        self.record.write_outputs(dir)?;
        self.encoder.write_checkpoint(BufWriter::new(File::create(dir.join("encoder.ckpt"))?))?;
        self.bank.write_snapshot(BufWriter::new(File::create(dir.join("bank.csv"))?))?;
        if let Some(p) = &self.record.probe {
            let mut w = BufWriter::new(File::create(dir.join("probe.csv"))?);
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(w, "iter,estimator,auc,avgsim_auc")?;
            writeln!(w, "{},{},{},{}", p.iter, p.estimator, opt(p.auc), opt(p.avgsim_auc))?;
        }
        Ok(())
    }
}

pub fn run_training(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let mut t = Trainer::new(cfg.clone())?;
    t.run()?;
    Ok(t.record)
}
