//! The four-row ablation grid: baseline, +MP (multi-hub pseudo-inputs), +CF
//! (condition dropout with guided sampling), +GFA (garment fusion attention).

use log::info;
use vton_core::codec::Codec;
use vton_core::data::TryOnSample;
use vton_core::metrics::{evaluate, EvalMode};
use vton_core::sampler::Model;
use vton_core::trainer::{LatentCache, Trainer};
use vton_core::{PipelineConfig, Result};

/// Images generated per sampler batch during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub multi_hub: bool,
    pub cfg_training: bool,
    pub gfa: bool,
}

pub const VARIANTS: [Variant; 4] = [
    Variant {
        name: "baseline",
        multi_hub: false,
        cfg_training: false,
        gfa: false,
    },
    Variant {
        name: "baseline+MP",
        multi_hub: true,
        cfg_training: false,
        gfa: false,
    },
    Variant {
        name: "baseline+MP+CF",
        multi_hub: true,
        cfg_training: true,
        gfa: false,
    },
    Variant {
        name: "baseline+MP+CF+GFA",
        multi_hub: true,
        cfg_training: true,
        gfa: true,
    },
];

impl Variant {
    /// `cfg` with this variant's flags and every training and sampling
    /// seed set to `seed`.
    pub fn apply(&self, cfg: &PipelineConfig, seed: u64) -> PipelineConfig {
        let mut c = cfg.clone();
        c.train.use_multi_hub = self.multi_hub;
        c.train.use_cfg_training = self.cfg_training;
        c.train.use_gfa = self.gfa;
        c.train.seed = seed;
        c.sample.seed = seed;
        c
    }

    /// Guidance scale at sampling time. Without condition dropout the model
    /// has no unconditional estimate, so sampling is unguided.
    pub fn guidance(&self, cfg: &PipelineConfig) -> f64 {
        if self.cfg_training {
            cfg.sample.guidance_scale
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub seed: u64,
    pub variant: &'static str,
    pub fid: f64,
    pub kid_x1000: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    /// FID per variant, in grid order, for one seed.
    pub fn fids(&self, seed: u64) -> Vec<f64> {
        VARIANTS
            .iter()
            .filter_map(|v| self.runs.iter().find(|r| r.seed == seed && r.variant == v.name).map(|r| r.fid))
            .collect()
    }

    /// Seeds whose FID never increases along the grid.
    pub fn monotone_seeds(&self) -> usize {
        self.seeds().into_iter().filter(|&s| self.fids(s).windows(2).all(|w| w[1] <= w[0])).count()
    }

    /// Mean over seeds: one row per variant.
    pub fn rows(&self) -> Vec<(&'static str, f64, f64)> {
        VARIANTS
            .iter()
            .map(|v| {
                let runs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.variant == v.name).collect();
                let n = runs.len().max(1) as f64;
                (
                    v.name,
                    runs.iter().map(|r| r.fid).sum::<f64>() / n,
                    runs.iter().map(|r| r.kid_x1000).sum::<f64>() / n,
                )
            })
            .collect()
    }

    /// `config,fid,kid_x1000`, one row per variant.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,fid,kid_x1000\n");
        for (name, fid, kid) in self.rows() {
            s.push_str(&format!("{name},{fid:.6},{kid:.6}\n"));
        }
        s
    }

    /// `seed,config,fid,kid_x1000`, one row per run.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("seed,config,fid,kid_x1000\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", r.seed, r.variant, r.fid, r.kid_x1000));
        }
        s
    }
}

/// Trains every variant for every seed on `train`, then scores unpaired
/// generations on `eval` (each real person with another garment) against
/// the split's person images.
pub fn run_ablation(cfg: &PipelineConfig, codec: &Codec, train: &[TryOnSample], eval: &[TryOnSample], seeds: &[u64]) -> Result<AblationTable> {
    let cache = LatentCache::build(codec, train)?;
    let mut table = AblationTable::default();
    for &seed in seeds {
        for v in &VARIANTS {
            let mut c = v.apply(cfg, seed);
            c.codec = codec.config().clone();
            let mut trainer = Trainer::new(&c)?;
            trainer.fit(&cache, |_, _| Ok(()))?;
            let model = Model::from_checkpoint(&trainer.to_checkpoint(codec))?;
            let (report, _) = evaluate(&model, eval, EvalMode::Unpaired, v.guidance(&c), c.sample.seed, EVAL_BATCH)?;
            info!("seed {seed} {}: fid {:.5} kid_x1000 {:.5}", v.name, report.fid, report.kid_x1000);
            table.runs.push(AblationRun {
                seed,
                variant: v.name,
                fid: report.fid,
                kid_x1000: report.kid_x1000,
            });
        }
    }
    Ok(table)
}
