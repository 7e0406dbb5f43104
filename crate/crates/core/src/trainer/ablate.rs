use super::eval::par_map;
use super::{evaluate, train, EvalConfig, LossTerm, TrainConfig};
use crate::error::Result;
use crate::scenegen::Split;
use crate::walk::LossKind;

pub const ABLATION_LOSSES: [LossKind; 4] = [LossKind::Cyc, LossKind::Pit, LossKind::MixedCorresp, LossKind::Isi];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub loss: LossKind,
    pub cap: f64,
    pub piap: f64,
    pub ciou: f64,
    pub auc: f64,
    /// 1 for the best CAP among the losses sharing this seed.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,loss,cap,piap,ciou,auc,rank\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{},{},{}\n", r.seed, r.loss, r.cap, r.piap, r.ciou, r.auc, r.rank));
        }
        out
    }

    pub fn cap(&self, seed: u64, loss: LossKind) -> Option<f64> {
        self.rows.iter().find(|r| r.seed == seed && r.loss == loss).map(|r| r.cap)
    }

    /// Seeds on which `loss` has a strictly higher CAP than every other loss.
    pub fn wins(&self, loss: LossKind) -> Vec<u64> {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .filter(|&s| {
                let Some(mine) = self.cap(s, loss) else { return false };
                self.rows.iter().filter(|r| r.seed == s && r.loss != loss).all(|r| mine > r.cap)
            })
            .collect()
    }
}

/// Trains `base` once per (seed, loss) with that loss alone and evaluates
/// each run on the test split. Runs fan out over `eval.threads` workers.
pub fn ablate(base: &TrainConfig, seeds: &[u64], eval: &EvalConfig) -> Result<AblationResult> {
    let jobs: Vec<(u64, LossKind)> =
        seeds.iter().flat_map(|&s| ABLATION_LOSSES.iter().map(move |&l| (s, l))).collect();
    let inner = EvalConfig { threads: 1, ..eval.clone() };
    let mut rows = par_map(&jobs, eval.threads, |&(seed, loss)| {
        let cfg = TrainConfig { seed, losses: LossTerm::single(loss), pretrain: None, ..base.clone() };
        let ck = train(&cfg)?;
        let report = evaluate(&ck, Split::Test, &inner)?;
        let ciou = report.metrics[2].1;
        Ok(AblationRow {
            seed,
            loss,
            cap: report.get("cap").unwrap_or(0.0),
            piap: report.get("piap").unwrap_or(0.0),
            ciou,
            auc: report.get("auc").unwrap_or(0.0),
            rank: 0,
        })
    })?;
    for chunk in rows.chunks_mut(ABLATION_LOSSES.len()) {
        let caps: Vec<f64> = chunk.iter().map(|r| r.cap).collect();
        for (i, r) in chunk.iter_mut().enumerate() {
            r.rank = 1 + caps.iter().enumerate().filter(|&(j, &c)| c > caps[i] || (c == caps[i] && j < i)).count();
        }
    }
    Ok(AblationResult { rows })
}
