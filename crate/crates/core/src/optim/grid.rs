use std::fmt::Write as _;

use log::info;

use super::train::{init_model, train, TrainConfig};
use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::inr::{HashGridConfig, MlpConfig};
use crate::psf::PsfParams;

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchConfig {
    /// Training settings per candidate; `iterations` is the short run length.
    pub train: TrainConfig,
    pub grid: HashGridConfig,
    pub mlp: MlpConfig,
    /// The score averages the total loss over this many final iterations.
    pub score_window: usize,
    /// Candidates scoring within this factor of the lowest score count as
    /// consistent with the target; see [`select_candidate`].
    pub consistency: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub f_number: f64,
    pub n_cycles: u32,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct GridSearchResult {
    pub best: PsfParams,
    pub table: Vec<Candidate>,
}

impl GridSearchResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("f_number,n_cycles,score\n");
        for c in &self.table {
            writeln!(s, "{},{},{:e}", c.f_number, c.n_cycles, c.score).expect("write to string");
        }
        s
    }
}

/// Per-candidate seed derived from the run seed and candidate index.
pub fn candidate_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_consistency(c: f64) -> Result<()> {
    if !(c >= 1.0) || !c.is_finite() {
        return Err(Error::invalid(format!("consistency factor must be finite and >= 1, got {c}")));
    }
    Ok(())
}

/// Picks the widest kernel among the candidates consistent with the target.
///
/// A kernel narrower than the true one fits the target about as well as the
/// true one, since the field can absorb the missing blur; a wider kernel
/// cannot add back detail it removed, and its loss jumps. The lowest score
/// therefore drifts to the narrowest kernel. Instead, every candidate within
/// `consistency` times the lowest score is kept and the one with the largest
/// `f_number * n_cycles` (lateral times axial extent) wins, ties going to
/// the lower score. `consistency = 1` reduces to the plain minimum.
pub fn select_candidate(table: &[Candidate], consistency: f64) -> Result<&Candidate> {
    check_consistency(consistency)?;
    let min = table
        .iter()
        .map(|c| c.score)
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::invalid("empty candidate table"))?;
    let extent = |c: &Candidate| c.f_number * c.n_cycles as f64;
    Ok(table
        .iter()
        .filter(|c| c.score <= min * consistency)
        .max_by(|a, b| extent(a).total_cmp(&extent(b)).then(b.score.total_cmp(&a.score)))
        .expect("the minimum itself is consistent"))
}

/// Trains a fresh model for every `(f_number, n_cycles)` pair and returns
/// the widest consistent candidate along with the full score table.
pub fn psf_grid_search(
    target: &Image2D,
    base: &PsfParams,
    f_numbers: &[f64],
    cycles: &[u32],
    cfg: &GridSearchConfig,
) -> Result<GridSearchResult> {
    if f_numbers.is_empty() || cycles.is_empty() {
        return Err(Error::invalid("grid search ranges must be non-empty"));
    }
    check_consistency(cfg.consistency)?;
    let window = cfg.score_window.clamp(1, cfg.train.iterations.max(1));
    let (fdx, fdz) = (
        target.dx / cfg.train.oversample as f64,
        target.dz / cfg.train.oversample as f64,
    );
    let mut table = Vec::with_capacity(f_numbers.len() * cycles.len());
    for &f_number in f_numbers {
        for &n_cycles in cycles {
            let index = table.len();
            let params = PsfParams {
                f_number,
                n_cycles,
                ..base.clone()
            };
            let kernel = params.build_kernel(fdx, fdz)?;
            let seed = candidate_seed(cfg.train.seed, index);
            let mut model = init_model(&cfg.grid, &cfg.mlp, seed)?;
            let tc = TrainConfig {
                seed,
                log_every: 0,
                ..cfg.train.clone()
            };
            let report = train(target, &kernel, &mut model, &tc)?;
            let tail = &report.history[report.history.len() - window..];
            let score = tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64;
            info!("candidate f#{f_number} cycles {n_cycles}: score {score:.5}");
            table.push(Candidate {
                f_number,
                n_cycles,
                score,
            });
        }
    }
    let best = select_candidate(&table, cfg.consistency)?;
    Ok(GridSearchResult {
        best: PsfParams {
            f_number: best.f_number,
            n_cycles: best.n_cycles,
            ..base.clone()
        },
        table,
    })
}
