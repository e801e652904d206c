//! World-model and agent evaluation.
//!
//! Image errors are in 0–255² pixel units: squared error per channel value,
//! averaged over one image, then averaged over generated images. Foreground
//! errors average only over ball-sprite pixels from the ground-truth masks;
//! images without any sprite pixel are left out of that average.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use hidden_order::{
    episode_success, foreground_mask, run_episode, scripted_episode, EpisodeRecord, GridConfig, Policy,
};
use tssm_core::agent::{ActMode, Agent};
use tssm_core::model::WorldModel;
use tssm_core::replay::Episode;
use tssm_core::rng::{RngStreams, StreamRng};
use tssm_core::Tensor;

use crate::data::{episode_from_record, AgentPolicy};
use crate::error::{LabError, Result};

pub const DEFAULT_CONTEXTS: [usize; 3] = [60, 70, 80];
/// Half-width of the correct band around a nonzero true reward.
pub const NONZERO_TOLERANCE: f64 = 0.3;
/// Half-width of the correct band around a zero true reward.
pub const ZERO_TOLERANCE: f64 = 0.01;
/// Absorbs decimal rounding so band edges such as 2.7 count as inside.
const BAND_SLACK: f64 = 1e-9;
/// Width and height of one frame in the image strips.
pub const STRIP_TILE: usize = 64;

pub const REPORT_COLUMNS: [&str; 14] = [
    "row",
    "label",
    "context",
    "overall_mse_255sq",
    "foreground_mse_255sq",
    "zero_reward_acc_pct",
    "nonzero_reward_acc_pct",
    "mean_return",
    "return_stderr",
    "success_pct",
    "episodes",
    "skipped",
    "checkpoint_hash",
    "seed",
];

/// A recorded episode with its model-scale frames and ground-truth masks.
#[derive(Clone, Debug)]
pub struct EvalEpisode {
    pub record: EpisodeRecord,
    pub episode: Episode,
    /// One `size × size` sprite mask per frame.
    pub masks: Vec<Vec<u8>>,
}

impl EvalEpisode {
    pub fn from_record(cfg: &GridConfig, record: EpisodeRecord) -> Result<Self> {
        let (episode, replayed) = episode_from_record(cfg, &record)?;
        let masks = replayed.states.iter().map(|s| foreground_mask(cfg, s)).collect();
        Ok(Self { record, episode, masks })
    }
}

/// Open-loop predictions for the frames after the context.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[generated, s, s, 3]`.
    pub images: Tensor,
    pub rewards: Vec<f64>,
}

/// Anything that continues an episode from its first `context` frames and
/// its recorded actions.
pub trait Predictor {
    fn predict(&mut self, episode: &Episode, context: usize) -> Result<Prediction>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a WorldModel,
    pub rng: StreamRng,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, episode: &Episode, context: usize) -> Result<Prediction> {
        let ctx = episode.frames_tensor(0, context);
        let out = self.model.open_loop_generate(&ctx, &episode.actions, &mut self.rng)?;
        Ok(Prediction { images: out.images, rewards: out.rewards })
    }
}

pub fn reward_correct(truth: f64, predicted: f64) -> bool {
    let band = if truth == 0.0 { ZERO_TOLERANCE } else { NONZERO_TOLERANCE };
    (predicted - truth).abs() <= band + BAND_SLACK
}

/// Per-image squared error in 0–255² units, over all pixels and over mask pixels.
fn image_errors(truth: &[f64], pred: &[f64], mask: &[u8]) -> (f64, Option<f64>) {
    let (mut all, mut fg, mut n_fg) = (0.0, 0.0, 0usize);
    for (p, m) in mask.iter().enumerate() {
        for ch in 0..3 {
            let d = 255.0 * (truth[p * 3 + ch] - pred[p * 3 + ch]);
            all += d * d;
            if *m == 1 {
                fg += d * d;
                n_fg += 1;
            }
        }
    }
    (all / truth.len() as f64, (n_fg > 0).then(|| fg / n_fg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextRow {
    pub context: usize,
    pub overall_mse: f64,
    pub foreground_mse: Option<f64>,
    pub zero_acc_pct: Option<f64>,
    pub nonzero_acc_pct: Option<f64>,
    pub episodes: usize,
    /// Episodes too short for this context.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct ContextEval {
    pub row: ContextRow,
    /// Predictions per evaluated episode, in input order, skipped ones omitted.
    pub predictions: Vec<(usize, Prediction)>,
}

/// Generation error and reward accuracy at one context length.
pub fn evaluate_context(pred: &mut dyn Predictor, episodes: &[EvalEpisode], context: usize) -> Result<ContextEval> {
    if context == 0 {
        return Err(LabError::Core(tssm_core::Error::Contract("context length must be positive".into())));
    }
    let (mut mse_sum, mut n_img, mut fg_sum, mut n_fg) = (0.0, 0usize, 0.0, 0usize);
    let (mut zero_ok, mut zero_n, mut nz_ok, mut nz_n) = (0usize, 0usize, 0usize, 0usize);
    let mut skipped = 0;
    let mut predictions = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        let total = e.episode.num_frames();
        if total <= context {
            skipped += 1;
            continue;
        }
        let p = pred.predict(&e.episode, context)?;
        let gen = total - context;
        let f = e.episode.frame_len();
        if p.images.numel() != gen * f || p.rewards.len() != gen {
            return Err(LabError::Core(tssm_core::Error::Contract(format!(
                "prediction has {} values and {} rewards, expected {} and {gen}",
                p.images.numel(),
                p.rewards.len(),
                gen * f
            ))));
        }
        for k in 0..gen {
            let t = context + k;
            let truth = e.episode.frame(t);
            let (all, fg) = image_errors(truth.data(), &p.images.data()[k * f..(k + 1) * f], &e.masks[t]);
            mse_sum += all;
            n_img += 1;
            if let Some(fg) = fg {
                fg_sum += fg;
                n_fg += 1;
            }
            let r = e.episode.rewards[t];
            let ok = reward_correct(r, p.rewards[k]) as usize;
            if r == 0.0 {
                zero_ok += ok;
                zero_n += 1;
            } else {
                nz_ok += ok;
                nz_n += 1;
            }
        }
        predictions.push((i, p));
    }
    let pct = |ok: usize, n: usize| (n > 0).then(|| 100.0 * ok as f64 / n as f64);
    let row = ContextRow {
        context,
        overall_mse: if n_img > 0 { mse_sum / n_img as f64 } else { 0.0 },
        foreground_mse: (n_fg > 0).then(|| fg_sum / n_fg as f64),
        zero_acc_pct: pct(zero_ok, zero_n),
        nonzero_acc_pct: pct(nz_ok, nz_n),
        episodes: episodes.len() - skipped,
        skipped,
    };
    Ok(ContextEval { row, predictions })
}

/// (overall, foreground) generation error at `context`.
pub fn generation_mse(
    pred: &mut dyn Predictor,
    episodes: &[EvalEpisode],
    context: usize,
) -> Result<(f64, Option<f64>)> {
    let r = evaluate_context(pred, episodes, context)?.row;
    Ok((r.overall_mse, r.foreground_mse))
}

/// (zero-reward, nonzero-reward) accuracy in percent at `context`; `None` for an absent class.
pub fn reward_accuracy(
    pred: &mut dyn Predictor,
    episodes: &[EvalEpisode],
    context: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    let r = evaluate_context(pred, episodes, context)?.row;
    Ok((r.zero_acc_pct, r.nonzero_acc_pct))
}

/// Error of the posterior reconstructions, 0–255² per image, averaged.
pub fn reconstruction_mse(model: &WorldModel, episodes: &[&Episode], rng: &mut StreamRng) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for e in episodes {
        let states = model.observe_filter(&e.to_batch()?, rng)?;
        for (t, s) in states[0].iter().enumerate() {
            let (img, _, _) = model.predict_heads(&s.h, &s.z)?;
            let truth = e.frame(t);
            let err: f64 = truth.data().iter().zip(img.data()).map(|(a, b)| (255.0 * (a - b)).powi(2)).sum();
            sum += err / truth.numel() as f64;
            n += 1;
        }
    }
    Ok(if n > 0 { sum / n as f64 } else { 0.0 })
}

/// Scripted episodes with env seeds `seed, seed + 1, …`; they visit every
/// ball, so both reward classes occur.
pub fn scripted_eval_episodes(cfg: &GridConfig, n: usize, seed: u64) -> Result<Vec<EvalEpisode>> {
    (0..n as u64).map(|i| EvalEpisode::from_record(cfg, scripted_episode(cfg, seed.wrapping_add(i))?)).collect()
}

/// Context rows for a world model, plus image strips of the first
/// `strips` evaluated episodes at each context.
pub fn generation_report(
    model: &WorldModel,
    episodes: &[EvalEpisode],
    contexts: &[usize],
    seed: u64,
    strips: usize,
) -> Result<(Vec<ContextRow>, Vec<Strip>)> {
    let streams = RngStreams::new(seed);
    let (mut rows, mut out) = (Vec::new(), Vec::new());
    for &c in contexts {
        let mut pred = ModelPredictor { model, rng: streams.indexed("eval/generate", c as u64) };
        let ev = evaluate_context(&mut pred, episodes, c)?;
        for (i, p) in ev.predictions.iter().take(strips) {
            out.push(Strip::new(&episodes[*i].episode, *i, c, p));
        }
        rows.push(ev.row);
    }
    Ok((rows, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentRow {
    pub label: String,
    pub episodes: usize,
    pub mean_return: f64,
    pub return_stderr: f64,
    pub success_pct: f64,
}

/// Play `n` episodes with env seeds `seed, seed + 1, …`.
pub fn evaluate_policy(
    cfg: &GridConfig,
    policy: &mut dyn Policy,
    n: usize,
    seed: u64,
    label: &str,
) -> Result<(AgentRow, Vec<EpisodeRecord>)> {
    let mut returns = Vec::with_capacity(n);
    let mut successes = 0usize;
    let mut records = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let rec = run_episode(cfg, seed.wrapping_add(i), policy)?;
        successes += episode_success(cfg, &rec)? as usize;
        returns.push(rec.total_reward());
        records.push(rec);
    }
    let nf = n as f64;
    let mean = if n > 0 { returns.iter().sum::<f64>() / nf } else { 0.0 };
    let stderr = if n > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt() / nf.sqrt()
    } else {
        0.0
    };
    let success_pct = if n > 0 { 100.0 * successes as f64 / nf } else { 0.0 };
    Ok((AgentRow { label: label.into(), episodes: n, mean_return: mean, return_stderr: stderr, success_pct }, records))
}

/// Percentage of `n` eval-mode episodes that complete the hidden order.
pub fn success_ratio(cfg: &GridConfig, model: &WorldModel, agent: &Agent, n: usize, seed: u64) -> Result<f64> {
    Ok(evaluate_agent(cfg, model, agent, n, seed)?.0.success_pct)
}

/// The agent in eval mode, filtering with the world model.
pub fn evaluate_agent(
    cfg: &GridConfig,
    model: &WorldModel,
    agent: &Agent,
    n: usize,
    seed: u64,
) -> Result<(AgentRow, Vec<EpisodeRecord>)> {
    let streams = RngStreams::new(seed);
    let (mut filter_rng, mut action_rng) = (streams.stream("eval/filter"), streams.stream("eval/action"));
    let mut policy = AgentPolicy::new(model, agent, ActMode::Eval, &mut filter_rng, &mut action_rng);
    evaluate_policy(cfg, &mut policy, n, seed, model.kind().as_str())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub checkpoint_hash: String,
    pub seed: u64,
    pub episodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub context_rows: Vec<ContextRow>,
    pub agent_rows: Vec<AgentRow>,
    pub provenance: Provenance,
}

/// First 16 hex digits of the SHA-256 of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(std::fs::read(path)?);
    Ok(d[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "N/A".into())
}

impl EvalReport {
    fn csv_rows(&self) -> Vec<Vec<String>> {
        let p = &self.provenance;
        let mut rows = Vec::new();
        for r in &self.context_rows {
            rows.push(vec![
                "context".into(),
                String::new(),
                r.context.to_string(),
                r.overall_mse.to_string(),
                opt_pct(r.foreground_mse),
                opt_pct(r.zero_acc_pct),
                opt_pct(r.nonzero_acc_pct),
                String::new(),
                String::new(),
                String::new(),
                r.episodes.to_string(),
                r.skipped.to_string(),
                p.checkpoint_hash.clone(),
                p.seed.to_string(),
            ]);
        }
        for a in &self.agent_rows {
            rows.push(vec![
                "agent".into(),
                a.label.clone(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                a.mean_return.to_string(),
                a.return_stderr.to_string(),
                a.success_pct.to_string(),
                a.episodes.to_string(),
                "0".into(),
                p.checkpoint_hash.clone(),
                p.seed.to_string(),
            ]);
        }
        rows
    }

    pub fn summary(&self) -> String {
        let p = &self.provenance;
        let mut s = format!(
            "checkpoint {} | seed {} | {} episodes\nimage errors in 0-255^2 pixel units, per image then averaged\n",
            p.checkpoint_hash, p.seed, p.episodes
        );
        for r in &self.context_rows {
            s.push_str(&format!(
                "context {:>3}: mse {:.2}  foreground {}  reward acc zero {} nonzero {}  ({} episodes, {} skipped)\n",
                r.context,
                r.overall_mse,
                r.foreground_mse.map(|v| format!("{v:.2}")).unwrap_or_else(|| "N/A".into()),
                r.zero_acc_pct.map(|v| format!("{v:.1}%")).unwrap_or_else(|| "N/A".into()),
                r.nonzero_acc_pct.map(|v| format!("{v:.1}%")).unwrap_or_else(|| "N/A".into()),
                r.episodes,
                r.skipped
            ));
        }
        for a in &self.agent_rows {
            s.push_str(&format!(
                "agent {}: return {:.3} ± {:.3}  success {:.1}%  ({} episodes)\n",
                a.label, a.mean_return, a.return_stderr, a.success_pct, a.episodes
            ));
        }
        s
    }
}

pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for r in report.csv_rows() {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse and validate a report written by [`write_report_csv`].
pub fn read_report_csv(path: &Path) -> Result<EvalReport> {
    let invalid = |m: String| LabError::InvalidConfig(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(REPORT_COLUMNS) {
        return Err(invalid("unexpected report header".into()));
    }
    let mut report = EvalReport::default();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let num =
            |i: usize| f(i).parse::<f64>().map_err(|_| invalid(format!("column {} is {:?}", REPORT_COLUMNS[i], f(i))));
        let opt = |i: usize| match f(i) {
            "N/A" => Ok(None),
            _ => num(i).map(Some),
        };
        let count = |i: usize| {
            f(i).parse::<usize>().map_err(|_| invalid(format!("column {} is {:?}", REPORT_COLUMNS[i], f(i))))
        };
        report.provenance.checkpoint_hash = f(12).to_string();
        report.provenance.seed = f(13).parse().map_err(|_| invalid("bad seed".into()))?;
        match f(0) {
            "context" => {
                let row = ContextRow {
                    context: count(2)?,
                    overall_mse: num(3)?,
                    foreground_mse: opt(4)?,
                    zero_acc_pct: opt(5)?,
                    nonzero_acc_pct: opt(6)?,
                    episodes: count(10)?,
                    skipped: count(11)?,
                };
                let pct_ok = |v: Option<f64>| v.is_none_or(|x| (0.0..=100.0).contains(&x));
                if row.overall_mse < 0.0 || row.foreground_mse.is_some_and(|v| v < 0.0) {
                    return Err(invalid("negative MSE".into()));
                }
                if !pct_ok(row.zero_acc_pct) || !pct_ok(row.nonzero_acc_pct) {
                    return Err(invalid("accuracy outside [0, 100]".into()));
                }
                report.context_rows.push(row);
            }
            "agent" => {
                let row = AgentRow {
                    label: f(1).to_string(),
                    mean_return: num(7)?,
                    return_stderr: num(8)?,
                    success_pct: num(9)?,
                    episodes: count(10)?,
                };
                if !(0.0..=100.0).contains(&row.success_pct) || row.return_stderr < 0.0 {
                    return Err(invalid("agent row out of range".into()));
                }
                report.agent_rows.push(row);
            }
            other => return Err(invalid(format!("unknown row kind {other:?}"))),
        }
    }
    report.provenance.episodes = report
        .agent_rows
        .iter()
        .map(|a| a.episodes)
        .chain(report.context_rows.iter().map(|c| c.episodes))
        .max()
        .unwrap_or(0);
    Ok(report)
}

/// Context frames, ground truth and prediction for one episode.
#[derive(Clone, Debug)]
pub struct Strip {
    pub context: usize,
    pub episode: usize,
    /// `[frames, s, s, 3]` ground truth over the whole episode.
    pub truth: Tensor,
    /// `[frames − context, s, s, 3]`.
    pub prediction: Tensor,
}

impl Strip {
    pub fn new(e: &Episode, episode: usize, context: usize, prediction: &Prediction) -> Self {
        Self { context, episode, truth: e.frames_tensor(0, e.num_frames()), prediction: prediction.images.clone() }
    }

    /// Three rows of `STRIP_TILE`-pixel frames: context, ground truth, prediction.
    pub fn render(&self) -> (usize, usize, Vec<u8>) {
        let shape = self.truth.shape();
        let (frames, s) = (shape[0], shape[1]);
        let tile = STRIP_TILE;
        let (w, h) = (frames * tile, 3 * tile);
        let mut px = vec![0u8; w * h * 3];
        let f = s * s * 3;
        let mut blit = |row: usize, col: usize, data: &[f64]| {
            for y in 0..tile {
                for x in 0..tile {
                    let (sy, sx) = (y * s / tile, x * s / tile);
                    for ch in 0..3 {
                        let v = data[(sy * s + sx) * 3 + ch].clamp(0.0, 1.0);
                        px[((row * tile + y) * w + col * tile + x) * 3 + ch] = (v * 255.0).round() as u8;
                    }
                }
            }
        };
        for t in 0..frames {
            let truth = &self.truth.data()[t * f..(t + 1) * f];
            if t < self.context {
                blit(0, t, truth);
            } else {
                let k = t - self.context;
                blit(2, t, &self.prediction.data()[k * f..(k + 1) * f]);
            }
            blit(1, t, truth);
        }
        (w, h, px)
    }
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(rgb)?;
    w.finish()?;
    Ok(())
}

/// Write `report.csv`, `summary.txt` and one PNG per strip; returns the written paths.
pub fn emit_report(report: &EvalReport, strips: &[Strip], outdir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir)?;
    let mut written = vec![outdir.join("report.csv"), outdir.join("summary.txt")];
    write_report_csv(report, &written[0])?;
    File::create(&written[1])?.write_all(report.summary().as_bytes())?;
    for s in strips {
        let path = outdir.join(format!("strip_c{}_ep{}.png", s.context, s.episode));
        let (w, h, px) = s.render();
        write_png(&path, w, h, &px)?;
        written.push(path);
    }
    Ok(written)
}
