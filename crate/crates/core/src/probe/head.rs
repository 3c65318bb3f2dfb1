use serde::{Deserialize, Serialize};

use super::{BinStructure, ConfidenceMap, HeadKind, ProbeConfig, ScoreKind, ThresholdSet};
use crate::error::{Error, Result};
use crate::numerics::layers::{sinusoidal_embedding, LayerNorm, Linear, SpaceTimeBlock, VideoLayout};
use crate::numerics::{checkpoint, Bound, ParamStore, Rng, Tape, Tensor, Var};
use crate::world::DenoiserConfig;

pub const CHECKPOINT_KIND: &str = "probe";

/// Threshold embeddings see `EPS_EMBED_SCALE * eps_v` so that the fastest
/// frequency resolves differences of a few hundredths.
const EPS_EMBED_SCALE: f32 = 100.0;

/// Per-subpatch confidence head reading the denoiser's penultimate
/// features `z` and its frame conditioning `c`.
///
/// A two-block space-time trunk runs over `concat(z, c)`. The readout
/// mixes the trunk output with `c` again; for the continuous-scale variant
/// the threshold embedding is added to `c` at that point, so one trunk pass
/// serves every threshold.
#[derive(Clone, Debug)]
pub struct ProbeHead {
    pub cfg: ProbeConfig,
    pub world: DenoiserConfig,
    pub store: ParamStore,
    bins: Option<BinStructure>,
    input: Linear,
    blocks: Vec<SpaceTimeBlock>,
    ln: LayerNorm,
    eps_proj: Option<Linear>,
    feat: Linear,
    cond: Linear,
    out: Linear,
}

impl ProbeHead {
    pub fn new(cfg: &ProbeConfig, world: &DenoiserConfig, rng: &mut Rng) -> Result<ProbeHead> {
        cfg.validate()?;
        world.validate()?;
        let (wd, wp) = (world.width, cfg.width);
        let mut store = ParamStore::new();
        let input = Linear::new(&mut store, "input", 2 * wd, wp, 1.0, rng);
        let blocks = (0..cfg.blocks)
            .map(|b| SpaceTimeBlock::new(&mut store, &format!("block{b}"), wp, cfg.heads, rng))
            .collect();
        let ln = LayerNorm::new(&mut store, "ln", wp);
        let eps_proj = (cfg.kind == HeadKind::CsBc).then(|| Linear::new(&mut store, "eps_proj", wd, wd, 1.0, rng));
        let feat = Linear::new(&mut store, "feat", wp, wp, 1.0, rng);
        let cond = Linear::new(&mut store, "cond", wd, wp, 1.0, rng);
        let bins = (cfg.kind == HeadKind::Mcc).then(|| BinStructure::new(&ThresholdSet::adaptive()));
        let per_element = bins.as_ref().map_or(1, |b| b.bins());
        let out = Linear::zeros(&mut store, "out", wp, world.latent_channels * per_element);
        Ok(ProbeHead { cfg: cfg.clone(), world: world.clone(), store, bins, input, blocks, ln, eps_proj, feat, cond, out })
    }

    /// Error bins of the multi-class head.
    pub fn bins(&self) -> Option<&BinStructure> {
        self.bins.as_ref()
    }

    /// Logits per latent element: 1 for binary heads, one per bin otherwise.
    pub fn outputs_per_element(&self) -> usize {
        self.bins.as_ref().map_or(1, |b| b.bins())
    }

    /// Shared features, `[B * T * S, width]`, from `z` `[B * T * S, w_d]`
    /// and `c` `[B * T, w_d]`.
    pub fn trunk(&self, tape: &mut Tape, p: &Bound, z: Var, c: Var, layout: &VideoLayout) -> Var {
        let ctok = tape.gather_rows(c, &layout.frame_index());
        let x = tape.concat_cols(z, ctok);
        let mut h = self.input.forward(tape, p, x);
        for block in &self.blocks {
            h = block.forward(tape, p, h, layout);
        }
        self.ln.forward(tape, p, h)
    }

    /// Logits `[B * T * S, C * outputs_per_element]` from trunk features.
    /// `eps_v` must be given exactly when the head is threshold-conditioned.
    pub fn readout(&self, tape: &mut Tape, p: &Bound, h: Var, c: Var, eps_v: Option<f64>, layout: &VideoLayout) -> Var {
        let c = match (&self.eps_proj, eps_v) {
            (Some(proj), Some(e)) => {
                let rows = layout.groups * layout.frames;
                let wd = self.world.width;
                let emb = sinusoidal_embedding(EPS_EMBED_SCALE * e as f32, wd, 1000.0);
                let emb: Vec<f32> = emb.iter().copied().cycle().take(rows * wd).collect();
                let emb = tape.constant(Tensor::new(&[rows, wd], emb).unwrap());
                let e = proj.forward(tape, p, emb);
                tape.add(c, e)
            }
            (None, None) => c,
            _ => panic!("probe readout: threshold given for the wrong head kind"),
        };
        let ctok = tape.gather_rows(c, &layout.frame_index());
        let a = self.feat.forward(tape, p, h);
        let b = self.cond.forward(tape, p, ctok);
        let s = tape.add(a, b);
        let s = tape.gelu(s);
        self.out.forward(tape, p, s)
    }

    /// Scoring-rule loss of `logits` against per-element targets: binary
    /// labels for brier/bce, bin indices (as `f32`) for ce. `weights` has
    /// one entry per latent element.
    pub fn score_loss(&self, tape: &mut Tape, logits: Var, targets: &[f32], weights: &[f32]) -> Var {
        let n = targets.len();
        match self.cfg.score {
            ScoreKind::Brier => {
                let q = tape.sigmoid(logits);
                let q = tape.reshape(q, &[n]);
                tape.mse(q, &Tensor::from_vec(targets.to_vec()), Some(weights))
            }
            ScoreKind::Bce => {
                let l = tape.reshape(logits, &[n]);
                tape.bce_with_logits(l, &Tensor::from_vec(targets.to_vec()), Some(weights))
            }
            ScoreKind::Ce => {
                let k = self.outputs_per_element();
                let l = tape.reshape(logits, &[n, k]);
                let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
                tape.softmax_cross_entropy(l, &labels, Some(weights))
            }
        }
    }

    fn check_thresholds(&self, thresholds: &[Option<f64>]) -> Result<()> {
        for t in thresholds {
            match (self.cfg.kind, t) {
                (HeadKind::CsBc, None) => {
                    return Err(Error::InvalidArgument("continuous-scale head needs a threshold".into()))
                }
                (HeadKind::Fsc | HeadKind::Mcc, Some(_)) => {
                    return Err(Error::InvalidArgument(format!("{:?} head takes no threshold", self.cfg.kind)))
                }
                (_, Some(e)) if !(*e > 0.0) => {
                    return Err(Error::InvalidArgument(format!("threshold must be positive, got {e}")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Confidence maps for one video, one per entry of `thresholds` (use
    /// `[None]` for the fixed-scale and multi-class heads). `z` is
    /// `[T * S, w_d]` and `c` is `[T, w_d]`.
    pub fn confidence(&self, z: &Tensor, c: &Tensor, thresholds: &[Option<f64>]) -> Result<Vec<ConfidenceMap>> {
        let w = &self.world;
        let zs = [w.tokens(), w.width];
        let cs = [w.frames, w.width];
        if z.shape() != zs {
            return Err(Error::shape(&zs, z.shape()));
        }
        if c.shape() != cs {
            return Err(Error::shape(&cs, c.shape()));
        }
        self.check_thresholds(thresholds)?;
        let layout = VideoLayout::new(1, w.frames, w.sites());
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let cv = tape.constant(c.clone());
        let h = self.trunk(&mut tape, &p, zv, cv, &layout);
        let shape = w.latent_shape();
        thresholds
            .iter()
            .map(|&e| {
                let logits = self.readout(&mut tape, &p, h, cv, e, &layout);
                let l = tape.value(logits);
                Ok(match &self.bins {
                    None => ConfidenceMap::Binary(l.map(crate::numerics::tape::sigmoid).reshape(&shape)?),
                    Some(b) => {
                        let mut probs = l.clone().into_data();
                        for row in probs.chunks_exact_mut(b.bins()) {
                            softmax(row);
                        }
                        let mut s = shape.to_vec();
                        s.push(b.bins());
                        ConfidenceMap::Simplex(Tensor::new(&s, probs)?)
                    }
                })
            })
            .collect()
    }

    pub fn save(&self, dir: &std::path::Path, name: &str, seed: u64) -> Result<()> {
        let header = Header { probe: self.cfg.clone(), world: self.world.clone(), seed };
        checkpoint::save(dir, name, CHECKPOINT_KIND, &header, &self.store)
    }

    pub fn load(dir: &std::path::Path, name: &str) -> Result<ProbeHead> {
        let header: Header = checkpoint::load_header(dir, name, CHECKPOINT_KIND)?;
        let mut head = ProbeHead::new(&header.probe, &header.world, &mut Rng::new(header.seed))?;
        checkpoint::load_weights(dir, name, &mut head.store)?;
        Ok(head)
    }
}

fn softmax(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / total) as f32;
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    probe: ProbeConfig,
    world: DenoiserConfig,
    seed: u64,
}

/// Confidence of one video from the denoiser's `z` and `c`; `eps_v` is
/// required for the continuous-scale head and rejected otherwise.
pub fn probe_forward(head: &ProbeHead, z: &Tensor, c: &Tensor, eps_v: Option<f64>) -> Result<ConfidenceMap> {
    Ok(head.confidence(z, c, &[eps_v])?.remove(0))
}
