//! End-to-end training with Adam over generated scenes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::harness::checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::model::{ForwardOptions, Model, MASK_FACTOR};
use crate::harness::scene::{generate_scene, SceneGeometry, Suite, SyntheticScene};
use crate::frontend::Frame;
use crate::matching::{training_loss, GroundTruthSequence};
use crate::nn::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment gradient descent without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Adam {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count differs from parameter count");
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (((param, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                param.values[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Which family of seeds a scene comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

pub fn scene_seed(base: u64, split: Split, index: usize) -> u64 {
    let stream: u64 = match split {
        Split::Train => 0x5452_4149_4e00_0000,
        Split::HeldOut => 0x4845_4c44_4f55_5400,
    };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream ^ index as u64
}

pub fn geometry(cfg: &RunConfig) -> SceneGeometry {
    SceneGeometry {
        height: cfg.height,
        width: cfg.width,
        frames: cfg.frames,
        mask_factor: MASK_FACTOR,
    }
}

pub fn scene_set(cfg: &RunConfig, suite: Suite, split: Split, count: usize) -> Result<Vec<SyntheticScene>> {
    (0..count)
        .map(|i| generate_scene(scene_seed(cfg.seed, split, i), suite.difficulty(), geometry(cfg)))
        .collect()
}

/// A scene with its rendered frames and ground truth.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scene: SyntheticScene,
    pub frames: Vec<Frame>,
    pub truth: GroundTruthSequence,
}

impl Prepared {
    pub fn new(scene: SyntheticScene) -> Self {
        Prepared {
            frames: scene.render_all(),
            truth: scene.ground_truth(MASK_FACTOR),
            scene,
        }
    }
}

/// Loss and parameter gradients of one clip.
pub fn loss_and_grads(model: &Model, clip: &Prepared) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let out = model.forward(&tape, &p, &clip.frames, &clip.scene.program, ForwardOptions::default())?;
    let loss = training_loss(&clip.truth, &out.candidates, &model.config.loss)?;
    let value = loss.loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    tape.backward(loss.loss)?;
    Ok((value, p.grads()))
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    /// Loss of every completed step.
    pub losses: Vec<f64>,
    fixed: Vec<Prepared>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let model = Model::new(config.clone())?;
        let fixed = scene_set(&config, config.suite, Split::Train, config.scenes)?
            .into_iter()
            .map(Prepared::new)
            .collect();
        let adam = Adam::new(&model.store, config.learning_rate);
        Ok(Trainer {
            model,
            adam,
            step: 0,
            losses: Vec::new(),
            fixed,
        })
    }

    /// The training scenes when the config fixes a set.
    pub fn fixed_scenes(&self) -> &[Prepared] {
        &self.fixed
    }

    fn clip_for_step(&self) -> Result<Prepared> {
        let cfg = &self.model.config;
        if self.fixed.is_empty() {
            let seed = scene_seed(cfg.seed, Split::Train, self.step);
            Ok(Prepared::new(generate_scene(seed, cfg.suite.difficulty(), geometry(cfg))?))
        } else {
            Ok(self.fixed[self.step % self.fixed.len()].clone())
        }
    }

    /// One optimizer step; the model is left untouched when the loss is not finite.
    pub fn step_once(&mut self) -> Result<f64> {
        let clip = self.clip_for_step()?;
        let (loss, grads) = loss_and_grads(&self.model, &clip)?;
        self.adam.update(&mut self.model.store, &grads);
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Runs to `config.steps`. With `out`, a checkpoint lands in
    /// `out/checkpoint` every `checkpoint_every` steps and at the end, and
    /// the loss curve in `out/loss.csv`. A non-finite loss stops the run and
    /// leaves the last checkpoint in place.
    pub fn run(&mut self, out: Option<&Path>, mut progress: impl FnMut(usize, f64)) -> Result<()> {
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
        }
        let total = self.model.config.steps;
        let every = self.model.config.checkpoint_every;
        while self.step < total {
            let result = self.step_once();
            if let Some(dir) = out {
                fs::write(dir.join("loss.csv"), self.loss_csv())?;
            }
            let loss = result?;
            progress(self.step, loss);
            if let Some(dir) = out {
                if (every > 0 && self.step % every == 0) || self.step == total {
                    checkpoint::save(&self.model, self.step, &dir.join("checkpoint"))?;
                }
            }
        }
        Ok(())
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{},{l:?}", i + 1);
        }
        out
    }
}
