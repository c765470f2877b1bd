//! The synthetic two-camera protocol: camera A as source, camera B as the
//! few-shot target, with held-out B scenes for scoring.

use crate::error::Result;
use crate::nets::{init_bundle, Domain, Mode, ModelBundle};
use crate::seed::derive_seed;
use crate::synth::{default_profiles, generate_pairs, CameraProfile, PairSettings, ScenePair};
use crate::train::{
    converter_pairs, evaluate, pretrain_converter, select_k_shot, train, ConverterConfig, EvalReport, HistoryRow,
    PretrainReport, TrainConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub source_scenes: usize,
    /// Target scenes the k shots are selected from.
    pub target_pool: usize,
    pub held_out: usize,
    pub scene_size: usize,
    /// Seed of the generated datasets (fixed across training seeds).
    pub data_seed: u64,
    pub settings: PairSettings,
    pub train: TrainConfig,
    pub converter: ConverterConfig,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            source_scenes: 40,
            target_pool: 8,
            held_out: 10,
            scene_size: 128,
            data_seed: 2024,
            settings: PairSettings::default(),
            train: TrainConfig::desk(),
            converter: ConverterConfig::default(),
        }
    }
}

/// Generated datasets of one protocol.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source: Vec<ScenePair>,
    pub target_pool: Vec<ScenePair>,
    pub test: Vec<ScenePair>,
    pub profiles: (CameraProfile, CameraProfile),
}

impl Protocol {
    pub fn datasets(&self) -> Result<Datasets> {
        let (a, b) = default_profiles();
        let s = self.scene_size;
        let source = generate_pairs(&a, self.source_scenes, s, s, derive_seed(self.data_seed, "source"), &self.settings)?;
        let target_pool = generate_pairs(&b, self.target_pool, s, s, derive_seed(self.data_seed, "target"), &self.settings)?;
        let test = generate_pairs(&b, self.held_out, s, s, derive_seed(self.data_seed, "test"), &self.settings)?;
        Ok(Datasets {
            source,
            target_pool,
            test,
            profiles: (a, b),
        })
    }

    /// Pretrains a converter on the source ground truth and returns a bundle
    /// holding it, plus the pretraining report.
    pub fn pretrained_converter(&self, data: &Datasets) -> Result<(ModelBundle<f32>, PretrainReport)> {
        let mut bundle = init_bundle(self.converter.seed, Mode::Proposed, self.train.channel_base)?;
        let report = pretrain_converter(&mut bundle, &converter_pairs(&data.source), &self.converter)?;
        Ok((bundle, report))
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub bundle: ModelBundle<f32>,
    pub history: Vec<HistoryRow>,
    pub report: EvalReport,
}

/// Copies every converter tensor of `from` into `into`.
pub fn install_converter(into: &mut ModelBundle<f32>, from: &ModelBundle<f32>) {
    for id in from.converter_ids() {
        let name = from.params.get(id).name.clone();
        if let Some(dst) = into.params.id(&name) {
            into.params.get_mut(dst).value = from.params.value(id).clone();
        }
    }
    into.converter_ready = from.converter_ready;
}

/// Trains one mode with one seed and scores it on the held-out target scenes.
pub fn run_mode(
    protocol: &Protocol,
    data: &Datasets,
    converter: &ModelBundle<f32>,
    mode: Mode,
    seed: u64,
) -> Result<RunResult> {
    let cfg = TrainConfig {
        mode,
        seed,
        ..protocol.train.clone()
    };
    let shots = select_k_shot(&data.target_pool, cfg.k, &cfg.ratio_set, seed)?;
    let mut bundle = init_bundle(seed, mode, cfg.channel_base)?;
    install_converter(&mut bundle, converter);
    let history = train(&mut bundle, &data.source, &shots, &cfg)?;
    let report = evaluate(&bundle, &data.test, Domain::Target)?;
    Ok(RunResult {
        bundle,
        history,
        report,
    })
}
