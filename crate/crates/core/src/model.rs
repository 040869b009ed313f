//! A trained model on disk: vocabularies, sizes, and parameters.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Instance, PredicateVocab, TokenVocab, Triple};
use crate::emission::{EmissionConfig, EmissionModel};
use crate::error::{Error, Result};
use crate::numeric::ParamStore;
use crate::segment::SegmenterConfig;
use crate::training::{prepare, prepare_input, Prepared, PreparedInput};
use crate::transition::TransitionParams;

pub const TOKENS_FILE: &str = "vocab.tokens";
pub const PREDICATES_FILE: &str = "vocab.predicates";
pub const CONFIG_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_source_positions: usize,
    pub max_target_positions: usize,
    pub init_std: f64,
    pub transition_dim: usize,
    pub transition_init_std: f64,
    /// Close each state with an explicit end transition.
    pub state_end: bool,
    /// Open each plan with a cross-state link from the start marker.
    pub start_link: bool,
    pub max_group_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 2,
            layers: 2,
            d_ff: 128,
            max_source_positions: 32,
            max_target_positions: 160,
            init_std: 0.02,
            transition_dim: 32,
            transition_init_std: 0.1,
            state_end: false,
            start_link: false,
            max_group_size: crate::plan::DEFAULT_MAX_GROUP_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn emission(&self, vocab_size: usize) -> EmissionConfig {
        EmissionConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff,
            max_source_positions: self.max_source_positions,
            max_target_positions: self.max_target_positions,
            init_std: self.init_std,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AggModel {
    pub tokens: TokenVocab,
    pub predicates: PredicateVocab,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub emission: EmissionModel,
    pub transition: TransitionParams,
}

impl AggModel {
    /// Freshly initialized parameters.
    pub fn new(
        tokens: TokenVocab,
        predicates: PredicateVocab,
        config: ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emission = EmissionModel::init(&mut store, config.emission(tokens.len()), &mut rng)?;
        let transition = TransitionParams::init(
            &mut store,
            predicates.len(),
            config.transition_dim,
            config.transition_init_std,
            &mut rng,
        )?
        .with_state_end(config.state_end)
        .with_start_link(config.start_link);
        Ok(AggModel {
            tokens,
            predicates,
            config,
            store,
            emission,
            transition,
        })
    }

    /// Replaces the parameters, checking that every expected tensor is present.
    pub fn with_store(mut self, store: ParamStore) -> Result<Self> {
        self.emission = EmissionModel::from_store(&store, self.config.emission(self.tokens.len()))?;
        self.transition = TransitionParams::from_store(&store)?
            .with_state_end(self.config.state_end)
            .with_start_link(self.config.start_link);
        if self.transition.num_predicates != self.predicates.len() {
            return Err(Error::Param(
                "transition size does not match predicate vocabulary".into(),
            ));
        }
        self.store = store;
        Ok(self)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.tokens.save(&dir.join(TOKENS_FILE))?;
        self.predicates.save(&dir.join(PREDICATES_FILE))?;
        fs::write(
            dir.join(CONFIG_FILE),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        self.store.save(&dir.join(PARAMS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_with_params(dir, &dir.join(PARAMS_FILE))
    }

    /// Loads a model directory but takes parameters from `params`.
    pub fn load_with_params(dir: &Path, params: &Path) -> Result<Self> {
        let tokens = TokenVocab::load(&dir.join(TOKENS_FILE))?;
        let predicates = PredicateVocab::load(&dir.join(PREDICATES_FILE))?;
        let config: ModelConfig =
            serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let store = ParamStore::load(params)?;
        let emission = EmissionModel::from_store(&store, config.emission(tokens.len()))?;
        let transition = TransitionParams::from_store(&store)?
            .with_state_end(config.state_end)
            .with_start_link(config.start_link);
        Ok(AggModel {
            tokens,
            predicates,
            config,
            store,
            emission,
            transition,
        })
    }

    pub fn prepare_input(&self, triples: &[Triple]) -> Result<PreparedInput> {
        prepare_input(triples, &self.tokens, &self.predicates)
    }

    pub fn prepare(&self, inst: &Instance, id: usize, seg: &SegmenterConfig) -> Result<Prepared> {
        prepare(
            inst,
            id,
            &self.tokens,
            &self.predicates,
            seg,
            self.config.max_group_size,
        )
    }

    pub fn prepare_corpus(
        &self,
        corpus: &[Instance],
        seg: &SegmenterConfig,
    ) -> Result<Vec<Prepared>> {
        corpus
            .iter()
            .enumerate()
            .map(|(i, inst)| self.prepare(inst, i, seg))
            .collect()
    }
}
