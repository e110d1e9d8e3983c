//! Synthetic knowledge world, update schedules and the editing metrics.
//!
//! Facts are `(subject, relation, object)` triples over disjoint token
//! pools. A query renders `(s, r)` through one of a few surface templates;
//! template slot 0 is canonical and the only one trained on, the others are
//! paraphrases used for generality. Answers are `[object, STOP]`.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::{margin_curvature, CurvatureReport, PowerConfig};
use crate::data::EditPair;
use crate::error::Error;
use crate::losses::{ReferencePolicy, UpdateData};
use crate::model::{
    greedy_decode_batch, log_probs, pretrain_base, AdapterConfig, AdapterState, BaseParams, ModelDims, PretrainConfig, Pretrained, TokenSeq, STOP_TOKEN,
};
use crate::optimizer::{train, OptimizerConfig, ProbeSet, StepTrace};
use crate::rng;
use crate::tensor::ParamVector;

type Result<T> = std::result::Result<T, Error>;

/// Surface forms available to relations: `[s,r]`, `[r,s]`, `[s,M0,r]`,
/// `[r,M1,s]`, `[M2,s,r]`, `[M3,r,s]`.
pub const TEMPLATE_SCHEMAS: usize = 6;
const MARKERS: usize = 4;
const PROBE_PAIRS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_objects: usize,
    pub n_facts: usize,
    pub templates_per_relation: usize,
    /// Draw replacement objects from the subject's other facts.
    pub conflict_heavy: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { n_subjects: 30, n_relations: 8, n_objects: 20, n_facts: 200, templates_per_relation: 3, conflict_heavy: true }
    }
}

impl WorldConfig {
    pub fn tokens_needed(&self) -> usize {
        2 + self.n_subjects + self.n_relations + self.n_objects + MARKERS
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        if self.templates_per_relation < 2 || self.templates_per_relation > TEMPLATE_SCHEMAS {
            return Err(Error::World(format!("templates per relation must be in 2..={TEMPLATE_SCHEMAS}, got {}", self.templates_per_relation)));
        }
        if self.n_subjects == 0 || self.n_relations == 0 || self.n_objects < 2 || self.n_facts == 0 {
            return Err(Error::World("pools need ≥1 subject, ≥1 relation, ≥2 objects and ≥1 fact".into()));
        }
        if self.tokens_needed() > dims.vocab {
            return Err(Error::World(format!("{} tokens needed, vocabulary has {}", self.tokens_needed(), dims.vocab)));
        }
        if self.n_facts > self.n_subjects * self.n_relations {
            return Err(Error::World(format!(
                "pool exhaustion: {} facts requested but only {} distinct (subject, relation) pairs",
                self.n_facts,
                self.n_subjects * self.n_relations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactWorld {
    pub config: WorldConfig,
    pub subjects: Vec<usize>,
    pub relations: Vec<usize>,
    pub objects: Vec<usize>,
    pub markers: Vec<usize>,
    pub facts: Vec<Fact>,
    /// Schema id for each template slot, per relation index.
    pub templates: Vec<Vec<usize>>,
    pub seed: u64,
}

/// `[object, STOP]`.
pub fn answer(object: usize) -> TokenSeq {
    TokenSeq(vec![object, STOP_TOKEN])
}

pub fn generate_world(cfg: &WorldConfig, dims: &ModelDims, seed: u64) -> Result<FactWorld> {
    cfg.validate(dims)?;
    let mut next = 2;
    let mut pool = |n: usize| {
        let p: Vec<usize> = (next..next + n).collect();
        next += n;
        p
    };
    let subjects = pool(cfg.n_subjects);
    let relations = pool(cfg.n_relations);
    let objects = pool(cfg.n_objects);
    let markers = pool(MARKERS);

    let mut r = rng::stream(seed, "world");
    let pairs = index::sample(&mut r, cfg.n_subjects * cfg.n_relations, cfg.n_facts);
    let facts = pairs
        .iter()
        .enumerate()
        .map(|(id, k)| Fact {
            id,
            subject: subjects[k / cfg.n_relations],
            relation: relations[k % cfg.n_relations],
            object: *objects.choose(&mut r).expect("objects"),
        })
        .collect();
    let templates = (0..cfg.n_relations)
        .map(|ri| std::iter::once(0).chain((1..cfg.templates_per_relation).map(|j| 1 + (ri + j - 1) % (TEMPLATE_SCHEMAS - 1))).collect())
        .collect();
    let world = FactWorld { config: cfg.clone(), subjects, relations, objects, markers, facts, templates, seed };
    world.audit()?;
    Ok(world)
}

impl FactWorld {
    /// Checks `(s, r)` uniqueness and that every fact renders under every template.
    pub fn audit(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for f in &self.facts {
            if !seen.insert((f.subject, f.relation)) {
                return Err(Error::World(format!("duplicate (subject, relation) in fact {}", f.id)));
            }
            for slot in 0..self.n_templates() {
                self.render(f.id, slot);
            }
        }
        Ok(())
    }

    pub fn n_templates(&self) -> usize {
        self.config.templates_per_relation
    }

    pub fn paraphrase_slots(&self) -> std::ops::Range<usize> {
        1..self.n_templates()
    }

    fn relation_index(&self, relation: usize) -> usize {
        relation - self.relations[0]
    }

    pub fn schema(&self, fact_id: usize, slot: usize) -> usize {
        self.templates[self.relation_index(self.facts[fact_id].relation)][slot]
    }

    /// Query for `fact_id` under template slot `slot`.
    pub fn render(&self, fact_id: usize, slot: usize) -> TokenSeq {
        let f = &self.facts[fact_id];
        let (s, r, m) = (f.subject, f.relation, &self.markers);
        TokenSeq(match self.schema(fact_id, slot) {
            0 => vec![s, r],
            1 => vec![r, s],
            2 => vec![s, m[0], r],
            3 => vec![r, m[1], s],
            4 => vec![m[2], s, r],
            _ => vec![m[3], r, s],
        })
    }

    /// Every fact under every template, for pretraining θ.
    pub fn pretraining_set(&self) -> Vec<(TokenSeq, TokenSeq)> {
        self.facts
            .iter()
            .flat_map(|f| (0..self.n_templates()).map(move |t| (f.id, t)))
            .map(|(id, t)| (self.render(id, t), answer(self.facts[id].object)))
            .collect()
    }

    /// Object tokens seen with `subject` in facts other than `except`.
    fn co_objects(&self, subject: usize, except: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.facts.iter().filter(|f| f.subject == subject && f.id != except).map(|f| f.object).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn replacement(&self, fact_id: usize, current: usize, rng: &mut impl Rng) -> usize {
        if self.config.conflict_heavy {
            let c: Vec<usize> = self.co_objects(self.facts[fact_id].subject, fact_id).into_iter().filter(|&o| o != current).collect();
            if let Some(&o) = c.choose(rng) {
                return o;
            }
        }
        let c: Vec<usize> = self.objects.iter().copied().filter(|&o| o != current).collect();
        *c.choose(rng).expect("at least two objects")
    }
}

/// One fact's object change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub fact_id: usize,
    pub old: usize,
    pub new: usize,
}

impl Edit {
    pub fn pair(&self, world: &FactWorld, slot: usize) -> EditPair {
        EditPair { fact_id: self.fact_id, template_id: slot, x: world.render(self.fact_id, slot), y_old: answer(self.old), y_new: answer(self.new) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSet {
    pub edits: Vec<Edit>,
    pub holdout: Vec<usize>,
}

impl EditSet {
    /// Original `(x, o⁻)` facts that are being overwritten.
    pub fn d_old(&self, world: &FactWorld) -> Vec<(TokenSeq, TokenSeq)> {
        self.edits.iter().map(|e| (world.render(e.fact_id, 0), answer(e.old))).collect()
    }

    pub fn d_new(&self, world: &FactWorld) -> Vec<(TokenSeq, TokenSeq)> {
        self.edits.iter().map(|e| (world.render(e.fact_id, 0), answer(e.new))).collect()
    }

    /// Canonical-template training triplets.
    pub fn d_pairs(&self, world: &FactWorld) -> Vec<EditPair> {
        self.edits.iter().map(|e| e.pair(world, 0)).collect()
    }
}

/// Samples `round(fraction · n)` facts to edit; the rest form the holdout.
pub fn make_edit_set(world: &FactWorld, fraction: f64, seed: u64) -> Result<EditSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("edit fraction must be in (0, 1], got {fraction}")));
    }
    let n = world.facts.len();
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut r = rng::stream(seed, "edits");
    let chosen = index::sample(&mut r, n, k).into_vec();
    let mut edited = vec![false; n];
    let edits = chosen
        .iter()
        .map(|&id| {
            edited[id] = true;
            let old = world.facts[id].object;
            Edit { fact_id: id, old, new: world.replacement(id, old, &mut r) }
        })
        .collect();
    let holdout = (0..n).filter(|&i| !edited[i]).collect();
    Ok(EditSet { edits, holdout })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Single,
    CrossInject,
    TemporalChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Fraction of facts edited over the whole schedule.
    pub fraction: f64,
    /// Number of disjoint phases for `cross-inject`.
    pub phases: usize,
    /// Objects per chain for `temporal-chain`.
    pub chain_length: usize,
    /// When set, each phase runs `ceil(epochs · edits / batch)` steps instead
    /// of the optimizer's fixed step count.
    pub epochs: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Single, fraction: 0.25, phases: 2, chain_length: 3, epochs: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub edits: Vec<Edit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub phases: Vec<Phase>,
    /// Facts never edited in any phase.
    pub holdout: Vec<usize>,
}

pub fn build_schedule(world: &FactWorld, cfg: &ScheduleConfig, seed: u64) -> Result<Schedule> {
    let set = make_edit_set(world, cfg.fraction, seed)?;
    let phases = match cfg.kind {
        ScheduleKind::Single => vec![Phase { edits: set.edits }],
        ScheduleKind::CrossInject => {
            if cfg.phases < 2 || set.edits.len() < cfg.phases {
                return Err(Error::Config(format!(
                    "cross-inject needs ≥2 phases and ≥1 edit per phase, got {} edits over {} phases",
                    set.edits.len(),
                    cfg.phases
                )));
            }
            let n = set.edits.len();
            (0..cfg.phases).map(|p| Phase { edits: set.edits[p * n / cfg.phases..(p + 1) * n / cfg.phases].to_vec() }).collect()
        }
        ScheduleKind::TemporalChain => {
            if cfg.chain_length < 2 {
                return Err(Error::Config("temporal chains need at least 2 objects".into()));
            }
            let mut r = rng::stream(seed, "chains");
            let mut current: Vec<usize> = set.edits.iter().map(|e| e.new).collect();
            let mut phases = vec![Phase { edits: set.edits.clone() }];
            for _ in 1..cfg.chain_length {
                let edits = set
                    .edits
                    .iter()
                    .zip(current.iter_mut())
                    .map(|(e, cur)| {
                        let new = world.replacement(e.fact_id, *cur, &mut r);
                        let edit = Edit { fact_id: e.fact_id, old: *cur, new };
                        *cur = new;
                        edit
                    })
                    .collect();
                phases.push(Phase { edits });
            }
            phases
        }
    };
    Ok(Schedule { kind: cfg.kind, phases, holdout: set.holdout })
}

/// Per-phase metrics, all percentages in `[0, 100]`. Fields that are not
/// defined for a phase (no holdout, no earlier phase) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: usize,
    pub config_hash: String,
    pub n_edits: usize,
    pub edit_success: f64,
    pub generality: f64,
    pub specificity: Option<f64>,
    pub update_efficacy: f64,
    /// Paraphrase-template forgetting on earlier phases' edits.
    pub forgetting: Option<f64>,
    pub forgetting_train_template: Option<f64>,
    pub retention: f64,
    pub activation: Option<f64>,
    /// Percentage of this phase's edits with a positive training-pair margin.
    pub margin_positive: f64,
    pub mean_margin: f64,
    pub mean_logp_new: f64,
    pub mean_logp_old: f64,
}

impl MetricsRecord {
    /// `(name, value)` for every defined percentage metric.
    pub fn metric_values(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("edit_success", self.edit_success), ("generality", self.generality)];
        if let Some(s) = self.specificity {
            v.push(("specificity", s));
        }
        v.push(("update_efficacy", self.update_efficacy));
        if let Some(f) = self.forgetting {
            v.push(("forgetting", f));
        }
        if let Some(f) = self.forgetting_train_template {
            v.push(("forgetting_train_template", f));
        }
        v.push(("retention", self.retention));
        if let Some(a) = self.activation {
            v.push(("activation", a));
        }
        v.push(("margin_positive", self.margin_positive));
        v
    }
}

fn pct(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Greedy answers (up to STOP) for each query.
fn answers(base: &BaseParams, adapter: Option<&AdapterState>, queries: &[TokenSeq]) -> Result<Vec<Vec<usize>>> {
    if queries.is_empty() {
        return Ok(vec![]);
    }
    let refs: Vec<&TokenSeq> = queries.iter().collect();
    Ok(greedy_decode_batch(base, adapter, &refs, 2)?.into_iter().map(|s| s.answer().to_vec()).collect())
}

/// Decoded answers for a phase's edits on every template slot.
struct EditAnswers {
    /// `by_slot[e][slot]`.
    by_slot: Vec<Vec<Vec<usize>>>,
}

impl EditAnswers {
    fn collect(base: &BaseParams, adapter: Option<&AdapterState>, world: &FactWorld, facts: &[usize]) -> Result<Self> {
        let k = world.n_templates();
        let queries: Vec<TokenSeq> = facts.iter().flat_map(|&f| (0..k).map(move |t| (f, t))).map(|(f, t)| world.render(f, t)).collect();
        let flat = answers(base, adapter, &queries)?;
        Ok(Self { by_slot: flat.chunks(k).map(|c| c.to_vec()).collect() })
    }
}

fn single_phase_metrics(
    base: &BaseParams,
    adapter: Option<&AdapterState>,
    world: &FactWorld,
    edits: &[Edit],
    holdout: &[usize],
    phase: usize,
) -> Result<(MetricsRecord, EditAnswers)> {
    if edits.is_empty() {
        return Err(Error::Empty("edit set"));
    }
    let ids: Vec<usize> = edits.iter().map(|e| e.fact_id).collect();
    let got = EditAnswers::collect(base, adapter, world, &ids)?;
    let paraphrases = world.paraphrase_slots();
    let n_para = edits.len() * paraphrases.len();
    let mut success = 0;
    let mut general = 0;
    let mut retained = 0;
    for (e, a) in edits.iter().zip(&got.by_slot) {
        success += usize::from(a[0] == [e.new]);
        for t in paraphrases.clone() {
            general += usize::from(a[t] == [e.new]);
            retained += usize::from(a[t] == [e.old]);
        }
    }

    let specificity = if holdout.is_empty() {
        None
    } else {
        let k = world.n_templates();
        let queries: Vec<TokenSeq> = holdout.iter().flat_map(|&f| (0..k).map(move |t| world.render(f, t))).collect();
        let got_h = answers(base, adapter, &queries)?;
        let hits = got_h.iter().enumerate().filter(|(i, a)| **a == [world.facts[holdout[i / k]].object]).count();
        Some(pct(hits, queries.len()))
    };

    let pairs: Vec<EditPair> = edits.iter().map(|e| e.pair(world, 0)).collect();
    let seqs: Vec<(&TokenSeq, &TokenSeq)> = pairs.iter().flat_map(|p| [(&p.x, &p.y_new), (&p.x, &p.y_old)]).collect();
    let lp = log_probs(base, adapter, &seqs)?;
    let margins: Vec<f64> = lp.chunks(2).map(|c| c[0] - c[1]).collect();
    let n = edits.len() as f64;
    let generality = pct(general, n_para);
    let record = MetricsRecord {
        phase,
        config_hash: String::new(),
        n_edits: edits.len(),
        edit_success: pct(success, edits.len()),
        generality,
        specificity,
        update_efficacy: generality,
        forgetting: None,
        forgetting_train_template: None,
        retention: pct(retained, n_para),
        activation: None,
        margin_positive: pct(margins.iter().filter(|&&m| m > 0.0).count(), edits.len()),
        mean_margin: margins.iter().sum::<f64>() / n,
        mean_logp_new: lp.iter().step_by(2).sum::<f64>() / n,
        mean_logp_old: lp.iter().skip(1).step_by(2).sum::<f64>() / n,
    };
    Ok((record, got))
}

/// Single-update metrics for `edits` under θ + φ (φ = `None` evaluates the bare base).
pub fn evaluate(base: &BaseParams, adapter: Option<&AdapterState>, world: &FactWorld, edits: &[Edit], holdout: &[usize]) -> Result<MetricsRecord> {
    Ok(single_phase_metrics(base, adapter, world, edits, holdout, 0)?.0)
}

/// What an edited fact looked like when its own phase ended.
#[derive(Debug, Clone)]
struct Boundary {
    edit: Edit,
    answers: Vec<Vec<usize>>,
}

/// Forgetting and activation over facts carried from earlier phases.
fn carried_metrics(base: &BaseParams, adapter: &AdapterState, world: &FactWorld, carried: &[&Boundary]) -> Result<(f64, f64, f64)> {
    let ids: Vec<usize> = carried.iter().map(|b| b.edit.fact_id).collect();
    let now = EditAnswers::collect(base, Some(adapter), world, &ids)?;
    let paraphrases = world.paraphrase_slots();
    let (mut then_para, mut now_para, mut then_train, mut now_train, mut activated) = (0, 0, 0, 0, 0);
    for (b, a) in carried.iter().zip(&now.by_slot) {
        let target = [b.edit.new];
        then_train += usize::from(b.answers[0] == target);
        now_train += usize::from(a[0] == target);
        for t in paraphrases.clone() {
            let was = b.answers[t] == target;
            then_para += usize::from(was);
            now_para += usize::from(a[t] == target);
            activated += usize::from(was && a[t] == [b.edit.old]);
        }
    }
    let n_para = carried.len() * paraphrases.len();
    let forgetting = (pct(then_para, n_para) - pct(now_para, n_para)).max(0.0);
    let forgetting_train = (pct(then_train, carried.len()) - pct(now_train, carried.len())).max(0.0);
    Ok((forgetting, forgetting_train, pct(activated, n_para)))
}

/// Training settings shared by all phases of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub optimizer: OptimizerConfig,
    pub adapter: AdapterConfig,
    pub reference: ReferencePolicy,
    pub epochs: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ContinualResult {
    pub records: Vec<MetricsRecord>,
    pub traces: Vec<Vec<StepTrace>>,
    /// Adapter at the end of each phase.
    pub adapters: Vec<AdapterState>,
    pub initial: AdapterState,
    pub aborted: Option<String>,
}

impl ContinualResult {
    pub fn final_adapter(&self) -> &AdapterState {
        self.adapters.last().unwrap_or(&self.initial)
    }
}

fn phase_seed(seed: u64, phase: usize) -> u64 {
    seed ^ (phase as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn phase_steps(settings: &TrainSettings, n_edits: usize) -> usize {
    match settings.epochs {
        Some(e) => ((e * n_edits as f64) / settings.optimizer.batch_size as f64).ceil().max(1.0) as usize,
        None => settings.optimizer.steps,
    }
}

/// Trains one adapter through every phase of `schedule` in order, evaluating
/// after each phase.
pub fn continual_run(base: &BaseParams, world: &FactWorld, schedule: &Schedule, settings: &TrainSettings) -> Result<ContinualResult> {
    let initial = AdapterState::init(base.dims, settings.adapter, &mut rng::stream(settings.seed, "init"))?;
    continual_run_from(base, world, schedule, settings, initial)
}

pub fn continual_run_from(
    base: &BaseParams,
    world: &FactWorld,
    schedule: &Schedule,
    settings: &TrainSettings,
    initial: AdapterState,
) -> Result<ContinualResult> {
    let mut adapter = initial.clone();
    let mut out = ContinualResult { records: vec![], traces: vec![], adapters: vec![], initial, aborted: None };
    let mut boundaries: BTreeMap<usize, Boundary> = BTreeMap::new();
    for (p, phase) in schedule.phases.iter().enumerate() {
        let pairs: Vec<EditPair> = phase.edits.iter().map(|e| e.pair(world, 0)).collect();
        let reference = match settings.reference {
            ReferencePolicy::Base => None,
            ReferencePolicy::PreviousPhase => Some(&adapter),
        };
        let data = UpdateData::new(base, &pairs, &pairs, reference)?;
        let probes = ProbeSet::new(base, &pairs[..pairs.len().min(PROBE_PAIRS)])?;
        let cfg = OptimizerConfig { steps: phase_steps(settings, pairs.len()), seed: phase_seed(settings.seed, p), ..settings.optimizer.clone() };
        let outcome = train(base, &adapter, &data, &cfg, Some(&probes))?;
        adapter = outcome.adapter;
        out.traces.push(outcome.traces);

        let (mut record, got) = single_phase_metrics(base, Some(&adapter), world, &phase.edits, &schedule.holdout, p)?;
        for e in &phase.edits {
            boundaries.remove(&e.fact_id);
        }
        let carried: Vec<&Boundary> = boundaries.values().collect();
        if !carried.is_empty() {
            let (f, ft, act) = carried_metrics(base, &adapter, world, &carried)?;
            record.forgetting = Some(f);
            record.forgetting_train_template = Some(ft);
            record.activation = Some(act);
        }
        for (e, a) in phase.edits.iter().zip(got.by_slot) {
            boundaries.insert(e.fact_id, Boundary { edit: *e, answers: a });
        }
        out.records.push(record);
        out.adapters.push(adapter.clone());
        if outcome.aborted.is_some() {
            out.aborted = outcome.aborted;
            break;
        }
    }
    Ok(out)
}

/// Elementwise `Σ wᵢ·φᵢ` over all factors, without renormalization.
pub fn merge_adapters(adapters: &[AdapterState], weights: &[f64]) -> Result<AdapterState> {
    if adapters.is_empty() || adapters.len() != weights.len() {
        return Err(Error::Config(format!("{} adapters with {} weights", adapters.len(), weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::Config(format!("merge weight {w} is not finite")));
    }
    let first = &adapters[0];
    let mut acc = ParamVector::zeros(first.params().layout().clone());
    for (a, &w) in adapters.iter().zip(weights) {
        if a.config != first.config {
            return Err(Error::Config("adapters with different rank/alpha cannot be merged".into()));
        }
        acc.axpy(w, a.params())?;
    }
    first.with_params(acc)
}

/// Step size of the benchmark preset (500 steps on the toy scorer); the
/// optimizer's own default stays at 0.05.
pub const BENCHMARK_LEARNING_RATE: f64 = 0.02;

/// Everything that defines one experiment apart from where it is written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelDims,
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub reference: ReferencePolicy,
    pub metrics: MetricToggles,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelDims::default(),
            world: WorldConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig::default(),
            optimizer: OptimizerConfig { steps: 500, learning_rate: BENCHMARK_LEARNING_RATE, ..OptimizerConfig::default() },
            schedule: ScheduleConfig::default(),
            reference: ReferencePolicy::Base,
            metrics: MetricToggles::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricToggles {
    /// Estimate margin curvature κ̂ on the final phase's edits.
    pub curvature: bool,
    pub curvature_pairs: usize,
    pub power: PowerConfig,
}

impl Default for MetricToggles {
    fn default() -> Self {
        Self { curvature: false, curvature_pairs: 8, power: PowerConfig::default() }
    }
}

/// SHA-256 of the canonical JSON form (sorted keys, no whitespace).
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let value = serde_json::to_value(cfg)?;
    let canonical = serde_json::to_string(&value)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl ExperimentConfig {
    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            optimizer: OptimizerConfig { seed: self.seed, ..self.optimizer.clone() },
            adapter: self.adapter,
            reference: self.reference,
            epochs: self.schedule.epochs,
            seed: self.seed,
        }
    }
}

/// World and pretrained base, shared by every method run on the same seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub world: FactWorld,
    pub pretrained: Pretrained,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let world = generate_world(&cfg.world, &cfg.model, cfg.seed)?;
    let pretrained = pretrain_base(&world.pretraining_set(), cfg.model, &cfg.pretrain, cfg.seed)?;
    Ok(Prepared { world, pretrained })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub fidelity: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub pretrain: PretrainSummary,
    pub schedule: Schedule,
    pub run: ContinualResult,
    pub curvature: Vec<CurvatureReport>,
}

pub fn run_prepared(prepared: &Prepared, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let hash = cfg.hash()?;
    let schedule = build_schedule(&prepared.world, &cfg.schedule, cfg.seed)?;
    let base = &prepared.pretrained.base;
    let mut run = continual_run(base, &prepared.world, &schedule, &cfg.train_settings())?;
    for r in &mut run.records {
        r.config_hash = hash.clone();
    }
    let mut curvature = vec![];
    if cfg.metrics.curvature {
        if let Some(last) = schedule.phases.get(run.adapters.len().saturating_sub(1)) {
            for e in last.edits.iter().take(cfg.metrics.curvature_pairs) {
                curvature.push(margin_curvature(base, run.final_adapter(), &e.pair(&prepared.world, 0), &cfg.metrics.power)?);
            }
        }
    }
    let p = &prepared.pretrained;
    Ok(ExperimentResult {
        config_hash: hash,
        pretrain: PretrainSummary { epochs: p.epochs, final_loss: p.final_loss, fidelity: p.fidelity },
        schedule,
        run,
        curvature,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_prepared(&prepare(cfg)?, cfg)
}

/// Named method presets over the optimizer flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Corsa,
    NoSam,
    NoDpo,
    NoPcgrad,
    Sft,
}

impl Method {
    pub const ABLATIONS: [Method; 4] = [Method::Corsa, Method::NoSam, Method::NoDpo, Method::NoPcgrad];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Corsa => "corsa",
            Method::NoSam => "no-sam",
            Method::NoDpo => "no-dpo",
            Method::NoPcgrad => "no-pcgrad",
            Method::Sft => "sft",
        }
    }

    pub fn apply(&self, cfg: &OptimizerConfig) -> OptimizerConfig {
        let (use_sam, use_dpo, use_pcgrad) = match self {
            Method::Corsa => (true, true, true),
            Method::NoSam => (false, true, true),
            Method::NoDpo => (true, false, true),
            Method::NoPcgrad => (true, true, false),
            Method::Sft => (false, false, false),
        };
        OptimizerConfig { use_sam, use_dpo, use_pcgrad, ..cfg.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Fraction,
    Lambda,
    Rho,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fraction" => Ok(Self::Fraction),
            "lambda" => Ok(Self::Lambda),
            "rho" => Ok(Self::Rho),
            other => Err(Error::Config(format!("unknown sweep axis {other:?} (fraction | lambda | rho)"))),
        }
    }
}

impl SweepAxis {
    pub fn apply(&self, cfg: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Fraction => c.schedule.fraction = value,
            SweepAxis::Lambda => c.optimizer.lambda = value,
            SweepAxis::Rho => c.optimizer.rho = value,
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub result: ExperimentResult,
}

/// One full run per value on a shared world and base.
pub fn sweep(prepared: &Prepared, axis: SweepAxis, values: &[f64], cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    values.iter().map(|&value| Ok(SweepPoint { value, result: run_prepared(prepared, &axis.apply(cfg, value))? })).collect()
}

/// Two adapters trained from the same start on disjoint halves of an edit
/// set, then merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeOutcome {
    /// Paraphrase accuracy of each half under its own adapter.
    pub own: [f64; 2],
    /// Paraphrase accuracy of each half under the merged adapter.
    pub merged: [f64; 2],
    /// Mean over halves of `max(0, own − merged)`.
    pub forgetting: f64,
}

pub fn merge_experiment(base: &BaseParams, world: &FactWorld, schedule: &Schedule, settings: &TrainSettings, weights: [f64; 2]) -> Result<MergeOutcome> {
    if schedule.phases.len() != 2 {
        return Err(Error::Config("merging needs exactly two phases".into()));
    }
    let initial = AdapterState::init(base.dims, settings.adapter, &mut rng::stream(settings.seed, "init"))?;
    let mut trained = vec![];
    for (p, phase) in schedule.phases.iter().enumerate() {
        let single = Schedule { kind: ScheduleKind::Single, phases: vec![phase.clone()], holdout: schedule.holdout.clone() };
        let s = TrainSettings { seed: phase_seed(settings.seed, p), ..settings.clone() };
        trained.push(continual_run_from(base, world, &single, &s, initial.clone())?.final_adapter().clone());
    }
    let merged = merge_adapters(&trained, &weights)?;
    let mut own = [0.0; 2];
    let mut after = [0.0; 2];
    for (p, phase) in schedule.phases.iter().enumerate() {
        own[p] = evaluate(base, Some(&trained[p]), world, &phase.edits, &[])?.generality;
        after[p] = evaluate(base, Some(&merged), world, &phase.edits, &[])?.generality;
    }
    let forgetting = (0..2).map(|p| (own[p] - after[p]).max(0.0)).sum::<f64>() / 2.0;
    Ok(MergeOutcome { own, merged: after, forgetting })
}

/// One line of the fact / edit-pair JSONL export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactRecord {
    pub fact_id: usize,
    pub s: usize,
    pub r: usize,
    pub o_old: usize,
    pub o_new: Option<usize>,
    pub template_id: usize,
    pub x_tokens: Vec<usize>,
    pub y_old_tokens: Vec<usize>,
    pub y_new_tokens: Option<Vec<usize>>,
}

impl FactWorld {
    /// Every fact under every template, with no new object.
    pub fn fact_records(&self) -> Vec<FactRecord> {
        self.facts
            .iter()
            .flat_map(|f| (0..self.n_templates()).map(move |t| (f, t)))
            .map(|(f, t)| FactRecord {
                fact_id: f.id,
                s: f.subject,
                r: f.relation,
                o_old: f.object,
                o_new: None,
                template_id: t,
                x_tokens: self.render(f.id, t).0,
                y_old_tokens: answer(f.object).0,
                y_new_tokens: None,
            })
            .collect()
    }

    /// Training (canonical-template) records for `edits`.
    pub fn edit_records(&self, edits: &[Edit]) -> Vec<FactRecord> {
        edits
            .iter()
            .map(|e| {
                let f = &self.facts[e.fact_id];
                FactRecord {
                    fact_id: e.fact_id,
                    s: f.subject,
                    r: f.relation,
                    o_old: e.old,
                    o_new: Some(e.new),
                    template_id: 0,
                    x_tokens: self.render(e.fact_id, 0).0,
                    y_old_tokens: answer(e.old).0,
                    y_new_tokens: Some(answer(e.new).0),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> FactWorld {
        generate_world(&WorldConfig::default(), &ModelDims::default(), 3).unwrap()
    }

    #[test]
    fn world_is_deterministic_and_unique() {
        let a = world();
        assert_eq!(a, world());
        assert_eq!(a.facts.len(), 200);
        a.audit().unwrap();
        assert!(a.config.tokens_needed() <= 64);
    }

    #[test]
    fn undersized_pools_exhaust() {
        let cfg = WorldConfig { n_subjects: 20, n_relations: 8, n_objects: 30, ..Default::default() };
        let dims = ModelDims { vocab: 80, ..Default::default() };
        assert!(matches!(generate_world(&cfg, &dims, 0), Err(Error::World(_))));
    }

    #[test]
    fn too_few_templates_rejected() {
        let cfg = WorldConfig { templates_per_relation: 1, ..Default::default() };
        assert!(generate_world(&cfg, &ModelDims::default(), 0).is_err());
    }

    #[test]
    fn edit_set_sizes() {
        let w = world();
        let s = make_edit_set(&w, 0.25, 1).unwrap();
        assert_eq!((s.edits.len(), s.holdout.len()), (50, 150));
        assert!(s.edits.iter().all(|e| e.old != e.new && w.facts[e.fact_id].object == e.old));
        let full = make_edit_set(&w, 1.0, 1).unwrap();
        assert!(full.holdout.is_empty());
        assert!(make_edit_set(&w, 0.0, 1).is_err());
        assert!(make_edit_set(&w, 1.5, 1).is_err());
    }

    #[test]
    fn paraphrases_differ_from_canonical() {
        let w = world();
        for f in 0..w.facts.len() {
            let canon = w.render(f, 0);
            for t in w.paraphrase_slots() {
                assert_ne!(w.render(f, t), canon);
            }
        }
    }

    #[test]
    fn temporal_chain_walks_objects() {
        let w = world();
        let cfg = ScheduleConfig { kind: ScheduleKind::TemporalChain, chain_length: 3, ..Default::default() };
        let s = build_schedule(&w, &cfg, 2).unwrap();
        assert_eq!(s.phases.len(), 3);
        for p in 1..3 {
            for (a, b) in s.phases[p - 1].edits.iter().zip(&s.phases[p].edits) {
                assert_eq!(a.fact_id, b.fact_id);
                assert_eq!(a.new, b.old);
                assert_ne!(b.old, b.new);
            }
        }
    }

    #[test]
    fn cross_inject_is_disjoint() {
        let w = world();
        let cfg = ScheduleConfig { kind: ScheduleKind::CrossInject, fraction: 0.5, ..Default::default() };
        let s = build_schedule(&w, &cfg, 2).unwrap();
        assert_eq!(s.phases.len(), 2);
        let a: std::collections::HashSet<_> = s.phases[0].edits.iter().map(|e| e.fact_id).collect();
        assert!(s.phases[1].edits.iter().all(|e| !a.contains(&e.fact_id)));
        assert_eq!(s.phases[0].edits.len() + s.phases[1].edits.len(), 100);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.optimizer.rho = 0.0;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn method_presets() {
        let base = OptimizerConfig::default();
        let sft = Method::Sft.apply(&base);
        assert!(!sft.use_sam && !sft.use_dpo && !sft.use_pcgrad);
        assert!(!Method::NoSam.apply(&base).use_sam);
        assert_eq!("rho".parse::<SweepAxis>().unwrap(), SweepAxis::Rho);
        assert!("beta".parse::<SweepAxis>().is_err());
    }
}
