//! One function per subcommand. Each returns the files it read and wrote so
//! the caller can record them in the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use subrefine::checkpoint::Checkpoint;
use subrefine::corpus::{
    build_vocab, generate_toy_corpus, make_triples, read_triples, write_triples, Sentence, TextTriple, Triple,
    Vocabulary,
};
use subrefine::dual_attention::{self, da_train, DAParams};
use subrefine::error_detection::{train_detector, DetectionReport, DetectorParams, StatPrior};
use subrefine::evaluation::{
    corpus_bleu, curve_from_traces, default_grids, emit_curves, full_oracle, partial_oracle, sweep, threshold_free_traces,
};
use subrefine::hellinger_pca::{count_cooccurrence, hellinger_embed, split_tables};
use subrefine::neural_core::{EmbedTable, Tensor, Trainable};
use subrefine::refinement::{
    refine_corpus, stop_reason_counts, train_selector, write_traces, Heuristic, RefinementConfig, RefinementSummary,
    SelectorParams, SubstitutionModel,
};
use subrefine::single_attention::{self, sa_train, SAParams};
use subrefine::training::TrainLog;

use crate::config::{config_error, RunConfig, SPLITS};

pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
}

#[derive(Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

const SOURCE_VOCAB: &str = "vocab.src";
const TARGET_VOCAB: &str = "vocab.tgt";
const EMBED_CKPT: &str = "embed.ckpt";

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// An input produced by an earlier command; missing inputs are
    /// configuration errors.
    fn require(&self, path: PathBuf, producer: &str) -> anyhow::Result<PathBuf> {
        if !path.exists() {
            return Err(config_error(format!(
                "{} not found; run `{producer}` first",
                path.display()
            )));
        }
        Ok(path)
    }

    fn split_file(&self, split: &str) -> anyhow::Result<PathBuf> {
        self.require(self.cfg.split_path(self.out, split), "gen-data")
    }

    fn vocabs(&self, o: &mut Outcome) -> anyhow::Result<(Vocabulary, Vocabulary)> {
        let s = self.require(self.path(SOURCE_VOCAB), "build-vocab")?;
        let t = self.require(self.path(TARGET_VOCAB), "build-vocab")?;
        let vocabs = (Vocabulary::read(&s)?, Vocabulary::read(&t)?);
        o.inputs.extend([s, t]);
        Ok(vocabs)
    }

    fn triples(&self, split: &str, vocabs: &(Vocabulary, Vocabulary), o: &mut Outcome) -> anyhow::Result<Vec<Triple>> {
        let path = self.split_file(split)?;
        let triples = read_triples(&path)?
            .iter()
            .map(|t| t.encode(&vocabs.0, &vocabs.1))
            .collect::<subrefine::Result<Vec<_>>>()
            .with_context(|| format!("encoding {}", path.display()))?;
        if triples.is_empty() {
            bail!("{} contains no triples", path.display());
        }
        o.inputs.push(path);
        Ok(triples)
    }

    fn init_tables(&self, o: &mut Outcome) -> anyhow::Result<Option<(EmbedTable, EmbedTable)>> {
        if !self.cfg.model.hellinger_init {
            return Ok(None);
        }
        let path = self.require(self.path(EMBED_CKPT), "embed-init")?;
        let ck = Checkpoint::read(&path)?;
        o.inputs.push(path);
        Ok(Some((
            EmbedTable::new(ck.tensor("src_embed")?.clone())?,
            EmbedTable::new(ck.tensor("tgt_embed")?.clone())?,
        )))
    }

    fn save<M: Trainable>(&self, name: &str, model: &M, meta: BTreeMap<String, String>, o: &mut Outcome) -> anyhow::Result<()> {
        let path = self.path(name);
        Checkpoint::from_model(model, meta).write(&path)?;
        o.artifacts.push(path);
        Ok(())
    }

    fn write(&self, name: &str, content: &str, o: &mut Outcome) -> anyhow::Result<()> {
        let path = self.path(name);
        fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
        o.artifacts.push(path);
        Ok(())
    }

    fn load_checkpoint(&self, name: &str, producer: &str, o: &mut Outcome) -> anyhow::Result<Checkpoint> {
        let path = self.require(self.path(name), producer)?;
        let ck = Checkpoint::read(&path)?;
        o.inputs.push(path);
        Ok(ck)
    }

    fn model(&self, o: &mut Outcome) -> anyhow::Result<LoadedModel> {
        let kind = self.cfg.refine.model.as_str();
        let ck = self.load_checkpoint(&format!("{kind}.ckpt"), &format!("train-{kind}"), o)?;
        let sv = ck.meta_usize("source_vocab")?;
        let tv = ck.meta_usize("target_vocab")?;
        Ok(if kind == "single" {
            let mut m = SAParams::new(sv, tv, &self.cfg.sa_config(meta_flag(&ck, "left_only")), 0);
            ck.load_into(&mut m)?;
            LoadedModel::Single(m)
        } else {
            let mut m = DAParams::new(sv, tv, &self.cfg.da_config(), 0);
            ck.load_into(&mut m)?;
            LoadedModel::Dual(Box::new(m))
        })
    }

    fn selector(&self, o: &mut Outcome) -> anyhow::Result<SelectorParams> {
        let ck = self.load_checkpoint(&format!("selector-{}.ckpt", self.cfg.refine.model), "train-selector", o)?;
        let mut s = SelectorParams::new(ck.meta_usize("hidden")?, 0);
        ck.load_into(&mut s)?;
        Ok(s)
    }
}

fn meta_flag(ck: &Checkpoint, key: &str) -> bool {
    ck.meta.get(key).is_some_and(|v| v == "true")
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

pub enum LoadedModel {
    Single(SAParams),
    Dual(Box<DAParams>),
}

impl SubstitutionModel for LoadedModel {
    fn predict(&self, x: &[usize], sentence: &[usize]) -> subrefine::Result<Tensor> {
        match self {
            LoadedModel::Single(m) => m.predict(x, sentence),
            LoadedModel::Dual(m) => m.predict(x, sentence),
        }
    }
}

pub fn gen_data(ctx: &Run) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let d = &cfg.data;
    let sizes = [d.train_size, d.valid_selector_size, d.valid_choice_size, d.test_size];
    if sizes.contains(&0) {
        return Err(config_error("every data split size must be positive"));
    }
    let spec = cfg.toy_spec();
    let pairs = generate_toy_corpus(&spec, sizes.iter().sum())?;
    let corrupter = subrefine::corpus::Corrupter::new(&cfg.noise_spec(), spec.target_vocab_size)?;
    let triples = make_triples(&pairs, &corrupter);
    let (sv, tv) = spec.vocabularies();
    let mut o = Outcome::default();
    let mut start = 0;
    for (split, n) in SPLITS.iter().zip(sizes) {
        let text: Vec<TextTriple> = triples[start..start + n]
            .iter()
            .map(|t| TextTriple::decode(t, &sv, &tv))
            .collect::<subrefine::Result<_>>()?;
        let path = cfg.split_path(ctx.out, split);
        write_triples(&path, &text)?;
        o.artifacts.push(path);
        start += n;
    }
    println!("wrote {} triples", start);
    Ok(o)
}

pub fn build_vocab_cmd(ctx: &Run) -> anyhow::Result<Outcome> {
    let mut o = Outcome::default();
    let path = ctx.split_file("train")?;
    let text = read_triples(&path)?;
    o.inputs.push(path);
    let sources: Vec<Vec<String>> = text.iter().map(|t| t.source.clone()).collect();
    let targets: Vec<Vec<String>> = text.iter().flat_map(|t| [t.guess.clone(), t.reference.clone()]).collect();
    let d = &ctx.cfg.data;
    let sv = build_vocab(&sources, d.min_count, d.max_vocab);
    let tv = build_vocab(&targets, d.min_count, d.max_vocab);
    for (name, v) in [(SOURCE_VOCAB, &sv), (TARGET_VOCAB, &tv)] {
        let p = ctx.path(name);
        v.write(&p)?;
        o.artifacts.push(p);
    }
    println!("source vocabulary {} types, target vocabulary {} types", sv.len(), tv.len());
    Ok(o)
}

pub fn embed_init(ctx: &Run) -> anyhow::Result<Outcome> {
    let mut o = Outcome::default();
    let vocabs = ctx.vocabs(&mut o)?;
    let triples = ctx.triples("train", &vocabs, &mut o)?;
    let pairs: Vec<(Sentence, Sentence)> = triples.into_iter().map(|t| (t.x, t.y_ref)).collect();
    let (sv, tv) = (vocabs.0.len(), vocabs.1.len());
    let counts = count_cooccurrence(&pairs, sv, tv, ctx.cfg.model.cooccurrence_window)?;
    let joint = hellinger_embed(&counts, ctx.cfg.model.embed_dim)?;
    let (src, tgt) = split_tables(&joint, sv)?;
    let ck = Checkpoint {
        meta: meta(&[("kind", "embeddings".into()), ("dim", ctx.cfg.model.embed_dim.to_string())]),
        tensors: vec![
            ("src_embed".into(), src.rows.value),
            ("tgt_embed".into(), tgt.rows.value),
        ],
    };
    let path = ctx.path(EMBED_CKPT);
    ck.write(&path)?;
    o.artifacts.push(path);
    Ok(o)
}

pub fn train_detector_cmd(ctx: &Run) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let mut o = Outcome::default();
    let vocabs = ctx.vocabs(&mut o)?;
    let train = ctx.triples("train", &vocabs, &mut o)?;
    let valid = ctx.triples("valid_choice", &vocabs, &mut o)?;
    let eval = ctx.triples(&cfg.refine.split, &vocabs, &mut o)?;
    let (sv, tv) = (vocabs.0.len(), vocabs.1.len());
    let mut init = DetectorParams::new(sv, tv, &cfg.detector_config(), cfg.run.seed);
    if let Some((s, t)) = ctx.init_tables(&mut o)? {
        init.set_embeddings(&s, &t)?;
    }
    let (det, log) = train_detector(&train, sv, tv, &cfg.detector_config(), &cfg.detector_train_config(), Some(init), Some(&valid))?;
    report_log("detector", &log);
    let report = DetectionReport::evaluate(&eval, &StatPrior::fit(&train), Some(&det), cfg.model.detector_threshold)?;
    println!("{report}");
    let m = meta(&[
        ("kind", "detector".into()),
        ("source_vocab", sv.to_string()),
        ("target_vocab", tv.to_string()),
    ]);
    ctx.save("detector.ckpt", &det, m, &mut o)?;
    ctx.write("detection.csv", &report.to_csv(), &mut o)?;
    Ok(o)
}

fn report_log(name: &str, log: &TrainLog) {
    for (e, l) in log.epoch_losses.iter().enumerate() {
        match log.validation_losses.get(e) {
            Some(v) => eprintln!("{name} epoch {} loss {l:.4} validation {v:.4} lr {}", e + 1, log.learning_rates[e]),
            None => eprintln!("{name} epoch {} loss {l:.4} lr {}", e + 1, log.learning_rates[e]),
        }
    }
}

pub fn train_single(ctx: &Run) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let mut o = Outcome::default();
    let vocabs = ctx.vocabs(&mut o)?;
    let pairs = |ts: Vec<Triple>| -> Vec<(Sentence, Sentence)> { ts.into_iter().map(|t| (t.x, t.y_ref)).collect() };
    let train = pairs(ctx.triples("train", &vocabs, &mut o)?);
    let valid = pairs(ctx.triples("valid_choice", &vocabs, &mut o)?);
    let (sv, tv) = (vocabs.0.len(), vocabs.1.len());
    let mcfg = cfg.sa_config(false);
    let mut init = SAParams::new(sv, tv, &mcfg, cfg.run.seed);
    if let Some((s, t)) = ctx.init_tables(&mut o)? {
        init.set_embeddings(&s, &t)?;
    }
    let (model, log) = sa_train(&train, sv, tv, &mcfg, &cfg.train_config(), Some(init), Some(&valid))?;
    report_log("single", &log);
    println!("single-attention validation perplexity {:.4}", single_attention::perplexity(&model, &valid)?);
    let m = meta(&[
        ("kind", "single".into()),
        ("source_vocab", sv.to_string()),
        ("target_vocab", tv.to_string()),
        ("left_only", "false".into()),
    ]);
    ctx.save("single.ckpt", &model, m, &mut o)?;
    Ok(o)
}

pub fn train_dual(ctx: &Run) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let mut o = Outcome::default();
    let vocabs = ctx.vocabs(&mut o)?;
    let train = ctx.triples("train", &vocabs, &mut o)?;
    let valid = ctx.triples("valid_choice", &vocabs, &mut o)?;
    let (sv, tv) = (vocabs.0.len(), vocabs.1.len());
    let mcfg = cfg.da_config();
    let mut init = DAParams::new(sv, tv, &mcfg, cfg.run.seed);
    if let Some((s, t)) = ctx.init_tables(&mut o)? {
        init.set_embeddings(&s, &t)?;
    }
    let (model, log) = da_train(&train, sv, tv, &mcfg, &cfg.train_config(), Some(init), Some(&valid))?;
    report_log("dual", &log);
    println!("dual-attention validation perplexity {:.4}", dual_attention::perplexity(&model, &valid)?);
    let m = meta(&[
        ("kind", "dual".into()),
        ("source_vocab", sv.to_string()),
        ("target_vocab", tv.to_string()),
    ]);
    ctx.save("dual.ckpt", &model, m, &mut o)?;
    Ok(o)
}

pub fn train_selector_cmd(ctx: &Run) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let mut o = Outcome::default();
    let vocabs = ctx.vocabs(&mut o)?;
    let data = ctx.triples("valid_selector", &vocabs, &mut o)?;
    let model = ctx.model(&mut o)?;
    let (sel, log) = train_selector(&model, &data, cfg.model.selector_hidden_dim, &cfg.selector_train_config())?;
    report_log("selector", &log);
    let m = meta(&[("kind", "selector".into()), ("hidden", cfg.model.selector_hidden_dim.to_string())]);
    ctx.save(&format!("selector-{}.ckpt", cfg.refine.model), &sel, m, &mut o)?;
    Ok(o)
}

fn selector_if_needed(ctx: &Run, heuristics: &[Heuristic], o: &mut Outcome) -> anyhow::Result<Option<SelectorParams>> {
    if heuristics.contains(&Heuristic::Cl) {
        Ok(Some(ctx.selector(o)?))
    } else {
        Ok(None)
    }
}

pub fn refine(ctx: &Run) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let mut o = Outcome::default();
    let vocabs = ctx.vocabs(&mut o)?;
    let triples = ctx.triples(&cfg.refine.split, &vocabs, &mut o)?;
    let model = ctx.model(&mut o)?;
    let heuristic = cfg.heuristic()?;
    let rcfg = RefinementConfig {
        heuristic,
        threshold: cfg.refine.threshold,
        budget: cfg.refine.budget,
        selector: selector_if_needed(ctx, &[heuristic], &mut o)?,
    };
    let sources: Vec<Sentence> = triples.iter().map(|t| t.x.clone()).collect();
    let guesses: Vec<Sentence> = triples.iter().map(|t| t.y_g.clone()).collect();
    let refs: Vec<Sentence> = triples.iter().map(|t| t.y_ref.clone()).collect();
    let traces = refine_corpus(&model, &sources, &guesses, &rcfg)?;
    let summary = RefinementSummary::from_traces(&traces, Some(&refs))?;

    let refined: Vec<TextTriple> = triples
        .iter()
        .zip(&traces)
        .map(|(t, tr)| {
            TextTriple::decode(
                &Triple {
                    x: t.x.clone(),
                    y_g: tr.final_sentence.clone(),
                    y_ref: t.y_ref.clone(),
                },
                &vocabs.0,
                &vocabs.1,
            )
        })
        .collect::<subrefine::Result<_>>()?;
    let kind = &cfg.refine.model;
    let refined_path = ctx.path(&format!("refined-{kind}.tsv"));
    write_triples(&refined_path, &refined)?;
    o.artifacts.push(refined_path);
    let mut buf = Vec::new();
    write_traces(&traces, &mut buf)?;
    ctx.write(&format!("traces-{kind}.tsv"), &String::from_utf8(buf)?, &mut o)?;
    ctx.write(&format!("summary-{kind}.csv"), &summary.to_csv(), &mut o)?;
    print!("{}", summary.to_csv());
    for (reason, n) in stop_reason_counts(&traces) {
        eprintln!("stopped on {reason}: {n}");
    }
    Ok(o)
}

pub fn evaluate(ctx: &Run) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let mut o = Outcome::default();
    let vocabs = ctx.vocabs(&mut o)?;
    let triples = ctx.triples(&cfg.refine.split, &vocabs, &mut o)?;
    let kind = &cfg.refine.model;
    let refined_path = ctx.require(ctx.path(&format!("refined-{kind}.tsv")), "refine")?;
    let refined: Vec<Sentence> = read_triples(&refined_path)?
        .iter()
        .map(|t| vocabs.1.encode(&t.guess))
        .collect::<subrefine::Result<_>>()?;
    o.inputs.push(refined_path);
    if refined.len() != triples.len() {
        bail!("refined file has {} sentences, split has {}", refined.len(), triples.len());
    }
    let refs: Vec<Sentence> = triples.iter().map(|t| t.y_ref.clone()).collect();
    let guesses: Vec<Sentence> = triples.iter().map(|t| t.y_g.clone()).collect();
    let before = corpus_bleu(&guesses, &refs)?;
    let after = corpus_bleu(&refined, &refs)?;
    let changed: usize = guesses
        .iter()
        .zip(&refined)
        .map(|(g, r)| g.iter().zip(r.iter()).filter(|(a, b)| a != b).count())
        .sum();
    let tokens: usize = guesses.iter().map(|g| g.len()).sum();
    let csv = format!(
        "metric,value\nbleu_baseline,{}\nbleu_refined,{}\npct_tokens_changed,{}\n",
        before.score,
        after.score,
        100.0 * changed as f64 / tokens as f64
    );
    print!("{csv}");
    ctx.write(&format!("evaluation-{kind}.csv"), &csv, &mut o)?;
    Ok(o)
}

pub fn oracle(ctx: &Run) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let mut o = Outcome::default();
    let vocabs = ctx.vocabs(&mut o)?;
    let triples = ctx.triples(&cfg.refine.split, &vocabs, &mut o)?;
    let model = ctx.model(&mut o)?;
    let heuristic = cfg.heuristic()?;
    let selector = selector_if_needed(ctx, &[heuristic], &mut o)?;
    let budget = cfg.sweep.max_budget;
    let refs: Vec<&[usize]> = triples.iter().map(|t| t.y_ref.ids()).collect();
    use rayon::prelude::*;
    let full = triples
        .par_iter()
        .map(|t| full_oracle(&model, &t.x, &t.y_g, &t.y_ref, budget))
        .collect::<subrefine::Result<Vec<_>>>()?;
    let partial = triples
        .par_iter()
        .map(|t| partial_oracle(&model, &t.x, &t.y_g, &t.y_ref, heuristic, selector.as_ref(), budget))
        .collect::<subrefine::Result<Vec<_>>>()?;
    let kind = &cfg.refine.model;
    for (name, traces) in [("full", &full), ("partial", &partial)] {
        let points = curve_from_traces(traces, &refs, 0.0, budget)?;
        let (b, p) = (
            ctx.path(&format!("oracle-{kind}-{name}-bleu.csv")),
            ctx.path(&format!("oracle-{kind}-{name}-modified.csv")),
        );
        emit_curves(&points, &b, &p)?;
        o.artifacts.extend([b, p]);
        let last = points.last().expect("budget curve has N = 0");
        println!("{name} oracle: BLEU {:.2} -> {:.2} at N = {budget}", points[0].bleu, last.bleu);
    }
    Ok(o)
}

pub fn sweep_cmd(ctx: &Run) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let mut o = Outcome::default();
    let vocabs = ctx.vocabs(&mut o)?;
    let triples = ctx.triples(&cfg.sweep.split, &vocabs, &mut o)?;
    let model = ctx.model(&mut o)?;
    let heuristics = cfg.sweep_heuristics()?;
    let selector = selector_if_needed(ctx, &heuristics, &mut o)?;
    let pairs: Vec<(Heuristic, Option<&SelectorParams>)> = heuristics
        .iter()
        .map(|&h| (h, selector.as_ref().filter(|_| h == Heuristic::Cl)))
        .collect();
    let (t_grid, _) = default_grids();
    let n_grid: Vec<usize> = (0..=cfg.sweep.max_budget).collect();
    let kind = &cfg.refine.model;
    let result = sweep(kind, &model, &triples, &pairs, &t_grid, &n_grid)?;
    ctx.write(&format!("sweep-{kind}.csv"), &result.to_csv(), &mut o)?;
    let best = result.best_row();
    let best_csv = format!(
        "model,heuristic,t,n,bleu\n{},{},{},{},{}\n",
        best.model, best.heuristic, best.t, best.n, best.bleu
    );
    ctx.write(&format!("sweep-{kind}-best.csv"), &best_csv, &mut o)?;
    println!(
        "baseline BLEU {:.2}; best {} t={} N={} BLEU {:.2} ({:.2}% tokens modified)",
        result.baseline_bleu, best.heuristic, best.t, best.n, best.bleu, best.pct_modified
    );
    Ok(o)
}

/// Reads the heuristic and threshold chosen by `sweep`.
fn best_setting(path: &Path) -> anyhow::Result<(Heuristic, f64)> {
    let text = fs::read_to_string(path)?;
    let row = text.lines().nth(1).with_context(|| format!("{} has no data row", path.display()))?;
    let f: Vec<&str> = row.split(',').collect();
    if f.len() != 5 {
        bail!("{}: malformed row '{row}'", path.display());
    }
    Ok((f[1].parse()?, f[2].parse()?))
}

pub fn curves(ctx: &Run) -> anyhow::Result<Outcome> {
    let cfg = ctx.cfg;
    let mut o = Outcome::default();
    let vocabs = ctx.vocabs(&mut o)?;
    let triples = ctx.triples(&cfg.refine.split, &vocabs, &mut o)?;
    let model = ctx.model(&mut o)?;
    let kind = &cfg.refine.model;
    let best_path = ctx.require(ctx.path(&format!("sweep-{kind}-best.csv")), "sweep")?;
    let (heuristic, t) = best_setting(&best_path)?;
    o.inputs.push(best_path);
    let selector = selector_if_needed(ctx, &[heuristic], &mut o)?;
    let traces = threshold_free_traces(&model, &triples, heuristic, selector.as_ref(), cfg.sweep.max_budget)?;
    let refs: Vec<&[usize]> = triples.iter().map(|t| t.y_ref.ids()).collect();
    let points = curve_from_traces(&traces, &refs, t, cfg.sweep.max_budget)?;
    let (b, p) = (
        ctx.path(&format!("curve-{kind}-bleu.csv")),
        ctx.path(&format!("curve-{kind}-modified.csv")),
    );
    emit_curves(&points, &b, &p)?;
    o.artifacts.extend([b, p]);
    for pt in &points {
        println!("N={:2} BLEU {:.2} modified {:.2}%", pt.n, pt.bleu, pt.pct_modified);
    }
    Ok(o)
}
