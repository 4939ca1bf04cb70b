//! Subcommand bodies. Each returns the number of failed rows; the caller
//! turns a nonzero count into exit status 1.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use ffsv_core::audio_io::{self, Waveform};
use ffsv_core::backend::{
    self, enroll_with_eda, Embedding, EnergyDetector, GvadDetector, ModelEmbedder, VoiceDetector,
};
use ffsv_core::embed_net::{self, extract_embedding};
use ffsv_core::eval::{self, EmbeddingIndex, Label, Scorer, Trial};
use ffsv_core::features::{self, FeatureMatrix, FrameConfig};
use ffsv_core::room_sim;
use ffsv_core::seed::rng_for;
use ffsv_core::synth::{self, CorpusConfig};
use ffsv_core::vad::{self, EnergyVadConfig, FrameMask, GvadFrontEnd};
use ffsv_core::{Model, PldaModel};

use crate::config::{Backend, RunConfig, UsageError};
use crate::manifest::{self, Channel, Row};
use crate::runlog::RunLog;

const RATE: u32 = 16_000;

/// Runs `f` on every row in parallel. Failures are reported on stderr and
/// counted; successes come back in manifest order.
fn per_row<T, F>(rows: &[Row], f: F) -> (Vec<T>, usize)
where
    T: Send,
    F: Fn(&Row) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = rows.par_iter().map(&f).collect();
    let mut ok = Vec::with_capacity(rows.len());
    let mut failed = 0;
    for (row, r) in rows.iter().zip(results) {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                eprintln!("error: row {}: {e:#}", row.utt_id);
                failed += 1;
            }
        }
    }
    (ok, failed)
}

fn log_rows(log: &mut RunLog, rows: &[Row]) -> Result<()> {
    let paths: BTreeSet<&Path> = rows.iter().map(|r| r.path.as_path()).collect();
    for p in paths {
        // Unreadable audio is reported by the row itself.
        if p.exists() {
            log.input(p)?;
        }
    }
    Ok(())
}

fn read_noise_dir(dir: &Path) -> Result<Vec<(PathBuf, Waveform)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading noise directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(UsageError(format!("no .wav files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let chans = audio_io::read_wav(&p).with_context(|| format!("reading {}", p.display()))?;
            let w = audio_io::resample(&chans[0], RATE)?;
            Ok((p, w))
        })
        .collect()
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn check_feature_dim(cfg: &RunConfig, model: &Model) -> Result<()> {
    let dim = cfg.features().output_dim();
    if dim != model.config.input_dim {
        bail!(UsageError(format!(
            "model expects {}-dimensional features but the configured front-end gives {dim} \
             (check feature.kind)",
            model.config.input_dim
        )));
    }
    Ok(())
}

pub fn synth_dataset(cfg: &RunConfig, out: &Path) -> Result<usize> {
    if cfg.synth_utts < 4 {
        bail!(UsageError("synth.utts must be at least 4".into()));
    }
    let mut log = RunLog::new("synth-dataset", cfg);
    std::fs::create_dir_all(out.join("audio"))?;
    std::fs::create_dir_all(out.join("noise"))?;
    let corpus = synth::generate_corpus(&CorpusConfig {
        seed: cfg.seed,
        n_speakers: cfg.synth_speakers,
        utts_per_speaker: cfg.synth_utts,
        ..CorpusConfig::default()
    })?;
    corpus.par_iter().try_for_each(|u| {
        audio_io::write_wav(out.join("audio").join(format!("{}.wav", u.utt_id)), std::slice::from_ref(&u.waveform))
            .map_err(anyhow::Error::from)
    })?;
    for (id, w) in synth::noise_bank(cfg.seed, cfg.synth_noises, cfg.synth_noise_secs, RATE)? {
        audio_io::write_wav(out.join("noise").join(format!("{id}.wav")), &[w])?;
    }
    // Last two utterances of each speaker are tests, the one before is the
    // enrollment, everything earlier is training material.
    let n = cfg.synth_utts;
    let (mut train, mut enroll, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for u in &corpus {
        let k: usize = u.utt_id.rsplit('u').next().and_then(|s| s.parse().ok()).unwrap_or(0);
        let (list, condition) = if k + 2 >= n {
            (&mut test, "test")
        } else if k + 3 == n {
            (&mut enroll, "enroll")
        } else {
            (&mut train, "train")
        };
        list.push(Row {
            utt_id: u.utt_id.clone(),
            speaker_id: u.speaker_id.clone(),
            rel_path: format!("audio/{}.wav", u.utt_id),
            path: out.join("audio").join(format!("{}.wav", u.utt_id)),
            channel: Channel::Index(0),
            visit: "v1".into(),
            condition: condition.into(),
        });
    }
    let mut trials = Vec::new();
    for e in &enroll {
        for t in &test {
            trials.push(Trial {
                enroll_id: e.utt_id.clone(),
                test_ids: vec![t.utt_id.clone()],
                label: if e.speaker_id == t.speaker_id { Label::Target } else { Label::Nontarget },
            });
        }
    }
    std::fs::write(out.join("train.tsv"), manifest::format(&train))?;
    std::fs::write(out.join("enroll.tsv"), manifest::format(&enroll))?;
    std::fs::write(out.join("test.tsv"), manifest::format(&test))?;
    std::fs::write(out.join("trials.tsv"), eval::format_trials(&trials))?;
    log.note(format!(
        "utterances\t{}\ntrain\t{}\nenroll\t{}\ntest\t{}\ntrials\t{}",
        corpus.len(),
        train.len(),
        enroll.len(),
        test.len(),
        trials.len()
    ));
    log.finish(out)?;
    Ok(0)
}

pub fn simulate(
    cfg: &RunConfig,
    manifest_path: &Path,
    noise_dir: &Path,
    out_dir: &Path,
    out_manifest: Option<&Path>,
) -> Result<usize> {
    let rows = manifest::load(manifest_path)?;
    let room = cfg.room_config();
    room.validate().map_err(|e| UsageError(e.to_string()))?;
    let mut log = RunLog::new("simulate", cfg);
    log.input(manifest_path)?;
    log_rows(&mut log, &rows)?;
    let bank = read_noise_dir(noise_dir)?;
    for (p, _) in &bank {
        log.input(p)?;
    }
    let noises: Vec<Waveform> = bank.into_iter().map(|(_, w)| w).collect();
    std::fs::create_dir_all(out_dir.join("audio"))?;
    let vad_cfg = EnergyVadConfig::default();
    let (done, failed) = per_row(&rows, |row| {
        let clean = manifest::load_primary(row, RATE)?;
        let mut rng = rng_for(cfg.seed, &row.utt_id);
        let aug = room_sim::augment(&clean, &noises, &room, &vad_cfg, &mut rng)?;
        let new_id = format!("{}{}", row.utt_id, cfg.simulate_suffix);
        let rel = format!("audio/{}.wav", safe_name(&new_id));
        audio_io::write_wav(out_dir.join(&rel), &aug.channels)?;
        let out_row = Row {
            utt_id: new_id,
            speaker_id: row.speaker_id.clone(),
            path: out_dir.join(&rel),
            rel_path: rel,
            channel: if aug.channels.len() > 1 { Channel::All } else { Channel::Index(0) },
            visit: row.visit.clone(),
            condition: "simulated".into(),
        };
        let r = &aug.room;
        let note = format!(
            "row\t{}\tsnr_db={:.3}\tnoise={}\troom={:.3}x{:.3}x{:.3}\tabsorption={:.3}",
            row.utt_id,
            aug.snr_db,
            aug.noise_index,
            r.dimensions[0],
            r.dimensions[1],
            r.dimensions[2],
            r.absorption.iter().sum::<f64>() / 6.0
        );
        Ok((out_row, note))
    });
    let (out_rows, notes): (Vec<Row>, Vec<String>) = done.into_iter().unzip();
    let target = out_manifest.map_or_else(|| out_dir.join("manifest.tsv"), Path::to_path_buf);
    std::fs::write(&target, manifest::format(&out_rows))?;
    for n in notes {
        log.note(n);
    }
    log.note(format!("failed_rows\t{failed}"));
    log.finish(&target)?;
    Ok(failed)
}

/// Features of every channel the row selects, keyed by embedding-style id.
fn row_features(cfg: &RunConfig, row: &Row) -> Result<Vec<(String, FeatureMatrix)>> {
    let fc = cfg.features();
    manifest::load_audio(row, RATE)?
        .into_iter()
        .map(|(id, w)| Ok((id, fc.extract(&w)?)))
        .collect()
}

pub fn extract_features(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<usize> {
    let rows = manifest::load(manifest_path)?;
    let mut log = RunLog::new("extract-features", cfg);
    log.input(manifest_path)?;
    log_rows(&mut log, &rows)?;
    let (done, failed) = per_row(&rows, |row| row_features(cfg, row));
    let mut items: Vec<(String, FeatureMatrix)> = done.into_iter().flatten().collect();
    items.sort_by(|a, b| a.0.cmp(&b.0));
    features::write_feature_archive(out, items.iter().map(|(id, m)| (id.as_str(), m)))?;
    log.note(format!("records\t{}\nfailed_rows\t{failed}", items.len()));
    log.finish(out)?;
    Ok(failed)
}

pub fn train_vad(cfg: &RunConfig, manifest_path: &Path, noise_dir: &Path, out: &Path) -> Result<usize> {
    let rows = manifest::load(manifest_path)?;
    let mut log = RunLog::new("train-vad", cfg);
    log.input(manifest_path)?;
    log_rows(&mut log, &rows)?;
    let bank = read_noise_dir(noise_dir)?;
    for (p, _) in &bank {
        log.input(p)?;
    }
    let noises: Vec<Waveform> = bank.into_iter().map(|(_, w)| w).collect();
    let room = cfg.room_config();
    room.validate().map_err(|e| UsageError(e.to_string()))?;
    let front = GvadFrontEnd::default();
    let vad_cfg = EnergyVadConfig::default();
    // Labels come from the energy VAD on the clean signal and are reused for
    // its simulated copy, which has the same length.
    let (done, failed) = per_row(&rows, |row| {
        let clean = manifest::load_primary(row, RATE)?;
        let labels = vad::energy_vad_waveform(&clean, &front.features.frame, &vad_cfg)?;
        let mut rng = rng_for(cfg.seed, &format!("vad:{}", row.utt_id));
        let aug = room_sim::augment(&clean, &noises, &room, &vad_cfg, &mut rng)?;
        let mut out = Vec::new();
        for w in [&clean, &aug.channels[0]] {
            let f = front.extract(w)?;
            if f.frames != labels.len() {
                bail!("{} feature frames but {} label frames", f.frames, labels.len());
            }
            out.push((f, labels.clone()));
        }
        Ok(out)
    });
    let (feats, labels): (Vec<FeatureMatrix>, Vec<FrameMask>) = done.into_iter().flatten().unzip();
    if feats.is_empty() {
        bail!("no usable training rows");
    }
    let (model, losses) = vad::gvad_train_logged(&feats, &labels, &cfg.gvad)?;
    vad::save_gvad(out, &model)?;
    let speech: usize = labels.iter().map(FrameMask::speech_frames).sum();
    let total: usize = labels.iter().map(FrameMask::len).sum();
    log.note(format!("frames\t{total}\tspeech_frames\t{speech}\ttrees\t{}", model.trees.len()));
    for (i, l) in losses.iter().enumerate() {
        log.note(format!("loss\t{i}\t{l:.6}"));
    }
    log.note(format!("failed_rows\t{failed}"));
    log.finish(out)?;
    Ok(failed)
}

/// Training examples (one per channel) and the sorted speaker list that
/// defines class indices.
fn training_data(cfg: &RunConfig, rows: &[Row]) -> (Vec<(FeatureMatrix, usize)>, Vec<String>, usize) {
    let speakers: Vec<String> = rows
        .iter()
        .map(|r| r.speaker_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class: HashMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let (done, failed) = per_row(rows, |row| {
        let c = class[row.speaker_id.as_str()];
        Ok(row_features(cfg, row)?.into_iter().map(|(_, f)| (f, c)).collect::<Vec<_>>())
    });
    (done.into_iter().flatten().collect(), speakers, failed)
}

fn log_training(log: &mut RunLog, speakers: &[String], tlog: &embed_net::TrainLog, n: usize) {
    log.note(format!("examples\t{n}"));
    for (i, s) in speakers.iter().enumerate() {
        log.note(format!("class\t{i}\t{s}"));
    }
    for line in tlog.to_tsv().lines() {
        log.note(format!("epoch\t{line}"));
    }
}

pub fn train(cfg: &RunConfig, manifests: &[PathBuf], out: &Path) -> Result<usize> {
    let rows = manifest::load_all(manifests)?;
    let mut log = RunLog::new("train", cfg);
    log.inputs(manifests.iter().map(PathBuf::as_path))?;
    log_rows(&mut log, &rows)?;
    let (data, speakers, failed) = training_data(cfg, &rows);
    if data.is_empty() {
        bail!("no usable training rows");
    }
    let net = cfg.network(speakers.len());
    net.validate().map_err(|e| UsageError(e.to_string()))?;
    let mut rng = rng_for(cfg.seed, "train");
    let mut model = Model::new(net, &mut rng)?;
    let tlog = embed_net::train(&mut model, &data, &cfg.schedule, &cfg.train_options(), &mut rng)?;
    model.save(out)?;
    log_training(&mut log, &speakers, &tlog, data.len());
    log.note(format!("failed_rows\t{failed}"));
    log.finish(out)?;
    Ok(failed)
}

pub fn finetune(cfg: &RunConfig, model_in: &Path, manifests: &[PathBuf], out: &Path) -> Result<usize> {
    let rows = manifest::load_all(manifests)?;
    let mut log = RunLog::new("finetune", cfg);
    log.input(model_in)?;
    log.inputs(manifests.iter().map(PathBuf::as_path))?;
    log_rows(&mut log, &rows)?;
    let mut model = Model::load(model_in)?;
    check_feature_dim(cfg, &model)?;
    let (data, speakers, failed) = training_data(cfg, &rows);
    if data.is_empty() {
        bail!("no usable training rows");
    }
    let mut rng = rng_for(cfg.seed, "finetune");
    let tlog = embed_net::fine_tune(
        &mut model,
        &data,
        speakers.len(),
        cfg.finetune_epochs,
        &cfg.train_options(),
        &mut rng,
    )?;
    model.save(out)?;
    log_training(&mut log, &speakers, &tlog, data.len());
    log.note(format!("failed_rows\t{failed}"));
    log.finish(out)?;
    Ok(failed)
}

pub fn extract_embeddings(cfg: &RunConfig, model_path: &Path, manifest_path: &Path, out: &Path) -> Result<usize> {
    let rows = manifest::load(manifest_path)?;
    let mut log = RunLog::new("extract-embeddings", cfg);
    log.input(model_path)?;
    log.input(manifest_path)?;
    log_rows(&mut log, &rows)?;
    let model = Model::load(model_path)?;
    check_feature_dim(cfg, &model)?;
    let (done, failed) = per_row(&rows, |row| {
        row_features(cfg, row)?
            .into_iter()
            .map(|(id, f)| Ok(extract_embedding(&model, &id, &f)?))
            .collect::<Result<Vec<_>>>()
    });
    let mut embs: Vec<Embedding> = done.into_iter().flatten().collect();
    embs.sort_by(|a, b| a.id.cmp(&b.id));
    backend::save_embeddings(out, &embs)?;
    log.note(format!("embeddings\t{}\nfailed_rows\t{failed}", embs.len()));
    log.finish(out)?;
    Ok(failed)
}

fn load_embedding_files(log: &mut RunLog, paths: &[PathBuf]) -> Result<Vec<Embedding>> {
    let mut all = Vec::new();
    let mut seen = BTreeSet::new();
    for p in paths {
        log.input(p)?;
        for e in backend::load_embeddings(p).with_context(|| format!("reading {}", p.display()))? {
            if !seen.insert(e.id.clone()) {
                bail!("embedding id {:?} appears more than once", e.id);
            }
            all.push(e);
        }
    }
    Ok(all)
}

pub fn train_plda(cfg: &RunConfig, embeddings: &[PathBuf], manifests: &[PathBuf], out: &Path) -> Result<usize> {
    let rows = manifest::load_all(manifests)?;
    let mut log = RunLog::new("train-plda", cfg);
    log.inputs(manifests.iter().map(PathBuf::as_path))?;
    let embs = load_embedding_files(&mut log, embeddings)?;
    let speaker: HashMap<&str, &str> = rows
        .iter()
        .map(|r| (r.utt_id.as_str(), r.speaker_id.as_str()))
        .collect();
    let mut data = Vec::with_capacity(embs.len());
    let mut unknown = Vec::new();
    for e in &embs {
        match speaker.get(manifest::base_id(&e.id)) {
            Some(s) => data.push((*s, e.vector.as_slice())),
            None => unknown.push(e.id.clone()),
        }
    }
    if !unknown.is_empty() {
        bail!("no manifest row for embeddings: {}", unknown.join(", "));
    }
    let fit = backend::plda_train(&data, &cfg.plda)?;
    fit.model.save(out)?;
    log.note(format!("embeddings\t{}", data.len()));
    for (i, ll) in fit.log_likelihoods.iter().enumerate() {
        log.note(format!("log_likelihood\t{i}\t{ll:.6}"));
    }
    log.finish(out)?;
    Ok(0)
}

pub struct ScoreInputs<'a> {
    pub trials: &'a Path,
    pub embeddings: &'a [PathBuf],
    pub out: &'a Path,
    pub plda: Option<&'a Path>,
    pub model: Option<&'a Path>,
    pub manifests: &'a [PathBuf],
    pub vad: Option<&'a Path>,
}

pub fn score(cfg: &RunConfig, args: &ScoreInputs<'_>) -> Result<usize> {
    let mut log = RunLog::new("score", cfg);
    log.input(args.trials)?;
    let trials = eval::load_trials(args.trials)?;
    let embs = load_embedding_files(&mut log, args.embeddings)?;
    let plda = match (cfg.backend, args.plda) {
        (Backend::Plda, Some(p)) => {
            log.input(p)?;
            Some(PldaModel::load(p)?)
        }
        (Backend::Plda, None) => bail!(UsageError("backend=plda needs --plda".into())),
        (Backend::Cosine, _) => None,
    };
    let scorer = plda.as_ref().map_or(Scorer::Cosine, Scorer::Plda);
    let index = EmbeddingIndex::new(embs.iter().map(|e| (e.id.as_str(), e.vector.as_slice())));
    let overrides = if cfg.eda {
        Some(eda_enrollments(cfg, args, &trials, &mut log)?)
    } else {
        None
    };
    let lookup = |t: &Trial| -> ffsv_core::Result<Vec<f64>> {
        let map = overrides.as_ref().expect("only used with EDA");
        Ok(map[&(t.enroll_id.clone(), t.test_list())].clone())
    };
    let scores = eval::score_trials(
        &trials,
        &index,
        &scorer,
        cfg.fusion,
        overrides.as_ref().map(|_| &lookup as &dyn Fn(&Trial) -> ffsv_core::Result<Vec<f64>>),
    )?;
    eval::write_scores(args.out, &scores)?;
    log.note(format!("trials\t{}", scores.len()));
    log.finish(args.out)?;
    Ok(0)
}

/// Enrollment embeddings augmented with each trial's test noise.
fn eda_enrollments(
    cfg: &RunConfig,
    args: &ScoreInputs<'_>,
    trials: &[Trial],
    log: &mut RunLog,
) -> Result<HashMap<(String, String), Vec<f64>>> {
    let Some(model_path) = args.model else {
        bail!(UsageError("eda=true needs --model".into()));
    };
    if args.manifests.is_empty() {
        bail!(UsageError("eda=true needs --manifest for enrollment and test audio".into()));
    }
    log.input(model_path)?;
    log.inputs(args.manifests.iter().map(PathBuf::as_path))?;
    let model = Model::load(model_path)?;
    check_feature_dim(cfg, &model)?;
    let rows = manifest::load_all(args.manifests)?;
    let by_id: HashMap<&str, &Row> = rows.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    let gvad = match args.vad {
        Some(p) => {
            log.input(p)?;
            Some(vad::load_gvad(p)?)
        }
        None => None,
    };
    let detector: Box<dyn VoiceDetector + Sync> = match &gvad {
        Some(m) => Box::new(GvadDetector {
            model: m,
            front_end: GvadFrontEnd::default(),
        }),
        None => Box::new(EnergyDetector {
            frame: FrameConfig::default(),
            config: EnergyVadConfig::default(),
        }),
    };
    let embedder = ModelEmbedder {
        model: &model,
        features: cfg.features(),
    };
    let channel = match cfg.fusion {
        eval::Fusion::Multi => 0,
        eval::Fusion::Single(k) => k,
    };
    let keys: BTreeSet<(String, String)> = trials
        .iter()
        .map(|t| (t.enroll_id.clone(), t.test_list()))
        .collect();
    let find = |id: &str| -> Result<&Row> {
        by_id
            .get(id)
            .copied()
            .with_context(|| format!("{id:?} is not in the EDA manifests"))
    };
    type Enrolled = ((String, String), Vec<f64>, Option<f64>);
    let done: Vec<Result<Enrolled>> = keys
        .par_iter()
        .map(|(enroll_id, tests)| {
            let enroll = manifest::load_primary(find(enroll_id)?, RATE)?;
            let first = tests.split(',').next().unwrap_or_default();
            let trow = find(first)?;
            let chans = audio_io::read_wav(&trow.path)
                .with_context(|| format!("reading {}", trow.path.display()))?;
            let k = match trow.channel {
                Channel::Index(k) => k,
                Channel::All => channel.min(chans.len() - 1),
            };
            let test = audio_io::resample(
                chans.get(k).with_context(|| format!("{first} has no channel {k}"))?,
                RATE,
            )?;
            let mut rng = rng_for(cfg.seed, &format!("eda:{enroll_id}|{tests}"));
            let o = enroll_with_eda(&enroll, &test, &embedder, detector.as_ref(), &cfg.eda_cfg, &mut rng)?;
            Ok(((enroll_id.clone(), tests.clone()), o.embedding, o.snr_db))
        })
        .collect();
    let mut out = HashMap::new();
    let mut fallbacks = 0;
    for r in done {
        let (key, emb, snr) = r?;
        if snr.is_none() {
            fallbacks += 1;
        }
        out.insert(key, emb);
    }
    log.note(format!("eda_pairs\t{}\teda_fallbacks\t{fallbacks}", out.len()));
    Ok(out)
}

pub fn evaluate(cfg: &RunConfig, trials_path: &Path, scores_path: &Path, out: Option<&Path>) -> Result<usize> {
    let trials = eval::load_trials(trials_path)?;
    let scores = eval::load_scores(scores_path)?;
    let labeled = eval::labeled_scores(&trials, &scores)?;
    let m = eval::compute_metrics(&labeled, &cfg.dcf)?;
    let report = m.report();
    println!("{report}");
    if let Some(out) = out {
        let mut log = RunLog::new("evaluate", cfg);
        log.input(trials_path)?;
        log.input(scores_path)?;
        std::fs::write(out, format!("{report}\n"))?;
        log.note(report);
        log.finish(out)?;
    }
    Ok(0)
}
