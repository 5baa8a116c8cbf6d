use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use super::{CliError, ExperimentConfig};
use crate::aet::{self, AetParams, BasisView};
use crate::corpus::{self, CorpusError, ManifestEntry, MixturePair, Role, SampleFormat, Waveform};
use crate::metrics::{self, BssScores};
use crate::par;
use crate::separator::{build_model, FrontendKind};
use crate::trainer::{self, Checkpoint, EpochLog, TrainError};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";

fn corpus_err(e: CorpusError) -> CliError {
    match &e {
        CorpusError::Io { source, .. } if source.kind() == ErrorKind::NotFound => {
            CliError::usage(e.to_string())
        }
        CorpusError::InsufficientCorpus(_)
        | CorpusError::RateMismatch(..)
        | CorpusError::Manifest { .. } => CliError::usage(e.to_string()),
        _ => CliError::runtime(e.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match &e {
        TrainError::Io { source, .. } if source.kind() == ErrorKind::NotFound => {
            CliError::usage(e.to_string())
        }
        TrainError::Config(_) => CliError::usage(e.to_string()),
        _ => CliError::runtime(e.to_string()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixReport {
    pub manifest: PathBuf,
    pub mixtures: usize,
    pub train: usize,
    pub test: usize,
}

/// Writes `pairNN/sNN.{mix,a,b}.wav` under `out_dir` plus the manifest.
pub fn cmd_mix(
    corpus_root: &Path,
    out_dir: &Path,
    pairs: usize,
    sentences: usize,
    seed: u64,
) -> Result<MixReport, CliError> {
    if !corpus_root.is_dir() {
        return Err(CliError::usage(format!(
            "corpus directory {} does not exist",
            corpus_root.display()
        )));
    }
    let plan = corpus::build_manifest(corpus_root, pairs, sentences, seed).map_err(corpus_err)?;
    let mut entries = Vec::with_capacity(plan.entries.len());
    for spec in &plan.entries {
        let a = corpus::read_wav(&spec.source_a).map_err(corpus_err)?;
        let b = corpus::read_wav(&spec.source_b).map_err(corpus_err)?;
        let mix = corpus::mix_at_0db(&a, &b).map_err(corpus_err)?;
        let path = out_dir.join(corpus::mixture_path(&corpus::mixture_stem(
            spec.pair_id,
            spec.sentence_id,
        )));
        let (pa, pb) = corpus::source_paths(&path);
        for (p, w) in [
            (&path, &mix.mixture),
            (&pa, &mix.source_a),
            (&pb, &mix.source_b),
        ] {
            corpus::write_wav(p, w, SampleFormat::Float32).map_err(corpus_err)?;
        }
        entries.push(ManifestEntry {
            pair_id: format!("pair{:02}", spec.pair_id),
            role: spec.role,
            path,
        });
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    let comment = format!(
        "corpus={}\nseed={seed}\npairs={pairs}\nsentences_per_speaker={sentences}",
        corpus_root.display()
    );
    corpus::write_manifest(&manifest, &entries, &comment).map_err(corpus_err)?;
    let test = entries.iter().filter(|e| e.role == Role::Test).count();
    Ok(MixReport {
        manifest,
        mixtures: entries.len(),
        train: entries.len() - test,
        test,
    })
}

fn load_split(manifest: &Path, role: Role) -> Result<Vec<(ManifestEntry, MixturePair)>, CliError> {
    if !manifest.is_file() {
        return Err(CliError::usage(format!(
            "manifest {} does not exist",
            manifest.display()
        )));
    }
    let entries = corpus::read_manifest(manifest).map_err(corpus_err)?;
    entries
        .into_iter()
        .filter(|e| e.role == role)
        .map(|e| {
            let pair = corpus::load_mixture(&e).map_err(corpus_err)?;
            Ok((e, pair))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<EpochLog>,
}

/// Trains per the configuration and writes the checkpoint and CSV log.
pub fn cmd_train(cfg: &ExperimentConfig, verbose: bool) -> Result<TrainReport, CliError> {
    let train: Vec<MixturePair> = load_split(&cfg.manifest, Role::Train)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    if train.is_empty() {
        return Err(CliError::usage(format!(
            "manifest {} has no training mixtures",
            cfg.manifest.display()
        )));
    }
    let val: Vec<MixturePair> = if cfg.validate_on_test {
        load_split(&cfg.manifest, Role::Test)?
            .into_iter()
            .map(|(_, p)| p)
            .collect()
    } else {
        Vec::new()
    };
    let rate = train[0].mixture.sample_rate();
    if let Some(p) = train
        .iter()
        .chain(&val)
        .find(|p| p.mixture.sample_rate() != rate)
    {
        return Err(CliError::usage(format!(
            "mixtures have different sample rates ({rate} Hz and {} Hz in {}/{})",
            p.mixture.sample_rate(),
            p.pair_id,
            p.sentence_id
        )));
    }
    let model_cfg = cfg.model_config();
    if cfg.train.segment_len < model_cfg.min_len() {
        return Err(CliError::usage(format!(
            "segment_len {} is shorter than the filter width {}",
            cfg.train.segment_len,
            model_cfg.min_len()
        )));
    }
    let model =
        build_model(model_cfg, cfg.train.seed).map_err(|e| CliError::usage(e.to_string()))?;
    if verbose {
        eprintln!(
            "training {} model ({} parameters) on {} mixtures, validating on {}",
            cfg.frontend.name(),
            model.trainable_count(),
            train.len(),
            val.len()
        );
    }
    let trained = trainer::train(model, &train, &val, cfg.target, cfg.train.clone(), |e| {
        if verbose {
            eprintln!(
                "epoch {}: train loss {:.6e}, val sdr {:.3} dB",
                e.epoch, e.train_loss, e.val_sdr_db
            );
        }
    })
    .map_err(train_err)?;

    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    let ckpt = Checkpoint {
        model: trained.model,
        init_seed: cfg.train.seed,
        target: cfg.target,
        sample_rate: rate,
        train: trained.config,
        optimizer: trained.state,
        log: trained.log,
    };
    trainer::save_checkpoint(&ckpt, &checkpoint).map_err(|e| CliError::runtime(e.to_string()))?;
    let log_path = cfg.output_dir.join(LOG_FILE);
    let mut text = String::from("epoch,train_loss,val_sdr_db\n");
    for e in &ckpt.log {
        let _ = writeln!(text, "{},{},{}", e.epoch, e.train_loss, e.val_sdr_db);
    }
    write_text(&log_path, &text)?;
    Ok(TrainReport {
        checkpoint,
        log_path,
        log: ckpt.log,
    })
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    trainer::load_checkpoint(path).map_err(train_err)
}

/// Separates `input` into `output` (float WAV). Returns the sample count.
pub fn cmd_separate(checkpoint: &Path, input: &Path, output: &Path) -> Result<usize, CliError> {
    let ckpt = load_ckpt(checkpoint)?;
    let wave = corpus::read_wav(input).map_err(corpus_err)?;
    if wave.sample_rate() != ckpt.sample_rate {
        return Err(CliError::usage(format!(
            "{} is {} Hz but the model was trained at {} Hz",
            input.display(),
            wave.sample_rate(),
            ckpt.sample_rate
        )));
    }
    let estimate = separate_padded(&ckpt, wave.samples())?;
    let n = estimate.len();
    let out = Waveform::new(estimate, wave.sample_rate()).map_err(corpus_err)?;
    corpus::write_wav(output, &out, SampleFormat::Float32).map_err(corpus_err)?;
    Ok(n)
}

/// Zero-pads inputs shorter than the front-end needs and trims the result.
fn separate_padded(ckpt: &Checkpoint, x: &[f64]) -> Result<Vec<f64>, CliError> {
    let min = ckpt.model.config.min_len();
    let mut padded;
    let input = if x.len() < min {
        padded = x.to_vec();
        padded.resize(min, 0.0);
        &padded[..]
    } else {
        x
    };
    let mut y = ckpt
        .model
        .separate(input)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    y.truncate(x.len());
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub pair: String,
    pub sentence: String,
    pub scores: BssScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub metric: &'static str,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<MetricSummary>,
    pub csv: PathBuf,
    pub summary_csv: PathBuf,
}

/// Linear-interpolation quantile of ascending `sorted` values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(metric: &'static str, values: impl Iterator<Item = f64>) -> MetricSummary {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    MetricSummary {
        metric,
        median: quantile(&v, 0.5),
        q1: quantile(&v, 0.25),
        q3: quantile(&v, 0.75),
    }
}

/// Scores every test mixture; rows keep manifest order whatever the
/// thread count. The summary goes next to `out_csv` as `<stem>_summary.csv`.
pub fn cmd_evaluate(
    checkpoint: &Path,
    manifest: &Path,
    out_csv: &Path,
    filter_len: usize,
    threads: Option<usize>,
    verbose: bool,
) -> Result<EvalReport, CliError> {
    if filter_len == 0 {
        return Err(CliError::usage("filter length must be positive"));
    }
    let ckpt = load_ckpt(checkpoint)?;
    let tests = load_split(manifest, Role::Test)?;
    if tests.is_empty() {
        return Err(CliError::usage(format!(
            "manifest {} has an empty test split",
            manifest.display()
        )));
    }
    if let Some((e, _)) = tests
        .iter()
        .find(|(_, p)| p.mixture.sample_rate() != ckpt.sample_rate)
    {
        return Err(CliError::usage(format!(
            "{} does not match the model's {} Hz sample rate",
            e.path.display(),
            ckpt.sample_rate
        )));
    }
    let target = ckpt.target.index();
    let score = |(_, p): &(ManifestEntry, MixturePair)| -> Result<EvalRow, CliError> {
        let est = separate_padded(&ckpt, p.mixture.samples())?;
        let refs = [p.source_a.samples(), p.source_b.samples()];
        let l = filter_len.min(est.len());
        let scores = metrics::bss_eval(&est, &refs, target, l)
            .map_err(|e| CliError::runtime(format!("{}/{}: {e}", p.pair_id, p.sentence_id)))?;
        if verbose {
            eprintln!(
                "{}/{}: sdr {:.3} dB",
                p.pair_id, p.sentence_id, scores.sdr_db
            );
        }
        Ok(EvalRow {
            pair: p.pair_id.clone(),
            sentence: p.sentence_id.clone(),
            scores,
        })
    };
    let rows: Vec<EvalRow> = par::with_threads(threads, || par::map(&tests, score))
        .into_iter()
        .collect::<Result<_, _>>()?;

    let mut text = String::from("pair,sentence,sdr_db,sir_db,sar_db,L\n");
    for r in &rows {
        let s = &r.scores;
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            r.pair, r.sentence, s.sdr_db, s.sir_db, s.sar_db, s.filter_len
        );
    }
    write_text(out_csv, &text)?;

    let summary = vec![
        summarize("sdr_db", rows.iter().map(|r| r.scores.sdr_db)),
        summarize("sir_db", rows.iter().map(|r| r.scores.sir_db)),
        summarize("sar_db", rows.iter().map(|r| r.scores.sar_db)),
    ];
    let mut text = String::from("metric,median,q1,q3,iqr\n");
    for s in &summary {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            s.metric,
            s.median,
            s.q1,
            s.q3,
            s.q3 - s.q1
        );
    }
    let stem = out_csv
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("evaluation");
    let summary_csv = out_csv.with_file_name(format!("{stem}_summary.csv"));
    write_text(&summary_csv, &text)?;
    Ok(EvalReport {
        rows,
        summary,
        csv: out_csv.to_path_buf(),
        summary_csv,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectReport {
    /// The first `top_n` filters, sorted by dominant bin.
    pub views: Vec<BasisView>,
    pub fft_size: usize,
    /// Mean spectral flatness over all learned analysis filters.
    pub learned_flatness: f64,
    /// The same for the filters the model was initialized with.
    pub initial_flatness: f64,
}

fn mean_flatness(analysis: &crate::autodiff::Tensor, fft_size: usize) -> f64 {
    let views = aet::inspect_bases(analysis, fft_size);
    views
        .iter()
        .map(|v| aet::spectral_flatness(&v.spectrum))
        .sum::<f64>()
        / views.len().max(1) as f64
}

/// Writes `filters.csv`, `spectra.csv`, `dominant_bins.csv` and
/// `flatness.csv` for a learned front-end.
pub fn cmd_inspect(
    checkpoint: &Path,
    out_dir: &Path,
    top_n: usize,
    fft_size: usize,
) -> Result<InspectReport, CliError> {
    if top_n == 0 {
        return Err(CliError::usage("top_n must be positive"));
    }
    let ckpt = load_ckpt(checkpoint)?;
    let params = match (&ckpt.model.aet, ckpt.model.config.frontend) {
        (Some(p), FrontendKind::Aet | FrontendKind::AetOrthogonal) => p,
        _ => {
            return Err(CliError::usage(format!(
                "{} holds an STFT model; there are no learned filters to inspect",
                checkpoint.display()
            )))
        }
    };
    let k = params.num_filters();
    let w = params.filter_width();
    let shown = top_n.min(k);
    let head =
        crate::autodiff::Tensor::new(vec![shown, w], params.analysis.data()[..shown * w].to_vec())
            .map_err(|e| CliError::runtime(e.to_string()))?;
    let views = aet::inspect_bases(&head, fft_size);
    let n_fft = fft_size.max(w).max(2);

    let initial = AetParams::init(&ckpt.model.config.aet, ckpt.init_seed)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let learned_flatness = mean_flatness(&params.analysis, fft_size);
    let initial_flatness = mean_flatness(&initial.analysis, fft_size);

    let join = |v: &[f64]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut filters = String::from("rank,filter,dominant_bin");
    let mut spectra = String::from("rank,filter");
    for t in 0..w {
        let _ = write!(filters, ",w{t}");
    }
    for b in 0..n_fft / 2 + 1 {
        let _ = write!(spectra, ",bin{b}");
    }
    filters.push('\n');
    spectra.push('\n');
    let mut bins = String::from("rank,filter,dominant_bin,dominant_hz\n");
    for (rank, v) in views.iter().enumerate() {
        let _ = writeln!(
            filters,
            "{rank},{},{},{}",
            v.index,
            v.dominant_bin,
            join(&v.filter)
        );
        let _ = writeln!(spectra, "{rank},{},{}", v.index, join(&v.spectrum));
        let hz = v.dominant_bin as f64 * ckpt.sample_rate as f64 / n_fft as f64;
        let _ = writeln!(bins, "{rank},{},{},{hz}", v.index, v.dominant_bin);
    }
    write_text(&out_dir.join("filters.csv"), &filters)?;
    write_text(&out_dir.join("spectra.csv"), &spectra)?;
    write_text(&out_dir.join("dominant_bins.csv"), &bins)?;
    write_text(
        &out_dir.join("flatness.csv"),
        &format!("set,mean_flatness\nlearned,{learned_flatness}\ninitial,{initial_flatness}\n"),
    )?;
    Ok(InspectReport {
        views,
        fft_size: n_fft,
        learned_flatness,
        initial_flatness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[0.0, 10.0, 20.0], 0.5), 10.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), 1.75);
        assert_eq!(quantile(&[5.0], 0.75), 5.0);
        assert!(quantile(&[], 0.5).is_nan());
    }
}
