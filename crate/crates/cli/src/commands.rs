use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use vsprefill_core::attention::{full_attention, recall_streaming, sparse_attention, SparsePattern};
use vsprefill_core::bench::{run_ablation, Ablation, BenchConfig};
use vsprefill_core::datagen::{
    generate_dataset, list_sample_dirs, read_matrix, read_qkv, read_targets, sample_dir_name,
    write_sample_dir, write_tensor, write_vector, PlantSpec, TARGET_S_FILE, TARGET_V_FILE,
};
use vsprefill_core::indexer::{
    evaluate, load_checkpoint, predict, save_checkpoint, train, IndexerSample, InputFeatures,
    LossFn, SlashMapping, TrainConfig,
};
use vsprefill_core::numerics::{Matrix, RopeConfig, Rng};
use vsprefill_core::sparsity::{covered_pairs, causal_pairs, select_pattern, BudgetConfig, SelectedIndices};
use vsprefill_core::theory::{
    expected_score, expected_score_polar, monte_carlo_score, slash_spectrum, GaussianQKModel, McOptions,
};
use vsprefill_core::vsaggregate::{aggregate_streaming, combine_heads, top_k_table, HeadReduction, VSScores};
use vsprefill_core::{Error, Result};

use crate::config::Config;

/// File written next to each sample by `aggregate` and read by `select`.
pub const SCORES_FILE: &str = "scores.vstn";

/// z-score band for the theory check.
const THEORY_BAND: f64 = 4.0;

fn plant_spec(cfg: &Config) -> Result<PlantSpec> {
    let spec = PlantSpec {
        n: cfg.get("n")?,
        d: cfg.get("d")?,
        noise_sigma: cfg.get("noise_sigma")?,
        rope_base: cfg.get("rope_base")?,
        seed: cfg.get("seed")?,
        ..PlantSpec::default()
    };
    spec.validate()?;
    Ok(spec)
}

fn loss_fn(cfg: &Config) -> Result<LossFn> {
    match cfg.raw("kl_direction") {
        "forward" => Ok(LossFn::Kl { eps: cfg.get("eps")? }),
        "reverse" => Ok(LossFn::ReverseKl),
        other => Err(Error::config(format!(
            "kl_direction must be forward or reverse, got {other:?}"
        ))),
    }
}

fn train_config(cfg: &Config) -> Result<TrainConfig> {
    let tc = TrainConfig {
        steps: cfg.get("steps")?,
        lr_peak: cfg.get("lr_peak")?,
        warmup_steps: cfg.get("warmup")?,
        accumulation: cfg.get("accumulation")?,
        seed: cfg.get("seed")?,
        d_h: cfg.get("d_h")?,
        loss: loss_fn(cfg)?,
        mapping: cfg.raw("slash_mapping").parse::<SlashMapping>()?,
        ..TrainConfig::default()
    };
    tc.validate()?;
    Ok(tc)
}

fn budget_config(cfg: &Config) -> Result<BudgetConfig> {
    let max: usize = cfg.get("max_budget")?;
    let b = BudgetConfig {
        tau_v: cfg.get("tau_v")?,
        tau_s: cfg.get("tau_s")?,
        min_budget: cfg.get("min_budget")?,
        max_budget: (max > 0).then_some(max),
    };
    b.validate()?;
    Ok(b)
}

fn head_reduction(cfg: &Config) -> Result<HeadReduction> {
    match cfg.raw("head_reduction") {
        "mean" => Ok(HeadReduction::Mean),
        "sum" => Ok(HeadReduction::Sum),
        other => Err(Error::config(format!(
            "head_reduction must be mean or sum, got {other:?}"
        ))),
    }
}

/// Scores as a 2×n tensor: row 0 vertical, row 1 slash.
fn scores_matrix(s: &VSScores) -> Result<Matrix> {
    let mut data = s.vertical.clone();
    data.extend_from_slice(&s.slash);
    Matrix::new(2, s.n(), data)
}

fn read_scores(path: &Path) -> Result<VSScores> {
    let m = read_matrix(path)?;
    if m.rows() != 2 {
        return Err(Error::shape(format!(
            "score tensor must have 2 rows, got {}",
            m.rows()
        )));
    }
    VSScores::from_distributions(m.row(0).to_vec(), m.row(1).to_vec())
}

fn read_pattern(cfg: &Config, n: usize) -> Result<SparsePattern> {
    match cfg.opt_path("pattern") {
        None => Ok(SparsePattern::dense(n)),
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            Ok(SelectedIndices::from_text(&text, n)?.to_pattern())
        }
    }
}

fn block(cfg: &Config) -> Result<usize> {
    let b: usize = cfg.get("block")?;
    if b == 0 {
        return Err(Error::config("block must be >= 1"));
    }
    Ok(b)
}

pub fn cmd_gen(cfg: &Config) -> Result<String> {
    let spec = plant_spec(cfg)?;
    let out = cfg.path("output")?;
    let count: usize = cfg.get("count")?;
    let samples = generate_dataset(&spec, count)?;
    let mut table = String::from("sample\tn\td\tanchors\n");
    for (i, s) in samples.iter().enumerate() {
        let name = sample_dir_name(i);
        write_sample_dir(&out.join(&name), s)?;
        let anchors: Vec<String> = s.anchors.iter().map(usize::to_string).collect();
        let _ = writeln!(table, "{name}\t{}\t{}\t{}", spec.n, spec.d, anchors.join(","));
    }
    Ok(table)
}

pub fn cmd_aggregate(cfg: &Config) -> Result<String> {
    let root = cfg.path("input")?;
    let block = block(cfg)?;
    let top_k: usize = cfg.get("top_k")?;
    let reduction = head_reduction(cfg)?;
    let dirs = list_sample_dirs(&root)?;
    let mut out = String::new();
    let mut heads = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let scores = aggregate_streaming(&read_qkv(dir)?, block)?;
        write_tensor(&dir.join(SCORES_FILE), &scores_matrix(&scores)?)?;
        write_vector(&dir.join(TARGET_V_FILE), &scores.vertical)?;
        write_vector(&dir.join(TARGET_S_FILE), &scores.slash)?;
        let name = dir.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let _ = writeln!(out, "# {name}");
        out.push_str(&top_k_table(&scores, top_k));
        heads.push(scores);
    }
    if heads.len() > 1 {
        let group = combine_heads(&heads, reduction)?;
        write_tensor(&root.join(SCORES_FILE), &scores_matrix(&group)?)?;
        let label = cfg.raw("head_reduction");
        let _ = writeln!(out, "# group ({label})");
        out.push_str(&top_k_table(&group, top_k));
    }
    Ok(out)
}

fn indexer_dataset(root: &Path) -> Result<Vec<IndexerSample>> {
    list_sample_dirs(root)?
        .iter()
        .map(|dir| {
            let inputs = read_qkv(dir)?;
            IndexerSample::from_kv(inputs.k(), inputs.v(), read_targets(dir)?)
        })
        .collect()
}

pub fn cmd_train(cfg: &Config) -> Result<String> {
    let data = indexer_dataset(&cfg.path("input")?)?;
    let ckpt = cfg.path("checkpoint")?;
    let tc = train_config(cfg)?;
    let log_every: usize = cfg.get::<usize>("log_every")?.max(1);
    let outcome = train(&data, &tc)?;
    save_checkpoint(&outcome.params, &ckpt)?;
    let mut out = String::from("step\tlr\tloss\n");
    let last = outcome.losses.len().saturating_sub(1);
    for (step, loss) in outcome.losses.iter().enumerate() {
        if step % log_every == 0 || step == last {
            let _ = writeln!(out, "{step}\t{:.6e}\t{loss:.6}", tc.lr_at(step));
        }
    }
    let final_loss = evaluate(&outcome.params, &data, tc.loss, tc.mapping)?;
    let _ = writeln!(out, "final\t\t{final_loss:.6}");
    Ok(out)
}

fn scores_for_select(cfg: &Config) -> Result<VSScores> {
    if let Some(path) = cfg.opt_path("scores") {
        return read_scores(&path);
    }
    let input = cfg.path("input")?;
    match cfg.opt_path("checkpoint") {
        Some(ckpt) => {
            let params = load_checkpoint(&ckpt)?;
            let inputs = read_qkv(&input)?;
            params.check_dims(2 * inputs.d(), cfg.get("d_h")?)?;
            let x = InputFeatures::KV.build(inputs.q(), inputs.k(), inputs.v())?;
            predict(&params, &x, cfg.raw("slash_mapping").parse()?)
        }
        None => read_scores(&input.join(SCORES_FILE)),
    }
}

pub fn cmd_select(cfg: &Config) -> Result<String> {
    let scores = scores_for_select(cfg)?;
    let sel = select_pattern(&scores, &budget_config(cfg)?)?;
    let text = sel.to_text();
    if let Some(out) = cfg.opt_path("output") {
        fs::write(&out, &text).map_err(|e| Error::Format(format!("{}: {e}", out.display())))?;
    }
    Ok(text)
}

fn density(pattern: &SparsePattern, n: usize) -> f64 {
    covered_pairs(&pattern.i_v, &pattern.i_s, n) as f64 / causal_pairs(n) as f64
}

pub fn cmd_attend(cfg: &Config) -> Result<String> {
    let inputs = read_qkv(&cfg.path("input")?)?;
    let n = inputs.n();
    let pattern = read_pattern(cfg, n)?;
    let sparse = sparse_attention(&inputs, &pattern, block(cfg)?)?;
    let dense = full_attention(&inputs, false)?;
    if let Some(out) = cfg.opt_path("output") {
        write_tensor(&out, &sparse.o)?;
    }
    Ok(format!(
        "n\td\tdensity\tmax_abs_diff\n{n}\t{}\t{:.6}\t{:.6e}\n",
        inputs.d(),
        density(&pattern, n),
        sparse.o.max_abs_diff(&dense.o)
    ))
}

pub fn cmd_recall(cfg: &Config) -> Result<String> {
    let inputs = read_qkv(&cfg.path("input")?)?;
    let pattern = read_pattern(cfg, inputs.n())?;
    let r = recall_streaming(&inputs, &pattern, block(cfg)?)?;
    Ok(format!("{r:.6}\n"))
}

pub fn cmd_theory(cfg: &Config) -> Result<String> {
    let dim: usize = cfg.get("D")?;
    let offsets: i64 = cfg.get("offsets")?;
    let samples: usize = cfg.get("samples")?;
    let rope = RopeConfig::new(dim, cfg.get("rope_base")?)?;
    let root = Rng::new(cfg.get("seed")?);
    let mut means = root.derive(0);
    let mu_q: Vec<f64> = (0..dim).map(|_| means.normal()).collect();
    let mu_k: Vec<f64> = (0..dim).map(|_| means.normal()).collect();
    let model = GaussianQKModel::isotropic(mu_q, mu_k, rope.clone())?;
    let spec = slash_spectrum(&model);
    let deltas: Vec<i64> = (0..offsets).collect();
    let opts = McOptions {
        common_random_numbers: cfg.get("common_random")?,
        ..McOptions::default()
    };
    let points = monte_carlo_score(&model, &deltas, samples, &root.derive(1), &opts)?;
    let mut out = String::from("offset\tclosed_form\tpolar\tmc_mean\tmc_stderr\tz\tstatus\n");
    let mut failed = 0;
    for pt in &points {
        let closed = expected_score(&spec, pt.delta as f64, &rope);
        let polar = expected_score_polar(&spec, pt.delta as f64, &rope);
        let z = (pt.mean - closed) / pt.stderr;
        let pass = z.abs() <= THEORY_BAND && (closed - polar).abs() <= 1e-12 * (1.0 + closed.abs());
        if !pass {
            failed += 1;
        }
        let _ = writeln!(
            out,
            "{}\t{closed:.6}\t{polar:.6}\t{:.6}\t{:.6}\t{z:.3}\t{}",
            pt.delta,
            pt.mean,
            pt.stderr,
            if pass { "pass" } else { "fail" }
        );
    }
    if failed > 0 {
        print!("{out}");
        return Err(Error::Distribution(format!(
            "{failed} of {} offsets outside the {THEORY_BAND} sigma band",
            points.len()
        )));
    }
    Ok(out)
}

pub fn cmd_bench(cfg: &Config) -> Result<String> {
    let which: Ablation = cfg.raw("ablation").parse()?;
    let bench = BenchConfig {
        plant: plant_spec(cfg)?,
        train_samples: cfg.get("train_samples")?,
        eval_samples: cfg.get("eval_samples")?,
        train: train_config(cfg)?,
        seeds: cfg.get("bench_seeds")?,
        ..BenchConfig::default()
    };
    run_ablation(which, &bench, cfg.get("seed")?)
}
