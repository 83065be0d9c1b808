//! Experiment driver. One command per process; every command resolves its
//! settings from an optional TOML config plus flags, writes its outputs and
//! the resolved settings into one directory, and exits nonzero on the first
//! error (2 config, 3 numeric, 4 validation, 1 I/O).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use dfm::checkpoint;
use dfm::config::RunConfig;
use dfm::datagen::{self, DatasetSpec, NoteSample};
use dfm::error::{DfmError, Result};
use dfm::linalg;
use dfm::metrics;
use dfm::net::{self, ConditionSet, LayerSizes, NetParams};
use dfm::rng::{self, tag};
use dfm::sampler::{self, temperature, SamplerConfig, Solver, DEFAULT_TAU0, DEFAULT_TAU_MAX};
use dfm::search::{self, Embedder, Objective, ScoreContext, SearchConfig};
use dfm::train;

#[derive(Parser)]
#[command(
    name = "dfm",
    version,
    about = "Distribution-predicting flow matching on synthetic note data",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, dataset, and training log
    Train(TrainArgs),
    /// Draw samples from a trained checkpoint
    Sample(SampleArgs),
    /// Test-time search: best-of-N, instrument assembly, or guided sweeps
    Search(SearchArgs),
    /// Compute metrics for sample files against a dataset definition
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config and feeds every derived stream
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config and the DFM_OUT_DIR variable
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let cfg = cfg.resolve(self.seed, self.out.clone());
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override the configured step count
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long, default_value_t = 0)]
    pitch: usize,
    #[arg(long, default_value_t = 0)]
    velocity: usize,
    /// Number of samples; each draws from its own derived stream
    #[arg(short = 'n', long = "num", default_value_t = 1)]
    n: usize,
    /// Sampling temperature
    #[arg(long, conflicts_with = "tau_n")]
    tau: Option<f64>,
    /// Take tau from the temperature schedule for this candidate count
    #[arg(long = "tau-n", conflicts_with = "tau")]
    tau_n: Option<u64>,
    /// Integration steps
    #[arg(long)]
    steps: Option<usize>,
    /// euler, midpoint, or rk4
    #[arg(long)]
    solver: Option<String>,
    /// Also write replayable trajectory dumps (JSON lines)
    #[arg(long)]
    dump: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    class: usize,
    /// Comma-separated pitch ids, or "all"; one pitch searches a single
    /// note, several assemble an instrument in ascending pitch order
    #[arg(long, default_value = "all")]
    pitches: String,
    /// Velocity id; defaults to the middle of the dataset's range
    #[arg(long)]
    velocity: Option<usize>,
    /// prompt_only, consistency_only, combined, combined_loss, or confidence
    #[arg(long)]
    objective: Option<String>,
    /// Candidate count N
    #[arg(short = 'n', long = "num")]
    n: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    guided_steps: Option<usize>,
    #[arg(long)]
    branch: Option<usize>,
    /// Fixed candidate tau instead of the temperature schedule
    #[arg(long)]
    tau: Option<f64>,
    /// Sweep specification, e.g. guided_steps=1,2,4,8,16
    #[arg(long)]
    sweep: Option<String>,
    /// Seeds per sweep point; row seeds count up from the global seed
    #[arg(long, default_value_t = 10)]
    repeats: u64,
    /// Dump every candidate with its scores for offline rescoring
    #[arg(long)]
    dump_candidates: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Sample files to evaluate (CSV with an embedded dataset header)
    #[arg(long, required = true, num_args = 1..)]
    samples: Vec<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    pitches: usize,
    #[arg(long, default_value_t = 2)]
    velocities: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Probe inputs summed into the scalar check loss
    #[arg(long, default_value_t = 3)]
    probes: usize,
    /// Corrupt one analytic gradient entry first (negative control)
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Search(args) => cmd_search(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

/// The checkpoint fixes the architecture; the dataset definition must agree
/// with it before conditions or samples can be interpreted.
fn check_spec_matches(sizes: LayerSizes, spec: &DatasetSpec) -> Result<()> {
    if sizes.d != spec.d
        || sizes.classes != spec.classes
        || sizes.pitches != spec.pitches
        || sizes.velocities != spec.velocities
    {
        return Err(DfmError::Validation(format!(
            "checkpoint was trained for d={} classes={} pitches={} velocities={}, \
             but the dataset definition has d={} classes={} pitches={} velocities={}",
            sizes.d,
            sizes.classes,
            sizes.pitches,
            sizes.velocities,
            spec.d,
            spec.classes,
            spec.pitches,
            spec.velocities
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    let spec = cfg.dataset.build_spec()?;
    let data = datagen::make_dataset(&spec, cfg.dataset.n_per_condition)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    datagen::write_csv(&cfg.out_dir.join("dataset.csv"), &spec, &data)?;

    let params = NetParams::init(cfg.layer_sizes(&spec), cfg.seed)?;
    let (trained, log) = train::train(params, &data, &cfg.train)?;
    checkpoint::save(&trained, &cfg.out_dir.join("checkpoint.bin"))?;
    train::write_log(&cfg.out_dir.join("train_log.jsonl"), &log)?;
    cfg.write_resolved(&cfg.out_dir)?;

    match (log.first(), log.last()) {
        (Some(first), Some(last)) => println!(
            "trained {} steps on {} samples: loss {} -> {}",
            log.len(),
            data.len(),
            first.loss,
            last.loss
        ),
        _ => println!("trained 0 steps; checkpoint equals initialization"),
    }
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn resolve_sampler_overrides(
    base: SamplerConfig,
    steps: Option<usize>,
    solver: Option<&str>,
    tau: Option<f64>,
    tau_n: Option<u64>,
) -> Result<SamplerConfig> {
    let mut out = base;
    if let Some(s) = steps {
        out.num_steps = s;
    }
    if let Some(name) = solver {
        out.solver = name.parse::<Solver>()?;
    }
    if let Some(t) = tau {
        out.tau = t;
    }
    if let Some(n) = tau_n {
        out.tau = temperature(n, DEFAULT_TAU0, DEFAULT_TAU_MAX);
    }
    out.validate()?;
    Ok(out)
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    cfg.sampler = resolve_sampler_overrides(
        cfg.sampler,
        args.steps,
        args.solver.as_deref(),
        args.tau,
        args.tau_n,
    )?;
    let params = checkpoint::load(&args.checkpoint)?;
    let spec = cfg.dataset.build_spec()?;
    check_spec_matches(params.sizes, &spec)?;
    let cond = ConditionSet::new(args.class, args.pitch, args.velocity);
    spec.check_cond(cond)?;

    let mut samples = Vec::with_capacity(args.n);
    let mut dumps = Vec::new();
    for i in 0..args.n {
        let mut r = rng::derive_rng(cfg.seed, &[tag::CANDIDATE, 0, i as u64]);
        let traj = sampler::generate_trajectory(&params, cond, &cfg.sampler, &mut r)?;
        if args.dump {
            dumps.push(traj.to_json()?);
        }
        samples.push(NoteSample { x: traj.final_state().to_vec(), cond });
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    datagen::write_csv(&cfg.out_dir.join("samples.csv"), &spec, &samples)?;
    if args.dump {
        std::fs::write(cfg.out_dir.join("trajectories.jsonl"), dumps.join("\n") + "\n")?;
    }
    cfg.write_resolved(&cfg.out_dir)?;
    println!(
        "wrote {} sample(s) at tau={} to {}",
        samples.len(),
        cfg.sampler.tau,
        cfg.out_dir.display()
    );
    Ok(())
}

fn parse_pitches(text: &str, spec: &DatasetSpec) -> Result<Vec<usize>> {
    if text == "all" {
        return Ok((0..spec.pitches).collect());
    }
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| DfmError::Config(format!("bad pitch id {part:?} in --pitches")))
        })
        .collect()
}

#[derive(serde::Serialize)]
struct CandidateDump<'a> {
    note_index: usize,
    candidate_index: usize,
    sample: &'a [f64],
    embedding: &'a [f64],
    scores: search::CandidateScores,
}

fn cmd_search(args: SearchArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    cfg.sampler = resolve_sampler_overrides(cfg.sampler, None, None, None, None)?;
    if let Some(n) = args.n {
        cfg.search.n = n;
    }
    if let Some(l) = args.lambda {
        cfg.search.lambda = l;
    }
    if let Some(g) = args.guided_steps {
        cfg.search.guided_steps = g;
    }
    if let Some(b) = args.branch {
        cfg.search.branch = b;
    }
    if let Some(t) = args.tau {
        cfg.search.tau_override = Some(t);
    }
    if let Some(name) = &args.objective {
        cfg.search.objective = name.parse()?;
    } else if args.sweep.is_some() {
        // Sweeps run one note at a time, so the default instrument objective
        // (which needs prior notes) cannot apply.
        cfg.search.objective = Objective::PromptOnly;
    }
    cfg.validate()?;

    let params = checkpoint::load(&args.checkpoint)?;
    let spec = cfg.dataset.build_spec()?;
    check_spec_matches(params.sizes, &spec)?;
    let pitches = parse_pitches(&args.pitches, &spec)?;
    if pitches.is_empty() {
        return Err(DfmError::Config("--pitches selected no notes".into()));
    }
    let velocity = args.velocity.unwrap_or(spec.velocities / 2);
    let conds: Vec<ConditionSet> = pitches
        .iter()
        .map(|&p| ConditionSet::new(args.class, p, velocity))
        .collect();
    for &c in &conds {
        spec.check_cond(c)?;
    }

    let embedder = Embedder::new(spec.d, cfg.embed.dim, cfg.embed.seed)?;
    let text_emb = embedder.embed_text(&spec, conds[0])?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    if let Some(sweep) = &args.sweep {
        run_sweep(&params, conds[0], &embedder, &text_emb, &cfg, sweep, args.repeats)?;
        cfg.write_resolved(&cfg.out_dir)?;
        return Ok(());
    }

    if conds.len() == 1 {
        let ctx = ScoreContext {
            embedder: &embedder,
            prior_embs: &[],
            prior_samples: &[],
            text_emb: Some(&text_emb),
        };
        let result = search::best_of_n(&params, conds[0], &ctx, 0, &cfg.search, &cfg.sampler)?;
        let winner = result.winner();
        datagen::write_csv(
            &cfg.out_dir.join("winner.csv"),
            &spec,
            &[NoteSample { x: winner.sample.clone(), cond: conds[0] }],
        )?;
        search::write_selection_log(&cfg.out_dir.join("selection.jsonl"), &result.log)?;
        if args.dump_candidates {
            dump_candidates(&cfg.out_dir, 0, &result.candidates)?;
        }
        println!(
            "best of {} (evaluated {}, tau={}): candidate {} with {} = {}",
            cfg.search.n,
            result.candidates.len(),
            result.tau,
            result.winner_index,
            cfg.search.objective,
            winner.scores.objective_value
        );
    } else {
        let result = search::generate_instrument(
            &params,
            &conds,
            &embedder,
            Some(&text_emb),
            &cfg.search,
            &cfg.sampler,
        )?;
        let rows: Vec<NoteSample> = result
            .notes
            .iter()
            .map(|n| NoteSample { x: n.sample.clone(), cond: n.cond })
            .collect();
        datagen::write_csv(&cfg.out_dir.join("instrument.csv"), &spec, &rows)?;
        search::write_selection_log(
            &cfg.out_dir.join("selection.jsonl"),
            &result.all_records(),
        )?;
        let tcc = metrics::timbre_consistency_loss(&result.samples())?;
        println!(
            "assembled {} notes with N={} ({}): timbre spread {}",
            result.notes.len(),
            cfg.search.n,
            cfg.search.objective,
            tcc
        );
    }
    cfg.write_resolved(&cfg.out_dir)?;
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn dump_candidates(out_dir: &Path, note_index: usize, cands: &[search::SearchCandidate]) -> Result<()> {
    let mut lines = String::new();
    for c in cands {
        let dump = CandidateDump {
            note_index,
            candidate_index: c.index,
            sample: &c.sample,
            embedding: &c.embedding,
            scores: c.scores,
        };
        let line = serde_json::to_string(&dump)
            .map_err(|e| DfmError::Validation(format!("candidate does not serialize: {e}")))?;
        lines.push_str(&line);
        lines.push('\n');
    }
    std::fs::write(out_dir.join("candidates.jsonl"), lines)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_sweep(
    params: &NetParams,
    cond: ConditionSet,
    embedder: &Embedder,
    text_emb: &[f64],
    cfg: &RunConfig,
    sweep: &str,
    repeats: u64,
) -> Result<()> {
    let (key, values) = sweep.split_once('=').ok_or_else(|| {
        DfmError::Config(format!("sweep must look like guided_steps=1,2,4, got {sweep:?}"))
    })?;
    if key.trim() != "guided_steps" {
        return Err(DfmError::Config(format!(
            "only guided_steps sweeps are supported, got {key:?}"
        )));
    }
    if repeats == 0 {
        return Err(DfmError::Config("--repeats must be at least 1".into()));
    }
    let points: Vec<usize> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| DfmError::Config(format!("bad sweep value {v:?}")))
        })
        .collect::<Result<_>>()?;
    if points.is_empty() {
        return Err(DfmError::Config("sweep needs at least one value".into()));
    }

    let ctx = ScoreContext {
        embedder,
        prior_embs: &[],
        prior_samples: &[],
        text_emb: Some(text_emb),
    };
    // Branch selection needs noise to choose between; resolve the step
    // temperature the way best-of-N does, with the per-step candidate count
    // (the branch factor) driving the schedule.
    let tau = cfg
        .search
        .tau_override
        .unwrap_or_else(|| temperature(cfg.search.branch as u64, DEFAULT_TAU0, DEFAULT_TAU_MAX));
    let sampler_cfg = SamplerConfig { tau, ..cfg.sampler };
    println!("sweep tau = {tau}");
    let mut csv = String::from("seed,guided_steps,objective,value\n");
    let mut means = Vec::new();
    for &g in &points {
        let search_cfg = SearchConfig { guided_steps: g, ..cfg.search.clone() };
        let mut total = 0.0;
        for rep in 0..repeats {
            let row_seed = cfg.seed.wrapping_add(rep);
            let mut r = rng::derive_rng(row_seed, &[tag::CANDIDATE, 0, 0]);
            let traj =
                search::guided_generate(params, cond, &ctx, &search_cfg, &sampler_cfg, &mut r)?;
            let sample = traj.final_state();
            let emb = embedder.embed(sample)?;
            let scores = search::score_candidate(
                &ctx,
                search_cfg.objective,
                search_cfg.lambda,
                sample,
                &emb,
                traj.cum_log_confidence,
            )?;
            total += scores.objective_value;
            csv.push_str(&format!(
                "{row_seed},{g},{},{}\n",
                search_cfg.objective, scores.objective_value
            ));
        }
        means.push((g, total / repeats as f64));
    }
    std::fs::write(cfg.out_dir.join("sweep.csv"), csv)?;
    for (g, mean) in means {
        println!("guided_steps={g}: mean {} = {mean}", cfg.search.objective);
    }
    println!("sweep rows in {}", cfg.out_dir.join("sweep.csv").display());
    Ok(())
}

fn cond_label(cond: ConditionSet) -> String {
    format!("c{}_p{}_v{}", cond.class_id, cond.pitch_id, cond.velocity_id)
}

/// Dataset definitions agree when every distribution-defining field matches;
/// the stored stream seed is bookkeeping, not part of the distribution.
fn same_distribution(a: &DatasetSpec, b: &DatasetSpec) -> bool {
    let mut b_norm = b.clone();
    b_norm.seed = a.seed;
    *a == b_norm
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let mut rows: Vec<(String, String, f64, usize)> = Vec::new();
    let mut spec_from_config = match args.common.config {
        Some(_) => Some(cfg.dataset.build_spec()?),
        None => None,
    };

    for path in &args.samples {
        let (file_spec, samples) = datagen::read_csv(path)?;
        let spec = match &spec_from_config {
            Some(s) => {
                if !same_distribution(s, &file_spec) {
                    return Err(DfmError::Validation(format!(
                        "{} embeds a dataset definition that differs from the config",
                        path.display()
                    )));
                }
                s.clone()
            }
            None => {
                spec_from_config = Some(file_spec.clone());
                file_spec
            }
        };
        if samples.is_empty() {
            return Err(DfmError::Validation(format!(
                "{} holds no samples to evaluate",
                path.display()
            )));
        }

        // Timbre spread over the whole file, treated as one note group.
        if samples.len() >= 2 {
            let group: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
            let tcc = metrics::timbre_consistency_loss(&group)?;
            let classes: Vec<usize> = samples.iter().map(|s| s.cond.class_id).collect();
            let label = if classes.iter().all(|&c| c == classes[0]) {
                format!("c{}", classes[0])
            } else {
                "mixed".into()
            };
            rows.push(("tcc".into(), label, tcc, samples.len()));
        }

        // Per-condition rows, in the dataset's canonical condition order.
        for cond in spec.conditions() {
            let group: Vec<Vec<f64>> = samples
                .iter()
                .filter(|s| s.cond == cond)
                .map(|s| s.x.clone())
                .collect();
            if group.is_empty() {
                continue;
            }
            let mut r = rng::derive_rng(
                cfg.seed,
                &[
                    tag::GROUND_TRUTH,
                    cond.class_id as u64,
                    cond.pitch_id as u64,
                    cond.velocity_id as u64,
                ],
            );
            let reference: Vec<Vec<f64>> = (0..group.len())
                .map(|_| datagen::ground_truth_sampler(&spec, cond, &mut r).map(|s| s.x))
                .collect::<Result<_>>()?;
            let ed = metrics::energy_distance(&group, &reference)?;
            rows.push(("energy_distance".into(), cond_label(cond), ed, group.len()));

            let conds = vec![cond; group.len()];
            let dev = metrics::attribute_deviation(&group, &conds, &spec)?;
            rows.push(("attr_dev_pitch".into(), cond_label(cond), dev.pitch, group.len()));
            rows.push(("attr_dev_velocity".into(), cond_label(cond), dev.velocity, group.len()));
        }
    }

    let mut csv = String::from("metric,condition,value,n,seed\n");
    for (metric, condition, value, n) in &rows {
        csv.push_str(&format!("{metric},{condition},{value},{n},{}\n", cfg.seed));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("eval.csv"), &csv)?;
    cfg.write_resolved(&cfg.out_dir)?;
    print!("{csv}");
    println!("eval rows in {}", cfg.out_dir.join("eval.csv").display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let sizes = LayerSizes {
        d: args.d,
        hidden: args.hidden,
        depth: args.depth,
        classes: args.classes,
        pitches: args.pitches,
        velocities: args.velocities,
    };
    if args.probes == 0 {
        return Err(DfmError::Config("--probes must be at least 1".into()));
    }
    let params = NetParams::init(sizes, cfg.seed)?;

    // Deterministic probe set: inputs, conditions, and quadratic targets.
    let mut r = rng::derive_rng(cfg.seed, &[tag::GRADCHECK]);
    let mut probes = Vec::with_capacity(args.probes);
    for _ in 0..args.probes {
        let x = rng::standard_normal_vec(&mut r, sizes.d);
        let t: f64 = rand::Rng::gen::<f64>(&mut r);
        let cond = ConditionSet::new(
            rand::Rng::gen_range(&mut r, 0..sizes.classes),
            rand::Rng::gen_range(&mut r, 0..sizes.pitches),
            rand::Rng::gen_range(&mut r, 0..sizes.velocities),
        );
        let target = rng::standard_normal_vec(&mut r, sizes.d);
        let lv_target: f64 = rng::standard_normal(&mut r);
        probes.push((x, t, cond, target, lv_target));
    }

    // Scalar loss: sum over probes of 0.5||mu - target||^2 + 0.5(lv - w)^2.
    let loss = |p: &NetParams| -> f64 {
        probes
            .iter()
            .map(|(x, t, cond, target, lv_target)| {
                let dist = p.forward(x, *t, *cond).expect("probe forward");
                0.5 * linalg::sq_norm(&linalg::sub(&dist.mu, target))
                    + 0.5 * (dist.log_var - lv_target) * (dist.log_var - lv_target)
            })
            .sum()
    };

    let mut analytic = params.zeros_like();
    for (x, t, cond, target, lv_target) in &probes {
        let (dist, cache) = params.forward_cached(x, *t, *cond)?;
        let d_mu = linalg::sub(&dist.mu, target);
        analytic.add_scaled(&params.backward(&cache, &d_mu, dist.log_var - lv_target), 1.0);
    }
    if args.corrupt {
        // Negative control: a deliberately wrong analytic entry must trip
        // the comparison below.
        analytic.tensors_mut()[0].1[0] += 1e-3;
    }
    let numeric = net::finite_diff_grad(&params, loss, args.step)?;
    let (worst, per_group) = net::max_rel_error(&analytic, &numeric);

    let mut report = format!(
        "gradcheck: d={} hidden={} depth={} classes={} pitches={} velocities={} seed={} step={} probes={}\n",
        args.d,
        args.hidden,
        args.depth,
        args.classes,
        args.pitches,
        args.velocities,
        cfg.seed,
        args.step,
        args.probes
    );
    for (name, err) in &per_group {
        report.push_str(&format!("group {name}: max rel err {err:e}\n"));
    }
    let pass = worst < args.threshold;
    report.push_str(&format!(
        "overall max rel err {worst:e} (threshold {:e}): {}\n",
        args.threshold,
        if pass { "PASS" } else { "FAIL" }
    ));
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("gradcheck.txt"), &report)?;
    cfg.write_resolved(&cfg.out_dir)?;
    print!("{report}");
    if !pass {
        return Err(DfmError::Validation(format!(
            "analytic gradient disagrees with finite differences: max rel err {worst:e}"
        )));
    }
    Ok(())
}
