use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use styletune_core::adapter::{materialize, AdapterConfig, AdapterParams};
use styletune_core::checkpoint::{
    adapter_hash, load_adapter, model_hash, save_adapter, save_model, write_atomic,
};
use styletune_core::data::{read_dataset, write_dataset, Catalog};
use styletune_core::feedback::templates::{shape_content, template_shape};
use styletune_core::feedback::{
    default_templates, fill_template, generate_pool, item_seed, metrics_csv, run_iteration,
    score_pool, select, shape_templates, style_score, text_score, IterationConfig, SelectionRecord,
    Strategy, StyleReference, PHOTO_TEMPLATES,
};
use styletune_core::model::{
    pretrain_base, tune_adapter, AdamConfig, Example, ModelConfig, TrainConfig,
};
use styletune_core::pipeline::{fit_scorers, pretraining_examples};
use styletune_core::raster::Image;
use styletune_core::sampler::{Guidance, GuidanceConfig, SamplerContext};
use styletune_core::text::{build_prompt, PromptSpec};
use styletune_core::tokenizer::fit_codebook;

use crate::error::{CliError, CliResult};
use crate::run_dir::{valid_pool_id, RunDirectory};
use crate::{
    AdapterTrainArgs, Cli, Command, ComposeArgs, EvalArgs, FitTokenizerArgs, GenDataArgs,
    GuidanceArgs, PoolArgs, PretrainArgs, PromptListArgs, ReferenceArgs, RoundArgs, SampleArgs,
    SelectArgs, ServeArgs, TemplateList, TuneArgs,
};

pub fn execute(cli: Cli) -> CliResult<()> {
    let run = RunDirectory::create(&cli.run_dir)?;
    match cli.command {
        Command::GenData(a) => gen_data(&run, a),
        Command::FitTokenizer(a) => fit_tokenizer(&run, a),
        Command::Pretrain(a) => pretrain(&run, a),
        Command::Tune(a) => tune(&run, a),
        Command::Sample(a) => sample(&run, a),
        Command::Compose(a) => compose(&run, a),
        Command::Pool(a) => pool(&run, a),
        Command::Select(a) => select_cmd(&run, a),
        Command::Round(a) => round(&run, a),
        Command::Eval(a) => eval(&run, a),
        Command::Serve(a) => serve(run, a),
    }
}

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

fn gen_data(run: &RunDirectory, a: GenDataArgs) -> CliResult<()> {
    if a.seeds_per_pair < 5 {
        return Err(user(
            "--seeds-per-pair must be at least 5 for the train/test split",
        ));
    }
    run.fresh(&run.data().join("manifest.json"))?;
    let cat = Catalog::default();
    let manifest = write_dataset(&run.data(), &cat.generate(a.seeds_per_pair))?;
    run.record_config(
        "gen-data",
        &serde_json::json!({ "seeds_per_pair": a.seeds_per_pair }),
    )?;
    println!(
        "wrote {} images to {}",
        manifest.len(),
        run.data().display()
    );
    Ok(())
}

fn fit_tokenizer(run: &RunDirectory, a: FitTokenizerArgs) -> CliResult<()> {
    let cb_path = run.checkpoint("codebook.bin");
    run.fresh(&cb_path)?;
    let cat = Catalog::default();
    let data = read_dataset(&run.data())?;
    let images: Vec<Image> = data.iter().map(|e| e.image.clone()).collect();
    let cb = fit_codebook(&images, a.codebook_size, a.patch_size, a.seed)?;
    let vocab = styletune_core::text::Vocabulary::from_catalog(&cat);
    let (oracles, proxy) = fit_scorers(&cat, &vocab, &data, &cb, a.seed)?;
    write_atomic(&run.checkpoint("vocab.json"), &vocab.to_json()?)?;
    write_atomic(
        &run.checkpoint("oracles.json"),
        &serde_json::to_vec(&oracles)?,
    )?;
    write_atomic(&run.checkpoint("proxy.json"), &serde_json::to_vec(&proxy)?)?;
    write_atomic(&cb_path, &cb.to_bytes()?)?;
    run.record_config(
        "fit-tokenizer",
        &serde_json::json!({
            "codebook_size": a.codebook_size,
            "patch_size": a.patch_size,
            "seed": a.seed,
        }),
    )?;
    println!(
        "codebook K={} patch={}; proxy held-out agreement {:.3}",
        cb.k, cb.patch_size, proxy.held_out_agreement
    );
    Ok(())
}

fn pretrain(run: &RunDirectory, a: PretrainArgs) -> CliResult<()> {
    let out = run.checkpoint("base.ckpt");
    run.fresh(&out)?;
    let cat = Catalog::default();
    let data = read_dataset(&run.data())?;
    let cb = run.codebook()?;
    let vocab = run.vocab()?;
    let examples = pretraining_examples(&cat, &data, &cb, &vocab)?;
    let tc = TrainConfig {
        batch: a.batch,
        adam: AdamConfig::with_lr(a.lr),
        ..TrainConfig::pretrain(a.steps, a.seed)
    };
    let mcfg = ModelConfig::desk(cb.k, vocab.len());
    let t = Instant::now();
    let (w, report) = pretrain_base(&examples, mcfg, &tc)?;
    save_model(&out, &w)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_atomic(&run.metrics("pretrain_loss.csv"), csv.as_bytes())?;
    run.record_config(
        "pretrain",
        &serde_json::json!({ "model": mcfg, "train": tc }),
    )?;
    let n = report.losses.len();
    let tail = n.saturating_sub(100)..n;
    println!(
        "pretrained {} steps in {:.0?}; final loss {:.4}; {}",
        a.steps,
        t.elapsed(),
        report.mean_loss(tail),
        model_hash(&w)?
    );
    Ok(())
}

/// Reference image and the catalog style it stands for.
fn reference(cat: &Catalog, r: &ReferenceArgs) -> CliResult<(Image, usize)> {
    let style_id = r.style_id.unwrap_or(cat.held_out_style);
    if style_id >= cat.styles.len() || r.content_id >= cat.contents.len() {
        return Err(user(format!(
            "catalog has {} styles and {} contents",
            cat.styles.len(),
            cat.contents.len()
        )));
    }
    let img = match &r.image {
        Some(p) => Image::load_png(p)?,
        None => cat.example(style_id, r.content_id, r.image_seed).image,
    };
    Ok((img, style_id))
}

fn guidance(g: &GuidanceArgs, gamma: f64) -> CliResult<GuidanceConfig> {
    let cfg = GuidanceConfig {
        lambda: g.lambda,
        lambda_a: g.lambda_a,
        lambda_b: g.lambda_b,
        gamma,
        temperature: g.temperature,
        steps: g.decode_steps,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn adapter_train(t: &AdapterTrainArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        steps: t.steps,
        batch: t.batch,
        adam: AdamConfig::with_lr(t.lr),
        ..TrainConfig::adapter_desk(seed)
    }
}

fn template_list(cat: &Catalog, p: &PromptListArgs) -> CliResult<Vec<String>> {
    let all = match p.templates {
        TemplateList::Default => default_templates(cat),
        TemplateList::Shapes => shape_templates(cat),
        TemplateList::Photo => PHOTO_TEMPLATES.iter().map(|s| s.to_string()).collect(),
    };
    match p.prompts {
        None => Ok(all),
        Some(0) => Err(user("--prompts must be at least 1")),
        Some(n) if n > all.len() => Err(user(format!(
            "--prompts {n} exceeds the {} templates of this list; try --templates shapes",
            all.len()
        ))),
        Some(n) => Ok(all[..n].to_vec()),
    }
}

fn load_adapter_arg(run: &RunDirectory, p: &Path) -> CliResult<AdapterParams> {
    let path = run.resolve_checkpoint(p);
    if !path.exists() {
        return Err(user(format!("adapter {} not found", path.display())));
    }
    Ok(load_adapter(&path)?)
}

fn tune(run: &RunDirectory, a: TuneArgs) -> CliResult<()> {
    let out = run.resolve_checkpoint(&a.out);
    run.fresh(&out)?;
    let cat = Catalog::default();
    let (img, style_id) = reference(&cat, &a.reference)?;
    let content = a
        .prompt
        .clone()
        .unwrap_or_else(|| shape_content(cat.content(a.reference.content_id).shape, 0));
    let descriptor = a
        .style
        .clone()
        .unwrap_or_else(|| cat.style(style_id).descriptor.clone());
    let prompt = build_prompt(&content, Some(&descriptor))?;
    let w = run.base()?;
    let vocab = run.vocab()?;
    let cb = run.codebook()?;
    let acfg = match a.round {
        1 => AdapterConfig::round1(w.cfg.d_model, w.cfg.n_layer),
        _ => AdapterConfig::round2(w.cfg.d_model, w.cfg.n_layer),
    };
    let tc = adapter_train(&a.train, a.seed);
    let ex = Example {
        tokens: cb.encode(&img)?,
        text_ids: vocab.ids(&prompt),
    };
    let (params, report) = tune_adapter(&w, &[ex], acfg, &tc)?;
    save_adapter(&out, &params)?;
    run.record_config(
        &format!("tune:{}", out.display()),
        &serde_json::json!({ "prompt": prompt.text(), "adapter": acfg, "train": tc }),
    )?;
    let n = report.losses.len();
    println!(
        "tuned \"{}\" -> {} (final loss {:.4}, {})",
        prompt,
        out.display(),
        report.mean_loss(n.saturating_sub(50)..n),
        adapter_hash(&params)?
    );
    Ok(())
}

fn write_png(path: &Path, img: &Image) -> CliResult<()> {
    write_atomic(path, &img.png_bytes()?)?;
    Ok(())
}

fn sample(run: &RunDirectory, a: SampleArgs) -> CliResult<()> {
    let g = guidance(&a.guidance, 0.0)?;
    let prompt = build_prompt(&a.prompt, a.style.as_deref())?;
    let (w, vocab, cb) = (run.base()?, run.vocab()?, run.codebook()?);
    let ctx = SamplerContext {
        weights: &w,
        vocab: &vocab,
        codebook: &cb,
    };
    let theta = a
        .style_adapter
        .as_ref()
        .map(|p| load_adapter_arg(run, p).and_then(|p| Ok(materialize(&p)?)))
        .transpose()?;
    let guide = match &theta {
        Some(t) => Guidance::Adapter(t),
        None => Guidance::Base,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (_, img) = ctx.sample_image(&guide, &prompt, &PromptSpec::negative(), &g, &mut rng)?;
    write_png(&a.out, &img)?;
    println!("\"{prompt}\" -> {}", a.out.display());
    Ok(())
}

fn compose(run: &RunDirectory, a: ComposeArgs) -> CliResult<()> {
    let g = guidance(&a.guidance, a.gamma)?;
    let prompt = build_prompt(&a.prompt, Some(&a.style))?;
    let (w, vocab, cb) = (run.base()?, run.vocab()?, run.codebook()?);
    let ctx = SamplerContext {
        weights: &w,
        vocab: &vocab,
        codebook: &cb,
    };
    let style = materialize(&load_adapter_arg(run, &a.style_adapter)?)?;
    let content = materialize(&load_adapter_arg(run, &a.content_adapter)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (_, img) = ctx.sample_image(
        &Guidance::Dual {
            style: &style,
            content: &content,
        },
        &prompt,
        &PromptSpec::negative(),
        &g,
        &mut rng,
    )?;
    write_png(&a.out, &img)?;
    println!("\"{prompt}\" (gamma {}) -> {}", a.gamma, a.out.display());
    Ok(())
}

fn check_pool_id(id: &str) -> CliResult<()> {
    if valid_pool_id(id) {
        Ok(())
    } else {
        Err(user(format!(
            "pool id {id:?} may only contain letters, digits, '-' and '.'"
        )))
    }
}

fn pool(run: &RunDirectory, a: PoolArgs) -> CliResult<()> {
    check_pool_id(&a.pool_id)?;
    let dir = run.pool_dir(&a.pool_id);
    run.fresh(&dir)?;
    let cat = Catalog::default();
    let (ref_img, style_id) = reference(&cat, &a.reference)?;
    let descriptor = a
        .prompts
        .style
        .clone()
        .unwrap_or_else(|| cat.style(style_id).descriptor.clone());
    let prompts: Vec<PromptSpec> = template_list(&cat, &a.prompts)?
        .iter()
        .map(|t| fill_template(t, &descriptor))
        .collect::<Result<_, _>>()?;
    let g = guidance(&a.guidance, 0.0)?;
    let (w, vocab, cb, proxy) = (run.base()?, run.vocab()?, run.codebook()?, run.proxy()?);
    let ctx = SamplerContext {
        weights: &w,
        vocab: &vocab,
        codebook: &cb,
    };
    let adapter = load_adapter_arg(run, &a.adapter)?;
    let mut pool = generate_pool(
        &ctx,
        &adapter,
        &prompts,
        a.pool_size,
        &g,
        &a.pool_id,
        a.seed,
    )?;
    score_pool(&mut pool, &cb, &proxy, &ref_img)?;
    write_pool(run, &pool, &cb, &ref_img)?;
    println!("pool {} with {} items", pool.pool_id, pool.items.len());
    Ok(())
}

fn write_pool(
    run: &RunDirectory,
    pool: &styletune_core::feedback::SamplePool,
    cb: &styletune_core::tokenizer::Codebook,
    reference: &Image,
) -> CliResult<()> {
    let dir = run.pool_dir(&pool.pool_id);
    std::fs::create_dir_all(&dir)?;
    write_png(&dir.join("reference.png"), reference)?;
    pool.write(&dir, cb)?;
    Ok(())
}

fn select_cmd(run: &RunDirectory, a: SelectArgs) -> CliResult<()> {
    check_pool_id(&a.pool_id)?;
    let pool = run.pool(&a.pool_id)?;
    if !a.replace {
        run.fresh(&run.selection(&a.pool_id))?;
    }
    let strategy: Strategy = a.strategy.into();
    let human = (strategy == Strategy::Human).then(|| SelectionRecord {
        pool_id: a.pool_id.clone(),
        strategy,
        chosen: a.chosen.clone(),
        timestamp: 0,
        annotator: a.annotator.clone(),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let rec = select(&pool, strategy, a.k, human.as_ref(), &mut rng)?;
    run.write_selection(&rec)?;
    println!("selected {} items from {}", rec.chosen.len(), rec.pool_id);
    Ok(())
}

fn wait_for_selection(
    run: &RunDirectory,
    pool_id: &str,
    limit: Option<Duration>,
) -> CliResult<SelectionRecord> {
    let path = run.selection(pool_id);
    let start = Instant::now();
    eprintln!("waiting for {}", path.display());
    while !path.exists() {
        if limit.is_some_and(|l| start.elapsed() > l) {
            return Err(user(format!("no selection for {pool_id} arrived in time")));
        }
        std::thread::sleep(Duration::from_millis(200));
    }
    run.read_selection(pool_id)
}

#[derive(Serialize)]
struct RoundSummary {
    pool_id: String,
    selected: usize,
    round1: String,
    round2: String,
    round1_hash: String,
    round2_hash: String,
}

fn round(run: &RunDirectory, a: RoundArgs) -> CliResult<()> {
    let strategy: Strategy = a.strategy.into();
    let pool_id = a
        .pool_id
        .clone()
        .unwrap_or_else(|| format!("{strategy}-s{}", a.seed));
    check_pool_id(&pool_id)?;
    let r1_path = run.checkpoint(&format!("{pool_id}-round1.ckpt"));
    let r2_path = run.checkpoint(&format!("{pool_id}-round2.ckpt"));
    let metrics_path = run.metrics(&format!("{pool_id}.csv"));
    for p in [&run.pool_dir(&pool_id), &r1_path, &r2_path, &metrics_path] {
        run.fresh(p)?;
    }
    if strategy != Strategy::Human {
        run.fresh(&run.selection(&pool_id))?;
    }

    let cat = Catalog::default();
    let (ref_img, style_id) = reference(&cat, &a.reference)?;
    let descriptor = a
        .prompts
        .style
        .clone()
        .unwrap_or_else(|| cat.style(style_id).descriptor.clone());
    let ref_prompt = build_prompt(
        &shape_content(cat.content(a.reference.content_id).shape, 0),
        Some(&descriptor),
    )?;
    let (w, vocab, cb, proxy) = (run.base()?, run.vocab()?, run.codebook()?, run.proxy()?);
    let ctx = SamplerContext {
        weights: &w,
        vocab: &vocab,
        codebook: &cb,
    };
    let mut cfg = IterationConfig::desk(
        strategy,
        template_list(&cat, &a.prompts)?,
        w.cfg.d_model,
        w.cfg.n_layer,
        a.seed,
    );
    cfg.n_per_prompt = a.pool_size;
    cfg.k = a.k;
    cfg.train = adapter_train(&a.train, a.seed);
    cfg.guidance = guidance(&a.guidance, 0.0)?;
    cfg.eval_per_prompt = a.eval_per_prompt;
    cfg.keep_reference = a.keep_reference;
    cfg.pool_id = pool_id.clone();
    run.record_config(&format!("round:{pool_id}"), &cfg)?;

    let reference = StyleReference {
        image: &ref_img,
        prompt: &ref_prompt,
        descriptor: &descriptor,
    };
    let wait = a.wait_secs.map(Duration::from_secs);
    let mut on_pool = |pool: &styletune_core::feedback::SamplePool| -> styletune_core::Result<Option<SelectionRecord>> {
        write_pool(run, pool, &cb, &ref_img).map_err(core_err)?;
        println!("pool {} with {} items", pool.pool_id, pool.items.len());
        if strategy == Strategy::Human {
            wait_for_selection(run, &pool.pool_id, wait).map(Some).map_err(core_err)
        } else {
            Ok(None)
        }
    };
    let out = run_iteration(&ctx, &reference, &proxy, &cfg, &mut on_pool)?;
    if strategy != Strategy::Human {
        run.write_selection(&out.selection)?;
    }
    save_adapter(&r1_path, &out.round1)?;
    save_adapter(&r2_path, &out.round2)?;
    write_atomic(&metrics_path, metrics_csv(&out.metrics).as_bytes())?;
    print!("{}", metrics_csv(&out.metrics));
    let summary = RoundSummary {
        pool_id,
        selected: out.selection.chosen.len(),
        round1: r1_path.display().to_string(),
        round2: r2_path.display().to_string(),
        round1_hash: adapter_hash(&out.round1)?,
        round2_hash: adapter_hash(&out.round2)?,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Carries a command error through the core callback signature.
fn core_err(e: CliError) -> styletune_core::Error {
    match e {
        CliError::User(m) => styletune_core::Error::InvalidArgument(m),
        CliError::Internal(m) => styletune_core::Error::Format(m),
    }
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub style_accuracy: f64,
    pub content_accuracy: f64,
    pub text_score: f64,
    pub style_score: f64,
}

fn eval(run: &RunDirectory, a: EvalArgs) -> CliResult<()> {
    let cat = Catalog::default();
    let (ref_img, style_id) = reference(&cat, &a.reference)?;
    let descriptor = a
        .prompts
        .style
        .clone()
        .unwrap_or_else(|| cat.style(style_id).descriptor.clone());
    let prompts: Vec<PromptSpec> = template_list(&cat, &a.prompts)?
        .iter()
        .map(|t| fill_template(t, &descriptor))
        .collect::<Result<_, _>>()?;
    if a.per_prompt == 0 {
        return Err(user("--per-prompt must be at least 1"));
    }
    let g = guidance(&a.guidance, 0.0)?;
    let (w, vocab, cb) = (run.base()?, run.vocab()?, run.codebook()?);
    let (proxy, oracles) = (run.proxy()?, run.oracles()?);
    let ctx = SamplerContext {
        weights: &w,
        vocab: &vocab,
        codebook: &cb,
    };
    let theta = a
        .adapter
        .as_ref()
        .map(|p| load_adapter_arg(run, p).and_then(|p| Ok(materialize(&p)?)))
        .transpose()?;
    let guide = match &theta {
        Some(t) => Guidance::Adapter(t),
        None => Guidance::Base,
    };
    let (mut images, mut specs) = (Vec::new(), Vec::new());
    for p in &prompts {
        for _ in 0..a.per_prompt {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(a.seed, images.len()));
            let (_, img) = ctx.sample_image(&guide, p, &PromptSpec::negative(), &g, &mut rng)?;
            images.push(img);
            specs.push(p.clone());
        }
    }
    let n = images.len() as f64;
    let style_hits = images
        .iter()
        .filter(|img| oracles.style.predict(img) == style_id)
        .count();
    let content_hits = images
        .iter()
        .zip(&specs)
        .filter(|(img, p)| Some(oracles.content.predict(img)) == template_shape(&cat, p))
        .count();
    let report = EvalReport {
        samples: images.len(),
        style_accuracy: style_hits as f64 / n,
        content_accuracy: content_hits as f64 / n,
        text_score: text_score(&images, &specs, &proxy)?,
        style_score: style_score(&images, &ref_img, &proxy)?,
    };
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        write_atomic(out, json.as_bytes())?;
    }
    println!("{json}");
    Ok(())
}

fn serve(run: RunDirectory, a: ServeArgs) -> CliResult<()> {
    crate::server::serve(run, &a.host, a.port)
        .map_err(|e| CliError::Internal(format!("server: {e}")))
}
