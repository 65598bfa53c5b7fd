use std::fs;
use std::sync::Arc;

use rfk_core::autodiff::{finite_diff_check, CustomOp, GradCheckReport, Graph, DEFAULT_FD_EPS};
use rfk_core::bench::{
    compare_attention, format_table, run_bench, scaling_study, write_csv, write_json, BenchRow, BenchSpec,
    BenchTarget, SweepAxis,
};
use rfk_core::checks::{run_gradcheck, GradCheckOp, KINK_MARGIN};
use rfk_core::cost::CostReport;
use rfk_core::model::{
    block_costs, build_variant, load_weights, save_weights, stage_summary, train_toy, Model, ToyData,
    VariantConfig,
};
use rfk_core::{Rng, Shape, Tensor};
use clap::ValueEnum;
use serde::Serialize;

use crate::args::*;
use crate::io::{emit, read_ppm, read_raw};
use crate::Failure;

type Outcome = Result<(), Failure>;

/// Echoes the resolved configuration on stderr.
fn echo(command: &str, seed: u64, lines: &[(&str, String)]) {
    eprintln!("# rfk {command}");
    eprintln!("seed={seed}");
    for (k, v) in lines {
        eprintln!("{k}={v}");
    }
}

fn echo_config(cfg: &VariantConfig) {
    for line in cfg.to_kv_string().lines() {
        eprintln!("{line}");
    }
}

/// Prefixes I/O failures with the path involved.
fn at_path(path: &std::path::Path) -> impl Fn(rfk_core::Error) -> Failure + '_ {
    move |e| match Failure::from(e) {
        Failure::Io(m) => Failure::Io(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn read_text(path: &std::path::Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| at_path(path)(e.into()))
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut v = serde_json::to_vec_pretty(value).map_err(rfk_core::Error::from)?;
    v.push(b'\n');
    Ok(v)
}

fn resolve_model(m: &ModelArgs) -> Result<VariantConfig, Failure> {
    let mut cfg = match (&m.config, &m.variant) {
        (Some(path), _) => VariantConfig::from_kv_str(&read_text(path)?)?,
        (None, Some(name)) => VariantConfig::named(name.parse()?),
        (None, None) => VariantConfig::b1(),
    };
    if let Some(r) = m.resolution {
        cfg.input_resolution = r;
    }
    if let Some(e) = m.eps {
        cfg.attn_eps = e;
    }
    if let Some(s) = m.scales {
        cfg.scales = s;
    }
    if let Some(k) = &m.kernels {
        cfg.dw_kernels = k.clone();
    }
    if let Some(c) = m.classes {
        cfg.num_classes = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_format(o: &OutputArgs) -> Format {
    o.format.unwrap_or_else(|| match o.out.as_ref().and_then(|p| p.extension()) {
        Some(ext) if ext == "json" => Format::Json,
        _ => Format::Csv,
    })
}

fn rows_bytes(rows: &[BenchRow], format: Format) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    match format {
        Format::Csv => write_csv(rows, &mut buf)?,
        Format::Json => write_json(rows, &mut buf)?,
    }
    Ok(buf)
}

pub fn run(cli: Cli) -> Outcome {
    let seed = cli.seed;
    match cli.command {
        Command::Summary(a) => summary(seed, &a),
        Command::Forward(a) => forward(seed, &a),
        Command::Bench(a) => bench(seed, &a),
        Command::Scaling(a) => scaling(seed, &a),
        Command::Compare(a) => compare(seed, &a),
        Command::Gradcheck(a) => gradcheck(seed, &a),
        Command::TrainToy(a) => train(seed, &a),
        Command::SaveInit(a) => save_init(seed, &a),
    }
}

#[derive(Serialize)]
struct SummaryReport<'a> {
    config: &'a VariantConfig,
    resolution: usize,
    attention_blocks: usize,
    stages: Vec<rfk_core::model::StageSummary>,
    total: CostReport,
}

fn summary(seed: u64, a: &SummaryArgs) -> Outcome {
    let cfg = resolve_model(&a.model)?;
    echo("summary", seed, &[]);
    echo_config(&cfg);
    let r = cfg.input_resolution;
    let blocks = block_costs(&cfg, 1, r, r)?;
    let stages = stage_summary(&blocks);
    let total: CostReport = blocks.iter().map(|b| b.cost).sum();
    let attention_blocks = blocks.iter().filter(|b| b.kind == "reduceformer").count();

    let mut table = format!("variant {} at {r}x{r}\n", cfg.name);
    table.push_str(&format!(
        "{:<8} {:>6} {:>8} {:>9} {:>12} {:>14}\n",
        "stage", "blocks", "channels", "output", "params", "macs"
    ));
    for s in &stages {
        table.push_str(&format!(
            "{:<8} {:>6} {:>8} {:>9} {:>12} {:>14}\n",
            s.stage,
            s.blocks,
            s.channels,
            format!("{}x{}", s.height, s.width),
            s.params,
            s.macs
        ));
    }
    table.push_str(&format!(
        "total params {} ({:.2}M), MACs {} ({:.3}G), elementwise FLOPs {}, attention blocks {}\n",
        total.params,
        total.params as f64 / 1e6,
        total.macs,
        total.macs as f64 / 1e9,
        total.ew_flops,
        attention_blocks
    ));
    print!("{table}");
    if let Some(out) = &a.output.out {
        let bytes = match output_format(&a.output) {
            Format::Json => json_bytes(&SummaryReport {
                config: &cfg,
                resolution: r,
                attention_blocks,
                stages,
                total,
            })?,
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                for s in &stages {
                    w.serialize(s).map_err(rfk_core::Error::from)?;
                }
                w.into_inner().map_err(|e| Failure::Io(e.to_string()))?
            }
        };
        emit(Some(out), &bytes)?;
    }
    Ok(())
}

fn forward(seed: u64, a: &ForwardArgs) -> Outcome {
    let mut rng = Rng::new(seed);
    let model: Model = match &a.weights {
        Some(path) => {
            let m = &a.model;
            if m.variant.is_some() || m.config.is_some() || m.eps.is_some() || m.scales.is_some() || m.kernels.is_some() || m.classes.is_some() {
                return Err(usage("--weights carries its own config; only --res may be given"));
            }
            load_weights(path).map_err(at_path(path))?
        }
        None => build_variant(&resolve_model(&a.model)?, &mut rng)?,
    };
    let res = a.model.resolution.unwrap_or(model.config().input_resolution);
    let source = match (&a.image, &a.raw) {
        (Some(p), _) => format!("image:{}", p.display()),
        (_, Some(p)) => format!("raw:{}", p.display()),
        _ => "random".to_string(),
    };
    echo(
        "forward",
        seed,
        &[
            ("weights", a.weights.as_ref().map_or("random-init".into(), |p| p.display().to_string())),
            ("input", source),
            ("batch", a.batch.to_string()),
            ("res", res.to_string()),
        ],
    );
    echo_config(model.config());
    if a.batch == 0 {
        return Err(usage("--batch must be positive"));
    }
    let x = if let Some(path) = &a.image {
        if a.batch != 1 {
            return Err(usage("an image input has batch 1"));
        }
        let img = read_ppm(path).map_err(at_path(path))?;
        let s = img.shape();
        if s.height != res || s.width != res {
            return Err(usage(format!(
                "resolution mismatch: image is {}x{}, model expects {res}x{res}",
                s.width, s.height
            )));
        }
        img
    } else if let Some(path) = &a.raw {
        read_raw(path, Shape::new(a.batch, 3, res, res)).map_err(at_path(path))?
    } else {
        rng.tensor(Shape::new(a.batch, 3, res, res), -1.0, 1.0)
    };
    let logits = model.forward(&x)?;
    Ok(emit(a.out.as_deref(), &logits_csv(&logits)?)?)
}

fn logits_csv(logits: &Tensor<f32>) -> Result<Vec<u8>, Failure> {
    let s = logits.shape();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample".to_string()];
    header.extend((0..s.channels).map(|k| format!("logit_{k}")));
    w.write_record(&header).map_err(rfk_core::Error::from)?;
    for b in 0..s.batch {
        let mut rec = vec![b.to_string()];
        rec.extend(logits.item_slice(b).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(rfk_core::Error::from)?;
    }
    w.into_inner().map_err(|e| Failure::Io(e.to_string()))
}

fn bench_target(t: Target) -> BenchTarget {
    match t {
        Target::Rf => BenchTarget::AttentionRf,
        Target::Eq1 => BenchTarget::AttentionEq1,
        Target::Model => BenchTarget::Model,
    }
}

fn base_spec(seed: u64, target: Target, d: usize, n: usize, model: &ModelArgs, t: &TimingArgs) -> Result<BenchSpec, Failure> {
    let spec = match target {
        Target::Model => {
            let cfg = resolve_model(model)?;
            let r = cfg.input_resolution;
            BenchSpec::model(cfg, t.batch, r)
        }
        other => BenchSpec::attention(bench_target(other), t.batch, d, n),
    };
    Ok(spec.with_repeats(t.repeats, t.warmup).with_threads(t.threads).with_seed(seed))
}

fn echo_spec(command: &str, seed: u64, spec: &BenchSpec) {
    echo(
        command,
        seed,
        &[
            ("target", spec.target.as_str().into()),
            ("batch", spec.batch.to_string()),
            ("d", spec.d.to_string()),
            ("n", spec.n.to_string()),
            ("repeats", spec.repeats.to_string()),
            ("warmup", spec.warmup.to_string()),
            ("threads", spec.threads.to_string()),
        ],
    );
    if let Some(cfg) = &spec.model {
        echo_config(cfg);
    }
}

fn bench(seed: u64, a: &BenchArgs) -> Outcome {
    let spec = base_spec(seed, a.target, a.d, a.n, &a.model, &a.timing)?;
    echo_spec("bench", seed, &spec);
    let row = run_bench(&spec)?;
    let rows = [row];
    print!("{}", format_table(&rows));
    if let Some(out) = &a.output.out {
        emit(Some(out), &rows_bytes(&rows, output_format(&a.output))?)?;
    }
    Ok(())
}

fn scaling(seed: u64, a: &ScalingArgs) -> Outcome {
    let (axis, points, d, n) = match a.target {
        Target::Model => {
            if a.sweep_res.is_empty() {
                return Err(usage("model scaling needs --sweep-res"));
            }
            (SweepAxis::Resolution, a.sweep_res.clone(), 0, 0)
        }
        _ => match (a.d.len(), a.n.len()) {
            (0, _) | (_, 0) => return Err(usage("--d and --n need at least one value")),
            (dl, nl) if dl > 1 && nl > 1 => return Err(usage("sweep either --d or --n, not both")),
            (dl, _) if dl > 1 => (SweepAxis::Dim, a.d.clone(), a.d[0], a.n[0]),
            _ => (SweepAxis::Tokens, a.n.clone(), a.d[0], a.n[0]),
        },
    };
    let spec = base_spec(seed, a.target, d, n, &a.model, &a.timing)?;
    echo_spec("scaling", seed, &spec);
    eprintln!("axis={axis:?}");
    eprintln!("points={points:?}");
    let report = scaling_study(&spec, axis, &points)?;
    print!("{}", format_table(&report.rows));
    let fmt = |s: Option<f64>| s.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("slope_total {}", fmt(report.slope_total));
    println!("slope_dominant {}", fmt(report.slope_dominant));
    if let Some(out) = &a.output.out {
        let bytes = match output_format(&a.output) {
            Format::Json => json_bytes(&report)?,
            Format::Csv => rows_bytes(&report.rows, Format::Csv)?,
        };
        emit(Some(out), &bytes)?;
    }
    Ok(())
}

fn compare(seed: u64, a: &CompareArgs) -> Outcome {
    echo(
        "compare",
        seed,
        &[
            ("d", a.d.to_string()),
            ("n", a.n.to_string()),
            ("batch", a.batch.to_string()),
            ("repeats", a.repeats.to_string()),
            ("threads", a.threads.to_string()),
        ],
    );
    let c = compare_attention(a.d, a.n, a.batch, a.repeats, a.threads, seed)?;
    Ok(emit(a.out.as_deref(), &json_bytes(&c)?)?)
}

/// ReLU whose adjoint forgets the mask: a negative control for gradcheck.
struct BrokenRelu;

impl CustomOp<f64> for BrokenRelu {
    fn name(&self) -> &str {
        "broken_relu"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> rfk_core::Result<Tensor<f64>> {
        Ok(rfk_core::tensor::relu(inputs[0]))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        grad: &Tensor<f64>,
    ) -> Option<rfk_core::Result<Vec<Tensor<f64>>>> {
        Some(Ok(vec![grad.clone()]))
    }
}

fn broken_relu_check(d: usize, n: usize, seed: u64) -> rfk_core::Result<GradCheckReport> {
    let (h, w) = rfk_core::attention::token_grid(n);
    let shape = Shape::new(1, d, h, w);
    let mut rng = Rng::new(seed);
    let x = Tensor::from_fn(shape, |_| rng.away_from_zero(KINK_MARGIN, 1.0));
    let op: Arc<dyn CustomOp<f64>> = Arc::new(BrokenRelu);
    finite_diff_check(
        |g: &mut Graph<f64>, x| {
            let y = g.custom(op.clone(), &[x])?;
            Ok(g.sum_all(y))
        },
        &x,
        DEFAULT_FD_EPS,
    )
}

#[derive(Serialize)]
struct CheckRow {
    op: String,
    d: usize,
    n: usize,
    max_rel_err: f64,
    coordinates: usize,
    tol: f64,
    pass: bool,
}

fn gradcheck(seed: u64, a: &GradcheckArgs) -> Outcome {
    let op_name = a
        .op
        .to_possible_value()
        .map_or_else(String::new, |v| v.get_name().to_string());
    echo(
        "gradcheck",
        seed,
        &[
            ("op", op_name),
            ("d", a.d.to_string()),
            ("n", a.n.to_string()),
            ("tol", a.tol.to_string()),
        ],
    );
    let ops: Vec<Option<GradCheckOp>> = match a.op {
        CheckOp::Relu => vec![Some(GradCheckOp::Relu)],
        CheckOp::Conv2d => vec![Some(GradCheckOp::Conv2d)],
        CheckOp::Reductions => vec![Some(GradCheckOp::Reductions)],
        CheckOp::RfAttn => vec![Some(GradCheckOp::RfAttn)],
        CheckOp::RfBlock => vec![Some(GradCheckOp::RfBlock)],
        CheckOp::All => GradCheckOp::ALL.into_iter().map(Some).collect(),
        CheckOp::BrokenRelu => vec![None],
    };
    let mut rows = Vec::new();
    for op in ops {
        let (name, report) = match op {
            Some(op) => (op.as_str(), run_gradcheck(op, a.d, a.n, seed)?),
            None => ("broken-relu", broken_relu_check(a.d, a.n, seed)?),
        };
        rows.push(CheckRow {
            op: name.to_string(),
            d: a.d,
            n: a.n,
            max_rel_err: report.max_rel_err,
            coordinates: report.coordinates,
            tol: a.tol,
            pass: report.passes(a.tol),
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(rfk_core::Error::from)?;
    }
    emit(None, &w.into_inner().map_err(|e| Failure::Io(e.to_string()))?)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn train(seed: u64, a: &TrainToyArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(path) => VariantConfig::from_kv_str(&read_text(path)?)?,
        None => VariantConfig::toy(a.classes),
    };
    cfg.num_classes = a.classes;
    cfg.validate()?;
    echo(
        "train-toy",
        seed,
        &[
            ("steps", a.steps.to_string()),
            ("lr", a.lr.to_string()),
            ("samples", a.samples.to_string()),
            ("classes", a.classes.to_string()),
            ("max_ratio", a.max_ratio.to_string()),
        ],
    );
    echo_config(&cfg);
    let mut rng = Rng::new(seed);
    let mut model = build_variant(&cfg, &mut rng)?;
    let data = ToyData::random(a.samples, a.classes, cfg.input_resolution, &mut rng);
    let trace = train_toy(&mut model, &data, a.steps, a.lr)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"]).map_err(rfk_core::Error::from)?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(rfk_core::Error::from)?;
    }
    emit(a.out.as_deref(), &w.into_inner().map_err(|e| Failure::Io(e.to_string()))?)?;
    let (first, last) = (trace[0], *trace.last().expect("at least one loss"));
    eprintln!("initial_loss={first} final_loss={last} ratio={}", last / first);
    if last < a.max_ratio * first {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "final loss {last} is not below {} x initial loss {first}",
            a.max_ratio
        )))
    }
}

fn save_init(seed: u64, a: &SaveInitArgs) -> Outcome {
    let cfg = resolve_model(&a.model)?;
    echo("save-init", seed, &[("out", a.out.display().to_string())]);
    echo_config(&cfg);
    let model = build_variant(&cfg, &mut Rng::new(seed))?;
    save_weights(&model, &a.out).map_err(at_path(&a.out))?;
    eprintln!("wrote {} parameters to {}", rfk_core::model::count_params(&model), a.out.display());
    Ok(())
}

