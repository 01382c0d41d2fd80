//! `elicit`: headless access to workshop sessions and the HTTP server.
//!
//! Every subcommand that changes a session maps onto one API action and
//! prints a JSON document on stdout. Failures print the error envelope on
//! stderr and exit with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use elicit::copula::ConcordanceJudgement;
use elicit::elicitation::{JudgementSet, QuantityOfInterest};
use elicit::pos::{Benchmarks, Knob, SuccessRule, TrialDesign};
use elicit::session::{
    export_report, simulate, CreateSession, ExtensionConfig, PosRequest, Service, Session, SessionError, SessionStore,
    DATA_DIR_ENV, DEFAULT_EXTENSION_SAMPLES,
};

#[derive(Parser)]
#[command(name = "elicit", version, about = "Structured expert elicitation workshops")]
struct Cli {
    /// Directory holding session files.
    #[arg(long, env = DATA_DIR_ENV, default_value = "elicit-data", global = true)]
    data_dir: PathBuf,
    /// Client token making a retried write a no-op.
    #[arg(long, global = true)]
    client_token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    #[command(subcommand)]
    Session(SessionCmd),
    /// Define a quantity of interest from a JSON file.
    Qoi { session: String, file: PathBuf },
    #[command(subcommand)]
    Judgement(JudgementCmd),
    /// Reveal individual fits for a quantity.
    Reveal { session: String, qoi: String },
    /// Add a discussion note.
    Note { session: String, qoi: String, text: String },
    /// Fit the group judgement and record the consensus distribution.
    Fit {
        session: String,
        qoi: String,
        /// Family to use instead of the best fit.
        #[arg(long)]
        family: Option<String>,
    },
    /// Move a quantity to another stage, with a recorded reason.
    Stage {
        session: String,
        qoi: String,
        stage: String,
        #[arg(long)]
        reason: String,
    },
    #[command(subcommand)]
    Extension(ExtensionCmd),
    #[command(subcommand)]
    Copula(CopulaCmd),
    #[command(subcommand)]
    Pos(PosCmd),
    /// Export the session report.
    Export {
        /// Session id, or a path to a session file.
        session: String,
        #[arg(long, default_value = "json", value_parser = ["json", "text"])]
        format: String,
    },
}

#[derive(Subcommand)]
enum SessionCmd {
    Create {
        #[arg(long)]
        title: String,
        /// Comma-separated expert labels.
        #[arg(long, value_delimiter = ',', conflicts_with = "n_experts")]
        experts: Option<Vec<String>>,
        #[arg(long)]
        n_experts: Option<usize>,
    },
    List,
    Show { session: String },
    Events { session: String },
}

#[derive(Subcommand)]
enum JudgementCmd {
    /// Submit a judgement set from a JSON file.
    Submit { session: String, file: PathBuf },
    /// Fit a judgement set without recording it.
    Preview { session: String, file: PathBuf },
}

#[derive(Subcommand)]
enum ExtensionCmd {
    /// Configure the conditioning schedule from a JSON file.
    Configure { session: String, file: PathBuf },
    Show { session: String, qoi: String },
    /// Record the conditional median at one schedule point.
    Median {
        session: String,
        qoi: String,
        #[arg(long)]
        y: f64,
        #[arg(long)]
        median: f64,
    },
    /// Marginalize with optional what-if medians, without recording.
    Preview {
        session: String,
        qoi: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_EXTENSION_SAMPLES)]
        n: usize,
        /// Hypothetical median as `y=median`; repeatable.
        #[arg(long = "what-if", value_parser = parse_pair)]
        what_if: Vec<(f64, f64)>,
    },
    Commit {
        session: String,
        qoi: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_EXTENSION_SAMPLES)]
        n: usize,
    },
}

/// File with `{"qois": [...], "judgements": [...]}`.
#[derive(serde::Deserialize)]
struct ConcordanceFile {
    qois: Vec<String>,
    judgements: Vec<ConcordanceJudgement>,
}

#[derive(Subcommand)]
enum CopulaCmd {
    /// Sample a what-if copula without recording it.
    Explore {
        session: String,
        file: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = elicit::copula::PREVIEW_SAMPLES)]
        n: usize,
    },
    Commit { session: String, file: PathBuf },
}

#[derive(Args)]
struct PosArgs {
    /// Session id in the data directory, or a path to a session file.
    #[arg(long)]
    session: String,
    #[arg(long)]
    design: PathBuf,
    /// Success rule file; the default rule otherwise.
    #[arg(long)]
    rule: Option<PathBuf>,
    #[arg(long)]
    benchmarks: Option<PathBuf>,
    /// Replace one rule field, e.g. `alpha=0.05` or `tpp.fev1=null`; repeatable.
    #[arg(long = "rule-override", value_name = "KEY=VALUE")]
    rule_override: Vec<String>,
    #[arg(long)]
    sims: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    exacerbation_qoi: Option<String>,
    #[arg(long)]
    fev1_qoi: Option<String>,
}

#[derive(Subcommand)]
enum PosCmd {
    /// Simulate the programme and print the result with its decomposition.
    Run(PosArgs),
    /// Re-run across values of one knob, e.g. `--knob alpha=0.01,0.025`.
    Sensitivity {
        #[command(flatten)]
        args: PosArgs,
        #[arg(long, value_name = "NAME=V1,V2,...")]
        knob: String,
    },
}

#[derive(Debug)]
struct Failure {
    code: String,
    message: String,
    details: Value,
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        Failure {
            code: e.code().into(),
            message: e.to_string(),
            details: e.details(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: "bad_request".into(),
        message: message.into(),
        details: json!({}),
    }
}

type Out = Result<Value, Failure>;

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once('=').ok_or("expected y=median")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn from_str_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T, Failure> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| usage(format!("unknown {what} {s:?}")))
}

fn doc<T: Serialize>(schema: &str, value: &T) -> Value {
    let mut v = serde_json::to_value(value).expect("output serializes");
    if !v.is_object() {
        v = json!({ "value": v });
    }
    v["schema"] = json!(schema);
    v
}

fn write_result(schema: &str, a: elicit::session::Appended, extra: Value) -> Value {
    let mut v = json!({"schema": schema, "seq": a.seq, "duplicate": a.duplicate});
    if let (Value::Object(m), Value::Object(x)) = (&mut v, extra) {
        m.extend(x);
    }
    v
}

/// Applies `key=value` to a JSON object; dotted keys reach nested fields.
/// Values are read as JSON when they parse, as strings otherwise.
fn apply_override(target: &mut Value, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| usage(format!("override {spec:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut node = target;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Err(usage("empty override key"))
}

fn pos_request(a: &PosArgs) -> Result<PosRequest, Failure> {
    let design: TrialDesign = read_json(&a.design)?;
    let mut rule = match &a.rule {
        Some(p) => read_json::<Value>(p)?,
        None => serde_json::to_value(SuccessRule::default()).expect("rule serializes"),
    };
    for o in &a.rule_override {
        apply_override(&mut rule, o)?;
    }
    let rule: SuccessRule = serde_json::from_value(rule).map_err(|e| usage(format!("rule: {e}")))?;
    let benchmarks: Benchmarks = match &a.benchmarks {
        Some(p) => read_json(p)?,
        None => Benchmarks::default(),
    };
    Ok(PosRequest {
        design,
        rule,
        benchmarks,
        n_sims: a.sims,
        seed: a.seed,
        exacerbation_qoi: a.exacerbation_qoi.clone(),
        fev1_qoi: a.fev1_qoi.clone(),
    })
}

fn parse_knob(s: &str) -> Result<Knob, Failure> {
    let (name, values) = s.split_once('=').ok_or_else(|| usage(format!("knob {s:?} is not NAME=V1,V2,...")))?;
    let values: Vec<Value> = values
        .split(',')
        .map(|v| serde_json::from_str(v.trim()).map_err(|_| usage(format!("knob value {v:?} is not a number"))))
        .collect::<Result<_, _>>()?;
    serde_json::from_value(json!({"knob": name, "values": values})).map_err(|e| usage(format!("knob: {e}")))
}

/// A session argument naming an existing file is read directly; anything
/// else is an id in the data directory.
fn session_file(arg: &str) -> Option<&Path> {
    let p = Path::new(arg);
    (arg.ends_with(".json") || arg.contains(std::path::MAIN_SEPARATOR)).then_some(p).filter(|p| p.is_file())
}

fn run(cli: Cli) -> Out {
    let token = cli.client_token.clone();
    let svc = || -> Result<Service, Failure> { Ok(Service::new(SessionStore::new(&cli.data_dir)?)) };
    match cli.command {
        Command::Serve { addr } => {
            let service = svc()?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| usage(e.to_string()))?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                elicit_server::serve(listener, service).await
            })
            .map_err(|e| Failure::from(SessionError::from(e)))?;
            Ok(Value::Null)
        }
        Command::Session(c) => {
            let svc = svc()?;
            match c {
                SessionCmd::Create { title, experts, n_experts } => {
                    let s = svc.create_session(&CreateSession { title, experts, n_experts })?;
                    Ok(session_view(&s))
                }
                SessionCmd::List => Ok(json!({"schema": "elicit.session-list/1", "sessions": svc.list()?})),
                SessionCmd::Show { session } => Ok(session_view(&svc.session(&session)?)),
                SessionCmd::Events { session } => {
                    let s = svc.session(&session)?;
                    Ok(json!({"schema": "elicit.events/1", "id": s.id(), "events": s.events()}))
                }
            }
        }
        Command::Qoi { session, file } => {
            let qoi: QuantityOfInterest = read_json(&file)?;
            let (a, s) = svc()?.define_qoi(&session, qoi, token)?;
            Ok(write_result("elicit.appended/1", a, json!({"state_hash": s.state_hash()})))
        }
        Command::Judgement(JudgementCmd::Submit { session, file }) => {
            let j: JudgementSet = read_json(&file)?;
            let qoi = j.qoi.clone();
            let (a, s) = svc()?.submit_judgement(&session, j, token)?;
            let record = s.state().record(&qoi)?;
            Ok(write_result("elicit.judgement-recorded/1", a, json!({"state_hash": s.state_hash(), "record": record})))
        }
        Command::Judgement(JudgementCmd::Preview { session, file }) => {
            let j: JudgementSet = read_json(&file)?;
            Ok(json!({"schema": "elicit.fits/1", "fits": svc()?.fit_preview(&session, &j)?}))
        }
        Command::Reveal { session, qoi } => {
            let (a, summary) = svc()?.reveal(&session, &qoi, token)?;
            Ok(write_result("elicit.reveal/1", a, json!({"reveal": summary})))
        }
        Command::Note { session, qoi, text } => {
            let (a, s) = svc()?.add_note(&session, &qoi, &text, token)?;
            Ok(write_result("elicit.appended/1", a, json!({"state_hash": s.state_hash()})))
        }
        Command::Fit { session, qoi, family } => {
            let family = family.map(|f| from_str_enum("family", &f)).transpose()?;
            let (a, s) = svc()?.fit_consensus(&session, &qoi, family, token)?;
            let record = s.state().record(&qoi)?;
            Ok(write_result(
                "elicit.consensus/1",
                a,
                json!({"state_hash": s.state_hash(), "consensus": record.consensus, "candidates": record.group_fits}),
            ))
        }
        Command::Stage { session, qoi, stage, reason } => {
            let stage = from_str_enum("stage", &stage)?;
            let (a, s) = svc()?.override_stage(&session, &qoi, stage, &reason, token)?;
            Ok(write_result("elicit.appended/1", a, json!({"state_hash": s.state_hash()})))
        }
        Command::Extension(c) => {
            let svc = svc()?;
            match c {
                ExtensionCmd::Configure { session, file } => {
                    let config: ExtensionConfig = read_json(&file)?;
                    let (a, ext) = svc.configure_extension(&session, config, token)?;
                    Ok(write_result("elicit.extension/1", a, json!({"extension": ext, "pending": decimals(&ext.pending())})))
                }
                ExtensionCmd::Show { session, qoi } => {
                    let s = svc.session(&session)?;
                    let ext = s
                        .state()
                        .extensions
                        .get(&qoi)
                        .ok_or_else(|| Failure::from(SessionError::NotFound(format!("extension for {qoi}"))))?;
                    Ok(json!({"schema": "elicit.extension/1", "extension": ext, "pending": ext.pending()}))
                }
                ExtensionCmd::Median { session, qoi, y, median } => {
                    let (a, ext) = svc.elicit_conditional_median(&session, &qoi, y, median, token)?;
                    Ok(write_result("elicit.extension/1", a, json!({"extension": ext, "pending": decimals(&ext.pending())})))
                }
                ExtensionCmd::Preview { session, qoi, seed, n, what_if } => {
                    Ok(doc("elicit.extension-preview/1", &svc.extension_preview(&session, &qoi, &what_if, n, seed)?))
                }
                ExtensionCmd::Commit { session, qoi, seed, n } => {
                    let (a, ext) = svc.commit_extension(&session, &qoi, n, seed, token)?;
                    Ok(write_result("elicit.extension/1", a, json!({"extension": ext})))
                }
            }
        }
        Command::Copula(c) => {
            let svc = svc()?;
            match c {
                CopulaCmd::Explore { session, file, seed, n } => {
                    let f: ConcordanceFile = read_json(&file)?;
                    let p = svc.copula_explore_sample(&session, &f.qois, &f.judgements, n, seed)?;
                    Ok(json!({"schema": "elicit.copula-preview/1", "summary": p.summary, "model": p.model}))
                }
                CopulaCmd::Commit { session, file } => {
                    let f: ConcordanceFile = read_json(&file)?;
                    let (a, model) = svc.commit_copula(&session, f.qois, f.judgements, token)?;
                    Ok(write_result("elicit.copula/1", a, json!({"copula": model})))
                }
            }
        }
        Command::Pos(PosCmd::Run(args)) => {
            let request = pos_request(&args)?;
            // A session file is read, never written; ids record the run.
            let (result, seq) = match session_file(&args.session) {
                Some(path) => (simulate(Session::read(path)?.state(), &request, None)?, None),
                None => {
                    let (a, r) = svc()?.run_pos(&args.session, request, token)?;
                    (r, Some(a.seq))
                }
            };
            eprintln!("{}", result.to_text());
            let mut v = doc("elicit.pos-result/1", &result);
            if let Some(seq) = seq {
                v["seq"] = json!(seq);
            }
            Ok(v)
        }
        Command::Pos(PosCmd::Sensitivity { args, knob }) => {
            let request = pos_request(&args)?;
            let knob = parse_knob(&knob)?;
            let rows = match session_file(&args.session) {
                Some(path) => elicit::session::sensitivity_on(Session::read(path)?.state(), &request, &knob)?,
                None => svc()?.pos_sensitivity(&args.session, &request, &knob)?,
            };
            Ok(json!({"schema": "elicit.pos-sensitivity/1", "rows": rows}))
        }
        Command::Export { session, format } => {
            let report = match session_file(&session) {
                Some(path) => export_report(&Session::read(path)?)?,
                None => svc()?.export(&session)?,
            };
            if format == "text" {
                print!("{}", report.to_text());
            } else {
                print!("{}", report.to_json());
            }
            Ok(Value::Null)
        }
    }
}

fn decimals(v: &[f64]) -> Vec<String> {
    v.iter().map(|&x| elicit::decimal::format(x)).collect()
}

fn session_view(s: &Session) -> Value {
    json!({
        "schema": "elicit.session-view/1",
        "id": s.id(),
        "state_hash": s.state_hash(),
        "events": s.events().len(),
        "state": s.state(),
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("ELICIT_LOG").unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("output serializes"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            let env = json!({"schema": "elicit.error/1", "code": f.code, "message": f.message, "details": f.details});
            eprintln!("{}", serde_json::to_string_pretty(&env).expect("error serializes"));
            ExitCode::FAILURE
        }
    }
}
