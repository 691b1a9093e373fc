// SPDX-License-Identifier: Apache-2.0
//! `qcbox`: build circuits and causal boxes, run the checks, emit reports.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 for usage,
//! IO or schema errors.

mod schema;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qcbox::causalbox::{check_causality, check_causality_seeded, loop_compose, parallel_compose, CausalBox};
use qcbox::extension::{build_extension, verify_extension, Variant};
use qcbox::finegraining::{
    build_decoder, build_encoder, check_acyclicity, default_queries, signalling_preservation, verify_finegraining,
    EncoderSpec,
};
use qcbox::linalg::CVector;
use qcbox::qcqc::{born, grenoble, process_vector, quantum_switch, LocalOperation, QcQc};
use qcbox::scenarios::{run_composability_demo, run_grenoble_with, run_switch_with, ScenarioConfig, ScenarioReport};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "qcbox", version, about = "Quantum-controlled circuits and their causal-box extensions")]
struct Cli {
    /// Numerical tolerance for every check.
    #[arg(long, global = true, default_value_t = 1e-10)]
    tol: f64,
    /// Message truncation for Fock spaces.
    #[arg(long, global = true, default_value_t = 3)]
    truncation: usize,
    /// Seed for random samples.
    #[arg(long, global = true, env = "QCBOX_SEED", default_value_t = 7)]
    seed: u64,
    /// Write the report as JSON, to the given file or to stdout.
    #[arg(long, global = true, num_args = 0..=1, value_name = "PATH")]
    json: Option<Option<PathBuf>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the slot isometries and the operator-family conditions.
    Validate {
        /// Circuit envelope.
        file: PathBuf,
    },
    /// Compute the process vector.
    ProcessVector {
        /// Circuit envelope.
        file: PathBuf,
        /// Destination file, stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probability of a list of local operations on a past state.
    Born {
        /// Circuit envelope.
        #[arg(long)]
        qcqc: PathBuf,
        /// One Kraus operator per party.
        #[arg(long)]
        locals: PathBuf,
        /// Past state vector.
        #[arg(long)]
        past: PathBuf,
    },
    /// Extend a circuit to a causal box.
    Extend {
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Circuit envelope.
        #[arg(long = "in")]
        input: PathBuf,
        /// Destination file, stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a box with its circuit on random samples.
    VerifyExtension {
        /// Circuit envelope.
        #[arg(long)]
        qcqc: PathBuf,
        /// Causal box envelope.
        #[arg(long)]
        cb: PathBuf,
        /// Random samples to compare.
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Check the causality condition at every time.
    CheckCausality {
        /// Causal box envelope.
        file: PathBuf,
        /// Expand sequence boxes into all input tuples instead of the slice recursion.
        #[arg(long)]
        direct: bool,
    },
    /// Put two boxes side by side and close the given loops.
    Compose {
        /// First causal box envelope.
        a: PathBuf,
        /// Second causal box envelope.
        b: PathBuf,
        /// `OUT=IN` port labels, e.g. `out:X@1=in:X@2`.
        #[arg(long = "loop", value_parser = parse_loop)]
        loops: Vec<(String, String)>,
        /// Destination file, stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-grain a box against its circuit and test signalling and acyclicity.
    Finegrain {
        /// Circuit envelope.
        #[arg(long)]
        qcqc: PathBuf,
        /// Causal box envelope.
        #[arg(long)]
        cb: PathBuf,
        /// Encoder weights envelope, uniform over live branches when absent.
        #[arg(long)]
        lambdas: Option<PathBuf>,
        /// Sampled source operations per signalling query.
        #[arg(long, default_value_t = 6)]
        witnesses: usize,
    },
    /// Run a built-in end-to-end scenario.
    Scenario {
        #[arg(value_enum)]
        name: ScenarioArg,
        /// Random samples for extension equivalence.
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Write a built-in circuit.
    Export {
        #[arg(value_enum)]
        name: Builtin,
        /// Destination file, stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Isometric,
    Projective,
    Photonic,
    Gates,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Isometric => Variant::Isometric,
            VariantArg::Projective => Variant::Projective,
            VariantArg::Photonic => Variant::Photonic,
            VariantArg::Gates => Variant::Gates,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScenarioArg {
    Grenoble,
    Switch,
    ComposeDemo,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Builtin {
    Grenoble,
    Switch,
}

fn parse_loop(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(a, b)| (a.to_string(), b.to_string())).ok_or_else(|| format!("expected OUT=IN, got `{s}`"))
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Schema(#[from] schema::SchemaError),
    #[error(transparent)]
    Qc(#[from] qcbox::QcError),
    #[error("{0}")]
    Usage(String),
}

const KIND_QCQC: &str = "qcqc";
const KIND_BOX: &str = "causal_box";
const KIND_VECTOR: &str = "vector";
const KIND_LOCALS: &str = "local_operations";
const KIND_LAMBDAS: &str = "encoder_weights";
const KIND_REPORT: &str = "report";

struct Ctx {
    tol: f64,
    truncation: usize,
    seed: u64,
    json: Option<Option<PathBuf>>,
}

impl Ctx {
    /// Print a report as text or JSON and turn its verdict into a status.
    fn report<T: Serialize>(&self, value: &T, ok: bool, text: impl FnOnce() -> String) -> Result<bool, CliError> {
        match &self.json {
            Some(path) => schema::store(path.as_deref(), KIND_REPORT, value)?,
            None => print!("{}", text()),
        }
        Ok(ok)
    }
}

fn load_sequence(path: &Path) -> Result<qcbox::causalbox::SequenceRep, CliError> {
    match schema::load::<CausalBox>(path, KIND_BOX)? {
        CausalBox::Sequence(s) => Ok(s),
        CausalBox::Choi(_) => Err(CliError::Usage(format!("`{}` holds a dense box; a slice sequence is needed", path.display()))),
    }
}

fn scenario_text(r: &ScenarioReport) -> String {
    let mut s = format!("scenario {}\n", r.name);
    for st in &r.steps {
        let mark = if st.pass { "ok  " } else { "FAIL" };
        s += &format!("  {mark} {}: {:.3e} (expected {:.3e}, tol {:.1e})\n", st.description, st.measured, st.expected, st.tolerance);
    }
    s += &format!("overall: {}\n", if r.overall { "pass" } else { "fail" });
    s
}

fn run(cli: Cli) -> Result<bool, CliError> {
    if cli.tol.is_nan() || cli.tol <= 0.0 {
        return Err(CliError::Usage("--tol must be positive".into()));
    }
    if cli.truncation == 0 {
        return Err(CliError::Usage("--truncation must be at least 1".into()));
    }
    let ctx = Ctx { tol: cli.tol, truncation: cli.truncation, seed: cli.seed, json: cli.json };
    match cli.command {
        Command::Validate { file } => {
            let q: QcQc = schema::load(&file, KIND_QCQC)?;
            let r = q.validate(ctx.tol);
            ctx.report(&r, r.ok, || {
                let mut s = String::new();
                for slot in &r.slots {
                    s += &format!("slot {}: deviation {:.3e}\n", slot.slot, slot.max_deviation);
                }
                s += &format!("cross terms {:.3e}, diagonal {:.3e}\n", r.kraus_cross_max, r.kraus_diag_max);
                if let Some(e) = &r.error {
                    s += &format!("error: {e}\n");
                }
                s + if r.ok { "valid\n" } else { "invalid\n" }
            })
        }
        Command::ProcessVector { file, out } => {
            let q: QcQc = schema::load(&file, KIND_QCQC)?;
            schema::store(out.as_deref(), KIND_VECTOR, &process_vector(&q)?.vec)?;
            Ok(true)
        }
        Command::Born { qcqc, locals, past } => {
            let q: QcQc = schema::load(&qcqc, KIND_QCQC)?;
            let locals: Vec<LocalOperation> = schema::load(&locals, KIND_LOCALS)?;
            let past: CVector = schema::load(&past, KIND_VECTOR)?;
            let p = born(&process_vector(&q)?, &locals, &past, false)?.probability;
            ctx.report(&json!({ "probability": p }), true, || format!("{p}\n"))
        }
        Command::Extend { variant, input, out } => {
            let q: QcQc = schema::load(&input, KIND_QCQC)?;
            let seq = build_extension(&q, variant.into(), ctx.truncation)?;
            schema::store(out.as_deref(), KIND_BOX, &CausalBox::Sequence(seq))?;
            Ok(true)
        }
        Command::VerifyExtension { qcqc, cb, trials } => {
            let q: QcQc = schema::load(&qcqc, KIND_QCQC)?;
            let seq = load_sequence(&cb)?;
            let r = verify_extension(&seq, &q, trials, ctx.tol, ctx.seed)?;
            ctx.report(&r, r.ok, || {
                format!(
                    "{} trials: deviation {:.3e}, stray {:.3e}, accept {:.12}\n{}\n",
                    r.trials,
                    r.max_deviation,
                    r.max_stray,
                    r.min_accept_probability,
                    if r.ok { "equivalent" } else { "not equivalent" }
                )
            })
        }
        Command::CheckCausality { file, direct } => {
            let cb: CausalBox = schema::load(&file, KIND_BOX)?;
            let r = if direct { check_causality_seeded(&cb, ctx.tol, ctx.seed)? } else { check_causality(&cb, ctx.tol)? };
            ctx.report(&r, r.ok, || {
                let mut s = String::new();
                for t in &r.times {
                    s += &format!("t = {}: deviation {:.3e} {}\n", t.t, t.max_deviation, if t.ok { "ok" } else { "FAIL" });
                }
                s + if r.ok { "causal\n" } else { "not causal\n" }
            })
        }
        Command::Compose { a, b, loops, out } => {
            let a: CausalBox = schema::load(&a, KIND_BOX)?;
            let b: CausalBox = schema::load(&b, KIND_BOX)?;
            let mut c = parallel_compose(&a, &b)?;
            for (o, i) in &loops {
                c = loop_compose(&c, o, i)?;
            }
            schema::store(out.as_deref(), KIND_BOX, &CausalBox::Choi(c))?;
            Ok(true)
        }
        Command::Finegrain { qcqc, cb, lambdas, witnesses } => {
            let q: QcQc = schema::load(&qcqc, KIND_QCQC)?;
            let seq = load_sequence(&cb)?;
            let spec = match lambdas {
                Some(p) => schema::load::<EncoderSpec>(&p, KIND_LAMBDAS)?,
                None => EncoderSpec::uniform(&q)?,
            };
            let enc = build_encoder(&q, &spec)?;
            let dec = build_decoder(&q, &spec)?;
            // fine-graining deviations accumulate over slices; the tolerance floor matches extension checks
            let tol = ctx.tol.max(1e-9);
            let fg = verify_finegraining(&q, &seq, &enc, &dec, tol)?;
            let sig = signalling_preservation(&q, &seq, &enc, &default_queries(&q), witnesses, tol, ctx.seed)?;
            let acyc = check_acyclicity(&seq);
            let transferred = sig.iter().all(|o| o.transferred == o.witnesses);
            let ok = fg.ok && transferred && acyc.acyclic && acyc.forward_in_time;
            let signalling: Vec<_> = sig
                .iter()
                .map(|o| json!({ "query": o.query, "witness_found": o.witness_found, "witnesses": o.witnesses, "transferred": o.transferred }))
                .collect();
            let value = json!({
                "finegraining_ok": fg.ok,
                "max_dev": fg.max_deviation,
                "encoder_deviation": fg.encoder_deviation,
                "signalling": signalling,
                "acyclic": acyc.acyclic && acyc.forward_in_time,
                "topo_order": acyc.order,
            });
            ctx.report(&value, ok, || {
                let mut s = format!("fine-graining deviation {:.3e} ({})\n", fg.max_deviation, if fg.ok { "ok" } else { "FAIL" });
                for o in &sig {
                    s += &format!(
                        "{} -> {}: {} of {} witnesses transfer\n",
                        o.query.source.join(","),
                        o.query.sink.join(","),
                        o.transferred,
                        o.witnesses
                    );
                }
                s + &format!("acyclic: {}\norder: {}\n", acyc.acyclic && acyc.forward_in_time, acyc.order.join(" "))
            })
        }
        Command::Scenario { name, trials } => {
            let cfg = ScenarioConfig { truncation: ctx.truncation, trials, seed: ctx.seed, ..Default::default() };
            let r = match name {
                ScenarioArg::Grenoble => run_grenoble_with(&cfg)?,
                ScenarioArg::Switch => run_switch_with(&cfg)?,
                ScenarioArg::ComposeDemo => run_composability_demo()?,
            };
            ctx.report(&r, r.overall, || scenario_text(&r))
        }
        Command::Export { name, out } => {
            let q = match name {
                Builtin::Grenoble => grenoble(),
                Builtin::Switch => quantum_switch(),
            };
            schema::store(out.as_deref(), KIND_QCQC, &q)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
