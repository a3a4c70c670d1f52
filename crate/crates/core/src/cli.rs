//! Command-line front end.
//!
//! Every option can also come from a plain `key=value` file passed with
//! `--config`; keys are the long flag names without dashes and flags win over
//! the file. The effective settings are echoed to stderr as `# key=value`.
//! CSV goes to `--out` when given and to stdout otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::{self, Display};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::gaussian::{self, WhiteNoiseMesh, SAMPLE_HEADER};
use crate::harness::{self, ExperimentConfig, ExperimentReport, Tolerance};
use crate::kernels::{binomial_identity_lhs, convolution_identity};
use crate::limits::{LimitCovQuery, LimitKind};
use crate::moments::{self, EnumOptions, MomentEstimate};
use crate::scheme::{self, SchemeShape, SimulationMode, TRAJECTORY_HEADER};
use crate::weights::{FamilyKind, WeightFamily};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

pub const MOMENTS_HEADER: &str = "quantity,j,l,l2,s,t,value,error_bound,boxes";
pub const LIMITS_HEADER: &str = "kind,l1,l2,delta,closed_form,quadrature,abs_diff";
pub const WEIGHTS_HEADER: &str = "k,weight,tail_bound,cumulative";
pub const DEHAAN_HEADER: &str = "lambda,t,value,target";

/// Comma-separated list of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct F64List(pub Vec<f64>);

impl FromStr for F64List {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| format!("bad number `{x}` in list `{s}`")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(F64List)
    }
}

impl Display for F64List {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Parser)]
#[command(name = "nested-karlin", version, about = "Nested Karlin occupancy scheme: simulation, exact moments, limit processes")]
struct Cli {
    /// Plain-text key=value file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "NESTED_KARLIN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Weight table or de Haan profile of a family.
    Weights(WeightsArgs),
    /// Combinatorial identity checks.
    #[command(subcommand)]
    Identities(IdentitiesCmd),
    /// Simulate occupancy trajectories.
    Simulate(SimulateArgs),
    /// Exact finite-time moments.
    #[command(subcommand)]
    Moments(MomentsCmd),
    /// Covariances of the limit processes.
    #[command(subcommand)]
    Limits(LimitsCmd),
    /// Draw from the Gaussian limit processes.
    #[command(subcommand)]
    Sample(SampleCmd),
    /// Run a verification experiment; exits 3 when it fails.
    #[command(subcommand)]
    Verify(VerifyCmd),
}

#[derive(Debug, Args)]
struct FamilyArg {
    /// weibull:ALPHA, geometric:P, finite:P1,P2,... or a bare name with --alpha / --p.
    #[arg(long)]
    family: Option<String>,
    /// Weibull exponent when --family is a bare name.
    #[arg(long)]
    alpha: Option<f64>,
    /// Geometric ratio when --family is a bare name.
    #[arg(long)]
    p: Option<f64>,
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output CSV path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnumArgs {
    /// Prune threshold for box enumeration.
    #[arg(long)]
    eps: Option<f64>,
    /// Maximum number of enumerated boxes.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Debug, Args)]
struct WeightsArgs {
    #[command(flatten)]
    family: FamilyArg,
    /// Number of leading weights to list.
    #[arg(long)]
    k_max: Option<usize>,
    /// Print the de Haan profile for these lambdas instead of the table.
    #[arg(long, allow_hyphen_values = true)]
    lambdas: Option<F64List>,
    /// Times for the de Haan profile.
    #[arg(long)]
    times: Option<F64List>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Subcommand)]
enum IdentitiesCmd {
    /// Convolution identity over 0..=30 and the binomial identity on random pairs.
    Check(IdentityArgs),
}

#[derive(Debug, Args)]
struct IdentityArgs {
    #[arg(long)]
    max_l: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Random (a, b) pairs per level.
    #[arg(long)]
    pairs: Option<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    family: FamilyArg,
    /// Poissonized observation times.
    #[arg(long)]
    t: Option<F64List>,
    /// Deterministic scheme with this many balls (uses --grid).
    #[arg(long)]
    balls: Option<u64>,
    /// Ball counts at which to record the deterministic scheme.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    replicas: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Subcommand)]
enum MomentsCmd {
    /// E K_t(l), E K*_t(l) or the deterministic-scheme mean.
    Mean(MomentArgs),
    /// Covariances across times, levels and generations.
    Cov(MomentArgs),
    /// Poissonized versus deterministic mean.
    Gap(MomentArgs),
}

#[derive(Debug, Args)]
struct MomentArgs {
    #[command(flatten)]
    family: FamilyArg,
    /// Generation of the (second) count.
    #[arg(long)]
    j: Option<usize>,
    /// Earlier generation for cross-generation covariances.
    #[arg(long)]
    i: Option<usize>,
    #[arg(long)]
    l: Option<u32>,
    #[arg(long)]
    l2: Option<u32>,
    /// Time of the first count (defaults to --t).
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    /// Deterministic scheme after this many balls (mean only).
    #[arg(long)]
    balls: Option<u64>,
    /// Exactly-l counts instead of at-least-l counts.
    #[arg(long)]
    star: bool,
    #[command(flatten)]
    enumeration: EnumArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Subcommand)]
enum LimitsCmd {
    /// One covariance E P_l1(u) P_l2(v), delta = u - v.
    Cov(LimitCovArgs),
    /// Closed forms against quadrature over a level/delta grid.
    Table(LimitTableArgs),
}

#[derive(Debug, Args)]
struct LimitCovArgs {
    #[arg(long)]
    kind: Option<LimitKind>,
    #[arg(long)]
    l1: Option<u32>,
    #[arg(long)]
    l2: Option<u32>,
    #[arg(long, allow_hyphen_values = true)]
    delta: Option<f64>,
    /// Also evaluate the quadrature oracle and print a table row.
    #[arg(long)]
    quadrature: bool,
}

#[derive(Debug, Args)]
struct LimitTableArgs {
    #[arg(long)]
    kind: Option<LimitKind>,
    #[arg(long)]
    max_l: Option<u32>,
    #[arg(long, allow_hyphen_values = true)]
    deltas: Option<F64List>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Subcommand)]
enum SampleCmd {
    /// Gaussian vectors of Z or X on a grid of offsets and levels.
    Limit(SampleLimitArgs),
    /// Z_1 from a discretized white noise.
    Whitenoise(WhitenoiseArgs),
}

#[derive(Debug, Args)]
struct SampleLimitArgs {
    #[arg(long)]
    kind: Option<LimitKind>,
    #[arg(long, allow_hyphen_values = true)]
    u_grid: Option<F64List>,
    #[arg(long)]
    levels: Option<u32>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct WhitenoiseArgs {
    #[arg(long, allow_hyphen_values = true)]
    u_grid: Option<F64List>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    half_width: Option<f64>,
    #[arg(long)]
    x_step: Option<f64>,
    #[arg(long)]
    y_step: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Subcommand)]
enum VerifyCmd {
    /// Monte Carlo means and covariances against exact moments.
    Moment(ExperimentArgs),
    /// Normalized counts: covariances, correlations, skewness, kurtosis.
    Clt(ExperimentArgs),
    /// Exact normalized moments trending toward their limits.
    Trend(ExperimentArgs),
    /// Poissonized versus deterministic means against the uniform bound.
    Gap(ExperimentArgs),
    /// Finite family: simulated law against exhaustive enumeration.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[command(flatten)]
    family: FamilyArg,
    /// Base times t.
    #[arg(long)]
    t: Option<F64List>,
    /// Base times given as T = log t (overrides --t).
    #[arg(long)]
    big_t: Option<F64List>,
    #[arg(long, allow_hyphen_values = true)]
    u_grid: Option<F64List>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    replicas: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    se_multiple: Option<f64>,
    #[arg(long)]
    pass_fraction: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    family: FamilyArg,
    #[arg(long)]
    balls: Option<u64>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    replicas: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    se_multiple: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

/// Merges flags with config-file entries and records what was used.
struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    effective: Vec<(String, String)>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| invalid(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
                file.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        Ok(Settings { file, used: BTreeSet::new(), effective: Vec::new() })
    }

    /// Flag value, else config-file value, without echoing it.
    fn raw<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if self.file.contains_key(key) {
            self.used.insert(key.to_string());
        }
        match flag {
            Some(v) => Ok(Some(v)),
            None => match self.file.get(key) {
                Some(raw) => Ok(Some(
                    raw.parse::<T>().map_err(|e| invalid(format!("config key `{key}`: {e}")))?,
                )),
                None => Ok(None),
            },
        }
    }

    fn lookup<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = self.raw(key, flag)?;
        if let Some(v) = &value {
            self.effective.push((key.to_string(), v.to_string()));
        }
        Ok(value)
    }

    fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.lookup(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.effective.push((key.to_string(), default.to_string()));
                Ok(default)
            }
        }
    }

    fn flag(&mut self, key: &str, set: bool) -> Result<bool> {
        let v = if set { true } else { self.lookup::<bool>(key, None)?.unwrap_or(false) };
        if set || !self.effective.iter().any(|(k, _)| k == key) {
            self.effective.push((key.to_string(), v.to_string()));
        }
        Ok(v)
    }

    fn echo(&self, err: &mut dyn Write) -> Result<()> {
        for (k, v) in &self.effective {
            writeln!(err, "# {k}={v}")?;
        }
        for k in self.file.keys().filter(|k| !self.used.contains(*k)) {
            writeln!(err, "# warning: config key `{k}` not used by this command")?;
        }
        Ok(())
    }
}

/// Where CSV output ends up.
struct Sink<'a> {
    path: Option<PathBuf>,
    stdout: &'a mut dyn Write,
}

impl Sink<'_> {
    fn emit(&mut self, bytes: &[u8]) -> Result<()> {
        match &self.path {
            Some(p) => fs::write(p, bytes)?,
            None => self.stdout.write_all(bytes)?,
        }
        Ok(())
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Io(_) => EXIT_VALIDATION,
        Error::Range(_) | Error::Numeric(_) | Error::Budget(_) => EXIT_NUMERIC,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
            let rendered = e.render().to_string();
            let target: &mut dyn Write = if code == EXIT_OK { stdout } else { stderr };
            let _ = target.write_all(rendered.as_bytes());
            return code;
        }
    };
    let pool = match cli.threads {
        Some(0) => {
            let _ = writeln!(stderr, "error: --threads must be at least 1");
            return EXIT_VALIDATION;
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: thread pool: {e}");
            return EXIT_NUMERIC;
        }
    };
    // run on the pool with buffered streams; writers need not be Send
    let (result, out, err) = pool.install(|| {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let r = dispatch(&cli, &mut out, &mut err);
        (r, out, err)
    });
    let _ = stderr.write_all(&err);
    if let Err(e) = stdout.write_all(&out).and_then(|_| stdout.flush()) {
        let _ = writeln!(stderr, "error: {e}");
        return EXIT_VALIDATION;
    }
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let mut s = Settings::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Weights(a) => weights_cmd(&mut s, a, stdout, stderr),
        Command::Identities(IdentitiesCmd::Check(a)) => identities_cmd(&mut s, a, stdout, stderr),
        Command::Simulate(a) => simulate_cmd(&mut s, a, stdout, stderr),
        Command::Moments(m) => moments_cmd(&mut s, m, stdout, stderr),
        Command::Limits(LimitsCmd::Cov(a)) => limit_cov_cmd(&mut s, a, stdout, stderr),
        Command::Limits(LimitsCmd::Table(a)) => limit_table_cmd(&mut s, a, stdout, stderr),
        Command::Sample(SampleCmd::Limit(a)) => sample_limit_cmd(&mut s, a, stdout, stderr),
        Command::Sample(SampleCmd::Whitenoise(a)) => whitenoise_cmd(&mut s, a, stdout, stderr),
        Command::Verify(v) => verify_cmd(&mut s, v, stdout, stderr),
    }
}

fn family_kind(s: &mut Settings, a: &FamilyArg, default: FamilyKind) -> Result<FamilyKind> {
    let raw = s.raw::<String>("family", a.family.clone())?;
    let alpha = s.raw::<f64>("alpha", a.alpha)?;
    let p = s.raw::<f64>("p", a.p)?;
    let kind = match raw {
        None => default,
        Some(r) if r.contains(':') => r.parse()?,
        Some(name) => match name.trim().to_ascii_lowercase().as_str() {
            "weibull" => FamilyKind::Weibull {
                alpha: alpha.ok_or_else(|| invalid("--family weibull needs --alpha"))?,
            },
            "geometric" => FamilyKind::Geometric {
                p: p.ok_or_else(|| invalid("--family geometric needs --p"))?,
            },
            other => return Err(invalid(format!("unknown family `{other}`"))),
        },
    };
    s.effective.push(("family".into(), kind.to_string()));
    Ok(kind)
}

fn family(s: &mut Settings, a: &FamilyArg) -> Result<WeightFamily> {
    let kind = family_kind(s, a, FamilyKind::Weibull { alpha: 0.5 })?;
    WeightFamily::from_kind(&kind)
}

fn sink<'a>(s: &mut Settings, out: &OutArg, stdout: &'a mut dyn Write) -> Result<Sink<'a>> {
    let path = s.lookup::<String>("out", out.out.as_ref().map(|p| p.display().to_string()))?;
    Ok(Sink { path: path.map(PathBuf::from), stdout })
}

fn weights_cmd(s: &mut Settings, a: &WeightsArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let fam = family(s, &a.family)?;
    let lambdas = s.lookup("lambdas", a.lambdas.clone())?;
    let mut buf = Vec::new();
    if let Some(lambdas) = lambdas {
        let times = s.get("times", a.times.clone(), F64List(vec![1e2, 1e4, 1e6, 1e8]))?;
        let mut sink = sink(s, &a.out, stdout)?;
        s.echo(stderr)?;
        writeln!(buf, "{DEHAAN_HEADER}")?;
        for r in fam.dehaan_profile(&lambdas.0, &times.0)? {
            writeln!(buf, "{},{},{},{}", r.lambda, r.t, r.value, r.target)?;
        }
        sink.emit(&buf)?;
        return Ok(EXIT_OK);
    }
    let k_max = s.get("k_max", a.k_max, 20)?;
    let mut sink = sink(s, &a.out, stdout)?;
    s.echo(stderr)?;
    writeln!(
        stderr,
        "# normalizer={} beta={} {}",
        fam.normalizer(),
        fam.beta(),
        fam.ell_description()
    )?;
    writeln!(buf, "{WEIGHTS_HEADER}")?;
    let mut cumulative = 0.0;
    for k in 1..=k_max {
        let w = fam.weight(k)?;
        cumulative += w;
        writeln!(buf, "{k},{w},{},{cumulative}", fam.tail_mass_bound(k)?)?;
    }
    sink.emit(&buf)?;
    Ok(EXIT_OK)
}

fn identities_cmd(s: &mut Settings, a: &IdentityArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let max_l = s.get("max_l", a.max_l, 12)?;
    let seed = s.get("seed", a.seed, 0)?;
    let pairs = s.get("pairs", a.pairs, 100)?;
    s.echo(stderr)?;
    if max_l == 0 {
        return Err(invalid("max-l must be at least 1"));
    }
    let mut conv_ok = 0usize;
    let mut conv_total = 0usize;
    for a in 0..=30 {
        for r in 0..=30 {
            for n in 0..=30 {
                let (lhs, rhs) = convolution_identity(a, r, n)?;
                conv_total += 1;
                conv_ok += usize::from(lhs == rhs);
            }
        }
    }
    let mut rng = scheme::replica_rng(seed, 0);
    let mut worst: f64 = 0.0;
    let mut bin_ok = 0usize;
    for l in 1..=max_l {
        for _ in 0..pairs {
            // uniform on (0, 10]
            let a = 10.0 * (1.0 - rng.random::<f64>());
            let b = 10.0 * (1.0 - rng.random::<f64>());
            let rel = (binomial_identity_lhs(l, a, b) * l as f64 - 1.0).abs();
            worst = worst.max(rel);
            bin_ok += usize::from(rel <= 1e-12);
        }
    }
    let bin_total = max_l as usize * pairs;
    let pass = conv_ok == conv_total && bin_ok == bin_total;
    writeln!(
        stdout,
        "identities: {} convolution {conv_ok}/{conv_total} binomial {bin_ok}/{bin_total} max_rel_err={worst:e}",
        if pass { "PASS" } else { "FAIL" }
    )?;
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn simulate_cmd(s: &mut Settings, a: &SimulateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let fam = family(s, &a.family)?;
    let balls = s.lookup("balls", a.balls)?;
    let mode = match balls {
        Some(n) => {
            let grid_raw = s.get("grid", a.grid.clone(), n.to_string())?;
            let grid = grid_raw
                .split(',')
                .map(|x| x.trim().parse::<u64>().map_err(|_| invalid(format!("bad grid entry `{x}`"))))
                .collect::<Result<Vec<_>>>()?;
            SimulationMode::Deterministic { n, grid }
        }
        None => SimulationMode::Poissonized { times: s.get("t", a.t.clone(), F64List(vec![100.0]))?.0 },
    };
    let shape = SchemeShape::new(s.get("generations", a.generations, 2)?, s.get("levels", a.levels, 3)?)?;
    let replicas = s.get("replicas", a.replicas, 10)?;
    let seed = s.get("seed", a.seed, 0)?;
    let mut sink = sink(s, &a.out, stdout)?;
    s.echo(stderr)?;
    let trajs = scheme::simulate_replicas(&fam, &mode, shape, replicas, seed)?;
    let mut buf = Vec::new();
    writeln!(buf, "{TRAJECTORY_HEADER}")?;
    for tr in &trajs {
        tr.write_csv_rows(&mut buf)?;
    }
    sink.emit(&buf)?;
    Ok(EXIT_OK)
}

fn enum_options(s: &mut Settings, a: &EnumArgs) -> Result<EnumOptions> {
    let d = EnumOptions::default();
    Ok(EnumOptions {
        eps: s.get("eps", a.eps, d.eps)?,
        box_budget: s.get("budget", a.budget, d.box_budget)?,
        parallel: true,
    })
}

fn moment_row(buf: &mut Vec<u8>, q: &str, j: usize, l: u32, l2: Option<u32>, s: f64, t: f64, m: &MomentEstimate) -> Result<()> {
    writeln!(
        buf,
        "{q},{j},{l},{},{s},{t},{},{},{}",
        l2.map(|x| x.to_string()).unwrap_or_default(),
        m.value,
        m.error_bound,
        m.boxes_enumerated
    )?;
    Ok(())
}

fn moments_cmd(s: &mut Settings, cmd: &MomentsCmd, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let a = match cmd {
        MomentsCmd::Mean(a) | MomentsCmd::Cov(a) | MomentsCmd::Gap(a) => a,
    };
    let fam = family(s, &a.family)?;
    let j = s.get("j", a.j, 1)?;
    let l = s.get("l", a.l, 1)?;
    let opts = enum_options(s, &a.enumeration)?;
    let star = s.flag("star", a.star)?;
    let mut buf = Vec::new();
    writeln!(buf, "{MOMENTS_HEADER}")?;
    match cmd {
        MomentsCmd::Mean(_) => {
            if let Some(n) = s.lookup("balls", a.balls)? {
                let mut sink = sink(s, &a.out, stdout)?;
                s.echo(stderr)?;
                let m = moments::mean_k_binomial(&fam, j, l, n, &opts)?;
                moment_row(&mut buf, "mean_K_binomial", j, l, None, n as f64, n as f64, &m)?;
                sink.emit(&buf)?;
                return Ok(EXIT_OK);
            }
            let t = s.get("t", a.t, 100.0)?;
            let mut sink = sink(s, &a.out, stdout)?;
            s.echo(stderr)?;
            let (q, m) = if star {
                ("mean_Kstar", moments::mean_k_star(&fam, j, l, t, &opts)?)
            } else {
                ("mean_K", moments::mean_k(&fam, j, l, t, &opts)?)
            };
            moment_row(&mut buf, q, j, l, None, t, t, &m)?;
            sink.emit(&buf)?;
        }
        MomentsCmd::Cov(_) => {
            let t = s.get("t", a.t, 100.0)?;
            let st = s.get("s", a.s, t)?;
            let l2 = s.get("l2", a.l2, l)?;
            let i = s.lookup("i", a.i)?;
            let mut sink = sink(s, &a.out, stdout)?;
            s.echo(stderr)?;
            let (q, m) = match i {
                Some(i) => {
                    if star {
                        return Err(invalid("cross-generation covariances are for at-least counts"));
                    }
                    ("cov_K_cross_gen", moments::cov_k_cross_gen(&fam, i, j, l, l2, st, t, &opts)?)
                }
                None if star => ("cov_Kstar", moments::cov_k_star_cross_level(&fam, j, l, st, l2, t, &opts)?),
                None if l == l2 => ("cov_K", moments::cov_k_same(&fam, j, l, st, t, &opts)?),
                None => ("cov_K", moments::cov_k_cross_level(&fam, j, l, st, l2, t, &opts)?),
            };
            moment_row(&mut buf, q, j, l, Some(l2), st, t, &m)?;
            sink.emit(&buf)?;
        }
        MomentsCmd::Gap(_) => {
            let t = s.get("t", a.t, 100.0)?;
            let mut sink = sink(s, &a.out, stdout)?;
            s.echo(stderr)?;
            let g = moments::depoissonization_gap(&fam, j, l, t, &opts)?;
            let m = MomentEstimate {
                value: g.gap,
                error_bound: g.gap_upper - g.gap,
                boxes_enumerated: g.poissonized.boxes_enumerated + g.deterministic.boxes_enumerated,
                prune_threshold: opts.eps,
            };
            moment_row(&mut buf, "gap", j, l, None, t.floor(), t, &m)?;
            sink.emit(&buf)?;
        }
    }
    Ok(EXIT_OK)
}

fn limit_row(buf: &mut Vec<u8>, q: &LimitCovQuery) -> Result<()> {
    let closed = q.closed_form();
    let quad = q.quadrature()?;
    writeln!(
        buf,
        "{},{},{},{},{closed},{quad},{}",
        q.kind,
        q.l1,
        q.l2,
        q.delta,
        (closed - quad).abs()
    )?;
    Ok(())
}

fn limit_cov_cmd(s: &mut Settings, a: &LimitCovArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let kind = s.get("kind", a.kind, LimitKind::Z)?;
    let l1 = s.get("l1", a.l1, 1)?;
    let l2 = s.get("l2", a.l2, l1)?;
    let delta = s.get("delta", a.delta, 0.0)?;
    let quadrature = s.flag("quadrature", a.quadrature)?;
    s.echo(stderr)?;
    let q = LimitCovQuery::new(kind, l1, l2, delta)?;
    if quadrature {
        let mut buf = Vec::new();
        writeln!(buf, "{LIMITS_HEADER}")?;
        limit_row(&mut buf, &q)?;
        stdout.write_all(&buf)?;
    } else {
        writeln!(stdout, "{}", q.closed_form())?;
    }
    Ok(EXIT_OK)
}

fn limit_table_cmd(s: &mut Settings, a: &LimitTableArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let kind = s.get("kind", a.kind, LimitKind::Z)?;
    let max_l = s.get("max_l", a.max_l, 4)?;
    let deltas = s.get("deltas", a.deltas.clone(), F64List(vec![-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0]))?;
    let mut sink = sink(s, &a.out, stdout)?;
    s.echo(stderr)?;
    let mut buf = Vec::new();
    writeln!(buf, "{LIMITS_HEADER}")?;
    for l1 in 1..=max_l {
        for l2 in 1..=max_l {
            for &d in &deltas.0 {
                limit_row(&mut buf, &LimitCovQuery::new(kind, l1, l2, d)?)?;
            }
        }
    }
    sink.emit(&buf)?;
    Ok(EXIT_OK)
}

fn sample_limit_cmd(s: &mut Settings, a: &SampleLimitArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let kind = s.get("kind", a.kind, LimitKind::Z)?;
    let u_grid = s.get("u_grid", a.u_grid.clone(), F64List(vec![0.0, 0.5, 1.0]))?;
    let levels = s.get("levels", a.levels, 3)?;
    let n = s.get("n", a.n, 1000)?;
    let seed = s.get("seed", a.seed, 0)?;
    let mut sink = sink(s, &a.out, stdout)?;
    s.echo(stderr)?;
    let grid = gaussian::build_grid(kind, &u_grid.0, levels)?;
    writeln!(stderr, "# min_eigenvalue={} jitter={}", grid.min_eigenvalue, grid.jitter_applied)?;
    let draws = gaussian::sample(&grid, n, seed);
    let mut buf = Vec::new();
    writeln!(buf, "{SAMPLE_HEADER}")?;
    gaussian::write_samples(&mut buf, &draws, &u_grid.0, levels)?;
    sink.emit(&buf)?;
    Ok(EXIT_OK)
}

fn whitenoise_cmd(s: &mut Settings, a: &WhitenoiseArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let u_grid = s.get("u_grid", a.u_grid.clone(), F64List(vec![0.0, 1.0]))?;
    let n = s.get("n", a.n, 1000)?;
    let seed = s.get("seed", a.seed, 0)?;
    let mesh = WhiteNoiseMesh::new(
        s.get("half_width", a.half_width, 30.0)?,
        s.get("x_step", a.x_step, 0.01)?,
        s.get("y_step", a.y_step, 0.01)?,
    )?;
    let mut sink = sink(s, &a.out, stdout)?;
    s.echo(stderr)?;
    let draws = gaussian::sample_z1_whitenoise(&u_grid.0, &mesh, n, seed)?;
    let mut buf = Vec::new();
    writeln!(buf, "{SAMPLE_HEADER}")?;
    gaussian::write_samples(&mut buf, &draws, &u_grid.0, 1)?;
    sink.emit(&buf)?;
    Ok(EXIT_OK)
}

fn experiment_config(s: &mut Settings, a: &ExperimentArgs, preset: ExperimentConfig) -> Result<ExperimentConfig> {
    let family = family_kind(s, &a.family, preset.family.clone())?;
    let t_grid = match s.lookup("big_t", a.big_t.clone())? {
        Some(big) => big.0.iter().map(|x| x.exp()).collect(),
        None => s.get("t", a.t.clone(), F64List(preset.t_grid.clone()))?.0,
    };
    let u_grid = s.get("u_grid", a.u_grid.clone(), F64List(preset.u_grid.clone()))?.0;
    let d = preset.tolerance;
    Ok(ExperimentConfig {
        family,
        t_grid,
        u_grid,
        generations: s.get("generations", a.generations, preset.generations)?,
        levels: s.get("levels", a.levels, preset.levels)?,
        replicas: s.get("replicas", a.replicas, preset.replicas)?,
        master_seed: s.get("seed", a.seed, preset.master_seed)?,
        output: s.lookup::<String>("out", a.out.out.as_ref().map(|p| p.display().to_string()))?.map(PathBuf::from),
        tolerance: Tolerance {
            se_multiple: s.get("se_multiple", a.se_multiple, d.se_multiple)?,
            pass_fraction: s.get("pass_fraction", a.pass_fraction, d.pass_fraction)?,
            eps: s.get("eps", a.eps, d.eps)?,
        },
    })
}

fn report_out(
    report: &ExperimentReport,
    config: &ExperimentConfig,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32> {
    match &config.output {
        Some(path) => report.write_files(config, path)?,
        None => report.write_csv(stdout)?,
    }
    writeln!(stderr, "{}", report.summary())?;
    Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn verify_cmd(s: &mut Settings, cmd: &VerifyCmd, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let (a, preset, run): (_, _, fn(&ExperimentConfig) -> Result<ExperimentReport>) = match cmd {
        VerifyCmd::Moment(a) => (a, ExperimentConfig::moment_default(), harness::run_moment_check),
        VerifyCmd::Clt(a) => (a, ExperimentConfig::clt_default(), harness::run_clt_check),
        VerifyCmd::Trend(a) => (a, ExperimentConfig::trend_default(), harness::run_asymptotic_trend),
        VerifyCmd::Gap(a) => (a, ExperimentConfig::gap_default(), harness::run_depoissonization_check),
        VerifyCmd::Oracle(a) => return oracle_cmd(s, a, stdout, stderr),
    };
    let config = experiment_config(s, a, preset)?;
    s.echo(stderr)?;
    let report = run(&config)?;
    report_out(&report, &config, stdout, stderr)
}

fn oracle_cmd(s: &mut Settings, a: &OracleArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let kind = family_kind(s, &a.family, FamilyKind::Finite { probs: vec![0.5, 0.3, 0.2] })?;
    let FamilyKind::Finite { probs } = &kind else {
        return Err(invalid("the enumeration oracle needs a finite family"));
    };
    let balls = s.get("balls", a.balls, 3)?;
    let generations = s.get("generations", a.generations, 1)?;
    let replicas = s.get("replicas", a.replicas, 100_000)?;
    let seed = s.get("seed", a.seed, 0)?;
    let tol = Tolerance { se_multiple: s.get("se_multiple", a.se_multiple, 4.0)?, ..Tolerance::default() };
    let config = ExperimentConfig {
        family: kind.clone(),
        t_grid: vec![balls as f64],
        u_grid: vec![0.0],
        generations,
        levels: balls as usize,
        replicas,
        master_seed: seed,
        output: s.lookup::<String>("out", a.out.out.as_ref().map(|p| p.display().to_string()))?.map(PathBuf::from),
        tolerance: tol,
    };
    s.echo(stderr)?;
    let report = harness::run_enumeration_oracle(probs, generations, balls, replicas, seed, &tol)?;
    report_out(&report, &config, stdout, stderr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let mut argv = vec!["nested-karlin"];
        argv.extend_from_slice(args);
        let code = run(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn lists_parse_and_print() {
        let l: F64List = "-1, 0.5,2".parse().unwrap();
        assert_eq!(l.0, vec![-1.0, 0.5, 2.0]);
        assert_eq!(l.to_string(), "-1,0.5,2");
        assert!("1,,2".parse::<F64List>().is_err());
    }

    #[test]
    fn limit_cov_prints_value() {
        let (code, out, err) = call(&["limits", "cov", "--kind", "X", "--l1", "1", "--l2", "1", "--delta", "0"]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(out.trim(), "0.75");
        assert!(err.contains("# kind=X"));
    }

    #[test]
    fn negative_delta_is_accepted() {
        let (code, out, _) = call(&["limits", "cov", "--kind", "Z", "--l1", "1", "--delta", "-1"]);
        assert_eq!(code, EXIT_OK);
        let v: f64 = out.trim().parse().unwrap();
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(call(&["frobnicate"]).0, EXIT_VALIDATION);
        assert_eq!(call(&["limits", "cov", "--kind", "W"]).0, EXIT_VALIDATION);
        assert_eq!(call(&["limits", "cov", "--l1", "0"]).0, EXIT_VALIDATION);
        assert_eq!(call(&["--help"]).0, EXIT_OK);
        assert_eq!(call(&["verify", "moment", "--help"]).0, EXIT_OK);
    }

    #[test]
    fn budget_exhaustion_exits_two() {
        let (code, _, err) = call(&["moments", "mean", "--j", "2", "--t", "1000", "--budget", "10"]);
        assert_eq!(code, EXIT_NUMERIC);
        assert!(err.contains("budget"));
    }
}
