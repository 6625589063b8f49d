use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use darcyhom::cell::read_matrix_csv;
use darcyhom::correctors::{build_correctors, residual_field};
use darcyhom::fine::FineManifest;
use darcyhom::geometry::CellSpec;
use darcyhom::grid::{boundary_trace_norm, l2_norm, l2_norm_staggered, write_scalar, write_staggered};
use darcyhom::study::{error_metrics, format_checks, run_verify, StudyConfig};
use darcyhom::{
    convergence_study, solve_cell, solve_p0, CellGeometry, FineSolver, PerforatedDomain, Result,
    VectorField,
};

#[derive(Parser)]
#[command(name = "darcyhom", version, about = "Stokes flow in perforated squares and its Darcy limit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the unit-cell problems and write K, W, pi and the correctors.
    Cell {
        /// Built-in name (`square-half`, `cross`) or a JSON mask file.
        #[arg(long)]
        geometry: String,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the homogenized Neumann problem for a given permeability.
    Homogenize {
        /// `K.csv` as written by `cell`.
        #[arg(long)]
        k: PathBuf,
        #[arg(long)]
        forcing: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "zero")]
        b: String,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the fine-scale Stokes problem on the perforated square.
    Solve {
        #[command(flatten)]
        case: CaseArgs,
    },
    /// Build the two-scale approximation and its boundary correctors.
    Correctors {
        #[command(flatten)]
        case: CaseArgs,
    },
    /// Run a convergence study from a JSON config.
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite from a JSON config.
    Verify {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(clap::Args)]
struct CaseArgs {
    #[arg(long)]
    geometry: String,
    /// Number of periods per side.
    #[arg(long)]
    n: usize,
    /// Grid cells per period.
    #[arg(long)]
    m: usize,
    /// Built-in name or inline JSON.
    #[arg(long)]
    forcing: String,
    #[arg(long, default_value = "zero")]
    b: String,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn geometry(arg: &str) -> Result<CellGeometry> {
    match CellGeometry::named(arg) {
        Ok(g) => Ok(g),
        Err(_) if Path::new(arg).is_file() => {
            let spec: CellSpec = serde_json::from_str(&std::fs::read_to_string(arg)?)?;
            CellGeometry::from_spec(&spec)
        }
        Err(e) => Err(e),
    }
}

fn field(arg: &str) -> Result<VectorField> {
    if arg.trim_start().starts_with(['{', '"', '[']) {
        Ok(serde_json::from_str(arg)?)
    } else {
        VectorField::named(arg)
    }
}

fn cell(geometry_arg: &str, m: usize, out: &Path) -> Result<bool> {
    let g = geometry(geometry_arg)?;
    let sol = solve_cell(&g, m)?;
    sol.save(out)?;
    let k = sol.k();
    println!("K = [[{:.10e}, {:.10e}], [{:.10e}, {:.10e}]]", k[0][0], k[0][1], k[1][0], k[1][1]);
    println!("max residual {:.2e}", sol.max_residual);
    println!("wrote {}", out.display());
    Ok(true)
}

fn homogenize(k: &Path, forcing: &str, n: usize, b: &str, mu: f64, out: Option<&Path>) -> Result<bool> {
    let kk = read_matrix_csv(k)?;
    let hs = solve_p0(kk, &field(forcing)?, &field(b)?, mu, n)?;
    println!("||p0|| = {:.6e}", l2_norm(&hs.p0, None));
    println!("||u0|| = {:.6e}", l2_norm_staggered(&hs.u0, None));
    println!("residual {:.2e}", hs.residual);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_scalar(&dir.join("p0.bin"), &hs.p0)?;
        write_staggered(&dir.join("u0.bin"), &hs.u0)?;
        println!("wrote {}", dir.display());
    }
    Ok(hs.residual <= 1e-10)
}

fn solve(c: &CaseArgs) -> Result<bool> {
    let g = geometry(&c.geometry)?;
    let domain = PerforatedDomain::new(&g, c.n, c.m)?;
    let (f, b) = (field(&c.forcing)?, field(&c.b)?);
    let sol = FineSolver::new(&domain, c.mu)?.solve(&f, &b)?;
    println!("eps = {:e}, h = {:e}", domain.epsilon(), domain.h());
    println!("||u|| = {:.6e}", l2_norm_staggered(&sol.velocity, None));
    println!("||P|| = {:.6e}", l2_norm(&sol.extended, None));
    match sol.poincare_ratio() {
        Ok(r) => println!("poincare ratio {r:.4}"),
        Err(_) => println!("poincare ratio undefined (zero velocity)"),
    }
    println!("residual {:.2e}, divergence defect {:.2e}", sol.residual, sol.div_defect);
    if let Some(dir) = &c.out {
        let manifest = FineManifest {
            epsilon: domain.epsilon(),
            m: c.m,
            geometry_hash: g.hash(),
            forcing: f.label(),
            boundary: b.label(),
            residual: sol.residual,
        };
        sol.save(dir, &manifest)?;
        println!("wrote {}", dir.display());
    }
    Ok(sol.residual <= 1e-10 && sol.div_defect <= 1e-10)
}

fn correctors(c: &CaseArgs) -> Result<bool> {
    let g = geometry(&c.geometry)?;
    let domain = PerforatedDomain::new(&g, c.n, c.m)?;
    let (f, b) = (field(&c.forcing)?, field(&c.b)?);
    let cell = solve_cell(&g, c.m)?;
    let solver = FineSolver::new(&domain, c.mu)?;
    let hs = solve_p0(cell.k(), &f, &b, c.mu, domain.n())?;
    let fine = solver.solve(&f, &b)?;
    let set = build_correctors(&solver, &cell, &hs, &b)?;
    let (v, q) = residual_field(&fine, &set, &cell, &hs, &domain)?;
    let m = error_metrics(&fine, &solver, &cell, &hs)?;
    println!("eps = {:e}", domain.epsilon());
    println!("e_vel = {:.6e}, e_pre = {:.6e}, e_grad = {:.6e}", m.e_vel, m.e_pre, m.e_grad);
    println!("||Psi_t|| = {:.6e}", l2_norm_staggered(&set.psi_t, None));
    println!("||Psi_n|| = {:.6e}", l2_norm_staggered(&set.psi_n, None));
    println!("|gamma| = {:.6e}", set.gamma.abs());
    println!("div repair = {:.6e}", set.div_repair(domain.solid())?);
    println!("||v|| = {:.6e}, boundary trace {:.6e}", l2_norm_staggered(&v, None), boundary_trace_norm(&v));
    println!("||q|| = {:.6e}", l2_norm(&q, Some(&solver.layout().fluid_mask())));
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir)?;
        write_staggered(&dir.join("u_osc.bin"), &set.u_osc)?;
        write_staggered(&dir.join("phi_eps.bin"), &set.phi_eps)?;
        write_staggered(&dir.join("psi_t.bin"), &set.psi_t)?;
        write_staggered(&dir.join("psi_n.bin"), &set.psi_n)?;
        write_staggered(&dir.join("v.bin"), &v)?;
        write_scalar(&dir.join("q.bin"), &q)?;
        println!("wrote {}", dir.display());
    }
    Ok(set.residual <= 1e-10)
}

fn study(config: &Path, out: Option<PathBuf>) -> Result<bool> {
    let mut cfg = StudyConfig::load(config)?;
    if out.is_some() {
        cfg.out_dir = out;
    }
    let report = convergence_study(&cfg)?;
    println!("{:>10} {:>12} {:>12} {:>12} {:>12}", "eps", "e_vel", "e_pre", "e_grad", "|gamma|");
    for r in &report.rows {
        println!(
            "{:>10.5} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            r.epsilon, r.e_vel, r.e_pre, r.e_grad, r.gamma_abs
        );
    }
    print!("{}", format_checks(&report.checks));
    if let Some(dir) = &cfg.out_dir {
        println!("wrote {}", dir.display());
    }
    Ok(report.passed())
}

fn verify(config: &Path) -> Result<bool> {
    let cfg = StudyConfig::load(config)?;
    let report = run_verify(&cfg);
    print!("{}", format_checks(&report.checks));
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Cell { geometry, m, out } => cell(&geometry, m, &out),
        Command::Homogenize { k, forcing, n, b, mu, out } => homogenize(&k, &forcing, n, &b, mu, out.as_deref()),
        Command::Solve { case } => solve(&case),
        Command::Correctors { case } => correctors(&case),
        Command::Study { config, out } => study(&config, out),
        Command::Verify { config } => verify(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
