use std::fs;
use std::path::{Path, PathBuf};

use datorus_core::coupling::{
    coupling_tail, first_run, hyperbolic_block_mass, matched_distance_check, run_coupling,
    tail_statistics, PlaqueRectangle,
};
use datorus_core::da_family::{
    compute_frames, make_da_map, verify_partial_hyperbolicity, DaMap, Family, FrameField,
};
use datorus_core::ergodic_stats::{
    correlation_series, deviation_tail, fit_exponential, lyapunov_exponent, moment_bound_check,
    nu_mean, sample_nu_f, EstimateSeries, NuSamples, RateFit, MAX_TREE_LEAVES,
};
use datorus_core::plaques::{linear_partition, Partition};
use datorus_core::semiconjugacy::{semiconjugacy_report, solve_h, DisplacementField};
use datorus_core::torus_linalg::{analyze_matrix, SpectralData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::cache::{self, GridPayload, PayloadKind};
use crate::config::{digest, hex, ExperimentConfig};
use crate::{plots, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Spectrum,
    VerifyPh,
    SolveH,
    Lyapunov,
    Correlations,
    Deviations,
    MomentBound,
    Coupling,
    Plots,
    All,
}

pub struct Runner {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    fingerprint: String,
    spectral: SpectralData,
}

type Res<T> = Result<T, CliError>;

fn fit_json(fit: datorus_core::Result<RateFit>) -> Value {
    match fit {
        Ok(f) => json!({
            "rate": f.rate,
            "rate_stderr": f.rate_stderr,
            "tau": f.tau(),
            "log_intercept": f.log_intercept,
            "r_squared": f.r_squared,
            "fit_range": [f.fit_range.0, f.fit_range.1],
            "usable": f.usable,
            "degenerate": f.degenerate,
        }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

impl Runner {
    pub fn new(cfg: ExperimentConfig) -> Res<Self> {
        cfg.validate()?;
        let spectral = analyze_matrix(cfg.matrix)
            .map_err(|e| CliError::ConfigInvalid(format!("matrix: {e}")))?;
        Ok(Runner {
            out: cfg.output_dir.clone(),
            fingerprint: hex(&cfg.fingerprint()),
            cfg,
            spectral,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn run(&self, cmd: Subcommand) -> Res<()> {
        fs::create_dir_all(&self.out)?;
        match cmd {
            Subcommand::Spectrum => self.spectrum(),
            Subcommand::VerifyPh => self.verify_ph(),
            Subcommand::SolveH => self.solve_h(),
            Subcommand::Lyapunov => self.lyapunov(),
            Subcommand::Correlations => self.correlations(),
            Subcommand::Deviations => self.deviations(),
            Subcommand::MomentBound => self.moment_bound(),
            Subcommand::Coupling => self.coupling(),
            Subcommand::Plots => self.plots(),
            Subcommand::All => {
                for c in [
                    Subcommand::Spectrum,
                    Subcommand::VerifyPh,
                    Subcommand::SolveH,
                    Subcommand::Lyapunov,
                    Subcommand::Correlations,
                    Subcommand::Deviations,
                    Subcommand::MomentBound,
                    Subcommand::Coupling,
                    Subcommand::Plots,
                ] {
                    self.run(c)?;
                }
                Ok(())
            }
        }
    }

    fn write_json(&self, name: &str, mut v: Value) -> Res<PathBuf> {
        if let Value::Object(m) = &mut v {
            m.insert("fingerprint".into(), json!(self.fingerprint));
            m.insert("seed".into(), json!(self.cfg.seed));
        }
        let path = self.out.join(name);
        let mut text =
            serde_json::to_string_pretty(&v).map_err(|e| CliError::Compute(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text)?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn write_csv(&self, name: &str, s: &EstimateSeries) -> Res<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, csv_text(&self.fingerprint, self.cfg.seed, s))?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn map(&self, s: f64) -> Res<DaMap> {
        Ok(make_da_map(&self.spectral, self.cfg.bump.spec()?, s)?)
    }

    fn partition(&self) -> Res<Partition> {
        Ok(linear_partition(&self.spectral, self.cfg.boxes_per_axis)?)
    }

    fn cache_key(&self, kind: PayloadKind, s: f64, a: usize, b: usize) -> [u8; 32] {
        let key = json!({
            "kind": kind as u32,
            "matrix": self.cfg.matrix,
            "bump": self.cfg.bump,
            "s": s,
            "grid": a,
            "depth_or_iters": b,
        });
        digest(&serde_json::to_vec(&key).expect("key serializes"))
    }

    fn cache_path(&self, kind: PayloadKind, key: &[u8; 32]) -> PathBuf {
        let stem = match kind {
            PayloadKind::Displacement => "field",
            PayloadKind::Frames => "frames",
        };
        self.out
            .join("cache")
            .join(format!("{stem}-{}.bin", &hex(key)[..16]))
    }

    /// The displacement field for s, from the cache when it matches.
    pub fn field(&self, s: f64) -> Res<DisplacementField> {
        let (n, depth) = (self.cfg.grid_n, self.cfg.depth);
        let key = self.cache_key(PayloadKind::Displacement, s, n, depth);
        let path = self.cache_path(PayloadKind::Displacement, &key);
        let f = self.map(s)?;
        let cached = if path.exists() {
            cache::read_matching(&path, PayloadKind::Displacement, &key)?
        } else {
            None
        };
        if let Some(p) = cached {
            let values = p.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            return Ok(DisplacementField::from_values(&f, n, depth, values, None)?);
        }
        let u = solve_h(&f, n, depth)?;
        if !path.exists() {
            let data = u.values.iter().flatten().copied().collect();
            let dim = n as u32;
            cache::write(
                &path,
                &GridPayload {
                    kind: PayloadKind::Displacement,
                    fingerprint: key,
                    dims: [dim; 3],
                    data,
                },
            )?;
        } else {
            eprintln!(
                "note: {} belongs to another configuration; left untouched",
                path.display()
            );
        }
        Ok(u)
    }

    pub fn frames(&self, s: f64) -> Res<FrameField> {
        let (n, iters) = (self.cfg.frame_grid, self.cfg.frame_iters);
        let key = self.cache_key(PayloadKind::Frames, s, n, iters);
        let path = self.cache_path(PayloadKind::Frames, &key);
        let cached = if path.exists() {
            cache::read_matching(&path, PayloadKind::Frames, &key)?
        } else {
            None
        };
        if let Some(p) = cached {
            let mut frames = Vec::with_capacity(p.data.len() / 10);
            let mut residuals = Vec::with_capacity(p.data.len() / 10);
            for c in p.data.chunks_exact(10) {
                frames.push([[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]]);
                residuals.push(c[9]);
            }
            return Ok(FrameField {
                grid_n: n,
                iterations: iters,
                spectral: self.spectral,
                frames,
                residuals,
            });
        }
        let fr = compute_frames(&self.map(s)?, n, iters)?;
        if !path.exists() {
            let mut data = Vec::with_capacity(fr.frames.len() * 10);
            for (f, r) in fr.frames.iter().zip(&fr.residuals) {
                data.extend(f.iter().flatten());
                data.push(*r);
            }
            let dim = n as u32;
            cache::write(
                &path,
                &GridPayload {
                    kind: PayloadKind::Frames,
                    fingerprint: key,
                    dims: [dim; 3],
                    data,
                },
            )?;
        } else {
            eprintln!(
                "note: {} belongs to another configuration; left untouched",
                path.display()
            );
        }
        Ok(fr)
    }

    fn samples(&self, u: &DisplacementField) -> Res<NuSamples> {
        Ok(sample_nu_f(
            u,
            &self.spectral.automorphism,
            self.cfg.sample_count,
            self.cfg.seed,
        )?)
    }

    fn s_values(&self) -> Vec<f64> {
        self.cfg.s.values()
    }

    fn spectrum(&self) -> Res<()> {
        let sp = &self.spectral;
        self.write_json(
            "spectrum.json",
            json!({
                "matrix": self.cfg.matrix,
                "mu": sp.mu,
                "kappa": sp.kappa,
                "log_kappa": sp.log_kappa(),
                "eigenvectors": sp.frame,
            }),
        )?;
        Ok(())
    }

    fn verify_ph(&self) -> Res<()> {
        for s in self.s_values() {
            let rep = verify_partial_hyperbolicity(
                &self.map(s)?,
                self.cfg.ph_grid,
                self.cfg.cone_angle,
                self.cfg.frame_iters,
            )?;
            println!("verify-ph s={s}: verified {}", rep.verified);
            self.write_json(
                &format!("verify-ph-s{s}.json"),
                json!({ "s": s, "report": rep }),
            )?;
        }
        Ok(())
    }

    fn solve_h(&self) -> Res<()> {
        for s in self.s_values() {
            let u = self.field(s)?;
            let frames = self.frames(s)?;
            let rep = semiconjugacy_report(
                &u,
                &frames,
                self.cfg.fiber_samples,
                self.cfg.qi_pairs,
                self.cfg.seed,
            )?;
            self.write_json(
                &format!("semiconjugacy-s{s}.json"),
                json!({
                    "s": s,
                    "grid_n": u.grid_n,
                    "depth": u.truncation_depth,
                    "residual_sup": u.residual_sup,
                    "interpolation_error": u.interpolation_error,
                    "lipschitz_est": u.lipschitz_est,
                    "tail_bound": u.tail_bound,
                    "report": rep,
                }),
            )?;
        }
        Ok(())
    }

    fn lyapunov(&self) -> Res<()> {
        for s in self.s_values() {
            let f = self.map(s)?;
            let u = self.field(s)?;
            let frames = self.frames(s)?;
            let smp = self.samples(&u)?;
            let mut series = EstimateSeries {
                n_values: Vec::new(),
                estimates: Vec::new(),
                stderrs: Vec::new(),
                sample_count: smp.len(),
                seed: self.cfg.seed,
            };
            for &n in &self.cfg.orbit_lengths {
                let e = lyapunov_exponent(&f, &frames, &smp, Family::C, n)?;
                series.n_values.push(n);
                series.estimates.push(e.value);
                series.stderrs.push(e.stderr);
            }
            let n = *self.cfg.orbit_lengths.iter().max().unwrap();
            let mut exps = Vec::new();
            for fam in [Family::S, Family::C, Family::U] {
                exps.push(lyapunov_exponent(&f, &frames, &smp, fam, n)?);
            }
            self.write_csv(&format!("lyapunov-s{s}.csv"), &series)?;
            self.write_json(
                &format!("lyapunov-s{s}.json"),
                json!({
                    "s": s,
                    "orbit_length": n,
                    "stable": exps[0],
                    "center": exps[1],
                    "unstable": exps[2],
                    "log_kappa2": self.spectral.kappa[1].ln(),
                    "samples": smp.len(),
                    "dropped": smp.dropped,
                }),
            )?;
        }
        Ok(())
    }

    fn correlations(&self) -> Res<()> {
        for s in self.s_values() {
            let u = self.field(s)?;
            let smp = self.samples(&u)?;
            let mut entries = Vec::new();
            for (i, [a, b]) in self.cfg.correlation_pairs.iter().enumerate() {
                let (oa, ob) = (&self.cfg.observables[*a], &self.cfg.observables[*b]);
                let c = correlation_series(&u, &smp, &oa.spec()?, &ob.spec()?, self.cfg.n_max)?;
                let file = format!("correlations-s{s}-{i}.csv");
                self.write_csv(&file, &c)?;
                entries.push(json!({
                    "phi": oa.label(),
                    "psi": ob.label(),
                    "csv": file,
                    "fit": fit_json(fit_exponential(&c)),
                }));
            }
            self.write_json(
                &format!("correlations-s{s}.json"),
                json!({ "s": s, "pairs": entries }),
            )?;
        }
        Ok(())
    }

    fn deviations(&self) -> Res<()> {
        let d = &self.cfg.deviations;
        let obs = &self.cfg.observables[d.observable];
        for s in self.s_values() {
            let u = self.field(s)?;
            let smp = self.samples(&u)?;
            let raw = obs.spec()?;
            let (mean, mean_err) = nu_mean(&u, &smp, &raw);
            let phi = if d.centered { raw.shifted(-mean) } else { raw };
            let tail = deviation_tail(&u, &smp, &phi, d.eps, &d.ns)?;
            let file = format!("deviations-s{s}.csv");
            self.write_csv(&file, &tail)?;
            self.write_json(
                &format!("deviations-s{s}.json"),
                json!({
                    "s": s,
                    "phi": obs.label(),
                    "centered": d.centered,
                    "nu_mean": mean,
                    "nu_mean_stderr": mean_err,
                    "eps": d.eps,
                    "csv": file,
                    "fit": fit_json(fit_exponential(&tail)),
                }),
            )?;
        }
        Ok(())
    }

    fn moment_bound(&self) -> Res<()> {
        let m = &self.cfg.moment;
        let obs = &self.cfg.observables[m.observable];
        let phi = obs.spec()?;
        let part = self.partition()?;
        for s in self.s_values() {
            let u = self.field(s)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            let aps = (0..m.plaques)
                .map(|_| part.random_aplaque(&mut rng))
                .collect::<datorus_core::Result<Vec<_>>>()?;
            let per_plaque: Vec<Vec<_>> = aps
                .par_iter()
                .map(|ap| {
                    (1..=m.n_max)
                        .map(|n| {
                            moment_bound_check(
                                &u,
                                &part,
                                ap,
                                &phi,
                                m.s_mom,
                                n,
                                m.per_leaf,
                                MAX_TREE_LEAVES,
                            )
                        })
                        .collect::<datorus_core::Result<Vec<_>>>()
                })
                .collect::<datorus_core::Result<Vec<_>>>()?;
            let theta = per_plaque
                .iter()
                .map(|v| v.last().unwrap().theta_hat)
                .fold(0.0, f64::max);
            let theta_c = per_plaque
                .iter()
                .map(|v| v.last().unwrap().theta_hat_center)
                .fold(0.0, f64::max);
            let blank = || EstimateSeries {
                n_values: (1..=m.n_max).collect(),
                estimates: vec![0.0; m.n_max],
                stderrs: vec![0.0; m.n_max],
                sample_count: m.plaques,
                seed: self.cfg.seed,
            };
            let (mut lhs, mut lhs_c) = (blank(), blank());
            let (mut ratio, mut ratio_c) = (0.0f64, 0.0f64);
            for v in &per_plaque {
                let (th, thc) = (
                    v.last().unwrap().theta_hat,
                    v.last().unwrap().theta_hat_center,
                );
                for (i, mb) in v.iter().enumerate() {
                    lhs.estimates[i] = lhs.estimates[i].max(mb.lhs);
                    lhs_c.estimates[i] = lhs_c.estimates[i].max(mb.lhs_center);
                    ratio = ratio.max(mb.lhs / th.powi(mb.n as i32));
                    ratio_c = ratio_c.max(mb.lhs_center / thc.powi(mb.n as i32));
                }
            }
            self.write_csv(&format!("moment-bound-s{s}.csv"), &lhs)?;
            self.write_csv(&format!("moment-bound-center-s{s}.csv"), &lhs_c)?;
            self.write_json(
                &format!("moment-bound-s{s}.json"),
                json!({
                    "s": s,
                    "phi": obs.label(),
                    "s_mom": m.s_mom,
                    "plaques": m.plaques,
                    "theta_hat": theta,
                    "theta_hat_center": theta_c,
                    "max_lhs_over_theta_pow": ratio,
                    "max_lhs_over_theta_pow_center": ratio_c,
                }),
            )?;
        }
        Ok(())
    }

    fn coupling(&self) -> Res<()> {
        let c = &self.cfg.coupling;
        let params = c.params();
        let part = self.partition()?;
        for s in self.s_values() {
            let u = self.field(s)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            let aps = (0..2 * c.pairs)
                .map(|_| part.random_aplaque(&mut rng))
                .collect::<datorus_core::Result<Vec<_>>>()?;
            let results: Vec<(Value, EstimateSeries)> = aps
                .par_chunks(2)
                .map(|ab| -> Res<(Value, EstimateSeries)> {
                    let y1 = PlaqueRectangle::new(&u, &part, &ab[0])?;
                    let y2 = PlaqueRectangle::new(&u, &part, &ab[1])?;
                    let (q1, a0) =
                        hyperbolic_block_mass(&u, &part, &ab[0], &params, 6, 3, MAX_TREE_LEAVES)?;
                    let fr = first_run(&y1, &y2, &params, &u, &part)?;
                    let rec = run_coupling(&y1, &y2, &params, &u, &part)?;
                    let audit =
                        matched_distance_check(&rec, &u, &part, &params, c.distance_steps, 50)?;
                    let v = json!({
                        "n0": fr.n0,
                        "first_run_mass": fr.coupled_mass,
                        "q1_hat": q1,
                        "a0_hat": a0,
                        "mass_bound": fr.mass_bound(a0),
                        "fit": fit_json(tail_statistics(&rec)),
                        "audit": audit,
                        "record": rec,
                    });
                    Ok((v, coupling_tail(&rec)))
                })
                .collect::<Res<Vec<_>>>()?;
            let mut entries = Vec::new();
            for (i, (mut v, tail)) in results.into_iter().enumerate() {
                let file = format!("coupling-s{s}-{i}.csv");
                self.write_csv(&file, &tail)?;
                v["csv"] = json!(file);
                entries.push(v);
            }
            let (rho1, rho1_literal) = params.rho1();
            self.write_json(
                &format!("coupling-s{s}.json"),
                json!({ "s": s, "params": params, "rho1": rho1, "rho1_literal": rho1_literal, "pairs": entries }),
            )?;
        }
        Ok(())
    }

    fn plots(&self) -> Res<()> {
        for p in plots::plot_dir(&self.out)? {
            println!("wrote {}", p.display());
        }
        Ok(())
    }
}

/// `n,estimate,stderr` table under a `#` line carrying fingerprint and seed.
pub fn csv_text(fingerprint: &str, seed: u64, s: &EstimateSeries) -> String {
    let mut out = format!("# fingerprint={fingerprint} seed={seed}\nn,estimate,stderr\n");
    for ((n, e), err) in s.n_values.iter().zip(&s.estimates).zip(&s.stderrs) {
        out.push_str(&format!("{n},{e},{err}\n"));
    }
    out
}

pub fn read_config(path: Option<&Path>) -> Res<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::ConfigInvalid(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)
        }
    }
}
