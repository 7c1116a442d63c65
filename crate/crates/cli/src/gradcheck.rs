use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use dcls::construct::{construct_backward, UpstreamGrad};
use dcls::conv::{dcls_conv_forward, ConvConfig, FeatureMap};
use dcls::diagnostics::gradcheck::{random_array, random_off_lattice_positions, random_weights};
use dcls::diagnostics::{construct_grad_error_with, conv_grad_errors, ConstructBackward};
use dcls::KernelSpec;

use crate::{CliError, CliResult};

/// Largest relative error accepted by the command.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Dimensionality to check (1, 2 or 3). All three when omitted.
    #[arg(long)]
    pub ndims: Option<usize>,
    /// Dilated kernel size per axis.
    #[arg(long, num_args = 1..=3)]
    pub s: Option<Vec<usize>>,
    /// Kernel elements per channel slice.
    #[arg(long)]
    pub m: Option<usize>,
    /// Random configurations per layout on the construction path.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Finite-difference step, in [1e-6, 1e-3].
    #[arg(long)]
    pub eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckFile {
    pub ndims: Option<usize>,
    pub s: Option<Vec<usize>>,
    pub m: Option<usize>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub eps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub ndims: Vec<usize>,
    pub s: Option<Vec<usize>>,
    pub m: usize,
    pub trials: usize,
    pub seed: u64,
    pub eps: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            ndims: vec![1, 2, 3],
            s: None,
            m: 5,
            trials: 20,
            seed: 0,
            eps: 1e-5,
        }
    }
}

impl GradcheckArgs {
    pub fn resolve(&self, file: &GradcheckFile) -> CliResult<GradcheckOptions> {
        let d = GradcheckOptions::default();
        let s = self.s.clone().or_else(|| file.s.clone());
        let ndims = match (self.ndims.or(file.ndims), &s) {
            (Some(n), _) => vec![n],
            (None, Some(s)) => vec![s.len()],
            (None, None) => d.ndims,
        };
        let opts = GradcheckOptions {
            ndims,
            s,
            m: self.m.or(file.m).unwrap_or(d.m),
            trials: self.trials.or(file.trials).unwrap_or(d.trials),
            seed: self.seed.or(file.seed).unwrap_or(d.seed),
            eps: self.eps.or(file.eps).unwrap_or(d.eps),
        };
        opts.validate()?;
        Ok(opts)
    }
}

impl GradcheckOptions {
    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if !(1e-6..=1e-3).contains(&self.eps) {
            return usage(format!("--eps must be in [1e-6, 1e-3], got {}", self.eps));
        }
        if let Some(&n) = self.ndims.iter().find(|n| !(1..=3).contains(*n)) {
            return usage(format!("--ndims must be 1, 2 or 3, got {n}"));
        }
        if let Some(s) = &self.s {
            if self.ndims.len() != 1 || s.len() != self.ndims[0] {
                return usage(format!(
                    "--s has {} sizes for --ndims {:?}",
                    s.len(),
                    self.ndims
                ));
            }
            if s.contains(&0) {
                return usage("--s sizes must be positive".into());
            }
        }
        if self.m == 0 || self.trials == 0 {
            return usage("--m and --trials must be positive".into());
        }
        Ok(())
    }

    fn sizes(&self, ndims: usize) -> Vec<usize> {
        match &self.s {
            Some(s) => s.clone(),
            None => [vec![9], vec![7, 7], vec![5, 5, 5]][ndims - 1].clone(),
        }
    }
}

/// Channel layouts checked for every dimensionality: `(name, cout, cin_per_group, groups)`.
const LAYOUTS: [(&str, usize, usize, usize); 3] = [
    ("depthwise", 2, 1, 2),
    ("grouped", 4, 2, 2),
    ("dense", 2, 3, 1),
];

pub fn run_gradcheck(opts: &GradcheckOptions) -> bool {
    run_gradcheck_with(opts, construct_backward)
}

/// Run the suite with an alternative construction backward pass on the construction path.
pub fn run_gradcheck_with(opts: &GradcheckOptions, backward: ConstructBackward) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let conv_trials = opts.trials.div_ceil(10);
    let mut all_ok = true;
    println!(
        "{:<6} {:<10} {:<10} {:>6} {:>12}  status",
        "ndims", "layout", "path", "trials", "max_error"
    );
    for &ndims in &opts.ndims {
        let sizes = opts.sizes(ndims);
        for (layout, cout, cin_g, groups) in LAYOUTS {
            let spec = match KernelSpec::new(&sizes, opts.m, cout, cin_g, groups) {
                Ok(spec) => spec,
                Err(e) => {
                    eprintln!("invalid configuration {sizes:?} m={}: {e}", opts.m);
                    return false;
                }
            };
            let mut worst = 0.0f64;
            let mut failure = None;
            for trial in 0..opts.trials {
                let w = random_weights(&spec, &mut rng);
                let p = random_off_lattice_positions(&spec, &mut rng);
                let g = UpstreamGrad(random_array(&spec.kernel_shape(), &mut rng));
                match construct_grad_error_with(backward, &spec, &w, &p, &g, opts.eps) {
                    Ok(err) => {
                        worst = worst.max(err);
                        if err > TOLERANCE && failure.is_none() {
                            failure = Some(format!("trial {trial}: error {err:.3e}"));
                        }
                    }
                    Err(e) => failure = failure.or(Some(format!("trial {trial}: {e}"))),
                }
            }
            all_ok &= report_row(
                ndims,
                layout,
                "construct",
                opts.trials,
                worst,
                failure,
                &spec,
                opts.seed,
            );

            let mut worst = 0.0f64;
            let mut failure = None;
            let cfg = ConvConfig::same(&spec);
            for trial in 0..conv_trials {
                let mut shape = vec![1, spec.channels_in()];
                shape.extend(sizes.iter().map(|s| s + 3));
                let x = FeatureMap(random_array(&shape, &mut rng));
                let w = random_weights(&spec, &mut rng);
                let p = random_off_lattice_positions(&spec, &mut rng);
                let result = dcls_conv_forward(&x, &w, &p, &spec, &cfg).and_then(|(y, _)| {
                    let readout = random_array(y.shape(), &mut rng);
                    conv_grad_errors(&spec, &cfg, &x, &w, &p, &readout, opts.eps)
                });
                match result {
                    Ok(errs) => {
                        worst = worst.max(errs.max());
                        if errs.max() > TOLERANCE && failure.is_none() {
                            failure = Some(format!("trial {trial}: {errs:?}"));
                        }
                    }
                    Err(e) => failure = failure.or(Some(format!("trial {trial}: {e}"))),
                }
            }
            all_ok &= report_row(
                ndims,
                layout,
                "conv",
                conv_trials,
                worst,
                failure,
                &spec,
                opts.seed,
            );
        }
    }
    all_ok
}

#[allow(clippy::too_many_arguments)]
fn report_row(
    ndims: usize,
    layout: &str,
    path: &str,
    trials: usize,
    worst: f64,
    failure: Option<String>,
    spec: &KernelSpec,
    seed: u64,
) -> bool {
    let ok = failure.is_none();
    println!(
        "{ndims:<6} {layout:<10} {path:<10} {trials:>6} {worst:>12.3e}  {}",
        if ok { "ok" } else { "FAIL" }
    );
    if let Some(f) = failure {
        eprintln!(
            "failing configuration: s={:?} m={} cout={} cin_per_group={} groups={} seed={seed}, {f}",
            spec.dilated_size, spec.kernel_count, spec.channels_out, spec.channels_in_per_group, spec.groups
        );
    }
    ok
}
