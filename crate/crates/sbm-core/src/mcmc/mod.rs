//! The trans-dimensional MCMC engine: chain configuration, initialisation,
//! the sweep driver with burn-in and thinning, multi-chain execution with
//! per-chain RNG streams, and trace serialisation.

pub mod sampler;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::embed::{scree_elbow, EmbedSource, Embedding};
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::model::{
    log_crp_z, log_marg_left, log_marg_right, log_prior_d, log_prior_h, log_prior_k, log_prior_v,
    ChainState, DPrior, GroupData, HyperParams, ProblemData,
};
use crate::util::{fmt_g17, logsumexp, sample_log_weights, stream_rng};
pub use sampler::{MoveCounters, Sampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Undirected,
    /// Directed graph, one shared allocation explaining both SVD blocks.
    DirectedShared,
    /// Directed graph, independent source and destination allocations.
    DirectedCocluster,
    Bipartite,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "undirected" => Ok(Mode::Undirected),
            "directed_shared" => Ok(Mode::DirectedShared),
            "directed_cocluster" => Ok(Mode::DirectedCocluster),
            "bipartite" => Ok(Mode::Bipartite),
            other => Err(Error::Invalid(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Undirected => "undirected",
            Mode::DirectedShared => "directed_shared",
            Mode::DirectedCocluster => "directed_cocluster",
            Mode::Bipartite => "bipartite",
        };
        write!(f, "{s}")
    }
}

/// Per-sweep move counts, thinning and iteration budget.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MoveSchedule {
    pub gibbs_z: usize,
    pub split_merge: usize,
    pub empty_community: usize,
    pub dim_change: usize,
    pub gibbs_v: usize,
    pub split_merge_v: usize,
    pub empty_v: usize,
    pub iters: u64,
    pub burnin: u64,
    pub thin: u64,
}

impl MoveSchedule {
    /// Default schedule: allocations dominate cost, dimension proposals are
    /// cheap and run three times per sweep.
    pub fn with_iters(iters: u64, burnin: u64, thin: u64) -> Self {
        MoveSchedule {
            gibbs_z: 1,
            split_merge: 1,
            empty_community: 1,
            dim_change: 3,
            gibbs_v: 1,
            split_merge_v: 1,
            empty_v: 1,
            iters,
            burnin,
            thin: thin.max(1),
        }
    }

    pub fn validate(&self, marginalize_d: bool) -> Result<()> {
        if self.burnin >= self.iters {
            return Err(Error::Invalid(format!(
                "burn-in {} must be below the iteration count {}",
                self.burnin, self.iters
            )));
        }
        if self.gibbs_z == 0 {
            return Err(Error::Invalid("schedule must include gibbs_z sweeps".into()));
        }
        if self.dim_change == 0 && !marginalize_d {
            return Err(Error::Invalid(
                "schedule must include dimension moves unless d is marginalised".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub n_chains: usize,
    pub mode: Mode,
    pub init_k: usize,
    pub marginalize_d: bool,
    /// Starting dimension; the scree elbow when absent.
    pub d_init: Option<usize>,
    /// Cap on concurrent chains (defaults to the rayon pool).
    pub threads: Option<usize>,
    /// Recalibrate delta_diag/sigma0_sq from the K-means configuration.
    pub calibrate: bool,
}

impl RunConfig {
    pub fn new(seed: u64, mode: Mode) -> Self {
        RunConfig {
            seed,
            n_chains: 1,
            mode,
            init_k: 10,
            marginalize_d: false,
            d_init: None,
            threads: None,
            calibrate: true,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GroupSample {
    pub k: usize,
    pub kempty: usize,
    pub h: usize,
    pub hempty: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceSample {
    pub iter: u64,
    pub d: usize,
    pub groups: Vec<GroupSample>,
    pub log_joint: f64,
}

/// Thinned post-burn-in record of one chain.
#[derive(Debug, Clone)]
pub struct Trace {
    pub chain: usize,
    pub seed: u64,
    pub samples: Vec<TraceSample>,
    /// Thinned allocations, indexed [sample][group][node].
    pub allocs: Vec<Vec<Vec<u32>>>,
    pub accept: Vec<(String, u64, u64)>,
    pub n_groups: usize,
}

impl Trace {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }
}

/// Build the sampler's data layout from an embedding and a mode.
pub fn problem_from_embedding(e: &Embedding, mode: Mode) -> Result<ProblemData> {
    e.validate_finite()?;
    let data = match mode {
        Mode::Undirected => {
            if e.source == EmbedSource::Svd {
                return Err(Error::Shape(
                    "undirected mode expects an ASE/LSE embedding, not an SVD pair".into(),
                ));
            }
            ProblemData {
                groups: vec![GroupData { xs: vec![e.x.clone()] }],
            }
        }
        Mode::DirectedShared => {
            let xp = e.x_prime.as_ref().ok_or_else(|| {
                Error::Shape("directed mode requires the paired SVD embedding".into())
            })?;
            if xp.nrows() != e.x.nrows() {
                return Err(Error::Shape(
                    "shared allocations require square (directed) embeddings".into(),
                ));
            }
            ProblemData {
                groups: vec![GroupData {
                    xs: vec![e.x.clone(), xp.clone()],
                }],
            }
        }
        Mode::DirectedCocluster | Mode::Bipartite => {
            let xp = e.x_prime.as_ref().ok_or_else(|| {
                Error::Shape("co-clustering requires the paired SVD embedding".into())
            })?;
            ProblemData {
                groups: vec![
                    GroupData { xs: vec![e.x.clone()] },
                    GroupData { xs: vec![xp.clone()] },
                ],
            }
        }
    };
    data.validate()?;
    Ok(data)
}

/// K-means initial state: allocations from the leading columns, H = K with
/// each community in its own second-level cluster, d at the scree elbow
/// clipped to the constrained support.
pub fn initial_state(
    data: &ProblemData,
    hp: &HyperParams,
    cfg: &RunConfig,
    spectrum: &[f64],
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Result<ChainState> {
    let k = cfg.init_k.max(1);
    let mut allocs = Vec::new();
    for gd in &data.groups {
        let z = kmeans(&gd.xs[0], k.min(hp.m_cap), k, rng);
        let (v, h) = if hp.second_level {
            ((0..k as u32).collect(), k)
        } else {
            (vec![0u32; k], 1)
        };
        allocs.push((z, k, v, h));
    }
    let mut d = cfg.d_init.unwrap_or_else(|| scree_elbow(spectrum));
    d = d.clamp(1, hp.m_cap);
    let probe = ChainState::from_allocations(data, hp, 1, &allocs)?;
    if hp.d_prior == DPrior::ConstrainedUniform {
        d = d.min(probe.kempty_min());
    }
    ChainState::from_allocations(data, hp, d, &allocs)
}

/// Log joint with d summed out (marginalised mode): data and d-prior terms
/// summed over d = 1..m_cap, plus the allocation and count priors.
pub fn log_joint_marginal_d(state: &ChainState, hp: &HyperParams) -> Result<f64> {
    let mut acc = log_data_profile(state, hp)?.1;
    for gs in &state.groups {
        acc += log_crp_z(&gs.counts(), gs.k, hp.alpha);
        acc += log_prior_k(gs.k, hp);
        if hp.second_level {
            acc += log_prior_v(&gs.v_counts(), gs.k, gs.h, hp.beta);
            acc += log_prior_h(gs.h, gs.k);
        }
    }
    Ok(acc)
}

/// For each d in 1..=m_cap: log p(d | state) + log p(X | d, state); returns
/// the per-d profile and its logsumexp.
pub fn log_data_profile(state: &ChainState, hp: &HyperParams) -> Result<(Vec<f64>, f64)> {
    let ke = state.kempty_min();
    let mut prof = Vec::with_capacity(hp.m_cap);
    for d in 1..=hp.m_cap {
        let mut acc = log_prior_d(d, ke, hp);
        if acc > f64::NEG_INFINITY {
            for gs in &state.groups {
                for block in &gs.blocks {
                    for st in &block.stats {
                        acc += log_marg_left(st, d, hp)?;
                    }
                    if hp.second_level {
                        for agg in &block.agg {
                            acc += log_marg_right(agg, d, hp);
                        }
                    } else {
                        for st in &block.stats {
                            acc += log_marg_right(st, d, hp);
                        }
                    }
                }
            }
        }
        prof.push(acc);
    }
    Ok((prof.clone(), logsumexp(&prof)))
}

/// Collapsed Gibbs scan with d marginalised out. Exact but quadratic in the
/// dimension cap; intended for the small problems where this mode is useful.
fn gibbs_sweep_z_marginal(s: &mut Sampler<'_>, g: usize) -> Result<()> {
    let n = s.data.groups[g].n();
    let alpha_over_k = s.hp.alpha / s.state.groups[g].k as f64;
    let m = s.data.m();
    let mut row = vec![0.0; m];
    for i in 0..n {
        let old = s.state.groups[g].z[i] as usize;
        // detach by hand (the cached-score path is not useful here)
        {
            let gs = &mut s.state.groups[g];
            let h = gs.v[old] as usize;
            for (b, block) in gs.blocks.iter_mut().enumerate() {
                s.data.groups[g].row_into(b, i, &mut row);
                block.stats[old].remove_row(&row);
                if s.hp.second_level {
                    block.agg[h].remove_row(&row);
                }
            }
        }
        let k_total = s.state.groups[g].k;
        let mut logw = vec![f64::NEG_INFINITY; k_total];
        for k in 0..k_total {
            // hypothetical assignment
            {
                let gs = &mut s.state.groups[g];
                let h = gs.v[k] as usize;
                for (b, block) in gs.blocks.iter_mut().enumerate() {
                    s.data.groups[g].row_into(b, i, &mut row);
                    block.stats[k].add_row(&row);
                    if s.hp.second_level {
                        block.agg[h].add_row(&row);
                    }
                }
            }
            let nk_minus = s.state.groups[g].cluster_size(k) - 1;
            let (_, lse) = log_data_profile(&s.state, s.hp)?;
            logw[k] = (nk_minus as f64 + alpha_over_k).ln() + lse;
            {
                let gs = &mut s.state.groups[g];
                let h = gs.v[k] as usize;
                for (b, block) in gs.blocks.iter_mut().enumerate() {
                    s.data.groups[g].row_into(b, i, &mut row);
                    block.stats[k].remove_row(&row);
                    if s.hp.second_level {
                        block.agg[h].remove_row(&row);
                    }
                }
            }
        }
        let pick = sample_log_weights(&mut s.rng, &logw);
        {
            let gs = &mut s.state.groups[g];
            let h = gs.v[pick] as usize;
            for (b, block) in gs.blocks.iter_mut().enumerate() {
                s.data.groups[g].row_into(b, i, &mut row);
                block.stats[pick].add_row(&row);
                if s.hp.second_level {
                    block.agg[h].add_row(&row);
                }
            }
            gs.z[i] = pick as u32;
        }
        s.counters.gibbs_z_total += 1;
        if pick != old {
            s.counters.gibbs_z_moved += 1;
        }
    }
    Ok(())
}

/// Gibbs scan of v with d marginalised out.
fn gibbs_sweep_v_marginal(s: &mut Sampler<'_>, g: usize) -> Result<()> {
    if !s.hp.second_level || s.state.groups[g].h < 2 {
        return Ok(());
    }
    let k_total = s.state.groups[g].k;
    let h_total = s.state.groups[g].h;
    let beta_over_h = s.hp.beta / h_total as f64;
    for k in 0..k_total {
        let old = s.state.groups[g].v[k] as usize;
        {
            let gs = &mut s.state.groups[g];
            for block in gs.blocks.iter_mut() {
                let st = block.stats[k].clone();
                block.agg[old].remove_cluster(&st);
            }
        }
        let mut vcm = s.state.groups[g].v_counts();
        vcm[old] -= 1;
        let mut logw = vec![f64::NEG_INFINITY; h_total];
        for h in 0..h_total {
            {
                let gs = &mut s.state.groups[g];
                for block in gs.blocks.iter_mut() {
                    let st = block.stats[k].clone();
                    block.agg[h].add_cluster(&st);
                }
                gs.v[k] = h as u32;
            }
            let (_, lse) = log_data_profile(&s.state, s.hp)?;
            logw[h] = (vcm[h] as f64 + beta_over_h).ln() + lse;
            {
                let gs = &mut s.state.groups[g];
                for block in gs.blocks.iter_mut() {
                    let st = block.stats[k].clone();
                    block.agg[h].remove_cluster(&st);
                }
            }
        }
        let pick = sample_log_weights(&mut s.rng, &logw);
        {
            let gs = &mut s.state.groups[g];
            for block in gs.blocks.iter_mut() {
                let st = block.stats[k].clone();
                block.agg[pick].add_cluster(&st);
            }
            gs.v[k] = pick as u32;
        }
        s.counters.gibbs_v_total += 1;
        if pick != old {
            s.counters.gibbs_v_moved += 1;
        }
    }
    Ok(())
}

/// Run one chain to completion.
pub fn run_chain(
    data: &ProblemData,
    hp: &HyperParams,
    cfg: &RunConfig,
    sched: &MoveSchedule,
    spectrum: &[f64],
    chain: usize,
) -> Result<Trace> {
    hp.validate()?;
    sched.validate(cfg.marginalize_d)?;
    data.validate()?;
    let mut rng = stream_rng(cfg.seed, chain as u64 + 1);
    let state = initial_state(data, hp, cfg, spectrum, &mut rng)?;
    let n_groups = state.groups.len();
    let mut s = Sampler::new(data, hp, state, rng);

    let mut samples = Vec::new();
    let mut allocs = Vec::new();
    for it in 0..sched.iters {
        for _ in 0..sched.gibbs_z {
            for g in 0..n_groups {
                if cfg.marginalize_d {
                    gibbs_sweep_z_marginal(&mut s, g)?;
                } else {
                    s.gibbs_sweep_z(g)?;
                }
            }
        }
        if !cfg.marginalize_d {
            for _ in 0..sched.split_merge {
                for g in 0..n_groups {
                    s.split_merge(g)?;
                }
            }
        }
        for _ in 0..sched.empty_community {
            for g in 0..n_groups {
                s.empty_community(g)?;
            }
        }
        if !cfg.marginalize_d {
            for _ in 0..sched.dim_change {
                s.dim_change()?;
            }
        }
        if hp.second_level {
            for _ in 0..sched.gibbs_v {
                for g in 0..n_groups {
                    if cfg.marginalize_d {
                        gibbs_sweep_v_marginal(&mut s, g)?;
                    } else {
                        s.gibbs_sweep_v(g)?;
                    }
                }
            }
            if !cfg.marginalize_d {
                for _ in 0..sched.split_merge_v {
                    for g in 0..n_groups {
                        s.split_merge_v(g)?;
                    }
                }
            }
            for _ in 0..sched.empty_v {
                for g in 0..n_groups {
                    s.empty_v(g)?;
                }
            }
        }

        debug_assert!(
            hp.d_prior != DPrior::ConstrainedUniform || s.state.d <= s.state.kempty_min(),
            "constrained-mode invariant broken at iteration {it}: d={} K_empty={}",
            s.state.d,
            s.state.kempty_min()
        );

        if it >= sched.burnin && (it - sched.burnin) % sched.thin == 0 {
            let (d_rec, lj) = if cfg.marginalize_d {
                let (prof, _) = log_data_profile(&s.state, hp)?;
                let d = sample_log_weights(&mut s.rng, &prof) + 1;
                (d, log_joint_marginal_d(&s.state, hp)?)
            } else {
                (s.state.d, s.state.log_joint(data, hp)?)
            };
            samples.push(TraceSample {
                iter: it,
                d: d_rec,
                groups: s
                    .state
                    .groups
                    .iter()
                    .map(|gs| GroupSample {
                        k: gs.k,
                        kempty: gs.kempty(),
                        h: gs.h,
                        hempty: gs.hempty(),
                    })
                    .collect(),
                log_joint: lj,
            });
            allocs.push(s.state.groups.iter().map(|gs| gs.z.clone()).collect());
        }
    }

    Ok(Trace {
        chain,
        seed: cfg.seed,
        samples,
        allocs,
        accept: s.counters.rates(),
        n_groups,
    })
}

/// Everything a run produces: per-chain traces plus the resolved
/// hyperparameters actually used.
pub struct RunOutput {
    pub traces: Vec<Trace>,
    pub hp: HyperParams,
}

/// Run `cfg.n_chains` chains over an embedding, optionally in parallel.
/// Results depend only on (seed, chain index), never on thread scheduling.
pub fn run(
    embedding: &Embedding,
    base_hp: &HyperParams,
    cfg: &RunConfig,
    sched: &MoveSchedule,
) -> Result<RunOutput> {
    let data = problem_from_embedding(embedding, cfg.mode)?;
    let mut hp = base_hp.clone();
    if cfg.calibrate {
        let mut rng = stream_rng(cfg.seed, 0);
        let k = cfg.init_k.max(1);
        let mut zs: Vec<Vec<u32>> = Vec::new();
        let mut xs: Vec<&nalgebra::DMatrix<f64>> = Vec::new();
        for gd in &data.groups {
            zs.push(kmeans(&gd.xs[0], k.min(hp.m_cap), k, &mut rng));
            for x in &gd.xs {
                xs.push(x);
            }
        }
        // shared-mode groups contribute both blocks under the same z
        let mut z_refs: Vec<&[u32]> = Vec::new();
        let mut zi = 0usize;
        for gd in &data.groups {
            for _ in &gd.xs {
                z_refs.push(&zs[zi]);
            }
            zi += 1;
        }
        hp.calibrate(&xs, &z_refs, k);
    }
    hp.validate()?;

    let threads = cfg
        .threads
        .unwrap_or_else(rayon::current_num_threads)
        .clamp(1, cfg.n_chains.max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let traces: Result<Vec<Trace>> = pool.install(|| {
        (0..cfg.n_chains)
            .into_par_iter()
            .map(|c| run_chain(&data, &hp, cfg, sched, &embedding.spectrum, c))
            .collect()
    });
    Ok(RunOutput {
        traces: traces?,
        hp,
    })
}

/// Write the thinned trace CSV. Co-clustering runs add the primed columns.
pub fn write_trace_csv(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("iter,d,K,K_empty_excl,H,H_empty_excl");
    if trace.n_groups > 1 {
        header.push_str(",K_prime,K_prime_empty_excl,H_prime,H_prime_empty_excl");
    }
    header.push_str(",log_joint");
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for s in &trace.samples {
        let g0 = &s.groups[0];
        let mut line = format!(
            "{},{},{},{},{},{}",
            s.iter, s.d, g0.k, g0.kempty, g0.h, g0.hempty
        );
        if trace.n_groups > 1 {
            let g1 = &s.groups[1];
            line.push_str(&format!(",{},{},{},{}", g1.k, g1.kempty, g1.h, g1.hempty));
        }
        line.push(',');
        line.push_str(&fmt_g17(s.log_joint));
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write thinned allocations for one group: `iter,z_0..z_{n-1}`.
pub fn write_allocations_csv(trace: &Trace, group: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let n = trace.allocs.first().map(|a| a[group].len()).unwrap_or(0);
    let mut header = String::from("iter");
    for i in 0..n {
        header.push_str(&format!(",z_{i}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for (s, a) in trace.samples.iter().zip(trace.allocs.iter()) {
        let mut line = s.iter.to_string();
        for z in &a[group] {
            line.push(',');
            line.push_str(&z.to_string());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a trace CSV back; returns the samples and the group count.
pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<(Vec<TraceSample>, usize)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "empty trace file".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let n_groups = if header.contains("K_prime") { 2 } else { 1 };
    let mut samples = Vec::new();
    for (ix, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let want = 7 + if n_groups > 1 { 4 } else { 0 };
        if f.len() != want {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: ix + 2,
                msg: format!("expected {want} columns, found {}", f.len()),
            });
        }
        let parse_usize = |s: &str| -> Result<usize> {
            s.trim().parse::<usize>().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: ix + 2,
                msg: e.to_string(),
            })
        };
        let mut groups = vec![GroupSample {
            k: parse_usize(f[2])?,
            kempty: parse_usize(f[3])?,
            h: parse_usize(f[4])?,
            hempty: parse_usize(f[5])?,
        }];
        if n_groups > 1 {
            groups.push(GroupSample {
                k: parse_usize(f[6])?,
                kempty: parse_usize(f[7])?,
                h: parse_usize(f[8])?,
                hempty: parse_usize(f[9])?,
            });
        }
        samples.push(TraceSample {
            iter: parse_usize(f[0])? as u64,
            d: parse_usize(f[1])?,
            groups,
            log_joint: f[f.len() - 1].trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: ix + 2,
                msg: e.to_string(),
            })?,
        });
    }
    Ok((samples, n_groups))
}

/// Rebuild a `Trace` from its written CSV parts.
pub fn trace_from_files(
    trace_path: impl AsRef<Path>,
    alloc_path: impl AsRef<Path>,
    alloc_prime_path: Option<&Path>,
    chain: usize,
) -> Result<Trace> {
    let (samples, n_groups) = read_trace_csv(trace_path)?;
    let a0 = read_allocations_csv(alloc_path)?;
    if a0.len() != samples.len() {
        return Err(Error::Shape(
            "trace and allocation files have different sample counts".into(),
        ));
    }
    let a1 = match alloc_prime_path {
        Some(p) => Some(read_allocations_csv(p)?),
        None => None,
    };
    let allocs: Vec<Vec<Vec<u32>>> = a0
        .into_iter()
        .enumerate()
        .map(|(i, z0)| {
            let mut row = vec![z0];
            if let Some(a1) = &a1 {
                row.push(a1[i].clone());
            }
            row
        })
        .collect();
    Ok(Trace {
        chain,
        seed: 0,
        samples,
        allocs,
        accept: Vec::new(),
        n_groups,
    })
}

/// Read an allocation CSV back into thinned allocation rows.
pub fn read_allocations_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (ix, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if ix == 0 || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        fields.next(); // iter
        let row: std::result::Result<Vec<u32>, _> =
            fields.map(|f| f.trim().parse::<u32>()).collect();
        out.push(row.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: ix + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Acceptance-rate summary as JSON.
pub fn acceptance_json(trace: &Trace) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (name, acc, total) in &trace.accept {
        map.insert(
            name.clone(),
            serde_json::json!({
                "accepted": acc,
                "proposed": total,
                "rate": if *total > 0 { *acc as f64 / *total as f64 } else { 0.0 },
            }),
        );
    }
    serde_json::Value::Object(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbedSource;
    use nalgebra::DMatrix;

    fn toy_embedding(n: usize, m: usize, seed: u64) -> Embedding {
        let mut rng = stream_rng(seed, 7);
        use rand::Rng;
        let x = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() - 0.5);
        Embedding {
            source: EmbedSource::Ase,
            m,
            x,
            x_prime: None,
            spectrum: (0..m).map(|j| 1.0 / (j + 1) as f64).collect(),
            retained: None,
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let e = toy_embedding(12, 4, 3);
        let hp = HyperParams::uninformative(4);
        let mut cfg = RunConfig::new(42, Mode::Undirected);
        cfg.init_k = 3;
        cfg.calibrate = true;
        let sched = MoveSchedule::with_iters(200, 50, 5);
        let a = run(&e, &hp, &cfg, &sched).unwrap();
        let b = run(&e, &hp, &cfg, &sched).unwrap();
        assert_eq!(a.traces[0].samples.len(), b.traces[0].samples.len());
        for (sa, sb) in a.traces[0].samples.iter().zip(b.traces[0].samples.iter()) {
            assert_eq!(sa.d, sb.d);
            assert_eq!(sa.groups[0].k, sb.groups[0].k);
            assert_eq!(sa.log_joint.to_bits(), sb.log_joint.to_bits());
        }
        assert_eq!(a.traces[0].allocs, b.traces[0].allocs);
    }

    #[test]
    fn chains_differ_but_reproduce() {
        let e = toy_embedding(12, 4, 9);
        let hp = HyperParams::uninformative(4);
        let mut cfg = RunConfig::new(7, Mode::Undirected);
        cfg.init_k = 3;
        cfg.n_chains = 3;
        let sched = MoveSchedule::with_iters(150, 50, 5);
        let out = run(&e, &hp, &cfg, &sched).unwrap();
        assert_eq!(out.traces.len(), 3);
        let a: Vec<_> = out.traces[0].samples.iter().map(|s| s.log_joint).collect();
        let b: Vec<_> = out.traces[1].samples.iter().map(|s| s.log_joint).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn single_node_single_cluster_is_stable() {
        let e = toy_embedding(1, 2, 1);
        let hp = HyperParams::uninformative(2);
        let mut cfg = RunConfig::new(5, Mode::Undirected);
        cfg.init_k = 1;
        let sched = MoveSchedule::with_iters(50, 10, 1);
        let out = run(&e, &hp, &cfg, &sched).unwrap();
        for (s, a) in out.traces[0]
            .samples
            .iter()
            .zip(out.traces[0].allocs.iter())
        {
            assert_eq!(a[0], vec![0u32]);
            assert_eq!(s.d, 1);
        }
    }

    #[test]
    fn state_stays_consistent_through_moves() {
        let e = toy_embedding(20, 5, 13);
        let mut hp = HyperParams::uninformative(5);
        hp.second_level = true;
        let mut cfg = RunConfig::new(11, Mode::Undirected);
        cfg.init_k = 4;
        let _sched = MoveSchedule::with_iters(120, 20, 10);
        let data = problem_from_embedding(&e, Mode::Undirected).unwrap();
        let mut rng = stream_rng(11, 1);
        let state = initial_state(&data, &hp, &cfg, &e.spectrum, &mut rng).unwrap();
        let mut s = Sampler::new(&data, &hp, state, rng);
        for it in 0..60u64 {
            s.gibbs_sweep_z(0).unwrap();
            s.split_merge(0).unwrap();
            s.empty_community(0).unwrap();
            s.dim_change().unwrap();
            s.gibbs_sweep_v(0).unwrap();
            s.split_merge_v(0).unwrap();
            s.empty_v(0).unwrap();
            if it % 10 == 0 {
                s.state.check_consistency(&data, &hp, 1e-8).unwrap();
            }
        }
        s.state.check_consistency(&data, &hp, 1e-8).unwrap();
    }
}
