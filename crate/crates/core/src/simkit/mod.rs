//! Moving-wheel simulation over a discretely supported rail.
//!
//! The rail is a clamped Euler-Bernoulli beam meshed with two-node Hermite
//! elements. Each sleeper is a lumped mass tied to its rail node by a
//! railpad spring-damper and to ground by a ballast spring-damper. The wheel
//! is a rigid mass on a linear contact spring that rides along the rail at
//! constant speed; the coupled system is integrated with the average
//! acceleration Newmark scheme.

mod band;

pub use band::{BandCholesky, BandMatrix};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::StiffnessRanges;
use crate::error::{Error, Result};

pub const NEWMARK_BETA: f64 = 0.25;
pub const NEWMARK_GAMMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackModelConfig {
    pub n_core_sleepers: usize,
    pub n_buffer_sleepers: usize,
    /// m
    pub sleeper_spacing: f64,
    /// N·m²
    pub rail_ei: f64,
    /// kg/m
    pub rail_mass_per_length: f64,
    /// kg
    pub sleeper_mass: f64,
    /// N·s/m
    pub railpad_damping: f64,
    /// N·s/m
    pub ballast_damping: f64,
    /// kg
    pub wheel_mass: f64,
    /// N
    pub wheel_load: f64,
    /// N/m
    pub contact_stiffness: f64,
    /// m/s
    pub speed: f64,
    pub elements_per_span: usize,
    pub samples_per_span: usize,
    /// Spans travelled before recording starts, letting the start-up
    /// transient decay.
    pub lead_in_spans: usize,
    /// Integrator steps per output sample.
    pub substeps: usize,
}

impl Default for TrackModelConfig {
    fn default() -> Self {
        TrackModelConfig {
            n_core_sleepers: 10,
            n_buffer_sleepers: 20,
            sleeper_spacing: 0.6,
            rail_ei: 6.42e6,
            rail_mass_per_length: 60.0,
            sleeper_mass: 140.0,
            railpad_damping: 4.0e4,
            ballast_damping: 5.0e4,
            wheel_mass: 900.0,
            wheel_load: 1.0e5,
            contact_stiffness: 1.2e9,
            speed: 65.0 / 3.6,
            elements_per_span: 8,
            samples_per_span: 866,
            lead_in_spans: 6,
            substeps: 1,
        }
    }
}

impl TrackModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sleeper_spacing", self.sleeper_spacing),
            ("rail_ei", self.rail_ei),
            ("rail_mass_per_length", self.rail_mass_per_length),
            ("sleeper_mass", self.sleeper_mass),
            ("railpad_damping", self.railpad_damping),
            ("ballast_damping", self.ballast_damping),
            ("wheel_mass", self.wheel_mass),
            ("wheel_load", self.wheel_load),
            ("contact_stiffness", self.contact_stiffness),
            ("speed", self.speed),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_core_sleepers == 0 || self.elements_per_span == 0 || self.samples_per_span == 0 || self.substeps == 0 {
            return Err(Error::Config("sleeper, element, sample and substep counts must be positive".into()));
        }
        if self.n_buffer_sleepers < 2 {
            return Err(Error::Config(format!(
                "at least 2 buffer sleepers per side required, got {}",
                self.n_buffer_sleepers
            )));
        }
        if self.lead_in_spans + 1 > self.n_buffer_sleepers {
            return Err(Error::Config(format!(
                "lead-in of {} spans does not fit in {} buffer sleepers",
                self.lead_in_spans, self.n_buffer_sleepers
            )));
        }
        Ok(())
    }

    pub fn total_sleepers(&self) -> usize {
        self.n_core_sleepers + 2 * self.n_buffer_sleepers
    }

    /// Hz
    pub fn sample_rate(&self) -> f64 {
        self.speed * self.samples_per_span as f64 / self.sleeper_spacing
    }

    pub fn signal_len(&self) -> usize {
        self.n_core_sleepers * self.samples_per_span
    }

    /// Position of core sleeper `i` along the rail.
    pub fn core_sleeper_position(&self, i: usize) -> f64 {
        (self.n_buffer_sleepers + i) as f64 * self.sleeper_spacing
    }

    /// Wheel position of the first recorded sample, half a span before the
    /// first core sleeper.
    pub fn record_start(&self) -> f64 {
        (self.n_buffer_sleepers as f64 - 0.5) * self.sleeper_spacing
    }

    pub fn sleeper_center_indices(&self) -> Vec<usize> {
        let sps = self.samples_per_span;
        (0..self.n_core_sleepers).map(|i| i * sps + sps / 2).collect()
    }
}

/// Per-sleeper support stiffness of the core segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackProfile {
    /// N/m
    pub kp: Vec<f64>,
    /// N/m
    pub kb: Vec<f64>,
}

impl TrackProfile {
    pub fn uniform(n: usize, kp: f64, kb: f64) -> Self {
        TrackProfile {
            kp: vec![kp; n],
            kb: vec![kb; n],
        }
    }

    pub fn nominal(n: usize) -> Self {
        let r = StiffnessRanges::default();
        Self::uniform(n, r.r1.kp.mid(), r.r1.kb.mid())
    }

    pub fn len(&self) -> usize {
        self.kp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kp.is_empty()
    }

    pub fn validate(&self, n_core: usize) -> Result<()> {
        if self.kp.len() != n_core || self.kb.len() != n_core {
            return Err(Error::Config(format!(
                "profile has {}/{} sleepers, expected {n_core}",
                self.kp.len(),
                self.kb.len()
            )));
        }
        let r = StiffnessRanges::default();
        for &v in &self.kp {
            if !(r.r2.kp.lo..=r.r1.kp.hi).contains(&v) {
                return Err(Error::Range { what: "railpad stiffness", value: v, min: r.r2.kp.lo, max: r.r1.kp.hi });
            }
        }
        for &v in &self.kb {
            if !(r.r2.kb.lo..=r.r1.kb.hi).contains(&v) {
                return Err(Error::Range { what: "ballast stiffness", value: v, min: r.r2.kb.lo, max: r.r1.kb.hi });
            }
        }
        Ok(())
    }
}

/// One recorded traversal of the core segment.
#[derive(Debug, Clone, PartialEq)]
pub struct AbaRecord {
    /// m/s², `n_core_sleepers · samples_per_span` samples
    pub signal: Vec<f64>,
    pub sample_rate: f64,
    pub sleeper_centers: Vec<usize>,
    pub profile: TrackProfile,
    pub noise_ratio: f64,
    pub seed: u64,
}

/// Equation numbering: per rail node `w, θ` (omitted at the clamped ends),
/// followed by the sleeper DOF when a sleeper sits on that node.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub n_dofs: usize,
    pub n_nodes: usize,
    pub element_length: f64,
    /// `(w, θ)` equation indices per node.
    pub rail: Vec<Option<(usize, usize)>>,
    /// Sleeper DOF per sleeper, in track order.
    pub sleeper: Vec<usize>,
    pub elements_per_span: usize,
}

impl DofMap {
    fn new(config: &TrackModelConfig) -> Self {
        let ne = config.elements_per_span;
        let n_nodes = (config.total_sleepers() - 1) * ne + 1;
        let mut rail = Vec::with_capacity(n_nodes);
        let mut sleeper = Vec::with_capacity(config.total_sleepers());
        let mut next = 0;
        for j in 0..n_nodes {
            if j == 0 || j == n_nodes - 1 {
                rail.push(None);
            } else {
                rail.push(Some((next, next + 1)));
                next += 2;
            }
            if j % ne == 0 {
                sleeper.push(next);
                next += 1;
            }
        }
        DofMap {
            n_dofs: next,
            n_nodes,
            element_length: config.sleeper_spacing / ne as f64,
            rail,
            sleeper,
            elements_per_span: ne,
        }
    }

    fn element_dofs(&self, e: usize) -> [Option<usize>; 4] {
        let a = self.rail[e];
        let b = self.rail[e + 1];
        [a.map(|d| d.0), a.map(|d| d.1), b.map(|d| d.0), b.map(|d| d.1)]
    }

    fn half_bandwidth(&self) -> usize {
        let mut bw = 0;
        for e in 0..self.n_nodes - 1 {
            let d: Vec<usize> = self.element_dofs(e).iter().flatten().copied().collect();
            for &i in &d {
                for &j in &d {
                    bw = bw.max(i.abs_diff(j));
                }
            }
        }
        for (s, &ds) in self.sleeper.iter().enumerate() {
            if let Some((w, _)) = self.rail[s * self.elements_per_span] {
                bw = bw.max(w.abs_diff(ds));
            }
        }
        bw
    }

    /// Hermite interpolation of rail deflection at `x`: the equation
    /// indices and weights of the contributing DOFs.
    /// Rail element containing `x`.
    pub fn element_of(&self, x: f64) -> usize {
        ((x / self.element_length).floor() as usize).min(self.n_nodes - 2)
    }

    pub fn interpolation(&self, x: f64) -> (Vec<usize>, Vec<f64>) {
        let le = self.element_length;
        let e = self.element_of(x);
        let xi = (x - e as f64 * le) / le;
        let (x2, x3) = (xi * xi, xi * xi * xi);
        let n = [
            1.0 - 3.0 * x2 + 2.0 * x3,
            le * (xi - 2.0 * x2 + x3),
            3.0 * x2 - 2.0 * x3,
            le * (x3 - x2),
        ];
        let mut idx = Vec::with_capacity(4);
        let mut w = Vec::with_capacity(4);
        for (d, v) in self.element_dofs(e).into_iter().zip(n) {
            if let Some(d) = d {
                idx.push(d);
                w.push(v);
            }
        }
        (idx, w)
    }
}

/// Assembled track matrices (wheel excluded).
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub mass: BandMatrix,
    pub damping: BandMatrix,
    pub stiffness: BandMatrix,
    pub dofs: DofMap,
}

fn sleeper_supports(config: &TrackModelConfig, profile: &TrackProfile) -> Vec<(f64, f64)> {
    let nominal = TrackProfile::nominal(1);
    let nb = config.n_buffer_sleepers;
    (0..config.total_sleepers())
        .map(|s| {
            if s >= nb && s < nb + config.n_core_sleepers {
                (profile.kp[s - nb], profile.kb[s - nb])
            } else {
                (nominal.kp[0], nominal.kb[0])
            }
        })
        .collect()
}

pub fn assemble(config: &TrackModelConfig, profile: &TrackProfile) -> Result<SystemMatrices> {
    config.validate()?;
    profile.validate(config.n_core_sleepers)?;
    let dofs = DofMap::new(config);
    let bw = dofs.half_bandwidth();
    let n = dofs.n_dofs;
    let mut mass = BandMatrix::zeros(n, bw);
    let mut damping = BandMatrix::zeros(n, bw);
    let mut stiffness = BandMatrix::zeros(n, bw);

    let l = dofs.element_length;
    let ei = config.rail_ei / (l * l * l);
    let ke = [
        [12.0, 6.0 * l, -12.0, 6.0 * l],
        [6.0 * l, 4.0 * l * l, -6.0 * l, 2.0 * l * l],
        [-12.0, -6.0 * l, 12.0, -6.0 * l],
        [6.0 * l, 2.0 * l * l, -6.0 * l, 4.0 * l * l],
    ];
    let mm = config.rail_mass_per_length * l / 420.0;
    let me = [
        [156.0, 22.0 * l, 54.0, -13.0 * l],
        [22.0 * l, 4.0 * l * l, 13.0 * l, -3.0 * l * l],
        [54.0, 13.0 * l, 156.0, -22.0 * l],
        [-13.0 * l, -3.0 * l * l, -22.0 * l, 4.0 * l * l],
    ];
    for e in 0..dofs.n_nodes - 1 {
        let d = dofs.element_dofs(e);
        for a in 0..4 {
            for b in 0..=a {
                if let (Some(i), Some(j)) = (d[a], d[b]) {
                    stiffness.add(i, j, ei * ke[a][b]);
                    mass.add(i, j, mm * me[a][b]);
                }
            }
        }
    }

    let supports = sleeper_supports(config, profile);
    for (s, &(kp, kb)) in supports.iter().enumerate() {
        let ds = dofs.sleeper[s];
        mass.add(ds, ds, config.sleeper_mass);
        stiffness.add(ds, ds, kp + kb);
        damping.add(ds, ds, config.railpad_damping + config.ballast_damping);
        if let Some((w, _)) = dofs.rail[s * dofs.elements_per_span] {
            stiffness.add(w, w, kp);
            stiffness.add(w, ds, -kp);
            damping.add(w, w, config.railpad_damping);
            damping.add(w, ds, -config.railpad_damping);
        }
    }
    Ok(SystemMatrices {
        mass,
        damping,
        stiffness,
        dofs,
    })
}

/// Rail deflection at `x` under a stationary point load `load`.
pub fn deflection_under_load(sys: &SystemMatrices, x: f64, load: f64) -> Result<f64> {
    let chol = sys
        .stiffness
        .cholesky()
        .map_err(|e| Error::Config(format!("singular track stiffness: {e}")))?;
    let (idx, w) = sys.dofs.interpolation(x);
    let vals: Vec<f64> = w.iter().map(|v| v * load).collect();
    let mut u = vec![0.0; sys.dofs.n_dofs];
    chol.solve_sparse(&idx, &vals, &mut u);
    Ok(idx.iter().zip(&w).map(|(&i, &v)| v * u[i]).sum())
}

/// Rail deflection under the static wheel load at the middle of the core
/// segment.
pub fn static_deflection(config: &TrackModelConfig, profile: &TrackProfile) -> Result<f64> {
    let sys = assemble(config, profile)?;
    let center = 0.5 * (config.core_sleeper_position(0) + config.core_sleeper_position(config.n_core_sleepers - 1));
    deflection_under_load(&sys, center, config.wheel_load)
}

/// Track plus wheel state advanced by Newmark steps.
pub struct Integrator {
    sys: SystemMatrices,
    effective: BandCholesky,
    dt: f64,
    wheel_mass: f64,
    load: f64,
    kc: f64,
    pub d: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub z: f64,
    pub zv: f64,
    pub za: f64,
    position: f64,
    coupled: bool,
    /// Element under the wheel and `A⁻¹·e_j` for each of its DOFs, where
    /// `A` is the effective Newmark matrix.
    contact: Option<(usize, Vec<usize>, Vec<Vec<f64>>)>,
    scratch_r: Vec<f64>,
    scratch_t: Vec<f64>,
    scratch_u: Vec<f64>,
}

impl Integrator {
    /// Static equilibrium with the wheel resting at `position`.
    pub fn at_rest(config: &TrackModelConfig, profile: &TrackProfile, position: f64, dt: f64) -> Result<Self> {
        let sys = assemble(config, profile)?;
        let n = sys.dofs.n_dofs;
        let a0 = 1.0 / (NEWMARK_BETA * dt * dt);
        let a1 = NEWMARK_GAMMA / (NEWMARK_BETA * dt);
        let eff = sys.stiffness.axpy(a0, &sys.mass).axpy(a1, &sys.damping);
        let effective = eff.cholesky()?;
        let static_chol = sys.stiffness.cholesky()?;
        let (idx, w) = sys.dofs.interpolation(position);
        let vals: Vec<f64> = w.iter().map(|v| v * config.wheel_load).collect();
        let mut d = vec![0.0; n];
        static_chol.solve_sparse(&idx, &vals, &mut d);
        let rail: f64 = idx.iter().zip(&w).map(|(&i, &v)| v * d[i]).sum();
        Ok(Integrator {
            sys,
            effective,
            dt,
            wheel_mass: config.wheel_mass,
            load: config.wheel_load,
            kc: config.contact_stiffness,
            d,
            v: vec![0.0; n],
            a: vec![0.0; n],
            z: config.wheel_load / config.contact_stiffness + rail,
            zv: 0.0,
            za: 0.0,
            position,
            coupled: true,
            contact: None,
            scratch_r: vec![0.0; n],
            scratch_t: vec![0.0; n],
            scratch_u: vec![0.0; n],
        })
    }

    pub fn position(&self) -> f64 {
        self.position
    }

    /// Removes the wheel; subsequent steps integrate the free track.
    pub fn release_wheel(&mut self) {
        self.coupled = false;
    }

    /// Kinetic plus strain energy of the track, and of the wheel and
    /// contact spring while coupled.
    pub fn energy(&self) -> f64 {
        let n = self.d.len();
        let mut tmp = vec![0.0; n];
        self.sys.mass.matvec(&self.v, &mut tmp);
        let kin: f64 = tmp.iter().zip(&self.v).map(|(a, b)| a * b).sum();
        self.sys.stiffness.matvec(&self.d, &mut tmp);
        let pot: f64 = tmp.iter().zip(&self.d).map(|(a, b)| a * b).sum();
        let mut e = 0.5 * (kin + pot);
        if self.coupled {
            let (idx, w) = self.sys.dofs.interpolation(self.position);
            let rail: f64 = idx.iter().zip(&w).map(|(&i, &v)| v * self.d[i]).sum();
            let comp = self.z - rail;
            e += 0.5 * self.wheel_mass * self.zv * self.zv + 0.5 * self.kc * comp * comp;
        }
        e
    }

    /// Advances one step with the wheel moved to `position`.
    pub fn step(&mut self, position: f64) {
        let dt = self.dt;
        let b = NEWMARK_BETA;
        let g = NEWMARK_GAMMA;
        let a0 = 1.0 / (b * dt * dt);
        let a1 = g / (b * dt);
        let a2 = 1.0 / (b * dt);
        let a3 = 1.0 / (2.0 * b) - 1.0;
        let a4 = g / b - 1.0;
        let a5 = dt / 2.0 * (g / b - 2.0);
        let n = self.d.len();

        for i in 0..n {
            self.scratch_t[i] = a0 * self.d[i] + a2 * self.v[i] + a3 * self.a[i];
            self.scratch_u[i] = a1 * self.d[i] + a4 * self.v[i] + a5 * self.a[i];
        }
        self.sys
            .mass
            .matvec_pair(&self.sys.damping, &self.scratch_t, &self.scratch_u, &mut self.scratch_r);

        let mut new_z = self.z;
        if self.coupled {
            let (idx, w) = self.sys.dofs.interpolation(position);
            let e = self.sys.dofs.element_of(position);
            if self.contact.as_ref().map(|c| c.0) != Some(e) {
                let cols = idx
                    .iter()
                    .map(|&j| {
                        let mut col = vec![0.0; n];
                        self.effective.solve_sparse(&[j], &[1.0], &mut col);
                        col
                    })
                    .collect();
                self.contact = Some((e, idx.clone(), cols));
            }
            let (_, cidx, cols) = self.contact.as_ref().expect("contact columns cached above");
            debug_assert_eq!(cidx, &idx);
            let rz = self.load + self.wheel_mass * (a0 * self.z + a2 * self.zv + a3 * self.za);
            let dz = self.kc + a0 * self.wheel_mass;
            let alpha = self.kc * a0 * self.wheel_mass / dz;
            for (&i, &v) in idx.iter().zip(&w) {
                self.scratch_r[i] += self.kc * rz / dz * v;
            }
            self.effective.solve_in_place(&mut self.scratch_r);
            // Sherman-Morrison for the wheel's rank-one stiffness, with
            // q = Σ_k w_k·A⁻¹e_k.
            let nty: f64 = idx.iter().zip(&w).map(|(&i, &v)| v * self.scratch_r[i]).sum();
            let ntq: f64 = w
                .iter()
                .zip(cols)
                .map(|(&wk, col)| wk * idx.iter().zip(&w).map(|(&i, &v)| v * col[i]).sum::<f64>())
                .sum();
            let k = alpha * nty / (1.0 + alpha * ntq);
            for (&wk, col) in w.iter().zip(cols) {
                let s = k * wk;
                for (r, c) in self.scratch_r.iter_mut().zip(col) {
                    *r -= s * c;
                }
            }
            let ntu: f64 = idx.iter().zip(&w).map(|(&i, &v)| v * self.scratch_r[i]).sum();
            new_z = (rz + self.kc * ntu) / dz;
        } else {
            self.effective.solve_in_place(&mut self.scratch_r);
        }

        for i in 0..n {
            let an = a0 * (self.scratch_r[i] - self.d[i]) - a2 * self.v[i] - a3 * self.a[i];
            self.v[i] += dt * ((1.0 - g) * self.a[i] + g * an);
            self.a[i] = an;
            self.d[i] = self.scratch_r[i];
        }
        let zan = a0 * (new_z - self.z) - a2 * self.zv - a3 * self.za;
        self.zv += dt * ((1.0 - g) * self.za + g * zan);
        self.za = zan;
        self.z = new_z;
        self.position = position;
    }
}

/// Drives the wheel across the core segment and records its vertical
/// acceleration once per `samples_per_span`-th of a span.
pub fn simulate(config: &TrackModelConfig, profile: &TrackProfile) -> Result<AbaRecord> {
    config.validate()?;
    let sps = config.samples_per_span;
    let m = config.substeps;
    let dx = config.sleeper_spacing / sps as f64;
    let dt = dx / config.speed / m as f64;
    let start = config.record_start() - (config.lead_in_spans * sps) as f64 * dx;
    let mut integ = Integrator::at_rest(config, profile, start, dt)?;

    let lead = config.lead_in_spans * sps;
    let n_samples = config.signal_len();
    let mut signal = Vec::with_capacity(n_samples);
    let total = (lead + n_samples - 1) * m;
    if lead == 0 {
        signal.push(integ.za);
    }
    for step in 1..=total {
        let x = start + step as f64 * dx / m as f64;
        integ.step(x);
        if !integ.za.is_finite() || !integ.z.is_finite() {
            return Err(Error::Simulation { step, time: step as f64 * dt });
        }
        if step % m == 0 && step / m >= lead {
            signal.push(integ.za);
        }
    }
    debug_assert_eq!(signal.len(), n_samples);
    Ok(AbaRecord {
        signal,
        sample_rate: config.sample_rate(),
        sleeper_centers: config.sleeper_center_indices(),
        profile: profile.clone(),
        noise_ratio: 0.0,
        seed: 0,
    })
}

/// Wheel acceleration history with the wheel held still at `position`.
pub fn simulate_hold(config: &TrackModelConfig, profile: &TrackProfile, position: f64, steps: usize) -> Result<Vec<f64>> {
    let dt = config.sleeper_spacing / config.samples_per_span as f64 / config.speed;
    let mut integ = Integrator::at_rest(config, profile, position, dt)?;
    let mut out = Vec::with_capacity(steps);
    for step in 1..=steps {
        integ.step(position);
        if !integ.za.is_finite() {
            return Err(Error::Simulation { step, time: step as f64 * dt });
        }
        out.push(integ.za);
    }
    Ok(out)
}

/// Adds white Gaussian noise with variance `ratio · mean(signal²)`.
pub fn add_noise<R: Rng + ?Sized>(signal: &[f64], ratio: f64, rng: &mut R) -> Vec<f64> {
    if ratio <= 0.0 || signal.is_empty() {
        return signal.to_vec();
    }
    let power = signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64;
    let sigma = (ratio * power).sqrt();
    signal
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            v + sigma * n
        })
        .collect()
}
