//! Declarative run description loaded from TOML, with cross-validation of
//! every referenced object and dotted-path overrides.
//!
//! Units: lengths in box units, velocities dimensionless, masses in inverse
//! length with the convention omega(p) = sqrt(p^2 + m^2); times in box
//! units over the unit velocity.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::detectors::Cutoff;
use crate::dynamics::{EvolutionConfig, PotentialSpec, SourceModel};
use crate::error::{Error, Result};
use crate::graf::{RadiusDefaults, RegionSpec};
use crate::grid::{Field, GridSpec, Space};
use crate::kgwave::{make_packet, Envelope, KgWavePacket};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSection {
    pub d: usize,
    pub n: usize,
    pub box_half_length: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PacketSection {
    pub center_x: Vec<f64>,
    pub p_center: Vec<f64>,
    pub p_width: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitialSection {
    /// Symmetrized product of two one-particle packets.
    TwoPacketSymmetrized { packets: Vec<PacketSection> },
    /// Plain product f1(x1) f2(x2).
    TwoPacketProduct { packets: Vec<PacketSection> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SourceSection {
    None,
    PairPotential { potential: PotentialSection },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PotentialSection {
    Gaussian { coupling: f64, width: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutoffSection {
    pub center: Vec<f64>,
    pub inner_radius: f64,
    pub outer_radius: f64,
}

impl CutoffSection {
    pub fn to_cutoff(&self) -> Result<Cutoff> {
        Cutoff::new(self.center.clone(), self.inner_radius, self.outer_radius)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorsSection {
    pub h1: CutoffSection,
    pub h2: CutoffSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrafSection {
    /// Region K: annulus [k_r1, k_r2] minus the diagonal tube of width
    /// k_diag_min.
    pub k_r1: f64,
    pub k_r2: f64,
    pub k_diag_min: f64,
    pub rp: f64,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub r1: Option<f64>,
    #[serde(default)]
    pub r1p: Option<f64>,
    #[serde(default = "default_cells")]
    pub cells_per_mollifier_radius: usize,
}

fn default_cells() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatesSection {
    pub lv_r: f64,
    pub lv_rp: f64,
    pub lv_eps: f64,
    /// run the Appendix-style monitors
    #[serde(default)]
    pub monitors: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitsSection {
    #[serde(default = "default_tol")]
    pub tolerance: f64,
}

fn default_tol() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub grid: GridSection,
    pub mass: f64,
    pub initial: InitialSection,
    pub source: SourceSection,
    #[serde(default)]
    pub detectors: Option<DetectorsSection>,
    #[serde(default)]
    pub graf: Option<GrafSection>,
    #[serde(default)]
    pub estimates: Option<EstimatesSection>,
    #[serde(default)]
    pub limits: Option<LimitsSection>,
    pub evolution: EvolutionConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let sc: Scenario =
            toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Apply `--override key.path=value` entries onto the parsed TOML tree
    /// before deserialization.
    pub fn from_file_with_overrides(
        path: &std::path::Path,
        overrides: &[String],
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{ov}' is not KEY=VALUE")))?;
            let parsed: toml::Value = raw
                .parse::<toml::Value>()
                .unwrap_or(toml::Value::String(raw.to_string()));
            let mut cur = &mut value;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                if i + 1 == parts.len() {
                    match cur {
                        toml::Value::Table(tbl) => {
                            tbl.insert(part.to_string(), parsed.clone());
                        }
                        _ => {
                            return Err(Error::Config(format!(
                                "override path '{key}' does not address a table"
                            )))
                        }
                    }
                } else {
                    cur = match cur {
                        toml::Value::Table(tbl) => tbl
                            .entry(part.to_string())
                            .or_insert(toml::Value::Table(Default::default())),
                        _ => {
                            return Err(Error::Config(format!(
                                "override path '{key}' does not address a table"
                            )))
                        }
                    };
                }
            }
        }
        let sc: Scenario = value
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.d, self.grid.n, self.grid.box_half_length)
    }

    pub fn source_model(&self) -> SourceModel {
        match &self.source {
            SourceSection::None => SourceModel::None,
            SourceSection::PairPotential { potential } => match potential {
                PotentialSection::Gaussian { coupling, width } => {
                    SourceModel::PairPotential(PotentialSpec::Gaussian {
                        coupling: *coupling,
                        width: *width,
                    })
                }
            },
        }
    }

    pub fn packets(&self) -> &[PacketSection] {
        match &self.initial {
            InitialSection::TwoPacketSymmetrized { packets } => packets,
            InitialSection::TwoPacketProduct { packets } => packets,
        }
    }

    pub fn build_packets(&self, grid: &GridSpec) -> Result<Vec<KgWavePacket>> {
        self.packets()
            .iter()
            .map(|p| {
                make_packet(
                    grid,
                    self.mass,
                    &p.p_center,
                    p.p_width,
                    &p.center_x,
                    Envelope::Bump,
                )
            })
            .collect()
    }

    /// Assemble the two-particle initial amplitude at t_start.
    pub fn initial_field(&self, grid: &GridSpec) -> Result<Field<2>> {
        let packets = self.build_packets(grid)?;
        if packets.len() != 2 {
            return Err(Error::validation(format!(
                "initial data needs exactly two packets, got {}",
                packets.len()
            )));
        }
        let fa = &packets[0].fourier_data;
        let fb = &packets[1].fourier_data;
        let n1 = grid.len1();
        let symmetrize = matches!(self.initial, InitialSection::TwoPacketSymmetrized { .. });
        let mut values = vec![Complex64::new(0.0, 0.0); grid.len2()];
        for i in 0..n1 {
            for j in 0..n1 {
                let prod = fa.values[i] * fb.values[j];
                values[i * n1 + j] = if symmetrize {
                    (prod + fb.values[i] * fa.values[j]) / 2.0_f64.sqrt()
                } else {
                    prod
                };
            }
        }
        let mut out = Field::<2>::from_values(grid, Space::Momentum, values)?;
        let norm = out.l2_norm();
        if norm == 0.0 {
            return Err(Error::validation("initial amplitude vanished"));
        }
        out.scale(1.0 / norm);
        Ok(crate::grid::fourier_inverse(&out))
    }

    pub fn detector_cutoffs(&self) -> Result<Option<(Cutoff, Cutoff)>> {
        match &self.detectors {
            None => Ok(None),
            Some(ds) => Ok(Some((ds.h1.to_cutoff()?, ds.h2.to_cutoff()?))),
        }
    }

    pub fn graf_region(&self) -> Result<Option<(RegionSpec, RadiusDefaults)>> {
        match &self.graf {
            None => Ok(None),
            Some(gs) => {
                let k = RegionSpec::annulus_minus_tube(gs.k_r1, gs.k_r2, gs.k_diag_min)?;
                let defaults = RadiusDefaults {
                    rp: gs.rp,
                    r: gs.r,
                    r1: gs.r1,
                    r1p: gs.r1p,
                };
                Ok(Some((k, defaults)))
            }
        }
    }

    /// Cross-validation of every referenced object plus consistency
    /// warnings returned as strings.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid_spec()?;
        if self.mass <= 0.0 {
            return Err(Error::validation("mass must be positive"));
        }
        self.evolution.validate()?;
        if self.packets().len() != 2 {
            return Err(Error::validation("exactly two packets are required"));
        }
        for (i, p) in self.packets().iter().enumerate() {
            if p.center_x.len() != grid.d || p.p_center.len() != grid.d {
                return Err(Error::validation(format!(
                    "packet {i}: dimension mismatch with grid (d = {})",
                    grid.d
                )));
            }
            if p.p_width <= 0.0 {
                return Err(Error::validation(format!("packet {i}: p_width <= 0")));
            }
            let bound = (2.0 / 3.0) * grid.p_max();
            for a in 0..grid.d {
                if p.p_center[a].abs() + p.p_width > bound {
                    return Err(Error::validation(format!(
                        "packet {i}: momentum support reaches outside the central 2/3 \
                         of the lattice (bound {bound:.3})"
                    )));
                }
            }
        }
        if let Some(ds) = &self.detectors {
            let h1 = ds.h1.to_cutoff()?;
            let h2 = ds.h2.to_cutoff()?;
            let margin = h1.support_distance(&h2);
            if margin <= 0.0 {
                return Err(Error::validation(format!(
                    "detector cutoffs overlap: support distance margin {margin} <= 0 \
                     (centers {:?} / {:?}, outer radii {} / {})",
                    h1.center, h2.center, h1.outer_radius, h2.outer_radius
                )));
            }
        }
        if let Some(es) = &self.estimates {
            if es.lv_r <= std::f64::consts::SQRT_2 {
                return Err(Error::validation(
                    "estimates.lv_r must exceed sqrt(2)",
                ));
            }
            if !(es.lv_rp > es.lv_r && es.lv_eps > 0.0) {
                return Err(Error::validation("estimates radii must be ordered"));
            }
        }
        if let Some(gs) = &self.graf {
            RegionSpec::annulus_minus_tube(gs.k_r1, gs.k_r2, gs.k_diag_min)?;
        }
        // wraparound precheck: |x0| + v_max * T + spread below the edge zone
        let t_end = self.evolution.t_end;
        let x0max = self
            .packets()
            .iter()
            .flat_map(|p| p.center_x.iter())
            .map(|c| c.abs())
            .fold(0.0, f64::max);
        if x0max + t_end >= grid.box_half_length * 40.0 {
            return Err(Error::validation(
                "run length vastly exceeds the box; enlarge the box",
            ));
        }
        Ok(())
    }

    /// Advisory consistency notes (not errors).
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let (Ok(grid), Some(_)) = (self.grid_spec(), self.detectors.as_ref()) {
            if let (Ok(packets), Ok(Some((h1, h2)))) =
                (self.build_packets(&grid), self.detector_cutoffs())
            {
                for (i, pk) in packets.iter().enumerate() {
                    let vs = pk.velocity_support();
                    let c1 = h1.eval(&[0.5 * (vs.lo[0] + vs.hi[0])]);
                    let c2 = h2.eval(&[0.5 * (vs.lo[0] + vs.hi[0])]);
                    if c1 < 0.5 && c2 < 0.5 {
                        out.push(format!(
                            "packet {i} velocity support [{:.3}, {:.3}] is not covered \
                             by either detector plateau",
                            vs.lo[0], vs.hi[0]
                        ));
                    }
                }
                // guard precheck
                let v_max = packets
                    .iter()
                    .map(|p| p.max_group_speed())
                    .fold(0.0, f64::max);
                let x0max = self
                    .packets()
                    .iter()
                    .flat_map(|p| p.center_x.iter())
                    .map(|c| c.abs())
                    .fold(0.0, f64::max);
                let reach = x0max + v_max * self.evolution.t_end;
                if reach > 0.95 * grid.box_half_length {
                    out.push(format!(
                        "ballistic reach {reach:.0} exceeds 95% of the box ({:.0}); \
                         boundary-mass monitoring will be load-bearing",
                        grid.box_half_length
                    ));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_toml() -> String {
        r#"
mass = 1.0
seed = 7

[grid]
d = 1
n = 64
box_half_length = 32.0

[initial]
type = "two_packet_symmetrized"
[[initial.packets]]
center_x = [-4.0]
p_center = [0.9]
p_width = 0.3
[[initial.packets]]
center_x = [4.0]
p_center = [-0.9]
p_width = 0.3

[source]
type = "none"

[detectors]
h1 = { center = [0.7], inner_radius = 0.4, outer_radius = 0.55 }
h2 = { center = [-0.7], inner_radius = 0.4, outer_radius = 0.55 }

[evolution]
t_start = 1.0
t_end = 16.0
dt = 0.25
scheme = "strang"
wraparound_tolerance = 1e-4
exact_free_jumps = true
[evolution.schedule]
log_count = 8
linear = [5.0]
dyadic = true
"#
        .to_string()
    }

    #[test]
    fn roundtrip_load_echo_load() {
        let sc = Scenario::from_toml_str(&sample_toml()).unwrap();
        let echoed = sc.to_toml_string().unwrap();
        let sc2 = Scenario::from_toml_str(&echoed).unwrap();
        let again = sc2.to_toml_string().unwrap();
        assert_eq!(echoed, again);
    }

    #[test]
    fn initial_field_symmetric_and_normalized() {
        let sc = Scenario::from_toml_str(&sample_toml()).unwrap();
        let grid = sc.grid_spec().unwrap();
        let f = sc.initial_field(&grid).unwrap();
        assert!((f.l2_norm() - 1.0).abs() < 1e-12);
        // swap symmetry of the symmetrized amplitude
        let n1 = grid.len1();
        let mut max_asym: f64 = 0.0;
        for i in 0..n1 {
            for j in 0..n1 {
                let a = f.values[i * n1 + j];
                let b = f.values[j * n1 + i];
                max_asym = max_asym.max((a - b).norm());
            }
        }
        assert!(max_asym < 1e-12);
    }

    #[test]
    fn overlap_detectors_rejected() {
        let bad = sample_toml().replace("center = [-0.7]", "center = [0.6]");
        let err = Scenario::from_toml_str(&bad).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("margin"), "message: {msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn override_applies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.toml");
        std::fs::write(&path, sample_toml()).unwrap();
        let sc = Scenario::from_file_with_overrides(
            &path,
            &["evolution.t_end=32.0".to_string(), "mass=2.0".to_string()],
        )
        .unwrap();
        assert_eq!(sc.evolution.t_end, 32.0);
        assert_eq!(sc.mass, 2.0);
    }
}
