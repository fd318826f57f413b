//! Scene representation: signed distance + geometry feature, view-dependent
//! colour, plane-probability logit, and the learnable density scale β
//! (stored as `log β`).

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::encoding::{encode_into, encoded_dim};
use crate::nn::{Activation, Mlp, MlpSpec, ParamStore, Tape, Var};

/// Architecture and initialisation of the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldsConfig {
    pub geometry_hidden: Vec<usize>,
    pub geometry_skip: Vec<usize>,
    pub geometry_pe: usize,
    pub softplus_beta: f64,
    /// Width of the geometry feature `z`.
    pub feature_width: usize,
    pub color_hidden: Vec<usize>,
    pub color_dir_pe: usize,
    pub plane_hidden: Vec<usize>,
    pub plane_pe: usize,
    pub weight_norm: bool,
    pub init_radius: f64,
    /// Initialise as `radius - ‖x‖` (free space inside the sphere).
    pub init_inward: bool,
    pub init_beta: f64,
}

impl FieldsConfig {
    /// Small networks for single-core runs on 64x64 images.
    pub fn desk() -> Self {
        Self {
            geometry_hidden: vec![64; 4],
            geometry_skip: vec![2],
            geometry_pe: 6,
            softplus_beta: 100.0,
            feature_width: 64,
            color_hidden: vec![64; 2],
            color_dir_pe: 4,
            plane_hidden: vec![64; 2],
            plane_pe: 4,
            weight_norm: false,
            init_radius: 1.0,
            init_inward: true,
            init_beta: 0.1,
        }
    }

    pub fn full() -> Self {
        Self {
            geometry_hidden: vec![256; 8],
            geometry_skip: vec![4],
            feature_width: 256,
            color_hidden: vec![256; 4],
            weight_norm: true,
            ..Self::desk()
        }
    }

    pub fn geometry_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: 3,
            pe_freqs: self.geometry_pe,
            hidden: self.geometry_hidden.clone(),
            output_dim: 1 + self.feature_width,
            activation: Activation::Softplus { beta: self.softplus_beta },
            output_activation: Activation::Identity,
            skip_layers: self.geometry_skip.clone(),
            weight_norm: self.weight_norm,
        }
    }

    /// Colour input: raw position, encoded view direction, unit normal, feature.
    pub fn color_input_dim(&self) -> usize {
        3 + encoded_dim(3, self.color_dir_pe) + 3 + self.feature_width
    }

    pub fn color_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.color_input_dim(),
            pe_freqs: 0,
            hidden: self.color_hidden.clone(),
            output_dim: 3,
            activation: Activation::Relu,
            output_activation: Activation::Sigmoid,
            skip_layers: vec![],
            weight_norm: self.weight_norm,
        }
    }

    pub fn plane_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: 3,
            pe_freqs: self.plane_pe,
            hidden: self.plane_hidden.clone(),
            output_dim: 1,
            activation: Activation::Relu,
            output_activation: Activation::Identity,
            skip_layers: vec![],
            weight_norm: self.weight_norm,
        }
    }
}

/// Field values at one point (no differentiation).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub s: f64,
    pub z: Vec<f64>,
    pub n: Vec3,
    pub c: [f64; 3],
    pub p: f64,
}

/// Recorded field outputs for one sample point.
#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    pub sdf: Var,
    pub normal: [Var; 3],
    pub color: [Var; 3],
    pub plane_logit: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFields {
    pub config: FieldsConfig,
    pub params: ParamStore,
    pub geometry: Mlp,
    pub color: Mlp,
    pub plane: Mlp,
    log_beta: usize,
}

pub const NORMAL_EPS: f64 = 1e-8;

impl SceneFields {
    /// Allocates and initialises all networks deterministically from `seed`.
    pub fn new(config: FieldsConfig, seed: u64) -> Result<Self> {
        if config.init_beta <= 0.0 {
            return Err(Error::Config("initial beta must be positive".into()));
        }
        let mut params = ParamStore::new();
        let geometry = Mlp::new(config.geometry_spec(), &mut params, "geometry")?;
        let color = Mlp::new(config.color_spec(), &mut params, "color")?;
        let plane = Mlp::new(config.plane_spec(), &mut params, "plane")?;
        let log_beta = params.allocate("log_beta", 1).start;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        geometry.sphere_init(params.values_mut(), config.init_radius, config.init_inward, &mut rng);
        color.init_default(params.values_mut(), &mut rng, false);
        plane.init_default(params.values_mut(), &mut rng, true);
        params.values_mut()[log_beta] = config.init_beta.ln();
        Ok(Self {
            config,
            params,
            geometry,
            color,
            plane,
            log_beta,
        })
    }

    /// Rebuilds the network layout for `config` around existing parameter values.
    pub fn from_values(config: FieldsConfig, values: Vec<f64>) -> Result<Self> {
        let mut fields = Self::new(config, 0)?;
        if values.len() != fields.params.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match architecture ({})",
                values.len(),
                fields.params.len()
            )));
        }
        fields.params.values_mut().copy_from_slice(&values);
        Ok(fields)
    }

    pub fn log_beta_index(&self) -> usize {
        self.log_beta
    }

    pub fn beta(&self) -> f64 {
        self.params.values()[self.log_beta].exp()
    }

    /// `β = exp(log β)` recorded on the tape.
    pub fn beta_var(&self, tape: &mut Tape) -> Var {
        let lb = tape.param(self.params.values(), self.log_beta);
        tape.exp(lb)
    }

    pub fn feature_width(&self) -> usize {
        self.config.feature_width
    }

    fn points_array(points: &[Vec3]) -> Array2<f64> {
        Array2::from_shape_fn((points.len(), 3), |(r, c)| points[r][c])
    }

    /// Signed distance and geometry feature at `x`.
    pub fn eval_sdf(&self, tape: &mut Tape, x: Vec3) -> Result<(Var, Vec<Var>)> {
        check_finite(x)?;
        let batch = self
            .geometry
            .record(tape, self.params.values(), Self::points_array(&[x]), Vec::new(), &[])?;
        let z = (1..=self.config.feature_width).map(|j| batch.value(0, j)).collect();
        Ok((batch.value(0, 0), z))
    }

    /// Unit normal `∇s / ‖∇s‖`, differentiable with respect to the geometry weights.
    pub fn eval_normal(&self, tape: &mut Tape, x: Vec3) -> Result<[Var; 3]> {
        let (_, g) = self.sdf_gradient(tape, &[x])?.remove(0);
        Ok(normalize_guarded(tape, g).0)
    }

    pub fn eval_color(&self, tape: &mut Tape, x: Vec3, v: Vec3) -> Result<[Var; 3]> {
        if ((v.norm() - 1.0).abs()) > 1e-6 {
            return Err(Error::Domain("view direction must be unit length".into()));
        }
        let s = self.query(tape, &[x], &[v], false)?;
        Ok(s[0].color)
    }

    pub fn eval_plane_logit(&self, tape: &mut Tape, x: Vec3) -> Result<Var> {
        check_finite(x)?;
        let batch = self
            .plane
            .record(tape, self.params.values(), Self::points_array(&[x]), Vec::new(), &[])?;
        Ok(batch.value(0, 0))
    }

    /// Signed distance and its spatial gradient at each point.
    pub fn sdf_gradient(&self, tape: &mut Tape, points: &[Vec3]) -> Result<Vec<(Var, [Var; 3])>> {
        points.iter().try_for_each(|p| check_finite(*p))?;
        let batch = self
            .geometry
            .record(tape, self.params.values(), Self::points_array(points), Vec::new(), &[0])?;
        Ok((0..points.len())
            .map(|r| (batch.value(r, 0), [batch.tangent(r, 0, 0), batch.tangent(r, 0, 1), batch.tangent(r, 0, 2)]))
            .collect())
    }

    /// All field outputs for a batch of sample points seen along `dirs`.
    /// Plane logits are only evaluated when `with_plane` is set (zero otherwise).
    pub fn query(&self, tape: &mut Tape, points: &[Vec3], dirs: &[Vec3], with_plane: bool) -> Result<Vec<SampleVars>> {
        if points.len() != dirs.len() {
            return Err(Error::Config("points and directions differ in length".into()));
        }
        points.iter().try_for_each(|p| check_finite(*p))?;
        let rows = points.len();
        let params = self.params.values();
        let raw = Self::points_array(points);
        let geo = self.geometry.record(tape, params, raw.clone(), Vec::new(), &[0])?;

        let w = self.config.feature_width;
        let dir_dim = encoded_dim(3, self.config.color_dir_pe);
        let in_dim = self.config.color_input_dim();
        let n_off = 3 + dir_dim;
        let z_off = n_off + 3;
        let mut color_in = Array2::<f64>::zeros((rows, in_dim));
        let mut input_vars = Vec::with_capacity(rows * (3 + w));
        let mut normals = Vec::with_capacity(rows);
        for r in 0..rows {
            let g = [geo.tangent(r, 0, 0), geo.tangent(r, 0, 1), geo.tangent(r, 0, 2)];
            let (n, _) = normalize_guarded(tape, g);
            normals.push(n);
            let mut row = color_in.row_mut(r);
            let slice = row.as_slice_mut().unwrap();
            slice[..3].copy_from_slice(&points[r].to_array());
            encode_into(&dirs[r].to_array(), self.config.color_dir_pe, &mut slice[3..n_off]);
            for c in 0..3 {
                slice[n_off + c] = tape.value(n[c]);
                input_vars.push((r * in_dim + n_off + c, n[c]));
            }
            for j in 0..w {
                let zv = geo.value(r, 1 + j);
                slice[z_off + j] = tape.value(zv);
                input_vars.push((r * in_dim + z_off + j, zv));
            }
        }
        let col = self.color.record(tape, params, color_in, input_vars, &[])?;
        let plane = if with_plane {
            Some(self.plane.record(tape, params, raw, Vec::new(), &[])?)
        } else {
            None
        };
        let zero = if with_plane { None } else { Some(tape.constant(0.0)) };
        Ok((0..rows)
            .map(|r| SampleVars {
                sdf: geo.value(r, 0),
                normal: normals[r],
                color: [col.value(r, 0), col.value(r, 1), col.value(r, 2)],
                plane_logit: plane.map(|p| p.value(r, 0)).unwrap_or_else(|| zero.unwrap()),
            })
            .collect())
    }

    /// Every field value at one point, without recording gradients for later use.
    pub fn sample(&self, x: Vec3, v: Vec3) -> Result<FieldSample> {
        let mut tape = Tape::new();
        let s = self.query(&mut tape, &[x], &[v], true)?[0];
        let (_, z) = self.eval_sdf(&mut tape, x)?;
        Ok(FieldSample {
            s: tape.value(s.sdf),
            z: z.iter().map(|&v| tape.value(v)).collect(),
            n: Vec3::new(tape.value(s.normal[0]), tape.value(s.normal[1]), tape.value(s.normal[2])),
            c: [tape.value(s.color[0]), tape.value(s.color[1]), tape.value(s.color[2])],
            p: tape.value(s.plane_logit),
        })
    }

    /// Signed distances of many points, evaluated in chunks.
    pub fn sdf_values(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(4096) {
            let b = self
                .geometry
                .eval_batch(self.params.values(), Self::points_array(chunk).view(), false)?;
            out.extend(b.values.column(0).iter().copied());
        }
        Ok(out)
    }

    /// Signed distances and spatial gradients, evaluated in chunks.
    pub fn sdf_and_gradients(&self, points: &[Vec3]) -> Result<Vec<(f64, Vec3)>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(2048) {
            let b = self
                .geometry
                .eval_batch(self.params.values(), Self::points_array(chunk).view(), true)?;
            let t = b.tangents.as_ref().unwrap();
            let rows = chunk.len();
            for r in 0..rows {
                out.push((b.values[[r, 0]], Vec3::new(t[[r, 0]], t[[rows + r, 0]], t[[2 * rows + r, 0]])));
            }
        }
        Ok(out)
    }
}

fn check_finite(x: Vec3) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite query point {x:?}")))
    }
}

/// `g / ‖g‖`; below `NORMAL_EPS` falls back to `g / (‖g‖ + NORMAL_EPS)` and
/// reports the degeneracy.
pub fn normalize_guarded(tape: &mut Tape, g: [Var; 3]) -> ([Var; 3], bool) {
    let norm = tape.norm3(g);
    let nv = tape.value(norm);
    let (den, degenerate) = if nv < NORMAL_EPS {
        (tape.add_const(norm, NORMAL_EPS), true)
    } else {
        (norm, false)
    };
    ([tape.div(g[0], den), tape.div(g[1], den), tape.div(g[2], den)], degenerate)
}
