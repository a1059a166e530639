use crate::error::{config_err, Error, Result};
use crate::numerics::{rng::streams, Graph, Real, Rng, Tensor, Var};
use crate::supernet::checkpoint::{Checkpoint, CheckpointMeta, Role};
use crate::supernet::encoder::{bind, encode, Bound, Dims, EncoderOutput};
use crate::supernet::frontend::run_frontend;
use crate::supernet::params::{
    frontend_shapes, slice_store, supernet_shapes, touched_extents, ParamSet,
};
use crate::supernet::space::{SearchSpace, SubnetConfig};

/// Plain tensors from a constant (gradient-free) forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub final_out: Tensor,
    pub hidden: Vec<Tensor>,
    pub head_out: Tensor,
}

/// Anything that can run one fixed architecture on a graph.
pub trait SubnetRunner {
    fn space(&self) -> &SearchSpace;
    fn config(&self) -> &SubnetConfig;
    fn store(&self) -> &ParamSet;
    fn extents(&self) -> Vec<(String, Vec<usize>)>;

    /// Bind weights (trainable or constant) and run the encoder on `features`.
    fn run(
        &self,
        g: &mut Graph,
        features: Var,
        mask: Option<&[usize]>,
        trainable: bool,
    ) -> Result<(EncoderOutput, Bound)> {
        let space = self.space();
        let config = self.config();
        let fs = g.value(features).shape();
        if fs.len() != 2 || fs[1] != space.frontend_dim {
            return Err(Error::Dimension(format!(
                "encoder input must be [t, {}], got {fs:?}",
                space.frontend_dim
            )));
        }
        let bound = bind(g, self.store(), &self.extents(), trainable)?;
        let dims = Dims {
            head_dim: space.head_dim,
            groups: space.conv_groups,
            heads: &config.heads,
        };
        let out = encode(g, &bound, &dims, features, mask)?;
        Ok((out, bound))
    }

    /// Constant forward on frontend features `[t, frontend_dim]`.
    fn forward_features(&self, features: &Tensor, collect_hidden: bool) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let (out, _) = self.run(&mut g, x, None, false)?;
        Ok(ForwardOutput {
            final_out: g.value(out.final_out).clone(),
            hidden: if collect_hidden {
                out.hidden.iter().map(|&h| g.value(h).clone()).collect()
            } else {
                Vec::new()
            },
            head_out: g.value(out.head_out).clone(),
        })
    }

    fn frontend(&self, samples: &[Real]) -> Result<Tensor> {
        run_frontend(&self.space().frontend, self.store(), samples)
    }

    /// Raw samples through the frozen frontend, then the encoder.
    fn forward_raw(&self, samples: &[Real], collect_hidden: bool) -> Result<ForwardOutput> {
        let features = self.frontend(samples)?;
        self.forward_features(&features, collect_hidden)
    }
}

/// The maximal weight store. Every subnet is a view of prefix slices into it.
#[derive(Clone, Debug)]
pub struct SupernetModel {
    space: SearchSpace,
    params: ParamSet,
}

/// Initialize every supernet weight from `rng` (frontend from its own stream).
///
/// Linear and conv weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, every bias 0,
/// layer-norm gains 1, mask embedding `N(0, 1) * 0.02`.
pub fn build_supernet(space: &SearchSpace, rng: &mut Rng) -> Result<SupernetModel> {
    space.validate()?;
    if space.conv_kernel % 2 == 0 {
        return Err(config_err(format!(
            "positional conv kernel must be odd to build a model, got {}",
            space.conv_kernel
        )));
    }
    let mut params = ParamSet::new();
    let mut frng = rng.split(streams::FRONTEND);
    init_into(&mut params, &frontend_shapes(space), &mut frng);
    init_into(&mut params, &supernet_shapes(space), rng);
    Ok(SupernetModel {
        space: space.clone(),
        params,
    })
}

fn init_into(params: &mut ParamSet, shapes: &[(String, Vec<usize>)], rng: &mut Rng) {
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data: Vec<Real> = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if name.ends_with(".bias") {
            vec![0.0; n]
        } else if name == "mask_embedding" {
            (0..n).map(|_| (rng.normal() * 0.02) as Real).collect()
        } else {
            let bound = 1.0 / (fan_in(shape) as f64).sqrt();
            (0..n)
                .map(|_| rng.uniform_range(-bound, bound) as Real)
                .collect()
        };
        params.insert(
            name.clone(),
            Tensor::new(shape.clone(), data).expect("shape product"),
        );
    }
}

fn fan_in(shape: &[usize]) -> usize {
    match shape {
        // conv weights: [out, in, kernel]
        [_, cin, k] => cin * k,
        // linear weights are stored [in, out]
        [fin, _] => *fin,
        _ => shape[0],
    }
}

impl SupernetModel {
    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// View of one subnet; fails when `config` is outside the space.
    pub fn view<'a>(&'a self, config: &'a SubnetConfig) -> Result<SupernetView<'a>> {
        config.validate(&self.space)?;
        Ok(SupernetView {
            model: self,
            config,
        })
    }

    pub fn forward(
        &self,
        config: &SubnetConfig,
        features: &Tensor,
        collect_hidden: bool,
    ) -> Result<ForwardOutput> {
        self.view(config)?
            .forward_features(features, collect_hidden)
    }

    pub fn forward_raw(
        &self,
        config: &SubnetConfig,
        samples: &[Real],
        collect_hidden: bool,
    ) -> Result<ForwardOutput> {
        self.view(config)?.forward_raw(samples, collect_hidden)
    }

    pub fn frontend(&self, samples: &[Real]) -> Result<Tensor> {
        run_frontend(&self.space.frontend, &self.params, samples)
    }

    /// Copy the frozen frontend of another model with the same frontend spec.
    pub fn adopt_frontend(&mut self, other_space: &SearchSpace, other: &ParamSet) -> Result<()> {
        if other_space.frontend != self.space.frontend {
            return Err(config_err("frontend specs differ"));
        }
        for (name, _) in frontend_shapes(&self.space) {
            let t = other
                .get(&name)
                .ok_or_else(|| config_err(format!("source has no `{name}`")))?;
            self.params.insert(name, t.clone());
        }
        Ok(())
    }

    /// Self-contained copy of exactly the weights `config` touches.
    pub fn extract_subnet(&self, config: &SubnetConfig) -> Result<StandaloneModel> {
        config.validate(&self.space)?;
        let mut params = ParamSet::new();
        for (name, _) in frontend_shapes(&self.space) {
            params.insert(name.clone(), self.params[&name].clone());
        }
        params.extend(slice_store(
            &self.params,
            &touched_extents(&self.space, config),
        )?);
        Ok(StandaloneModel {
            space: self.space.clone(),
            config: config.clone(),
            params,
        })
    }

    pub fn to_checkpoint(&self, mut meta: CheckpointMeta) -> Result<Checkpoint> {
        meta.space = self.space.clone();
        Checkpoint::new(&meta, &self.params)
    }

    /// Rebuild from a checkpoint holding every supernet and frontend tensor.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.meta()?;
        if meta.role != Role::Supernet {
            return Err(Error::Format(format!(
                "expected a supernet checkpoint, found role {:?}",
                meta.role
            )));
        }
        let params = ck.params();
        check_store(&params, &frontend_shapes(&meta.space))?;
        check_store(&params, &supernet_shapes(&meta.space))?;
        Ok(Self {
            space: meta.space,
            params,
        })
    }

    pub fn from_parts(space: SearchSpace, params: ParamSet) -> Result<Self> {
        check_store(&params, &frontend_shapes(&space))?;
        check_store(&params, &supernet_shapes(&space))?;
        Ok(Self { space, params })
    }
}

fn check_store(params: &ParamSet, shapes: &[(String, Vec<usize>)]) -> Result<()> {
    for (name, shape) in shapes {
        match params.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Format(format!(
                    "tensor `{name}` is {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::Format(format!("missing tensor `{name}`"))),
        }
    }
    Ok(())
}

/// A subnet realized as slices of a supernet.
#[derive(Clone, Copy)]
pub struct SupernetView<'a> {
    pub model: &'a SupernetModel,
    pub config: &'a SubnetConfig,
}

impl SubnetRunner for SupernetView<'_> {
    fn space(&self) -> &SearchSpace {
        &self.model.space
    }
    fn config(&self) -> &SubnetConfig {
        self.config
    }
    fn store(&self) -> &ParamSet {
        &self.model.params
    }
    fn extents(&self) -> Vec<(String, Vec<usize>)> {
        touched_extents(&self.model.space, self.config)
    }
}

/// One architecture with its own tensors, sized exactly to it.
#[derive(Clone, Debug)]
pub struct StandaloneModel {
    space: SearchSpace,
    config: SubnetConfig,
    params: ParamSet,
}

impl StandaloneModel {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Total number of stored values, frontend and head included.
    pub fn param_count(&self) -> u64 {
        self.params.values().map(|t| t.numel() as u64).sum()
    }

    pub fn to_checkpoint(&self, mut meta: CheckpointMeta) -> Result<Checkpoint> {
        meta.space = self.space.clone();
        meta.subnet = Some(self.config.clone());
        Checkpoint::new(&meta, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.meta()?;
        let config = meta.subnet.ok_or_else(|| {
            Error::Format("standalone checkpoint carries no subnet config".into())
        })?;
        config.validate(&meta.space)?;
        let params = ck.params();
        check_store(&params, &frontend_shapes(&meta.space))?;
        check_store(&params, &touched_extents(&meta.space, &config))?;
        Ok(Self {
            space: meta.space,
            config,
            params,
        })
    }
}

impl SubnetRunner for StandaloneModel {
    fn space(&self) -> &SearchSpace {
        &self.space
    }
    fn config(&self) -> &SubnetConfig {
        &self.config
    }
    fn store(&self) -> &ParamSet {
        &self.params
    }
    fn extents(&self) -> Vec<(String, Vec<usize>)> {
        touched_extents(&self.space, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::space::{max_subnet, sample_subnet};

    #[test]
    fn build_is_deterministic() {
        let s = SearchSpace::desk_small();
        let a = build_supernet(&s, &mut Rng::new(5, streams::INIT)).unwrap();
        let b = build_supernet(&s, &mut Rng::new(5, streams::INIT)).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_supernet(&s, &mut Rng::new(6, streams::INIT)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn even_kernel_cannot_be_built() {
        let mut s = SearchSpace::desk_small();
        s.conv_kernel = 8;
        assert!(build_supernet(&s, &mut Rng::new(1, 1)).is_err());
    }

    #[test]
    fn single_frame_forward() {
        let s = SearchSpace::desk_small();
        let m = build_supernet(&s, &mut Rng::new(1, 1)).unwrap();
        let cfg = SubnetConfig::uniform(48, 2, 6, 3.5);
        let x = Tensor::full(&[1, s.frontend_dim], 0.3);
        let out = m.forward(&cfg, &x, true).unwrap();
        assert_eq!(out.final_out.shape(), &[1, 48]);
        assert_eq!(out.hidden.len(), 2);
        assert_eq!(out.head_out.shape(), &[1, s.teacher_dim]);
    }

    #[test]
    fn wrong_feature_width_is_a_dimension_error() {
        let s = SearchSpace::desk_small();
        let m = build_supernet(&s, &mut Rng::new(1, 1)).unwrap();
        let x = Tensor::zeros(&[4, s.frontend_dim + 1]);
        assert!(matches!(
            m.forward(&max_subnet(&s), &x, false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn extracted_forward_matches_view() {
        let s = SearchSpace::desk_small();
        let m = build_supernet(&s, &mut Rng::new(2, 1)).unwrap();
        let mut rng = Rng::new(2, 9);
        let samples: Vec<Real> = (0..64)
            .map(|_| rng.uniform_range(-1.0, 1.0) as Real)
            .collect();
        for _ in 0..5 {
            let cfg = sample_subnet(&s, &mut rng);
            let ext = m.extract_subnet(&cfg).unwrap();
            let a = m.forward_raw(&cfg, &samples, false).unwrap();
            let b = ext.forward_raw(&samples, false).unwrap();
            assert!(a.head_out.max_abs_diff(&b.head_out).unwrap() < 1e-6);
        }
    }
}
