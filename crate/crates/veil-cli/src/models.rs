//! The built-in example models: how each is constructed, how a pass runs
//! over a data frame, and how a saved model is rebuilt before loading its
//! state.

use serde::{Deserialize, Serialize};

use veil::nn;
use veil::rng::{fnv1a, RngState};
use veil::{Distribution, Module, RandomVariable, Tensor};

use crate::config::Model;
use crate::data::Frame;
use crate::CliError;

/// Structural facts a saved run needs to rebuild its module tree before
/// `load_state`. Hyperparameters that shape the tree live here; fitted
/// numbers live in the state manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StructureDoc {
    pub model: String,
    pub hidden: usize,
    pub noise_sd: f64,
    pub lifted: bool,
    pub lift_layer: Option<String>,
    pub lift_scale: f64,
}

impl StructureDoc {
    pub fn new(model: Model, hidden: usize, noise_sd: f64) -> StructureDoc {
        StructureDoc {
            model: model.name().to_string(),
            hidden,
            noise_sd,
            lifted: false,
            lift_layer: None,
            lift_scale: 0.0,
        }
    }
}

/// A model's per-pass program over fixed feature tensors. One value is
/// built per dataset; passes borrow it immutably so MCMC chains can share
/// it across threads.
pub enum Program {
    Linreg { x: Tensor, n: usize },
    Hetreg { x: Tensor, x_abs: Tensor, n: usize },
    Branching,
    MlpClassifier { x: Tensor },
    MlpRegressor { x: Tensor, n: usize },
}

impl Program {
    pub fn new(model: Model, frame: &Frame) -> Result<Program, CliError> {
        let n = frame.n_rows();
        match model {
            Model::Linreg => {
                let x = frame.column("x").expect("feature column x");
                Ok(Program::Linreg { x: Tensor::from_vec(vec![n], x.to_vec()), n })
            }
            Model::Hetreg => {
                let x = frame.column("x").expect("feature column x");
                let abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
                Ok(Program::Hetreg {
                    x: Tensor::from_vec(vec![n], x.to_vec()),
                    x_abs: Tensor::from_vec(vec![n], abs),
                    n,
                })
            }
            Model::Branching => Ok(Program::Branching),
            Model::MlpClassifier => {
                let x0 = frame.column("x0").expect("feature column x0");
                let x1 = frame.column("x1").expect("feature column x1");
                let mut rows = Vec::with_capacity(2 * n);
                for i in 0..n {
                    rows.push(x0[i]);
                    rows.push(x1[i]);
                }
                Ok(Program::MlpClassifier { x: Tensor::from_vec(vec![n, 2], rows) })
            }
            Model::LiftedMlp => {
                let x = frame.column("x").expect("feature column x");
                Ok(Program::MlpRegressor {
                    x: Tensor::from_vec(vec![n, 1], x.to_vec()),
                    n,
                })
            }
        }
    }

    /// One model pass: declare priors, push data through, bind the head RV.
    pub fn run(&self, m: &mut Module) -> veil::Result<()> {
        match self {
            Program::Linreg { x, n } => {
                let a = m.set_rv("a", Distribution::normal(0.0, 3.0))?;
                let b = m.set_rv("b", Distribution::normal(0.0, 3.0))?;
                let s = m.set_rv("sigma", Distribution::half_normal(1.0))?;
                let mu = &(x * &a) + &b;
                let sd = &s * &Tensor::ones(vec![*n]);
                m.set_rv("y", Distribution::normal(&mu, &sd))?;
            }
            Program::Hetreg { x, x_abs, n: _ } => {
                let a = m.set_rv("a", Distribution::normal(0.0, 3.0))?;
                let b = m.set_rv("b", Distribution::normal(0.0, 3.0))?;
                let c = m.set_rv("c", Distribution::half_normal(1.0))?;
                let d = m.set_rv("d", Distribution::half_normal(1.0))?;
                let mu = &(x * &a) + &b;
                let sd = &(x_abs * &d) + &c;
                m.set_rv("y", Distribution::normal(&mu, &sd))?;
            }
            Program::Branching => {
                // A raw draw, not a random variable: the gate re-randomizes
                // every pass and carries no guide.
                let gate = m.rng_mut().normal();
                if gate > 0.0 {
                    m.set_rv("weight", Distribution::normal(-1.0, 1.0))?;
                } else {
                    m.set_rv("weight", Distribution::normal(1.0, 1.0))?;
                }
            }
            Program::MlpClassifier { x } => {
                let logits = m.submodule_mut("net").expect("net module").forward(x);
                m.set_rv("y", Distribution::categorical(&logits))?;
            }
            Program::MlpRegressor { x, n } => {
                let h = m.submodule_mut("net").expect("net module").forward(x);
                let mu = h.reshape(vec![*n]);
                let sd = &m.buffer("noise_sd") * &Tensor::ones(vec![*n]);
                m.set_rv("y", Distribution::normal(&mu, &sd))?;
            }
        }
        Ok(())
    }
}

/// Builds the module tree for a model. For lifted structures the lift is
/// re-applied so the tree matches a saved manifest; the values it installs
/// are placeholders that `load_state` overwrites.
pub fn build_module(structure: &StructureDoc, seed: u64) -> Result<Module, CliError> {
    let model = Model::parse(&structure.model)?;
    let mut m = Module::new("model");
    let mut init = RngState::new(seed).derive(fnv1a(b"init"));
    match model {
        Model::Linreg | Model::Hetreg | Model::Branching => {}
        Model::MlpClassifier => {
            let h = structure.hidden;
            let net = nn::sequential(
                "net",
                vec![
                    nn::linear_bayesian("0", 2, h, None, None, &mut init)?,
                    nn::relu("1"),
                    nn::linear_bayesian("2", h, 2, None, None, &mut init)?,
                ],
            )?;
            m.add_module("net", net)?;
        }
        Model::LiftedMlp => {
            let h = structure.hidden;
            let net = nn::sequential(
                "net",
                vec![
                    nn::linear("0", 1, h, &mut init),
                    nn::relu("1"),
                    nn::linear("2", h, 1, &mut init),
                ],
            )?;
            m.add_module("net", net)?;
            m.set_buffer("noise_sd", Tensor::scalar(structure.noise_sd))?;
            if structure.lifted {
                let layer = structure.lift_layer.as_deref().unwrap_or("net");
                nn::lift_in_place(target_module(&mut m, layer)?, structure.lift_scale)?;
            }
        }
    }
    m.reseed(seed);
    Ok(m)
}

/// Resolves a dotted path inside the model, with "" meaning the root.
pub fn target_module<'a>(m: &'a mut Module, path: &str) -> Result<&'a mut Module, CliError> {
    if path.is_empty() {
        Ok(m)
    } else {
        Ok(m.module_at_mut(path)?)
    }
}

/// Scopes of every unobserved scalar random variable, depth first.
pub fn scalar_latents(m: &Module) -> Vec<String> {
    let mut out = Vec::new();
    collect_scalars(m, &mut out);
    out
}

fn collect_scalars(m: &Module, out: &mut Vec<String>) {
    for rv in m.rvs() {
        if !rv.observed() && rv.value().len() == 1 {
            out.push(rv.scope().to_string());
        }
    }
    for child in m.children() {
        collect_scalars(child, out);
    }
}

/// Finds an RV anywhere in the tree by its full scope.
pub fn rv_by_scope<'a>(m: &'a Module, scope: &str) -> Option<&'a RandomVariable> {
    for rv in m.rvs() {
        if rv.scope() == scope {
            return Some(rv);
        }
    }
    for child in m.children() {
        if let Some(rv) = rv_by_scope(child, scope) {
            return Some(rv);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSpec;
    use crate::data::load_frame;

    #[test]
    fn linreg_pass_declares_three_latents_and_observed_head() {
        let frame =
            load_frame(Model::Linreg, &DataSpec::Synthetic("n=20".into()), 1, "t", true)
                .unwrap();
        let prog = Program::new(Model::Linreg, &frame).unwrap();
        let mut m = build_module(&StructureDoc::new(Model::Linreg, 16, 0.1), 1).unwrap();
        let y = Tensor::from_vec(vec![20], frame.column("y").unwrap().to_vec());
        m.observe(&[("y", y)]).unwrap();
        m.begin_pass();
        m.sample().unwrap();
        prog.run(&mut m).unwrap();
        let latents = scalar_latents(&m);
        assert_eq!(latents, vec!["model.a", "model.b", "model.sigma"]);
        assert!(m.rv("y").unwrap().observed());
        assert_eq!(m.pq_terms().unwrap().len(), 4);
    }

    #[test]
    fn classifier_head_follows_the_network_logits() {
        let frame = load_frame(
            Model::MlpClassifier,
            &DataSpec::Synthetic("n=8,sep=6".into()),
            5,
            "t",
            true,
        )
        .unwrap();
        let prog = Program::new(Model::MlpClassifier, &frame).unwrap();
        let mut m =
            build_module(&StructureDoc::new(Model::MlpClassifier, 8, 0.1), 5).unwrap();
        let y = Tensor::from_vec(vec![8], frame.column("y").unwrap().to_vec());
        m.observe(&[("y", y)]).unwrap();
        m.begin_pass();
        m.sample().unwrap();
        prog.run(&mut m).unwrap();
        let head = m.rv("y").unwrap();
        assert!(head.observed());
        assert_eq!(head.prior().event_shape(), vec![8]);
        // Weight RVs live in the layer modules and enter the accounting.
        let terms = m.pq_terms().unwrap();
        assert_eq!(terms.len(), 5, "head + two weight/bias pairs");
    }

    #[test]
    fn lifted_structure_rebuilds_with_rvs_in_place_of_params() {
        let mut st = StructureDoc::new(Model::LiftedMlp, 4, 0.1);
        let det = build_module(&st, 2).unwrap();
        assert!(det.module_at("net.2").unwrap().rv("weight").is_none());

        st.lifted = true;
        st.lift_layer = Some("net.2".into());
        st.lift_scale = 0.25;
        let lifted = build_module(&st, 2).unwrap();
        let tail = lifted.module_at("net.2").unwrap();
        assert!(tail.rv("weight").is_some());
        assert!(tail.rv("bias").is_some());
        // The first layer stays deterministic under a partial lift.
        assert!(lifted.module_at("net.0").unwrap().rv("weight").is_none());
    }

    #[test]
    fn branching_pass_keeps_one_weight_and_two_slots() {
        let mut m = build_module(&StructureDoc::new(Model::Branching, 0, 0.1), 9).unwrap();
        let prog = Program::Branching;
        let mut seen = [false, false];
        for _ in 0..50 {
            m.begin_pass();
            m.sample().unwrap();
            prog.run(&mut m).unwrap();
            assert_eq!(m.ledger(), ["weight"]);
            let loc = m.rv("weight").unwrap().prior().mean_data().unwrap()[0];
            seen[usize::from(loc > 0.0)] = true;
        }
        assert!(seen[0] && seen[1], "both branches visited over 50 passes");
        assert_eq!(m.posterior().slot_count(), 2);
    }
}
