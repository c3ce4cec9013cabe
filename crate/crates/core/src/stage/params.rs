//! Uniform access to every trainable matrix, in a fixed order.
//!
//! The visiting order defines the checkpoint layout and the order of
//! gradient updates.

use crate::attention::ProjectionParams;
use crate::patching::ConvParams;
use crate::tensor::Matrix;

use super::ffn::FfnParams;
use super::layer::LayerParams;
use super::norm::NormParams;
use super::{ModelParams, StageParams};

pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix));

    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m| out.push((name, m)));
        out
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |m| m.fill(0.0));
        z
    }

    /// `self += s · other`; both must come from the same architecture.
    fn add_scaled(&mut self, s: f64, other: &Self) {
        let src: Vec<&Matrix> = other.named().into_iter().map(|(_, m)| m).collect();
        let mut i = 0;
        self.visit_mut(&mut |m| {
            m.axpy(s, src[i]).expect("parameter sets share one architecture");
            i += 1;
        });
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.all_finite())
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamSet for ConvParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "kernel"), &self.kernel);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

impl ParamSet for NormParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "scale"), &self.scale);
        f(join(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.scale);
        f(&mut self.shift);
    }
}

impl ParamSet for ProjectionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "w_qry"), &self.w_qry);
        f(join(prefix, "w_key"), &self.w_key);
        f(join(prefix, "w_val"), &self.w_val);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.w_qry);
        f(&mut self.w_key);
        f(&mut self.w_val);
    }
}

impl ParamSet for FfnParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "w1"), &self.w1);
        f(join(prefix, "b1"), &self.b1);
        f(join(prefix, "w2"), &self.w2);
        f(join(prefix, "b2"), &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

impl ParamSet for LayerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        f(join(prefix, "out_proj"), &self.out_proj);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.norm1.visit_mut(f);
        self.proj.visit_mut(f);
        f(&mut self.out_proj);
        self.norm2.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

impl ParamSet for StageParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        self.conv.visit_mut(f);
    }
}

impl ParamSet for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.extract.visit(&join(prefix, "extract"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
        self.reconstruct.visit(&join(prefix, "reconstruct"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.extract.visit_mut(f);
        for s in &mut self.stages {
            s.visit_mut(f);
        }
        self.reconstruct.visit_mut(f);
    }
}
