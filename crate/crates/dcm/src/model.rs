//! Backbone + classifier head composition used by the training loop.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::data::Backbone;
use crate::error::{DcmError, Result};
use crate::heads::{kan_forward, mlp_forward, HeadKind, KanHead, MlpHead};
use crate::masking::MaskMatrix;
use crate::matrix::Matrix;
use crate::spline::SplineGrid;
use crate::tape::{GradTape, TapeGrads, TapeOp, SLOT_BACKBONE_FC1, SLOT_BACKBONE_FC2, SLOT_HEAD};
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Mlp(MlpHead<Real>),
    Kan(KanHead<Real>),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Mlp(_) => HeadKind::Mlp,
            Head::Kan(_) => HeadKind::Kan,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Head::Mlp(h) => h.classes(),
            Head::Kan(h) => h.classes(),
        }
    }

    pub fn features(&self) -> usize {
        match self {
            Head::Mlp(h) => h.features(),
            Head::Kan(h) => h.features(),
        }
    }

    pub fn forward(
        &self,
        v: &Matrix<Real>,
        mask: &MaskMatrix,
        tape: Option<&mut GradTape<Real>>,
    ) -> Result<Matrix<Real>> {
        let z = match self {
            Head::Mlp(h) => mlp_forward(v, h, mask)?,
            Head::Kan(h) => kan_forward(v, h, mask)?,
        };
        if let Some(t) = tape {
            match self {
                Head::Mlp(h) => t.record(TapeOp::Linear {
                    x: v.clone(),
                    weight: h.weight.clone(),
                    mask: Some(mask.clone()),
                    slot: SLOT_HEAD,
                }),
                Head::Kan(h) => t.record(TapeOp::KanApply {
                    x: v.clone(),
                    head: h.clone(),
                    mask: mask.clone(),
                    slot: SLOT_HEAD,
                }),
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: Head,
}

impl Model {
    /// Deterministic init: the backbone and head draw from one ChaCha stream
    /// seeded by `seed`, so identical (dims, head kind, seed) produce
    /// identical parameters.
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        classes: usize,
        head_kind: HeadKind,
        seed: u64,
    ) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(input_dim, hidden_dim, feature_dim, &mut rng);
        let head = match head_kind {
            HeadKind::Mlp => Head::Mlp(MlpHead::init(classes, feature_dim, &mut rng)),
            HeadKind::Kan => Head::Kan(KanHead::init(
                classes,
                feature_dim,
                SplineGrid::default_for_heads(),
                &mut rng,
            )),
        };
        Model { backbone, head }
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Full forward pass. `mask: None` runs the unmasked classifier (an
    /// all-ones mask, which is bit-identical to no masking at all).
    pub fn forward(
        &self,
        x: &Matrix<Real>,
        mask: Option<&MaskMatrix>,
        mut tape: Option<&mut GradTape<Real>>,
    ) -> Result<Matrix<Real>> {
        let v = self.backbone.forward(x, tape.as_deref_mut())?;
        let all_ones;
        let mask = match mask {
            Some(m) => m,
            None => {
                all_ones = MaskMatrix::all_ones(self.head.features(), self.head.classes());
                &all_ones
            }
        };
        self.head.forward(&v, mask, tape)
    }

    /// Plain SGD update from one backward replay's gradients.
    pub fn apply_sgd(&mut self, grads: &TapeGrads<Real>, lr: Real) -> Result<()> {
        let (dw1, db1) = grads.linear(SLOT_BACKBONE_FC1)?;
        self.backbone.w1.axpy(-lr, dw1);
        for (b, &g) in self.backbone.b1.iter_mut().zip(db1) {
            *b -= lr * g;
        }
        let (dw2, db2) = grads.linear(SLOT_BACKBONE_FC2)?;
        self.backbone.w2.axpy(-lr, dw2);
        for (b, &g) in self.backbone.b2.iter_mut().zip(db2) {
            *b -= lr * g;
        }
        match &mut self.head {
            Head::Mlp(h) => {
                let (dw, db) = grads.linear(SLOT_HEAD)?;
                h.weight.axpy(-lr, dw);
                for (b, &g) in h.bias.iter_mut().zip(db) {
                    *b -= lr * g;
                }
            }
            Head::Kan(h) => {
                let kg = grads.kan(SLOT_HEAD)?;
                let features = h.features();
                for j in 0..h.classes() {
                    for k in 0..features {
                        let edge = h.edge_mut(j, k);
                        for (c, &g) in edge.coeffs.iter_mut().zip(&kg.coeffs[j * features + k]) {
                            *c -= lr * g;
                        }
                        edge.base_weight -= lr * kg.base_weights[(j, k)];
                        edge.spline_weight -= lr * kg.spline_weights[(j, k)];
                    }
                }
            }
        }
        Ok(())
    }

    /// All parameters flattened in a canonical order (w1, b1, w2, b2, head).
    pub fn flat_params(&self) -> Vec<Real> {
        let mut out = Vec::new();
        out.extend_from_slice(self.backbone.w1.data());
        out.extend_from_slice(&self.backbone.b1);
        out.extend_from_slice(self.backbone.w2.data());
        out.extend_from_slice(&self.backbone.b2);
        match &self.head {
            Head::Mlp(h) => {
                out.extend_from_slice(h.weight.data());
                out.extend_from_slice(&h.bias);
            }
            Head::Kan(h) => {
                for edge in h.edges() {
                    out.extend_from_slice(&edge.coeffs);
                    out.push(edge.base_weight);
                    out.push(edge.spline_weight);
                }
            }
        }
        out
    }

    /// Inverse of [`flat_params`].
    pub fn set_flat_params(&mut self, params: &[Real]) -> Result<()> {
        let expected = self.flat_params().len();
        if params.len() != expected {
            return Err(DcmError::LengthMismatch {
                op: "set_flat_params",
                expected,
                got: params.len(),
            });
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &params[pos..pos + n];
            pos += n;
            s
        };
        let n_w1 = self.backbone.w1.data().len();
        self.backbone.w1.data_mut().copy_from_slice(take(n_w1));
        let n_b1 = self.backbone.b1.len();
        self.backbone.b1.copy_from_slice(take(n_b1));
        let n_w2 = self.backbone.w2.data().len();
        self.backbone.w2.data_mut().copy_from_slice(take(n_w2));
        let n_b2 = self.backbone.b2.len();
        self.backbone.b2.copy_from_slice(take(n_b2));
        match &mut self.head {
            Head::Mlp(h) => {
                let n_w = h.weight.data().len();
                h.weight.data_mut().copy_from_slice(take(n_w));
                let n_b = h.bias.len();
                h.bias.copy_from_slice(take(n_b));
            }
            Head::Kan(h) => {
                for idx in 0..h.classes() * h.features() {
                    let (j, k) = (idx / h.features(), idx % h.features());
                    let n_c = h.edge(j, k).coeffs.len();
                    let coeffs = take(n_c).to_vec();
                    let base = take(1)[0];
                    let spline = take(1)[0];
                    let edge = h.edge_mut(j, k);
                    edge.coeffs = coeffs;
                    edge.base_weight = base;
                    edge.spline_weight = spline;
                }
            }
        }
        Ok(())
    }

    /// Gradients flattened in the [`flat_params`] order.
    pub fn flat_grads(&self, grads: &TapeGrads<Real>) -> Result<Vec<Real>> {
        let mut out = Vec::new();
        let (dw1, db1) = grads.linear(SLOT_BACKBONE_FC1)?;
        out.extend_from_slice(dw1.data());
        out.extend_from_slice(db1);
        let (dw2, db2) = grads.linear(SLOT_BACKBONE_FC2)?;
        out.extend_from_slice(dw2.data());
        out.extend_from_slice(db2);
        match &self.head {
            Head::Mlp(_) => {
                let (dw, db) = grads.linear(SLOT_HEAD)?;
                out.extend_from_slice(dw.data());
                out.extend_from_slice(db);
            }
            Head::Kan(h) => {
                let kg = grads.kan(SLOT_HEAD)?;
                let features = h.features();
                for j in 0..h.classes() {
                    for k in 0..features {
                        out.extend_from_slice(&kg.coeffs[j * features + k]);
                        out.push(kg.base_weights[(j, k)]);
                        out.push(kg.spline_weights[(j, k)]);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = checkpoint::blob_from_sections(|out| {
            checkpoint::write_backbone_section(out, &self.backbone);
            match &self.head {
                Head::Mlp(h) => checkpoint::write_mlp_head_section(out, h),
                Head::Kan(h) => checkpoint::write_kan_head_section(out, h),
            }
        });
        checkpoint::write_file(path, &blob)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let sections = checkpoint::read_file(path)?;
        let mut backbone = None;
        let mut head = None;
        for s in sections {
            match s {
                checkpoint::Section::Backbone(b) => backbone = Some(b),
                checkpoint::Section::MlpHead(h) => head = Some(Head::Mlp(h)),
                checkpoint::Section::KanHead(h) => head = Some(Head::Kan(h)),
            }
        }
        match (backbone, head) {
            (Some(backbone), Some(head)) => Ok(Model { backbone, head }),
            _ => Err(DcmError::Checkpoint(
                "model checkpoint needs a backbone and a head section".into(),
            )),
        }
    }

    /// Serialized byte image, used for bitwise trajectory comparison.
    pub fn to_blob(&self) -> Vec<u8> {
        checkpoint::blob_from_sections(|out| {
            checkpoint::write_backbone_section(out, &self.backbone);
            match &self.head {
                Head::Mlp(h) => checkpoint::write_mlp_head_section(out, h),
                Head::Kan(h) => checkpoint::write_kan_head_section(out, h),
            }
        })
    }

    fn grad_shapes_match(&self, grads: &TapeGrads<Real>) -> bool {
        match self.flat_grads(grads) {
            Ok(flat) => flat.len() == self.flat_params().len(),
            Err(_) => false,
        }
    }

    /// Debug aid used in tests: gradient accumulators must mirror parameter
    /// shapes exactly.
    pub fn check_grad_shapes(&self, grads: &TapeGrads<Real>) -> Result<()> {
        if self.grad_shapes_match(grads) {
            Ok(())
        } else {
            Err(DcmError::InvalidParameter(
                "gradient accumulators do not match parameter shapes".into(),
            ))
        }
    }

    /// Count of trainable parameters.
    pub fn num_params(&self) -> usize {
        self.flat_params().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{one_hot, softmax_ce_backward, softmax_ce_forward};
    use tempfile::tempdir;

    fn tiny_input() -> Matrix<Real> {
        Matrix::from_vec(
            4,
            3,
            vec![
                0.5, -1.0, 0.2, 1.3, 0.8, -0.4, -0.9, 0.1, 2.0, 0.3, -1.5, 0.6,
            ],
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(3, 4, 5, 2, HeadKind::Mlp, 7);
        let b = Model::init(3, 4, 5, 2, HeadKind::Mlp, 7);
        assert_eq!(a, b);
        let c = Model::init(3, 4, 5, 2, HeadKind::Mlp, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn flat_params_round_trip() {
        for kind in [HeadKind::Mlp, HeadKind::Kan] {
            let mut m = Model::init(3, 4, 5, 2, kind, 3);
            let flat = m.flat_params();
            let perturbed: Vec<Real> = flat.iter().map(|v| v + 0.125).collect();
            m.set_flat_params(&perturbed).unwrap();
            assert_eq!(m.flat_params(), perturbed);
        }
    }

    #[test]
    fn forward_none_mask_equals_all_ones_mask() {
        for kind in [HeadKind::Mlp, HeadKind::Kan] {
            let m = Model::init(3, 4, 5, 2, kind, 5);
            let x = tiny_input();
            let ones = MaskMatrix::all_ones(5, 2);
            let a = m.forward(&x, None, None).unwrap();
            let b = m.forward(&x, Some(&ones), None).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sgd_step_and_grad_shapes() {
        for kind in [HeadKind::Mlp, HeadKind::Kan] {
            let mut m = Model::init(3, 4, 5, 2, kind, 5);
            let x = tiny_input();
            let y = one_hot::<Real>(&[0, 1, 1, 0], 2).unwrap();
            let mut tape = GradTape::new();
            let z = m.forward(&x, None, Some(&mut tape)).unwrap();
            let (_, p) = softmax_ce_forward(&z, &y).unwrap();
            let (grads, _) = tape.backward(softmax_ce_backward(&p, &y)).unwrap();
            m.check_grad_shapes(&grads).unwrap();
            let before = m.flat_params();
            m.apply_sgd(&grads, 0.1).unwrap();
            let after = m.flat_params();
            assert_ne!(before, after);
            let flat = m.flat_grads(&grads).unwrap();
            for ((b, a), g) in before.iter().zip(&after).zip(&flat) {
                assert!((a - (b - 0.1 * g)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir().unwrap();
        for (kind, name) in [(HeadKind::Mlp, "m.bin"), (HeadKind::Kan, "k.bin")] {
            let m = Model::init(3, 4, 5, 2, kind, 11);
            let path = dir.path().join(name);
            m.save(&path).unwrap();
            let loaded = Model::load(&path).unwrap();
            assert_eq!(m, loaded);
        }
    }
}
