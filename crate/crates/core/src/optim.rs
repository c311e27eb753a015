//! Plain SGD: `w <- w - epsilon * g`, one gradient step at a time.

use crate::backward::{GradMap, LayerGrads};
use crate::error::{CoreError, Result};
use crate::graph::{LayerParams, ModelGraph};
use crate::tensor::TensorRec;

fn apply(param: &mut TensorRec, grad: &TensorRec, epsilon: f32, layer: &str) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(CoreError::ShapeMismatch {
            layer: layer.to_string(),
            msg: format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                grad.shape(),
                param.shape()
            ),
        });
    }
    for (w, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *w -= epsilon * g;
    }
    Ok(())
}

/// One descent step over every layer present in `grads`. Layers without an
/// entry are left untouched. Bumps the model's optimizer-step counter.
pub fn sgd_step(model: &mut ModelGraph, grads: &GradMap, epsilon: f32) -> Result<()> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(CoreError::InvalidTraining(format!(
            "learning rate must be positive, got {epsilon}"
        )));
    }
    for id in 0..model.layers().len() {
        let name = model.layer(id).name.clone();
        let Some(grad) = grads.layers.get(id).and_then(|g| g.as_ref()) else {
            continue;
        };
        let Some(params) = model.params_mut(id) else {
            return Err(CoreError::ShapeMismatch {
                layer: name,
                msg: "gradient present for a parameter-free layer".into(),
            });
        };
        match (params, grad) {
            (
                LayerParams::Conv { weight, bias },
                LayerGrads::Conv {
                    weight: dw,
                    bias: db,
                },
            )
            | (
                LayerParams::Linear { weight, bias },
                LayerGrads::Linear {
                    weight: dw,
                    bias: db,
                },
            ) => {
                apply(weight, dw, epsilon, &name)?;
                match (bias, db) {
                    (Some(b), Some(db)) => apply(b, db, epsilon, &name)?,
                    (None, None) => {}
                    _ => {
                        return Err(CoreError::ShapeMismatch {
                            layer: name,
                            msg: "bias gradient does not match bias presence".into(),
                        })
                    }
                }
            }
            (
                LayerParams::Bn { gamma, beta, .. },
                LayerGrads::Bn {
                    gamma: dg,
                    beta: db,
                },
            ) => {
                apply(gamma, dg, epsilon, &name)?;
                apply(beta, db, epsilon, &name)?;
            }
            _ => {
                return Err(CoreError::ShapeMismatch {
                    layer: name,
                    msg: "gradient kind does not match parameter kind".into(),
                })
            }
        }
    }
    model.opt_steps += 1;
    Ok(())
}
