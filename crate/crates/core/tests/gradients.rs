//! Reverse-mode gradients against central finite differences.

use std::sync::Arc;

use eqimaging::reconstruct::{ModelSpec, ReconstructionModel};
use eqimaging::training::{loss_eval, Dataset, LossSpec, Split, SupervisedSet};
use eqimaging::{rng, Graph, ImageAction, LinearOperator, NoiseModel, Padding, Result, Tensor};

const STEP: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of every input.
fn numeric_grad(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            out.push((f(&plus) - f(&minus)) / (2.0 * STEP));
        }
    }
    out
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().to_vec()).collect()
}

#[test]
fn conv2d_weight_gradient() {
    let mut r = rng::stream(1, 0);
    let u: Tensor = rng::normal(&mut r, &[2, 5, 5], 1.0);
    let k: Tensor = rng::normal(&mut r, &[3, 2, 3, 3], 1.0);
    let target: Tensor = rng::normal(&mut r, &[3, 5, 5], 1.0);
    let loss = |k: &Tensor| -> f64 {
        let out = u.conv2d(k, Padding::Circular).unwrap();
        out.sub(&target).unwrap().data().iter().map(|v| v * v).sum()
    };
    let g = Graph::new();
    let kv = g.param(k.clone());
    let l = g
        .constant(u.clone())
        .conv2d(&kv, Padding::Circular)
        .and_then(|o| o.sub(&g.constant(target.clone())))
        .and_then(|d| d.square())
        .and_then(|s| s.sum())
        .unwrap();
    let analytic = g.backward(l, &[kv]).unwrap().into_vec().unwrap();
    let numeric = numeric_grad(&[k], &|p| loss(&p[0]));
    assert!(rel_err(&flat(&analytic), &numeric) < 1e-4);
}

#[test]
fn relu_matmul_chain_gradient() {
    let mut r = rng::stream(2, 0);
    let w: Tensor = rng::normal(&mut r, &[4, 3], 1.0);
    let x: Tensor = rng::normal(&mut r, &[3, 2], 1.0);
    let f = |p: &[Tensor]| -> f64 { p[0].matmul(&p[1]).unwrap().data().iter().map(|v| v.max(0.0)).sum() };
    let g = Graph::new();
    let (wv, xv) = (g.param(w.clone()), g.param(x.clone()));
    let l = wv.matmul(&xv).and_then(|m| m.relu()).and_then(|m| m.sum()).unwrap();
    let analytic = g.backward(l, &[wv, xv]).unwrap().into_vec().unwrap();
    let numeric = numeric_grad(&[w, x], &f);
    assert!(rel_err(&flat(&analytic), &numeric) < 1e-4);
}

fn fixture(op: &str) -> (Arc<LinearOperator>, SupervisedSet) {
    let op = Arc::new(LinearOperator::<f64>::parse(op, 6, 6).unwrap());
    let mut r = rng::stream(3, 0);
    let images = (0..3).map(|_| rng::uniform(&mut r, &[1, 6, 6], 0.0, 1.0)).collect();
    let set = SupervisedSet::simulate(op.clone(), images, NoiseModel::none(), Split::Train).unwrap();
    (op, set)
}

fn check_loss(model_spec: &str, loss: &LossSpec, op: &str) -> Result<f64> {
    let (op, set) = fixture(op);
    let model = ReconstructionModel::<f64>::new(ModelSpec::parse(model_spec)?, 6, 6, 5)?;
    assert!(model.num_parameters() <= 500, "{model_spec}: {}", model.num_parameters());
    let dataset = if loss.needs_ground_truth() {
        Dataset::Supervised(set)
    } else {
        Dataset::Unsupervised(set.measurements_only())
    };
    let batch = dataset.batch(&[0, 1, 2]);
    let value = |p: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = p.iter().map(|t| g.constant(t.clone())).collect();
        loss_eval(&g, &vars, loss, &model, &batch, &op, 9, 1).unwrap().value().item()
    };
    let g = Graph::new();
    let vars: Vec<_> = model.params().iter().map(|t| g.param(t.clone())).collect();
    let l = loss_eval(&g, &vars, loss, &model, &batch, &op, 9, 1)?;
    let analytic = g.backward(l, &vars)?.into_vec()?;
    Ok(rel_err(&flat(&analytic), &numeric_grad(model.params(), &value)))
}

#[test]
fn every_loss_and_model_kind_matches_finite_differences() {
    let action = Arc::new(ImageAction::parse("c4+shifts2d:2x2", 6, 6).unwrap());
    let mut ei = LossSpec::equivariant_imaging(action.clone(), 0.7).unwrap();
    let mut l1 = LossSpec::supervised();
    l1.l1 = true;
    let losses = [
        LossSpec::supervised(),
        l1,
        LossSpec::supervised_da(action.clone(), NoiseModel::gaussian(0.05, 1), true),
        LossSpec::measurement_consistency(),
        ei.clone(),
        {
            if let eqimaging::training::LossKind::EquivariantImaging { sampling, .. } = &mut ei.kind {
                *sampling = eqimaging::training::GroupSampling::Random(2);
            }
            ei
        },
    ];
    let models = [
        "kind=direct;net=cnn:layers=3:channels=3:bias",
        "kind=direct;net=gcnn:c4:layers=2:channels=2",
        "kind=unrolled;iters=2;net=cnn:layers=2:channels=2",
        "kind=unrolled;iters=2;net=cnn:layers=2:channels=2;mix=learned;tied=true",
    ];
    for m in models {
        for loss in &losses {
            let e = check_loss(m, loss, "inpaint:p=0.6:seed=2").unwrap();
            assert!(e < 1e-4, "{m} / {loss}: relative error {e}");
        }
    }
    let e = check_loss(models[2], &losses[4], "blur:gauss:sigma=0.8").unwrap();
    assert!(e < 1e-4, "blur: {e}");
}
