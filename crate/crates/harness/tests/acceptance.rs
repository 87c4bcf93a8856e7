//! Acceptance criteria 1 to 9. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use eqimaging::identifiability::{analyze, build_m, RANK_RTOL};
use eqimaging::nn::{
    group_conv, lift, norm_nonlinearity, project, regular_action, solve_steerable_basis, steerable_conv, PointGroup,
    PoolMode, STEERABLE_RTOL,
};
use eqimaging::reconstruct::{pgd_solve, ModelSpec, ProxSpec, ReconstructionModel};
use eqimaging::training::{
    evaluate_model, loss_eval, Dataset, GroupSampling, LossKind, LossSpec, Split, SupervisedSet,
};
use eqimaging::{rng, Graph, ImageAction, LinearOperator, NoiseModel, Padding, Representation, Result, Tensor};
use eqimaging_harness::config::{read_config, ExperimentConfig};
use eqimaging_harness::experiment::{compare, prepare, CompareResult};
use nalgebra::{DMatrix, DVector};

// Interpolated rot:8 tolerances, frozen from measured 1.036e-2 and 4.531e-3.
const R45_ROUND_TRIP_TOL: f64 = 1.2e-2;
const ROT8_STEERABLE_TOL: f64 = 5e-3;
// Seed-1 EI test PSNR from the first run of criterion 7.
const EI_SEED1_PSNR: f64 = 22.06;
const EI_SEED1_TOL: f64 = 0.05;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    rng::normal(&mut rng::stream(seed, 0), shape, 1.0)
}

fn methods(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------- 1

fn exact_layer_error(spec: &str, n: usize, seed: u64) -> Result<f64> {
    let a = ImageAction::parse(spec, n, n)?;
    let pg = PointGroup::from_action(&a)?;
    let u = rand(&[2, n, n], seed);
    let psi = rand(&[3, 2, 3, 3], seed + 1);
    let psi2 = rand(&[2, 3, pg.order(), 3, 3], seed + 2);
    let planar = rand(&[2, 2, 3, 3], seed + 3);
    let f = lift(&u, &psi, &pg, Padding::Circular)?;
    let gf = group_conv(&f, &psi2, &pg, Padding::Circular)?;
    let mut worst = 0.0f64;
    for g in a.elements() {
        let ug = a.act(g, &u)?;
        let fg = lift(&ug, &psi, &pg, Padding::Circular)?;
        worst = worst.max(fg.tensor().max_abs_diff(regular_action(&pg, &a, g, &f)?.tensor()));
        let gfg = group_conv(&fg, &psi2, &pg, Padding::Circular)?;
        worst = worst.max(gfg.tensor().max_abs_diff(regular_action(&pg, &a, g, &gf)?.tensor()));
        for mode in [PoolMode::Mean, PoolMode::Max] {
            worst = worst.max(project(&gfg, mode).max_abs_diff(&a.act(g, &project(&gf, mode))?));
        }
        if spec == "shifts" {
            let lhs = ug.conv2d(&planar, Padding::Circular)?;
            worst = worst.max(lhs.max_abs_diff(&a.act(g, &u.conv2d(&planar, Padding::Circular)?)?));
        }
    }
    if spec != "shifts" {
        let t = Representation::trivial(&a);
        let v = Representation::vector(&a)?;
        for (rin, rout) in [(&t, &t), (&t, &v), (&v, &t), (&v, &v)] {
            let small = ImageAction::parse(spec, 3, 3)?;
            let (sin, sout) = match (rin.degree(), rout.degree()) {
                (1, 1) => (Representation::trivial(&small), Representation::trivial(&small)),
                (1, _) => (Representation::trivial(&small), Representation::vector(&small)?),
                (_, 1) => (Representation::vector(&small)?, Representation::trivial(&small)),
                _ => (Representation::vector(&small)?, Representation::vector(&small)?),
            };
            let basis = solve_steerable_basis(&small, &sin, &sout, 3)?;
            if basis.is_empty() {
                continue;
            }
            let w = rand(&[1, 1, basis.len()], seed + 4);
            let x = rand(&[rin.degree(), n, n], seed + 5);
            let out = steerable_conv(&x, &w, &basis, Padding::Circular)?;
            for g in a.elements() {
                let lhs = steerable_conv(&rin.act_on_field(&a, g, &x)?, &w, &basis, Padding::Circular)?;
                worst = worst.max(lhs.max_abs_diff(&rout.act_on_field(&a, g, &out)?));
            }
        }
        let x = rand(&[2, n, n], seed + 6);
        let phi = |r: f64| r.tanh() / r;
        let out = norm_nonlinearity(&x, &v, phi)?;
        for g in a.elements() {
            let lhs = norm_nonlinearity(&v.act_on_field(&a, g, &x)?, &v, phi)?;
            worst = worst.max(lhs.max_abs_diff(&v.act_on_field(&a, g, &out)?));
        }
        // The whole group network as a reconstruction model.
        let op = Arc::new(LinearOperator::<f64>::identity(n, n));
        let model = ReconstructionModel::<f64>::new(
            ModelSpec::parse(&format!("kind=direct;net=gcnn:{spec}:layers=3:channels=2"))?,
            n,
            n,
            seed,
        )?;
        let y = rand(&[1, n, n], seed + 7);
        let out = model.reconstruct(&op, &y.reshape(&[n * n])?)?;
        for g in a.elements() {
            let lhs = model.reconstruct(&op, &a.act(g, &y)?.reshape(&[n * n])?)?;
            worst = worst.max(lhs.max_abs_diff(&a.act(g, &out)?));
        }
    }
    Ok(worst)
}

fn central_window_diff(a: &Tensor, b: &Tensor, n: usize, w: usize) -> f64 {
    let lo = (n - w) / 2;
    let mut m = 0.0f64;
    for ch in 0..a.shape()[0] {
        for r in lo..lo + w {
            for c in lo..lo + w {
                m = m.max((a.get(&[ch, r, c]) - b.get(&[ch, r, c])).abs());
            }
        }
    }
    m
}

/// Sum of Gaussian bumps well inside a 32x32 grid.
fn smooth(channels: usize, n: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 1);
    let c = (n as f64 - 1.0) / 2.0;
    let bumps: Vec<Tensor> = (0..channels).map(|_| rng::uniform(&mut r, &[3, 3], -1.0, 1.0)).collect();
    Tensor::from_fn(&[channels, n, n], |i| {
        let (ch, p) = (i / (n * n), i % (n * n));
        let (row, col) = ((p / n) as f64 - c, (p % n) as f64 - c);
        (0..3)
            .map(|b| {
                let d = bumps[ch].data();
                let (dy, dx, amp) = (d[3 * b] * n as f64 / 8.0, d[3 * b + 1] * n as f64 / 8.0, d[3 * b + 2]);
                amp * (-((row - dy).powi(2) + (col - dx).powi(2)) / (n as f64 * n as f64 / 20.0)).exp()
            })
            .sum()
    })
}

fn rot8_errors() -> Result<(f64, f64)> {
    let n = 32;
    let rot = ImageAction::parse("rot:8", n, n)?;
    let u = smooth(1, n, 4);
    let v = rot.act(rot.find("r315").expect("r315"), &rot.act(rot.find("r45").expect("r45"), &u)?)?;
    let round_trip = central_window_diff(&u, &v, n, 16);
    let small = ImageAction::parse("rot:8", 5, 5)?;
    let (t, vr) = (Representation::trivial(&rot), Representation::vector(&rot)?);
    let (ts, vs) = (Representation::trivial(&small), Representation::vector(&small)?);
    let mut worst = 0.0f64;
    for ((rin, rout), (sin, sout)) in [((&t, &t), (&ts, &ts)), ((&vr, &vr), (&vs, &vs))] {
        let basis = solve_steerable_basis(&small, sin, sout, 5)?;
        let w = rand(&[1, 1, basis.len()], 5);
        let x = smooth(rin.degree(), n, 6);
        let out = steerable_conv(&x, &w, &basis, Padding::Zero)?;
        for g in rot.elements() {
            let lhs = steerable_conv(&rin.act_on_field(&rot, g, &x)?, &w, &basis, Padding::Zero)?;
            worst = worst.max(central_window_diff(&lhs, &rout.act_on_field(&rot, g, &out)?, n, 16) / out.max_abs());
        }
    }
    Ok((round_trip, worst))
}

fn criterion1() -> Result<(bool, String)> {
    let mut exact = 0.0f64;
    for (i, spec) in ["c4", "d4", "shifts"].iter().enumerate() {
        exact = exact.max(exact_layer_error(spec, 16, 10 + i as u64)?);
    }
    let (round_trip, steer) = rot8_errors()?;
    let pass = exact < 1e-10 && round_trip < R45_ROUND_TRIP_TOL && steer < ROT8_STEERABLE_TOL;
    Ok((
        pass,
        format!(
            "exact groups max error {exact:.2e} (< 1e-10); rot:8 r45 round trip {round_trip:.3e} (< {R45_ROUND_TRIP_TOL:e}), steerable {steer:.3e} (< {ROT8_STEERABLE_TOL:e})"
        ),
    ))
}

// ---------------------------------------------------------------- 2

/// Dense equivariance constraint on kernels `[d_out, d_in, size, size]`.
fn dense_constraint(action: &ImageAction, rin: &Representation, rout: &Representation, size: usize) -> Result<DMatrix<f64>> {
    let (di, d_o, n) = (rin.degree(), rout.degree(), size * size);
    let nvar = d_o * di * n;
    let var = |o: usize, i: usize, x: usize| (o * di + i) * n + x;
    let mut rows = Vec::new();
    for g in action.elements() {
        let s: Tensor = action.matrix(action.inverse(g)?, n)?;
        let (pi, po) = (rin.matrix(g)?, rout.matrix(g)?);
        for o in 0..d_o {
            for i in 0..di {
                for x in 0..n {
                    let mut row = vec![0.0; nvar];
                    for j in 0..di {
                        for y in 0..n {
                            row[var(o, j, y)] += s.get(&[x, y]) * pi[j * di + i];
                        }
                    }
                    for p in 0..d_o {
                        row[var(p, i, x)] -= po[o * d_o + p];
                    }
                    rows.push(row);
                }
            }
        }
    }
    Ok(DMatrix::from_fn(rows.len(), nvar, |r, c| rows[r][c]))
}

fn orbit_count(action: &ImageAction, n: usize) -> Result<usize> {
    let mut seen = vec![false; n * n];
    let mut orbits = 0;
    for p in 0..n * n {
        if seen[p] {
            continue;
        }
        orbits += 1;
        for g in action.elements() {
            let m: Tensor = action.matrix(g, n * n)?;
            for q in 0..n * n {
                if m.get(&[q, p]) != 0.0 {
                    seen[q] = true;
                }
            }
        }
    }
    Ok(orbits)
}

fn criterion2() -> Result<(bool, String)> {
    let c4 = ImageAction::parse("c4", 3, 3)?;
    let t = Representation::trivial(&c4);
    let dim = solve_steerable_basis(&c4, &t, &t, 3)?.len();
    let orbits = orbit_count(&c4, 3)?;
    let mut residual = 0.0f64;
    let mut dims_agree = true;
    for spec in ["c4", "d4", "rot:8"] {
        for size in [3, 5] {
            let a = ImageAction::parse(spec, size, size)?;
            let (t, v) = (Representation::trivial(&a), Representation::vector(&a)?);
            for (rin, rout) in [(&t, &t), (&t, &v), (&v, &t), (&v, &v)] {
                let basis = solve_steerable_basis(&a, rin, rout, size)?;
                let c = dense_constraint(&a, rin, rout, size)?;
                for k in &basis.basis {
                    residual = residual.max((&c * DVector::from_column_slice(k.data())).amax());
                }
                let sv = c.svd(false, false).singular_values;
                let nullity = sv.len() - sv.iter().filter(|&&s| s > STEERABLE_RTOL * sv.max()).count();
                dims_agree &= nullity == basis.len();
            }
        }
    }
    let pass = dim == 3 && orbits == 3 && residual < 1e-6 && dims_agree;
    Ok((
        pass,
        format!(
            "C4 3x3 trivial dim {dim} (orbits {orbits}); max constraint residual {residual:.2e} (< 1e-6); dense nullspace dims agree: {dims_agree}"
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn denoiser_config(out: &Path, bias: bool) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.name = format!("denoise-{}", if bias { "bias" } else { "bias-free" });
    c.output = out.to_path_buf();
    c.seed = 1;
    c.operator = "identity".into();
    c.noise = "gaussian:0.1".into();
    c.group = "trivial".into();
    c.model = format!("kind=direct;net=cnn:layers=4:channels=8{}", if bias { ":bias" } else { "" });
    c.loss.kind = "supervised".into();
    c.train.epochs = 20;
    c.train.lr = 0.003;
    c.dataset.count = 100;
    c.dataset.test_count = 20;
    c.dataset.seed = 1;
    c.images = 2;
    c
}

fn criterion3(work: &Path) -> Result<(bool, String)> {
    let mut psnr = Vec::new();
    let mut homogeneity = 0.0f64;
    for bias in [false, true] {
        let config = denoiser_config(&work.join(format!("c3-{bias}")), bias);
        let r = compare(&config, &methods(&["supervised"]), 1)?;
        let model = &r.legs[0].model;
        let mut unseen = config.clone();
        unseen.noise = "gaussian:0.3".into();
        let test = prepare(&unseen)?.test;
        psnr.push(evaluate_model(model, &test)?);
        if !bias {
            let op = test.operator().clone();
            for i in 0..test.len() {
                let y = test.measurement(i);
                let fy = model.reconstruct(&op, y)?;
                for c in [0.1, 3.0, 10.0] {
                    let cf = fy.scale(c);
                    let err = model.reconstruct(&op, &y.scale(c))?.sub(&cf)?.norm() / cf.norm();
                    homogeneity = homogeneity.max(err);
                }
            }
        }
    }
    let pass = homogeneity < 1e-8 && psnr[0] > psnr[1];
    Ok((
        pass,
        format!(
            "homogeneity error {homogeneity:.2e} (< 1e-8); PSNR at sigma 0.3: bias-free {:.2} dB vs with-bias {:.2} dB",
            psnr[0], psnr[1]
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn gradient_error(model_spec: &str, loss: &LossSpec, op_spec: &str) -> Result<(f64, usize)> {
    let n = 6;
    let op = Arc::new(LinearOperator::<f64>::parse(op_spec, n, n)?);
    let mut r = rng::stream(3, 0);
    let images = (0..3).map(|_| rng::uniform(&mut r, &[1, n, n], 0.0, 1.0)).collect();
    let set = SupervisedSet::simulate(op.clone(), images, NoiseModel::none(), Split::Train)?;
    let model = ReconstructionModel::<f64>::new(ModelSpec::parse(model_spec)?, n, n, 5)?;
    let dataset = if loss.needs_ground_truth() {
        Dataset::Supervised(set)
    } else {
        Dataset::Unsupervised(set.measurements_only())
    };
    let batch = dataset.batch(&[0, 1, 2]);
    let value = |p: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = p.iter().map(|t| g.constant(t.clone())).collect();
        Ok(loss_eval(&g, &vars, loss, &model, &batch, &op, 9, 1)?.value().item())
    };
    let g = Graph::new();
    let vars: Vec<_> = model.params().iter().map(|t| g.param(t.clone())).collect();
    let l = loss_eval(&g, &vars, loss, &model, &batch, &op, 9, 1)?;
    let analytic: Vec<f64> = g.backward(l, &vars)?.into_vec()?.iter().flat_map(|t| t.data().to_vec()).collect();
    let step = 1e-5;
    let mut numeric = Vec::new();
    let params = model.params().to_vec();
    for i in 0..params.len() {
        for j in 0..params[i].len() {
            let mut plus = params.clone();
            plus[i].data_mut()[j] += step;
            let mut minus = params.clone();
            minus[i].data_mut()[j] -= step;
            numeric.push((value(&plus)? - value(&minus)?) / (2.0 * step));
        }
    }
    Ok((rel_err(&analytic, &numeric), model.num_parameters()))
}

fn criterion4() -> Result<(bool, String)> {
    let action = Arc::new(ImageAction::parse("c4+shifts2d:2x2", 6, 6)?);
    let ei = LossSpec::equivariant_imaging(action.clone(), 0.7)?;
    let mut ei_random = ei.clone();
    if let LossKind::EquivariantImaging { sampling, .. } = &mut ei_random.kind {
        *sampling = GroupSampling::Random(2);
    }
    let mut l1 = LossSpec::supervised();
    l1.l1 = true;
    let losses = [
        LossSpec::supervised(),
        l1,
        LossSpec::supervised_da(action.clone(), NoiseModel::gaussian(0.05, 1), true),
        LossSpec::measurement_consistency(),
        ei,
        ei_random,
    ];
    let models = [
        "kind=direct;net=cnn:layers=3:channels=3:bias",
        "kind=direct;net=gcnn:c4:layers=2:channels=2",
        "kind=unrolled;iters=2;net=cnn:layers=2:channels=2",
        "kind=unrolled;iters=2;net=cnn:layers=2:channels=2;mix=learned;tied=true",
    ];
    let (mut worst, mut most_params, mut checks) = (0.0f64, 0usize, 0usize);
    for m in models {
        for loss in &losses {
            for op in ["inpaint:p=0.6:seed=2", "blur:gauss:sigma=0.8"] {
                let (e, p) = gradient_error(m, loss, op)?;
                worst = worst.max(e);
                most_params = most_params.max(p);
                checks += 1;
            }
        }
    }
    let pass = worst < 1e-4 && most_params <= 500;
    Ok((
        pass,
        format!("{checks} model/loss/operator checks, max relative error {worst:.2e} (< 1e-4), at most {most_params} parameters"),
    ))
}

// ---------------------------------------------------------------- 5

fn criterion5() -> Result<(bool, String)> {
    let (mut worst, mut monotone, mut iters_used) = (0.0f64, true, 0usize);
    for seed in 0..5u64 {
        let a: Tensor = rng::normal(&mut rng::stream(seed, 50), &[64, 32], 1.0);
        let op = LinearOperator::dense(4, 8, a.clone())?;
        let y: Tensor = rng::normal(&mut rng::stream(seed, 51), &[64], 1.0);
        let am = DMatrix::from_row_slice(64, 32, a.data());
        let qr = am.qr();
        let qty = qr.q().transpose() * DVector::from_column_slice(y.data());
        let ls = qr.r().solve_upper_triangular(&qty).expect("full rank");
        let norm = op.norm_estimate();
        let tau = 0.9 / (norm * norm);
        let u0 = Tensor::zeros(&[1, 4, 8]);
        // Smallest iteration count reaching the tolerance, at most 2000.
        let r = pgd_solve(&op, &y, &ProxSpec::Identity, tau, 2000, &u0)?;
        let err = DVector::from_column_slice(r.u.data()).metric_distance(&ls) / ls.norm();
        worst = worst.max(err);
        monotone &= r.objective.windows(2).all(|p| p[1] <= p[0] + 1e-12 * p[0].abs().max(1.0));
        let mut lo = 0;
        let mut hi = 2000;
        while lo < hi {
            let mid = (lo + hi) / 2;
            let u = pgd_solve(&op, &y, &ProxSpec::Identity, tau, mid, &u0)?.u;
            if DVector::from_column_slice(u.data()).metric_distance(&ls) / ls.norm() < 1e-6 {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        iters_used = iters_used.max(lo);
    }
    let pass = worst < 1e-6 && monotone;
    Ok((
        pass,
        format!(
            "5 random 64x32 systems: max relative error {worst:.2e} after 2000 iterations (1e-6 reached by {iters_used}); objective monotone: {monotone}"
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn oracle_rank(m: &Tensor) -> usize {
    let sv = DMatrix::from_row_slice(m.shape()[0], m.shape()[1], m.data()).svd(false, false).singular_values;
    sv.iter().filter(|&&s| s > RANK_RTOL * sv.max()).count()
}

fn criterion6() -> Result<(bool, String)> {
    let mut fixtures = 0;
    let mut mismatches = Vec::new();
    let ops = [
        "identity",
        "inpaint:p=0.5:seed=1",
        "inpaint:p=0.2:seed=2",
        "fourier:accel=4:center=1:seed=3",
        "blur:gauss:sigma=0.8",
        "blur:box:size=3",
        "radon:views=4",
    ];
    let groups = ["trivial", "c4", "d4", "shifts", "c4+shifts", "rot:8", "shifts2d:2x2"];
    for side in [4, 8] {
        for opspec in ops {
            for group in groups {
                let op = LinearOperator::<f64>::parse(opspec, side, side)?;
                let action = ImageAction::parse(group, side, side)?;
                let m = build_m(&op, &action)?;
                let r = analyze(&m, &op, &action, RANK_RTOL)?;
                fixtures += 1;
                let oracle = oracle_rank(&m);
                let verdict_ok = r.rank_condition_satisfied == (oracle == op.n())
                    && r.necessary_condition_holds == (op.m() * action.order() > op.n());
                if r.rank != oracle || !verdict_ok {
                    mismatches.push(format!("{opspec}/{group}/{side}"));
                }
            }
        }
    }
    // Circulant blur with shifts: rank(M) = rank(A) < n.
    let mut degenerate = true;
    for (spec, side) in [("blur:kernel=0.5,0.5", 4), ("blur:box:size=4", 8), ("blur:box:size=2", 8)] {
        let (h, w) = if spec.contains("kernel") { (1, side) } else { (side, side) };
        let op = LinearOperator::<f64>::parse(spec, h, w)?;
        let action = ImageAction::parse("shifts", h, w)?;
        let r = analyze(&build_m(&op, &action)?, &op, &action, RANK_RTOL)?;
        degenerate &= r.rank == r.rank_a && r.rank < r.n && r.necessary_condition_holds;
    }
    // Inpainting with shifts: full rank for every nonempty mask on 1x4 and random 8x8 masks.
    let mut full = true;
    for bits in 1u32..16 {
        let mask: Vec<bool> = (0..4).map(|i| bits >> i & 1 == 1).collect();
        let op = LinearOperator::<f64>::inpainting(1, 4, &mask)?;
        let action = ImageAction::parse("shifts", 1, 4)?;
        full &= analyze(&build_m(&op, &action)?, &op, &action, RANK_RTOL)?.rank == 4;
    }
    for seed in 0..5 {
        let op = LinearOperator::<f64>::random_inpainting(8, 8, 0.3, seed)?;
        let action = ImageAction::parse("shifts", 8, 8)?;
        full &= analyze(&build_m(&op, &action)?, &op, &action, RANK_RTOL)?.rank == 64;
    }
    let pass = mismatches.is_empty() && degenerate && full;
    Ok((
        pass,
        format!(
            "{fixtures} fixtures match the dense SVD oracle{}; circulant blur + shifts rank(M) = rank(A): {degenerate}; inpainting + shifts full rank: {full}",
            if mismatches.is_empty() { String::new() } else { format!(" except {}", mismatches.join(" ")) }
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn ei_config(out: &Path, seed: u64, operator: &str, group: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.name = format!("ei-seed{seed}");
    c.output = out.to_path_buf();
    c.seed = seed;
    c.operator = operator.replace("{seed}", &seed.to_string());
    c.group = group.into();
    c.model = "kind=direct;net=cnn:layers=4:channels=8:zero-last".into();
    c.train.epochs = 15;
    c.train.lr = 0.002;
    c.train.batch_size = 4;
    c.loss.alpha = 1.0;
    c.loss.samples = 1;
    c.dataset.count = 100;
    c.dataset.test_count = 20;
    c.dataset.seed = seed;
    c.images = 3;
    c
}

fn leg(r: &CompareResult, method: &str) -> f64 {
    r.legs.iter().find(|l| l.method == method).map(|l| l.test_psnr).unwrap_or(f64::NAN)
}

fn criterion7(work: &Path) -> Result<(bool, String)> {
    let seeds = [1u64, 2, 3];
    let (mut sup, mut ei, mut mc, mut pinv) = (0.0, 0.0, 0.0, 0.0);
    let mut per_seed = Vec::new();
    let mut seed1 = f64::NAN;
    for &s in &seeds {
        let config = ei_config(&work.join(format!("c7-{s}")), s, "inpaint:p=0.5:seed={seed}", "c4+shifts");
        let r = compare(&config, &methods(&["supervised", "ei", "mc"]), 1)?;
        let (a, b, c) = (leg(&r, "supervised"), leg(&r, "ei"), leg(&r, "mc"));
        if s == 1 {
            seed1 = b;
        }
        per_seed.push(format!("{a:.2}/{b:.2}/{c:.2}/{:.2}", r.pinv_psnr));
        sup += a / 3.0;
        ei += b / 3.0;
        mc += c / 3.0;
        pinv += r.pinv_psnr / 3.0;
    }
    let mut control_gap = f64::NEG_INFINITY;
    for &s in &seeds {
        let config = ei_config(&work.join(format!("c7-blur-{s}")), s, "blur:box:size=4", "shifts");
        let r = compare(&config, &methods(&["ei", "mc"]), 1)?;
        control_gap = control_gap.max(leg(&r, "ei") - leg(&r, "mc"));
    }
    let frozen = (seed1 - EI_SEED1_PSNR).abs() <= EI_SEED1_TOL;
    let pass = sup >= ei && ei > mc && ei >= pinv + 3.0 && ei >= mc + 1.0 && control_gap <= 0.5 && frozen;
    Ok((
        pass,
        format!(
            "mean PSNR supervised {sup:.2} >= EI {ei:.2} > MC {mc:.2}; A^+y {pinv:.2}; EI - A^+y {:.2} (>= 3), EI - MC {:.2} (>= 1); blur+shifts control EI - MC max {control_gap:.2} (<= 0.5); seed 1 EI {seed1:.3} (frozen {EI_SEED1_PSNR} +- {EI_SEED1_TOL}); per seed sup/EI/MC/pinv {}",
            ei - pinv,
            ei - mc,
            per_seed.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn da_config(out: &Path, count: usize, epochs: usize) -> ExperimentConfig {
    let mut c = ei_config(out, 1, "inpaint:p=0.5:seed={seed}", "c4+shifts");
    c.name = format!("da-{count}");
    c.dataset.count = count;
    c.train.epochs = epochs;
    c
}

fn criterion8(work: &Path) -> Result<(bool, String)> {
    // Equal sample budgets: 50 images x 40 epochs against 200 x 10.
    let small = compare(&da_config(&work.join("c8-50"), 50, 40), &methods(&["supervised", "supervised-da"]), 1)?;
    let big = compare(&da_config(&work.join("c8-200"), 200, 10), &methods(&["supervised"]), 1)?;
    let (plain, da, full) = (leg(&small, "supervised"), leg(&small, "supervised-da"), leg(&big, "supervised"));
    let pass = da >= full - 1.0;
    Ok((
        pass,
        format!("50 images + DA {da:.2} dB vs 200 images {full:.2} dB (within 1 dB); 50 images without DA {plain:.2} dB"),
    ))
}

// ---------------------------------------------------------------- 9

fn criterion9(work: &Path) -> Result<(bool, String)> {
    let runs = [
        ("c3-false", vec!["supervised"]),
        ("c7-1", vec!["supervised", "ei", "mc"]),
        ("c8-50", vec!["supervised", "supervised-da"]),
    ];
    let mut identical = Vec::new();
    for (dir, ms) in runs {
        let first = work.join(dir);
        let mut config = read_config(first.join("config.ini"))?;
        let again = work.join(format!("{dir}-rerun"));
        config.output = again.clone();
        compare(&config, &methods(&ms), 1)?;
        let same = ["compare.csv", "compare_history.csv"]
            .iter()
            .all(|f| std::fs::read(first.join(f)).ok() == std::fs::read(again.join(f)).ok());
        identical.push((dir, same));
    }
    let pass = identical.iter().all(|(_, s)| *s);
    let detail: Vec<String> = identical.iter().map(|(d, s)| format!("{d}: {}", if *s { "identical" } else { "differs" })).collect();
    Ok((pass, format!("reruns from resolved config.ini, metrics CSVs byte-compared: {}", detail.join(", "))))
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Result<(bool, String)>>)> = vec![
        ("equivariance", Box::new(criterion1)),
        ("steerable basis", Box::new(criterion2)),
        ("homogeneity", Box::new(|| criterion3(w))),
        ("autodiff", Box::new(criterion4)),
        ("pgd", Box::new(criterion5)),
        ("identifiability", Box::new(criterion6)),
        ("ei end-to-end", Box::new(|| criterion7(w))),
        ("data augmentation", Box::new(|| criterion8(w))),
        ("determinism", Box::new(|| criterion9(w))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!(
            "criterion {} {}: {} ({:.1} s) {detail}",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
