//! Acceptance suite: eleven criteria, run one after another, each printing
//! a single PASS/FAIL line with its measured values and wall-clock time.
//! Exits non-zero if any criterion fails.

use std::f64::consts::LN_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oodseg::data::{Calibration, DisparityMap};
use oodseg::divergence::{divergence_from_logits, divergence_tensor};
use oodseg::experiments::ablation::AblationConfig;
use oodseg::experiments::coverage::{coverage_diagnostic, CoverageConfig};
use oodseg::experiments::losshist::{loss_histogram_study, LossHistConfig};
use oodseg::experiments::pipeline;
use oodseg::experiments::points::{train_point_flow, two_moons, Point};
use oodseg::experiments::toy2d::{toy2d_run, Toy2dConfig};
use oodseg::scoring::pixel_score;
use oodseg::trainer::{label_tensors, routed_losses, JointState, JointStepConfig};
use oodseg::{
    auroc, average_precision, compose, compose_tensor, depth_binned_fpr, divergence_to_uniform, fpr_at_tpr, fuse,
    sample_patch_spec, ConfusionK1, DivergenceKind, FlowArch, FlowModel, ImageTensor, LabelMap, OodScoreKind,
    RunConfig, ScoreMap,
};

/// Recorded at the pinned seed: held-out-class AP of the staged CLI pipeline.
const PIPELINE_AP_SNAPSHOT: f64 = 0.2887;
/// Recorded at the pinned seed: JSD-loss, JSD-score cell of the ablation grid.
const GRID_JSD_AP_SNAPSHOT: f64 = 0.3634;
const SNAPSHOT_TOLERANCE: f64 = 0.02;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    // occasionally peaked, to exercise the tails
    let sharp = if rng.random_bool(0.2) { 8.0 } else { 1.0 };
    let w: Vec<f64> = (0..k).map(|_| (sharp * rng.random::<f64>()).exp() * rng.random::<f64>() + 1e-9).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Textbook definitions evaluated directly in probability space.
fn divergence_oracle(kind: DivergenceKind, p: &[f64]) -> f64 {
    let k = p.len() as f64;
    let u = vec![1.0 / k; p.len()];
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| if x == 0.0 { 0.0 } else { x * (x / y).ln() })
            .sum()
    };
    match kind {
        DivergenceKind::Kl => kl(&u, p),
        DivergenceKind::Rkl => kl(p, &u),
        DivergenceKind::Js => {
            let m: Vec<f64> = p.iter().zip(&u).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kl(&u, &m) + 0.5 * kl(p, &m)
        }
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    let mut js_max = 0f64;
    for _ in 0..200 {
        let k = rng.random_range(2..=19);
        let p = random_distribution(&mut rng, k);
        let logits: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        for kind in DivergenceKind::ALL {
            let want = divergence_oracle(kind, &p);
            let got = divergence_to_uniform(kind, &p).map_err(|e| e.to_string())?;
            let from_logits = divergence_from_logits(kind, &logits);
            worst = worst.max((got - want).abs()).max((from_logits - want).abs());
            if kind == DivergenceKind::Js {
                js_max = js_max.max(got);
            }
        }
    }
    let js_uu = (2..=19)
        .map(|k| divergence_to_uniform(DivergenceKind::Js, &vec![1.0 / k as f64; k]).unwrap().abs())
        .fold(0.0, f64::max);
    // extremes: one-hot predictions for many class counts stay under ln 2
    for k in 2..=19 {
        let mut p = vec![0.0; k];
        p[0] = 1.0;
        js_max = js_max.max(divergence_to_uniform(DivergenceKind::Js, &p).unwrap());
    }

    // analytic gradients against central differences
    let mut grad_rel = 0f64;
    for _ in 0..30 {
        let k = rng.random_range(2..=19);
        let l: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
        for kind in DivergenceKind::ALL {
            let v = Var::from_vec(l.clone(), (1, k), &Device::Cpu).unwrap();
            let d = divergence_tensor(kind, v.as_tensor(), 1).unwrap().sum_all().unwrap();
            let g = d.backward().unwrap();
            let an = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let h = 1e-6;
            let fd: Vec<f64> = (0..k)
                .map(|i| {
                    let (mut a, mut b) = (l.clone(), l.clone());
                    a[i] += h;
                    b[i] -= h;
                    (divergence_from_logits(kind, &a) - divergence_from_logits(kind, &b)) / (2.0 * h)
                })
                .collect();
            let scale = fd.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            let err = an.iter().zip(&fd).fold(0f64, |m, (a, b)| m.max((a - b).abs()));
            grad_rel = grad_rel.max(err / scale);
        }
    }
    check(
        worst < 1e-9 && js_max <= LN_2 && js_uu < 1e-12 && grad_rel < 1e-4,
        format!("max |value - oracle| {worst:.2e}, max JS {js_max:.6} <= ln2, JS(U,U) {js_uu:.1e}, grad rel err {grad_rel:.2e}"),
    )
}

fn point_tensor(p: &[Point]) -> Tensor {
    let flat: Vec<f64> = p.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (p.len(), 2, 1, 1), &Device::Cpu).unwrap()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // round trips in double precision
    let pf = FlowModel::new(FlowArch::points(2, 4, 16), 3, DType::F64).map_err(|e| e.to_string())?;
    pf.randomize(4, 0.3).map_err(|e| e.to_string())?;
    let pts: Vec<Point> = (0..64).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
    let x = point_tensor(&pts);
    let (z, _) = pf.forward(&x).map_err(|e| e.to_string())?;
    let (back, _) = pf.inverse(&z).map_err(|e| e.to_string())?;
    let rt_points = max_abs_diff(&back, &x);
    let imf = FlowModel::new(FlowArch::image(3, 2, 2, 8), 5, DType::F64).map_err(|e| e.to_string())?;
    imf.randomize(6, 0.2).map_err(|e| e.to_string())?;
    let vals: Vec<f64> = (0..2 * 3 * 8 * 12).map(|_| rng.random_range(0.1..0.9)).collect();
    let xi = Tensor::from_vec(vals, (2, 3, 8, 12), &Device::Cpu).unwrap();
    let (zi, _) = imf.forward(&xi).map_err(|e| e.to_string())?;
    let rt_image = max_abs_diff(&imf.inverse(&zi).map_err(|e| e.to_string())?.0, &xi);

    // log-determinant against a finite-difference Jacobian
    let mut ld_err = 0f64;
    let h = 1e-5;
    for q in pts.iter().take(16) {
        let f = |p: Point| -> [f64; 2] {
            let z = pf.forward(&point_tensor(&[p])).unwrap().0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            [z[0], z[1]]
        };
        let mut j = [[0.0; 2]; 2];
        for c in 0..2 {
            let (mut a, mut b) = (*q, *q);
            a[c] += h;
            b[c] -= h;
            let (fa, fb) = (f(a), f(b));
            for r in 0..2 {
                j[r][c] = (fa[r] - fb[r]) / (2.0 * h);
            }
        }
        let fd = (j[0][0] * j[1][1] - j[0][1] * j[1][0]).abs().ln();
        let an = pf.forward(&point_tensor(&[*q])).unwrap().1.to_vec1::<f64>().unwrap()[0];
        ld_err = ld_err.max((fd - an).abs());
    }

    // density of a trained toy flow integrates to one
    let (moons, _) = two_moons(1024, 0.1, &mut rng);
    let mut tf = FlowModel::new(FlowArch::points(2, 4, 32), 7, DType::F64).map_err(|e| e.to_string())?;
    train_point_flow(&mut tf, &moons, 600, 128, 3e-3, 8).map_err(|e| e.to_string())?;
    let (half, n) = (6.0, 600usize);
    let cell = 2.0 * half / n as f64;
    let grid: Vec<Point> = (0..n * n)
        .map(|i| [-half + (i % n) as f64 * cell + cell / 2.0, -half + (i / n) as f64 * cell + cell / 2.0])
        .collect();
    let mut mass = 0.0;
    for chunk in grid.chunks(20_000) {
        let lp = tf.log_prob(&point_tensor(chunk)).map_err(|e| e.to_string())?.to_vec1::<f64>().unwrap();
        mass += lp.iter().map(|v| v.exp()).sum::<f64>() * cell * cell;
    }

    // one model, three output resolutions
    let sf = FlowModel::new(FlowArch::image(3, 2, 1, 8), 9, DType::F32).map_err(|e| e.to_string())?;
    let mut shapes_ok = true;
    for (hh, ww) in [(8, 8), (16, 24), (32, 12)] {
        let s = sf.sample(hh, ww, 1).map_err(|e| e.to_string())?;
        shapes_ok &= (s.channels(), s.height(), s.width()) == (3, hh, ww) && s.data().iter().all(|v| v.is_finite());
    }
    check(
        rt_points < 1e-5 && rt_image < 1e-5 && ld_err < 1e-4 && (mass - 1.0).abs() <= 0.02 && shapes_ok,
        format!(
            "round trip {rt_points:.1e}/{rt_image:.1e}, logdet vs FD {ld_err:.1e}, density mass {mass:.4}, three resolutions {}",
            if shapes_ok { "ok" } else { "wrong" }
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0usize;
    for _ in 0..100 {
        let (c, h, w) = (3, rng.random_range(8..=32), rng.random_range(8..=32));
        let img = ImageTensor::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
        let lbl = LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..3u8)).collect()).unwrap();
        let spec = sample_patch_spec(&mut rng, (h, w), (1, h.min(w)), 1).map_err(|e| e.to_string())?;
        let patch = ImageTensor::new(
            c,
            spec.height,
            spec.width,
            (0..c * spec.area()).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap();
        let m = compose(&img, &lbl, &patch, &spec).map_err(|e| e.to_string())?;
        let (t, _, _) = compose_tensor(
            &img.to_tensor(DType::F32).unwrap(),
            &patch.to_tensor(DType::F32).unwrap(),
            &[spec],
        )
        .map_err(|e| e.to_string())?;
        let tv = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let want = if spec.contains(y, x) {
                        patch.get(ch, y - spec.top, x - spec.left)
                    } else {
                        img.get(ch, y, x)
                    };
                    let got = m.composed.get(ch, y, x);
                    let got_t = tv[(ch * h + y) * w + x];
                    if got.to_bits() != want.to_bits() || got_t.to_bits() != want.to_bits() || m.mask[y * w + x] != spec.contains(y, x) {
                        bad += 1;
                    }
                }
            }
        }
        if m.labels != lbl {
            bad += 1;
        }
    }

    // loss routing: CE has zero gradient on pasted pixels, L_neg off them
    let mut leak = 0f64;
    for trial in 0..10 {
        let (n, k, h, w) = (2, 3, 12, 10);
        let specs: Vec<_> = (0..n).map(|_| sample_patch_spec(&mut rng, (h, w), (2, 8), 1).unwrap()).collect();
        let mask = oodseg::composer::mask_tensor(&specs, h, w, DType::F64).unwrap();
        let labels: Vec<LabelMap> = (0..n)
            .map(|_| LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..k as u8)).collect()).unwrap())
            .collect();
        let refs: Vec<&LabelMap> = labels.iter().collect();
        let (idx, valid) = label_tensors(&refs, DType::F64).unwrap();
        let vals: Vec<f64> = (0..n * k * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v = Var::from_vec(vals, (n, k, h, w), &Device::Cpu).unwrap();
        let kind = DivergenceKind::ALL[trial % 3];
        let (l_cls, l_neg, _) = routed_losses(v.as_tensor(), &idx, &valid, &mask, kind).unwrap();
        let g_cls = l_cls.backward().unwrap().get(v.as_tensor()).unwrap().clone();
        let g_neg = l_neg.backward().unwrap().get(v.as_tensor()).unwrap().clone();
        let on = mask.broadcast_as((n, k, h, w)).unwrap();
        let off = on.affine(-1.0, 1.0).unwrap();
        let a = (g_cls * &on).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let b = (g_neg * &off).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        leak = leak.max(a).max(b);
    }
    check(
        bad == 0 && leak == 0.0,
        format!("100 compositions, {bad} mismatching pixels; cross-routed gradient mass {leak:e}"),
    )
}

fn tiny_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.n_train = 8;
    c.data.n_test = 4;
    c.data.image_size = 16;
    c.flow.crop = 8;
    c.flow.hidden = 8;
    c.flow.steps_per_level = 1;
    c.classifier.width = 4;
    c.joint.patch_min = 4;
    c.joint.patch_max = 8;
    c
}

fn criterion_4(tmp: &Path) -> Outcome {
    let cfg = tiny_run_config();
    let (train_m, _) = pipeline::generate_stage(&cfg, &tmp.join("c4")).map_err(|e| e.to_string())?;
    let data = pipeline::load_split(&train_m).map_err(|e| e.to_string())?;
    let mut flow = pipeline::new_flow(&cfg).map_err(|e| e.to_string())?;
    let mut init = pipeline::flow_schedule(&cfg);
    init.epochs = 0;
    oodseg::trainer::pretrain_flow(&mut flow, &data, cfg.flow.crop, &init, 1).map_err(|e| e.to_string())?;
    let mut state = JointState::new(pipeline::new_classifier(&cfg).unwrap(), flow, 1e-3, 1e-3);
    let imgs: Vec<&ImageTensor> = data.images.iter().take(4).collect();
    let lbls: Vec<&LabelMap> = data.labels.iter().take(4).collect();
    let batch = state
        .compose_images(&imgs, &lbls, (4, 8), &mut ChaCha8Rng::seed_from_u64(4))
        .map_err(|e| e.to_string())?;
    let step = |lambda: f64, cls: bool, flow: bool| JointStepConfig {
        lambda,
        kind: DivergenceKind::Js,
        patch: (4, 8),
        update_classifier: cls,
        update_flow: flow,
    };
    let (g_flow, g_cls) = state.coupling_gradients(&batch, &step(0.3, true, true)).map_err(|e| e.to_string())?;
    let (z_flow, z_cls) = state.coupling_gradients(&batch, &step(0.0, true, true)).map_err(|e| e.to_string())?;

    // frozen sides really stay put while the other side moves
    let cls_before = trainable(state.classifier.params());
    let flow_before = trainable(state.flow.params());
    state.step_on(&batch, &step(0.3, false, true)).map_err(|e| e.to_string())?;
    let cls_same = same_params(&cls_before, &trainable(state.classifier.params()));
    let flow_moved = !same_params(&flow_before, &trainable(state.flow.params()));
    let flow_before = trainable(state.flow.params());
    let cls_before = trainable(state.classifier.params());
    state.step_on(&batch, &step(0.3, true, false)).map_err(|e| e.to_string())?;
    let flow_same = same_params(&flow_before, &trainable(state.flow.params()));
    let cls_moved = !same_params(&cls_before, &trainable(state.classifier.params()));
    check(
        g_flow > 0.0 && g_cls > 0.0 && z_flow == 0.0 && z_cls == 0.0 && cls_same && flow_same && flow_moved && cls_moved,
        format!(
            "|grad flow|^2 {g_flow:.3e}, |grad classifier|^2 {g_cls:.3e}; at lambda 0: {z_flow:e}, {z_cls:e}; frozen sides unchanged {}",
            cls_same && flow_same
        ),
    )
}

/// Trainable parameters only; normalization running statistics move with
/// any train-mode forward and are not what freezing is about.
fn trainable(store: &oodseg::nn::ParamStore) -> Vec<(String, Vec<f64>)> {
    store
        .params()
        .map(|(k, v)| {
            let t = v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap();
            (k.to_string(), t.to_vec1::<f64>().unwrap())
        })
        .collect()
}

fn same_params(a: &[(String, Vec<f64>)], b: &[(String, Vec<f64>)]) -> bool {
    a == b
}

fn criterion_5(tmp: &Path) -> Outcome {
    let out = tmp.join("c5");
    let (report, m) = toy2d_run(&Toy2dConfig::default(), &out).map_err(|e| e.to_string())?;
    let plots = ["toy2d_field_baseline_msp.png", "toy2d_field_method_jsd.png"]
        .iter()
        .all(|f| out.join(f).exists());
    check(
        m.method_auroc >= 0.95 && m.method_auroc > m.baseline_auroc && plots && report.files.iter().all(|f| f.exists()),
        format!(
            "far-field AUROC {:.4} (>= 0.95) vs no-negatives baseline {:.4}; score-field plots {}",
            m.method_auroc,
            m.baseline_auroc,
            if plots { "written" } else { "missing" }
        ),
    )
}

fn criterion_6(tmp: &Path) -> Outcome {
    let (_, r) = coverage_diagnostic(&CoverageConfig::default(), &tmp.join("c6")).map_err(|e| e.to_string())?;
    check(
        r.flow_covered() == r.modes,
        format!(
            "flow covers {}/{} modes {:?}; GAN covers {}/{} {:?}",
            r.flow_covered(),
            r.modes,
            r.flow_per_mode,
            r.gan_covered(),
            r.modes,
            r.gan_per_mode
        ),
    )
}

fn criterion_7(tmp: &Path) -> Outcome {
    let cfg = RunConfig::default();
    let root = tmp.join("c7");
    let s = pipeline::run_pipeline(&cfg, &root).map_err(|e| e.to_string())?;
    let bound = cfg.joint.lambda * LN_2;
    let run_max = s.joint.iter().map(|r| r.max_neg_pixel).fold(0.0, f64::max);

    let train = pipeline::load_split(&root.join("data/train.toml")).map_err(|e| e.to_string())?;
    let cls = oodseg::ClassifierModel::load(&root.join("cls/classifier.ckpt")).map_err(|e| e.to_string())?;
    let flow = FlowModel::load(&root.join("flow/flow.ckpt")).map_err(|e| e.to_string())?;
    let state = JointState::new(cls, flow, 0.0, 0.0);
    let lh = LossHistConfig::default();
    let (_, r) = loss_histogram_study(&state, &train, &lh, &root.join("losshist")).map_err(|e| e.to_string())?;
    let js = r.get(DivergenceKind::Js);
    let kl = r.get(DivergenceKind::Kl);
    let kl_target = 10.0 * kl.lambda * LN_2;
    check(
        run_max <= bound && js.max <= js.lambda * LN_2 && kl.max > kl_target,
        format!(
            "joint run max lambda*JSD {run_max:.4} <= {bound:.4}; study: JS {:.4} <= {:.4}, KL {:.3} > {kl_target:.3} ({})",
            js.max,
            js.lambda * LN_2,
            kl.max,
            if r.constructed { "constructed one-hot pixel" } else { "generated pixels" }
        ),
    )
}

fn ap_oracle(s: &[f64], y: &[bool]) -> f64 {
    let npos = y.iter().filter(|&&b| b).count() as f64;
    let mut th: Vec<f64> = s.to_vec();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let (mut ap, mut prev_r) = (0.0, 0.0);
    for t in th {
        let tp = s.iter().zip(y).filter(|(v, &b)| **v >= t && b).count() as f64;
        let fp = s.iter().zip(y).filter(|(v, &b)| **v >= t && !b).count() as f64;
        let r = tp / npos;
        ap += (r - prev_r) * tp / (tp + fp);
        prev_r = r;
    }
    ap
}

fn auroc_oracle(s: &[f64], y: &[bool]) -> f64 {
    let (mut acc, mut pairs) = (0.0, 0.0);
    for (a, &ya) in s.iter().zip(y) {
        for (b, &yb) in s.iter().zip(y) {
            if ya && !yb {
                pairs += 1.0;
                acc += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    acc / pairs
}

fn fpr_oracle(pos: &[f64], neg: &[f64], tpr: f64) -> f64 {
    // the operating point is chosen from the anomaly scores alone
    let mut cands: Vec<f64> = pos.to_vec();
    cands.push(pos.iter().copied().fold(f64::INFINITY, f64::min).next_down());
    let frac = |v: &[f64], d: f64| v.iter().filter(|&&x| x > d).count() as f64 / v.len() as f64;
    let n = pos.len() as f64;
    let delta = cands
        .into_iter()
        .filter(|&d| frac(pos, d) * n >= tpr * n - 1e-9)
        .fold(f64::NEG_INFINITY, f64::max);
    frac(neg, delta)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0f64;
    for i in 0..500 {
        let n = rng.random_range(2..=1000);
        let levels = if i % 2 == 0 { rng.random_range(2..=20) } else { 0 };
        let s: Vec<f64> = (0..n)
            .map(|_| {
                let v = rng.random::<f64>();
                if levels > 0 {
                    (v * levels as f64).floor()
                } else {
                    v
                }
            })
            .collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        y[0] = true;
        y[1] = false;
        let pos: Vec<f64> = s.iter().zip(&y).filter(|(_, &b)| b).map(|(v, _)| *v).collect();
        let neg: Vec<f64> = s.iter().zip(&y).filter(|(_, &b)| !b).map(|(v, _)| *v).collect();
        let e = [
            (average_precision(&s, &y).unwrap() - ap_oracle(&s, &y)).abs(),
            (auroc(&s, &y).unwrap() - auroc_oracle(&s, &y)).abs(),
            (fpr_at_tpr(&pos, &neg, 0.95).unwrap() - fpr_oracle(&pos, &neg, 0.95)).abs(),
        ];
        worst = e.iter().fold(worst, |m, &v| m.max(v));
    }

    // hand-built confusion, rows truth, columns prediction, last = outlier
    let conf = ConfusionK1::from_counts(2, vec![8, 1, 1, 2, 6, 0, 3, 0, 5]).unwrap();
    let open = conf.open_miou().unwrap().mean;
    let closed = conf.closed_miou().unwrap().mean;
    let full = conf.miou().unwrap().mean;
    let hand_open = (8.0 / 15.0 + 6.0 / 9.0) / 2.0;
    let hand_closed = (8.0 / 11.0 + 6.0 / 9.0) / 2.0;
    let hand_full = (8.0 / 15.0 + 6.0 / 9.0 + 5.0 / 9.0) / 3.0;
    let hand_err = [(open - hand_open).abs(), (closed - hand_closed).abs(), (full - hand_full).abs()]
        .into_iter()
        .fold(0.0, f64::max);

    // ideal outlier detection: open-mIoU equals closed mIoU on inlier pixels
    let mut ideal_err = 0f64;
    for _ in 0..20 {
        let k = rng.random_range(2..=6);
        let (h, w) = (20, 20);
        let truth: Vec<u8> = (0..h * w)
            .map(|_| if rng.random_bool(0.15) { k as u8 } else { rng.random_range(0..k as u8) })
            .collect();
        let closed_pred: Vec<u8> = truth
            .iter()
            .map(|&t| if t as usize == k || rng.random_bool(0.3) { rng.random_range(0..k as u8) } else { t })
            .collect();
        let fused: Vec<u8> = truth.iter().zip(&closed_pred).map(|(&t, &p)| if t as usize == k { t } else { p }).collect();
        let mut open_c = ConfusionK1::new(k).unwrap();
        open_c
            .add(&LabelMap::new(h, w, truth.clone()).unwrap(), &LabelMap::new(h, w, fused).unwrap())
            .unwrap();
        let mut inl = ConfusionK1::new(k).unwrap();
        for (&t, &p) in truth.iter().zip(&closed_pred) {
            if (t as usize) < k {
                inl.add_pixel(t, p).unwrap();
            }
        }
        ideal_err = ideal_err.max((open_c.open_miou().unwrap().mean - inl.closed_miou().unwrap().mean).abs());
    }
    check(
        worst < 1e-9 && hand_err < 1e-12 && ideal_err < 1e-12,
        format!("500 instances: max |metric - oracle| {worst:.1e}; hand confusion err {hand_err:.1e}; ideal-detection gap {ideal_err:.1e}"),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut shift_err = 0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=19);
        let l: Vec<f64> = (0..k).map(|_| rng.random_range(-6.0..6.0)).collect();
        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
        for (kind, t) in [(OodScoreKind::Jsd, 2.0), (OodScoreKind::Msp, 10.0), (OodScoreKind::Jsd, 1.0)] {
            shift_err = shift_err.max((pixel_score(kind, &l, t) - pixel_score(kind, &shifted, t)).abs());
        }
    }
    let l = [4.0, -1.0, 0.5, 2.0];
    let ts = [1.0, 10.0, 100.0, 1e3, 1e4, 1e6];
    let vals: Vec<f64> = ts.iter().map(|&t| pixel_score(OodScoreKind::Jsd, &l, t)).collect();
    let monotone = vals.windows(2).all(|w| w[1].abs() < w[0].abs());
    let limit = vals.last().unwrap().abs();

    let (h, w, k) = (16, 16, 4);
    let closed = LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..k as u8)).collect()).unwrap();
    let scores = ScoreMap::new(h, w, (0..h * w).map(|_| rng.random_range(-1e6f32..1e6)).collect()).unwrap();
    let fused = fuse(&closed, &scores, f64::INFINITY, k).map_err(|e| e.to_string())?;
    check(
        shift_err < 1e-9 && monotone && limit < 1e-9 && fused.labels == closed,
        format!(
            "shift invariance err {shift_err:.1e}; |JSD| at T=1..1e6 {:?}; fusion at +inf identical {}",
            vals.iter().map(|v| format!("{:.1e}", v.abs())).collect::<Vec<_>>(),
            fused.labels == closed
        ),
    )
}

fn cli(args: &[&str], out: &Path) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_oodseg"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("oodseg {args:?} failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn csv_rows(p: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn criterion_10(tmp: &Path) -> Outcome {
    let r = tmp.join("c10");
    let p = |s: &str| r.join(s).to_string_lossy().into_owned();
    cli(&["generate"], &r.join("data"))?;
    cli(&["pretrain-cls", "--train", &p("data/train.toml")], &r.join("cls"))?;
    cli(&["pretrain-flow", "--train", &p("data/train.toml")], &r.join("flow"))?;
    cli(
        &[
            "joint-train",
            "--train",
            &p("data/train.toml"),
            "--classifier",
            &p("cls/classifier.ckpt"),
            "--flow",
            &p("flow/flow.ckpt"),
        ],
        &r.join("joint"),
    )?;
    cli(&["score", "--classifier", &p("joint/classifier.ckpt"), "--data", &p("data/test.toml")], &r.join("scores"))?;
    let eval = cli(&["evaluate", "--scores", &p("scores"), "--data", &p("data/test.toml")], &r.join("eval"))?;
    let v: serde_json::Value = serde_json::from_str(&eval).map_err(|e| e.to_string())?;
    let ap = v["ap"].as_f64().ok_or("missing ap")?;
    let ap_ok = (ap - PIPELINE_AP_SNAPSHOT).abs() <= SNAPSHOT_TOLERANCE;

    // ablation grids through the CLI with the default grid configuration
    let cfg_path = r.join("ablate.toml");
    std::fs::write(&cfg_path, toml::to_string(&AblationConfig::default()).unwrap()).unwrap();
    cli(&["--config", &cfg_path.to_string_lossy(), "ablate"], &r.join("ablate"))?;
    let loss = csv_rows(&r.join("ablate/loss_score.csv"))?;
    let names: Vec<String> = loss.iter().map(|row| format!("{}-{}", row[0], row[1])).collect();
    let in_unit = |row: &Vec<String>, cols: &[usize]| {
        cols.iter()
            .all(|&c| row[c].parse::<f64>().map(|v| (0.0..=1.0).contains(&v)).unwrap_or(false))
    };
    let shape_vii = names == ["kl-msp", "kl-kl", "rkl-rkl", "js-msp", "js-jsd"] && loss.iter().all(|row| in_unit(row, &[2, 4]));
    let grid_ap: f64 = loss[4][2].parse().map_err(|_| "bad AP cell")?;
    let grid_ok = (grid_ap - GRID_JSD_AP_SNAPSHOT).abs() <= SNAPSHOT_TOLERANCE;
    let gen = csv_rows(&r.join("ablate/generator.csv"))?;
    let pre = csv_rows(&r.join("ablate/pretraining.csv"))?;
    let temp = csv_rows(&r.join("ablate/temperature.csv"))?;
    let shape_viii = gen.len() == 2 && gen[0][0] == "gan" && gen[1][0] == "flow" && gen.iter().all(|row| in_unit(row, &[1, 3]));
    let shape_ix = pre.len() == 3 && pre.iter().all(|row| in_unit(row, &[2, 4]));
    let shape_x = temp.len() == 3
        && temp.iter().map(|row| row[0].as_str()).eq(["1", "1.5", "2"])
        && temp.iter().all(|row| row[1] == temp[0][1] && in_unit(row, &[2, 4]));
    check(
        ap_ok && shape_vii && grid_ok && shape_viii && shape_ix && shape_x,
        format!(
            "pipeline AP {ap:.4} (snapshot {PIPELINE_AP_SNAPSHOT} +/- {SNAPSHOT_TOLERANCE}); grid JSD-JSD AP {grid_ap:.4} (snapshot {GRID_JSD_AP_SNAPSHOT}); table shapes loss/score {shape_vii}, generator {shape_viii}, pretraining {shape_ix}, temperature {shape_x}"
        ),
    )
}

fn criterion_11() -> Outcome {
    // focal 100 px, baseline 0.5 m: depth = 50 / disparity
    let calib = Calibration {
        focal_px: 100.0,
        baseline_m: 0.5,
    };
    // (disparity, label, score); classes = 2, outlier id 2, delta = 0.5
    let pixels: [(f32, u8, f32); 12] = [
        (10.0, 0, 0.9),  // 5 m, bin 0, false positive
        (10.0, 1, 0.1),  // 5 m, bin 0
        (5.0, 0, 0.6),   // 10 m, bin 1, false positive
        (4.0, 1, 0.2),   // 12.5 m, bin 1
        (2.0, 0, 0.7),   // 25 m, bin 4, false positive
        (2.0, 0, 0.5),   // 25 m, bin 4, equal to delta: not above
        (1.0, 1, 0.1),   // 50 m, last bin inclusive
        (0.5, 0, 0.9),   // 100 m, out of range
        (20.0, 0, 0.9),  // 2.5 m, out of range
        (0.0, 0, 0.9),   // no disparity
        (-1.0, 0, 0.9),  // invalid disparity
        (5.0, 2, 0.95),  // outlier pixel, not an inlier
    ];
    let (h, w) = (3, 4);
    let disp = DisparityMap::new(h, w, pixels.iter().map(|p| p.0).collect()).unwrap();
    let labels = LabelMap::new(h, w, pixels.iter().map(|p| p.1).collect()).unwrap();
    let scores = ScoreMap::new(h, w, pixels.iter().map(|p| p.2).collect()).unwrap();
    let d = depth_binned_fpr(&[scores], &[labels], &[disp], Some(calib), 2, 0.5).map_err(|e| e.to_string())?;
    let want_counts = [2u64, 2, 0, 0, 2, 0, 0, 0, 1];
    let want_fp = [1u64, 1, 0, 0, 1, 0, 0, 0, 0];
    let want_fpr = [Some(0.5), Some(0.5), None, None, Some(0.5), None, None, None, Some(0.0)];
    let edges_ok = d.edges.len() == 10 && d.edges[0] == 5.0 && d.edges[9] == 50.0;
    check(
        d.counts == want_counts && d.false_positives == want_fp && d.fpr == want_fpr && edges_ok,
        format!("counts {:?}, false positives {:?}", d.counts, d.false_positives),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let t = tmp.path();
    type Criterion<'a> = (u32, &'a str, f64, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "divergence correctness", 10.0, Box::new(criterion_1)),
        (2, "flow soundness", 120.0, Box::new(criterion_2)),
        (3, "composition exactness", 30.0, Box::new(criterion_3)),
        (4, "joint-training coupling", 60.0, Box::new(|| criterion_4(t))),
        (5, "two-moons toy", 300.0, Box::new(|| criterion_5(t))),
        (6, "mode coverage", 300.0, Box::new(|| criterion_6(t))),
        (7, "robustness bound", 120.0, Box::new(|| criterion_7(t))),
        (8, "metric oracles", 60.0, Box::new(criterion_8)),
        (9, "scoring invariances", 30.0, Box::new(criterion_9)),
        (10, "end-to-end pipeline and grids", 1800.0, Box::new(|| criterion_10(t))),
        (11, "depth tooling", 30.0, Box::new(criterion_11)),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (n, name, budget, run) in &criteria {
        if only.is_some_and(|o| o != *n) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        let in_time = secs <= *budget;
        let (ok, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {}: {name}: {detail} [{secs:.1}s of {budget:.0}s{}]",
            if ok { "PASS" } else { "FAIL" },
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
