//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Uses the same defaults as the `patchfield` commands.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchfield::attack::{
    self, craft_patches, dynamic_split_search, objective, split_search, total_variation, AttackConfig, LossKind,
};
use patchfield::detector::{self, Detector, GridLayout, GridTensor};
use patchfield::eval::{self, attack_success_rate, semantic_success_rate, PatchSource};
use patchfield::frame::{Frame, Image, Point};
use patchfield::geometry::{is_strictly_convex, quad_contains};
use patchfield::placement::{
    apply_patches, composite_map, composite_patch, solve_homography, Patch, SlotTensor, TransformParams,
};
use patchfield::scenegen::{generate_corpus, CorpusSpec, SceneSpec, Split};
use patchfield::tensor::{BinaryKind, Graph, ReduceKind, Tensor, UnaryKind};
use patchfield_cli::RunConfig;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn check(id: u32, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let started = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "{} {id:>2} {title}: {} [{:.1}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        started.elapsed().as_secs_f64()
    );
    v.pass
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ----- 1: gradients -----

type Build = Box<dyn Fn(&mut Graph, Tensor) -> Tensor>;

/// Largest relative error between tape and central-difference gradients
/// of `build` at `x`.
fn gradient_error(x: &[f64], build: &dyn Fn(&mut Graph, Tensor) -> Tensor, h: f64) -> f64 {
    let n = x.len();
    let mut g = Graph::new();
    let p = g.param(x.to_vec(), &[n]).unwrap();
    let root = build(&mut g, p);
    g.backward(root).unwrap();
    let analytic = g.grad(p).unwrap().to_vec();
    let f = |v: &[f64]| {
        let mut g = Graph::new();
        let p = g.constant(v.to_vec(), &[n]).unwrap();
        let r = build(&mut g, p);
        g.item(r)
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..n {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h), 1e-7));
    }
    worst
}

/// Random-weighted sum so every output element gets a distinct cotangent.
fn weighted_sum(g: &mut Graph, t: Tensor, seed: u64) -> Tensor {
    let n = g.value(t).len();
    let shape = g.shape(t).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), &shape).unwrap();
    let prod = g.mul(t, w).unwrap();
    g.sum(prod).unwrap()
}

fn halves(g: &mut Graph, p: Tensor, n: usize) -> (Tensor, Tensor) {
    (g.narrow(p, 0, 0, n).unwrap(), g.narrow(p, 0, n, n).unwrap())
}

fn core_op_cases() -> Vec<(&'static str, usize, Build)> {
    let binary = |kind: BinaryKind| -> Build {
        Box::new(move |g, p| {
            let (a, b) = halves(g, p, 6);
            let a = g.reshape(a, &[2, 3]).unwrap();
            let b = g.reshape(b, &[2, 3]).unwrap();
            let c = g.binary(kind, a, b).unwrap();
            weighted_sum(g, c, 1)
        })
    };
    let unary = |kind: UnaryKind| -> Build {
        Box::new(move |g, p| {
            let c = g.unary(kind, p);
            weighted_sum(g, c, 2)
        })
    };
    let reduce = |kind: ReduceKind, axes: &'static [usize]| -> Build {
        Box::new(move |g, p| {
            let t = g.reshape(p, &[2, 3, 2]).unwrap();
            let r = g.reduce(kind, t, axes).unwrap();
            weighted_sum(g, r, 3)
        })
    };
    let gather_map = Arc::new(
        composite_map(
            &[
                Point::new(1.2, 0.7),
                Point::new(6.6, 1.4),
                Point::new(6.1, 6.9),
                Point::new(0.9, 5.8),
            ],
            3,
            3,
            8,
            8,
        )
        .unwrap(),
    );
    vec![
        ("add", 12, binary(BinaryKind::Add)),
        ("sub", 12, binary(BinaryKind::Sub)),
        ("mul", 12, binary(BinaryKind::Mul)),
        ("div", 12, binary(BinaryKind::Div)),
        (
            "scalar broadcast",
            7,
            Box::new(|g, p| {
                let s = g.narrow(p, 0, 0, 1).unwrap();
                let v = g.narrow(p, 0, 1, 6).unwrap();
                let c = g.mul(v, s).unwrap();
                weighted_sum(g, c, 4)
            }),
        ),
        ("sqrt", 6, unary(UnaryKind::Sqrt)),
        ("sqrt_eps", 6, unary(UnaryKind::SqrtEps(1e-8))),
        ("clamp", 6, unary(UnaryKind::Clamp(0.0, 1.0))),
        ("leaky_relu", 6, unary(UnaryKind::LeakyRelu)),
        ("sigmoid", 6, unary(UnaryKind::Sigmoid)),
        ("add_scalar", 6, unary(UnaryKind::AddScalar(0.3))),
        ("mul_scalar", 6, unary(UnaryKind::MulScalar(-1.7))),
        (
            "softmax",
            12,
            Box::new(|g, p| {
                let t = g.reshape(p, &[3, 4]).unwrap();
                let s = g.softmax(t, 1).unwrap();
                weighted_sum(g, s, 5)
            }),
        ),
        (
            "log_softmax",
            12,
            Box::new(|g, p| {
                let t = g.reshape(p, &[3, 4]).unwrap();
                let s = g.log_softmax(t, 0).unwrap();
                weighted_sum(g, s, 6)
            }),
        ),
        ("sum", 12, reduce(ReduceKind::Sum, &[1])),
        ("mean", 12, reduce(ReduceKind::Mean, &[0, 2])),
        ("max", 12, reduce(ReduceKind::Max, &[1])),
        ("max all", 12, reduce(ReduceKind::Max, &[])),
        (
            "conv2d",
            2 * 25 + 3 * 2 * 9,
            Box::new(|g, p| {
                let input = g.narrow(p, 0, 0, 50).unwrap();
                let input = g.reshape(input, &[2, 5, 5]).unwrap();
                let kernel = g.narrow(p, 0, 50, 54).unwrap();
                let kernel = g.reshape(kernel, &[3, 2, 3, 3]).unwrap();
                let out = g.conv2d(input, kernel, 2, 1).unwrap();
                weighted_sum(g, out, 7)
            }),
        ),
        (
            "bias_add",
            2 * 9 + 2,
            Box::new(|g, p| {
                let x = g.narrow(p, 0, 0, 18).unwrap();
                let x = g.reshape(x, &[2, 3, 3]).unwrap();
                let b = g.narrow(p, 0, 18, 2).unwrap();
                let out = g.bias_add(x, b).unwrap();
                weighted_sum(g, out, 8)
            }),
        ),
        (
            "permute",
            12,
            Box::new(|g, p| {
                let t = g.reshape(p, &[2, 3, 2]).unwrap();
                let t = g.permute(t, &[2, 0, 1]).unwrap();
                weighted_sum(g, t, 9)
            }),
        ),
        (
            "replace_gather",
            3 * 64 + 27,
            Box::new(move |g, p| {
                let base = g.narrow(p, 0, 0, 192).unwrap();
                let base = g.reshape(base, &[3, 8, 8]).unwrap();
                let patch = g.narrow(p, 0, 192, 27).unwrap();
                let patch = g.reshape(patch, &[3, 3, 3]).unwrap();
                let out = g.replace_gather(base, patch, gather_map.clone(), Some((0.0, 1.0))).unwrap();
                weighted_sum(g, out, 10)
            }),
        ),
    ]
}

fn criterion_gradients(lab: &Lab) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_core: (f64, &str) = (0.0, "");
    for (name, n, build) in core_op_cases() {
        // positive inputs away from the clamp, relu and sqrt kinks
        let x: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.2..0.8);
                if name == "leaky_relu" && rng.random_bool(0.5) {
                    -v
                } else {
                    v
                }
            })
            .collect();
        let e = gradient_error(&x, &*build, 1e-5);
        if e > worst_core.0 {
            worst_core = (e, name);
        }
    }

    // full objective: two screens, two frames, fixed transforms
    let frames: Vec<&Frame> = lab
        .two
        .test
        .iter()
        .filter(|f| f.screens.len() == 2)
        .step_by(7)
        .take(2)
        .collect();
    let cfg = lab.attack(LossKind::ObjCls);
    let patches = attack::initial_patches(2, &cfg);
    let transforms: Vec<TransformParams> = patches
        .iter()
        .map(|p| TransformParams::sample(&cfg.transforms, p.len(), &mut rng))
        .collect();
    let shape = [3, cfg.patch_height, cfg.patch_width];
    let eval_at = |pixels: &[Vec<f64>], grad: bool| {
        let mut g = Graph::new();
        let slots: Vec<SlotTensor> = pixels
            .iter()
            .enumerate()
            .map(|(slot, px)| SlotTensor {
                slot,
                tensor: if grad {
                    g.param(px.clone(), &shape).unwrap()
                } else {
                    g.constant(px.clone(), &shape).unwrap()
                },
            })
            .collect();
        let terms = objective(&mut g, &lab.det, &cfg, &slots, &frames, Some(&transforms)).unwrap();
        if grad {
            g.backward(terms.total).unwrap();
            let grads = slots.iter().map(|s| g.grad(s.tensor).unwrap().to_vec()).collect();
            (g.item(terms.total), grads)
        } else {
            (g.item(terms.total), Vec::new())
        }
    };
    let base: Vec<Vec<f64>> = patches.iter().map(|p| p.pixels.clone()).collect();
    let (_, grads) = eval_at(&base, true);
    let h = 1e-6;
    let mut worst_obj: f64 = 0.0;
    let mut nonzero = 0;
    for _ in 0..100 {
        let slot = rng.random_range(0..2);
        let i = rng.random_range(0..base[slot].len());
        let mut up = base.clone();
        up[slot][i] += h;
        let mut down = base.clone();
        down[slot][i] -= h;
        let fd = (eval_at(&up, false).0 - eval_at(&down, false).0) / (2.0 * h);
        let a = grads[slot][i];
        if a.abs() > 1e-8 {
            nonzero += 1;
        }
        worst_obj = worst_obj.max(rel_err(a, fd, 1e-8));
    }
    verdict(
        worst_core.0 < 1e-4 && worst_obj < 1e-3 && nonzero > 0,
        format!(
            "core ops max rel err {:.2e} ({}), objective max rel err {:.2e} at 100 pixels ({nonzero} nonzero)",
            worst_core.0, worst_core.1, worst_obj
        ),
    )
}

// ----- 2: loss oracles -----

fn criterion_loss_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    let mut max_diff: f64 = 0.0;
    for _ in 0..1000 {
        let layout = GridLayout {
            grid_size: rng.random_range(1..5),
            boxes_per_cell: rng.random_range(1..4),
            num_classes: rng.random_range(2..6),
        };
        let n = layout.slots() * layout.slot_len();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let y = rng.random_range(0..layout.num_classes);

        let mut oracle = [0.0f64; 3];
        for slot in values.chunks(layout.slot_len()) {
            let obj = detector::sigmoid(slot[4]);
            let cls = detector::softmax(&slot[5..])[y];
            oracle[0] = oracle[0].max(cls);
            oracle[1] = oracle[1].max(obj);
            oracle[2] = oracle[2].max(obj * cls);
        }

        let mut g = Graph::new();
        let t = g.constant(values, &layout.shape()).unwrap();
        let grid = GridTensor { tensor: t, layout };
        let got = [
            attack::cls_loss(&mut g, &grid, y).unwrap(),
            attack::obj_loss(&mut g, &grid).unwrap(),
            attack::obj_cls_loss(&mut g, &grid, y).unwrap(),
        ]
        .map(|l| g.item(l));
        for (a, b) in got.iter().zip(&oracle) {
            if a != b {
                mismatches += 1;
                max_diff = max_diff.max((a - b).abs());
            }
        }
    }
    verdict(
        mismatches == 0,
        format!("3000 loss values vs slot enumeration: {mismatches} mismatches (max diff {max_diff:.1e})"),
    )
}

// ----- 3: placement -----

fn random_convex_quad(rng: &mut ChaCha8Rng, size: f64) -> [Point; 4] {
    loop {
        let cx = rng.random_range(0.3 * size..0.7 * size);
        let cy = rng.random_range(0.3 * size..0.7 * size);
        let quad: [Point; 4] = std::array::from_fn(|i| {
            let a = std::f64::consts::FRAC_PI_2 * i as f64 - 3.0 * std::f64::consts::FRAC_PI_4
                + rng.random_range(-0.35..0.35);
            let r = rng.random_range(0.08..0.28) * size;
            Point::new(cx + r * a.cos(), cy + r * a.sin())
        });
        if is_strictly_convex(&quad) {
            return quad;
        }
    }
}

fn criterion_placement() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let size = 144.0;
    let mut corner_err: f64 = 0.0;
    let mut outside_changed = 0;
    let mut outside_checked = 0;
    let unit = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    for trial in 0..1000 {
        let quad = random_convex_quad(&mut rng, size);
        let h = solve_homography(&quad).unwrap();
        for (&(u, v), q) in unit.iter().zip(&quad) {
            let p = h.apply(Point::new(u, v)).unwrap();
            corner_err = corner_err.max((p.x - q.x).abs()).max((p.y - q.y).abs());
        }
        if trial % 20 == 0 {
            let n = 144 * 144;
            let base: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect();
            let patch = Patch::random(0, 12, 10, 0.0, 1.0, &mut rng);
            let mut g = Graph::new();
            let img = g.constant(base.clone(), &[3, 144, 144]).unwrap();
            let p = g.constant(patch.pixels.clone(), &[3, 12, 10]).unwrap();
            let out = composite_patch(&mut g, img, p, &quad).unwrap();
            let out = g.value(out);
            for row in 0..144 {
                for col in 0..144 {
                    if quad_contains(&quad, Point::new(col as f64 + 0.5, row as f64 + 0.5)) {
                        continue;
                    }
                    for c in 0..3 {
                        let i = c * n + row * 144 + col;
                        outside_checked += 1;
                        if out[i].to_bits() != base[i].to_bits() {
                            outside_changed += 1;
                        }
                    }
                }
            }
        }
    }

    // identity warp: patch the size of the image over the whole image
    let (h, w) = (20, 24);
    let patch = Patch::random(0, h, w, 0.0, 1.0, &mut rng);
    let frame = Frame {
        image: Image::filled(h, w, [0.5; 3]),
        angle: 0.0,
        screens: vec![patchfield::frame::ScreenQuad {
            slot: 0,
            corners: [
                Point::new(0.0, 0.0),
                Point::new(w as f64, 0.0),
                Point::new(w as f64, h as f64),
                Point::new(0.0, h as f64),
            ],
        }],
        truths: Vec::new(),
    };
    let copy = apply_patches(&frame, std::slice::from_ref(&patch)).unwrap();
    let identical = copy.data.iter().zip(&patch.pixels).all(|(a, b)| a.to_bits() == b.to_bits());

    verdict(
        corner_err < 1e-9 && outside_changed == 0 && identical,
        format!(
            "max corner error {corner_err:.1e} over 1000 quads; {outside_changed}/{outside_checked} outside values changed; identity warp exact copy: {identical}"
        ),
    )
}

// ----- 4: total variation -----

fn tv_value(values: Vec<f64>, shape: &[usize]) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(values, shape).unwrap();
    let tv = total_variation(&mut g, p).unwrap();
    g.item(tv)
}

fn criterion_tv() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_const: f64 = 0.0;
    for (c, h, w) in [(3, 16, 16), (1, 2, 2), (3, 40, 40)] {
        let v = rng.random_range(0.0..1.0);
        worst_const = worst_const.max(tv_value(vec![v; c * h * w], &[c, h, w]).abs());
    }
    let mut min_tv = f64::INFINITY;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let v: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        min_tv = min_tv.min(tv_value(v, &[3, h, w]));
    }
    let example = tv_value(vec![0.0, 1.0, 0.0, 1.0], &[1, 2, 2]);
    verdict(
        worst_const <= 1e-3 && min_tv >= 0.0 && (example - 1.0).abs() <= 1e-6,
        format!("TV(constant) max {worst_const:.1e}; min TV over 1000 random patches {min_tv:.3}; 2x2 example {example}"),
    )
}

// ----- shared toy world -----

struct World {
    train: Vec<Frame>,
    test: Vec<Frame>,
    screens: usize,
}

impl World {
    fn new(scene: &SceneSpec, seed: u64) -> Self {
        Self {
            train: scene.generate_dataset(Split::Train, seed).unwrap(),
            test: scene.generate_dataset(Split::Test, seed).unwrap(),
            screens: scene.screens.len(),
        }
    }
}

struct Lab {
    cfg: RunConfig,
    det: Detector,
    train_seconds: f64,
    holdout_rate: f64,
    two: World,
    crafted: HashMap<&'static str, Vec<Patch>>,
}

impl Lab {
    fn new() -> Self {
        let cfg = RunConfig {
            learning_rate: 0.05,
            ..RunConfig::default()
        };
        let started = Instant::now();
        let scene = cfg.scene();
        let corpus = cfg.corpus();
        let train = generate_corpus(&scene, &corpus, Split::Train, cfg.seed).unwrap();
        let holdout_spec = CorpusSpec {
            frames: cfg.corpus_holdout_frames,
            ..corpus
        };
        let holdout = generate_corpus(&scene, &holdout_spec, Split::Test, cfg.seed).unwrap();
        let mut det = Detector::random(cfg.detector().unwrap(), cfg.seed).unwrap();
        let report = det.train(&train, &holdout, &cfg.train_options()).unwrap();
        let two = World::new(&scene, cfg.seed);
        Self {
            det,
            train_seconds: started.elapsed().as_secs_f64(),
            holdout_rate: report.holdout_rate,
            two,
            crafted: HashMap::new(),
            cfg,
        }
    }

    fn attack(&self, kind: LossKind) -> AttackConfig {
        AttackConfig {
            loss_kind: kind,
            ..self.cfg.attack()
        }
    }

    /// Patches crafted on the two-screen train split, cached per loss.
    fn two_screen_patches(&mut self, kind: LossKind) -> Vec<Patch> {
        if let Some(p) = self.crafted.get(kind.name()) {
            return p.clone();
        }
        let cfg = self.attack(kind);
        let p = craft_patches(&self.two.train, self.two.screens, &cfg, &self.det).unwrap().patches;
        self.crafted.insert(kind.name(), p.clone());
        p
    }
}

// ----- 5: attack effectiveness -----

fn criterion_effectiveness(lab: &mut Lab) -> Verdict {
    let started = Instant::now();
    let target = lab.cfg.target_class;
    let clean = lab.det.clean_detection_rate(&lab.two.test).unwrap();

    let back_scene = SceneSpec {
        screens: vec![lab.cfg.scene().screens[0]],
        ..lab.cfg.scene()
    };
    let back = World::new(&back_scene, lab.cfg.seed);
    let cfg = lab.attack(LossKind::ObjCls);
    let back_patches = craft_patches(&back.train, 1, &cfg, &lab.det).unwrap().patches;
    let back_rate = attack_success_rate(&back.test, &PatchSource::Static(&back_patches), &lab.det, target)
        .unwrap()
        .success_rate;

    let two_patches = lab.two_screen_patches(LossKind::ObjCls);
    let two_rate = attack_success_rate(&lab.two.test, &PatchSource::Static(&two_patches), &lab.det, target)
        .unwrap()
        .success_rate;

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let random: Vec<Patch> = (0..2)
        .map(|slot| Patch::random(slot, cfg.patch_height, cfg.patch_width, 0.0, 1.0, &mut rng))
        .collect();
    let random_rate = attack_success_rate(&lab.two.test, &PatchSource::Static(&random), &lab.det, target)
        .unwrap()
        .success_rate;

    let minutes = (lab.train_seconds + started.elapsed().as_secs_f64()) / 60.0;
    verdict(
        clean >= 0.95 && back_rate >= 40.0 && two_rate > back_rate && two_rate >= 70.0 && random_rate <= 20.0 && minutes <= 30.0,
        format!(
            "clean detection {:.1}% (holdout {:.1}%); back-only {back_rate:.1}%, two screens {two_rate:.1}%, random {random_rate:.1}%; {minutes:.1} min incl. training",
            100.0 * clean,
            100.0 * lab.holdout_rate
        ),
    )
}

// ----- 6: dynamic split -----

fn criterion_dynamic(lab: &Lab) -> Verdict {
    let scene = SceneSpec {
        angle_min: 0.0,
        angle_max: 90.0,
        ..lab.cfg.scene()
    };
    let world = World::new(&scene, lab.cfg.seed);
    let mut k2_not_worse = false;
    let mut plans_ok = true;
    let mut stopped_early = true;
    let mut parts = Vec::new();
    for kind in [LossKind::Cls, LossKind::ObjCls] {
        let plan = dynamic_split_search(&world.train, &world.test, (0.0, 90.0), 2, &lab.attack(kind), &lab.det).unwrap();
        let rate_of = |k: usize| plan.history.iter().find(|e| e.0 == k).map(|e| e.1);
        if let (Some(r1), Some(r2)) = (rate_of(1), rate_of(2)) {
            k2_not_worse |= r2 >= r1;
        }
        let best = plan.history.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        plans_ok &= plan.subset_count() >= 1 && plan.rate == best && rate_of(plan.subset_count()) == Some(plan.rate);
        let last_k = plan.history.last().unwrap().0;
        stopped_early &= last_k < world.test.len().min(world.train.len());
        let rates: Vec<String> = plan.history.iter().map(|(k, r)| format!("k={k}:{r:.1}")).collect();
        parts.push(format!("{} chose k={} ({})", kind.name(), plan.subset_count(), rates.join(" ")));
    }
    verdict(
        k2_not_worse && plans_ok && stopped_early,
        format!(
            "{}; k=2 >= k=1 for some loss: {k2_not_worse}; plan rate is prefix max: {plans_ok}; stopped before density limit: {stopped_early}",
            parts.join("; ")
        ),
    )
}

// ----- 7: semantic metric -----

fn criterion_semantic(lab: &mut Lab) -> Verdict {
    let classes = lab.cfg.semantic_classes.clone();
    let target = lab.cfg.target_class;
    let mut ordering_ok = true;
    let mut sem_rates = HashMap::new();
    let mut parts = Vec::new();
    for kind in [LossKind::Cls, LossKind::Semantic, LossKind::ObjCls] {
        let patches = lab.two_screen_patches(kind);
        let src = PatchSource::Static(&patches);
        let plain = attack_success_rate(&lab.two.test, &src, &lab.det, target).unwrap().success_rate;
        let sem = semantic_success_rate(&lab.two.test, &src, &lab.det, &classes).unwrap().success_rate;
        ordering_ok &= sem <= plain;
        sem_rates.insert(kind.name(), sem);
        parts.push(format!("{}-crafted plain {plain:.1}% semantic {sem:.1}%", kind.name()));
    }
    let better = sem_rates["semantic"] > sem_rates["cls"];
    verdict(
        ordering_ok && better,
        format!("{}; semantic <= plain: {ordering_ok}", parts.join("; ")),
    )
}

// ----- 8: heat maps -----

fn target_cells(frame: &Frame, s: usize) -> Vec<(usize, usize)> {
    let t = frame.truth();
    let mut cells = Vec::new();
    for row in 0..s {
        for col in 0..s {
            let (x, y) = ((col as f64 + 0.5) / s as f64, (row as f64 + 0.5) / s as f64);
            if (x - t.cx).abs() <= t.w / 2.0 && (y - t.cy).abs() <= t.h / 2.0 {
                cells.push((row, col));
            }
        }
    }
    cells
}

fn criterion_heatmaps(lab: &mut Lab) -> Verdict {
    let s = lab.det.config().grid_size;
    let mut measure = |kind: LossKind| {
        let patches = lab.two_screen_patches(kind);
        let (mut before, mut after, mut changed, mut cells) = (0.0, 0.0, 0, 0);
        for f in &lab.two.test {
            let patched = apply_patches(f, &patches).unwrap();
            let raw0 = lab.det.predict(&f.image).unwrap();
            let raw1 = lab.det.predict(&patched).unwrap();
            before += eval::objectness_map(&raw0).total();
            after += eval::objectness_map(&raw1).total();
            let (c0, c1) = (eval::class_map_of(&raw0), eval::class_map_of(&raw1));
            for (row, col) in target_cells(f, s) {
                cells += 1;
                if c0.get(row, col) != c1.get(row, col) {
                    changed += 1;
                }
            }
        }
        (100.0 * (before - after) / before, 100.0 * changed as f64 / cells as f64)
    };
    let (obj_drop, _) = measure(LossKind::Obj);
    let (cls_obj_change, cls_label_change) = measure(LossKind::Cls);
    verdict(
        obj_drop >= 30.0 && cls_label_change >= 50.0 && cls_obj_change.abs() < 10.0,
        format!(
            "obj patches cut objectness total by {obj_drop:.1}%; cls patches change {cls_label_change:.1}% of target-cell labels with objectness change {:.1}%",
            -cls_obj_change
        ),
    )
}

// ----- 9: screen size -----

fn criterion_sweep(lab: &Lab) -> Verdict {
    let ratios = [0.05, 0.10, 0.15, 0.25];
    let rows = eval::screen_size_sweep(&lab.cfg.scene(), &ratios, &lab.attack(LossKind::ObjCls), &lab.det, lab.cfg.seed).unwrap();
    let rates: Vec<f64> = rows.iter().map(|r| r.success_rate).collect();
    let monotone = rates.windows(2).all(|w| w[1] >= w[0] - 5.0);
    let listed: Vec<String> = rows.iter().map(|r| format!("{:.0}%:{:.1}", 100.0 * r.ratio, r.success_rate)).collect();
    verdict(monotone, format!("success by ratio {}; non-decreasing within 5 points: {monotone}", listed.join(" ")))
}

// ----- 10: split-search traces -----

fn criterion_traces() -> Verdict {
    let cases: [(&[f64], usize); 3] = [(&[0.60, 0.74, 0.70], 2), (&[0.60, 0.55], 1), (&[0.60, 0.60], 1)];
    let mut all = true;
    let mut parts = Vec::new();
    for (rates, want) in cases {
        let result = split_search(None, |k| {
            rates
                .get(k - 1)
                .map(|&r| (r, format!("plan{k}")))
                .ok_or_else(|| attack::AttackError::Config(format!("evaluated k={k} past the trace")))
        });
        let ok = matches!(&result, Ok((k, plan, history)) if *k == want && *plan == format!("plan{want}") && history.len() == rates.len());
        all &= ok;
        parts.push(format!("{rates:?} -> {}", result.map(|r| format!("k={}", r.0)).unwrap_or_else(|e| e.to_string())));
    }
    verdict(all, parts.join("; "))
}

// ----- 11: determinism -----

const SMALL: &str = "\
frames_per_degree = 0.2
corpus_frames = 48
corpus_holdout_frames = 16
train_epochs = 2
required_rate = 0.0
epochs = 3
batch_size = 4
patch_height = 8
patch_width = 8
max_subsets = 2
sweep_ratios = [0.0, 0.25]
";

fn cli_session(dir: &Path) -> Result<(), String> {
    fs::write(dir.join("run.toml"), SMALL).map_err(|e| e.to_string())?;
    let steps: &[&[&str]] = &[
        &["gen-dataset"],
        &["train-detector"],
        &["train-detector", "--seed", "2", "--weights", "other.pfdet", "--out-dir", "out_other"],
        &["craft", "--loss-kind", "cls"],
        &["dynamic", "--patch-dir", "dyn"],
        &["eval"],
        &["eval", "--patches", "patches", "--out-dir", "out_static"],
        &["eval", "--patches", "dyn", "--out-dir", "out_dyn"],
        &["heatmap", "--patches", "patches"],
        &["sweep"],
        &["transfer", "--patches", "patches", "--other-weights", "other.pfdet", "--out-dir", "out_transfer"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_patchfield"))
            .current_dir(dir)
            .env_remove("PF_SEED")
            .args(*args)
            .args(["--config", "run.toml"])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

/// Every file except manifests (which carry wall time), by relative path.
fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".manifest.json") {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = cli_session(a.path()).and_then(|_| cli_session(b.path())) {
        return verdict(false, e);
    }
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let kinds = |ext: &str| fa.iter().filter(|(n, _)| n.ends_with(ext)).count();
    verdict(
        fa.len() == fb.len() && differing.is_empty(),
        format!(
            "two full CLI sessions: {} artifacts ({} weights, {} patches, {} reports) byte-identical; differing: {:?}",
            fa.len(),
            kinds(".pfdet"),
            kinds(".pfpatch"),
            kinds(".csv"),
            differing
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut results = vec![
        check(2, "loss oracles", criterion_loss_oracles),
        check(3, "placement exactness", criterion_placement),
        check(4, "TV properties", criterion_tv),
        check(10, "split-search traces", criterion_traces),
        check(11, "determinism", criterion_determinism),
    ];

    let setup = Instant::now();
    let lab = catch_unwind(Lab::new);
    let mut lab = match lab {
        Ok(lab) => {
            println!(
                "setup: detector trained in {:.1}s, holdout detection {:.1}%",
                setup.elapsed().as_secs_f64(),
                100.0 * lab.holdout_rate
            );
            Some(lab)
        }
        Err(_) => None,
    };
    match lab.as_mut() {
        Some(lab) => {
            results.push(check(1, "gradient integrity", || criterion_gradients(lab)));
            results.push(check(5, "toy attack effectiveness", || criterion_effectiveness(lab)));
            results.push(check(6, "dynamic improvement", || criterion_dynamic(lab)));
            results.push(check(7, "semantic metric ordering", || criterion_semantic(lab)));
            results.push(check(8, "heatmap effect", || criterion_heatmaps(lab)));
            results.push(check(9, "screen-size trend", || criterion_sweep(lab)));
        }
        None => {
            for (id, title) in [
                (1, "gradient integrity"),
                (5, "toy attack effectiveness"),
                (6, "dynamic improvement"),
                (7, "semantic metric ordering"),
                (8, "heatmap effect"),
                (9, "screen-size trend"),
            ] {
                results.push(check(id, title, || verdict(false, "detector training failed")));
            }
        }
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.1}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
