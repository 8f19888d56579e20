//! Finite-difference gradient checks in f64.

use gahcda::backbone::{self, init_params, ModelParams};
use gahcda::dataset::{GazeSample, GazeTrajectory, Image, SegMask};
use gahcda::gaa::GaaParams;
use gahcda::gaze::{rasterize_heatmap, regularize_to_weights, GazeHeatmap, WeightMask};
use gahcda::losses::{self, LossWeights};
use gahcda::nn::FeatureMap;
use gahcda::trainer::{adaptation_item_grad, AdaptItem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{central_diff, rel_err};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-7;

#[derive(Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub coords: usize,
    pub max_rel_err: f64,
}

fn check_slice(name: &'static str, x: &[f64], analytic: &[f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> CheckResult {
    let mut x = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let num = central_diff(&mut x, i, STEP, &mut f);
        worst = worst.max(rel_err(analytic[i], num, FLOOR));
    }
    CheckResult {
        name,
        coords: coords.len(),
        max_rel_err: worst,
    }
}

/// L_GB, L_CE and L_DICE against their inputs, every coordinate of a 16×16 map.
pub fn loss_input_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 256;
    let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
    let y: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..=1.0)).collect();
    let all: Vec<usize> = (0..n).collect();
    let (_, g_gb) = losses::gaze_balance_grad_slices(&p, &y, &w).unwrap();
    let (_, g_ce) = losses::cross_entropy_grad_slices(&p, &y).unwrap();
    let (_, g_dice) = losses::dice_grad_slices(&p, &y).unwrap();
    vec![
        check_slice("L_GB wrt prediction", &p, &g_gb, &all, |q| losses::gaze_balance_grad_slices(q, &y, &w).unwrap().0),
        check_slice("L_CE wrt prediction", &p, &g_ce, &all, |q| losses::cross_entropy_grad_slices(q, &y).unwrap().0),
        check_slice("L_DICE wrt prediction", &p, &g_dice, &all, |q| losses::dice_grad_slices(q, &y).unwrap().0),
    ]
}

/// A tiny adaptation problem: U-Net with depth 2, base width 4, on 16×16.
pub struct TinyProblem {
    pub student: ModelParams<f64>,
    pub gaa: GaaParams<f64>,
    pub image: Image<f64>,
    pub pseudo: SegMask,
    pub heatmap: GazeHeatmap<f64>,
    pub weights: WeightMask<f64>,
    pub teacher_features: FeatureMap<f64>,
}

impl TinyProblem {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (16, 16);
        let image = Image::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let teacher: ModelParams<f64> = init_params(2, 4, seed + 1).unwrap();
        let student: ModelParams<f64> = init_params(2, 4, seed + 2).unwrap();
        let teacher_features = backbone::forward(&teacher, &image).unwrap().1;
        let mut gaa: GaaParams<f64> = GaaParams::init(&[8, 16], seed + 3).unwrap();
        // Random projection so the attended half carries gradient.
        let n = gaa.tensors().len();
        for t in &mut gaa.tensors_mut()[n - 2..] {
            for v in &mut t.data {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        let samples = (0..6)
            .map(|i| GazeSample {
                t_ms: 200.0 * i as f64,
                x: rng.gen_range(0.0..1.0),
                y: rng.gen_range(0.0..1.0),
            })
            .collect();
        let traj = GazeTrajectory::new("f", samples).unwrap();
        let heatmap = rasterize_heatmap(&traj, h, w, 0.05 * w as f64 * 2.0).unwrap();
        let weights = regularize_to_weights(&heatmap, 0.2).unwrap();
        let pseudo = SegMask::from_fn(h, w, |y, x| (4..12).contains(&y) && (3..13).contains(&x) && !((6..10).contains(&y) && (6..10).contains(&x)));
        TinyProblem {
            student,
            gaa,
            image,
            pseudo,
            heatmap,
            weights,
            teacher_features,
        }
    }

    fn item(&self) -> AdaptItem<'_, f64> {
        AdaptItem {
            image: &self.image,
            pseudo: &self.pseudo,
            heatmap: &self.heatmap,
            weights: &self.weights,
            teacher_features: &self.teacher_features,
        }
    }

    /// Value and gradients of the weighted objective.
    pub fn objective(&self, w: &LossWeights) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut gs = self.student.zero_grads();
        let mut gg = self.gaa.zero_grads();
        let (_, total) = adaptation_item_grad(&self.student, &self.gaa, &self.item(), w, 1.0, &mut gs, &mut gg).unwrap();
        (total, gs, gg)
    }

    fn value(&self, w: &LossWeights) -> f64 {
        let mut gs = self.student.zero_grads();
        let mut gg = self.gaa.zero_grads();
        adaptation_item_grad(&self.student, &self.gaa, &self.item(), w, 1.0, &mut gs, &mut gg).unwrap().1
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Student(usize, usize),
    Gaa(usize, usize),
}

fn sample_slots(p: &TinyProblem, rng: &mut ChaCha8Rng, count: usize, student: bool, gaa: bool) -> Vec<Slot> {
    let mut all = Vec::new();
    if student {
        for (t, x) in p.student.tensors().iter().enumerate() {
            all.extend((0..x.data.len()).map(|k| Slot::Student(t, k)));
        }
    }
    if gaa {
        for (t, x) in p.gaa.tensors().iter().enumerate() {
            all.extend((0..x.data.len()).map(|k| Slot::Gaa(t, k)));
        }
    }
    (0..count).map(|_| all[rng.gen_range(0..all.len())]).collect()
}

fn check_params(name: &'static str, p: &mut TinyProblem, w: LossWeights, slots: &[Slot]) -> CheckResult {
    let (_, gs, gg) = p.objective(&w);
    let mut worst: f64 = 0.0;
    for &s in slots {
        let (analytic, orig) = match s {
            Slot::Student(t, k) => (gs[t][k], p.student.tensors()[t].data[k]),
            Slot::Gaa(t, k) => (gg[t][k], p.gaa.tensors()[t].data[k]),
        };
        let mut eval_at = |v: f64| {
            match s {
                Slot::Student(t, k) => p.student.tensors_mut()[t].data[k] = v,
                Slot::Gaa(t, k) => p.gaa.tensors_mut()[t].data[k] = v,
            }
            p.value(&w)
        };
        let num = (eval_at(orig + STEP) - eval_at(orig - STEP)) / (2.0 * STEP);
        eval_at(orig);
        let e = rel_err(analytic, num, FLOOR);
        if std::env::var("GRADCHECK_VERBOSE").is_ok() && e > 1e-5 {
            eprintln!("{name}: a={analytic:e} n={num:e} err={e:e}");
        }
        worst = worst.max(e);
    }
    CheckResult {
        name,
        coords: slots.len(),
        max_rel_err: worst,
    }
}

fn only(l_gaa: f64, l_gb: f64, l_dice: f64, l_ce: f64) -> LossWeights {
    LossWeights {
        lambda_gaa: l_gaa,
        lambda_gb: l_gb,
        lambda_dice: l_dice,
        lambda_ce: l_ce,
    }
}

/// Each objective differentiated through the tiny network, 120 sampled
/// parameter coordinates per check.
pub fn network_checks(seed: u64) -> Vec<CheckResult> {
    let mut p = TinyProblem::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let student_slots = sample_slots(&p, &mut rng, 120, true, false);
    let gaa_slots = sample_slots(&p, &mut rng, 120, true, true);
    let extractor_slots = sample_slots(&p, &mut rng, 120, false, true);
    vec![
        check_params("L_GB through U-Net", &mut p, only(0.0, 1.0, 0.0, 0.0), &student_slots),
        check_params("L_CE through U-Net", &mut p, only(0.0, 0.0, 0.0, 1.0), &student_slots),
        check_params("L_DICE through U-Net", &mut p, only(0.0, 0.0, 1.0, 0.0), &student_slots),
        check_params("L_GAA through U-Net + gaze branch", &mut p, only(1.0, 0.0, 0.0, 0.0), &gaa_slots),
        check_params("L_GAA through gaze extractor + projection", &mut p, only(1.0, 0.0, 0.0, 0.0), &extractor_slots),
        check_params("weighted total objective", &mut p, only(0.7, 1.3, 0.5, 2.0), &gaa_slots),
    ]
}
