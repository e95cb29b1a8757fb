//! Quick invariant suites run by `magicnet selftest`.

use magicnet_core::blending::{blend, weight_map, ClassHistogram, WeightMap};
use magicnet_core::eval::{evaluate, EvalConfig, Segmenter};
use magicnet_core::losses::{
    alpha_schedule, assemble_total, ce_slice, dice_loss_slice, lr_schedule, LossReport, LossWeights, LrSchedule,
};
use magicnet_core::magic_cube::{cross_mix, cross_recover, partition, recover, shuffle_within, unshuffle, SourceTag};
use magicnet_core::phantom::{generate_case, PhantomSpec};
use magicnet_core::rng::{self, stream};
use magicnet_core::volume::{normalize, Dims, LabelMap, ProbKind, ProbMap, Volume};
use rand::Rng;

use crate::mgv;

/// Outcome of one suite.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Suite = fn() -> Result<String, String>;

const SUITES: &[(&str, Suite)] = &[
    ("geometry", geometry),
    ("blending", blending),
    ("gradients", gradients),
    ("schedules", schedules),
    ("metrics", metrics),
    ("mgv-roundtrip", mgv_roundtrip),
];

pub fn run_all() -> Vec<Check> {
    SUITES
        .iter()
        .map(|(name, f)| match f() {
            Ok(detail) => Check { name, passed: true, detail },
            Err(detail) => Check { name, passed: false, detail },
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn core<T>(r: magicnet_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_volume(dims: Dims, r: &mut impl Rng) -> Volume {
    Volume::from_fn(dims, |_, _, _| r.random_range(-1.0..1.0))
}

fn geometry() -> Result<String, String> {
    let mut r = rng::derive(1, stream::TRAIN_STEP, 0);
    let dims = Dims::cube(12);
    let mut trials = 0;
    for n in 1..=3 {
        for _ in 0..20 {
            let vols: Vec<Volume> = (0..4).map(|_| random_volume(dims, &mut r)).collect();
            let grids = vols
                .iter()
                .enumerate()
                .map(|(i, v)| core(partition(v, n)).map(|g| g.with_source(SourceTag::unlabeled(i))))
                .collect::<Result<Vec<_>, _>>()?;
            for (v, g) in vols.iter().zip(&grids) {
                ensure(&core(recover(g))? == v, || format!("recover∘partition differs for n={n}"))?;
                let s = shuffle_within(g, &mut r);
                ensure(&core(recover(&unshuffle(&s)))? == v, || format!("unshuffle is not inverse for n={n}"))?;
            }
            let (mixed, mask) = core(cross_mix(&grids, None, &mut r))?;
            let mixed_vols = mixed.iter().map(|g| core(recover(g))).collect::<Result<Vec<_>, _>>()?;
            let back = core(cross_recover(&mixed_vols, &mask, n))?;
            ensure(back == vols, || format!("cross_recover∘cross_mix differs for n={n}"))?;
            trials += 1;
        }
    }
    Ok(format!("{trials} batches"))
}

fn blending() -> Result<String, String> {
    let dims = Dims::new(4, 3, 2);
    let mut r = rng::derive(2, stream::TRAIN_STEP, 0);
    let probs = |r: &mut rng::Rng| -> Result<ProbMap, String> {
        let logits: Vec<f32> = (0..3 * dims.len()).map(|_| r.random_range(-2.0..2.0)).collect();
        let p = core(ProbMap::new(3, dims, ProbKind::Logits, logits))?;
        core(magicnet_core::volume::softmax_channels(&p))
    };
    let pt = probs(&mut r)?;
    let pin = probs(&mut r)?;
    ensure(core(blend(&pt, &pin, &core(WeightMap::constant(dims, 0.0))?))? == pt, || "Ω≡0 is not the teacher".into())?;
    ensure(core(blend(&pt, &pin, &core(WeightMap::constant(dims, 1.0))?))? == pin, || "Ω≡1 is not cube-wise".into())?;
    let h = core(ClassHistogram::from_window(2, 40, vec![vec![10, 90]]))?;
    let labels = core(LabelMap::new(Dims::new(3, 1, 1), 2, vec![0, 1, 2]))?;
    let w = core(weight_map(&labels, &h, false))?;
    let want = [0.0, 10.0 / 90.0, 1.0];
    ensure(w.data().iter().zip(want).all(|(&a, b)| (a as f64 - b).abs() < 1e-7), || format!("weights {:?}", w.data()))?;
    Ok("boundary cases and weights".into())
}

fn gradients() -> Result<String, String> {
    let mut r = rng::derive(3, stream::TRAIN_STEP, 0);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (c, n) = (3, 8);
        let p: Vec<f64> = (0..c * n).map(|_| r.random_range(0.05..1.0)).collect();
        let y: Vec<u8> = (0..n).map(|_| r.random_range(0..c as u8)).collect();
        let (_, g) = core(dice_loss_slice(&p, c, &y, true))?;
        worst = worst.max(fd_error(&g, &p, |x| dice_loss_slice(x, c, &y, true).map(|v| v.0))?);
        let l: Vec<f64> = (0..n * 27).map(|_| r.random_range(-3.0..3.0)).collect();
        let t: Vec<usize> = (0..n).map(|_| r.random_range(0..27)).collect();
        let (_, g) = core(ce_slice(&l, 27, &t))?;
        worst = worst.max(fd_error(&g, &l, |x| ce_slice(x, 27, &t).map(|v| v.0))?);
    }
    ensure(worst <= 1e-4, || format!("worst relative error {worst:.2e}"))?;
    Ok(format!("worst relative error {worst:.2e}"))
}

/// `‖g − fd‖ / ‖fd‖` with central differences.
fn fd_error(g: &[f64], x: &[f64], f: impl Fn(&[f64]) -> magicnet_core::Result<f64>) -> Result<f64, String> {
    let h = 1e-6;
    let mut x = x.to_vec();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..x.len() {
        let keep = x[i];
        x[i] = keep + h;
        let up = core(f(&x))?;
        x[i] = keep - h;
        let down = core(f(&x))?;
        x[i] = keep;
        let fd = (up - down) / (2.0 * h);
        num += (g[i] - fd).powi(2);
        den += fd * fd;
    }
    Ok(num.sqrt() / den.sqrt().max(1e-12))
}

fn schedules() -> Result<String, String> {
    let w = LossWeights { alpha: 0.5, beta: 0.1, alpha_max: 1.0, ramp_iters: 800 };
    ensure((alpha_schedule(0, &w) - (-5.0f64).exp()).abs() < 1e-9, || "α(0) is not α_max·e^-5".into())?;
    let poly = LrSchedule::Poly { power: 0.9 };
    ensure(lr_schedule(poly, 0, 0.01, 2000) == 0.01, || "lr(0) is not 0.01".into())?;
    ensure(lr_schedule(poly, 2000, 0.01, 2000) == 0.0, || "lr(T) is not 0".into())?;
    let parts = LossReport {
        l_cross_sup: 1.0,
        l_in_sup: 1.0,
        l_cross_in_unsup: 1.0,
        l_cls_sup: 1.0,
        l_cls_unsup: 1.0,
        total: 0.0,
    };
    let total = core(assemble_total(parts, &w))?.total;
    ensure((total - 2.7).abs() < 1e-9, || format!("assembled total {total}"))?;
    Ok("α, lr and total".into())
}

struct Oracle<'a>(&'a [(String, Volume, LabelMap)]);

impl Segmenter for Oracle<'_> {
    fn logits(&self, v: &Volume) -> magicnet_core::Result<ProbMap> {
        let (_, _, y) = self.0.iter().find(|(_, x, _)| normalize(x).as_ref() == Ok(v)).expect("known case");
        Ok(ProbMap::one_hot(y).with_kind(ProbKind::Logits))
    }
}

fn metrics() -> Result<String, String> {
    let spec = PhantomSpec::desk_default();
    let cases = (0..2)
        .map(|i| {
            core(generate_case(&spec, &mut rng::derive(4, stream::TEST_SET, i))).map(|(v, y)| (format!("c{i}"), v, y))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let table = core(evaluate(&Oracle(&cases), &cases, &EvalConfig::default()))?;
    ensure(table.mean_dsc() == 100.0 && table.mean_nsd() == 100.0, || {
        format!("perfect prediction scored {} / {}", table.mean_dsc(), table.mean_nsd())
    })?;
    Ok("perfect prediction scores 100".into())
}

fn mgv_roundtrip() -> Result<String, String> {
    let spec = PhantomSpec::desk_default();
    let (v, y) = core(generate_case(&spec, &mut rng::derive(5, stream::PHANTOM_CASE, 0)))?;
    let p = std::path::Path::new("<memory>");
    let v2 = mgv::decode(&mgv::encode_volume(&v), p).map_err(|e| e.to_string())?;
    let y2 = mgv::decode(&mgv::encode_labels(&y), p).map_err(|e| e.to_string())?;
    ensure(matches!(v2, mgv::RawGrid::Volume(ref a) if a == &v), || "volume changed".into())?;
    ensure(matches!(y2, mgv::RawGrid::Labels(ref a) if a == &y), || "labels changed".into())?;
    Ok("volume and labels".into())
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_suites_pass() {
        for c in super::run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
