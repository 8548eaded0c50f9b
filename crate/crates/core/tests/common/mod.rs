#![allow(dead_code)]
//! Generators and independent reference checks shared by the property suites
//! and the acceptance runner. Each `check_*` returns a one-line summary on
//! success and the first counterexample on failure.

use ndarray::Array2;
use pill_core::augment::{dist_adjust, sim_adjust};
use pill_core::defenses::{bulyan, coord_median, krum, multi_krum, trim_mean};
use pill_core::nn::{DenseNet, ParamVector, Shape};
use pill_core::pill::{build_blueprint, max_pill_search, min_pill_search, pill_search, SearchOptions, SearchOrder};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn pv(values: Vec<f64>) -> ParamVector {
    ParamVector::from_vec(values)
}

pub fn random_vec<R: Rng>(rng: &mut R, d: usize, scale: f64) -> ParamVector {
    pv((0..d).map(|_| scale * gauss(rng)).collect())
}

/// A cluster of honest-looking updates plus a few scaled outliers.
pub fn random_updates<R: Rng>(rng: &mut R, k: usize, d: usize) -> Vec<ParamVector> {
    let center: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
    let spread = rng.random_range(0.05..1.0);
    let outliers = rng.random_range(0..=k / 3);
    let mut out: Vec<ParamVector> = (0..k)
        .map(|i| {
            let s = if i < outliers { rng.random_range(3.0..20.0) } else { 1.0 };
            pv(center.iter().map(|c| s * (c + spread * gauss(rng))).collect())
        })
        .collect();
    out.shuffle(rng);
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sq_dist(a: &ParamVector, b: &ParamVector) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean(vs: &[&ParamVector]) -> Vec<f64> {
    let d = vs[0].len();
    (0..d)
        .map(|j| vs.iter().map(|v| v.as_slice()[j]).sum::<f64>() / vs.len() as f64)
        .collect()
}

/// Calls `f` on every `r`-subset of `items`.
fn for_each_subset(items: &[usize], r: usize, f: &mut impl FnMut(&[usize])) {
    fn go(items: &[usize], r: usize, start: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == r {
            f(cur);
            return;
        }
        for i in start..items.len() {
            if items.len() - i < r - cur.len() {
                break;
            }
            cur.push(items[i]);
            go(items, r, i + 1, cur, f);
            cur.pop();
        }
    }
    go(items, r, 0, &mut Vec::new(), f);
}

/// Krum score by exhaustive search: the cheapest set of `neighbors` others.
pub fn bf_krum_score(updates: &[ParamVector], pool: &[usize], i: usize, neighbors: usize) -> f64 {
    let others: Vec<usize> = pool.iter().copied().filter(|&j| j != i).collect();
    let mut best = f64::INFINITY;
    for_each_subset(&others, neighbors, &mut |s| {
        let cost: f64 = s.iter().map(|&j| sq_dist(&updates[i], &updates[j])).sum();
        best = best.min(cost);
    });
    best
}

fn bf_pick(updates: &[ParamVector], pool: &[usize], neighbors: usize) -> usize {
    let scores: Vec<f64> = pool.iter().map(|&i| bf_krum_score(updates, pool, i, neighbors)).collect();
    let low = scores.iter().copied().fold(f64::INFINITY, f64::min);
    scores.iter().position(|&s| s == low).unwrap()
}

pub fn bf_krum(updates: &[ParamVector], m: usize) -> Vec<f64> {
    let pool: Vec<usize> = (0..updates.len()).collect();
    updates[bf_pick(updates, &pool, updates.len() - m - 2)].as_slice().to_vec()
}

/// Indices chosen by Krum applied `count` times to a shrinking pool.
pub fn bf_selection(updates: &[ParamVector], m: usize, count: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..updates.len()).collect();
    let mut chosen = Vec::new();
    while chosen.len() < count {
        let n = pool.len();
        let pos = if n == 1 {
            0
        } else {
            bf_pick(updates, &pool, n.saturating_sub(m + 2).clamp(1, n - 1))
        };
        chosen.push(pool.remove(pos));
    }
    chosen
}

pub fn bf_mkrum(updates: &[ParamVector], m: usize, c: usize) -> Vec<f64> {
    let sel = bf_selection(updates, m, c);
    mean(&sel.iter().map(|&i| &updates[i]).collect::<Vec<_>>())
}

/// `r`-th smallest value (0-based) by rank counting, no sorting.
fn order_stat(values: &[f64], r: usize) -> f64 {
    for (i, &v) in values.iter().enumerate() {
        let below = values.iter().filter(|&&w| w < v).count();
        let ties_before = values[..i].iter().filter(|&&w| w == v).count();
        if below + ties_before == r {
            return v;
        }
    }
    unreachable!()
}

fn column(updates: &[&ParamVector], j: usize) -> Vec<f64> {
    updates.iter().map(|u| u.as_slice()[j]).collect()
}

fn median_of(col: &[f64]) -> f64 {
    let n = col.len();
    if n % 2 == 1 {
        order_stat(col, n / 2)
    } else {
        0.5 * (order_stat(col, n / 2 - 1) + order_stat(col, n / 2))
    }
}

pub fn bf_median(updates: &[ParamVector]) -> Vec<f64> {
    let refs: Vec<&ParamVector> = updates.iter().collect();
    (0..updates[0].len()).map(|j| median_of(&column(&refs, j))).collect()
}

pub fn bf_trim(updates: &[ParamVector], b: usize) -> Vec<f64> {
    let refs: Vec<&ParamVector> = updates.iter().collect();
    let n = updates.len();
    (0..updates[0].len())
        .map(|j| {
            let col = column(&refs, j);
            (b..n - b).map(|r| order_stat(&col, r)).sum::<f64>() / (n - 2 * b) as f64
        })
        .collect()
}

pub fn bf_bulyan(updates: &[ParamVector], m: usize) -> Vec<f64> {
    let theta = updates.len() - 2 * m;
    let beta = theta - 2 * m;
    let sel: Vec<&ParamVector> = bf_selection(updates, m, theta).iter().map(|&i| &updates[i]).collect();
    (0..updates[0].len())
        .map(|j| {
            let mut col = column(&sel, j);
            let med = median_of(&col);
            let mut total = 0.0;
            for _ in 0..beta {
                let gaps: Vec<f64> = col.iter().map(|v| (v - med).abs()).collect();
                let pos = (0..gaps.len()).min_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).unwrap();
                total += col.remove(pos);
            }
            total / beta as f64
        })
        .collect()
}

/// Every Krum-family and coordinate rule against the exhaustive references.
pub fn check_aggregation_oracles(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..instances {
        let k = rng.random_range(5..=12);
        let d = rng.random_range(1..=30);
        let ups = random_updates(&mut rng, k, d);
        let m = rng.random_range(0..=(k - 3).min(4));
        let c = rng.random_range(1..=k - m);
        let b = rng.random_range(0..=(k - 1) / 2);
        let mut compare = |rule: &str, got: &[f64], want: Vec<f64>| -> Result<(), String> {
            let e = max_abs_diff(got, &want);
            worst = worst.max(e);
            if e > 1e-12 {
                return Err(format!("{rule} case {case} (K={k}, d={d}, m={m}): max diff {e:.3e}"));
            }
            Ok(())
        };
        compare("krum", krum(&ups, m).unwrap().global_update.as_slice(), bf_krum(&ups, m))?;
        compare("mkrum", multi_krum(&ups, m, c).unwrap().global_update.as_slice(), bf_mkrum(&ups, m, c))?;
        compare("median", coord_median(&ups).unwrap().global_update.as_slice(), bf_median(&ups))?;
        compare("trim", trim_mean(&ups, b).unwrap().global_update.as_slice(), bf_trim(&ups, b))?;
        let mb = rng.random_range(0..=(k - 3) / 4);
        compare("bulyan", bulyan(&ups, mb, false).unwrap().global_update.as_slice(), bf_bulyan(&ups, mb))?;
    }
    Ok(format!("{instances} instances, max diff {worst:.1e}"))
}

pub fn random_dims<R: Rng>(rng: &mut R, min_layers: usize, max_layers: usize, max_width: usize) -> Vec<usize> {
    let layers = rng.random_range(min_layers..=max_layers);
    (0..=layers).map(|_| rng.random_range(2..=max_width)).collect()
}

pub fn random_batch<R: Rng>(rng: &mut R, n: usize, dim: usize, classes: usize) -> (Array2<f64>, Vec<usize>) {
    let x = Array2::from_shape_fn((n, dim), |_| gauss(rng));
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

/// Backprop gradients against central differences of the loss.
pub fn check_gradients(nets: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for case in 0..nets {
        let dims = random_dims(&mut rng, 1, 4, 7);
        let mut net = DenseNet::init(&dims, rng.random()).unwrap();
        // non-zero biases keep pre-activations off the ReLU kink
        for p in net.params_mut().as_mut_slice() {
            *p += 0.1 * gauss(&mut rng);
        }
        let n = rng.random_range(1..=8);
        let (x, y) = random_batch(&mut rng, n, dims[0], *dims.last().unwrap());
        let analytic = net.grad(x.view(), &y).unwrap();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, g) in numeric.iter_mut().enumerate() {
            let mut plus = net.clone();
            plus.params_mut().as_mut_slice()[j] += h;
            let mut minus = net.clone();
            minus.params_mut().as_mut_slice()[j] -= h;
            *g = (plus.loss(x.view(), &y).unwrap() - minus.loss(x.view(), &y).unwrap()) / (2.0 * h);
        }
        let num = ParamVector::new(numeric, net.shape().clone()).unwrap();
        let scale = analytic.norm().max(num.norm()).max(1e-8);
        let rel = analytic.dist(&num) / scale;
        worst = worst.max(rel);
        if rel >= 1e-4 {
            return Err(format!("net {case} {dims:?}: relative error {rel:.3e}"));
        }
    }
    Ok(format!("{nets} nets, max relative error {worst:.1e}"))
}

/// Blueprint widths straight from the rules: ones, then `C, C`.
pub fn blueprint_widths(dims: &[usize]) -> Vec<usize> {
    let l = dims.len() - 1;
    let c = dims[l];
    (1..=l).map(|i| if i + 1 < l { 1 } else { c }).collect()
}

/// `|M|`: input fan-in of the start neuron, hidden pill edges, the output
/// pairing and the biases of every selected hidden neuron.
pub fn expected_ones(dims: &[usize]) -> usize {
    let w = blueprint_widths(dims);
    let l = w.len();
    let c = dims[l];
    let hidden_edges: usize = (2..l).map(|i| w[i - 2] * w[i - 1]).sum();
    let biases: usize = w[..l - 1].iter().sum();
    dims[0] * w[0] + hidden_edges + c + biases
}

/// `|M_disc|`: pill/non-pill crossings of hidden layers plus off-diagonal
/// output edges of the paired neurons.
pub fn expected_disc(dims: &[usize]) -> usize {
    let w = blueprint_widths(dims);
    let l = w.len();
    let c = dims[l];
    let crossings: usize = (2..l)
        .map(|i| w[i - 1] * dims[i - 1] + w[i - 2] * dims[i] - 2 * w[i - 1] * w[i - 2])
        .sum();
    crossings + c * (c - 1)
}

/// Architectures valid for a pill: at least 3 linear layers, penultimate
/// layer at least as wide as the class count.
pub fn random_pill_dims<R: Rng>(rng: &mut R) -> Vec<usize> {
    let layers = rng.random_range(3..=5);
    let classes = rng.random_range(2..=5);
    let mut dims: Vec<usize> = (0..layers).map(|_| rng.random_range(2..=12)).collect();
    dims[layers - 1] = rng.random_range(classes..=classes + 6);
    dims.push(classes);
    dims
}

/// Disjointness, counts, search cost, tie rule, determinism and isolation.
pub fn check_pill_masks(archs: usize, perturbations: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    for case in 0..archs {
        let dims = random_pill_dims(&mut rng);
        let l = dims.len() - 1;
        let classes = dims[l];
        let bp = build_blueprint(&dims, classes).map_err(|e| e.to_string())?;
        if bp.widths() != blueprint_widths(&dims).as_slice() {
            return Err(format!("arch {case} {dims:?}: blueprint {:?}", bp.widths()));
        }
        let net = DenseNet::init(&dims, rng.random()).unwrap();
        let start = rng.random_range(0..dims[1]);
        for order in [SearchOrder::Max, SearchOrder::Min] {
            let opts = SearchOptions { order, signed: false };
            let masks = pill_search(&net, &bp, start, opts).unwrap();
            let (m, disc) = (masks.pill.as_slice(), masks.disc.as_slice());
            if m.iter().chain(disc).any(|&x| x != 0.0 && x != 1.0) {
                return Err(format!("arch {case} {dims:?}: non-binary mask"));
            }
            if m.iter().zip(disc).any(|(a, b)| a * b != 0.0) {
                return Err(format!("arch {case} {dims:?}: M and M_disc overlap"));
            }
            let ones = masks.pill.count_nonzero();
            if ones != expected_ones(&dims) {
                return Err(format!("arch {case} {dims:?}: |M| = {ones}, formula {}", expected_ones(&dims)));
            }
            if masks.disc.count_nonzero() != expected_disc(&dims) {
                return Err(format!("arch {case} {dims:?}: |M_disc| = {}", masks.disc.count_nonzero()));
            }
            let cost: usize = (2..l).map(|i| dims[i] * bp.width(i - 1)).sum();
            if masks.search_evaluations != cost {
                return Err(format!("arch {case} {dims:?}: {} evaluations, expected {cost}", masks.search_evaluations));
            }
            if pill_search(&net, &bp, start, opts).unwrap() != masks {
                return Err(format!("arch {case} {dims:?}: search not deterministic"));
            }
            check_isolation(&net, &masks, perturbations, &mut rng).map_err(|e| format!("arch {case} {dims:?}: {e}"))?;
        }

        // all-equal weights: every rank is a tie, so the lowest indices win
        let mut flat = net.clone();
        flat.params_mut().as_mut_slice().fill(0.25);
        for masks in [max_pill_search(&flat, &bp, start).unwrap(), min_pill_search(&flat, &bp, start).unwrap()] {
            for i in 2..l {
                let want: Vec<usize> = (0..bp.width(i)).collect();
                if masks.selected[i - 1] != want {
                    return Err(format!("arch {case} {dims:?}: tie at layer {i} gave {:?}", masks.selected[i - 1]));
                }
            }
        }
    }
    Ok(format!("{archs} architectures x {perturbations} perturbations"))
}

/// Zero `M_disc`, then perturb everything outside `M ∪ M_disc`: the
/// pre-activations of every selected hidden neuron must not move.
fn check_isolation<R: Rng>(
    net: &DenseNet,
    masks: &pill_core::pill::PillMasks,
    perturbations: usize,
    rng: &mut R,
) -> Result<(), String> {
    let dims = net.layer_dims().to_vec();
    let mut base = net.clone();
    for (p, &d) in base.params_mut().as_mut_slice().iter_mut().zip(masks.disc.as_slice()) {
        if d != 0.0 {
            *p = 0.0;
        }
    }
    let (x, _) = random_batch(rng, 6, dims[0], 2);
    let pill_pre = |n: &DenseNet| -> Vec<Vec<f64>> {
        let pre = n.pre_activations(x.view()).unwrap();
        (0..dims.len() - 2)
            .map(|layer| {
                masks.selected[layer]
                    .iter()
                    .flat_map(|&v| pre[layer].column(v).to_vec())
                    .collect()
            })
            .collect()
    };
    let want = pill_pre(&base);
    let free: Vec<usize> = (0..base.shape().len())
        .filter(|&j| masks.pill.as_slice()[j] == 0.0 && masks.disc.as_slice()[j] == 0.0)
        .collect();
    for trial in 0..perturbations {
        let mut moved = base.clone();
        let p = moved.params_mut().as_mut_slice();
        let count = rng.random_range(1..=free.len());
        for &j in free.choose_multiple(rng, count) {
            p[j] += 5.0 * gauss(rng);
        }
        let got = pill_pre(&moved);
        for (layer, (a, b)) in got.iter().zip(&want).enumerate() {
            if max_abs_diff(a, b) > 1e-12 {
                return Err(format!("perturbation {trial} moved pill layer {}", layer + 1));
            }
        }
    }
    Ok(())
}

/// Random adjustment inputs: honest updates, their mean, a poisoned update
/// and a random mask.
pub struct AdjustCase {
    pub normal: Vec<ParamVector>,
    pub benign: ParamVector,
    pub update: ParamVector,
    pub m_all: ParamVector,
    pub c_up: f64,
    pub c_down: f64,
    pub c_iter: usize,
}

pub fn random_adjust_case<R: Rng>(rng: &mut R) -> AdjustCase {
    let d = rng.random_range(1..=40);
    let m = rng.random_range(1..=6);
    let normal = random_updates(rng, m, d);
    let benign = ParamVector::mean_of(&normal);
    let density = rng.random_range(0.0..1.0);
    let m_all = pv((0..d).map(|_| (rng.random::<f64>() < density) as u8 as f64).collect());
    let scale = 10f64.powf(rng.random_range(-2.0..3.0));
    let update = match rng.random_range(0..4) {
        0 => benign.clone(),
        1 => benign.scale(-scale),
        2 => &benign + &random_vec(rng, d, scale),
        _ => random_vec(rng, d, scale),
    };
    AdjustCase {
        normal,
        benign,
        update,
        m_all,
        c_up: rng.random_range(1.05..4.0),
        c_down: rng.random_range(0.1..0.95),
        c_iter: rng.random_range(1..=30),
    }
}

/// Exit contract of the similarity loop and monotone distance of the
/// distance loop, checked against values recomputed here.
pub fn check_adjustments(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let cos = |a: &ParamVector, b: &ParamVector| {
        let (na, nb) = (a.norm(), b.norm());
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            a.dot(b) / (na * nb)
        }
    };
    let dist = |a: &ParamVector, b: &ParamVector| sq_dist(a, b).sqrt();
    let mut hit_threshold = 0;
    for case in 0..instances {
        let c = random_adjust_case(&mut rng);
        let s_max = c.normal.iter().map(|u| cos(&c.benign, u)).fold(0.0, f64::max);
        let (out, iters) = sim_adjust(&c.update, &c.benign, &c.normal, &c.m_all, c.c_up, c.c_down, c.c_iter);
        let reached = cos(&c.benign, &out) >= s_max - 1e-12;
        if !(reached || iters == c.c_iter) || iters > c.c_iter {
            return Err(format!("sim_adjust case {case}: cos {} < {s_max} after {iters}/{}", cos(&c.benign, &out), c.c_iter));
        }
        if iters > 0 && cos(&c.benign, &c.update) >= s_max + 1e-12 {
            return Err(format!("sim_adjust case {case}: touched an update already above threshold"));
        }
        hit_threshold += reached as usize;

        let dist_max = c.normal.iter().map(|u| dist(u, &c.benign)).fold(0.0, f64::max);
        let before = dist(&out, &c.benign);
        let (adj, steps) = dist_adjust(&out, &c.benign, &c.normal, c.c_up, c.c_down);
        let after = dist(&adj, &c.benign);
        if after > before {
            return Err(format!("dist_adjust case {case}: distance grew {before} -> {after}"));
        }
        if steps > 0 && !(after < before) {
            return Err(format!("dist_adjust case {case}: {steps} steps without a strict decrease"));
        }
        // replay the steps to confirm each one was a strict decrease
        let factor = if dist(&out.scale(c.c_down), &c.benign) < dist(&out.scale(c.c_up), &c.benign) {
            c.c_down
        } else {
            c.c_up
        };
        let mut cur = out.clone();
        for s in 0..steps {
            let next = cur.scale(factor);
            if !(dist(&next, &c.benign) < dist(&cur, &c.benign)) {
                return Err(format!("dist_adjust case {case}: step {s} did not decrease"));
            }
            cur = next;
        }
        if max_abs_diff(cur.as_slice(), adj.as_slice()) > 1e-9 * (1.0 + adj.norm()) {
            return Err(format!("dist_adjust case {case}: result is not factor^steps * input"));
        }
        let further = dist(&adj.scale(factor), &c.benign);
        if !(after < dist_max || further >= after) {
            return Err(format!("dist_adjust case {case}: stopped at {after} >= {dist_max} while scaling still helps"));
        }
    }
    Ok(format!("{instances} instances, {hit_threshold} reached S_max"))
}

pub fn flat_shape(d: usize) -> Shape {
    Shape::flat(d)
}

/// D1: blobs `C = 3`, `d = 8`, 3000 train + 1000 test, `[8, 16, 8, 3, 3]`.
pub fn d1_config(seed: u64) -> pill_core::ExperimentConfig {
    pill_core::ExperimentConfig {
        model: vec![8, 16, 8, 3, 3],
        dataset: pill_core::sim::DatasetSpec::Blobs {
            classes: 3,
            dim: 8,
            spread: 1.0,
            train: 3000,
            test: 1000,
            data_seed: Some(1),
        },
        seed,
        ..Default::default()
    }
}

pub fn mnist_file(name: &str) -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist").join(name)
}

/// D2: 6000 MNIST training samples, 2000 test samples, `[784, 64, 32, 10, 10]`.
pub fn d2_config(seed: u64) -> pill_core::ExperimentConfig {
    pill_core::ExperimentConfig {
        model: vec![784, 64, 32, 10, 10],
        dataset: pill_core::sim::DatasetSpec::Idx {
            images: mnist_file("mnist-10k-images-idx3-ubyte.gz"),
            labels: mnist_file("mnist-10k-labels-idx1-ubyte.gz"),
            train: 6000,
            test: Some(2000),
        },
        seed,
        ..Default::default()
    }
}
