//! Brute-force oracles and random instance generators shared by the
//! integration tests. Every oracle here is written from the metric's
//! definition, independently of the library code.

#![allow(dead_code)]

pub mod desk;

use anodiff_core::extractor::FeatureMap;
use anodiff_core::tensor::Map2d;
use rand::Rng;

/// Pairwise win rate of positives over negatives, ties count half.
pub fn auroc_bf(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn distinct_desc(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v.dedup();
    v
}

fn counts_at(scores: &[f64], labels: &[bool], tau: f64) -> (usize, usize) {
    let tp = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| **l && **s >= tau)
        .count();
    let fp = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| !**l && **s >= tau)
        .count();
    (tp, fp)
}

/// Step-wise AP: recall increments weighted by precision, one threshold per
/// distinct score, each evaluated by a full scan.
pub fn ap_bf(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|l| **l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for tau in distinct_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, tau);
        let recall = tp as f64 / p;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

pub fn f1max_bf(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|l| **l).count();
    let mut best = 0.0f64;
    for &tau in scores {
        let (tp, fp) = counts_at(scores, labels, tau);
        let fneg = p - tp;
        best = best.max(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64);
    }
    best
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    parent[i] = r;
    r
}

/// Region id per pixel (`None` for background), 8-connectivity, by
/// union-find over neighbour pairs.
pub fn regions_bf(mask: &Map2d) -> Vec<Option<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let on = |y: usize, x: usize| mask.get(y, x) > 0.5;
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            if !on(y, x) {
                continue;
            }
            for y2 in y.saturating_sub(1)..(y + 2).min(h) {
                for x2 in x.saturating_sub(1)..(x + 2).min(w) {
                    if on(y2, x2) {
                        let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, y2 * w + x2));
                        parent[a] = b;
                    }
                }
            }
        }
    }
    (0..h * w)
        .map(|i| {
            if on(i / w, i % w) {
                Some(find(&mut parent, i))
            } else {
                None
            }
        })
        .collect()
}

/// PRO curve from (0, 0) through one point per distinct pixel value, then
/// its normalized trapezoid area up to `limit`.
pub fn pro_bf(maps: &[Map2d], masks: &[Map2d], limit: f64) -> f64 {
    let mut normal = Vec::new();
    let mut regions: Vec<Vec<f64>> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let ids = regions_bf(mask);
        let mut local: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        for (i, id) in ids.iter().enumerate() {
            match id {
                Some(r) => local.entry(*r).or_default().push(map.data()[i]),
                None => normal.push(map.data()[i]),
            }
        }
        regions.extend(local.into_values());
    }
    let all: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    let mut curve = vec![(0.0, 0.0)];
    for tau in distinct_desc(&all) {
        let fpr = normal.iter().filter(|v| **v >= tau).count() as f64 / normal.len() as f64;
        let overlap = regions
            .iter()
            .map(|r| r.iter().filter(|v| **v >= tau).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, overlap));
    }
    let mut area = 0.0;
    for k in 1..curve.len() {
        let (x0, y0) = curve[k - 1];
        let (x1, y1) = curve[k];
        if x0 >= limit {
            break;
        }
        let (xe, ye) = if x1 > limit {
            (limit, y0 + (y1 - y0) * (limit - x0) / (x1 - x0))
        } else {
            (x1, y1)
        };
        area += (xe - x0) * (y0 + ye) / 2.0;
    }
    area / limit
}

/// `min over reference positions of 1 − cos`, by explicit nested loops over
/// channel-major storage; zero vectors have cosine 0.
pub fn layer_map_bf(ft: &FeatureMap, fr: &FeatureMap) -> Vec<f64> {
    let c = ft.channels;
    let at =
        |f: &FeatureMap, ch: usize, y: usize, x: usize| f.data[(ch * f.height + y) * f.width + x];
    let mut out = Vec::new();
    for y in 0..ft.height {
        for x in 0..ft.width {
            let mut best = f64::INFINITY;
            for y2 in 0..fr.height {
                for x2 in 0..fr.width {
                    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                    for ch in 0..c {
                        let (a, b) = (at(ft, ch, y, x), at(fr, ch, y2, x2));
                        dot += a * b;
                        na += a * a;
                        nb += b * b;
                    }
                    let cos = if na == 0.0 || nb == 0.0 {
                        0.0
                    } else {
                        dot / (na.sqrt() * nb.sqrt())
                    };
                    best = best.min(1.0 - cos);
                }
            }
            out.push(best);
        }
    }
    out
}

/// Scores and labels with both classes; discrete scores half of the time so
/// ties are common.
pub fn random_labeled(rng: &mut impl Rng, max_len: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=max_len);
    let discrete = rng.random_bool(0.5);
    let scores: Vec<f64> = (0..n)
        .map(|_| {
            if discrete {
                rng.random_range(0..5) as f64
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    (scores, labels)
}

/// One to three maps of at most 8×8 with random masks, containing at least
/// one region and one normal pixel in total.
pub fn random_pro_instance(rng: &mut impl Rng) -> (Vec<Map2d>, Vec<Map2d>) {
    loop {
        let k = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let discrete = rng.random_bool(0.5);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..k {
            let p = rng.random_range(0.05..0.5);
            let mask = Map2d::from_fn(h, w, |_, _| if rng.random_bool(p) { 1.0 } else { 0.0 });
            let map = Map2d::from_fn(h, w, |y, x| {
                let bump = 0.5 * mask.get(y, x);
                if discrete {
                    rng.random_range(0..4) as f64 + bump
                } else {
                    rng.random::<f64>() + bump
                }
            });
            maps.push(map);
            masks.push(mask);
        }
        let on: usize = masks
            .iter()
            .map(|m| m.data().iter().filter(|v| **v > 0.5).count())
            .sum();
        if on > 0 && on < k * h * w {
            return (maps, masks);
        }
    }
}

/// Feature pair of at most `max_hw`×`max_hw`×`max_c`, sharing the channel
/// count, with occasional zero vectors.
pub fn random_feature_pair(
    rng: &mut impl Rng,
    max_hw: usize,
    max_c: usize,
) -> (FeatureMap, FeatureMap) {
    let c = rng.random_range(1..=max_c);
    let make = |rng: &mut dyn rand::RngCore| {
        let (h, w) = (rng.random_range(1..=max_hw), rng.random_range(1..=max_hw));
        let mut data: Vec<f64> = (0..c * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        if rng.random_bool(0.2) {
            let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
            for ch in 0..c {
                data[(ch * h + y) * w + x] = 0.0;
            }
        }
        FeatureMap::new(c, h, w, data).unwrap()
    };
    let a = make(rng);
    let b = make(rng);
    (a, b)
}

/// `‖a − b‖ / ‖b‖`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}
