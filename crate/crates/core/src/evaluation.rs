//! Front sweeps over a preference grid, dominance filtering, hypervolume,
//! nadir points and Recall@K. Losses are minimized, so hypervolume is
//! measured against an upper-right reference point.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::losses::{click_loss_sampled_softmax, order_loss_bce};
use crate::model::{forward_scores, Candidates, ModelError, Parameters};
use crate::sampling::PreferenceVector;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set has no usable prediction positions")]
    EmptyTestSet,
    #[error("front has no points")]
    EmptyFront,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One swept point: the preference that conditioned the model and the two
/// mean losses it produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub pi_o: f64,
    pub l_c: f64,
    pub l_o: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub r_c: f64,
    pub r_o: f64,
}

/// Swept loss pairs in grid order plus the hypervolume reference point
/// (defaults to the nadir of the sweep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Front {
    pub points: Vec<ParetoPoint>,
    pub reference: ReferencePoint,
}

struct EvalPosition {
    prefix_end: usize,
    target: u32,
    label: f64,
}

struct EvalSession {
    inputs: Vec<u32>,
    positions: Vec<EvalPosition>,
}

fn eval_sessions(test: &Dataset, max_len: usize) -> Vec<EvalSession> {
    test.sessions
        .iter()
        .filter(|s| s.click_count() >= 2)
        .map(|s| {
            let window = &s.steps[s.steps.len().saturating_sub(max_len)..];
            let inputs = window[..window.len() - 1].iter().map(|st| st.item).collect();
            let positions = window[1..]
                .iter()
                .enumerate()
                .map(|(t, st)| EvalPosition {
                    prefix_end: t,
                    target: st.item,
                    label: f64::from(st.ordered),
                })
                .collect();
            EvalSession { inputs, positions }
        })
        .collect()
}

/// Mean click and order loss over every test prediction position with the
/// model conditioned on `pi`. `negatives = 0` scores the full vocabulary;
/// otherwise that many shared negatives are drawn per session from `seed`,
/// independent of `pi`, so sweep points stay comparable.
pub fn evaluate_losses(
    params: &Parameters,
    test: &Dataset,
    pi: &PreferenceVector,
    negatives: usize,
    seed: u64,
) -> Result<(f64, f64), EvalError> {
    let config = params.config();
    let sessions = eval_sessions(test, config.max_len);
    if sessions.iter().all(|s| s.positions.is_empty()) {
        return Err(EvalError::EmptyTestSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum_c, mut sum_o, mut count) = (0.0, 0.0, 0usize);

    for session in &sessions {
        let scores = if negatives == 0 {
            forward_scores(params, &session.inputs, pi, Candidates::All)?
        } else {
            let neg_ids: Vec<u32> = (0..negatives)
                .map(|_| rng.random_range(0..config.vocab_size as u32))
                .collect();
            // Candidate columns: one per position's target, then the shared
            // negatives.
            let mut candidates: Vec<u32> =
                session.positions.iter().map(|p| p.target).collect();
            candidates.extend_from_slice(&neg_ids);
            let scores =
                forward_scores(params, &session.inputs, pi, Candidates::Subset(&candidates))?;
            let n_targets = session.positions.len();
            for (i, pos) in session.positions.iter().enumerate() {
                let row = scores.row(pos.prefix_end);
                let positive = row[i];
                let negs: Vec<f64> = (0..negatives)
                    .filter(|&j| neg_ids[j] != pos.target)
                    .map(|j| row[n_targets + j])
                    .collect();
                sum_c += click_loss_sampled_softmax(positive, &negs);
                sum_o += order_loss_bce(positive, pos.label > 0.5);
                count += 1;
            }
            continue;
        };
        for pos in &session.positions {
            let row = scores.row(pos.prefix_end);
            let positive = row[pos.target as usize];
            sum_c += full_softmax_loss(row, pos.target as usize);
            sum_o += order_loss_bce(positive, pos.label > 0.5);
            count += 1;
        }
    }
    Ok((sum_c / count as f64, sum_o / count as f64))
}

fn full_softmax_loss(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln() - row[target]
}

/// Evaluate the grid in order, sharing the negative-sampling seed across
/// entries. The reference point defaults to the sweep's own nadir.
pub fn sweep_front(
    params: &Parameters,
    test: &Dataset,
    grid: &[PreferenceVector],
    negatives: usize,
    seed: u64,
) -> Result<Front, EvalError> {
    sweep_front_with_threads(params, test, grid, negatives, seed, 1)
}

/// Grid entries are independent given the shared seed, so they may be
/// evaluated on up to `threads` worker threads; results keep grid order
/// either way.
pub fn sweep_front_with_threads(
    params: &Parameters,
    test: &Dataset,
    grid: &[PreferenceVector],
    negatives: usize,
    seed: u64,
    threads: usize,
) -> Result<Front, EvalError> {
    let threads = threads.max(1).min(grid.len().max(1));
    let mut points: Vec<Option<ParetoPoint>> = vec![None; grid.len()];
    if threads <= 1 {
        for (slot, pi) in points.iter_mut().zip(grid.iter()) {
            let (l_c, l_o) = evaluate_losses(params, test, pi, negatives, seed)?;
            *slot = Some(ParetoPoint {
                pi_o: pi.pi_o(),
                l_c,
                l_o,
            });
        }
    } else {
        let chunk = grid.len().div_ceil(threads);
        let results: Vec<Result<Vec<(usize, ParetoPoint)>, EvalError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..threads)
                    .map(|w| {
                        scope.spawn(move || {
                            let lo = w * chunk;
                            let hi = ((w + 1) * chunk).min(grid.len());
                            let mut out = Vec::with_capacity(hi.saturating_sub(lo));
                            for i in lo..hi {
                                let (l_c, l_o) =
                                    evaluate_losses(params, test, &grid[i], negatives, seed)?;
                                out.push((
                                    i,
                                    ParetoPoint {
                                        pi_o: grid[i].pi_o(),
                                        l_c,
                                        l_o,
                                    },
                                ));
                            }
                            Ok(out)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
        for result in results {
            for (i, p) in result? {
                points[i] = Some(p);
            }
        }
    }
    let points: Vec<ParetoPoint> = points.into_iter().map(|p| p.unwrap()).collect();
    let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.l_c, p.l_o)).collect();
    let (r_c, r_o) = nadir_point(&coords)?;
    Ok(Front {
        points,
        reference: ReferencePoint { r_c, r_o },
    })
}

/// Keep exactly the points not weakly dominated by any other (minimization);
/// exact duplicates collapse to one. Output is sorted by x ascending.
pub fn dominance_filter(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    sorted.dedup();
    let mut kept: Vec<(f64, f64)> = Vec::new();
    let mut best_y = f64::INFINITY;
    for p in sorted {
        // Everything already seen has x <= p.x; p survives only if it beats
        // the lowest y so far (ties collapse onto the earlier point).
        if p.1 < best_y {
            kept.push(p);
            best_y = p.1;
        }
    }
    kept
}

/// Componentwise maximum over the non-dominated subset.
pub fn nadir_point(points: &[(f64, f64)]) -> Result<(f64, f64), EvalError> {
    let front = dominance_filter(points);
    if front.is_empty() {
        return Err(EvalError::EmptyFront);
    }
    let x = front.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y = front.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    Ok((x, y))
}

/// 2-D hypervolume (minimization) of `points` against `reference`, and the
/// number of non-dominated points flagged for lying outside the reference
/// box (they contribute zero).
pub fn hypervolume_2d_flagged(points: &[(f64, f64)], reference: &ReferencePoint) -> (f64, usize) {
    let front = dominance_filter(points);
    let inside: Vec<(f64, f64)> = front
        .iter()
        .copied()
        .filter(|p| p.0 <= reference.r_c && p.1 <= reference.r_o)
        .collect();
    let flagged = front.len() - inside.len();
    // Sorted by x ascending with strictly decreasing y: sweep rectangles.
    let mut hv = 0.0;
    let mut prev_y = reference.r_o;
    for &(x, y) in &inside {
        hv += (reference.r_c - x) * (prev_y - y);
        prev_y = y;
    }
    (hv, flagged)
}

/// Dominated area against an upper-right reference point; larger is better.
pub fn hypervolume_2d(points: &[(f64, f64)], reference: &ReferencePoint) -> f64 {
    hypervolume_2d_flagged(points, reference).0
}

/// Fraction of test prediction positions whose true next click ranks in the
/// model's top `k` over the full vocabulary conditioned on `pi`. Ties at the
/// k-th logit break by ascending item index.
pub fn recall_at_k(
    params: &Parameters,
    test: &Dataset,
    pi: &PreferenceVector,
    k: usize,
) -> Result<f64, EvalError> {
    assert!(k >= 1, "k must be at least 1");
    let config = params.config();
    let sessions = eval_sessions(test, config.max_len);
    let mut scored = Vec::new();
    for session in &sessions {
        if session.positions.is_empty() {
            continue;
        }
        let scores = forward_scores(params, &session.inputs, pi, Candidates::All)?;
        for pos in &session.positions {
            scored.push((scores.row(pos.prefix_end).to_vec(), pos.target));
        }
    }
    recall_from_scores(scored.iter().map(|(row, t)| (row.as_slice(), *t)), k)
}

/// Shared ranking rule: target is a hit when fewer than `k` items rank ahead
/// of it, where an item ranks ahead on higher logit or on equal logit with a
/// smaller index.
fn recall_from_scores<'a, I>(rows: I, k: usize) -> Result<f64, EvalError>
where
    I: Iterator<Item = (&'a [f64], u32)>,
{
    let mut hits = 0usize;
    let mut total = 0usize;
    for (row, target) in rows {
        let target = target as usize;
        let target_score = row[target];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target_score || (s == target_score && j < target))
            .count();
        hits += usize::from(rank < k);
        total += 1;
    }
    if total == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    Ok(hits as f64 / total as f64)
}

/// Recall of always recommending the `k` most-clicked training items
/// (ties by ascending index), measured over the same positions `recall_at_k`
/// scores.
pub fn popularity_baseline_recall(
    train: &Dataset,
    test: &Dataset,
    k: usize,
    max_len: usize,
) -> Result<f64, EvalError> {
    let popularity = click_popularity(train);
    let top = top_k_items(&popularity, k);
    let mut hits = 0usize;
    let mut total = 0usize;
    for session in eval_sessions(test, max_len) {
        for pos in &session.positions {
            hits += usize::from(top.contains(&pos.target));
            total += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    Ok(hits as f64 / total as f64)
}

/// Per-item click counts.
pub fn click_popularity(ds: &Dataset) -> Vec<usize> {
    let mut counts = vec![0usize; ds.vocab_size()];
    for step in ds.sessions.iter().flat_map(|s| s.steps.iter()) {
        counts[step.item as usize] += 1;
    }
    counts
}

fn top_k_items(popularity: &[usize], k: usize) -> std::collections::HashSet<u32> {
    let mut order: Vec<u32> = (0..popularity.len() as u32).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(popularity[i as usize]), i));
    order.into_iter().take(k).collect()
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Front CSV: `pi_o,l_c,l_o`, one row per grid point, 17 significant digits.
pub fn front_to_csv(front: &Front) -> String {
    let mut out = String::from("pi_o,l_c,l_o\n");
    for p in &front.points {
        out.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", p.pi_o, p.l_c, p.l_o));
    }
    out
}

/// Metrics JSON payload emitted next to the front CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub hv: f64,
    pub reference: [f64; 2],
    pub nadir: [f64; 2],
    pub recall_at_20: f64,
    pub grid_size: usize,
}
