//! Brute-force reference implementations shared by the integration tests and the
//! acceptance run. Written from the definitions with plain loops; nothing here
//! calls into the library.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// 1-based ranks, ties sharing the mean of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Complete rating table: `scores[subject][image][metric]`.
#[derive(Clone, Debug)]
pub struct Table {
    pub scores: Vec<Vec<[f64; 3]>>,
}

impl Table {
    pub fn subjects(&self) -> usize {
        self.scores.len()
    }

    pub fn images(&self) -> usize {
        self.scores[0].len()
    }

    pub fn subject_name(s: usize) -> String {
        format!("s{s:02}")
    }

    pub fn image_name(i: usize) -> String {
        format!("t{i:02}")
    }

    /// `(subject, triplet, metric index, score)` for every cell.
    pub fn cells(&self) -> Vec<(String, String, usize, f64)> {
        let mut out = Vec::new();
        for (s, row) in self.scores.iter().enumerate() {
            for (i, cell) in row.iter().enumerate() {
                for (m, &v) in cell.iter().enumerate() {
                    out.push((Self::subject_name(s), Self::image_name(i), m, v));
                }
            }
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Subjects flagged by the BT.500 rule in any channel.
pub fn rejected_subjects(t: &Table) -> Vec<usize> {
    let (ns, ni) = (t.subjects(), t.images());
    let mut rejected = vec![false; ns];
    for m in 0..3 {
        let mut p = vec![0usize; ns];
        let mut q = vec![0usize; ns];
        for i in 0..ni {
            let col: Vec<f64> = (0..ns).map(|s| t.scores[s][i][m]).collect();
            let mu = mean(&col);
            let m2 = col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / ns as f64;
            let m4 = col.iter().map(|x| (x - mu).powi(4)).sum::<f64>() / ns as f64;
            let beta2 = m4 / (m2 * m2);
            let k = if (2.0..=4.0).contains(&beta2) {
                2.0
            } else {
                20f64.sqrt()
            };
            let sd = sample_std(&col);
            for s in 0..ns {
                if col[s] > mu + k * sd {
                    p[s] += 1;
                }
                if col[s] < mu - k * sd {
                    q[s] += 1;
                }
            }
        }
        for s in 0..ns {
            let total = (p[s] + q[s]) as f64;
            if total > 0.0
                && total / ni as f64 > 0.05
                && (p[s] as f64 - q[s] as f64).abs() / total < 0.3
            {
                rejected[s] = true;
            }
        }
    }
    (0..ns).filter(|&s| rejected[s]).collect()
}

/// Screen, z-score each kept subject per channel, map ±3σ onto [0, 100], average.
pub fn mos(t: &Table) -> (Vec<usize>, Vec<[f64; 3]>) {
    let rejected = rejected_subjects(t);
    let kept: Vec<usize> = (0..t.subjects())
        .filter(|s| !rejected.contains(s))
        .collect();
    let mut out = vec![[0.0; 3]; t.images()];
    for m in 0..3 {
        for &s in &kept {
            let own: Vec<f64> = t.scores[s].iter().map(|c| c[m]).collect();
            let (mu, sd) = (mean(&own), sample_std(&own));
            for (i, &v) in own.iter().enumerate() {
                let z = (v - mu) / sd;
                let rescaled = ((z + 3.0) / 6.0 * 100.0).clamp(0.0, 100.0);
                out[i][m] += rescaled / kept.len() as f64;
            }
        }
    }
    (rejected, out)
}

/// Up to `max_subjects` subjects (at least 2) rating up to `max_images` images
/// (at least 2) on a 0–100 scale, with per-subject bias and spread.
pub fn random_table(rng: &mut ChaCha8Rng, max_subjects: usize, max_images: usize) -> Table {
    let ns = rng.random_range(2..=max_subjects);
    let ni = rng.random_range(2..=max_images);
    let truth: Vec<[f64; 3]> = (0..ni)
        .map(|_| [0; 3].map(|_| rng.random_range(5.0..95.0)))
        .collect();
    let scores = (0..ns)
        .map(|_| {
            let bias = rng.random_range(-15.0..15.0);
            let noise = rng.random_range(1.0..20.0);
            truth
                .iter()
                .map(|cell| {
                    cell.map(|v: f64| {
                        (v + bias + rng.random_range(-noise..noise)).clamp(0.0, 100.0)
                    })
                })
                .collect()
        })
        .collect();
    Table { scores }
}

/// 29 honest subjects around a per-image consensus of ≈10 or ≈90 (σ = 3), plus a
/// planted last subject scoring 100 where the consensus is low and 0 where it is
/// high, on 20 images.
pub fn planted_table(rng: &mut ChaCha8Rng) -> Table {
    let noise = Normal::new(0.0, 3.0).unwrap();
    let consensus: Vec<f64> = (0..20)
        .map(|i| {
            if i % 2 == 0 {
                rng.random_range(5.0..15.0)
            } else {
                rng.random_range(85.0..95.0)
            }
        })
        .collect();
    let mut scores: Vec<Vec<[f64; 3]>> = (0..29)
        .map(|_| {
            consensus
                .iter()
                .map(|&c| [0; 3].map(|_| (c + noise.sample(rng)).clamp(0.0, 100.0)))
                .collect()
        })
        .collect();
    scores.push(
        consensus
            .iter()
            .map(|&c| [if c < 50.0 { 100.0 } else { 0.0 }; 3])
            .collect(),
    );
    Table { scores }
}

/// Vectors of length 3–60; about half are drawn from a handful of integers so
/// ties are common.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    loop {
        let n = rng.random_range(3..=60);
        let tied = rng.random_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if tied {
                        rng.random_range(0..6) as f64
                    } else {
                        rng.random_range(-100.0..100.0)
                    }
                })
                .collect()
        };
        let x = draw(rng);
        let y: Vec<f64> = draw(rng).iter().zip(&x).map(|(a, b)| a + 0.5 * b).collect();
        if pearson(&x, &y).is_some() {
            return (x, y);
        }
    }
}
