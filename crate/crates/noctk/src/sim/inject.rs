//! Packet generation processes: Poisson and GE arrivals in continuous time
//! accumulated onto cycle boundaries, plus trace-driven playback.

use crate::topology::Tile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Continuous-time inter-arrival sampler. Poisson is GE with C^2 = 1.
#[derive(Debug, Clone)]
pub struct GeProcess {
    pub lambda: f64,
    pub scv: f64,
    rng: ChaCha8Rng,
    /// Absolute time of the next arrival.
    next: f64,
}

impl GeProcess {
    /// Per-stream determinism: the stream id folds the (seed, node, flow)
    /// triple so adding flows or nodes leaves other streams untouched.
    pub fn new(lambda: f64, scv: f64, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(stream)));
        let mut p = GeProcess { lambda, scv, rng: rng.clone(), next: f64::INFINITY };
        if lambda > 0.0 {
            let first = p.draw_gap(&mut rng);
            p.rng = rng;
            p.next = first;
        }
        p
    }

    /// GE inter-arrival: zero with probability 1 - tau (a batch member),
    /// else exponential with rate lambda * tau.
    fn draw_gap(&self, rng: &mut ChaCha8Rng) -> f64 {
        let tau = 2.0 / (1.0 + self.scv);
        if rng.gen::<f64>() >= tau {
            0.0
        } else {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            -u.ln() / (self.lambda * tau)
        }
    }

    /// Number of packets born during `cycle` (an empty iterator when none).
    pub fn arrivals_in_cycle(&mut self, cycle: u64) -> u32 {
        if self.lambda <= 0.0 {
            return 0;
        }
        let end = (cycle + 1) as f64;
        let mut n = 0;
        while self.next < end {
            n += 1;
            let mut rng = self.rng.clone();
            let gap = self.draw_gap(&mut rng);
            self.rng = rng;
            self.next += gap;
        }
        n
    }

    /// Draw raw inter-arrival gaps (for statistical tests).
    pub fn sample_gaps(&mut self, n: usize) -> Vec<f64> {
        let mut rng = self.rng.clone();
        let out = (0..n).map(|_| self.draw_gap(&mut rng)).collect();
        self.rng = rng;
        out
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A packet scheduled by a trace file.
#[derive(Debug, Clone, Copy)]
pub struct TracePacket {
    pub cycle: u64,
    pub src: Tile,
    pub dst: Tile,
    pub len: u32,
}

/// Parse `cycle src dst length` lines into a cycle-sorted schedule.
pub fn parse_trace(text: &str, width: u16) -> crate::error::Result<Vec<TracePacket>> {
    use crate::error::Error;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 4 {
            return Err(Error::Parse { line: i + 1, msg: "need `cycle src dst length`".into() });
        }
        let num = |s: &str| -> crate::error::Result<u64> {
            s.parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad token `{s}`") })
        };
        out.push(TracePacket {
            cycle: num(t[0])?,
            src: Tile::from_id(num(t[1])? as usize, width),
            dst: Tile::from_id(num(t[2])? as usize, width),
            len: num(t[3])? as u32,
        });
    }
    out.sort_by_key(|p| p.cycle);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_never_injects() {
        let mut p = GeProcess::new(0.0, 1.0, 1, 2);
        for c in 0..10_000 {
            assert_eq!(p.arrivals_in_cycle(c), 0);
        }
    }

    #[test]
    fn poisson_mean_within_three_sigma() {
        let lambda = 0.01;
        let cycles = 1_000_000u64;
        let mut p = GeProcess::new(lambda, 1.0, 42, 1);
        let mut n = 0u64;
        for c in 0..cycles {
            n += p.arrivals_in_cycle(c) as u64;
        }
        let mean = n as f64 / cycles as f64;
        let sigma = (lambda / cycles as f64).sqrt();
        assert!(
            (mean - lambda).abs() < 3.0 * sigma,
            "mean {mean} vs lambda {lambda} (sigma {sigma})"
        );
    }

    #[test]
    fn ge_scv_matches_over_long_runs() {
        for scv in [1.0, 4.0] {
            let mut p = GeProcess::new(0.02, scv, 7, 3);
            let gaps = p.sample_gaps(200_000);
            let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
            let var =
                gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gaps.len() as f64;
            let measured = var / (mean * mean);
            assert!(
                (measured - scv).abs() / scv < 0.05,
                "scv {measured} vs {scv}"
            );
            assert!((mean - 50.0).abs() / 50.0 < 0.05, "mean gap {mean}");
        }
    }

    /// Kolmogorov-Smirnov test of C^2 = 1 GE inter-arrivals against the
    /// exponential CDF at 5% significance.
    #[test]
    fn ge_degenerate_passes_ks_against_exponential() {
        let lambda = 0.05;
        let mut p = GeProcess::new(lambda, 1.0, 11, 9);
        let mut gaps = p.sample_gaps(5_000);
        gaps.sort_by(f64::total_cmp);
        let n = gaps.len() as f64;
        let mut d_stat = 0.0f64;
        for (i, g) in gaps.iter().enumerate() {
            let cdf = 1.0 - (-lambda * g).exp();
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            d_stat = d_stat.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        let critical = 1.358 / n.sqrt(); // 5% significance
        assert!(d_stat < critical, "KS statistic {d_stat} >= {critical}");
    }

    #[test]
    fn trace_parses_and_sorts() {
        let text = "# demo\n5 0 3 4\n2 1 2 4\n";
        let t = parse_trace(text, 4).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].cycle, 2);
        assert_eq!(t[1].src, Tile::new(0, 0));
        assert!(parse_trace("x 0 1 4\n", 4).is_err());
    }
}
