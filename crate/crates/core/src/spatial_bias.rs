//! Relative-position bucketing and the additive attention bias `B = B1D + BH + BV`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::layout::{BBox, Document};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};

pub const SEQ_TABLE: &str = "bias.seq";
pub const HORIZ_TABLE: &str = "bias.horiz";
pub const VERT_TABLE: &str = "bias.vert";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketConfig {
    pub num_buckets: usize,
    pub max_distance: u64,
    pub bidirectional: bool,
}

impl BucketConfig {
    /// Token-index offsets.
    pub const SEQ: BucketConfig = BucketConfig {
        num_buckets: 32,
        max_distance: 128,
        bidirectional: true,
    };
    /// Grid-cell offsets along either page axis.
    pub const AXIS: BucketConfig = BucketConfig {
        num_buckets: 32,
        max_distance: 64,
        bidirectional: true,
    };

    pub fn validate(&self) -> Result<()> {
        let half = if self.bidirectional { self.num_buckets / 2 } else { self.num_buckets };
        if self.num_buckets == 0 || self.num_buckets % 2 != 0 || half < 2 {
            return Err(TiltError::Config(format!(
                "num_buckets must be even and at least 4, got {}",
                self.num_buckets
            )));
        }
        if self.max_distance <= (half / 2) as u64 {
            return Err(TiltError::Config(format!(
                "max_distance {} must exceed {}",
                self.max_distance,
                half / 2
            )));
        }
        Ok(())
    }
}

/// Largest `k` with `exact · (max/exact)^(k/steps) ≤ n`, computed exactly in integers:
/// `(n/exact)^steps ≥ (max/exact)^k  ⇔  n^steps · exact^k ≥ exact^steps · max^k`.
fn log_step(n: u64, exact: u64, max: u64, steps: u32) -> u64 {
    let lhs_base = (n as u128).pow(steps);
    let rhs_base = (exact as u128).pow(steps);
    let mut k = 0;
    while k < steps as u64 {
        let next = k + 1;
        let lhs = lhs_base * (exact as u128).pow(next as u32);
        let rhs = rhs_base * (max as u128).pow(next as u32);
        if lhs < rhs {
            break;
        }
        k = next;
    }
    k
}

/// Maps a signed offset `d = j − i` to a bucket id.
///
/// Positive offsets use the upper half. Small magnitudes get one bucket each; larger
/// magnitudes share logarithmically widening buckets up to `max_distance`.
pub fn bucket(d: i64, cfg: &BucketConfig) -> usize {
    let (half, offset, n) = if cfg.bidirectional {
        let half = cfg.num_buckets / 2;
        (half, if d > 0 { half } else { 0 }, d.unsigned_abs())
    } else {
        (cfg.num_buckets, 0, (-d).max(0) as u64)
    };
    let exact = (half / 2) as u64;
    if n < exact {
        return offset + n as usize;
    }
    let top = (half - 1) as u64;
    if n >= cfg.max_distance {
        return offset + top as usize;
    }
    // n < max_distance, so the log step never exceeds half - exact and n^steps fits in u128
    let k = log_step(n, exact, cfg.max_distance, (half as u64 - exact) as u32);
    offset + (exact + k).min(top) as usize
}

pub fn bucket_1d(d: i64) -> usize {
    bucket(d, &BucketConfig::SEQ)
}

pub fn bucket_axis(dc: i64) -> usize {
    bucket(dc, &BucketConfig::AXIS)
}

/// Row-major `n × n` bucket ids for the three bias components.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasIndices {
    pub n: usize,
    pub seq: Vec<usize>,
    pub horiz: Vec<usize>,
    pub vert: Vec<usize>,
}

impl BiasIndices {
    /// `centers` are quantized grid cells in token order.
    pub fn new(centers: &[(usize, usize)]) -> Self {
        let n = centers.len();
        let mut seq = Vec::with_capacity(n * n);
        let mut horiz = Vec::with_capacity(n * n);
        let mut vert = Vec::with_capacity(n * n);
        for (i, ci) in centers.iter().enumerate() {
            for (j, cj) in centers.iter().enumerate() {
                seq.push(bucket_1d(j as i64 - i as i64));
                horiz.push(bucket_axis(cj.0 as i64 - ci.0 as i64));
                vert.push(bucket_axis(cj.1 as i64 - ci.1 as i64));
            }
        }
        BiasIndices { n, seq, horiz, vert }
    }

    /// Sequential component only, for `n` positions.
    pub fn sequential(n: usize) -> Vec<usize> {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| bucket_1d(j as i64 - i as i64)))
            .collect()
    }
}

/// Learned `[num_buckets, heads]` tables.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasParams<T = f32> {
    pub seq: Tensor<T>,
    pub horiz: Tensor<T>,
    pub vert: Tensor<T>,
}

impl<T: Real> BiasParams<T> {
    pub fn zeros(heads: usize) -> Self {
        let shape = [BucketConfig::SEQ.num_buckets, heads];
        BiasParams {
            seq: Tensor::zeros(&shape),
            horiz: Tensor::zeros(&shape),
            vert: Tensor::zeros(&shape),
        }
    }

    pub fn random<R: Rng + ?Sized>(heads: usize, std: f64, rng: &mut R) -> Self {
        let shape = [BucketConfig::SEQ.num_buckets, heads];
        BiasParams {
            seq: Tensor::randn(&shape, std, rng),
            horiz: Tensor::randn(&shape, std, rng),
            vert: Tensor::randn(&shape, std, rng),
        }
    }

    pub fn insert_into(self, store: &mut ParamStore<T>) {
        store.insert(SEQ_TABLE, self.seq);
        store.insert(HORIZ_TABLE, self.horiz);
        store.insert(VERT_TABLE, self.vert);
    }

    pub fn from_store(store: &ParamStore<T>) -> Result<Self> {
        let get = |name: &str| {
            store
                .get(name)
                .cloned()
                .ok_or_else(|| TiltError::CheckpointMissing(name.to_string()))
        };
        Ok(BiasParams {
            seq: get(SEQ_TABLE)?,
            horiz: get(HORIZ_TABLE)?,
            vert: get(VERT_TABLE)?,
        })
    }
}

/// Tape-side table handles; `spatial` is `None` when the 2-D terms are switched off.
#[derive(Clone, Copy, Debug)]
pub struct BiasVars {
    pub seq: Var,
    pub spatial: Option<(Var, Var)>,
}

/// Differentiable `[heads, n, n]` bias.
pub fn build_bias_var<T: Real>(tape: &mut Tape<'_, T>, tables: BiasVars, idx: &BiasIndices) -> Result<Var> {
    let n = idx.n;
    let mut b = tape.gather_bias(tables.seq, idx.seq.clone(), n, n)?;
    if let Some((h, v)) = tables.spatial {
        let bh = tape.gather_bias(h, idx.horiz.clone(), n, n)?;
        let bv = tape.gather_bias(v, idx.vert.clone(), n, n)?;
        b = tape.add(b, bh)?;
        b = tape.add(b, bv)?;
    }
    Ok(b)
}

/// `B[h][i][j] = seq[b1(j−i)][h] + horiz[b2(cx_j−cx_i)][h] + vert[b2(cy_j−cy_i)][h]`.
pub fn build_bias<T: Real>(centers: &[(usize, usize)], params: &BiasParams<T>) -> Result<Tensor<T>> {
    if centers.is_empty() {
        return Err(TiltError::Contract("build_bias needs at least one token".into()));
    }
    let idx = BiasIndices::new(centers);
    let mut tape = Tape::new();
    let tables = BiasVars {
        seq: tape.param(&params.seq),
        spatial: Some((tape.param(&params.horiz), tape.param(&params.vert))),
    };
    let b = build_bias_var(&mut tape, tables, &idx)?;
    Ok(tape.value(b).clone())
}

/// Stretches box coordinates by `fx`, `fy` about the page origin, then clamps to the page.
/// The raster is left untouched.
pub fn spatial_scale(doc: &Document, fx: f64, fy: f64) -> Document {
    let (w, h) = (doc.page.width as f64, doc.page.height as f64);
    let mut out = doc.clone();
    for t in &mut out.tokens {
        let b = t.bbox;
        t.bbox = BBox::new(b.x0 * fx, b.y0 * fy, b.x1 * fx, b.y1 * fy).clamp_to(w, h);
    }
    out
}

/// Independent `fx, fy ~ U[0.8, 1.25]`.
pub fn spatial_scale_augment<R: Rng + ?Sized>(doc: &Document, rng: &mut R) -> Document {
    let fx = rng.random_range(0.8..=1.25);
    let fy = rng.random_range(0.8..=1.25);
    spatial_scale(doc, fx, fy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Page, Token};
    use crate::numerics::gradcheck;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Literal transcription of the bucket rule in floating point.
    fn reference(d: i64, max_distance: f64) -> usize {
        let offset = if d > 0 { 16 } else { 0 };
        let a = d.unsigned_abs() as f64;
        if a < 8.0 {
            return offset + a as usize;
        }
        let v = 8.0 + (8.0 * (a / 8.0).ln() / (max_distance / 8.0).ln()).floor();
        offset + (v as usize).min(15)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(bucket_1d(0), 0);
        assert_eq!(bucket_1d(5), 21);
        assert_eq!(bucket_1d(-100_000), 15);
        assert_eq!(bucket_axis(0), 0);
        assert_eq!(bucket_axis(10), 24);
        assert_eq!(bucket_1d(i64::MIN), 15);
        assert_eq!(bucket_1d(i64::MAX), 31);
    }

    #[test]
    fn matches_reference_over_window() {
        for d in -1024..=1024 {
            assert_eq!(bucket_1d(d), reference(d, 128.0), "1d {d}");
            assert_eq!(bucket_axis(d), reference(d, 64.0), "axis {d}");
        }
    }

    #[test]
    fn sign_halves_mirror() {
        for a in 1..64i64 {
            assert_eq!(bucket_axis(a), bucket_axis(-a) + 16);
        }
    }

    #[test]
    fn monotone_in_magnitude() {
        for a in 0..2048i64 {
            assert!(bucket_1d(-(a + 1)) >= bucket_1d(-a));
            if a > 0 {
                assert!(bucket_1d(a + 1) >= bucket_1d(a));
            }
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = BucketConfig::SEQ;
        c.num_buckets = 31;
        assert!(c.validate().is_err());
        let mut c = BucketConfig::SEQ;
        c.max_distance = 8;
        assert!(c.validate().is_err());
        BucketConfig::AXIS.validate().unwrap();
    }

    #[test]
    fn unidirectional_ignores_future() {
        let c = BucketConfig {
            bidirectional: false,
            ..BucketConfig::SEQ
        };
        assert_eq!(bucket(5, &c), 0);
        assert_eq!(bucket(-5, &c), 5);
        assert_eq!(bucket(-1000, &c), 31);
    }

    #[test]
    fn zero_tables_give_zero_bias() {
        let b = build_bias(&[(0, 0), (5, 3), (9, 9)], &BiasParams::<f32>::zeros(4)).unwrap();
        assert_eq!(b.shape(), &[4, 3, 3]);
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_bias_is_diagonal_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BiasParams::<f64>::random(2, 1.0, &mut rng);
        let b = build_bias(&[(7, 7)], &p).unwrap();
        for h in 0..2 {
            let want = p.seq.data()[h] + p.horiz.data()[h] + p.vert.data()[h];
            assert_eq!(b.data()[h], want);
        }
    }

    #[test]
    fn entries_match_direct_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BiasParams::<f64>::random(3, 1.0, &mut rng);
        let centers = [(3, 4), (40, 4), (3, 30), (60, 47)];
        let b = build_bias(&centers, &p).unwrap();
        let n = centers.len();
        for h in 0..3 {
            for i in 0..n {
                for j in 0..n {
                    let dx = centers[j].0 as i64 - centers[i].0 as i64;
                    let dy = centers[j].1 as i64 - centers[i].1 as i64;
                    let want = p.seq.data()[bucket_1d(j as i64 - i as i64) * 3 + h]
                        + p.horiz.data()[bucket_axis(dx) * 3 + h]
                        + p.vert.data()[bucket_axis(dy) * 3 + h];
                    assert_eq!(b.data()[h * n * n + i * n + j], want);
                }
            }
        }
    }

    #[test]
    fn translation_leaves_bias_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BiasParams::<f32>::random(2, 1.0, &mut rng);
        let row = [(2, 5), (9, 5), (20, 5)];
        let moved: Vec<_> = row.iter().map(|&(x, y)| (x + 7, y + 3)).collect();
        assert_eq!(build_bias(&row, &p).unwrap(), build_bias(&moved, &p).unwrap());
    }

    #[test]
    fn moving_tokens_keeps_sequential_part() {
        let a = BiasIndices::new(&[(0, 0), (10, 0), (20, 0)]);
        let b = BiasIndices::new(&[(20, 30), (0, 2), (5, 40)]);
        assert_eq!(a.seq, b.seq);
        assert_ne!(a.horiz, b.horiz);
        assert_eq!(a.seq, BiasIndices::sequential(3));
    }

    #[test]
    fn empty_centers_rejected() {
        assert!(build_bias(&[], &BiasParams::<f32>::zeros(1)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BiasParams::<f64>::random(2, 0.5, &mut rng);
        let centers = vec![(1usize, 2usize), (12, 2), (1, 20), (30, 40)];
        let idx = BiasIndices::new(&centers);
        let weights = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng);
        let report = gradcheck::check(
            |tape, v| {
                let tables = BiasVars {
                    seq: v[0],
                    spatial: Some((v[1], v[2])),
                };
                let b = build_bias_var(tape, tables, &idx)?;
                let w = tape.constant(weights.clone());
                let bw = tape.mul(b, w)?;
                let sq = tape.mul(bw, bw)?;
                Ok(tape.sum(sq))
            },
            &[p.seq, p.horiz, p.vert],
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-3, "{:?}", report.worst());
    }

    fn doc() -> Document {
        Document {
            id: "d".into(),
            page: Page::blank(512, 384),
            tokens: vec![
                Token::word("a", BBox::new(10.0, 10.0, 30.0, 20.0)),
                Token::word("b", BBox::new(100.0, 40.0, 140.0, 60.0)),
                Token::word("c", BBox::new(480.0, 300.0, 510.0, 380.0)),
            ],
            annotations: vec![],
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        assert_eq!(spatial_scale(&doc(), 1.0, 1.0), doc());
    }

    #[test]
    fn stretch_scales_center_distances() {
        let d = doc();
        let s = spatial_scale(&d, 1.25, 1.0);
        let dx = |d: &Document| d.tokens[1].bbox.center().0 - d.tokens[0].bbox.center().0;
        assert!((dx(&s) - 1.25 * dx(&d)).abs() < 1e-12);
        // the last box runs past the right edge and is clamped
        assert_eq!(s.tokens[2].bbox.x1, 512.0);
    }

    #[test]
    fn augment_is_seeded() {
        let a = spatial_scale_augment(&doc(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = spatial_scale_augment(&doc(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn bucket_is_in_range(d in any::<i64>()) {
            prop_assert!(bucket_1d(d) < 32);
            prop_assert!(bucket_axis(d) < 32);
        }

        #[test]
        fn translation_invariance(
            pts in proptest::collection::vec((0usize..40, 0usize..30), 1..6),
            sx in 0usize..24, sy in 0usize..18
        ) {
            let a = BiasIndices::new(&pts);
            let moved: Vec<_> = pts.iter().map(|&(x, y)| (x + sx, y + sy)).collect();
            prop_assert_eq!(a, BiasIndices::new(&moved));
        }
    }
}
