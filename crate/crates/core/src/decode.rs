//! Streaming form of the augmented attention for one head.
//!
//! A [`DecodeState`] summarises everything a new token can see: the folded
//! state `S` of all completed groups, the raw keys and values of the open
//! group, and the last `k-1` value rows for the convolution. Its size does not
//! grow with the number of tokens processed.

use crate::augmented::{
    attend_row, combine, combine_row, conv_branch, conv_row, global_branch, global_row,
    local_branch, ConvWeights, Prefix,
};
use crate::config::AttnConfig;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{add_outer, Tensor};

const SNAPSHOT_MAGIC: &[u8; 4] = b"ALDS";
const SNAPSHOT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    cfg: AttnConfig,
    /// `Σ φ(k)ᵀ v` over folded tokens, `d_k × d_k` row-major.
    state: Vec<f64>,
    folded: usize,
    group_k: Vec<Vec<f64>>,
    group_v: Vec<Vec<f64>>,
    /// Last committed value rows, oldest first, at most `k-1` of them.
    tail: Vec<Vec<f64>>,
    pos: usize,
}

impl DecodeState {
    /// Fresh state: zero `S`, empty buffers, position 0.
    pub fn new(cfg: &AttnConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.unmasked_conv {
            return Err(Error::Config(
                "the unmasked convolution reads future tokens and cannot be decoded incrementally"
                    .into(),
            ));
        }
        let d = cfg.head_dim;
        Ok(Self {
            cfg: cfg.clone(),
            state: vec![0.0; d * d],
            folded: 0,
            group_k: Vec::with_capacity(cfg.group_size),
            group_v: Vec::with_capacity(cfg.group_size),
            tail: Vec::with_capacity(cfg.conv_kernel),
            pos: 0,
        })
    }

    pub fn config(&self) -> &AttnConfig {
        &self.cfg
    }

    pub fn head_dim(&self) -> usize {
        self.cfg.head_dim
    }

    /// Committed tokens.
    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn folded(&self) -> usize {
        self.folded
    }

    pub fn kv_state(&self) -> &[f64] {
        &self.state
    }

    pub fn group_keys(&self) -> &[Vec<f64>] {
        &self.group_k
    }

    pub fn group_values(&self) -> &[Vec<f64>] {
        &self.group_v
    }

    pub fn conv_tail(&self) -> &[Vec<f64>] {
        &self.tail
    }

    /// Field-by-field comparison on the bit patterns of every scalar.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        fn rows_eq(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| bits_eq(x, y))
        }
        fn bits_eq(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.cfg == other.cfg
            && self.pos == other.pos
            && self.folded == other.folded
            && bits_eq(&self.state, &other.state)
            && rows_eq(&self.group_k, &other.group_k)
            && rows_eq(&self.group_v, &other.group_v)
            && rows_eq(&self.tail, &other.tail)
    }

    fn check_row(&self, name: &str, row: &[f64]) -> Result<()> {
        if row.len() != self.cfg.head_dim {
            return dim_err(format!(
                "{name} row has {} entries, head_dim is {}",
                row.len(),
                self.cfg.head_dim
            ));
        }
        Ok(())
    }

    fn check_weights(&self, w: &ConvWeights) -> Result<()> {
        if w.kernel() != self.cfg.conv_kernel || w.channels() != self.cfg.head_dim {
            return dim_err(format!(
                "conv taps {:?} do not match kernel {} x head_dim {}",
                w.taps().shape(),
                self.cfg.conv_kernel,
                self.cfg.head_dim
            ));
        }
        Ok(())
    }

    /// Output for a new token without committing it.
    pub fn peek(&self, q: &[f64], k: &[f64], v: &[f64], w: &ConvWeights) -> Result<Vec<f64>> {
        self.check_row("q", q)?;
        self.check_row("k", k)?;
        self.check_row("v", v)?;
        self.check_weights(w)?;
        let d = self.cfg.head_dim;

        let mut keys: Vec<&[f64]> = self.group_k.iter().map(Vec::as_slice).collect();
        let mut vals: Vec<&[f64]> = self.group_v.iter().map(Vec::as_slice).collect();
        keys.push(k);
        vals.push(v);
        let mut local = vec![0.0; d];
        let mut scratch = Vec::with_capacity(keys.len());
        attend_row(
            q,
            &keys,
            &vals,
            self.cfg.softmax_scale(),
            &mut scratch,
            &mut local,
        );

        let fq = self.cfg.feature_map.apply_slice(q);
        let mut global = vec![0.0; d];
        global_row(
            &fq,
            &self.state,
            self.cfg.global_scale.factor(self.folded),
            &mut global,
        );

        let kk = self.cfg.conv_kernel;
        let window: Vec<Option<&[f64]>> = (0..kk)
            .map(|j| {
                let back = kk - 1 - j;
                if back == 0 {
                    Some(v)
                } else if back <= self.tail.len() {
                    Some(self.tail[self.tail.len() - back].as_slice())
                } else {
                    None
                }
            })
            .collect();
        let mut conv = vec![0.0; d];
        conv_row(w, &window, &mut conv);

        let mut out = vec![0.0; d];
        combine_row(&local, &global, &conv, self.cfg.alpha, &mut out);
        Ok(out)
    }

    /// Output for a new token, then commits it.
    pub fn decode_step(
        &mut self,
        q: &[f64],
        k: &[f64],
        v: &[f64],
        w: &ConvWeights,
    ) -> Result<Vec<f64>> {
        let out = self.peek(q, k, v, w)?;
        self.commit(k, v)?;
        Ok(out)
    }

    /// Appends a token's key and value; folds the group once it holds `G` rows.
    pub fn commit(&mut self, k: &[f64], v: &[f64]) -> Result<()> {
        self.check_row("k", k)?;
        self.check_row("v", v)?;
        self.group_k.push(k.to_vec());
        self.group_v.push(v.to_vec());
        if self.group_k.len() == self.cfg.group_size {
            self.fold_group()?;
        }
        if self.cfg.conv_kernel > 1 {
            if self.tail.len() == self.cfg.conv_kernel - 1 {
                self.tail.remove(0);
            }
            self.tail.push(v.to_vec());
        }
        self.pos += 1;
        Ok(())
    }

    /// Adds the full open group into `S` and clears the buffers.
    pub fn fold_group(&mut self) -> Result<()> {
        if self.group_k.len() != self.cfg.group_size {
            return Err(Error::Contract(format!(
                "fold_group needs {} buffered rows, found {}",
                self.cfg.group_size,
                self.group_k.len()
            )));
        }
        let fm = self.cfg.feature_map;
        let mut phi = vec![0.0; self.cfg.head_dim];
        for (k, v) in self.group_k.iter().zip(&self.group_v) {
            for (p, &x) in phi.iter_mut().zip(k) {
                *p = fm.apply(x);
            }
            add_outer(&mut self.state, &phi, v);
        }
        self.folded += self.group_k.len();
        self.group_k.clear();
        self.group_v.clear();
        Ok(())
    }

    /// Processes a block of tokens with the batched kernels, using the
    /// current state as prefix context, then commits them.
    pub fn prefill(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        w: &ConvWeights,
    ) -> Result<Tensor> {
        let d = self.cfg.head_dim;
        for (name, t) in [("Q", q), ("K", k), ("V", v)] {
            if t.shape().len() != 2 || t.cols() != d {
                return dim_err(format!("{name} is {:?}, expected n x {d}", t.shape()));
            }
        }
        if q.rows() != k.rows() || k.rows() != v.rows() {
            return dim_err("Q, K, V row counts differ");
        }
        self.check_weights(w)?;
        let n = q.rows();
        if n == 0 {
            return Ok(Tensor::zeros(&[0, d]));
        }
        let prefix = Prefix {
            state: Some(&self.state),
            folded: self.folded,
            open_k: &self.group_k,
            open_v: &self.group_v,
        };
        let g = self.cfg.group_size;
        let (local, _) = local_branch(q, k, v, g, &prefix, false);
        let (global, _) = global_branch(
            q,
            k,
            v,
            g,
            self.cfg.feature_map,
            self.cfg.global_scale,
            &prefix,
            false,
        );
        let conv = conv_branch(v, w, &self.tail, false)?;
        let out = combine(&local, &global, &conv, self.cfg.alpha).check_finite("prefill")?;
        for i in 0..n {
            self.commit(k.row(i), v.row(i))?;
        }
        Ok(out)
    }

    /// Serialises the state: a versioned header followed by little-endian
    /// `f64` dumps of `S`, the open group keys and values, and the tail.
    ///
    /// ```text
    /// "ALDS" | u16 version | u16 reserved | u32 head_dim | u32 group_size
    /// | u32 conv_kernel | u64 pos | u64 folded | u32 open_rows | u32 tail_rows
    /// | S | group_k | group_v | tail
    /// ```
    pub fn snapshot(&self) -> Vec<u8> {
        let d = self.cfg.head_dim;
        let rows = self.group_k.len() * 2 + self.tail.len();
        let mut buf = Vec::with_capacity(44 + 8 * (d * d + rows * d));
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        for x in [d, self.cfg.group_size, self.cfg.conv_kernel] {
            buf.extend_from_slice(&(x as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.pos as u64).to_le_bytes());
        buf.extend_from_slice(&(self.folded as u64).to_le_bytes());
        buf.extend_from_slice(&(self.group_k.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.tail.len() as u32).to_le_bytes());
        let scalars = self
            .state
            .iter()
            .chain(self.group_k.iter().flatten())
            .chain(self.group_v.iter().flatten())
            .chain(self.tail.iter().flatten());
        for x in scalars {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf
    }

    /// Rebuilds a state written by [`snapshot`](Self::snapshot). The header
    /// must agree with `cfg`.
    pub fn restore(cfg: &AttnConfig, bytes: &[u8]) -> Result<Self> {
        let mut fresh = Self::new(cfg)?;
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        r.take(2)?;
        let d = r.u32()? as usize;
        let g = r.u32()? as usize;
        let kk = r.u32()? as usize;
        if (d, g, kk) != (cfg.head_dim, cfg.group_size, cfg.conv_kernel) {
            return Err(Error::Snapshot(format!(
                "snapshot is for head_dim {d}, G {g}, k {kk}; config has {}, {}, {}",
                cfg.head_dim, cfg.group_size, cfg.conv_kernel
            )));
        }
        let pos = r.u64()? as usize;
        let folded = r.u64()? as usize;
        let open = r.u32()? as usize;
        let tail = r.u32()? as usize;
        if open >= g || !folded.is_multiple_of(g) || pos != folded + open || tail != pos.min(kk - 1)
        {
            return Err(Error::Snapshot(format!(
                "inconsistent counters: pos {pos}, folded {folded}, open {open}, tail {tail}"
            )));
        }
        fresh.state = r.f64s(d * d)?;
        fresh.group_k = (0..open).map(|_| r.f64s(d)).collect::<Result<_>>()?;
        fresh.group_v = (0..open).map(|_| r.f64s(d)).collect::<Result<_>>()?;
        fresh.tail = (0..tail).map(|_| r.f64s(d)).collect::<Result<_>>()?;
        if r.at != bytes.len() {
            return Err(Error::Snapshot(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        fresh.pos = pos;
        fresh.folded = folded;
        Ok(fresh)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::Snapshot("truncated".into()));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        let v: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Snapshot("non-finite scalar".into()));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmented::augmented_attention;
    use crate::config::{FeatureMap, GlobalScale};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_seq(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Tensor, Tensor, Tensor) {
        (
            Tensor::<f64>::random(&[n, d], -1.0, 1.0, rng),
            Tensor::<f64>::random(&[n, d], -1.0, 1.0, rng),
            Tensor::<f64>::random(&[n, d], -1.0, 1.0, rng),
        )
    }

    fn stepwise(
        state: &mut DecodeState,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        w: &ConvWeights,
    ) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..q.rows())
            .map(|i| state.decode_step(q.row(i), k.row(i), v.row(i), w).unwrap())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn init_is_empty_and_deterministic() {
        let cfg = AttnConfig::single_head(4, 3, 2);
        let a = DecodeState::new(&cfg).unwrap();
        assert_eq!(a.pos(), 0);
        assert!(a.kv_state().iter().all(|&x| x == 0.0));
        assert!(a.group_keys().is_empty() && a.conv_tail().is_empty());
        assert!(a.bitwise_eq(&DecodeState::new(&cfg).unwrap()));
        assert!(DecodeState::new(&AttnConfig::single_head(4, 0, 2)).is_err());
        assert!(DecodeState::new(&cfg.with_unmasked_conv(true)).is_err());
    }

    #[test]
    fn first_step_is_value_plus_current_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AttnConfig::single_head(3, 4, 3).with_alpha(2.0);
        let w = ConvWeights::random(3, 3, 1.0, &mut rng);
        let mut s = DecodeState::new(&cfg).unwrap();
        let (q, k, v) = rand_seq(&mut rng, 1, 3);
        let out = s.decode_step(q.row(0), k.row(0), v.row(0), &w).unwrap();
        for c in 0..3 {
            let expect = v.at(0, c) + w.tap(2)[c] * v.at(0, c);
            assert!((out[c] - expect).abs() < 1e-15);
        }
        assert_eq!(s.pos(), 1);
    }

    #[test]
    fn stepwise_matches_batched_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(g, kk) in &[(1, 1), (2, 3), (3, 1), (5, 4)] {
            let cfg = AttnConfig::single_head(4, g, kk).with_alpha(0.7);
            let (q, k, v) = rand_seq(&mut rng, 17, 4);
            let w = ConvWeights::random(kk, 4, 1.0, &mut rng);
            let mut s = DecodeState::new(&cfg).unwrap();
            let steps = stepwise(&mut s, &q, &k, &v, &w);
            let batched = augmented_attention(&q, &k, &v, &w, &cfg).unwrap();
            assert!(steps.max_abs_diff(&batched).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn third_step_reads_folded_first_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttnConfig::single_head(2, 2, 1)
            .with_alpha(0.5)
            .with_feature_map(FeatureMap::EluPlusOne);
        let w = ConvWeights::zeros(1, 2);
        let (q, k, v) = rand_seq(&mut rng, 3, 2);
        let mut s = DecodeState::new(&cfg).unwrap();
        s.decode_step(q.row(0), k.row(0), v.row(0), &w).unwrap();
        s.decode_step(q.row(1), k.row(1), v.row(1), &w).unwrap();
        assert_eq!(s.folded(), 2);
        let out = s.decode_step(q.row(2), k.row(2), v.row(2), &w).unwrap();
        let phi = |x: f64| FeatureMap::EluPlusOne.apply(x);
        for c in 0..2 {
            let mut global = 0.0;
            for i in 0..2 {
                let w_i: f64 = (0..2).map(|a| phi(q.at(2, a)) * phi(k.at(i, a))).sum();
                global += w_i * v.at(i, c);
            }
            // Third token is alone in its group: local output is its own value.
            let expect = v.at(2, c) + 0.5 * global;
            assert!((out[c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn prefill_on_fresh_state_equals_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AttnConfig::single_head(4, 3, 4).with_global_scale(GlobalScale::InverseCount);
        let (q, k, v) = rand_seq(&mut rng, 11, 4);
        let w = ConvWeights::random(4, 4, 1.0, &mut rng);
        let mut s = DecodeState::new(&cfg).unwrap();
        let out = s.prefill(&q, &k, &v, &w).unwrap();
        assert_eq!(out, augmented_attention(&q, &k, &v, &w, &cfg).unwrap());
        let mut t = DecodeState::new(&cfg).unwrap();
        stepwise(&mut t, &q, &k, &v, &w);
        assert!(s.bitwise_eq(&t));
    }

    #[test]
    fn split_prefill_equals_single_prefill() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let g = rng.gen_range(1..6);
            let kk = rng.gen_range(1..6);
            let cfg = AttnConfig::single_head(3, g, kk).with_alpha(rng.gen_range(0.0..2.0));
            let n = rng.gen_range(1..25);
            let (q, k, v) = rand_seq(&mut rng, n, 3);
            let w = ConvWeights::random(kk, 3, 1.0, &mut rng);
            let mut whole = DecodeState::new(&cfg).unwrap();
            let full = whole.prefill(&q, &k, &v, &w).unwrap();
            let cut = rng.gen_range(0..=n);
            let mut parts = DecodeState::new(&cfg).unwrap();
            let a = parts
                .prefill(
                    &q.slice_rows(0, cut),
                    &k.slice_rows(0, cut),
                    &v.slice_rows(0, cut),
                    &w,
                )
                .unwrap();
            let b = parts
                .prefill(
                    &q.slice_rows(cut, n),
                    &k.slice_rows(cut, n),
                    &v.slice_rows(cut, n),
                    &w,
                )
                .unwrap();
            let joined = Tensor::concat_rows(&[&a, &b]).unwrap();
            assert!(joined.max_abs_diff(&full).unwrap() <= 1e-12);
            assert!(parts.bitwise_eq(&whole));
        }
    }

    #[test]
    fn empty_prefill_is_a_no_op() {
        let cfg = AttnConfig::single_head(3, 2, 2);
        let mut s = DecodeState::new(&cfg).unwrap();
        let e = Tensor::<f64>::zeros(&[0, 3]);
        let out = s.prefill(&e, &e, &e, &ConvWeights::zeros(2, 3)).unwrap();
        assert_eq!(out.rows(), 0);
        assert!(s.bitwise_eq(&DecodeState::new(&cfg).unwrap()));
    }

    #[test]
    fn fold_group_contract() {
        let cfg = AttnConfig::single_head(2, 1, 1).with_feature_map(FeatureMap::Identity);
        let mut s = DecodeState::new(&cfg).unwrap();
        assert!(matches!(s.fold_group(), Err(Error::Contract(_))));
        s.commit(&[1.0, 2.0], &[3.0, -1.0]).unwrap();
        assert_eq!(s.kv_state(), &[3.0, -1.0, 6.0, -2.0]);

        let cfg = AttnConfig::single_head(2, 2, 1);
        let mut s = DecodeState::new(&cfg).unwrap();
        s.commit(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        s.commit(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(s.kv_state().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fold_of_four_rows_equals_outer_product_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = AttnConfig::single_head(3, 4, 1).with_feature_map(FeatureMap::EluPlusOne);
        let mut s = DecodeState::new(&cfg).unwrap();
        let (_, k, v) = rand_seq(&mut rng, 4, 3);
        for i in 0..4 {
            s.commit(k.row(i), v.row(i)).unwrap();
        }
        for a in 0..3 {
            for b in 0..3 {
                let e: f64 = (0..4)
                    .map(|i| FeatureMap::EluPlusOne.apply(k.at(i, a)) * v.at(i, b))
                    .sum();
                assert!((s.kv_state()[a * 3 + b] - e).abs() < 1e-14);
            }
        }
        assert!(s.group_keys().is_empty());
    }

    #[test]
    fn buffers_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = AttnConfig::single_head(2, 3, 4);
        let mut s = DecodeState::new(&cfg).unwrap();
        let w = ConvWeights::random(4, 2, 1.0, &mut rng);
        for step in 0..40 {
            let (q, k, v) = rand_seq(&mut rng, 1, 2);
            s.decode_step(q.row(0), k.row(0), v.row(0), &w).unwrap();
            assert!(s.group_keys().len() < 3);
            assert_eq!(s.group_keys().len(), s.group_values().len());
            assert_eq!(s.conv_tail().len(), (step + 1).min(3));
            assert_eq!(s.pos(), s.folded() + s.group_keys().len());
        }
    }

    #[test]
    fn dimension_errors() {
        let cfg = AttnConfig::single_head(3, 2, 2);
        let mut s = DecodeState::new(&cfg).unwrap();
        let w = ConvWeights::zeros(2, 3);
        assert!(matches!(
            s.decode_step(&[0.0; 2], &[0.0; 3], &[0.0; 3], &w),
            Err(Error::Dimension(_))
        ));
        assert!(s
            .decode_step(&[0.0; 3], &[0.0; 3], &[0.0; 3], &ConvWeights::zeros(3, 3))
            .is_err());
        assert_eq!(s.pos(), 0);
    }

    #[test]
    fn snapshot_round_trip_and_rejections() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = AttnConfig::single_head(3, 4, 3);
        let mut s = DecodeState::new(&cfg).unwrap();
        let (q, k, v) = rand_seq(&mut rng, 6, 3);
        let w = ConvWeights::random(3, 3, 1.0, &mut rng);
        s.prefill(&q, &k, &v, &w).unwrap();
        let blob = s.snapshot();
        assert_eq!(&blob[..4], b"ALDS");
        let back = DecodeState::restore(&cfg, &blob).unwrap();
        assert!(back.bitwise_eq(&s));

        assert!(DecodeState::restore(&AttnConfig::single_head(3, 5, 3), &blob).is_err());
        assert!(DecodeState::restore(&cfg, &blob[..blob.len() - 1]).is_err());
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(DecodeState::restore(&cfg, &bad).is_err());
        let mut bad = blob;
        bad.push(0);
        assert!(DecodeState::restore(&cfg, &bad).is_err());
    }
}
