//! Median selection over k×k windows, as a network layer with argmedian
//! gradient routing and as the kernel shared by the classic filters.
//!
//! The median of a window is the element at position `m_idx - 1` of the
//! window values sorted in descending order, where `m_idx = ⌊k²/2⌋ + 1`.
//! Window values are enumerated in row-major order and the sort is stable,
//! so among equal values the one with the lower window index ranks first.
//! For a constant window this selects the centre element.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Kernel size of a median layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MedianLayerSpec {
    kernel: usize,
}

impl Default for MedianLayerSpec {
    fn default() -> Self {
        MedianLayerSpec { kernel: 3 }
    }
}

impl MedianLayerSpec {
    pub fn new(kernel: usize) -> Result<Self> {
        if kernel < 3 || kernel % 2 == 0 {
            return Err(Error::config(
                "median_kernel",
                format!("must be odd and >= 3, got {kernel}"),
            ));
        }
        if kernel * kernel > u16::MAX as usize {
            return Err(Error::config("median_kernel", format!("{kernel} is too large")));
        }
        Ok(MedianLayerSpec { kernel })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn window_len(&self) -> usize {
        self.kernel * self.kernel
    }

    /// 1-based rank of the median in the descending order: `⌊k²/2⌋ + 1`.
    pub fn rank(&self) -> usize {
        self.kernel * self.kernel / 2 + 1
    }
}

/// How windows are completed outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Border {
    /// Missing samples are 0 (TensorFlow "SAME" patch extraction).
    #[default]
    Zero,
    /// Half-sample symmetric reflection: `… c b a | a b c …`.
    Reflect,
}

impl std::str::FromStr for Border {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Border::Zero),
            "reflect" => Ok(Border::Reflect),
            other => Err(Error::config("border", format!("expected zero|reflect, got {other}"))),
        }
    }
}

impl std::fmt::Display for Border {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Border::Zero => "zero",
            Border::Reflect => "reflect",
        })
    }
}

#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

/// Lists the zero-padded k×k neighbourhood of every pixel of an `h × w`
/// channel. Patch `(i, j)` occupies `out[(i*w + j)*k*k ..][..k*k]` in
/// row-major window order.
pub fn extract_patches<T: Scalar>(channel: &[T], h: usize, w: usize, k: usize) -> Result<Vec<T>> {
    if k % 2 == 0 {
        return Err(Error::config("kernel", format!("must be odd, got {k}")));
    }
    if channel.len() != h * w {
        return Err(Error::DataLength {
            shape: Shape4::new(1, 1, h, w),
            len: channel.len(),
            expected: h * w,
        });
    }
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(h * w * k * k);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (i + dy, j + dx);
                    out.push(if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        T::zero()
                    } else {
                        channel[y as usize * w + x as usize]
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Stable descending insertion sort of `buf`; returns the entry at `rank - 1`.
#[cfg(test)]
fn select_ranked<T: Scalar>(buf: &mut [(T, u16)], rank: usize) -> (T, u16) {
    for i in 1..buf.len() {
        let cur = buf[i];
        let mut j = i;
        while j > 0 && buf[j - 1].0 < cur.0 {
            buf[j] = buf[j - 1];
            j -= 1;
        }
        buf[j] = cur;
    }
    buf[rank - 1]
}

/// Packs a window entry so that a larger key means earlier in the stable
/// descending order.
#[inline(always)]
fn window_key<T: Scalar>(v: T, t: usize) -> u128 {
    ((v.order_key() as u128) << 16) | (u16::MAX as usize - t) as u128
}

#[inline(always)]
fn key_index(key: u128) -> u16 {
    u16::MAX - (key & 0xFFFF) as u16
}

/// Middle entry of nine keys via a 19-exchange selection network. Keys are
/// distinct, so this picks the same entry as a full stable sort.
#[inline(always)]
fn median9(p: &mut [u128; 9]) -> u128 {
    macro_rules! x {
        ($($a:literal $b:literal),*) => {$(
            let (hi, lo) = (p[$a].max(p[$b]), p[$a].min(p[$b]));
            p[$a] = hi;
            p[$b] = lo;
        )*};
    }
    x!(1 2, 4 5, 7 8, 0 1, 3 4, 6 7, 1 2, 4 5, 7 8, 0 3, 5 8, 4 7, 3 6, 1 4, 2 5, 4 7, 4 2, 6 4, 4 2);
    p[4]
}

/// Median-filters one plane. When `arg` is given, the selected window index
/// of every output element is written to it.
pub(crate) fn median_plane<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    spec: MedianLayerSpec,
    border: Border,
    out: &mut [T],
    mut arg: Option<&mut [u16]>,
) {
    let k = spec.kernel();
    let r = (k / 2) as isize;
    let rank = spec.rank();
    let mut buf = vec![(T::zero(), 0u16); k * k];
    let mut win9 = [0u128; 9];
    let mut keys = vec![0u128; k * k];
    for i in 0..h {
        for j in 0..w {
            let interior = i >= r as usize && j >= r as usize && i + (r as usize) < h && j + (r as usize) < w;
            let (v, idx) = if k == 3 && interior {
                let base = (i - 1) * w + j - 1;
                for (t, slot) in win9.iter_mut().enumerate() {
                    *slot = window_key(src[base + (t / 3) * w + t % 3], t);
                }
                let t = key_index(median9(&mut win9));
                (src[base + (t as usize / 3) * w + t as usize % 3], t)
            } else {
                let mut t = 0usize;
                for dy in -r..=r {
                    let y = i as isize + dy;
                    for dx in -r..=r {
                        let x = j as isize + dx;
                        let v = if interior {
                            src[y as usize * w + x as usize]
                        } else {
                            match border {
                                Border::Zero => {
                                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                        T::zero()
                                    } else {
                                        src[y as usize * w + x as usize]
                                    }
                                }
                                Border::Reflect => src[reflect_index(y, h) * w + reflect_index(x, w)],
                            }
                        };
                        buf[t] = (v, t as u16);
                        t += 1;
                    }
                }
                if k == 3 {
                    for (slot, &(v, t)) in win9.iter_mut().zip(buf.iter()) {
                        *slot = window_key(v, t as usize);
                    }
                    let t = key_index(median9(&mut win9));
                    buf[t as usize]
                } else {
                    for (slot, &(v, t)) in keys.iter_mut().zip(buf.iter()) {
                        *slot = window_key(v, t as usize);
                    }
                    keys.select_nth_unstable_by(rank - 1, |a, b| b.cmp(a));
                    buf[key_index(keys[rank - 1]) as usize]
                }
            };
            out[i * w + j] = v;
            if let Some(a) = arg.as_deref_mut() {
                a[i * w + j] = idx;
            }
        }
    }
}

/// Per output element, the window index of the input selected as median.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgMedian {
    shape: Shape4,
    spec: MedianLayerSpec,
    index: Vec<u16>,
}

impl ArgMedian {
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn spec(&self) -> MedianLayerSpec {
        self.spec
    }

    /// Window indices in the output's (n, c, h, w) layout.
    pub fn indices(&self) -> &[u16] {
        &self.index
    }

    /// Flat input offset that fed output element `out`, or `None` when the
    /// selected value was zero padding.
    pub fn source(&self, out: usize) -> Option<usize> {
        let s = self.shape;
        let k = self.spec.kernel();
        let r = (k / 2) as isize;
        let plane = s.plane();
        let base = out - out % plane;
        let pos = out % plane;
        let (i, j) = ((pos / s.w) as isize, (pos % s.w) as isize);
        let t = self.index[out] as usize;
        let y = i + (t / k) as isize - r;
        let x = j + (t % k) as isize - r;
        if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
            None
        } else {
            Some(base + y as usize * s.w + x as usize)
        }
    }
}

/// Applies the median layer to every channel independently.
pub fn median_layer_forward<T: Scalar>(
    x: &Tensor4<T>,
    spec: MedianLayerSpec,
) -> (Tensor4<T>, ArgMedian) {
    let s = x.shape();
    let mut out = Tensor4::zeros(s);
    let mut index = vec![0u16; s.numel()];
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            median_plane(
                x.plane(n, c),
                s.h,
                s.w,
                spec,
                Border::Zero,
                out.plane_mut(n, c),
                Some(&mut index[off..off + plane]),
            );
        }
    }
    (out, ArgMedian { shape: s, spec, index })
}

/// Routes each output gradient to the input element selected as median.
/// Gradients of windows whose median was padding are dropped.
pub fn median_layer_backward<T: Scalar>(grad_out: &Tensor4<T>, arg: &ArgMedian) -> Result<Tensor4<T>> {
    if grad_out.shape() != arg.shape || arg.index.len() != arg.shape.numel() {
        return Err(Error::StaleIndices {
            recorded: arg.shape,
            given: grad_out.shape(),
        });
    }
    let mut grad_in = Tensor4::zeros(arg.shape);
    let g = grad_out.data();
    let gi = grad_in.data_mut();
    for (o, &v) in g.iter().enumerate() {
        if let Some(src) = arg.source(o) {
            gi[src] = gi[src] + v;
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_network_matches_stable_sort_with_ties() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20_000 {
            let mut a: Vec<(f64, u16)> = (0..9)
                .map(|t| ([-1.0, -0.0, 0.0, 2.0][rng.gen_range(0..4)], t as u16))
                .collect();
            let mut keys = [0u128; 9];
            for (k, &(v, t)) in keys.iter_mut().zip(&a) {
                *k = window_key(v, t as usize);
            }
            let (_, want) = select_ranked(&mut a, 5);
            assert_eq!(key_index(median9(&mut keys)), want);
        }
    }
    use crate::rng::tensor_uniform;

    /// Full sort of every zero-padded window.
    fn sort_oracle(x: &Tensor4<f64>, k: usize) -> Tensor4<f64> {
        let s = x.shape();
        let mut out = Tensor4::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let p = extract_patches(x.plane(n, c), s.h, s.w, k).unwrap();
                for (i, win) in p.chunks(k * k).enumerate() {
                    let mut v = win.to_vec();
                    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    out.plane_mut(n, c)[i] = v[k * k / 2];
                }
            }
        }
        out
    }

    #[test]
    fn rank_formula() {
        assert_eq!(MedianLayerSpec::new(3).unwrap().rank(), 5);
        assert_eq!(MedianLayerSpec::new(5).unwrap().rank(), 13);
        assert_eq!(MedianLayerSpec::new(7).unwrap().rank(), 25);
        assert!(MedianLayerSpec::new(4).is_err());
        assert!(MedianLayerSpec::new(1).is_err());
        for k in [3usize, 5, 7] {
            let spec = MedianLayerSpec::new(k).unwrap();
            let mut vals: Vec<f64> = (0..k * k).map(|i| ((i * 7919) % 101) as f64 + i as f64 * 1e-3).collect();
            let mut buf: Vec<(f64, u16)> = vals.iter().enumerate().map(|(i, &v)| (v, i as u16)).collect();
            let got = select_ranked(&mut buf, spec.rank()).0;
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, vals[k * k / 2]);
        }
    }

    #[test]
    fn patches_pad_with_zeros() {
        assert_eq!(
            extract_patches(&[7.0f64], 1, 1, 3).unwrap(),
            vec![0.0, 0.0, 0.0, 0.0, 7.0, 0.0, 0.0, 0.0, 0.0]
        );
        let c = vec![2.5f64; 25];
        let p = extract_patches(&c, 5, 5, 3).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert!(p[(i * 5 + j) * 9..][..9].iter().all(|&v| v == 2.5));
            }
        }
        assert!(extract_patches(&c, 5, 5, 2).is_err());
    }

    #[test]
    fn patches_match_index_arithmetic() {
        let x = tensor_uniform::<f64>(Shape4::new(1, 1, 5, 5), 4, 0.0, 1.0);
        let p = extract_patches(x.data(), 5, 5, 3).unwrap();
        for i in 0..5i64 {
            for j in 0..5i64 {
                for t in 0..9i64 {
                    let (y, xx) = (i + t / 3 - 1, j + t % 3 - 1);
                    let want = if (0..5).contains(&y) && (0..5).contains(&xx) {
                        x.get(0, 0, y as usize, xx as usize)
                    } else {
                        0.0
                    };
                    assert_eq!(p[((i * 5 + j) * 9 + t) as usize], want);
                }
            }
        }
    }

    #[test]
    fn constant_image_is_fixed_point_in_interior() {
        let x = Tensor4::<f64>::full(Shape4::new(1, 2, 6, 6), 3.0);
        let (y, arg) = median_layer_forward(&x, MedianLayerSpec::default());
        for c in 0..2 {
            for i in 1..5 {
                for j in 1..5 {
                    assert_eq!(y.get(0, c, i, j), 3.0);
                }
            }
        }
        // Stable-sort tie rule picks the centre for a constant window.
        assert_eq!(arg.indices()[6 + 1], 4);
    }

    #[test]
    fn median_of_one_to_nine() {
        let perm = [6.0, 2.0, 9.0, 4.0, 1.0, 8.0, 5.0, 3.0, 7.0];
        let x = Tensor4::<f64>::from_vec(Shape4::new(1, 1, 3, 3), perm.to_vec()).unwrap();
        let (y, arg) = median_layer_forward(&x, MedianLayerSpec::default());
        assert_eq!(y.get(0, 0, 1, 1), 5.0);
        assert_eq!(arg.source(4), Some(6));
    }

    #[test]
    fn equals_sort_oracle() {
        for (seed, k) in [(1u64, 3usize), (2, 5)] {
            let x = tensor_uniform::<f64>(Shape4::new(2, 64, 16, 16), seed, -1.0, 1.0);
            let (y, _) = median_layer_forward(&x, MedianLayerSpec::new(k).unwrap());
            assert_eq!(y, sort_oracle(&x, k));
        }
    }

    #[test]
    fn backward_routes_to_argmedian() {
        let x = tensor_uniform::<f64>(Shape4::new(1, 2, 5, 6), 9, 0.5, 1.5);
        let (_, arg) = median_layer_forward(&x, MedianLayerSpec::default());
        let zero = median_layer_backward(&Tensor4::<f64>::zeros(x.shape()), &arg).unwrap();
        assert_eq!(zero.max_abs(), 0.0);

        let go = tensor_uniform::<f64>(x.shape(), 10, -1.0, 1.0);
        let gi = median_layer_backward(&go, &arg).unwrap();
        let routed: f64 = (0..go.len()).filter(|&o| arg.source(o).is_some()).map(|o| go.data()[o]).sum();
        assert!((gi.sum() - routed).abs() < 1e-12);

        let stale = Tensor4::<f64>::zeros(Shape4::new(1, 2, 5, 5));
        assert!(matches!(
            median_layer_backward(&stale, &arg),
            Err(Error::StaleIndices { .. })
        ));
    }

    #[test]
    fn constant_input_gradient_goes_to_centre() {
        let x = Tensor4::<f64>::full(Shape4::new(1, 1, 5, 5), 2.0);
        let (_, arg) = median_layer_forward(&x, MedianLayerSpec::default());
        let mut go = Tensor4::zeros(x.shape());
        go.set(0, 0, 2, 2, 1.0);
        let gi = median_layer_backward(&go, &arg).unwrap();
        assert_eq!(gi.get(0, 0, 2, 2), 1.0);
        assert_eq!(gi.sum(), 1.0);
    }

    #[test]
    fn reflect_index_mirrors() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect_index(-5, 2), 0);
    }
}
