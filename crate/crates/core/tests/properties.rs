use medianet::config::KvFile;
use medianet::image::{decode_image, encode_image, ImageBuffer, ImageFormat};
use medianet::median::{median_layer_backward, median_layer_forward, MedianLayerSpec};
use medianet::metrics::{mse, psnr};
use medianet::noise::{apply_salt_pepper_with_mask, ChannelMode, Impulse, NoiseSpec};
use medianet::ops::conv2d;
use medianet::rng::tensor_uniform;
use medianet::{Shape4, Tensor4};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = Shape4> {
    (1usize..3, 1usize..4, 1usize..9, 1usize..9).prop_map(|(n, c, h, w)| Shape4::new(n, c, h, w))
}

fn tensor(s: Shape4, seed: u64) -> Tensor4<f64> {
    tensor_uniform(s, seed, -1.0, 1.0)
}

fn kernel() -> impl Strategy<Value = usize> {
    prop_oneof![Just(3usize), Just(5usize)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_its_input(s in shape(), c_out in 1usize..4, a in -2.0f64..2.0, b in -2.0f64..2.0, seed: u64) {
        let x = tensor(s, seed);
        let y = tensor(s, seed ^ 1);
        let w = tensor(Shape4::new(c_out, s.c, 3, 3), seed ^ 2);
        let zero = Tensor4::zeros(Shape4::new(1, c_out, 1, 1));
        let mix = Tensor4::from_vec(s, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv2d(&mix, &w, &zero).unwrap();
        let cx = conv2d(&x, &w, &zero).unwrap();
        let cy = conv2d(&y, &w, &zero).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_bias_is_added_per_channel(s in shape(), c_out in 1usize..4, seed: u64) {
        let x = tensor(s, seed);
        let w = tensor(Shape4::new(c_out, s.c, 3, 3), seed ^ 2);
        let bias = tensor(Shape4::new(1, c_out, 1, 1), seed ^ 3);
        let with = conv2d(&x, &w, &bias).unwrap();
        let without = conv2d(&x, &w, &Tensor4::zeros(bias.shape())).unwrap();
        for n in 0..s.n {
            for c in 0..c_out {
                for (p, q) in with.plane(n, c).iter().zip(without.plane(n, c)) {
                    prop_assert!((p - q - bias.data()[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn median_commutes_with_channel_permutation(s in shape(), k in kernel(), seed: u64, rot in 0usize..3) {
        let spec = MedianLayerSpec::new(k).unwrap();
        let x = tensor(s, seed);
        let perm = |c: usize| (c + rot) % s.c;
        let px = Tensor4::from_fn(s, |n, c, y, xx| x.get(n, perm(c), y, xx));
        let (out, _) = median_layer_forward(&x, spec);
        let (pout, _) = median_layer_forward(&px, spec);
        for n in 0..s.n {
            for c in 0..s.c {
                prop_assert_eq!(pout.plane(n, c), out.plane(n, perm(c)));
            }
        }
    }

    #[test]
    fn median_output_comes_from_its_window(s in shape(), k in kernel(), seed: u64) {
        let spec = MedianLayerSpec::new(k).unwrap();
        let x = tensor(s, seed);
        let (out, arg) = median_layer_forward(&x, spec);
        let r = (k / 2) as isize;
        for o in 0..out.len() {
            let v = out.data()[o];
            match arg.source(o) {
                Some(src) => prop_assert_eq!(v, x.data()[src]),
                None => prop_assert_eq!(v, 0.0),
            }
            // The value also belongs to the zero-padded window multiset.
            let (n, rem) = (o / (s.c * s.plane()), o % (s.c * s.plane()));
            let (c, pos) = (rem / s.plane(), rem % s.plane());
            let (i, j) = ((pos / s.w) as isize, (pos % s.w) as isize);
            let mut found = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, xx) = (i + dy, j + dx);
                    let w = if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
                        0.0
                    } else {
                        x.get(n, c, y as usize, xx as usize)
                    };
                    found |= w == v;
                }
            }
            prop_assert!(found);
        }
    }

    #[test]
    fn median_is_monotone(s in shape(), k in kernel(), seed: u64) {
        let spec = MedianLayerSpec::new(k).unwrap();
        let x = tensor(s, seed);
        let bump = tensor_uniform::<f64>(s, seed ^ 9, 0.0, 0.5);
        let y = Tensor4::from_vec(s, x.data().iter().zip(bump.data()).map(|(a, b)| a + b).collect()).unwrap();
        let (mx, _) = median_layer_forward(&x, spec);
        let (my, _) = median_layer_forward(&y, spec);
        for (a, b) in mx.data().iter().zip(my.data()) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn median_backward_routes_every_kept_gradient_once(s in shape(), k in kernel(), seed: u64) {
        let spec = MedianLayerSpec::new(k).unwrap();
        let x = tensor(s, seed);
        let g = tensor(s, seed ^ 5);
        let (_, arg) = median_layer_forward(&x, spec);
        let gi = median_layer_backward(&g, &arg).unwrap();
        let kept: f64 = (0..g.len()).filter(|&o| arg.source(o).is_some()).map(|o| g.data()[o]).sum();
        prop_assert!((gi.sum() - kept).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_symmetric_and_mse_nonnegative(s in shape(), seed: u64) {
        let a = tensor_uniform::<f64>(s, seed, 0.0, 255.0);
        let b = tensor_uniform::<f64>(s, seed ^ 1, 0.0, 255.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!(mse(&a, &b).unwrap() >= 0.0);
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn noise_touches_only_marked_units(s in shape(), level in 0.01f64..0.99, seed: u64, per_pixel: bool) {
        let mode = if per_pixel { ChannelMode::PerPixel } else { ChannelMode::PerChannel };
        let spec = NoiseSpec::new(level, seed).unwrap().with_channel_mode(mode);
        let x = tensor_uniform::<f64>(s, seed ^ 7, 0.01, 0.99);
        let (y, mask) = apply_salt_pepper_with_mask(&x, &spec);
        let (again, _) = apply_salt_pepper_with_mask(&x, &spec);
        prop_assert_eq!(&y, &again);
        for n in 0..s.n {
            for c in 0..s.c {
                for i in 0..s.plane() {
                    let m = match mode {
                        ChannelMode::PerChannel => mask[(n * s.c + c) * s.plane() + i],
                        ChannelMode::PerPixel => mask[n * s.plane() + i],
                    };
                    let (before, after) = (x.plane(n, c)[i], y.plane(n, c)[i]);
                    match m {
                        Impulse::Clean => prop_assert_eq!(before.to_bits(), after.to_bits()),
                        Impulse::Salt => prop_assert_eq!(after, 1.0),
                        Impulse::Pepper => prop_assert_eq!(after, 0.0),
                    }
                }
            }
        }
    }

    #[test]
    fn images_round_trip_through_both_formats(w in 1usize..20, h in 1usize..20, rgb: bool, seed: u64) {
        let channels = if rgb { 3 } else { 1 };
        let data: Vec<u8> = tensor_uniform::<f64>(Shape4::new(1, 1, 1, w * h * channels), seed, 0.0, 256.0)
            .data()
            .iter()
            .map(|v| v.floor().min(255.0) as u8)
            .collect();
        let img = ImageBuffer::new(w, h, channels, data).unwrap();
        for format in [ImageFormat::Png, ImageFormat::Netpbm] {
            let back = decode_image(&encode_image(&img, format).unwrap()).unwrap();
            prop_assert_eq!(&back, &img);
        }
        prop_assert_eq!(ImageBuffer::from_normalized(&img.to_normalized::<f32>(), 0).unwrap(), img.clone());
    }

    #[test]
    fn kv_files_round_trip(entries in proptest::collection::vec(("[a-z_]{1,8}", "[ -~&&[^=#]]{0,12}"), 0..8)) {
        let mut kv = KvFile::new();
        for (k, v) in &entries {
            kv.push(k, v.trim());
        }
        prop_assert_eq!(KvFile::parse(&kv.to_string()).unwrap(), kv);
    }
}
