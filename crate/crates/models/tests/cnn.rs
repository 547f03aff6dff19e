use digitwin_autodiff::{Graph, ParamStore};
use digitwin_models::{cltt_loss, Cnn, CnnConfig, Contrastive, EmbeddingBatch, Encoder, Images, ViT, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> CnnConfig {
    CnnConfig {
        image_size: 16,
        stem_channels: 4,
        stage_channels: vec![4, 6],
        blocks_per_stage: 2,
        projection_hidden: 8,
        projection_dim: 5,
        ..CnnConfig::default()
    }
}

fn random_images<T: digitwin_autodiff::Float>(count: usize, size: usize, seed: u64) -> Images<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..count * size * size * 3).map(|_| T::from_f64(rng.gen())).collect();
    Images::new(count, size, data).unwrap()
}

/// Direct convolution of one `[C, H, W]` map with zero padding.
fn conv(p: &ParamStore<f64>, name: &str, x: &[f64], c: usize, s: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let w = p.get(p.id(&format!("{name}.weight")).unwrap());
    let b = p.get(p.id(&format!("{name}.bias")).unwrap()).data();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    assert_eq!(w.shape()[1], c);
    let pad = k / 2;
    let out = (s + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; o * out * out];
    for oc in 0..o {
        for oy in 0..out {
            for ox in 0..out {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= s as isize || ix >= s as isize {
                                continue;
                            }
                            acc += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                * x[(ic * s + iy as usize) * s + ix as usize];
                        }
                    }
                }
                y[(oc * out + oy) * out + ox] = acc;
            }
        }
    }
    (y, o, out)
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Straight-line pooled features for one channel-last image.
fn reference_pooled(cfg: &CnnConfig, p: &ParamStore<f64>, img: &[f64]) -> Vec<f64> {
    let s = cfg.image_size;
    let mut x = vec![0.0; 3 * s * s];
    for y in 0..s {
        for xx in 0..s {
            for c in 0..3 {
                x[(c * s + y) * s + xx] = img[(y * s + xx) * 3 + c];
            }
        }
    }
    let (h, mut c, mut s) = conv(p, "stem", &x, 3, s, 2);
    let mut x = relu(h);
    for (si, _) in cfg.stage_channels.iter().enumerate() {
        for k in 0..cfg.blocks_per_stage {
            let name = format!("stage{}.block{k}", si + 1);
            let stride = if k == 0 { 2 } else { 1 };
            let (h, c1, s1) = conv(p, &format!("{name}.conv1"), &x, c, s, stride);
            let (h, c2, s2) = conv(p, &format!("{name}.conv2"), &relu(h), c1, s1, 1);
            let short = if p.id(&format!("{name}.shortcut.weight")).is_some() {
                conv(p, &format!("{name}.shortcut"), &x, c, s, stride).0
            } else {
                x.clone()
            };
            x = relu(h.iter().zip(&short).map(|(a, b)| a + b).collect());
            c = c2;
            s = s2;
        }
    }
    x.chunks(s * s).map(|ch| ch.iter().sum::<f64>() / (s * s) as f64).collect()
}

#[test]
fn ten_weighted_layers() {
    let cnn = Cnn::<f32>::new(CnnConfig::default()).unwrap();
    let layers = cnn.weighted_layers();
    assert_eq!(layers.len(), 10);
    for name in &layers {
        assert!(cnn.params().id(&format!("{name}.weight")).is_some(), "{name}");
    }
    // Main-path convolutions other than the stem are 3×3.
    for name in &layers[1..9] {
        let w = cnn.params().get(cnn.params().id(&format!("{name}.weight")).unwrap());
        assert_eq!(&w.shape()[2..], &[3, 3]);
    }
    assert_eq!(cnn.feature_dim(), 64);
}

#[test]
fn pooled_features_match_direct_convolution() {
    let cfg = small();
    let mut cnn = Cnn::<f64>::new(cfg.clone()).unwrap();
    // Nonzero biases so they are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<_> = cnn.params().ids().collect();
    for id in ids {
        for v in cnn.params_mut().get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let imgs = random_images::<f64>(2, 16, 5);
    let (pooled, z) = cnn.encode(&imgs).unwrap();
    assert_eq!(pooled.shape(), &[2, 6]);
    for i in 0..2 {
        let want = reference_pooled(&cfg, cnn.params(), imgs.image(i));
        for (a, b) in pooled.data()[i * 6..(i + 1) * 6].iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let n: f64 = z.data()[i * 5..(i + 1) * 5].iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn models_share_one_training_loss() {
    let vit = ViT::<f32>::new(ViTConfig::default()).unwrap();
    let cnn = Cnn::<f32>::new(CnnConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..9 * 7).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut values = Vec::new();
    for which in 0..3 {
        let mut g = Graph::<f32>::new();
        let z = g.constant(vec![9, 7], data.clone()).unwrap();
        let batch = EmbeddingBatch::windows(z, 3, 3);
        let l = match which {
            0 => vit.loss(&mut g, &batch),
            1 => cnn.loss(&mut g, &batch),
            _ => cltt_loss(&mut g, &batch, 0.5),
        }
        .unwrap();
        values.push(g.scalar_value(l));
    }
    assert_eq!(values[0], values[2]);
    assert_eq!(values[1], values[2]);
    assert_eq!(vit.temperature(), cnn.temperature());
}

#[test]
fn wrong_resolution_is_rejected() {
    let cnn = Cnn::<f32>::new(small()).unwrap();
    assert!(cnn.encode(&random_images(1, 32, 0)).is_err());
    let bad = CnnConfig {
        image_size: 20,
        ..small()
    };
    assert!(bad.validate().is_err());
    let bad = CnnConfig {
        stem_kernel: 4,
        ..small()
    };
    assert!(bad.validate().is_err());
}
