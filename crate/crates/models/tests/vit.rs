use digitwin_autodiff::{Graph, ParamStore, Tensor};
use digitwin_models::{patchify, Contrastive, EmbeddingBatch, Images, ViT, ViTConfig};
use digitwin_sim::{generate_dataset, DatasetConfig, Frame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- straight-line reference encoder, f64 -------------------------------

struct Ref<'a> {
    p: &'a ParamStore<f64>,
}

impl Ref<'_> {
    fn t(&self, name: &str) -> &[f64] {
        self.p.get(self.p.id(name).unwrap_or_else(|| panic!("missing {name}"))).data()
    }

    /// `x: [n, din]` times `name.weight: [din, dout]` plus bias.
    fn linear(&self, name: &str, x: &[f64], n: usize, din: usize) -> Vec<f64> {
        let w = self.t(&format!("{name}.weight"));
        let b = self.t(&format!("{name}.bias"));
        let dout = b.len();
        assert_eq!(w.len(), din * dout);
        let mut y = vec![0.0; n * dout];
        for r in 0..n {
            for o in 0..dout {
                let mut s = b[o];
                for i in 0..din {
                    s += x[r * din + i] * w[i * dout + o];
                }
                y[r * dout + o] = s;
            }
        }
        y
    }

    fn layer_norm(&self, name: &str, x: &[f64], d: usize) -> Vec<f64> {
        let gain = self.t(&format!("{name}.gain"));
        let bias = self.t(&format!("{name}.bias"));
        x.chunks(d)
            .flat_map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + 1e-5).sqrt();
                row.iter()
                    .enumerate()
                    .map(move |(j, v)| (v - mean) * inv * gain[j] + bias[j])
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// One sequence `[t, d]` through a pre-norm block.
    fn block(&self, name: &str, x: &[f64], t: usize, d: usize, heads: usize) -> Vec<f64> {
        let dh = d / heads;
        let h = self.layer_norm(&format!("{name}.ln1"), x, d);
        let qkv = self.linear(&format!("{name}.attn.qkv"), &h, t, d);
        // qkv row layout: [3][heads][dh]
        let at = |r: usize, part: usize, head: usize, k: usize| qkv[r * 3 * d + part * d + head * dh + k];
        let mut ctx = vec![0.0; t * d];
        for hd in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|k| at(i, 0, hd, k) * at(j, 1, hd, k)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..dh {
                    ctx[i * d + hd * dh + k] = (0..t).map(|j| e[j] / z * at(j, 2, hd, k)).sum();
                }
            }
        }
        let a = self.linear(&format!("{name}.attn.proj"), &ctx, t, d);
        let x: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let h = self.layer_norm(&format!("{name}.ln2"), &x, d);
        let hidden = self.t(&format!("{name}.mlp.fc1.bias")).len();
        let h = self.linear(&format!("{name}.mlp.fc1"), &h, t, d);
        let h: Vec<f64> = h
            .iter()
            .map(|&u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
            .collect();
        let m = self.linear(&format!("{name}.mlp.fc2"), &h, t, hidden);
        x.iter().zip(&m).map(|(u, v)| u + v).collect()
    }

    /// One image's patches `[P, pd]` -> (cls feature, projection).
    fn encode(&self, cfg: &ViTConfig, patches: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, np, pd) = (cfg.embed_dim, cfg.num_patches(), cfg.patch_dim());
        let t = np + 1;
        let emb = self.linear("patch_embed", patches, np, pd);
        let cls = self.t("cls_token");
        let pos = self.t("pos_embed");
        let mut x: Vec<f64> = cls.iter().chain(&emb).cloned().collect();
        x.iter_mut().zip(pos).for_each(|(u, v)| *u += v);
        for l in 0..cfg.num_layers {
            x = self.block(&format!("block{l}"), &x, t, d, cfg.num_heads);
        }
        let x = self.layer_norm("norm", &x, d);
        let c = x[..d].to_vec();
        let h = self.linear("head.fc1", &c, 1, d);
        let h: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
        let z = self.linear("head.fc2", &h, 1, cfg.projection_hidden);
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        (c, z.iter().map(|v| v / n).collect())
    }
}

// ---- helpers -------------------------------------------------------------

fn frames(n: usize, seed: u64) -> Vec<Frame> {
    generate_dataset(1, n, seed, &DatasetConfig::default()).unwrap().frames
}

fn images<T: digitwin_autodiff::Float>(frames: &[Frame]) -> Images<T> {
    let refs: Vec<&Frame> = frames.iter().collect();
    Images::from_frames(&refs, 64).unwrap()
}

/// Moves weights away from their initial values so biases and norms matter.
fn perturbed(seed: u64) -> ViT<f32> {
    let mut vit = ViT::<f32>::new(ViTConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = vit.params().ids().collect();
    for id in ids {
        for v in vit.params_mut().get_mut(id).data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    vit
}

// ---- tests ---------------------------------------------------------------

#[test]
fn encode_matches_reference_implementation() {
    let vit = perturbed(7);
    let v64 = vit.cast::<f64>();
    let fr = frames(3, 2);
    let imgs = images::<f64>(&fr);
    let (cls, z) = v64.encode(&imgs).unwrap();
    let patches = patchify(&imgs, 8, 64).unwrap();
    let cfg = vit.config();
    let per = cfg.num_patches() * cfg.patch_dim();
    let oracle = Ref { p: v64.params() };
    for i in 0..3 {
        let (c, zr) = oracle.encode(cfg, &patches.data()[i * per..(i + 1) * per]);
        let d = cfg.embed_dim;
        let k = cfg.projection_dim;
        for (a, b) in cls.data()[i * d..(i + 1) * d].iter().zip(&c) {
            assert!((a - b).abs() < 1e-5, "cls {a} vs {b}");
        }
        for (a, b) in z.data()[i * k..(i + 1) * k].iter().zip(&zr) {
            assert!((a - b).abs() < 1e-5, "z {a} vs {b}");
        }
    }
    // The f32 model agrees with its f64 cast.
    let (cls32, _) = vit.encode(&images::<f32>(&fr)).unwrap();
    for (a, b) in cls32.data().iter().zip(cls.data()) {
        assert!((*a as f64 - b).abs() < 1e-3);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    // Four windows of three frames through the encoder and the loss.
    let vit = perturbed(3);
    let fr = frames(12, 4);
    let img32 = images::<f32>(&fr);
    let img64 = images::<f64>(&fr);

    let mut g = Graph::<f32>::new();
    let p = vit.params().bind(&mut g);
    let z = vit.project(&mut g, &p, &img32).unwrap();
    let loss = vit.loss(&mut g, &EmbeddingBatch::windows(z, 4, 3)).unwrap();
    let grads = g.backward(loss).unwrap();

    let base = vit.cast::<f64>();
    let loss64 = |m: &ViT<f64>| {
        let mut g = Graph::<f64>::new();
        let p = m.params().bind_frozen(&mut g);
        let z = m.forward(&mut g, &p, &img64).unwrap().z;
        let l = digitwin_models::cltt_loss(&mut g, &EmbeddingBatch::windows(z, 4, 3), 0.5).unwrap();
        g.scalar_value(l)
    };

    let mut checked = 0;
    for id in vit.params().ids() {
        let analytic = grads.get(p[id]).expect("every parameter receives a gradient");
        // The entry with the largest gradient in each tensor.
        let (idx, &a) = analytic
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .unwrap();
        if a.abs() < 1e-6 {
            continue;
        }
        let h = 1e-5;
        let mut up = base.clone();
        up.params_mut().get_mut(id).data_mut()[idx] += h;
        let mut down = base.clone();
        down.params_mut().get_mut(id).data_mut()[idx] -= h;
        let numeric = (loss64(&up) - loss64(&down)) / (2.0 * h);
        let rel = (a as f64 - numeric).abs() / numeric.abs().max(a.abs() as f64);
        assert!(rel < 1e-3, "{}[{idx}]: {a} vs {numeric}", vit.params().name(id));
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} tensors had a measurable gradient");
}

#[test]
fn token_counts() {
    let cfg = ViTConfig::default();
    assert_eq!(cfg.seq_len(), 65);
    let big = ViTConfig {
        image_size: 224,
        ..ViTConfig::default()
    };
    assert_eq!(big.seq_len(), 785);
    let vit = ViT::<f32>::new(big).unwrap();
    let imgs = Images::new(1, 224, vec![0.5f32; 224 * 224 * 3]).unwrap();
    let mut g = Graph::new();
    let p = vit.params().bind_frozen(&mut g);
    let out = vit.forward(&mut g, &p, &imgs).unwrap();
    assert_eq!(g.shape(out.tokens), &[1, 785, 64]);
    assert_eq!(g.shape(out.attention[0]), &[1, 785, 785]);
}

#[test]
fn blank_frame_tokens_are_positional_embeddings() {
    let vit = ViT::<f64>::new(ViTConfig::default()).unwrap();
    let imgs = Images::new(1, 64, vec![0.0; 64 * 64 * 3]).unwrap();
    let mut g = Graph::new();
    let p = vit.params().bind_frozen(&mut g);
    let out = vit.forward(&mut g, &p, &imgs).unwrap();
    let tokens = g.value(out.tokens);
    let pos = vit.params().get(vit.pos_embed_id()).data();
    let cls = vit.params().get(vit.cls_token_id()).data();
    let bias = vit.params().get(vit.patch_embed().b).data();
    let d = 64;
    for t in 0..65 {
        for j in 0..d {
            let expect = pos[t * d + j] + if t == 0 { cls[j] } else { bias[j] };
            assert!((tokens[t * d + j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn patch_order_changes_the_encoding() {
    let vit = ViT::<f64>::new(ViTConfig::default()).unwrap();
    let imgs = images::<f64>(&frames(1, 9));
    let patches = patchify(&imgs, 8, 64).unwrap();
    let pd = 192;
    let mut swapped = patches.data().to_vec();
    // Swap the first patch with the last one.
    for k in 0..pd {
        swapped.swap(k, 63 * pd + k);
    }
    assert_ne!(&swapped[..], patches.data());
    let run = |data: Vec<f64>| {
        let mut g = Graph::new();
        let p = vit.params().bind_frozen(&mut g);
        let x = g.leaf(&Tensor::new(vec![1, 64, pd], data).unwrap());
        let out = vit.forward_patches(&mut g, &p, x).unwrap();
        g.value(out.cls).to_vec()
    };
    let a = run(patches.data().to_vec());
    let b = run(swapped);
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn projections_are_unit_length_and_deterministic() {
    let vit = ViT::<f32>::new(ViTConfig::default()).unwrap();
    let fr = frames(4, 1);
    let batch = vec![fr[0].clone(), fr[2].clone(), fr[0].clone()];
    let (_, z) = vit.encode(&images::<f32>(&batch)).unwrap();
    let k = vit.config().projection_dim;
    for row in z.data().chunks(k) {
        let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    assert_eq!(&z.data()[..k], &z.data()[2 * k..]);
    let again = ViT::<f32>::new(ViTConfig::default()).unwrap();
    assert_eq!(again.encode(&images::<f32>(&batch)).unwrap().1, z);
}

#[test]
fn size_family_and_invalid_configs() {
    for (h, w) in [(1, 64), (3, 96), (6, 192), (9, 288)] {
        let c = ViTConfig::with_heads(h).unwrap();
        assert_eq!((c.num_heads, c.num_layers, c.embed_dim), (h, h, w));
    }
    assert!(ViTConfig::with_heads(2).is_err());
    let bad = ViTConfig {
        patch_size: 7,
        ..ViTConfig::default()
    };
    assert!(ViT::<f32>::new(bad).is_err());
    let bad = ViTConfig {
        window: 4,
        ..ViTConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn wrong_patch_shape_is_rejected() {
    let vit = ViT::<f32>::new(ViTConfig::default()).unwrap();
    let mut g = Graph::new();
    let p = vit.params().bind_frozen(&mut g);
    let x = g.leaf(&Tensor::zeros(vec![1, 63, 192]));
    assert!(vit.forward_patches(&mut g, &p, x).is_err());
}
