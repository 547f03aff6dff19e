use digitwin_eval::viz::{embeddings_csv, min_max, pca_csv, upsample_bilinear};
use digitwin_eval::{attention_heatmaps, export_embeddings, heatmap_video, pca_project, EvalError, ModelRef};
use digitwin_models::{Cnn, CnnConfig, Encoder, Images, MaeConfig, VideoMae, ViT, ViTConfig};
use digitwin_sim::{generate_dataset, DatasetConfig, Frame};
use proptest::prelude::*;

fn frames(n: usize) -> Vec<Frame> {
    generate_dataset(1, n, 11, &DatasetConfig::default()).unwrap().frames
}

fn vit(heads: usize) -> ViT<f32> {
    let mut cfg = ViTConfig::with_heads(heads).unwrap();
    cfg.train.seed = 4;
    ViT::new(cfg).unwrap()
}

#[test]
fn heatmap_shape_and_normalisation_on_100_frames() {
    let fs = frames(100);
    let refs: Vec<&Frame> = fs.iter().collect();
    let model = vit(3);
    let sets = attention_heatmaps(ModelRef::Vit(&model), &refs).unwrap();
    assert_eq!(sets.len(), 100);
    for s in &sets {
        assert_eq!(s.num_heads(), 3);
        assert_eq!(s.layer, 2);
        for (h, map) in s.maps.iter().enumerate() {
            assert_eq!(map.len(), 64 * 64);
            assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.patch_attention[h].len(), 64);
            let total: f32 = s.patch_attention[h].iter().sum();
            assert!((total - 1.0).abs() < 1e-5);
            if !s.flat[h] {
                let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                assert_eq!((lo, hi), (0.0, 1.0));
            }
        }
    }
}

#[test]
fn uniform_attention_gives_flat_maps() {
    let mut model = vit(1);
    let qkv = model.blocks().last().unwrap().attn.qkv;
    for id in [qkv.w, qkv.b] {
        model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let fs = frames(3);
    let refs: Vec<&Frame> = fs.iter().collect();
    for s in attention_heatmaps(ModelRef::Vit(&model), &refs).unwrap() {
        assert!(s.flat[0]);
        assert!(s.maps[0].iter().all(|&v| v == 0.0));
        assert!(s.patch_attention[0].iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-6));
    }
}

#[test]
fn models_without_class_attention_are_unsupported() {
    let fs = frames(1);
    let refs: Vec<&Frame> = fs.iter().collect();
    let cnn = Cnn::<f32>::new(CnnConfig::default()).unwrap();
    assert!(matches!(
        attention_heatmaps(ModelRef::Cnn(&cnn), &refs),
        Err(EvalError::Unsupported(_))
    ));
    let mae = VideoMae::<f32>::new(MaeConfig::default()).unwrap();
    assert!(matches!(
        attention_heatmaps(ModelRef::VideoMae(&mae), &refs),
        Err(EvalError::Unsupported(_))
    ));
}

#[test]
fn bilinear_upsampling() {
    // A constant grid stays constant; a 2×2 ramp interpolates at pixel centres.
    assert!(upsample_bilinear(&[0.25; 4], 2, 8).iter().all(|&v| (v - 0.25).abs() < 1e-7));
    let up = upsample_bilinear(&[0.0, 1.0, 0.0, 1.0], 2, 4);
    assert_eq!(&up[..4], &[0.0, 0.25, 0.75, 1.0]);
    assert_eq!(&up[4..8], &up[..4]);
    let (m, flat) = min_max(&[2.0, 2.0]);
    assert!(flat && m == vec![0.0, 0.0]);
}

#[test]
fn heatmap_video_writes_indexed_images() {
    let fs = frames(10);
    let refs: Vec<&Frame> = fs.iter().collect();
    let model = vit(3);
    let dir = tempfile::tempdir().unwrap();
    let a = heatmap_video(ModelRef::Vit(&model), &refs, &dir.path().join("a")).unwrap();
    let b = heatmap_video(ModelRef::Vit(&model), &refs, &dir.path().join("b")).unwrap();
    assert_eq!(a.len(), 30);
    assert_eq!(a, b);
    let index = std::fs::read_to_string(dir.path().join("a/index.csv")).unwrap();
    let listed: Vec<&str> = index.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    let mut unique = listed.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), listed.len());
    let mut on_disk: Vec<String> = std::fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    on_disk.sort_unstable();
    assert_eq!(on_disk, unique);
    for img in &a {
        let x = std::fs::read(dir.path().join("a").join(&img.file)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(&img.file)).unwrap();
        assert_eq!(x, y);
        assert!(x.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(x.len(), 13 + 64 * 64);
    }
}

#[test]
fn exported_embeddings_equal_encoder_output() {
    let fs = frames(20);
    let refs: Vec<&Frame> = fs.iter().collect();
    let cnn = Cnn::<f32>::new(CnnConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    let table = export_embeddings(&cnn, &refs, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let first_feature = header.iter().position(|h| *h == "f0").unwrap();
    assert_eq!(header.len() - first_feature, cnn.feature_dim());
    let rows: Vec<Vec<f32>> = lines
        .map(|l| l.split(',').skip(first_feature).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 20);
    let direct = cnn.features(&Images::from_frames(&refs, 64).unwrap()).unwrap();
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 64);
        for (j, v) in row.iter().enumerate() {
            assert!((v - direct[i * 64 + j]).abs() <= 1e-6);
        }
    }
    assert_eq!(embeddings_csv(&table, &refs), text);
}

/// Cyclic Jacobi eigensolver for a symmetric matrix; eigenvalues descending.
fn jacobi(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y * n + y].total_cmp(&a[x * n + x]));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let vecs = order.iter().flat_map(|&i| (0..n).map(move |k| (k, i))).map(|(k, i)| v[k * n + i]).collect();
    (vals, vecs)
}

fn reconstruction_error(rows: &[f64], d: usize, mean: &[f64], comps: &[f64], k: usize) -> f64 {
    rows.chunks(d)
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(mean).map(|(x, m)| x - m).collect();
            let mut rec = vec![0.0; d];
            for j in 0..k {
                let u = &comps[j * d..(j + 1) * d];
                let dot: f64 = c.iter().zip(u).map(|(a, b)| a * b).sum();
                rec.iter_mut().zip(u).for_each(|(r, b)| *r += dot * b);
            }
            c.iter().zip(&rec).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum()
}

#[test]
fn pca_recovers_axis_aligned_data() {
    // A symmetric grid has zero covariance between the axes.
    let rows: Vec<f64> = [-2.0, -1.0, 1.0, 2.0]
        .iter()
        .flat_map(|&x| [-1.0, 1.0].map(|y| [3.0 * x + 10.0, 0.3 * y - 4.0]))
        .flatten()
        .collect();
    let p = pca_project(&rows, 2, 2).unwrap();
    assert!(!p.degenerate);
    assert!((p.components[0].abs() - 1.0).abs() < 1e-12 && p.components[1].abs() < 1e-12);
    assert!(p.components[0] > 0.0 && p.components[3] > 0.0);
    for (i, r) in rows.chunks(2).enumerate() {
        assert!((p.coords[i * 2] - (r[0] - p.mean[0])).abs() < 1e-9);
        assert!((p.coords[i * 2 + 1] - (r[1] - p.mean[1])).abs() < 1e-9);
    }
    assert_eq!(pca_csv(&p).lines().count(), 9);
}

#[test]
fn zero_variance_is_flagged() {
    let p = pca_project(&[1.0, 2.0, 3.0].repeat(5), 3, 2).unwrap();
    assert!(p.degenerate);
    assert!(p.coords.iter().all(|&c| c == 0.0));
    assert!(pca_project(&[1.0, 2.0], 2, 2).is_err());
}

proptest! {
    #[test]
    fn pca_agrees_with_jacobi(rows in prop::collection::vec(-5.0f64..5.0, 24..=60), k in 1usize..=3) {
        let d = 4;
        let n = rows.len() / d;
        let rows = &rows[..n * d];
        let p = pca_project(rows, d, k).unwrap();
        prop_assert!(p.variances.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        for c in 0..k {
            let u = &p.components[c * d..(c + 1) * d];
            let pivot = (0..d).max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs())).unwrap();
            prop_assert!(u[pivot] > 0.0);
            let var: f64 = p.coords.iter().skip(c).step_by(k).map(|x| x * x).sum::<f64>() / n as f64;
            prop_assert!((var - p.variances[c]).abs() < 1e-8);
        }
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().skip(j).step_by(d).sum::<f64>() / n as f64).collect();
        let mut cov = vec![0.0; d * d];
        for r in rows.chunks(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n as f64;
                }
            }
        }
        let (vals, vecs) = jacobi(cov, d);
        let jac_comps = &vecs[..k * d];
        let ours = reconstruction_error(rows, d, &p.mean, &p.components, k);
        let oracle = reconstruction_error(rows, d, &mean, jac_comps, k);
        prop_assert!((ours - oracle).abs() <= 1e-8 * oracle.max(1.0), "{} vs {}", ours, oracle);
        for c in 0..k {
            prop_assert!((p.variances[c] - vals[c]).abs() < 1e-8);
        }
    }
}
