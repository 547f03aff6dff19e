use digitwin_autodiff::checkpoint::{self, config_hash};
use digitwin_autodiff::{Adam, AdamConfig, Graph, Init, ParamStore, Tensor};

fn toy_store(seed: u64) -> ParamStore<f32> {
    let mut init = Init::new(seed);
    let mut store = ParamStore::new();
    store.add("w", init.trunc_normal(&[3, 1], 0.02));
    store.add("b", Tensor::zeros([1]));
    store
}

fn fit(store: &mut ParamStore<f32>, steps: usize) -> f32 {
    let xs = Tensor::<f32>::new([4, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 1., 1.]).unwrap();
    let ys = Tensor::<f32>::new([4, 1], vec![1., -1., 0.5, 0.5]).unwrap();
    let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, store);
    let mut last = f32::NAN;
    for _ in 0..steps {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let ids: Vec<_> = store.ids().collect();
        let x = g.leaf(&xs);
        let y = g.leaf(&ys);
        let h = g.matmul(x, p[ids[0]]).unwrap();
        let h = g.add_broadcast(h, p[ids[1]]).unwrap();
        let loss = g.mse(h, y).unwrap();
        last = g.scalar_value(loss);
        let mut grads = g.backward(loss).unwrap();
        store.absorb_grads(&mut grads, &p);
        adam.step(store).unwrap();
    }
    last
}

#[test]
fn adam_reduces_loss_deterministically() {
    let mut a = toy_store(1);
    let mut b = toy_store(1);
    let la = fit(&mut a, 200);
    let lb = fit(&mut b, 200);
    assert!(la < 0.05, "loss {la}");
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(a, b);
}

#[test]
fn truncated_normal_init_respects_bounds() {
    let t: Tensor<f64> = Init::new(3).trunc_normal(&[1000], 0.02);
    assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    let std = (t.data().iter().map(|v| v * v).sum::<f64>() / 1000.0).sqrt();
    assert!((0.014..0.022).contains(&std), "std {std}");
}

#[test]
fn checkpoint_round_trip_and_header() {
    let store = toy_store(7);
    let hash = config_hash("embed_dim = 64");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    checkpoint::save(&path, "toy", hash, 7, &store).unwrap();
    let (header, loaded) = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(header.kind, "toy");
    assert_eq!(header.config_hash, hash);
    assert_eq!(header.seed, 7);
    assert_eq!(header.version, checkpoint::FORMAT_VERSION);
    assert_eq!(loaded, store);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DTCK");
    assert!(checkpoint::decode::<f64>(&bytes).is_err(), "dtype mismatch must be rejected");
    assert!(checkpoint::decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
}
