use weakneg::autodiff::gradcheck::{check_function, GradCheckConfig};
use weakneg::autodiff::{Graph, ParameterStore, Tensor};
use weakneg::embedder::{embed_patches, Embedder, EmbedderConfig};
use weakneg::patches::{image_to_patches, ImageTensor, PatchGridConfig};

fn setup() -> (EmbedderConfig, ParameterStore, weakneg::patches::PatchSet) {
    let cfg = EmbedderConfig::reduced(&[4, 8, 8, 8], 8);
    let mut store = ParameterStore::new(21);
    Embedder::new(cfg.clone()).unwrap().init(&mut store).unwrap();
    let mut img = ImageTensor::filled(128, 192, 3, 0.0);
    for y in 0..128 {
        for x in 0..192 {
            img.set(y, x, (x / 64) % 3, ((x * y) % 17) as f64 / 16.0);
        }
    }
    let set = image_to_patches(&img, &PatchGridConfig::default()).unwrap();
    (cfg, store, set)
}

#[test]
fn permuting_patches_permutes_rows() {
    let (cfg, store, set) = setup();
    let base = embed_patches(&set, &store, &cfg).unwrap();
    let perm: Vec<usize> = (0..set.len()).rev().collect();
    let permuted = embed_patches(&set.select(&perm), &store, &cfg).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(permuted.matrix.row(i), base.matrix.row(p));
    }
}

#[test]
fn embedding_does_not_depend_on_the_rest_of_the_set() {
    let (cfg, store, set) = setup();
    let all = embed_patches(&set, &store, &cfg).unwrap();
    for i in 0..set.len() {
        let alone = embed_patches(&set.select(&[i]), &store, &cfg).unwrap();
        assert_eq!(alone.matrix.row(0), all.matrix.row(i));
    }
}

#[test]
fn rows_are_finite_and_one_per_patch() {
    let (cfg, store, set) = setup();
    let e = embed_patches(&set, &store, &cfg).unwrap();
    assert_eq!(e.matrix.shape(), &[set.len(), cfg.embedding_dim]);
    assert!(e.matrix.is_finite());
}

#[test]
fn loss_through_embedder_matches_finite_differences() {
    // Two 16×16 patches keep the check small; every input pixel is probed.
    let mut cfg = EmbedderConfig::reduced(&[3, 4], 4);
    cfg.input_size = (16, 16);
    let mut store = ParameterStore::new(8);
    let emb = Embedder::new(cfg.clone()).unwrap();
    emb.init(&mut store).unwrap();
    let input = Tensor::from_vec(
        &[2, 3, 16, 16],
        (0..2 * 3 * 256).map(|i| ((i * 37) % 101) as f64 / 100.0).collect(),
    );
    let report = check_function(
        "loss_through_embedder",
        |g: &mut Graph, v| {
            let e = emb.forward(g, &store, v[0]).unwrap();
            let sq = g.mul(e, e);
            g.sum(sq)
        },
        None,
        vec![input],
        &GradCheckConfig::default(),
        1,
    )
    .unwrap();
    assert!(report.pass, "max relative error {}", report.max_rel_err);
}
