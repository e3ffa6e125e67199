//! Whole-model behavior that the per-module unit tests do not reach.

use hoit::model::{HoiTransformer, ModelConfig};
use hoit::tensor::{Graph, Tensor};

fn config(encoder_layers: usize, decoder_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        encoder_layers,
        decoder_layers,
        heads: 2,
        ffn_dim: 16,
        num_queries: 5,
        num_object_classes: 3,
        num_interaction_classes: 2,
        stem_channels: vec![4, 8],
        ..ModelConfig::default()
    }
}

fn image(v: f64) -> Tensor {
    let data = (0..3 * 8 * 8).map(|i| v * ((i % 7) as f64 - 3.0) / 3.0).collect();
    Tensor::new(vec![3, 8, 8], data).unwrap()
}

#[test]
fn without_transformer_layers_heads_read_the_queries() {
    let model = HoiTransformer::new(config(0, 0)).unwrap();
    let (a, out, _) = model.predict(&image(1.0)).unwrap();
    let (b, _, _) = model.predict(&image(-0.5)).unwrap();
    assert_eq!(a, b, "nothing reads the image without decoder layers");
    assert!(out.cross_attention.is_none());

    // Heads applied straight to the query table give the same quintuples.
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let id = model.params().find("queries").expect("query table");
    let q = g.constant(model.params().get(id).clone());
    let heads = model.heads_forward(&mut g, &p, q).unwrap();
    assert_eq!(heads.predictions(&g), a);
}

#[test]
fn decoder_layers_make_predictions_depend_on_the_image() {
    let model = HoiTransformer::new(config(1, 1)).unwrap();
    let (a, out, _) = model.predict(&image(1.0)).unwrap();
    let (b, _, _) = model.predict(&image(-0.5)).unwrap();
    assert_ne!(a, b);
    let w = out.cross_attention.expect("last-layer cross attention");
    // 8x8 input through two stride-2 blocks leaves a 2x2 map.
    assert_eq!(w.shape(), &[5, 4]);
    for r in 0..5 {
        assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
