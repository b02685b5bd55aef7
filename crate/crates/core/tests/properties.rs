use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use submodel::model::{
    base_forward, count_params, forward_with_submodel, serialized_size, Basemodel, BasemodelConfig, EmbeddingBundle,
    OneHotBundle, Submodel,
};
use submodel::store::{
    base_from_bytes, base_to_bytes, bundle_from_bytes, bundle_to_bytes, embedding_from_bytes, embedding_to_bytes,
    submodel_from_bytes, submodel_to_bytes,
};
use submodel::Tensor;

fn small_config() -> BasemodelConfig {
    BasemodelConfig {
        d_in: 3,
        d_model: 6,
        d_ff: 12,
        n_layers: 2,
        d_out: 3,
        seed: 1,
    }
}

/// Overwrites, truncates or extends `bytes` according to `op`.
fn mutate(mut bytes: Vec<u8>, op: u8, at: usize, fill: Vec<u8>) -> Vec<u8> {
    let at = at % bytes.len().max(1);
    match op % 3 {
        0 => {
            for (i, b) in fill.into_iter().enumerate() {
                if let Some(slot) = bytes.get_mut(at + i) {
                    *slot = b;
                }
            }
        }
        1 => bytes.truncate(at),
        _ => bytes.extend(fill),
    }
    bytes
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn serialized_length_matches_accounting(d_model in 1usize..24, d_b in 1usize..12, layers in 1usize..5, id: u64) {
        let sub = Submodel::init(id, d_model, d_b, layers, 3).unwrap();
        let bytes = submodel_to_bytes(&sub).unwrap();
        let count = count_params(d_model as u64, d_b as u64, layers as u64).unwrap();
        prop_assert_eq!(bytes.len() as u64, serialized_size(count));
        let back = submodel_from_bytes(&bytes).unwrap();
        prop_assert_eq!(submodel_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn submodel_parser_never_panics(op: u8, at: usize, fill in prop::collection::vec(any::<u8>(), 1..40)) {
        let sub = Submodel::init(4, 6, 3, 2, 0).unwrap();
        let _ = submodel_from_bytes(&mutate(submodel_to_bytes(&sub).unwrap(), op, at, fill));
    }

    #[test]
    fn bundle_parser_never_panics(op: u8, at: usize, fill in prop::collection::vec(any::<u8>(), 1..40)) {
        let members = (0..2).map(|i| Submodel::init(i, 6, 3, 2, i).unwrap()).collect();
        let bundle = OneHotBundle::new(members).unwrap();
        let _ = bundle_from_bytes(&mutate(bundle_to_bytes(&bundle).unwrap(), op, at, fill));
    }

    #[test]
    fn embedding_parser_never_panics(op: u8, at: usize, fill in prop::collection::vec(any::<u8>(), 1..40)) {
        let eb = EmbeddingBundle::init(&small_config(), vec![1, 2], 2, 3, 0).unwrap();
        let _ = embedding_from_bytes(&mutate(embedding_to_bytes(&eb).unwrap(), op, at, fill));
    }

    #[test]
    fn base_parser_never_panics(op: u8, at: usize, fill in prop::collection::vec(any::<u8>(), 1..40)) {
        let base = Basemodel::init(small_config()).unwrap();
        let _ = base_from_bytes(&mutate(base_to_bytes(&base).unwrap(), op, at, fill));
    }

    #[test]
    fn header_dimensions_are_range_checked(d_model: u32, d_b: u32, layers: u32) {
        let sub = Submodel::init(1, 6, 3, 2, 0).unwrap();
        let mut bytes = submodel_to_bytes(&sub).unwrap();
        bytes[16..20].copy_from_slice(&d_model.to_le_bytes());
        bytes[20..24].copy_from_slice(&d_b.to_le_bytes());
        bytes[24..28].copy_from_slice(&layers.to_le_bytes());
        if let Err(e) = submodel_from_bytes(&bytes) {
            prop_assert!(["TRUNCATED", "DIM_MISMATCH"].contains(&e.code()), "{}", e.code());
        }
    }

    #[test]
    fn deactivated_submodel_is_transparent(seed in 0u64..1000, rows in 1usize..16) {
        let base = Basemodel::init(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, 3], 2.0, &mut rng);
        let sub = Submodel::for_base(&base.config, 9, 4, seed).unwrap().with_alpha(0.0);
        let out = forward_with_submodel(&base, Some(&sub), &x).unwrap();
        prop_assert!(out.bit_eq(&base_forward(&base, &x).unwrap()));
    }

    #[test]
    fn forward_is_row_independent(seed in 0u64..1000, rows in 2usize..10) {
        let base = Basemodel::init(small_config()).unwrap();
        let sub = Submodel::for_base(&base.config, 9, 4, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, 3], 1.0, &mut rng);
        let all = forward_with_submodel(&base, Some(&sub), &x).unwrap();
        for r in 0..rows {
            let one = Tensor::matrix(1, 3, x.row(r).to_vec()).unwrap();
            let got = forward_with_submodel(&base, Some(&sub), &one).unwrap();
            prop_assert_eq!(got.row(0), all.row(r));
        }
    }
}
