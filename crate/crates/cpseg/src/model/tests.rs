use super::*;
use crate::data::{generate_dataset, SceneSpec};
use crate::train::TrainConfig;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        text_layers: 1,
        vision_layers: 1,
        heads: 2,
        patch_size: 4,
        max_len: 16,
        pool_size: 4,
        image_h: 16,
        image_w: 16,
        ..ModelConfig::default()
    }
}

fn tiny_model(seed: u64) -> (CpSegModel, Vec<SegSample>) {
    let samples = generate_dataset(&SceneSpec::default(), seed, 2, 16, 16).unwrap();
    let taxonomy = ClassTaxonomy::flood_default();
    let corpus: Vec<String> = samples
        .iter()
        .flat_map(|s| s.prompt_records.iter().map(|n| n.sentence()))
        .collect();
    let model = CpSegModel::new(tiny_config(), taxonomy, &corpus, seed).unwrap();
    (model, samples)
}

#[test]
fn forward_produces_expected_shapes() {
    let (model, samples) = tiny_model(5);
    let sample = &samples[0];
    let chain = PromptChain {
        nodes: sample.prompt_records.clone(),
    };
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape).unwrap();
    let mut cache = HashMap::new();
    let fwd = model.forward(&mut tape, &bind, &mut cache, &sample.image, &chain).unwrap();

    let k = model.taxonomy.len();
    assert_eq!(tape.shape(fwd.dense), &[16, 8]); // 4x4 grid of d=8
    assert_eq!(fwd.thoughts.len(), chain.nodes.len());
    assert_eq!(fwd.banks.len(), chain.nodes.len() + 1);
    assert_eq!(fwd.thought_maps.len(), chain.nodes.len());
    assert_eq!(tape.shape(fwd.final_map.values), &[4, 4, k]);
    assert_eq!(tape.shape(fwd.decode_logits), &[16, 16, k]);
}

#[test]
fn empty_chain_still_segments() {
    let (model, samples) = tiny_model(6);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape).unwrap();
    let mut cache = HashMap::new();
    let fwd = model
        .forward(&mut tape, &bind, &mut cache, &samples[0].image, &PromptChain::default())
        .unwrap();
    assert!(fwd.thought_maps.is_empty());
    assert_eq!(tape.shape(fwd.final_map.values), &[4, 4, model.taxonomy.len()]);
}

#[test]
fn sentence_memoization_reuses_nodes() {
    let (model, _) = tiny_model(7);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape).unwrap();
    let mut cache = HashMap::new();
    let a = model
        .encode_sentence(&mut tape, &bind, &mut cache, "is the area flooded yes")
        .unwrap();
    let before = tape.len();
    let b = model
        .encode_sentence(&mut tape, &bind, &mut cache, "is the area flooded yes")
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(tape.len(), before);
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt.json");
    let (model, samples) = tiny_model(9);
    let tc = TrainConfig {
        embed_dim: 8,
        text_layers: 1,
        vision_layers: 1,
        pool_size: 4,
        ..TrainConfig::default()
    };
    model.save(&path, &tc).unwrap();
    let (loaded, tc_back) = CpSegModel::load(&path).unwrap();

    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.tokenizer.vocab_size(), model.tokenizer.vocab_size());
    assert_eq!(tc_back.embed_dim, 8);
    for ((_, a), (_, b)) in model.store.entries().zip(loaded.store.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.shape, b.shape);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    // Same forward output after the round trip.
    let chain = PromptChain {
        nodes: samples[0].prompt_records.clone(),
    };
    let run = |m: &CpSegModel| {
        let mut tape = Tape::new();
        let bind = m.bind(&mut tape).unwrap();
        let mut cache = HashMap::new();
        let fwd = m.forward(&mut tape, &bind, &mut cache, &samples[0].image, &chain).unwrap();
        tape.data(fwd.decode_logits).to_vec()
    };
    assert_eq!(run(&model), run(&loaded));
}

#[test]
fn checkpoint_shape_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt.json");
    let (model, _) = tiny_model(11);
    model.save(&path, &TrainConfig::default()).unwrap();
    // Corrupt one parameter's shape in the serialized form.
    let text = std::fs::read_to_string(&path).unwrap();
    let corrupted = text.replacen("\"shape\":[8]", "\"shape\":[9]", 1);
    assert_ne!(text, corrupted);
    std::fs::write(&path, corrupted).unwrap();
    assert!(CpSegModel::load(&path).is_err());
}

#[test]
fn frozen_text_encoder_stays_fixed_under_training() {
    let samples = generate_dataset(&SceneSpec::default(), 31, 4, 16, 16).unwrap();
    let taxonomy = ClassTaxonomy::flood_default();
    let config = TrainConfig {
        embed_dim: 8,
        text_layers: 1,
        vision_layers: 1,
        pool_size: 4,
        batch_size: 2,
        epochs_per_task: 1,
        freeze_text: true,
        ..TrainConfig::default()
    };
    let before = CpSegModel::new(
        config.model_config(16, 16),
        taxonomy.clone(),
        &[],
        config.seed,
    )
    .unwrap();
    let outcome = crate::train::train(&config, &samples, &taxonomy).unwrap();
    for ((_, a), (_, b)) in before.store.entries().zip(outcome.model.store.entries()) {
        if a.name.starts_with("text.") {
            assert_eq!(a.data, b.data, "{} moved despite freeze", a.name);
        }
    }
    // Something else must have moved.
    let moved = before
        .store
        .entries()
        .zip(outcome.model.store.entries())
        .any(|((_, a), (_, b))| a.data != b.data);
    assert!(moved);
}

#[test]
fn all_non_pool_parameters_receive_gradient() {
    let (model, samples) = tiny_model(13);
    let mut touched = vec![false; model.store.len()];
    let weights = LossWeights {
        tau: 0.07,
        lambda: 0.1,
        reduction: Reduction::Mean,
        decoder_loss_weight: 1.0,
    };
    for sample in &samples {
        let chain = PromptChain {
            nodes: sample.prompt_records.clone(),
        };
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape).unwrap();
        let mut cache = HashMap::new();
        let loss = model
            .sample_loss(&mut tape, &bind, &mut cache, sample, &chain, &weights)
            .unwrap();
        tape.backward(loss).unwrap();
        for (slot, (pid, _)) in model.store.entries().enumerate() {
            if let Some(g) = tape.grad(bind.get(pid)) {
                if g.iter().any(|v| *v != 0.0) {
                    touched[slot] = true;
                }
            }
        }
    }
    let mut selected_prompt_seen = false;
    for (slot, (_, e)) in model.store.entries().enumerate() {
        if e.name.starts_with("pool.key") {
            assert!(!touched[slot], "{} has no gradient path but got one", e.name);
        } else if e.name.starts_with("pool.prompt") {
            selected_prompt_seen |= touched[slot];
        } else {
            assert!(touched[slot], "{} never received a gradient", e.name);
        }
    }
    assert!(selected_prompt_seen, "no pool prompt was ever selected");
}

