use egcr_core::engine::{ingest, IngestSources, Model, ModelConfig, DEFAULT_DIM};
use egcr_core::eval::experiment::evaluate;
use egcr_core::eval::{run_experiment, ExperimentConfig};
use egcr_core::explainer::FallbackOnlyClient;
use egcr_core::recommender::FitConfig;
use egcr_core::synthetic::{PlantedConfig, PlantedCorpus};

fn build(dir: &std::path::Path, seed: u64) -> (PlantedCorpus, Model) {
    let corpus = PlantedCorpus::generate(&PlantedConfig::default());
    let files = corpus.write(dir).unwrap();
    let src = IngestSources {
        triples: files.triples,
        entities: files.entities,
        concept_triples: Some(files.concept_triples),
        concept_entities: Some(files.concept_entities),
        alignment: Some(files.alignment),
        reviews: Some(files.reviews),
    };
    let model = ingest(&src, ModelConfig::new(DEFAULT_DIM, seed)).unwrap();
    (corpus, model)
}

#[test]
fn fitted_model_recovers_planted_partners() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, mut model) = build(dir.path(), 7);
    let before = evaluate(&model, &corpus.test, &[1, 10, 50], &FallbackOnlyClient).unwrap();
    let summary = model.fit(&corpus.train, &FitConfig::default()).unwrap().clone();
    assert_eq!(summary.examples, 200);
    assert!(summary.final_loss <= summary.initial_loss);
    let after = evaluate(&model, &corpus.test, &[1, 10, 50], &FallbackOnlyClient).unwrap();
    eprintln!("before {before:?}\nafter {after:?}\nbeta {}", model.params().beta);
    assert!(after.recall_at(1).unwrap() >= 0.9);
    let r = |k| after.recall_at(k).unwrap();
    assert!(r(1) <= r(10) && r(10) <= r(50));
    assert_eq!(after.n_eval_turns, 100);
}

#[test]
fn saved_model_reloads_and_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, mut model) = build(&dir.path().join("corpus"), 3);
    model.fit(&corpus.train, &FitConfig::default()).unwrap();
    let model_dir = dir.path().join("model");
    model.save(&model_dir).unwrap();
    let reloaded = Model::load(&model_dir).unwrap();
    assert_eq!(reloaded.params(), model.params());
    assert_eq!(reloaded.table(), model.table());
    let cfg = ExperimentConfig::new(dir.path().join("corpus/test.jsonl"), &model_dir);
    let a = run_experiment(&cfg).unwrap();
    let b = evaluate(&model, &corpus.test, &[1, 10, 50], &FallbackOnlyClient).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_json(), run_experiment(&cfg).unwrap().to_json());
}
