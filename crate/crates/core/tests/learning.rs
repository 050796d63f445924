mod common;

use stacktrans::pipeline::{evaluate_records, prepare_records, train_on_records};
use stacktrans::retrieval::DEFAULT_CUTOFF;
use stacktrans::ruleset::RuleSet;
use stacktrans::trainer::{TrainConfig, WordMapping};

#[test]
fn memorizes_twenty_pairs() {
    let rules = RuleSet::shipped();
    let (records, _) = prepare_records(&common::toy_corpus(20, 21), &rules, None).unwrap();
    let config = TrainConfig {
        embed_dim: 32,
        hidden_dim: 32,
        batch_size: 8,
        learning_rate: 3e-3,
        dropout: 0.0,
        epochs: 200,
        ..TrainConfig::default()
    };
    let trained = train_on_records(&config, &records, None, &rules, |_| {}).unwrap();
    // 5% of 20 leaves one pair, too few for a validation split
    assert_eq!(trained.best_epoch, 200);
    assert!(trained.log.iter().all(|e| e.validation_loss.is_none()));
    let outcome = evaluate_records(
        &trained.checkpoint.state.model,
        &trained.vocabs,
        &records,
        DEFAULT_CUTOFF,
    )
    .unwrap();
    assert!(outcome.mrr >= 0.9, "MRR {}", outcome.mrr);
}

#[test]
fn training_loss_decreases_with_either_mapping() {
    let rules = RuleSet::shipped();
    let (records, _) = prepare_records(&common::toy_corpus(40, 4), &rules, None).unwrap();
    for mapping in [WordMapping::Shared, WordMapping::Separate] {
        let config = TrainConfig {
            embed_dim: 16,
            hidden_dim: 16,
            learning_rate: 3e-3,
            epochs: 15,
            word_mapping: mapping,
            ..TrainConfig::default()
        };
        let trained = train_on_records(&config, &records, None, &rules, |_| {}).unwrap();
        let first = trained.log.first().unwrap().train_loss;
        let last = trained.log.last().unwrap().train_loss;
        assert!(last < first, "{mapping:?}: {first} -> {last}");
        assert_eq!(trained.vocabs.mapping(), mapping);
    }
}
