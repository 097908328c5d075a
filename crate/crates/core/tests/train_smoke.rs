//! End-to-end smoke: train a small embedding network on synthetic retrieval
//! data and check the loss drops and recall becomes nontrivial.

use twobranch::branches::{EmbeddingModel, Model, NormHyper};
use twobranch::config::Config;
use twobranch::data::{generate_synthetic, SyntheticSpec};
use twobranch::dataset::TaskKind;
use twobranch::eval::{cross_modal_retrieval, Direction, Scorer};
use twobranch::optim::train;

fn small_config() -> Config {
    let mut c = Config::retrieval();
    c.model.image_input_dim = 32;
    c.model.text_input_dim = 24;
    c.model.hidden_dim = 32;
    c.model.embed_dim = 16;
    c.model.head_dims = vec![16, 8];
    c.train.learning_rate = 0.005;
    c.train.epochs = 6;
    c.train.neighborhood_activation_epoch = None;
    c.train.dropout = 0.0;
    c.sampling.shard_size = 50;
    c.sampling.k_cap = 10;
    c
}

#[test]
fn embedding_training_reduces_loss_and_learns_retrieval() {
    let spec = SyntheticSpec {
        items: 120,
        latent_dim: 8,
        image_feature_dim: 32,
        text_feature_dim: 24,
        texts_per_item: 3,
        proposals_per_item: 8,
        noise_scale: 0.05,
        seed: 1234,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let cfg = small_config();
    let mut model = Model::Embedding(
        EmbeddingModel::init(cfg.embedding_dims(), cfg.model.nonlinear, 99).unwrap(),
    );
    let opts = cfg.train_options(42);
    let reports = train(&mut model, &ds, &opts, TaskKind::Retrieval).unwrap();
    assert_eq!(reports.len(), 6);
    let first = reports.first().unwrap().loss.total;
    let last = reports.last().unwrap().loss.total;
    println!("loss first epoch {first:.3} -> last epoch {last:.3}");
    assert!(last < first, "loss should drop: {first} -> {last}");

    let emb = model.as_embedding().unwrap();
    let scorer = Scorer::Embedding(emb);
    let report = cross_modal_retrieval(
        &scorer,
        &ds,
        Direction::ImageToSentence,
        &[1, 5, 10],
        &NormHyper::default(),
    )
    .unwrap();
    println!("{}", report.table("train-set image-to-sentence"));
    assert!(report.recall[&1] > 0.5, "train-set R@1 {}", report.recall[&1]);
}
