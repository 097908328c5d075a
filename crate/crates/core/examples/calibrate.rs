// Scratch calibration harness (deleted before finalizing).
use twobranch::branches::{EmbeddingModel, Model, NormHyper, SimilarityModel};
use twobranch::config::Config;
use twobranch::data::{generate_split_datasets, SplitCounts, SyntheticSpec};
use twobranch::dataset::TaskKind;
use twobranch::eval::{cross_modal_retrieval, localization_recall, sentence_to_sentence, Direction, Scorer};
use twobranch::optim::train;

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn base_cfg() -> Config {
    let mut c = Config::retrieval();
    c.model.image_input_dim = 64;
    c.model.text_input_dim = 48;
    c.model.hidden_dim = envf("HIDDEN", 128.0) as usize;
    c.model.embed_dim = envf("EMBED", 64.0) as usize;
    c.model.head_dims = vec![64, 32];
    c.loss.margin = envf("MARGIN", 0.05);
    c.train.learning_rate = envf("LR", 0.003);
    c.train.epochs = envf("EPOCHS", 20.0) as usize;
    c.train.neighborhood_activation_epoch = None;
    c.loss.lambda_xx = 0.0;
    c.loss.lambda_yy = 0.0;
    c.train.dropout = 0.0;
    c.sampling.shard_size = envf("SHARD", 125.0) as usize;
    c.sampling.k_cap = envf("KCAP", 10.0) as usize;
    c
}

fn main() {
    let part = std::env::args().nth(1).unwrap_or_else(|| "ret".into());
    let t0 = std::time::Instant::now();
    let hyper = NormHyper::default();
    match part.as_str() {
        "ret" => {
            let noise = envf("NOISE", 0.05);
            let seed = envf("SEED", 7.0) as u64;
            let spec = SyntheticSpec { noise_scale: noise, seed, ..SyntheticSpec::default() };
            let (train_ds, _val, test_ds) = generate_split_datasets(&spec, &SplitCounts::default()).unwrap();
            for lambda_y2x in [1.5, 0.0] {
                let mut cfg = base_cfg();
                cfg.loss.lambda_y2x = lambda_y2x;
                let mut model = Model::Embedding(EmbeddingModel::init(cfg.embedding_dims(), true, 11).unwrap());
                let opts = cfg.train_options(97);
                let reps = train(&mut model, &train_ds, &opts, TaskKind::Retrieval).unwrap();
                let emb = model.as_embedding().unwrap();
                print!("l_y2x={lambda_y2x}: loss {:.0}->{:.2} |", reps[0].loss.total, reps.last().unwrap().loss.total);
                for d in [Direction::ImageToSentence, Direction::SentenceToImage] {
                    let r = cross_modal_retrieval(&Scorer::Embedding(emb), &test_ds, d, &[1, 5], &hyper).unwrap();
                    print!(" {d} R@1 {:.4} |", r.recall[&1]);
                }
                println!(" [{:?}]", t0.elapsed());
            }
        }
        "sim10" => {
            // Criterion 10: similarity vs embedding on retrieval.
            let noise = envf("NOISE", 0.3);
            let items = envf("ITEMS", 200.0) as usize;
            let seed = envf("SEED", 7.0) as u64;
            let spec = SyntheticSpec { noise_scale: noise, seed, ..SyntheticSpec::default() };
            let counts = SplitCounts { train: items, val: 20, test: 60 };
            let (train_ds, _v, test_ds) = generate_split_datasets(&spec, &counts).unwrap();
            let mut cfg = base_cfg();
            cfg.train.epochs = envf("EPOCHS", 10.0) as usize;
            let mut emb = Model::Embedding(EmbeddingModel::init(cfg.embedding_dims(), true, 11).unwrap());
            train(&mut emb, &train_ds, &cfg.train_options(97), TaskKind::Retrieval).unwrap();
            let mut sim = Model::Similarity(SimilarityModel::init(cfg.similarity_dims(), true, 11).unwrap());
            train(&mut sim, &train_ds, &cfg.train_options(97), TaskKind::Retrieval).unwrap();
            for d in [Direction::ImageToSentence, Direction::SentenceToImage] {
                let re = cross_modal_retrieval(&Scorer::Embedding(emb.as_embedding().unwrap()), &test_ds, d, &[1], &hyper).unwrap();
                let rs = cross_modal_retrieval(&Scorer::Similarity(sim.as_similarity().unwrap()), &test_ds, d, &[1], &hyper).unwrap();
                println!("{d}: embedding R@1 {:.4} similarity R@1 {:.4}", re.recall[&1], rs.recall[&1]);
            }
            println!("[{:?}]", t0.elapsed());
        }
        "loc" => {
            let noise = envf("NOISE", 0.05);
            let seed = envf("SEED", 107.0) as u64;
            let corruption = envf("CORR", 1.0);
            let spec = SyntheticSpec { noise_scale: noise, corruption_scale: corruption, seed, ..SyntheticSpec::default() };
            let (ltrain, _lval, ltest) = generate_split_datasets(&spec, &SplitCounts::default()).unwrap();
            let mut lcfg = base_cfg();
            lcfg.train.learning_rate = envf("LR", 0.003);
            lcfg.train.epochs = envf("EPOCHS", 12.0) as usize;
            lcfg.sampling.shard_size = 100;
            lcfg.sampling.k_cap = 30;
            for augment in [true, false] {
                let mut c = lcfg.clone();
                c.sampling.augment = augment;
                let mut m = Model::Similarity(SimilarityModel::init(c.similarity_dims(), true, 21).unwrap());
                let reps = train(&mut m, &ltrain, &c.train_options(55), TaskKind::Localization).unwrap();
                let s = m.as_similarity().unwrap();
                let r = localization_recall(&Scorer::Similarity(s), &ltest, &[1, 5], 0.5, 200, &hyper).unwrap();
                println!("loc sim augment={augment}: R@1 {:.4} R@5 {:.4} (loss {:.0}->{:.1}) ub {:.3} [{:?}]",
                    r.recall[&1], r.recall[&5], reps[0].loss.total, reps.last().unwrap().loss.total, r.upper_bound, t0.elapsed());
            }
        }
        "nb7" => {
            // Criterion 7: lambda_yy effect on sentence-to-sentence.
            let noise = envf("NOISE", 0.4);
            let items = envf("ITEMS", 250.0) as usize;
            for seed in [3u64, 4, 5] {
                let spec = SyntheticSpec { noise_scale: noise, seed, ..SyntheticSpec::default() };
                let counts = SplitCounts { train: items, val: 10, test: 60 };
                let (train_ds, _v, test_ds) = generate_split_datasets(&spec, &counts).unwrap();
                let mut results = Vec::new();
                for lambda_yy in [0.0, 0.05] {
                    let mut cfg = base_cfg();
                    cfg.train.epochs = envf("EPOCHS", 12.0) as usize;
                    cfg.loss.lambda_yy = lambda_yy;
                    cfg.train.neighborhood_activation_epoch = if lambda_yy > 0.0 { Some(envf("ACT", 8.0) as usize) } else { None };
                    let mut model = Model::Embedding(EmbeddingModel::init(cfg.embedding_dims(), true, 11).unwrap());
                    train(&mut model, &train_ds, &cfg.train_options(1000 + seed), TaskKind::Retrieval).unwrap();
                    let emb = model.as_embedding().unwrap();
                    let s2s = sentence_to_sentence(emb, &test_ds, &[1], &hyper).unwrap();
                    let i2s = cross_modal_retrieval(&Scorer::Embedding(emb), &test_ds, Direction::ImageToSentence, &[1], &hyper).unwrap();
                    results.push((lambda_yy, s2s.recall[&1], i2s.recall[&1]));
                }
                println!("seed {seed}: yy=0 s2s {:.4} (i2s {:.4}) | yy=0.05 s2s {:.4} (i2s {:.4}) | echo {}",
                    results[0].1, results[0].2, results[1].1, results[1].2,
                    if results[1].1 >= results[0].1 { "YES" } else { "no" });
            }
            println!("[{:?}]", t0.elapsed());
        }

        "sim10amb" => {
            // Criterion 10 with ambiguity: twin items share a latent, so a
            // random negative sentence is often semantically compatible.
            let noise = envf("NOISE", 0.1);
            let items = envf("ITEMS", 150.0) as usize;
            let seed = envf("SEED", 7.0) as u64;
            let spec = SyntheticSpec { noise_scale: noise, seed, ..SyntheticSpec::default() };
            let counts = SplitCounts { train: items, val: 10, test: 60 };
            let (base, _v, test_ds) = generate_split_datasets(&spec, &counts).unwrap();
            // Twin every training item at the feature level.
            use rand::Rng;
            use rand_chacha::rand_core::SeedableRng;
            let mut jrng = rand_chacha::ChaCha8Rng::seed_from_u64(999);
            let mut images = base.images().to_vec();
            let mut sentences = base.sentences().to_vec();
            let mut phrases = Vec::new();
            let jitter = |v: &[f64], rng: &mut rand_chacha::ChaCha8Rng, s: f64| -> Vec<f64> {
                v.iter().map(|x| x + s * rng.gen_range(-1.0..1.0)).collect()
            };
            let n_img = images.len();
            for i in 0..n_img {
                let img = images[i].clone();
                let twin_id = img.id + 100000;
                let mut twin_sents = Vec::new();
                for sid in &img.sentences {
                    let sx = base.sentence_idx(*sid).unwrap();
                    let s0 = &base.sentences()[sx];
                    let tid = s0.id + 100000;
                    twin_sents.push(tid);
                    sentences.push(twobranch::dataset::SentenceEntry {
                        id: tid,
                        image: twin_id,
                        feature: jitter(&s0.feature, &mut jrng, noise),
                    });
                }
                images.push(twobranch::dataset::ImageEntry {
                    id: twin_id,
                    global_feature: jitter(&img.global_feature, &mut jrng, noise),
                    proposals: Vec::new(),
                    sentences: twin_sents,
                });
            }
            for img in &mut images { img.proposals.clear(); }
            phrases.clear();
            let train_ds = twobranch::dataset::GroundedDataset::build(images, phrases, sentences).unwrap();
            let mut cfg = base_cfg();
            cfg.train.epochs = envf("EPOCHS", 10.0) as usize;
            let mut emb = Model::Embedding(EmbeddingModel::init(cfg.embedding_dims(), true, 11).unwrap());
            train(&mut emb, &train_ds, &cfg.train_options(97), TaskKind::Retrieval).unwrap();
            let mut sim = Model::Similarity(SimilarityModel::init(cfg.similarity_dims(), true, 11).unwrap());
            train(&mut sim, &train_ds, &cfg.train_options(97), TaskKind::Retrieval).unwrap();
            for d in [Direction::ImageToSentence, Direction::SentenceToImage] {
                let re = cross_modal_retrieval(&Scorer::Embedding(emb.as_embedding().unwrap()), &test_ds, d, &[1], &hyper).unwrap();
                let rs = cross_modal_retrieval(&Scorer::Similarity(sim.as_similarity().unwrap()), &test_ds, d, &[1], &hyper).unwrap();
                println!("{d}: embedding R@1 {:.4} similarity R@1 {:.4}", re.recall[&1], rs.recall[&1]);
            }
            println!("[{:?}]", t0.elapsed());
        }
        _ => eprintln!("unknown part"),
    }
}
