mod common;

use std::sync::Arc;

use common::{prepared_synth, scratch};
use npyz::WriterBuilder;
use rand::Rng;
use ssip_core::dataset::split_by_listener;
use ssip_core::fem::{FeatureStoreBackbone, ToyBackbone, ToyBackboneConfig};
use ssip_core::signal::{write_waveform, SampleEncoding};
use ssip_core::synth::SynthConfig;
use ssip_core::training::{train, Provenance};
use ssip_core::{
    BackboneExtractor, ConditionInput, FeatureCache, FeatureSource, FemConfig, ModelMode, Sample, Score, SsipModel,
    TrainConfig, Waveform,
};

fn write_npy(path: &std::path::Path, shape: [u64; 3], seed: u64) {
    let mut rng = common::seeded(seed);
    let n = shape.iter().product::<u64>() as usize;
    let mut buf = Vec::new();
    {
        let mut w = npyz::WriteOptions::<f32>::new()
            .default_dtype()
            .shape(&shape)
            .writer(&mut buf)
            .begin_nd()
            .unwrap();
        for _ in 0..n {
            w.push(&rng.gen_range(-1.0f32..1.0)).unwrap();
        }
        w.finish().unwrap();
    }
    std::fs::write(path, buf).unwrap();
}

#[test]
fn default_configuration_embeds_foundation_features() {
    let dir = scratch("fem_foundation");
    let cfg = FemConfig::default();
    assert_eq!((cfg.backbone_layers, cfg.backbone_dim, cfg.embed_dim), (32, 1280, 384));

    let tone = Waveform::new((0..1600).map(|i| 0.1 * (i as f64 * 0.07).sin()).collect(), 16000).unwrap();
    let mut samples = Vec::new();
    for (i, frames) in [3u64, 7].into_iter().enumerate() {
        let id = format!("utt{i}");
        write_npy(&dir.join(format!("{id}.npy")), [32, frames, 1280], i as u64);
        write_waveform(dir.join(format!("{id}.wav")), &tone, SampleEncoding::Int16).unwrap();
        let mut s = Sample::new(&id, "L1", Score::new(40.0).unwrap());
        s.audio_path = dir.join(format!("{id}.wav"));
        samples.push(s);
    }
    let store = FeatureStoreBackbone::new(&dir, 32, 1280).unwrap();
    let cache = FeatureCache::new(Arc::new(store));
    let model = SsipModel::new(cfg, ModelMode::Ssip, 0).unwrap();
    for s in &samples {
        let bo = cache.features(s).unwrap();
        assert_eq!((bo.n_layers(), bo.dim()), (32, 1280));
        let e = model
            .fem
            .embed_sample(&model.params, &cache, s, &ConditionInput::from_score(s.score))
            .unwrap();
        assert_eq!(e.vector.len(), 384);
        assert!(e.vector.iter().all(|x| x.is_finite()));
    }

    let wrong = FeatureStoreBackbone::new(&dir, 24, 1280).unwrap();
    let cache = FeatureCache::new(Arc::new(wrong));
    assert!(cache.features(&samples[0]).is_err());
}

#[test]
fn training_leaves_the_backbone_frozen() {
    let prepared = prepared_synth("fem_frozen", &SynthConfig {
        listeners: 5,
        samples_per_listener: 12,
        ..Default::default()
    });
    let splits = split_by_listener(&prepared.samples, &prepared.folds[0]).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 8,
        n_support: 4,
        ..TrainConfig::desk_scale()
    };
    let backbone: Arc<dyn BackboneExtractor> = cfg.backbone.build().unwrap();
    let before = backbone.checksum();
    let cache = FeatureCache::new(Arc::clone(&backbone));
    let probe = &splits.test[0];
    let features_before = (*cache.features(probe).unwrap()).clone();

    train(&cfg, &splits.train, &splits.val, &cache, Provenance::default(), |_| {}).unwrap();
    assert_eq!(backbone.checksum(), before);

    let fresh = FeatureCache::new(Arc::clone(&backbone));
    assert_eq!(*fresh.features(probe).unwrap(), features_before);
}

#[test]
fn toy_backbone_is_reproducible_from_its_seed() {
    let a = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
    let b = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
    let c = ToyBackbone::new(ToyBackboneConfig {
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
}
