use flowpose::heatmap::{decode_argmax, synthesize_target, DEFAULT_SIGMA};
use flowpose::network::checkpoint::Checkpoint;
use flowpose::network::Network;
use flowpose::pose::Skeleton;
use flowpose::synth::{generate_sequence, Dataset, PuppetSpec};
use flowpose::temporal::{pool_parametric, pool_sum, warp_window, PoolingWeights};
use flowpose::train::{predict_dataset, train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SCALE: f64 = 4.0;

/// Ground-truth heatmaps warped with exact flow land on the centre frame's
/// joints, so pooling them decodes to the centre pose.
#[test]
fn exact_flow_aligns_label_heatmaps() {
    let seq = generate_sequence(&PuppetSpec::upper_body(), 30, 4).unwrap();
    let maps: Vec<_> = seq
        .poses
        .iter()
        .map(|p| synthesize_target(p, DEFAULT_SIGMA, (16, 16), SCALE).unwrap())
        .collect();
    let n = 2;
    let (mut hit, mut total) = (0, 0);
    for t in n..seq.len() - n {
        let win = warp_window(&maps, t, n, |a, b| seq.true_flow(a, b)?.downsample(SCALE as usize)).unwrap();
        let pose = decode_argmax(&pool_sum(&win).unwrap(), SCALE);
        for (p, g) in pose.joints.iter().zip(&seq.poses[t].joints) {
            total += 1;
            hit += usize::from(p.distance(g) <= SCALE * 1.5);
        }
    }
    assert!(hit as f64 >= 0.95 * total as f64, "{hit}/{total}");
}

#[test]
fn trained_checkpoint_round_trips_through_pooling() {
    let data = Dataset::from_sequence(&generate_sequence(&PuppetSpec::upper_body(), 40, 2).unwrap());
    let cfg = TrainConfig {
        network: "toy".into(),
        iters: 6,
        batch: 2,
        val_every: 3,
        ..TrainConfig::default()
    };
    let net = Network::build(cfg.network_config(64, 7).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let out = train(net, &data.slice(0..32), &data.slice(32..40), &cfg, &Skeleton::upper_body()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.fpnet");
    Checkpoint::new(out.best.clone()).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().network;

    let frames = &data.frames[30..36];
    let maps: Vec<_> = frames.iter().map(|f| loaded.heatmaps(f).unwrap()).collect();
    for (f, m) in frames.iter().zip(&maps) {
        assert!(out.best.heatmaps(f).unwrap().tensor().bit_eq(m.tensor()));
    }
    let single = predict_dataset(&loaded, frames).unwrap();
    let center = PoolingWeights::center(2, 7);
    for t in 0..maps.len() {
        let win = warp_window(&maps, t, 2, |a, b| {
            Ok(flowpose::flow::FlowField::zeros(16, 16).between(a, b))
        })
        .unwrap();
        let pooled = pool_parametric(&win, &center).unwrap();
        assert!(pooled.tensor().bit_eq(maps[t].tensor()));
        assert_eq!(decode_argmax(&pooled, SCALE), single[t]);
    }
}
