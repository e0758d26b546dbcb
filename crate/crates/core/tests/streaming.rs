use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidcompress::encoder::random_video;
use vidcompress::pipeline::{forward_clip, receptive_field, TextInput};
use vidcompress::{Branch, Graph, ModelConfig, Real, Tensor, VidCompress, VideoFeature};

fn config(branch: Branch, clip: usize, m: usize) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.compressor.dim = 8;
    cfg.compressor.clip_size = clip;
    cfg.compressor.memory_size = m;
    cfg.compressor.grid = 4;
    cfg.compressor.num_blocks = 2;
    cfg.text.n_q = 3;
    cfg.d_out = 6;
    cfg.branch = branch;
    cfg
}

fn video<T: Real>(frames: usize, seed: u64) -> VideoFeature<T> {
    random_video(frames, 16, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Memory tokens of every clip, streamed from a fresh cache.
fn clip_tokens(model: &VidCompress<f64>, v: &VideoFeature<f64>) -> Vec<Tensor<f64>> {
    let prompt = model.prompt("what moved").unwrap();
    let tc = model.config().compressor.clip_size;
    let mut session = model.session(prompt);
    (0..v.frames().div_ceil(tc))
        .map(|c| {
            let n = tc.min(v.frames() - c * tc);
            session.push_clip(&v.frames_slice(c * tc, n).unwrap()).unwrap().f_m.unwrap()
        })
        .collect()
}

fn edit_clip(v: &VideoFeature<f64>, clip: usize, tc: usize, rng: &mut impl Rng) -> VideoFeature<f64> {
    let mut t = v.tensor().clone();
    let per_frame = 16 * 8;
    let frame = clip * tc + rng.random_range(0..tc);
    let i = frame * per_frame + rng.random_range(0..per_frame);
    t.data_mut()[i] += 3.0;
    VideoFeature::new(t).unwrap()
}

#[test]
fn cache_length_follows_min_j_m() {
    for m in 0..4 {
        let model = VidCompress::<f64>::new(config(Branch::Mem, 2, m), 1).unwrap();
        let v = video::<f64>(14, 2);
        let mut session = model.session(model.prompt("x").unwrap());
        for j in 1..=7 {
            session.push_clip(&v.frames_slice((j - 1) * 2, 2).unwrap()).unwrap();
            let state = session.state();
            assert_eq!(state.clips_processed(), j);
            for b in 0..2 {
                assert_eq!(state.len(b), j.min(m));
                let expected: Vec<usize> = (j - j.min(m)..j).collect();
                assert_eq!(state.clip_indices(b), expected);
            }
        }
    }
}

#[test]
fn outputs_ignore_future_clips() {
    let model = VidCompress::<f64>::new(config(Branch::Mem, 2, 2), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..20 {
        let v = video::<f64>(12, trial);
        let base = clip_tokens(&model, &v);
        let t = rng.random_range(0..5);
        let edited = edit_clip(&v, rng.random_range(t + 1..6), 2, &mut rng);
        let after = clip_tokens(&model, &edited);
        for s in 0..=t {
            assert!(base[s].bit_eq(&after[s]), "trial {trial}: clip {s}");
        }
    }
}

#[test]
fn outputs_ignore_clips_outside_the_receptive_field() {
    let cfg = config(Branch::Mem, 2, 1);
    let model = VidCompress::<f64>::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..20 {
        let v = video::<f64>(16, 100 + trial);
        let base = clip_tokens(&model, &v);
        let t = rng.random_range(3..8);
        let first = *receptive_field(t, &cfg.compressor).start();
        assert_eq!(first, t - 2);
        let outside = rng.random_range(0..first);
        let after = clip_tokens(&model, &edit_clip(&v, outside, 2, &mut rng));
        assert!(base[t].bit_eq(&after[t]), "trial {trial}: edit in clip {outside}");
        let inside = edit_clip(&v, first, 2, &mut rng);
        assert!(base[t].max_abs_diff(&clip_tokens(&model, &inside)[t]) > 1e-9);
    }
}

fn oracle_deviation<T: Real>(branch: Branch, frames: usize, seed: u64) -> f64 {
    let m = (seed % 4) as usize;
    let model = VidCompress::<T>::new(config(branch, 2 + (seed % 2) as usize, m), seed).unwrap();
    let v = video::<T>(frames, seed);
    let prompt = model.prompt("did the ball fall").unwrap();
    let stream = model.run_video_streaming(&v, &prompt).unwrap();
    let oracle = model.windowed_oracle(&v, &prompt).unwrap();
    assert_eq!(stream.sequence.len(), oracle.sequence.len());
    stream.sequence.tokens.max_rel_diff(&oracle.sequence.tokens, 1e-6)
}

#[test]
fn streaming_matches_windowed_oracle() {
    for seed in 0..12 {
        let frames = 3 + (seed as usize * 5) % 14;
        for branch in [Branch::Mem, Branch::Full] {
            assert!(oracle_deviation::<f64>(branch, frames, seed) < 1e-10, "f64 seed {seed}");
            assert!(oracle_deviation::<f32>(branch, frames, seed) < 1e-5, "f32 seed {seed}");
        }
    }
}

/// Gradient of the second clip's memory tokens with respect to one weight,
/// with both clips in one graph or with the first clip run separately.
fn second_clip_grad(detached: bool, one_graph: bool) -> Tensor<f64> {
    let mut cfg = config(Branch::Mem, 2, 1);
    cfg.compressor.cache_detached = detached;
    let model = VidCompress::<f64>::new(cfg.clone(), 8).unwrap();
    let v = video::<f64>(4, 9);
    let clips = [v.frames_slice(0, 2).unwrap(), v.frames_slice(2, 2).unwrap()];
    let mut state = model.fresh_state();
    let mut g = Graph::new();
    if !one_graph {
        let mut g0 = Graph::new();
        let p0 = model.bind(&mut g0, |_| true);
        forward_clip(&mut g0, &cfg, &p0, &clips[0], TextInput::Queries(&[]), &mut state).unwrap();
    }
    let p = model.bind(&mut g, |_| true);
    if one_graph {
        forward_clip(&mut g, &cfg, &p, &clips[0], TextInput::Queries(&[]), &mut state).unwrap();
    }
    let out = forward_clip(&mut g, &cfg, &p, &clips[1], TextInput::Queries(&[]), &mut state).unwrap();
    let loss = g.sum(out.f_m.unwrap()).unwrap();
    let grads = g.backward(loss).unwrap();
    grads.get(p.mem.blocks[0].w_k).unwrap().clone()
}

#[test]
fn detached_cache_blocks_cross_clip_gradients() {
    let joint = second_clip_grad(true, true);
    let split = second_clip_grad(true, false);
    assert!(joint.bit_eq(&split));
}

#[test]
fn linked_cache_carries_cross_clip_gradients() {
    let joint = second_clip_grad(false, true);
    let split = second_clip_grad(false, false);
    assert!(joint.max_abs_diff(&split) > 1e-8);
}
