use vidcompress::train::Experiment;
use vidcompress::{Group, RunConfig, Stage, TaskKind};

fn tiny(stage: Stage, task: TaskKind, steps: usize) -> RunConfig {
    RunConfig {
        d: 8,
        n_q: 2,
        d_out: 4,
        grid: 4,
        num_blocks: 2,
        clip_size: 2,
        memory_size: 1,
        frames: 6,
        gap: 2,
        task,
        learned_fusion: true,
        train_examples: 32,
        test_examples: 16,
        steps,
        batch_size: 4,
        stage,
        ..RunConfig::default()
    }
}

fn changed_groups(stage: Stage) -> Vec<Group> {
    let mut exp = Experiment::<f32>::new(&tiny(stage, TaskKind::Presence, 10)).unwrap();
    let before = exp.model.clone();
    exp.run().unwrap();
    let mut changed: Vec<Group> = Vec::new();
    for ((name, b), (_, a)) in before.params().named("").into_iter().zip(exp.model.params().named("")) {
        let group = Group::of(&name).unwrap();
        if !b.bit_eq(a) && !changed.contains(&group) {
            changed.push(group);
        }
    }
    changed.sort_by_key(|g| *g as usize);
    changed
}

#[test]
fn align_updates_memory_fusion_and_projectors() {
    assert_eq!(changed_groups(Stage::Align), vec![Group::Mem, Group::Fusion, Group::Adapter]);
}

#[test]
fn instruct_updates_every_group() {
    assert_eq!(changed_groups(Stage::Instruct), Group::ALL.to_vec());
}

#[test]
fn presence_is_learned() {
    let mut cfg = tiny(Stage::Instruct, TaskKind::Presence, 150);
    cfg.train_examples = 400;
    cfg.test_examples = 100;
    cfg.lr = 0.2;
    let report = Experiment::<f32>::new(&cfg).unwrap().run().unwrap();
    assert!(report.test_accuracy > 0.95, "{}", report.test_accuracy);
}
