use handtask::dtree::{split_holdout, DecisionTree, TreeParams};
use handtask::error::SimError;
use handtask::labeler::reference_centroids;
use handtask::simgen::{
    durations_by_task, gen_cycles, gen_mixture, reference_profiles, write_truth, CyclePlan, REFERENCE_CENTROIDS,
    REFERENCE_DURATIONS,
};
use handtask::types::{ChannelSchema, Dataset, TaskLabel};

#[test]
fn truth_durations_average_near_reference() {
    let sim = gen_cycles(&CyclePlan::default(), &reference_profiles(), &ChannelSchema::reference(), 50, 7).unwrap();
    for (label, ds) in TaskLabel::ALL.iter().zip(durations_by_task(&sim.truth)) {
        assert_eq!(ds.len(), 50);
        let mean = ds.iter().sum::<f64>() / ds.len() as f64;
        let want = REFERENCE_DURATIONS[label.index()];
        assert!((mean - want).abs() / want < 0.02, "{label}: {mean} vs {want}");
    }
}

#[test]
fn recovered_centroids_match_reference() {
    let sim = gen_cycles(&CyclePlan::default(), &reference_profiles(), &ChannelSchema::reference(), 50, 7).unwrap();
    let refs = reference_centroids(&sim.frames).unwrap();
    for label in TaskLabel::ALL {
        for (got, want) in refs.get(label).iter().zip(REFERENCE_CENTROIDS[label.index()]) {
            assert!((got - want).abs() < 0.05, "{label}: {got} vs {want}");
        }
    }
}

#[test]
fn zero_cycles_is_an_error() {
    let err = gen_cycles(&CyclePlan::default(), &reference_profiles(), &ChannelSchema::reference(), 0, 7).unwrap_err();
    assert_eq!(err, SimError::NoCycles);
}

#[test]
fn same_seed_same_files() {
    let render = |seed| {
        let sim = gen_cycles(&CyclePlan::default(), &reference_profiles(), &ChannelSchema::reference(), 5, seed).unwrap();
        let mut buf = Vec::new();
        write_truth(&mut buf, &sim.truth).unwrap();
        (sim.frames, buf)
    };
    assert_eq!(render(7), render(7));
    assert_ne!(render(7).1, render(8).1);
}

#[test]
fn mixture_holdout_accuracy() {
    let schema = ChannelSchema::reference();
    let samples = gen_mixture(&reference_profiles(), &schema, 5000, 7).unwrap();
    let ds = Dataset::from_samples(schema, samples);
    let (train, test) = split_holdout(&ds, 0.7, 7).unwrap();
    let tree = DecisionTree::train(&train, TreeParams::default()).unwrap();
    let acc = tree.evaluate(test.samples()).unwrap().accuracy;
    assert!(acc >= 0.90, "{acc}");
}
