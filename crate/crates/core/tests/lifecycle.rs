mod common;

use common::lifecycle::{self, LOp, St, OPS, STATES};
use flowpipe::PipelineError;
use proptest::prelude::*;

#[test]
fn every_state_and_operation_pair() {
    let failures: Vec<String> = STATES
        .iter()
        .flat_map(|&s| OPS.iter().map(move |&op| (s, op)))
        .filter_map(|(s, op)| lifecycle::check_pair(s, op, 20).err())
        .collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_call_sequences_follow_the_table(ops in prop::collection::vec(prop::sample::select(OPS.to_vec()), 0..14)) {
        let mut p = lifecycle::base_pipeline();
        let mut fresh = 0;
        let mut model = St::Created;
        for op in ops {
            let outcome = lifecycle::apply(&mut p, op, 30, &mut fresh);
            match (lifecycle::table(model, op), outcome) {
                (Some(next), Ok(())) => model = next,
                (None, Err(PipelineError::IllegalState { .. })) => {}
                // Validation may legitimately fail on a mutated graph.
                (Some(_), Err(PipelineError::Invalid(_))) if op == LOp::Validate => {}
                (want, got) => prop_assert!(false, "{:?} x {:?}: table {:?}, got {:?}", model, op, want, got),
            }
            prop_assert_eq!(lifecycle::observed(&p), model);
        }
        if model == St::Running {
            p.wait().unwrap();
        }
    }
}
