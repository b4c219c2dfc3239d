//! Randomized invariants, 1000 cases each.

#[allow(dead_code)]
mod invariants;

#[test]
fn weights_stay_in_unit_interval() {
    invariants::weights_stay_in_unit_interval().unwrap();
}

#[test]
fn weights_grow_with_agreement() {
    invariants::weights_grow_with_agreement().unwrap();
}

#[test]
fn superpixels_partition_the_image() {
    invariants::superpixels_partition_the_image().unwrap();
}

#[test]
fn dice_is_a_function_of_jaccard() {
    invariants::dice_is_a_function_of_jaccard().unwrap();
}

#[test]
fn auc_ignores_monotone_rescaling() {
    invariants::auc_ignores_monotone_rescaling().unwrap();
}

#[test]
fn folds_never_share_volumes() {
    invariants::folds_never_share_volumes().unwrap();
}

#[test]
fn cascade_never_adds_false_negatives() {
    invariants::cascade_never_adds_false_negatives().unwrap();
}
