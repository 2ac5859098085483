//! Specificity, sensitivity and ICBHI score from a confusion matrix.

use multibreath::data::{CycleClass, LabelVector};
use multibreath::metrics::{confusion, icbhi_metrics, score_from};

fn main() -> multibreath::Result<()> {
    for (sp, se) in [(0.7809, 0.42), (0.73, 0.4537)] {
        println!("Sp {sp:.4}  Se {se:.4}  ->  Score {:.4}", score_from(sp, se));
    }

    let truth: Vec<LabelVector> = [0, 0, 0, 1, 1, 2, 3, 3]
        .iter()
        .map(|&c| LabelVector::from_class(CycleClass::from_index(c).unwrap()))
        .collect();
    let predicted: Vec<LabelVector> = [0, 0, 1, 1, 3, 2, 3, 0]
        .iter()
        .map(|&c| LabelVector::from_class(CycleClass::from_index(c).unwrap()))
        .collect();
    let report = icbhi_metrics(&confusion(&truth, &predicted)?)?;
    print!("{}", report.to_document());

    let all_normal = vec![LabelVector::default(); truth.len()];
    let baseline = icbhi_metrics(&confusion(&truth, &all_normal)?)?;
    println!("all-Normal baseline: Sp {:?} Se {:?} Score {:?}", baseline.specificity, baseline.sensitivity, baseline.score);
    Ok(())
}
