//! Confusion-matrix scoring of a toy prediction into seen, unseen and
//! harmonic mIoU.

use std::collections::BTreeSet;

use sign::eval::{gzsl_report, per_class_iou, ConfusionMatrix};
use sign::LabelMap;

fn main() -> sign::Result<()> {
    let gt = LabelMap::new(2, 6, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2])?;
    let pred = LabelMap::new(2, 6, vec![0, 0, 1, 0, 2, 1, 0, 1, 1, 1, 2, 0])?;
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &gt)?;
    for (c, iou) in per_class_iou(&cm) {
        println!("class {c}: IoU {:.3}", iou);
    }
    let seen: BTreeSet<u16> = [0, 1].into();
    let unseen: BTreeSet<u16> = [2].into();
    println!("seen / unseen / harmonic: {}", gzsl_report(&cm, &seen, &unseen)?.row());
    Ok(())
}
