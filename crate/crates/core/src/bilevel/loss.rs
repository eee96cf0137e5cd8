use crate::error::{Error, Result};
use crate::models::ModelState;
use crate::numerics::psnr;
use crate::operators::{Split, Task};

/// Peak value used for PSNR; signals live in `[0, 1]`.
pub const PSNR_PEAK: f64 = 1.0;

/// Supervised loss and mean PSNR of a model on one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub psnr: f64,
}

fn check_split(task: &Task, split: Split) -> Result<()> {
    if task.split(split).is_empty() {
        return Err(Error::invalid(format!(
            "task {} has an empty {split:?} split",
            task.name
        )));
    }
    Ok(())
}

/// `sum 0.5 ||f(y) - x||^2` over a split, in sample order.
pub fn sup_loss(model: &ModelState, task: &Task, split: Split) -> Result<f64> {
    check_split(task, split)?;
    let mut total = 0.0;
    for s in task.split(split) {
        let f = model.reconstruct(&s.y, &task.operator)?;
        total += 0.5
            * f.data()
                .iter()
                .zip(s.x.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
    }
    Ok(total)
}

/// [`sup_loss`] together with the mean PSNR against the targets.
pub fn evaluate(model: &ModelState, task: &Task, split: Split) -> Result<Evaluation> {
    check_split(task, split)?;
    let samples = task.split(split);
    let mut loss = 0.0;
    let mut total_psnr = 0.0;
    for s in samples {
        let f = model.reconstruct(&s.y, &task.operator)?;
        loss += 0.5
            * f.data()
                .iter()
                .zip(s.x.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        total_psnr += psnr(&f, &s.x, PSNR_PEAK)?;
    }
    Ok(Evaluation {
        loss,
        psnr: total_psnr / samples.len() as f64,
    })
}

/// `sum 0.5 ||A f(y) - y||^2` over a split, in sample order.
pub fn unsup_loss(model: &ModelState, task: &Task, split: Split) -> Result<f64> {
    check_split(task, split)?;
    let mut total = 0.0;
    for s in task.split(split) {
        let f = model.reconstruct(&s.y, &task.operator)?;
        let af = task.operator.apply_raw(f.data());
        total += 0.5 * af.iter().zip(s.y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total)
}
