use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DICE_SMOOTH: f64 = 1e-5;

fn one_hot<T: Element>(target: &[u8], classes: usize) -> Tensor<T> {
    let n = target.len();
    let mut data = vec![T::zero(); classes * n];
    for (p, &c) in target.iter().enumerate() {
        data[c as usize * n + p] = T::one();
    }
    Tensor::new(&[classes, n], data).expect("one-hot values are finite")
}

/// `w_ce * CE + w_dice * (1 - mean_k softDice_k)` for `K x H x W` logits and
/// row-major class ids.
pub fn combined_loss<T: Element>(logits: &Tensor<T>, target: &[u8], w_ce: f64, w_dice: f64) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[1] * shape[2] != target.len() {
        return Err(Error::shape(
            "combined_loss",
            format!("logits {shape:?} vs {} target pixels", target.len()),
        ));
    }
    let (k, n) = (shape[0], target.len());
    if let Some(&bad) = target.iter().find(|&&c| c as usize >= k) {
        return Err(Error::Invalid(format!("class id {bad} not below K = {k}")));
    }
    let flat = logits.reshape(&[k, n])?;
    let hot = one_hot::<T>(target, k);

    let ce = flat.log_softmax(0)?.mul(&hot)?.sum()?.scale(-1.0 / n as f64)?;

    let probs = flat.softmax(0)?;
    let inter = probs.mul(&hot)?.sum_axis(1)?;
    let counts: Vec<f64> = (0..k).map(|c| target.iter().filter(|&&t| t as usize == c).count() as f64).collect();
    let denom = probs.sum_axis(1)?.add(&Tensor::from_f64(&[k], &counts)?)?.add_scalar(DICE_SMOOTH)?;
    let dice = inter.scale(2.0)?.add_scalar(DICE_SMOOTH)?.div(&denom)?;
    let dice_loss = dice.mean()?.neg()?.add_scalar(1.0)?;

    ce.scale(w_ce)?.add(&dice_loss.scale(w_dice)?)
}

/// Pixel-mean softmax cross-entropy alone.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, target: &[u8]) -> Result<Tensor<T>> {
    combined_loss(logits, target, 1.0, 0.0)
}
