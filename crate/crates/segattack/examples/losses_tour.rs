//! Walk through the loss family on small tensors: the true-class
//! probability transform, BCE, Focal, Dice, and the hybrid training loss.

use segattack::autodiff::Tape;
use segattack::losses::{evaluate, y_transform, LossKind, Reduction};
use segattack::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut tape = Tape::new();
    let yhat = tape.constant(Tensor::new(vec![4], vec![0.9, 0.9, 0.5, 0.2])?);
    let y = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 1.0])?;
    let yt = y_transform(&mut tape, &y, yhat)?;
    println!("y    = {:?}", y.data());
    println!("yhat = [0.9, 0.9, 0.5, 0.2]");
    println!("yt   = {:?}  (probability assigned to the true class)\n", tape.value(yt).data());

    let one = Tensor::new(vec![1, 1, 1, 1], vec![1.0])?;
    let half = Tensor::new(vec![1, 1, 1, 1], vec![0.5])?;
    println!("single pixel, y = 1, yhat = 0.5:");
    println!("  bce          = {:.6}  (-ln 0.5)", evaluate(&LossKind::Bce, &one, &half, Reduction::Sum)?);
    println!(
        "  focal (g=2)  = {:.6}  (0.25 * -ln 0.5)",
        evaluate(&LossKind::Focal { gamma: 2.0 }, &one, &half, Reduction::Sum)?
    );
    println!("  dice         = {:.6}", evaluate(&LossKind::Dice, &one, &half, Reduction::Mean)?);
    println!(
        "  hybrid       = {:.6}  (dice + focal)\n",
        evaluate(&LossKind::default(), &one, &half, Reduction::Mean)?
    );

    let y2 = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0])?;
    let p2 = Tensor::new(vec![1, 1, 1, 2], vec![0.8, 0.3])?;
    println!("two pixels, y = [1, 0], yhat = [0.8, 0.3]:");
    println!(
        "  bce sum  = {:.6}  (-ln 0.8 - ln 0.7)",
        evaluate(&LossKind::Bce, &y2, &p2, Reduction::Sum)?
    );
    println!(
        "  bce mean = {:.6}  (sum / pixel count)\n",
        evaluate(&LossKind::Bce, &y2, &p2, Reduction::Mean)?
    );

    println!("focal with gamma = 0 collapses to bce:");
    let b = evaluate(&LossKind::Bce, &y2, &p2, Reduction::Sum)?;
    let f0 = evaluate(&LossKind::Focal { gamma: 0.0 }, &y2, &p2, Reduction::Sum)?;
    println!("  |bce - focal(0)| = {:.2e}\n", (b - f0).abs());

    println!("dice on extreme predictions (4 pixels, all truth = 1):");
    let ones = Tensor::full(vec![1, 1, 2, 2], 1.0);
    let zeros = Tensor::zeros(vec![1, 1, 2, 2]);
    println!("  perfect    -> {:+.2e}", evaluate(&LossKind::Dice, &ones, &ones, Reduction::Mean)?);
    println!("  total miss -> {:+.6}", evaluate(&LossKind::Dice, &ones, &zeros, Reduction::Mean)?);
    println!(
        "  both empty -> {:+.6}  (literal smoothed formula)",
        evaluate(&LossKind::Dice, &zeros, &zeros, Reduction::Mean)?
    );
    Ok(())
}
