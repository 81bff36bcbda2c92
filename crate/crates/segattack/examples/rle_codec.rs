//! Round-trip masks through the run-length codec and show how malformed
//! run lists are rejected.

use segattack::data::rle::{rle_decode, rle_encode};
use segattack::tensor::Tensor;

fn show(mask: &Tensor, width: usize) {
    for row in mask.data().chunks(width) {
        let line: String = row.iter().map(|&v| if v == 1.0 { '#' } else { '.' }).collect();
        println!("  {line}");
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (h, w) = (5, 8);
    let mut data = vec![0.0; h * w];
    for y in 1..4 {
        for x in 2..6 {
            data[y * w + x] = 1.0;
        }
    }
    data[0] = 1.0;
    let mask = Tensor::new(vec![h, w], data)?;

    let rle = rle_encode(&mask)?;
    println!("mask ({h}x{w}):");
    show(&mask, w);
    println!("encodes to: {rle:?}");

    let back = rle_decode(&rle, h, w)?;
    assert_eq!(back.data(), mask.data());
    println!("decode(encode(mask)) == mask");

    println!("\nempty mask encodes to {:?}", rle_encode(&Tensor::zeros(vec![2, 2]))?);
    println!("\"1 4\" on 2x2 decodes to all ones: {:?}", rle_decode("1 4", 2, 2)?.data());

    println!("\nrejections:");
    for bad in ["1 2 3", "0 4", "3 0", "1 4 2 2", "60 10"] {
        match rle_decode(bad, 5, 8) {
            Err(e) => println!("  {bad:?} -> {e}"),
            Ok(_) => println!("  {bad:?} -> unexpectedly accepted"),
        }
    }
    Ok(())
}
