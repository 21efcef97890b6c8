//! Convolution, pooling and resize on a small hand-built map.

use sapnet::tensor::{avg_pool2d, conv2d, max_pool2d, resize_bilinear, Tensor};

fn show(name: &str, t: &Tensor) {
    println!("{name} {:?}", t.shape());
    let (_, h, w) = t.dims3().unwrap();
    for i in 0..h {
        let row: Vec<String> = (0..w).map(|j| format!("{:6.2}", t.at3(0, i, j))).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> sapnet::Result<()> {
    // a diagonal ramp, one channel
    let x = Tensor::from_fn(&[1, 6, 6], |i| {
        let (r, c) = (i / 6, i % 6);
        (r + c) as f64
    });
    show("input", &x);

    // 3x3 Laplacian, zero padded
    let k = Tensor::new(&[1, 1, 3, 3], vec![0., 1., 0., 1., -4., 1., 0., 1., 0.])?;
    let bias = Tensor::zeros(&[1]);
    show("laplacian (pad 1)", &conv2d(&x, &k, &bias, 1, 1)?);
    show("avg pool k=3", &avg_pool2d(&x, 3)?);
    show("max pool k=4", &max_pool2d(&x, 4)?);
    show("bilinear 6x6 -> 3x3", &resize_bilinear(&x, 3, 3)?);
    Ok(())
}
