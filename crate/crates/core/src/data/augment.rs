use ndarray::Array2;
use rand::Rng;

/// Zero-pads every frame of a `[time, channels*height*width]` sample by `pad`
/// on each side and crops back to `height x width` at one random offset
/// shared by all time steps.
pub fn random_crop<R: Rng>(
    sample: &Array2<f32>,
    channels: usize,
    height: usize,
    width: usize,
    pad: usize,
    rng: &mut R,
) -> Array2<f32> {
    debug_assert_eq!(sample.ncols(), channels * height * width);
    let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    shift(sample, channels, height, width, dy, dx)
}

fn shift(sample: &Array2<f32>, channels: usize, height: usize, width: usize, dy: isize, dx: isize) -> Array2<f32> {
    let mut out = Array2::zeros(sample.dim());
    for t in 0..sample.nrows() {
        for c in 0..channels {
            for y in 0..height {
                let sy = y as isize + dy;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for x in 0..width {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    out[[t, (c * height + y) * width + x]] = sample[[t, (c * height + sy as usize) * width + sx as usize]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crop_with_zero_pad_is_identity() {
        let s = Array2::from_shape_fn((2, 18), |(t, i)| (t * 18 + i) as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&s, 2, 3, 3, 0, &mut rng), s);
    }

    #[test]
    fn shift_moves_content_and_fills_zero() {
        let s = Array2::from_shape_fn((1, 9), |(_, i)| i as f32 + 1.0);
        let out = shift(&s, 1, 3, 3, 1, 0);
        assert_eq!(out.row(0).to_vec(), vec![4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let crop = random_crop(&s, 1, 3, 3, 4, &mut rng);
        assert!(crop.sum() <= s.sum());
    }
}
