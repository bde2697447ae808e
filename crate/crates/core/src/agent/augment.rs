//! Random-shift augmentation for image observations.

use rand::Rng;

/// Shifts each `[C, H, W]` image in `data` by an independent integer offset in
/// `[-pad, pad]²`, filling uncovered cells by replicating the nearest edge.
/// Equivalent to replicate-padding by `pad` and cropping back at random.
pub fn random_shift(data: &[f64], shape: [usize; 3], pad: usize, rng: &mut impl Rng) -> Vec<f64> {
    let [c, h, w] = shape;
    let per = c * h * w;
    assert!(per > 0 && data.len().is_multiple_of(per), "data is not a whole number of images");
    if pad == 0 {
        return data.to_vec();
    }
    let p = pad as i64;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(per).zip(out.chunks_exact_mut(per)) {
        let dy = rng.random_range(-p..=p);
        let dx = rng.random_range(-p..=p);
        shift_one(src, dst, shape, dy as isize, dx as isize);
    }
    out
}

/// `dst[c][i][j] = src[c][clamp(i + dy)][clamp(j + dx)]`.
pub fn shift_one(src: &[f64], dst: &mut [f64], shape: [usize; 3], dy: isize, dx: isize) {
    let [c, h, w] = shape;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            let si = clamp(i as isize + dy, h);
            for j in 0..w {
                let sj = clamp(j as isize + dx, w);
                dst[base + i * w + j] = src[base + si * w + sj];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_offset_is_identity() {
        let src: Vec<f64> = (0..2 * 3 * 4).map(f64::from).collect();
        let mut dst = vec![0.0; src.len()];
        shift_one(&src, &mut dst, [2, 3, 4], 0, 0);
        assert_eq!(src, dst);
    }

    #[test]
    fn shift_moves_content_and_replicates_edges() {
        // 1 channel, 1 row: [0 1 2 3] shifted right by one reads from j-1.
        let src = [0.0, 1.0, 2.0, 3.0];
        let mut dst = [0.0; 4];
        shift_one(&src, &mut dst, [1, 1, 4], 0, -1);
        assert_eq!(dst, [0.0, 0.0, 1.0, 2.0]);
        shift_one(&src, &mut dst, [1, 1, 4], 0, 2);
        assert_eq!(dst, [2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn output_shape_and_value_set_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src: Vec<f64> = (0..3 * 3 * 9 * 9).map(|i| (i % 7) as f64).collect();
        let out = random_shift(&src, [3, 9, 9], 2, &mut rng);
        assert_eq!(out.len(), src.len());
        assert!(out.iter().all(|v| src.contains(v)));
    }
}
