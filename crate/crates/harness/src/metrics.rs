//! Pixel-space proxy metrics. None of these are perceptual scores.

use anyhow::{bail, ensure, Result};
use maskdiff::attention::AnomalyMask;
use maskdiff::numerics::Tensor;

fn masked_mean_abs(a: &Tensor, b: &Tensor, mask: &AnomalyMask, inside: bool) -> Result<f64> {
    ensure!(a.shape() == b.shape(), "image shapes differ: {:?} vs {:?}", a.shape(), b.shape());
    let (h, w, c) = match a.shape() {
        &[h, w, c] => (h, w, c),
        other => bail!("expected [h, w, c] images, got {other:?}"),
    };
    ensure!(mask.dims() == (h, w), "mask {:?} does not match image {h}x{w}", mask.dims());
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (px, &m) in mask.as_slice().iter().enumerate() {
        if (m == 1) == inside {
            for ch in 0..c {
                let i = px * c + ch;
                sum += (a.data()[i] as f64 - b.data()[i] as f64).abs();
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean `|a − b|` over pixels outside the mask; 0 when the mask covers all.
pub fn preservation_error(a: &Tensor, b: &Tensor, mask: &AnomalyMask) -> Result<f64> {
    masked_mean_abs(a, b, mask, false)
}

/// Mean `|a − b|` over pixels inside the mask; 0 for an empty mask.
pub fn in_mask_change(a: &Tensor, b: &Tensor, mask: &AnomalyMask) -> Result<f64> {
    masked_mean_abs(a, b, mask, true)
}

/// The mask's bounding box cut from `img`, average-pooled 2×2.
pub fn mask_patch(img: &Tensor, mask: &AnomalyMask) -> Result<Vec<f32>> {
    let (h, w) = mask.dims();
    let c = match img.shape() {
        &[ih, iw, c] if (ih, iw) == (h, w) => c,
        other => bail!("image {other:?} does not match mask {h}x{w}"),
    };
    let on: Vec<(usize, usize)> = (0..h * w).filter(|&i| mask.as_slice()[i] == 1).map(|i| (i / w, i % w)).collect();
    let Some(&(first_y, _)) = on.first() else {
        return Ok(Vec::new());
    };
    let (y0, y1) = (first_y, on.iter().map(|p| p.0).max().unwrap_or(first_y));
    let x0 = on.iter().map(|p| p.1).min().unwrap_or(0);
    let x1 = on.iter().map(|p| p.1).max().unwrap_or(0);
    let mut out = Vec::new();
    for py in (y0..=y1).step_by(2) {
        for px in (x0..=x1).step_by(2) {
            for ch in 0..c {
                let (mut s, mut n) = (0.0f32, 0u32);
                for y in py..(py + 2).min(y1 + 1) {
                    for x in px..(px + 2).min(x1 + 1) {
                        s += img.data()[(y * w + x) * c + ch];
                        n += 1;
                    }
                }
                out.push(s / n as f32);
            }
        }
    }
    Ok(out)
}

/// Mean pairwise mean-absolute difference; 0 for fewer than two vectors.
pub fn diversity_score(patches: &[Vec<f32>]) -> Result<f64> {
    if let Some(first) = patches.first() {
        ensure!(
            patches.iter().all(|p| p.len() == first.len()),
            "patches have different lengths"
        );
    }
    let (mut total, mut pairs) = (0.0f64, 0usize);
    for i in 0..patches.len() {
        for j in i + 1..patches.len() {
            let (a, b) = (&patches[i], &patches[j]);
            if !a.is_empty() {
                total += a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64;
            }
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_preserve_perfectly() {
        let a = Tensor::from_fn(&[4, 4, 1], |i| i as f32 / 16.0);
        let m = AnomalyMask::from_fn(4, 4, |y, _| y == 0);
        assert_eq!(preservation_error(&a, &a, &m).unwrap(), 0.0);
    }

    #[test]
    fn full_mask_has_no_outside() {
        let a = Tensor::zeros(&[4, 4, 1]);
        let b = Tensor::full(&[4, 4, 1], 1.0);
        assert_eq!(preservation_error(&a, &b, &AnomalyMask::ones(4, 4)).unwrap(), 0.0);
        assert_eq!(in_mask_change(&a, &b, &AnomalyMask::ones(4, 4)).unwrap(), 1.0);
        assert_eq!(in_mask_change(&a, &b, &AnomalyMask::zeros(4, 4)).unwrap(), 0.0);
    }

    #[test]
    fn single_differing_pixel() {
        // 10×11 image, the last column masked: 100 outside pixels.
        let a = Tensor::zeros(&[10, 11, 1]);
        let mut b = a.clone();
        b.data_mut()[0] = 0.5;
        let m = AnomalyMask::from_fn(10, 11, |_, x| x == 10);
        assert!((preservation_error(&a, &b, &m).unwrap() - 0.005).abs() < 1e-12);
    }

    #[test]
    fn diversity_extremes_and_hand_case() {
        assert_eq!(diversity_score(&[vec![0.3; 5], vec![0.3; 5]]).unwrap(), 0.0);
        assert_eq!(diversity_score(&[vec![0.0; 8], vec![1.0; 8]]).unwrap(), 1.0);
        // Pairs: |0-1|=1, |0-0.5|=0.5, |1-0.5|=0.5 averaged over 2 entries each.
        let v = [vec![0.0, 0.0], vec![1.0, 1.0], vec![0.5, 0.5]];
        assert!((diversity_score(&v).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let rev: Vec<_> = v.iter().rev().cloned().collect();
        assert_eq!(diversity_score(&rev).unwrap(), diversity_score(&v).unwrap());
        assert_eq!(diversity_score(&[vec![1.0]]).unwrap(), 0.0);
    }

    #[test]
    fn patch_covers_the_bounding_box() {
        let img = Tensor::from_fn(&[4, 4, 1], |i| i as f32);
        let m = AnomalyMask::from_fn(4, 4, |y, x| (1..3).contains(&y) && (1..4).contains(&x));
        // Box rows 1..=2, cols 1..=3: pooled cells [(5+6+9+10)/4, (7+11)/2].
        assert_eq!(mask_patch(&img, &m).unwrap(), vec![7.5, 9.0]);
        assert!(mask_patch(&img, &AnomalyMask::zeros(4, 4)).unwrap().is_empty());
    }
}
