//! Pastes a subject layer over a generated background.

use crate::raster::{Channels, ImageBuffer, ImageError, MaskedSubject};

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeOutput {
    pub image: ImageBuffer,
    /// Fraction of pixels with non-zero subject alpha.
    pub foreground_coverage: f64,
}

/// Blends the subject over `background` and reports subject coverage.
pub fn merge(
    foreground: &MaskedSubject,
    background: &ImageBuffer,
) -> Result<CompositeOutput, ImageError> {
    let image = merge_rgba(foreground.cutout(), background)?;
    let covered = foreground
        .cutout()
        .data()
        .chunks_exact(4)
        .filter(|p| p[3] > 0)
        .count();
    Ok(CompositeOutput {
        image,
        foreground_coverage: covered as f64 / foreground.cutout().pixel_count() as f64,
    })
}

/// Per pixel `out = a·fg + (1 - a)·bg` with `a = alpha / 255`.
///
/// Computed in integers as `(alpha·fg + (255 - alpha)·bg) / 255` rounded to
/// nearest; the numerator is an integer so an exact .5 tie never occurs. Fully
/// opaque pixels copy `fg`, fully transparent ones copy `bg`, and the RGB of a
/// transparent foreground pixel is never read.
pub fn merge_rgba(
    foreground: &ImageBuffer,
    background: &ImageBuffer,
) -> Result<ImageBuffer, ImageError> {
    if foreground.channels() != Channels::Rgba8 {
        return Err(ImageError::WrongChannels {
            expected: Channels::Rgba8,
            actual: foreground.channels(),
        });
    }
    if background.channels() != Channels::Rgb8 {
        return Err(ImageError::WrongChannels {
            expected: Channels::Rgb8,
            actual: background.channels(),
        });
    }
    foreground.same_dimensions(background)?;

    let mut out = Vec::with_capacity(background.data().len());
    for (fg, bg) in foreground
        .data()
        .chunks_exact(4)
        .zip(background.data().chunks_exact(3))
    {
        match fg[3] {
            0 => out.extend_from_slice(bg),
            255 => out.extend_from_slice(&fg[..3]),
            a => {
                let a = u32::from(a);
                for c in 0..3 {
                    let num = a * u32::from(fg[c]) + (255 - a) * u32::from(bg[c]);
                    out.push(((num + 127) / 255) as u8);
                }
            }
        }
    }
    ImageBuffer::new(background.width(), background.height(), Channels::Rgb8, out)
}

/// Center-crops `background` to the target aspect ratio, then resizes it
/// bilinearly to exactly `target`. Alpha, if present, is dropped.
pub fn resize_background(
    background: &ImageBuffer,
    target: (u32, u32),
) -> Result<ImageBuffer, ImageError> {
    let (tw, th) = target;
    if tw == 0 || th == 0 {
        return Err(ImageError::ZeroDimension {
            width: tw,
            height: th,
        });
    }
    let src = background.to_rgb8();
    let (sw, sh) = src.dimensions();
    if (sw, sh) == target {
        return Ok(src);
    }

    // Largest centered window with the target aspect ratio.
    let (sw_f, sh_f, tw_f, th_f) = (f64::from(sw), f64::from(sh), f64::from(tw), f64::from(th));
    let (crop_w, crop_h) = if sw_f * th_f > sh_f * tw_f {
        (sh_f * tw_f / th_f, sh_f)
    } else {
        (sw_f, sw_f * th_f / tw_f)
    };
    let (crop_x, crop_y) = ((sw_f - crop_w) / 2.0, (sh_f - crop_h) / 2.0);
    let (step_x, step_y) = (crop_w / tw_f, crop_h / th_f);

    let axis = |i: u32, origin: f64, step: f64, n: u32| {
        let pos = (origin + (f64::from(i) + 0.5) * step - 0.5).clamp(0.0, f64::from(n - 1));
        let i0 = pos.floor() as u32;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - f64::from(i0))
    };
    let cols: Vec<_> = (0..tw).map(|x| axis(x, crop_x, step_x, sw)).collect();
    let mut data = Vec::with_capacity(tw as usize * th as usize * 3);
    for y in 0..th {
        let (y0, y1, ty) = axis(y, crop_y, step_y, sh);
        for &(x0, x1, tx) in &cols {
            let (p00, p10, p01, p11) = (
                src.pixel(x0, y0),
                src.pixel(x1, y0),
                src.pixel(x0, y1),
                src.pixel(x1, y1),
            );
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - tx) + f64::from(p10[c]) * tx;
                let bottom = f64::from(p01[c]) * (1.0 - tx) + f64::from(p11[c]) * tx;
                data.push((top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer::new(tw, th, Channels::Rgb8, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{cutout_subject, SubjectMask};

    fn checkerboard(w: u32, h: u32) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| {
            if (x + y) % 2 == 0 {
                [10, 20, 30]
            } else {
                [200, 210, 220]
            }
        })
        .unwrap()
    }

    #[test]
    fn opaque_foreground_wins() {
        let fg = ImageBuffer::from_fn(5, 4, |x, y| [x as u8, y as u8, 99, 255]).unwrap();
        let out = merge_rgba(&fg, &checkerboard(5, 4)).unwrap();
        assert_eq!(out, fg.to_rgb8());
    }

    #[test]
    fn transparent_foreground_shows_background() {
        let fg = ImageBuffer::filled(5, 4, &[0, 0, 0, 0]).unwrap();
        let bg = checkerboard(5, 4);
        assert_eq!(merge_rgba(&fg, &bg).unwrap(), bg);
    }

    #[test]
    fn binary_mask_matches_branch_oracle() {
        let img =
            ImageBuffer::from_fn(16, 12, |x, y| [(x * 13) as u8, (y * 17) as u8, 77]).unwrap();
        let mask = SubjectMask::from_fn(16, 12, |x, y| (x * y) % 3 == 1).unwrap();
        let subject = cutout_subject(&img, &mask).unwrap();
        let bg = checkerboard(16, 12);
        let merged = merge(&subject, &bg).unwrap();
        let (out, coverage) = (merged.image, merged.foreground_coverage);
        for y in 0..12 {
            for x in 0..16 {
                let expected = if mask.get(x, y) {
                    img.pixel(x, y)
                } else {
                    bg.pixel(x, y)
                };
                assert_eq!(out.pixel(x, y), expected);
            }
        }
        assert_eq!(coverage, mask.popcount() as f64 / 192.0);
    }

    #[test]
    fn half_alpha_rounds_to_nearest() {
        let fg = ImageBuffer::filled(1, 1, &[255, 0, 100, 128]).unwrap();
        let bg = ImageBuffer::filled(1, 1, &[0, 255, 100]).unwrap();
        // 128*255/255 = 128; 127*255/255 = 127; 100 exactly.
        assert_eq!(merge_rgba(&fg, &bg).unwrap().data(), &[128, 127, 100]);
    }

    #[test]
    fn transparent_rgb_is_never_read() {
        let mut fg = ImageBuffer::from_fn(
            6,
            6,
            |x, _| if x < 3 { [9, 9, 9, 255] } else { [0, 0, 0, 0] },
        )
        .unwrap();
        let bg = checkerboard(6, 6);
        let clean = merge_rgba(&fg, &bg).unwrap();
        for y in 0..6 {
            for x in 3..6 {
                fg.pixel_mut(x, y)[..3].copy_from_slice(&[255, 1, 128]);
            }
        }
        assert_eq!(merge_rgba(&fg, &bg).unwrap(), clean);
    }

    #[test]
    fn merge_rejects_mismatched_sizes() {
        let fg = ImageBuffer::filled(4, 4, &[1, 2, 3, 255]).unwrap();
        assert!(matches!(
            merge_rgba(&fg, &checkerboard(4, 5)),
            Err(ImageError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn resize_same_size_is_copy() {
        let bg = checkerboard(7, 9);
        assert_eq!(resize_background(&bg, (7, 9)).unwrap(), bg);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let bg = ImageBuffer::filled(2, 2, &[12, 200, 73]).unwrap();
        let out = resize_background(&bg, (4, 4)).unwrap();
        assert_eq!(out, ImageBuffer::filled(4, 4, &[12, 200, 73]).unwrap());
        let odd =
            resize_background(&ImageBuffer::filled(30, 7, &[5, 6, 7]).unwrap(), (11, 13)).unwrap();
        assert!(odd.data().chunks_exact(3).all(|p| p == [5, 6, 7]));
    }

    #[test]
    fn resize_downsample_keeps_gradient_monotone() {
        let bg = ImageBuffer::from_fn(1024, 1024, |x, y| {
            let v = ((x + 4 * y) / 20) as u8;
            [v, v, v]
        })
        .unwrap();
        let out = resize_background(&bg, (512, 512)).unwrap();
        let row_mean =
            |y: u32| (0..512).map(|x| f64::from(out.pixel(x, y)[0])).sum::<f64>() / 512.0;
        let means: Vec<f64> = (0..512).map(row_mean).collect();
        assert!(means.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn resize_center_crops_wide_input() {
        // Left and right thirds red, center third blue: a square crop sees only blue.
        let bg = ImageBuffer::from_fn(30, 10, |x, _| {
            if (10..20).contains(&x) {
                [0, 0, 255]
            } else {
                [255, 0, 0]
            }
        })
        .unwrap();
        let out = resize_background(&bg, (5, 5)).unwrap();
        assert!(out.data().chunks_exact(3).all(|p| p == [0, 0, 255]));
    }
}
