use crate::error::{Error, Result};

/// Row-major grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("gray_image", "pixels", height * width, data.len()));
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        GrayImage { height, width, data: vec![value; height * width] }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Source coordinate and blend weight along one axis.
fn taps(out: usize, inp: usize) -> Vec<(usize, usize, f32)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (align-corners off).
pub fn bilinear_resize(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    const OP: &str = "bilinear_resize";
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(OP, format!("output extent {out_h}x{out_w}")));
    }
    if img.height < 2 || img.width < 2 {
        return Err(Error::invalid(OP, format!("input extent {}x{} is below 2x2", img.height, img.width)));
    }
    let (ty, tx) = (taps(out_h, img.height), taps(out_w, img.width));
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
            let bottom = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(GrayImage { height: out_h, width: out_w, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::new(h, w, (0..h * w).map(|i| ((i / w) * 3 + (i % w)) as f32).collect()).unwrap()
    }

    #[test]
    fn same_size_is_identity() {
        let img = ramp(7, 5);
        assert_eq!(bilinear_resize(&img, 7, 5).unwrap(), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = GrayImage::filled(128, 128, 0.3);
        let out = bilinear_resize(&img, 80, 80).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let up = bilinear_resize(&img, 200, 3).unwrap();
        assert!(up.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn monotone_ramp_stays_monotone() {
        let img = ramp(9, 13);
        for (h, w) in [(80, 80), (4, 5), (20, 31)] {
            let out = bilinear_resize(&img, h, w).unwrap();
            for y in 0..h {
                for x in 1..w {
                    assert!(out.at(y, x) >= out.at(y, x - 1));
                }
            }
            for y in 1..h {
                assert!(out.at(y, 0) >= out.at(y - 1, 0));
            }
        }
    }

    #[test]
    fn halving_averages_pairs() {
        let img = GrayImage::new(2, 4, vec![0.0, 2.0, 4.0, 6.0, 10.0, 12.0, 14.0, 16.0]).unwrap();
        let out = bilinear_resize(&img, 1, 2).unwrap();
        assert_eq!(out.data, vec![6.0, 10.0]);
    }

    #[test]
    fn rejects_bad_extents() {
        assert!(bilinear_resize(&ramp(4, 4), 0, 4).is_err());
        assert!(bilinear_resize(&ramp(1, 4), 2, 2).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
    }
}
