use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renderer::{BBox, Image};

fn region(rendered: &Image, observed: &Image, crop: Option<&BBox>) -> Result<BBox> {
    if !rendered.same_size(observed) {
        return Err(Error::Parameter(format!(
            "image sizes differ: {}x{} vs {}x{}",
            rendered.width, rendered.height, observed.width, observed.height
        )));
    }
    let b = crop.copied().unwrap_or_else(|| BBox::full(rendered));
    if b.x1 > rendered.width || b.y1 > rendered.height || b.area() == 0 {
        return Err(Error::Parameter(format!(
            "crop {b:?} outside a {}x{} image",
            rendered.width, rendered.height
        )));
    }
    Ok(b)
}

/// Mean absolute difference over the pixels and channels of `crop`.
pub fn photometric_loss(rendered: &Image, observed: &Image, crop: Option<&BBox>) -> Result<f64> {
    let b = region(rendered, observed, crop)?;
    let mut sum = 0.0;
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let i = 3 * (y * rendered.width + x);
            for c in 0..3 {
                sum += (rendered.data[i + c] - observed.data[i + c]).abs();
            }
        }
    }
    Ok(sum / (3 * b.area()) as f64)
}

/// Loss and its gradient with respect to `rendered`. The gradient at an
/// exact tie is 0.
pub fn photometric_loss_grad(rendered: &Image, observed: &Image, crop: Option<&BBox>) -> Result<(f64, Image)> {
    let b = region(rendered, observed, crop)?;
    let inv = 1.0 / (3 * b.area()) as f64;
    let mut grad = Image::new(rendered.width, rendered.height);
    let mut sum = 0.0;
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let i = 3 * (y * rendered.width + x);
            for c in 0..3 {
                let d = rendered.data[i + c] - observed.data[i + c];
                sum += d.abs();
                grad.data[i + c] = if d > 0.0 {
                    inv
                } else if d < 0.0 {
                    -inv
                } else {
                    0.0
                };
            }
        }
    }
    Ok((sum * inv, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraLoss {
    pub camera: String,
    pub frame: usize,
    pub l1: f64,
}

/// Terms of the training objective `total = l1 + lambda_reg * l_reg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    pub l_reg: f64,
    pub lambda_reg: f64,
    pub per_camera: Vec<CameraLoss>,
}

impl LossReport {
    pub fn new(per_camera: Vec<CameraLoss>, l_reg: f64, lambda_reg: f64) -> Self {
        let l1 = if per_camera.is_empty() {
            0.0
        } else {
            per_camera.iter().map(|c| c.l1).sum::<f64>() / per_camera.len() as f64
        };
        Self {
            total: l1 + lambda_reg * l_reg,
            l1,
            l_reg,
            lambda_reg,
            per_camera,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_have_zero_loss() {
        let a = Image::filled(4, 3, [0.3, 0.6, 0.9]);
        assert_eq!(photometric_loss(&a, &a, None).unwrap(), 0.0);
    }

    #[test]
    fn uniform_difference() {
        let a = Image::filled(5, 5, [0.5; 3]);
        let b = Image::filled(5, 5, [0.7; 3]);
        assert!((photometric_loss(&a, &b, None).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn half_pixels_differ() {
        let a = Image::new(4, 4);
        let mut b = Image::new(4, 4);
        for y in 0..2 {
            for x in 0..4 {
                b.set_pixel(x, y, &nalgebra::Vector3::repeat(0.4));
            }
        }
        assert!((photometric_loss(&a, &b, None).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn crop_restricts_region() {
        let a = Image::new(4, 4);
        let mut b = Image::new(4, 4);
        b.set_pixel(3, 3, &nalgebra::Vector3::repeat(1.0));
        let crop = BBox {
            x0: 0,
            y0: 0,
            x1: 2,
            y1: 2,
        };
        assert_eq!(photometric_loss(&a, &b, Some(&crop)).unwrap(), 0.0);
    }

    #[test]
    fn size_mismatch_is_error() {
        assert!(matches!(
            photometric_loss(&Image::new(2, 2), &Image::new(3, 2), None),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn gradient_is_scaled_sign() {
        let a = Image::filled(2, 1, [0.5; 3]);
        let mut b = Image::filled(2, 1, [0.5; 3]);
        b.data[0] = 0.7;
        b.data[4] = 0.1;
        let (l, g) = photometric_loss_grad(&a, &b, None).unwrap();
        assert!((l - photometric_loss(&a, &b, None).unwrap()).abs() < 1e-15);
        assert_eq!(g.data, vec![-1.0 / 6.0, 0.0, 0.0, 0.0, 1.0 / 6.0, 0.0]);
    }

    #[test]
    fn report_total() {
        let r = LossReport::new(
            vec![CameraLoss {
                camera: "c0".into(),
                frame: 0,
                l1: 0.25,
            }],
            0.125,
            2.0,
        );
        assert_eq!(r.total, r.l1 + r.lambda_reg * r.l_reg);
    }
}
